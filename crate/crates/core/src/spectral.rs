//! Discrete Fourier helpers shared by the oracle and the metrics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::scalar::Real;

/// Forward DFT of a real sequence (unnormalized).
pub fn dft<T: Real>(signal: &[T]) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = signal.iter().map(|&v| Complex::new(v, T::zero())).collect();
    if buf.is_empty() {
        return buf;
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Magnitudes of the DFT bins `0..=n/2`.
pub fn dft_magnitude<T: Real>(signal: &[T]) -> Vec<T> {
    let n = signal.len();
    dft(signal).into_iter().take(n / 2 + 1).map(|c| c.norm()).collect()
}

/// Forward 2D DFT of a row-major `nx × ny` real grid (x fastest).
pub fn dft2<T: Real>(data: &[T], nx: usize, ny: usize) -> Vec<Complex<T>> {
    assert_eq!(data.len(), nx * ny);
    let mut buf: Vec<Complex<T>> = data.iter().map(|&v| Complex::new(v, T::zero())).collect();
    let mut planner = FftPlanner::new();
    let fx = planner.plan_fft_forward(nx);
    for row in buf.chunks_mut(nx) {
        fx.process(row);
    }
    let fy = planner.plan_fft_forward(ny);
    let mut col = vec![Complex::new(T::zero(), T::zero()); ny];
    for x in 0..nx {
        for y in 0..ny {
            col[y] = buf[y * nx + x];
        }
        fy.process(&mut col);
        for y in 0..ny {
            buf[y * nx + x] = col[y];
        }
    }
    buf
}

/// Frequency (in bins, fractional) of the first crossing below
/// `fraction × peak` scanning outward from DC, linearly interpolated
/// between bins. `None` if the magnitude never drops below the level.
pub fn first_crossing<T: Real>(magnitude: &[T], fraction: T) -> Option<T> {
    let peak = magnitude.iter().copied().fold(T::zero(), T::max);
    if !(peak > T::zero()) {
        return None;
    }
    let level = fraction * peak;
    for k in 1..magnitude.len() {
        let (prev, cur) = (magnitude[k - 1], magnitude[k]);
        if cur < level {
            let t = if prev > cur { (prev - level) / (prev - cur) } else { T::zero() };
            return Some(T::from_usize_lossy(k - 1) + t.max(T::zero()).min(T::one()));
        }
    }
    None
}
