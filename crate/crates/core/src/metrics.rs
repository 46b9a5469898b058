//! Blur-diameter estimation, slit MTF and least-squares line fits.

use thiserror::Error;

use crate::image::Image;
use crate::scalar::Real;
use crate::spectral::{dft_magnitude, first_crossing};

/// Spots narrower than this are reported with low confidence.
pub const RELIABLE_DIAMETER_PX: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no spot above background near ({x}, {y})")]
    NoSpot { x: f64, y: f64 },
    #[error("no line target found")]
    NoLine,
    #[error("line fit needs at least two distinct x values")]
    DegenerateFit,
    #[error("line fit got {xs} x values and {ys} y values")]
    LengthMismatch { xs: usize, ys: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurEstimate<T> {
    pub diameter_px: T,
    pub horizontal_px: T,
    pub vertical_px: T,
    /// Set when the spot is below [`RELIABLE_DIAMETER_PX`].
    pub low_confidence: bool,
}

fn median<T: Real>(mut v: Vec<T>) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::lit(0.5)
    }
}

/// Width of the run above `level` that contains index `center`, with both
/// edges located by linear interpolation between samples.
fn width_above<T: Real>(profile: &[T], center: usize, level: T) -> T {
    let n = profile.len();
    let mut lo = center;
    while lo > 0 && profile[lo - 1] >= level {
        lo -= 1;
    }
    let mut hi = center;
    while hi + 1 < n && profile[hi + 1] >= level {
        hi += 1;
    }
    let edge = |inside: T, outside: T| -> T {
        if inside > outside {
            (inside - level) / (inside - outside)
        } else {
            T::zero()
        }
    };
    let left = if lo > 0 {
        T::from_usize_lossy(lo) - edge(profile[lo], profile[lo - 1])
    } else {
        T::from_usize_lossy(lo) - T::lit(0.5)
    };
    let right = if hi + 1 < n {
        T::from_usize_lossy(hi) + edge(profile[hi], profile[hi + 1])
    } else {
        T::from_usize_lossy(hi) + T::lit(0.5)
    };
    right - left
}

/// Half-peak diameter of the spot near `spot_center`, searched in a square
/// window of `half_window` pixels around it.
///
/// The local background is the median of the window's border pixels. The
/// width above `background + peak/2` is taken along the row and the column
/// through the centroid of the above-threshold region and averaged.
pub fn estimate_blur_diameter<T: Real>(
    image: &Image<T>,
    spot_center: (T, T),
    half_window: usize,
) -> Result<BlurEstimate<T>, MetricsError> {
    let (w, h) = image.dims();
    let no_spot = MetricsError::NoSpot { x: spot_center.0.as_f64(), y: spot_center.1.as_f64() };
    let cx = spot_center.0.round().to_isize().ok_or(no_spot.clone())?;
    let cy = spot_center.1.round().to_isize().ok_or(no_spot.clone())?;
    let hw = half_window as isize;
    let x0 = (cx - hw).max(0) as usize;
    let y0 = (cy - hw).max(0) as usize;
    let x1 = ((cx + hw).min(w as isize - 1)).max(0) as usize;
    let y1 = ((cy + hw).min(h as isize - 1)).max(0) as usize;
    if x0 > x1 || y0 > y1 || cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
        return Err(no_spot);
    }

    let mut border = Vec::new();
    for x in x0..=x1 {
        border.push(image.get(x, y0));
        border.push(image.get(x, y1));
    }
    for y in y0 + 1..y1 {
        border.push(image.get(x0, y));
        border.push(image.get(x1, y));
    }
    let background = median(border);

    let mut peak = T::neg_infinity();
    let mut px = x0;
    let mut py = y0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = image.get(x, y);
            if v > peak {
                peak = v;
                px = x;
                py = y;
            }
        }
    }
    let height = peak - background;
    if !(height > T::zero()) || height <= T::epsilon() * background.abs() {
        return Err(no_spot);
    }
    let level = background + height * T::lit(0.5);

    // cut through the centroid of the above-threshold region, which stays
    // central on flat-topped discs where the brightest pixel may sit on a rim
    let (mut sx, mut sy, mut count) = (T::zero(), T::zero(), T::zero());
    for y in y0..=y1 {
        for x in x0..=x1 {
            if image.get(x, y) >= level {
                sx = sx + T::from_usize_lossy(x);
                sy = sy + T::from_usize_lossy(y);
                count = count + T::one();
            }
        }
    }
    let gx = (sx / count).round().to_usize().unwrap_or(px).clamp(x0, x1);
    let gy = (sy / count).round().to_usize().unwrap_or(py).clamp(y0, y1);
    if image.get(gx, gy) >= level {
        px = gx;
        py = gy;
    }

    let row: Vec<T> = (x0..=x1).map(|x| image.get(x, py)).collect();
    let col: Vec<T> = (y0..=y1).map(|y| image.get(px, y)).collect();
    let horizontal = width_above(&row, px - x0, level);
    let vertical = width_above(&col, py - y0, level);
    let diameter = (horizontal + vertical) * T::lit(0.5);
    Ok(BlurEstimate {
        diameter_px: diameter,
        horizontal_px: horizontal,
        vertical_px: vertical,
        low_confidence: diameter < T::lit(RELIABLE_DIAMETER_PX),
    })
}

/// Direction in which a slit target runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlitAxis {
    /// Line along `y`; the line-spread function is taken along `x`.
    Vertical,
    /// Line along `x`; the line-spread function is taken along `y`.
    Horizontal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtfCurve<T> {
    /// Cycles per pixel, ascending from 0 to Nyquist.
    pub frequencies: Vec<T>,
    /// DFT magnitude of the line-spread function normalized to DC.
    pub modulation: Vec<T>,
}

impl<T: Real> MtfCurve<T> {
    fn bin_width(&self) -> T {
        if self.frequencies.len() > 1 {
            self.frequencies[1]
        } else {
            T::zero()
        }
    }

    /// Frequency where modulation first falls to one half. Curves that never
    /// drop that low report the Nyquist frequency, 0.5 cycles/px.
    pub fn mtf50(&self) -> T {
        match first_crossing(&self.modulation, T::lit(0.5)) {
            Some(bins) => bins * self.bin_width(),
            None => T::lit(0.5),
        }
    }

    /// First local minimum of the modulation, refined by a parabola through
    /// its neighbours. `None` if the curve is monotone.
    pub fn first_null(&self) -> Option<T> {
        let m = &self.modulation;
        for k in 1..m.len().saturating_sub(1) {
            if m[k] <= m[k - 1] && m[k] < m[k + 1] {
                let denom = m[k - 1] - T::lit(2.0) * m[k] + m[k + 1];
                let shift = if denom > T::zero() {
                    T::lit(0.5) * (m[k - 1] - m[k + 1]) / denom
                } else {
                    T::zero()
                };
                return Some((T::from_usize_lossy(k) + shift) * self.bin_width());
            }
        }
        None
    }
}

/// Line-spread function averaged across the slit direction.
pub fn line_spread<T: Real>(image: &Image<T>, axis: SlitAxis) -> Vec<T> {
    let (w, h) = image.dims();
    match axis {
        SlitAxis::Vertical => {
            let mut lsf = vec![T::zero(); w];
            for y in 0..h {
                for (acc, &v) in lsf.iter_mut().zip(image.row(y)) {
                    *acc = *acc + v;
                }
            }
            lsf.iter().map(|&v| v / T::from_usize_lossy(h)).collect()
        }
        SlitAxis::Horizontal => (0..h)
            .map(|y| image.row(y).iter().fold(T::zero(), |a, &b| a + b) / T::from_usize_lossy(w))
            .collect(),
    }
}

/// MTF of a slit target. The background (minimum of the line-spread
/// function) is removed before transforming.
pub fn mtf_from_slit<T: Real>(image: &Image<T>, axis: SlitAxis) -> Result<MtfCurve<T>, MetricsError> {
    let lsf = line_spread(image, axis);
    let lo = lsf.iter().copied().fold(T::infinity(), T::min);
    let hi = lsf.iter().copied().fold(T::neg_infinity(), T::max);
    if lsf.len() < 4 || !(hi > lo) {
        return Err(MetricsError::NoLine);
    }
    let centered: Vec<T> = lsf.iter().map(|&v| v - lo).collect();
    let mag = dft_magnitude(&centered);
    let dc = mag[0];
    let n = T::from_usize_lossy(lsf.len());
    Ok(MtfCurve {
        frequencies: (0..mag.len()).map(|k| T::from_usize_lossy(k) / n).collect(),
        modulation: mag.iter().map(|&m| m / dc).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit<T> {
    pub slope: T,
    pub intercept: T,
    /// Coefficient of determination; 1 when `ys` has zero variance.
    pub r_squared: T,
}

impl<T: Real> LinearFit<T> {
    pub fn predict(&self, x: T) -> T {
        self.slope * x + self.intercept
    }
}

/// Ordinary least-squares line through `(xs, ys)`.
pub fn linear_fit<T: Real>(xs: &[T], ys: &[T]) -> Result<LinearFit<T>, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch { xs: xs.len(), ys: ys.len() });
    }
    if xs.len() < 2 {
        return Err(MetricsError::DegenerateFit);
    }
    let n = T::from_usize_lossy(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let sxx: T = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    if sxx == T::zero() {
        return Err(MetricsError::DegenerateFit);
    }
    let sxy: T = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let syy: T = ys.iter().map(|&y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: T = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let r_squared = if syy == T::zero() { T::one() } else { T::one() - ss_res / syy };
    Ok(LinearFit { slope, intercept, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::disc_blur;
    use proptest::prelude::*;

    fn spot(size: usize, diameter: f64) -> Image<f64> {
        let mut im = Image::zeros(size, size);
        im.set(size / 2, size / 2, 1.0);
        disc_blur(&im, diameter).unwrap()
    }

    #[test]
    fn disc_diameter_recovered() {
        let c = 32.0;
        let e = estimate_blur_diameter(&spot(65, 21.0), (c, c), 20).unwrap();
        assert!((e.diameter_px - 21.0).abs() <= 1.0, "{e:?}");
        assert!(!e.low_confidence);
    }

    #[test]
    fn single_pixel_is_one_px() {
        let e = estimate_blur_diameter(&spot(15, 0.0), (7.0, 7.0), 5).unwrap();
        assert!((e.diameter_px - 1.0).abs() < 1e-12);
        assert!(e.low_confidence);
    }

    #[test]
    fn small_disc_is_low_confidence() {
        let e = estimate_blur_diameter(&spot(15, 2.0), (7.0, 7.0), 5).unwrap();
        assert!(e.low_confidence);
    }

    #[test]
    fn empty_window_is_no_spot() {
        let im = Image::<f64>::filled(9, 9, 0.3);
        assert!(matches!(
            estimate_blur_diameter(&im, (4.0, 4.0), 3),
            Err(MetricsError::NoSpot { .. })
        ));
    }

    #[test]
    fn background_is_subtracted() {
        let base = spot(41, 9.0);
        let lifted = base.map(|v| v + 0.01);
        let a = estimate_blur_diameter(&base, (20.0, 20.0), 15).unwrap();
        let b = estimate_blur_diameter(&lifted, (20.0, 20.0), 15).unwrap();
        assert!((a.diameter_px - b.diameter_px).abs() < 1e-9);
    }

    fn slit(w: usize, h: usize) -> Image<f64> {
        Image::from_fn(w, h, |x, _| if x == w / 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn sharp_slit_mtf() {
        let m = mtf_from_slit(&slit(128, 8), SlitAxis::Vertical).unwrap();
        assert_eq!(m.modulation[0], 1.0);
        assert!(m.mtf50() >= 0.25);
        assert!(m.frequencies.windows(2).all(|w| w[0] < w[1]));
        let transposed = Image::from_fn(8, 128, |_, y| if y == 64 { 1.0 } else { 0.0 });
        let t = mtf_from_slit(&transposed, SlitAxis::Horizontal).unwrap();
        assert_eq!(t.modulation, m.modulation);
    }

    #[test]
    fn wider_blur_lowers_mtf50() {
        let base = slit(256, 64);
        let m7 = mtf_from_slit(&disc_blur(&base, 7.0).unwrap(), SlitAxis::Vertical).unwrap();
        let m21 = mtf_from_slit(&disc_blur(&base, 21.0).unwrap(), SlitAxis::Vertical).unwrap();
        assert!(m21.mtf50() < m7.mtf50());
        assert!(m21.modulation.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn disc_first_null() {
        for d in [9.0, 15.0, 21.0] {
            let m = mtf_from_slit(&disc_blur(&slit(512, 64), d).unwrap(), SlitAxis::Vertical).unwrap();
            let null = m.first_null().unwrap();
            let expected = 1.22 / d;
            assert!((null - expected).abs() <= 0.1 * expected, "d={d}: {null} vs {expected}");
        }
    }

    #[test]
    fn no_line_is_an_error() {
        let flat = Image::<f64>::filled(32, 4, 0.2);
        assert_eq!(mtf_from_slit(&flat, SlitAxis::Vertical), Err(MetricsError::NoLine));
    }

    #[test]
    fn fit_exact_line_and_constant() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let f = linear_fit(&xs, &ys).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        let c = linear_fit(&xs, &[3.0; 10]).unwrap();
        assert_eq!((c.slope, c.r_squared), (0.0, 1.0));
        assert_eq!(linear_fit(&[1.0, 1.0], &[0.0, 2.0]), Err(MetricsError::DegenerateFit));
    }

    proptest! {
        #[test]
        fn diameter_is_scale_invariant(d in 0.0f64..20.0, s in 0.01f64..100.0) {
            let im = spot(49, d);
            let a = estimate_blur_diameter(&im, (24.0, 24.0), 22).unwrap();
            let b = estimate_blur_diameter(&im.scale(s), (24.0, 24.0), 22).unwrap();
            prop_assert!((a.diameter_px - b.diameter_px).abs() < 1e-9);
        }

        #[test]
        fn fit_residuals_orthogonal_to_xs(pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40)) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
            let f = linear_fit(&xs, &ys).unwrap();
            let dot: f64 = xs.iter().zip(&ys).map(|(&x, &y)| x * (y - f.predict(x))).sum();
            let sum: f64 = xs.iter().zip(&ys).map(|(&x, &y)| y - f.predict(x)).sum();
            prop_assert!(dot.abs() < 1e-9 && sum.abs() < 1e-9);
        }

        #[test]
        fn mtf_nonincreasing_with_blur(d in 1.0f64..15.0, extra in 0.5f64..10.0) {
            let base = slit(256, 32);
            let a = mtf_from_slit(&disc_blur(&base, d).unwrap(), SlitAxis::Vertical).unwrap();
            let b = mtf_from_slit(&disc_blur(&base, d + extra).unwrap(), SlitAxis::Vertical).unwrap();
            prop_assert!(b.mtf50() <= a.mtf50() + 1e-12);
        }
    }
}
