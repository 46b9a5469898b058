//! Optimization-based depth filtering.
//!
//! The stack is fitted so that its rendering matches the scene's reference
//! rendering at many focus depths, as a non-negative least-squares problem
//! solved by projected gradient descent.
//!
//! Every disc blur uses half-sample symmetric boundaries, and a symmetric
//! kernel under that extension is diagonal in the orthonormal DCT-II basis.
//! The normal operator therefore reduces to a small plane-by-plane matrix per
//! frequency, built once, and each iteration costs two transforms per plane.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustdct::{DctPlanner, TransformType2And3};
use thiserror::Error;

use crate::filtering::{FocalStack, Scene};
use crate::image::Image;
use crate::optics::{DisplayModel, EyeModel};
use crate::render::{blur_diameter_px, render_from_stack, render_ground_truth, DiscKernel, RenderError};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("no focus samples given")]
    NoFocusSamples,
    #[error("initial stack is {stack:?} with {stack_channels} channels, scene is {scene:?} with {scene_channels}")]
    ShapeMismatch { stack: (usize, usize), stack_channels: usize, scene: (usize, usize), scene_channels: usize },
    #[error("objective became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeSettings<T> {
    pub iterations: usize,
    /// Optional upper bound on pixel values; non-negativity is always kept.
    pub upper_bound: Option<T>,
    /// Power iterations used to estimate the Lipschitz constant.
    pub power_iterations: usize,
    /// Step halvings tried before an iteration is declared stalled.
    pub max_backtracks: usize,
}

impl<T> Default for OptimizeSettings<T> {
    fn default() -> Self {
        Self { iterations: 500, upper_bound: None, power_iterations: 20, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult<T> {
    pub stack: FocalStack<T>,
    /// Objective before the first iteration and after each one.
    pub objective: Vec<T>,
}

/// Orthonormal 2D DCT-II and its inverse on row-major `w × h` buffers.
struct Dct2d<T: Real> {
    w: usize,
    h: usize,
    rows: Arc<dyn TransformType2And3<T>>,
    cols: Arc<dyn TransformType2And3<T>>,
}

impl<T: Real> Dct2d<T> {
    fn new(w: usize, h: usize) -> Self {
        let mut planner = DctPlanner::new();
        Self { w, h, rows: planner.plan_dct2(w), cols: planner.plan_dct2(h) }
    }

    fn forward(&self, data: &mut [T]) {
        let (w, h) = (self.w, self.h);
        for row in data.chunks_exact_mut(w) {
            self.rows.process_dct2(row);
            orthonormalize(row);
        }
        let mut col = vec![T::zero(); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = data[y * w + x];
            }
            self.cols.process_dct2(&mut col);
            orthonormalize(&mut col);
            for y in 0..h {
                data[y * w + x] = col[y];
            }
        }
    }

    fn inverse(&self, data: &mut [T]) {
        let (w, h) = (self.w, self.h);
        let mut col = vec![T::zero(); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = data[y * w + x];
            }
            denormalize(&mut col);
            self.cols.process_dct3(&mut col);
            for y in 0..h {
                data[y * w + x] = col[y];
            }
        }
        for row in data.chunks_exact_mut(w) {
            denormalize(row);
            self.rows.process_dct3(row);
        }
    }
}

/// Scales an unnormalized DCT-II output to the orthonormal convention.
fn orthonormalize<T: Real>(v: &mut [T]) {
    let n = T::from_usize_lossy(v.len());
    let s0 = (T::one() / n).sqrt();
    let s = (T::lit(2.0) / n).sqrt();
    v[0] = v[0] * s0;
    for x in &mut v[1..] {
        *x = *x * s;
    }
}

/// Prepares orthonormal coefficients for the unnormalized DCT-III, which
/// computes `x_0 / 2 + sum_k x_k cos(..)`.
fn denormalize<T: Real>(v: &mut [T]) {
    let n = T::from_usize_lossy(v.len());
    let two = T::lit(2.0);
    let s0 = two * (T::one() / n).sqrt();
    let s = (two / n).sqrt();
    v[0] = v[0] * s0;
    for x in &mut v[1..] {
        *x = *x * s;
    }
}

/// DCT-domain eigenvalues of a symmetric disc blur on a `w × h` grid:
/// `sum_mn K(m, n) cos(pi k1 m / w) cos(pi k2 n / h)`, computed separably.
fn disc_spectrum<T: Real>(kernel: &DiscKernel<T>, w: usize, h: usize) -> Vec<T> {
    let r = kernel.radius() as isize;
    let side = kernel.side();
    let cos_table = |n: usize| -> Vec<T> {
        // indexed [k * side + (m + r)]
        let mut t = Vec::with_capacity(n * side);
        for k in 0..n {
            for m in -r..=r {
                let arg = T::PI() * T::from_usize_lossy(k) * T::lit(m as f64) / T::from_usize_lossy(n);
                t.push(arg.cos());
            }
        }
        t
    };
    let cw = cos_table(w);
    let ch = cos_table(h);
    // partial[(n + r) * w + k1] = sum_m K(m, n) cos(pi k1 m / w)
    let mut partial = vec![T::zero(); side * w];
    for (ny, dy) in (-r..=r).enumerate() {
        for k1 in 0..w {
            let mut acc = T::zero();
            for (mx, dx) in (-r..=r).enumerate() {
                acc = acc + kernel.at(dx, dy) * cw[k1 * side + mx];
            }
            partial[ny * w + k1] = acc;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for k2 in 0..h {
        for k1 in 0..w {
            let mut acc = T::zero();
            for ny in 0..side {
                acc = acc + partial[ny * w + k1] * ch[k2 * side + ny];
            }
            out[k2 * w + k1] = acc;
        }
    }
    out
}

/// Quadratic model `J(X) = sum_w X^T N X - 2 C^T X + g` in the DCT domain,
/// one channel at a time.
struct NormalOperator<T> {
    planes: usize,
    freqs: usize,
    /// Upper triangle of N per frequency, `[pair * freqs + f]`.
    n: Vec<T>,
}

impl<T: Real> NormalOperator<T> {
    fn pair(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.planes - i * (i + 1) / 2 + j
    }

    fn apply(&self, x: &[Vec<T>], out: &mut [Vec<T>]) {
        let f_n = self.freqs;
        for (i, o) in out.iter_mut().enumerate() {
            o.iter_mut().for_each(|v| *v = T::zero());
            for (j, xj) in x.iter().enumerate() {
                let base = self.pair(i, j) * f_n;
                let nij = &self.n[base..base + f_n];
                for ((ov, &a), &b) in o.iter_mut().zip(nij).zip(xj) {
                    *ov = *ov + a * b;
                }
            }
        }
    }

    /// Largest eigenvalue by power iteration from a fixed pseudo-random start.
    fn power_estimate(&self, iterations: usize) -> T {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut v: Vec<Vec<T>> =
            (0..self.planes).map(|_| (0..self.freqs).map(|_| T::lit(rng.gen_range(0.5..1.5))).collect()).collect();
        let mut nv = v.clone();
        let mut lambda = T::zero();
        for _ in 0..iterations.max(1) {
            let norm = norm(&v);
            if norm == T::zero() {
                return T::zero();
            }
            v.iter_mut().flatten().for_each(|x| *x = *x / norm);
            self.apply(&v, &mut nv);
            lambda = dot(&v, &nv);
            std::mem::swap(&mut v, &mut nv);
        }
        lambda
    }
}

fn dot<T: Real>(a: &[Vec<T>], b: &[Vec<T>]) -> T {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>()).sum()
}

fn norm<T: Real>(a: &[Vec<T>]) -> T {
    dot(a, a).sqrt()
}

struct Problem<T: Real> {
    w: usize,
    h: usize,
    dct: Dct2d<T>,
    op: NormalOperator<T>,
    /// Per channel: C per plane, and the constant term.
    rhs: Vec<(Vec<Vec<T>>, T)>,
}

impl<T: Real> Problem<T> {
    fn build(
        scene: &Scene<T>,
        stack: &FocalStack<T>,
        focus_samples: &[T],
        eye: &EyeModel<T>,
        display: &DisplayModel<T>,
    ) -> Result<Self, OptimizeError> {
        let (w, h) = scene.dims();
        let freqs = w * h;
        let planes = stack.len();
        let dct = Dct2d::new(w, h);
        let pairs = planes * (planes + 1) / 2;
        let mut op = NormalOperator { planes, freqs, n: vec![T::zero(); pairs * freqs] };
        let channels = scene.channel_count();
        let mut rhs: Vec<(Vec<Vec<T>>, T)> =
            (0..channels).map(|_| (vec![vec![T::zero(); freqs]; planes], T::zero())).collect();

        for &focus in focus_samples {
            let eye_s = eye.focused_at(focus);
            let target = render_ground_truth(scene, &eye_s, display)?;
            let spectra: Vec<Vec<T>> = stack
                .layout()
                .depths()
                .iter()
                .map(|&depth| {
                    let d = blur_diameter_px(&eye_s, depth, display);
                    if d > T::from_usize_lossy(w.min(h)) {
                        return Err(RenderError::DegenerateBlur { diameter_px: d.as_f64(), extent_px: w.min(h) });
                    }
                    Ok(disc_spectrum(&DiscKernel::new(d), w, h))
                })
                .collect::<Result<_, _>>()?;
            for i in 0..planes {
                for j in i..planes {
                    let base = op.pair(i, j) * freqs;
                    for (f, n) in op.n[base..base + freqs].iter_mut().enumerate() {
                        *n = *n + spectra[i][f] * spectra[j][f];
                    }
                }
            }
            for (c, (ci, g)) in rhs.iter_mut().enumerate() {
                let mut gs = target.channels[c].data().to_vec();
                *g = *g + gs.iter().map(|&v| v * v).sum::<T>();
                dct.forward(&mut gs);
                for (i, cp) in ci.iter_mut().enumerate() {
                    for (f, v) in cp.iter_mut().enumerate() {
                        *v = *v + spectra[i][f] * gs[f];
                    }
                }
            }
        }
        Ok(Self { w, h, dct, op, rhs })
    }

    /// Objective and gradient of one channel at DCT coefficients `x`.
    fn evaluate(&self, channel: usize, x: &[Vec<T>], nx: &mut [Vec<T>], grad: Option<&mut [Vec<T>]>) -> T {
        let (c, g) = &self.rhs[channel];
        self.op.apply(x, nx);
        let two = T::lit(2.0);
        let mut j = *g;
        for ((xi, nxi), ci) in x.iter().zip(nx.iter()).zip(c) {
            for ((&a, &b), &cc) in xi.iter().zip(nxi).zip(ci) {
                j = j + a * b - two * cc * a;
            }
        }
        if let Some(grad) = grad {
            for ((gi, nxi), ci) in grad.iter_mut().zip(nx.iter()).zip(c) {
                for ((gv, &b), &cc) in gi.iter_mut().zip(nxi).zip(ci) {
                    *gv = two * (b - cc);
                }
            }
        }
        j
    }

    fn to_dct(&self, planes: &[Vec<T>]) -> Vec<Vec<T>> {
        planes
            .iter()
            .map(|p| {
                let mut v = p.clone();
                self.dct.forward(&mut v);
                v
            })
            .collect()
    }
}

/// Sum over focus samples and channels of the squared difference between
/// the stack rendering and the scene's reference rendering, evaluated with
/// the spatial renderer.
pub fn stack_objective<T: Real>(
    scene: &Scene<T>,
    stack: &FocalStack<T>,
    focus_samples: &[T],
    eye: &EyeModel<T>,
    display: &DisplayModel<T>,
) -> Result<T, RenderError> {
    let mut total = T::zero();
    for &focus in focus_samples {
        let eye_s = eye.focused_at(focus);
        let target = render_ground_truth(scene, &eye_s, display)?;
        let seen = render_from_stack(stack, &eye_s, display)?;
        for (a, b) in seen.channels.iter().zip(&target.channels) {
            total = total + a.squared_distance(b);
        }
    }
    Ok(total)
}

/// Fits a non-negative stack to the scene's renderings at `focus_samples`
/// by projected gradient descent from `initial`.
///
/// Each iteration starts from step `1 / L` with `L` the power-iteration
/// estimate of the gradient's Lipschitz constant and halves it until the
/// sufficient-decrease test passes. An iteration that cannot decrease the
/// objective keeps the current iterate, so the recorded sequence never
/// increases. Channels are fitted independently.
///
/// Memory grows with `planes² × width × height`.
pub fn optimize_stack<T: Real>(
    scene: &Scene<T>,
    focus_samples: &[T],
    eye: &EyeModel<T>,
    display: &DisplayModel<T>,
    initial: &FocalStack<T>,
    settings: &OptimizeSettings<T>,
) -> Result<OptimizeResult<T>, OptimizeError> {
    if focus_samples.is_empty() {
        return Err(OptimizeError::NoFocusSamples);
    }
    if initial.dims() != scene.dims() || initial.channel_count() != scene.channel_count() {
        return Err(OptimizeError::ShapeMismatch {
            stack: initial.dims(),
            stack_channels: initial.channel_count(),
            scene: scene.dims(),
            scene_channels: scene.channel_count(),
        });
    }
    let problem = Problem::build(scene, initial, focus_samples, eye, display)?;
    let lipschitz = T::lit(2.0) * problem.op.power_estimate(settings.power_iterations);
    let step0 = if lipschitz > T::zero() { T::one() / lipschitz } else { T::one() };
    let upper = settings.upper_bound;
    let project = |v: T| {
        let v = v.max(T::zero());
        match upper {
            Some(u) => v.min(u),
            None => v,
        }
    };

    let planes = initial.len();
    let freqs = problem.w * problem.h;
    let mut stack = initial.clone();
    let mut history = vec![T::zero(); settings.iterations + 1];

    for c in 0..scene.channel_count() {
        let mut x: Vec<Vec<T>> = (0..planes).map(|i| stack.plane(i)[c].data().iter().map(|&v| project(v)).collect()).collect();
        let mut xh = problem.to_dct(&x);
        let mut nx = vec![vec![T::zero(); freqs]; planes];
        let mut grad = vec![vec![T::zero(); freqs]; planes];
        let mut j = problem.evaluate(c, &xh, &mut nx, Some(&mut grad));
        if !j.is_finite() {
            return Err(OptimizeError::NonFinite { iteration: 0 });
        }
        history[0] = history[0] + j;

        for it in 1..=settings.iterations {
            let mut grad_sp = grad.clone();
            for g in &mut grad_sp {
                problem.dct.inverse(g);
            }
            let mut t = step0;
            for _ in 0..=settings.max_backtracks {
                let cand: Vec<Vec<T>> = x
                    .iter()
                    .zip(&grad_sp)
                    .map(|(xi, gi)| xi.iter().zip(gi).map(|(&a, &g)| project(a - t * g)).collect())
                    .collect();
                let ch = problem.to_dct(&cand);
                let jc = problem.evaluate(c, &ch, &mut nx, None);
                if !jc.is_finite() {
                    return Err(OptimizeError::NonFinite { iteration: it });
                }
                let mut lin = T::zero();
                let mut sq = T::zero();
                for ((ci, xi), gi) in ch.iter().zip(&xh).zip(&grad) {
                    for ((&a, &b), &g) in ci.iter().zip(xi).zip(gi) {
                        let d = a - b;
                        lin = lin + g * d;
                        sq = sq + d * d;
                    }
                }
                if jc <= j + lin + sq / (T::lit(2.0) * t) && jc <= j {
                    x = cand;
                    xh = ch;
                    j = problem.evaluate(c, &xh, &mut nx, Some(&mut grad));
                    break;
                }
                t = t / T::lit(2.0);
            }
            history[it] = history[it] + j;
        }
        for (i, xi) in x.into_iter().enumerate() {
            stack.plane_mut(i)[c] = Image::from_vec(problem.w, problem.h, xi);
        }
    }
    Ok(OptimizeResult { stack, objective: history })
}
