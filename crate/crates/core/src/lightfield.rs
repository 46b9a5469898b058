//! Brute-force flatland light-field simulator.
//!
//! A ray is `(x, u)`: its intercept `x` with the reference plane and its
//! tangent angle `u`. First-order optical elements act as 2×2 unit-determinant
//! matrices on ray coordinates and transform a light field by pullback,
//! `ℓ_out(r) = ℓ_in(M⁻¹ r)`.
//!
//! The retinal oracle at the end of this module chains display pixel,
//! propagation to the tunable lens, refraction, pupil, eye lens and
//! propagation to the retina, integrates over angle and measures the
//! half-maximum bandwidth of the resulting image spectrum. It shares no code
//! with the closed forms in [`crate::optics`].

use thiserror::Error;

use crate::optics::{plane_bandwidth, DisplayModel, EyeModel};
use crate::scalar::{sine_integral, Real};
use crate::spectral::{dft_magnitude, first_crossing};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LightFieldError {
    #[error("grid spacing {spacing} exceeds the required {required}")]
    UnderResolved { spacing: f64, required: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("transport pushed {lost_fraction:.4} of the energy outside the grid")]
    ExtentOverflow { lost_fraction: f64 },
    #[error("image spectrum never drops below half maximum")]
    NoHalfMaximum,
}

/// First-order ray-transfer matrix `[[a, b], [c, d]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayMatrix<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
}

impl<T: Real> RayMatrix<T> {
    pub fn identity() -> Self {
        Self { a: T::one(), b: T::zero(), c: T::zero(), d: T::one() }
    }

    /// Free-space propagation over `distance_m`.
    pub fn propagation(distance_m: T) -> Self {
        Self { a: T::one(), b: distance_m, c: T::zero(), d: T::one() }
    }

    /// Thin lens of optical power `power_diopter` (`1/f`).
    pub fn refraction(power_diopter: T) -> Self {
        Self { a: T::one(), b: T::zero(), c: -power_diopter, d: T::one() }
    }

    pub fn det(&self) -> T {
        self.a * self.d - self.b * self.c
    }

    /// `self · rhs`: apply `rhs` first, then `self`.
    pub fn then_after(&self, rhs: &Self) -> Self {
        Self {
            a: self.a * rhs.a + self.b * rhs.c,
            b: self.a * rhs.b + self.b * rhs.d,
            c: self.c * rhs.a + self.d * rhs.c,
            d: self.c * rhs.b + self.d * rhs.d,
        }
    }

    /// Element applied after `self`: returns `next · self`.
    pub fn then(&self, next: &Self) -> Self {
        next.then_after(self)
    }

    pub fn inverse(&self) -> Self {
        let det = self.det();
        Self {
            a: self.d / det,
            b: -self.b / det,
            c: -self.c / det,
            d: self.a / det,
        }
    }

    #[inline]
    pub fn apply(&self, x: T, u: T) -> (T, T) {
        (self.a * x + self.b * u, self.c * x + self.d * u)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Sampling of the `(x, u)` plane: `n_x × n_u` cell centers over a centered
/// box of size `x_extent × u_extent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    pub n_x: usize,
    pub n_u: usize,
    pub x_extent: T,
    pub u_extent: T,
}

impl<T: Real> GridSpec<T> {
    pub fn new(n_x: usize, n_u: usize, x_extent: T, u_extent: T) -> Result<Self, LightFieldError> {
        if n_x < 2 || n_u < 2 {
            return Err(LightFieldError::InvalidGrid("at least 2 samples per axis".into()));
        }
        if !(x_extent > T::zero()) || !(u_extent > T::zero()) {
            return Err(LightFieldError::InvalidGrid("extents must be positive".into()));
        }
        Ok(Self { n_x, n_u, x_extent, u_extent })
    }

    pub fn dx(&self) -> T {
        self.x_extent / T::from_usize_lossy(self.n_x)
    }

    pub fn du(&self) -> T {
        self.u_extent / T::from_usize_lossy(self.n_u)
    }

    #[inline]
    pub fn x_at(&self, i: usize) -> T {
        (T::from_usize_lossy(i) + T::lit(0.5)) * self.dx() - self.x_extent * T::lit(0.5)
    }

    #[inline]
    pub fn u_at(&self, j: usize) -> T {
        (T::from_usize_lossy(j) + T::lit(0.5)) * self.du() - self.u_extent * T::lit(0.5)
    }

    pub fn cell_area(&self) -> T {
        self.dx() * self.du()
    }
}

/// Radiance sampled on a [`GridSpec`], stored `u`-major (`data[j * n_x + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLightField<T> {
    grid: GridSpec<T>,
    data: Vec<T>,
}

impl<T: Real> SampledLightField<T> {
    pub fn zeros(grid: GridSpec<T>) -> Self {
        Self { grid, data: vec![T::zero(); grid.n_x * grid.n_u] }
    }

    pub fn from_fn(grid: GridSpec<T>, f: impl Fn(T, T) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.n_x * grid.n_u);
        for j in 0..grid.n_u {
            let u = grid.u_at(j);
            for i in 0..grid.n_x {
                data.push(f(grid.x_at(i), u));
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[j * self.grid.n_x + i]
    }

    /// Sum of radiance × cell area.
    pub fn energy(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b) * self.grid.cell_area()
    }

    pub fn min_radiance(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Bilinear sample at continuous coordinates; zero outside the grid.
    pub fn sample(&self, x: T, u: T) -> T {
        let g = &self.grid;
        let fx = (x + g.x_extent * T::lit(0.5)) / g.dx() - T::lit(0.5);
        let fu = (u + g.u_extent * T::lit(0.5)) / g.du() - T::lit(0.5);
        let ix = fx.floor();
        let iu = fu.floor();
        let tx = fx - ix;
        let tu = fu - iu;
        let ix = ix.to_i64().unwrap_or(i64::MIN);
        let iu = iu.to_i64().unwrap_or(i64::MIN);
        let get = |i: i64, j: i64| -> T {
            if i < 0 || j < 0 || i >= g.n_x as i64 || j >= g.n_u as i64 {
                T::zero()
            } else {
                self.data[j as usize * g.n_x + i as usize]
            }
        };
        let v00 = get(ix, iu);
        let v10 = get(ix + 1, iu);
        let v01 = get(ix, iu + 1);
        let v11 = get(ix + 1, iu + 1);
        let one = T::one();
        (one - tu) * ((one - tx) * v00 + tx * v10) + tu * ((one - tx) * v01 + tx * v11)
    }
}

/// Radiance of one display pixel: `rect(x/Δx)` in `x`, constant in `u`,
/// normalized to unit integral over `x` for every direction.
pub fn build_pixel_lightfield<T: Real>(
    pixel_pitch_m: T,
    grid: GridSpec<T>,
) -> Result<SampledLightField<T>, LightFieldError> {
    let required = pixel_pitch_m / T::lit(8.0);
    if grid.dx() > required * (T::one() + T::lit(1e-9)) {
        return Err(LightFieldError::UnderResolved {
            spacing: grid.dx().as_f64(),
            required: required.as_f64(),
        });
    }
    let half = pixel_pitch_m * T::lit(0.5);
    let dx = grid.dx();
    let amplitude = pixel_pitch_m.recip();
    let profile: Vec<T> = (0..grid.n_x)
        .map(|i| {
            let c = grid.x_at(i);
            let lo = (c - dx * T::lit(0.5)).max(-half);
            let hi = (c + dx * T::lit(0.5)).min(half);
            let cover = ((hi - lo) / dx).max(T::zero());
            cover * amplitude
        })
        .collect();
    let mut data = Vec::with_capacity(grid.n_x * grid.n_u);
    for _ in 0..grid.n_u {
        data.extend_from_slice(&profile);
    }
    Ok(SampledLightField { grid, data })
}

/// Transforms `lf` by `m`, resampling on the same grid.
pub fn transport<T: Real>(
    lf: &SampledLightField<T>,
    m: &RayMatrix<T>,
) -> Result<SampledLightField<T>, LightFieldError> {
    transport_onto(lf, m, lf.grid)
}

/// Transforms `lf` by `m` and resamples onto `target` with bilinear
/// interpolation. Fails if more than 1% of the energy falls off the target.
pub fn transport_onto<T: Real>(
    lf: &SampledLightField<T>,
    m: &RayMatrix<T>,
    target: GridSpec<T>,
) -> Result<SampledLightField<T>, LightFieldError> {
    if m.is_identity() && target == lf.grid {
        return Ok(lf.clone());
    }
    let inv = m.inverse();
    let out = SampledLightField::from_fn(target, |x, u| {
        let (xs, us) = inv.apply(x, u);
        lf.sample(xs, us)
    });
    let e_in = lf.energy();
    if e_in > T::zero() {
        let lost = (e_in - out.energy()) / e_in;
        if lost > T::lit(0.01) {
            return Err(LightFieldError::ExtentOverflow { lost_fraction: lost.as_f64() });
        }
    }
    Ok(out)
}

/// Pupil of diameter `aperture_m` centred on the axis: multiplies by
/// `rect(x/a)`, with partial coverage for cells straddling the edge.
pub fn apply_aperture<T: Real>(lf: &SampledLightField<T>, aperture_m: T) -> SampledLightField<T> {
    let g = lf.grid;
    let half = aperture_m * T::lit(0.5);
    let dx = g.dx();
    let mask: Vec<T> = (0..g.n_x)
        .map(|i| {
            let c = g.x_at(i);
            let lo = (c - dx * T::lit(0.5)).max(-half);
            let hi = (c + dx * T::lit(0.5)).min(half);
            ((hi - lo) / dx).max(T::zero()).min(T::one())
        })
        .collect();
    let mut data = lf.data.clone();
    for row in data.chunks_mut(g.n_x) {
        for (v, &w) in row.iter_mut().zip(&mask) {
            *v = *v * w;
        }
    }
    SampledLightField { grid: g, data }
}

/// Integrates radiance over angle: one image sample per `x` cell.
pub fn integrate_to_image<T: Real>(lf: &SampledLightField<T>) -> Vec<T> {
    let g = lf.grid;
    let du = g.du();
    let mut image = vec![T::zero(); g.n_x];
    for row in lf.data.chunks(g.n_x) {
        for (acc, &v) in image.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    image.iter_mut().for_each(|v| *v = *v * du);
    image
}

/// Rectangle of width `width` low-passed to the half lobe of its spectrum,
/// `|f| <= 1/(2 width)`: `(Si(π(s+½)) - Si(π(s-½))) / π` with `s = x/width`.
///
/// FT is `width · sinc(width f)` inside the band and zero outside.
#[derive(Debug, Clone)]
pub struct BandLimitedRect<T> {
    width: T,
    table: Vec<T>,
    table_step: T,
    table_half_range: T,
}

impl<T: Real> BandLimitedRect<T> {
    const TABLE_HALF_RANGE: f64 = 64.0;
    const TABLE_STEPS_PER_WIDTH: f64 = 256.0;

    pub fn new(width: T) -> Self {
        let step = T::lit(Self::TABLE_STEPS_PER_WIDTH).recip();
        let half_range = T::lit(Self::TABLE_HALF_RANGE);
        let n = (Self::TABLE_HALF_RANGE * Self::TABLE_STEPS_PER_WIDTH) as usize;
        let table = (0..=n)
            .map(|k| Self::exact_normalized(T::from_usize_lossy(k) * step))
            .collect();
        Self { width, table, table_step: step, table_half_range: half_range }
    }

    fn exact_normalized(s: T) -> T {
        let pi = T::PI();
        let h = T::lit(0.5);
        (sine_integral(pi * (s + h)) - sine_integral(pi * (s - h))) / pi
    }

    /// Profile value at `x` (unit peak-normalized rectangle amplitude).
    pub fn eval(&self, x: T) -> T {
        let s = (x / self.width).abs();
        if s >= self.table_half_range {
            return Self::exact_normalized(s);
        }
        let f = s / self.table_step;
        let k = f.floor();
        let t = f - k;
        let k = k.to_usize().unwrap_or(0);
        let a = self.table[k];
        let b = self.table[(k + 1).min(self.table.len() - 1)];
        a + (b - a) * t
    }
}

/// Numerical settings of the retinal oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleGrid {
    /// Retina samples per feature width (larger of pixel image and blur).
    pub samples_per_feature: usize,
    /// Retina window length in feature widths (sets spectral bin width).
    pub window_features: usize,
    /// Pupil-plane integration extent in pupil diameters (covers the
    /// band-limited pupil's side lobes).
    pub pupil_extent_widths: usize,
    /// Pupil-plane samples per pupil diameter (before refinement for defocus).
    pub pupil_samples_per_width: usize,
    /// Pupil samples per display pixel swept under defocus. Both factors of
    /// the integrand are band limited, so the midpoint rule is exact once the
    /// product's band is resolved; values a little above 1 suffice.
    pub samples_per_swept_pixel: f64,
}

impl Default for OracleGrid {
    fn default() -> Self {
        Self {
            samples_per_feature: 4,
            window_features: 256,
            pupil_extent_widths: 128,
            pupil_samples_per_width: 4,
            samples_per_swept_pixel: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OraclePsf<T> {
    /// Retinal image samples (angle-integrated radiance).
    pub image: Vec<T>,
    /// Retina sample spacing, meters.
    pub sample_spacing_m: T,
    /// Half-maximum bandwidth of the image spectrum, cycles per meter on the retina.
    pub measured_half_max_bandwidth: T,
    /// Pixel image width on the retina from ray tracing, meters.
    pub magnified_pixel_m: T,
    /// Defocus blur extent on the retina from ray tracing the pupil edges, meters.
    pub blur_extent_m: T,
}

/// Simulates the retinal image of one display pixel shown on the focal plane
/// `plane_diopter` and measures its half-maximum spectral bandwidth.
///
/// The source is the upper-bound pixel field (band-limited to the central
/// half lobe `|f| <= 1/(2Δx)`), and the pupil transmits the matching half lobe
/// of its own spectrum. The retinal light field is evaluated by pulling every
/// retina sample back through the composed ray matrices, so only the final
/// angle integral is discretized.
pub fn oracle_retinal_psf<T: Real>(
    display: &DisplayModel<T>,
    eye: &EyeModel<T>,
    plane_diopter: T,
    settings: &OracleGrid,
) -> Result<OraclePsf<T>, LightFieldError> {
    let d_o = display.display_distance_m;
    let d_e = eye.retina_distance_m;
    let a = eye.pupil_diameter_m;
    let dx_pix = display.pixel_pitch_m;

    // display -> just after tunable lens (pupil plane), pupil -> retina
    let to_pupil = RayMatrix::propagation(d_o)
        .then(&RayMatrix::refraction(display.power_for_plane(plane_diopter)));
    let to_retina = RayMatrix::refraction(eye.lens_power()).then(&RayMatrix::propagation(d_e));
    let total = to_pupil.then(&to_retina);
    let from_retina = to_retina.inverse();
    let from_pupil = to_pupil.inverse();

    // chief ray scale and pupil-edge ray spread, both by ray tracing
    let magnified_pixel = total.a.abs() * dx_pix;
    let (rim_y, _) = total.apply(T::zero(), a * T::lit(0.5) / d_o);
    let (rim_y2, _) = total.apply(T::zero(), -a * T::lit(0.5) / d_o);
    let blur = (rim_y - rim_y2).abs();

    let feature = magnified_pixel.max(blur);
    let n_y = settings.samples_per_feature * settings.window_features;
    let dy = feature / T::from_usize_lossy(settings.samples_per_feature);
    let y_extent = dy * T::from_usize_lossy(n_y);

    // sensitivity of the display coordinate to the pupil coordinate at fixed y
    let display_x = |y: T, x_p: T| -> (T, T) {
        // retina ray (y, u) with pupil crossing x_p: x_p = y - d_e u
        let u = (y - x_p) / d_e;
        let (xp, up) = from_retina.apply(y, u);
        let (xd, _) = from_pupil.apply(xp, up);
        (xd, xp)
    };
    let (x0, _) = display_x(T::zero(), T::zero());
    let (x1, _) = display_x(T::zero(), a);
    let slope = ((x1 - x0) / a).abs();
    let mut dxp = a / T::from_usize_lossy(settings.pupil_samples_per_width);
    if slope > T::zero() {
        dxp = dxp.min(dx_pix / (T::lit(settings.samples_per_swept_pixel) * slope));
    }
    let pupil_extent = a * T::from_usize_lossy(settings.pupil_extent_widths);
    let n_p = (pupil_extent / dxp).ceil().to_usize().unwrap_or(2).max(2);
    let dxp = pupil_extent / T::from_usize_lossy(n_p);

    let pixel = BandLimitedRect::new(dx_pix);
    let pupil = BandLimitedRect::new(a);
    let pupil_weights: Vec<(T, T)> = (0..n_p)
        .map(|k| {
            let xp = (T::from_usize_lossy(k) + T::lit(0.5)) * dxp - pupil_extent * T::lit(0.5);
            (xp, pupil.eval(xp))
        })
        .collect();

    // ∫ du over the retina light field; du = dx_p / d_e
    let du = dxp / d_e;
    let amplitude = dx_pix.recip();
    let image: Vec<T> = (0..n_y)
        .map(|k| {
            let y = (T::from_usize_lossy(k) + T::lit(0.5)) * dy - y_extent * T::lit(0.5);
            let mut acc = T::zero();
            for &(xp, w) in &pupil_weights {
                let (xd, _) = display_x(y, xp);
                acc = acc + w * pixel.eval(xd);
            }
            acc * du * amplitude
        })
        .collect();

    let spectrum = dft_magnitude(&image);
    let bins = first_crossing(&spectrum, T::lit(0.5)).ok_or(LightFieldError::NoHalfMaximum)?;
    Ok(OraclePsf {
        image,
        sample_spacing_m: dy,
        measured_half_max_bandwidth: bins / y_extent,
        magnified_pixel_m: magnified_pixel,
        blur_extent_m: blur,
    })
}

/// One row of an oracle validation sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleComparison<T> {
    pub pupil_diameter_m: T,
    pub mismatch_diopter: T,
    pub plane_diopter: T,
    pub closed_form: T,
    pub measured: T,
    pub relative_error: T,
}

/// Runs the oracle for the eye focused `mismatch_diopter` nearer than the
/// plane (or farther when the plane is too near) and compares with the
/// closed-form single-plane bandwidth.
pub fn compare_with_closed_form<T: Real>(
    display: &DisplayModel<T>,
    eye: &EyeModel<T>,
    plane_diopter: T,
    mismatch_diopter: T,
    settings: &OracleGrid,
) -> Result<OracleComparison<T>, LightFieldError> {
    let focus = if plane_diopter >= mismatch_diopter {
        plane_diopter - mismatch_diopter
    } else {
        plane_diopter + mismatch_diopter
    };
    let eye = eye.focused_at(focus);
    let psf = oracle_retinal_psf(display, &eye, plane_diopter, settings)?;
    let closed = plane_bandwidth(display, &eye, focus - plane_diopter);
    let measured = psf.measured_half_max_bandwidth;
    Ok(OracleComparison {
        pupil_diameter_m: eye.pupil_diameter_m,
        mismatch_diopter,
        plane_diopter,
        closed_form: closed,
        measured,
        relative_error: (measured - closed).abs() / closed,
    })
}
