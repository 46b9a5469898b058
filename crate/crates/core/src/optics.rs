//! Closed-form design equations for multifocal displays.
//!
//! All depths are carried in diopters. A focal plane or eye focus at optical
//! infinity is `0` diopters. Lengths are meters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: &'static str, reason: String },
    #[error("lens power {power} D exceeds 1/d_o = {limit} D: the display would form a real image")]
    RealImage { power: f64, limit: f64 },
    #[error("lens power must be positive, got {0} D")]
    NonPositivePower(f64),
    #[error("plane layout must hold strictly decreasing non-negative diopters")]
    InvalidLayout,
}

fn check_positive<T: Real>(key: &'static str, v: T) -> Result<(), OpticsError> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(OpticsError::InvalidParameter {
            key,
            reason: format!("must be positive and finite, got {v}"),
        })
    }
}

/// Display unit viewed through a focus-tunable lens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplayModel<T> {
    pub pixel_pitch_m: T,
    pub display_distance_m: T,
    pub panel_width_px: usize,
    pub panel_height_px: usize,
    pub panel_width_m: T,
    pub lens_power_min_diopter: T,
    pub lens_power_max_diopter: T,
    pub bitplane_rate_hz: T,
    pub bit_depth: u32,
}

impl<T: Real> DisplayModel<T> {
    /// Parameters of the DMD prototype: 13.6 µm pitch at 7 cm behind an
    /// 8.3-20 D tunable lens, 20 000 bitplanes/s with 8-bit planes.
    pub fn prototype() -> Self {
        let pitch = T::lit(13.6e-6);
        Self {
            pixel_pitch_m: pitch,
            display_distance_m: T::lit(0.07),
            panel_width_px: 1024,
            panel_height_px: 768,
            panel_width_m: pitch * T::lit(1024.0),
            lens_power_min_diopter: T::lit(8.3),
            lens_power_max_diopter: T::lit(20.0),
            bitplane_rate_hz: T::lit(20_000.0),
            bit_depth: 8,
        }
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        check_positive("pixel_pitch_m", self.pixel_pitch_m)?;
        check_positive("display_distance_m", self.display_distance_m)?;
        check_positive("panel_width_m", self.panel_width_m)?;
        check_positive("lens_power_min_diopter", self.lens_power_min_diopter)?;
        check_positive("bitplane_rate_hz", self.bitplane_rate_hz)?;
        if self.lens_power_max_diopter <= self.lens_power_min_diopter {
            return Err(OpticsError::InvalidParameter {
                key: "lens_power_max_diopter",
                reason: "must exceed lens_power_min_diopter".into(),
            });
        }
        if self.bit_depth == 0 {
            return Err(OpticsError::InvalidParameter {
                key: "bit_depth",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Optical power that places the display at infinity, `1/d_o`.
    pub fn infinity_power(&self) -> T {
        self.display_distance_m.recip()
    }

    /// Lens power producing a focal plane at `plane_diopter`.
    pub fn power_for_plane(&self, plane_diopter: T) -> T {
        self.infinity_power() - plane_diopter
    }

    /// Highest spatial frequency the display can deliver to the retina,
    /// `d_o / (2 d_e Δx)`, in cycles per meter on the retina.
    pub fn retinal_bandwidth_limit(&self, retina_distance_m: T) -> T {
        self.display_distance_m / (T::lit(2.0) * retina_distance_m * self.pixel_pitch_m)
    }
}

/// Eye (or camera) modeled as a finite-aperture lens with a sensor `d_e` behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EyeModel<T> {
    pub pupil_diameter_m: T,
    pub retina_distance_m: T,
    pub focus_diopter: T,
}

impl<T: Real> EyeModel<T> {
    /// 4 mm pupil, 17 mm reduced-eye retina distance, focused at infinity.
    pub fn standard() -> Self {
        Self {
            pupil_diameter_m: T::lit(0.004),
            retina_distance_m: T::lit(0.017),
            focus_diopter: T::zero(),
        }
    }

    pub fn focused_at(self, focus_diopter: T) -> Self {
        Self { focus_diopter, ..self }
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        check_positive("pupil_diameter_m", self.pupil_diameter_m)?;
        check_positive("retina_distance_m", self.retina_distance_m)?;
        if !(self.focus_diopter >= T::zero()) || !self.focus_diopter.is_finite() {
            return Err(OpticsError::InvalidParameter {
                key: "focus_diopter",
                reason: format!("must be finite and >= 0, got {}", self.focus_diopter),
            });
        }
        Ok(())
    }

    /// Power of the eye lens when focused at `focus_diopter`: `1/f_e = 1/v + 1/d_e`.
    pub fn lens_power(&self) -> T {
        self.focus_diopter + self.retina_distance_m.recip()
    }
}

/// Focal-plane depths in diopters, nearest plane first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneLayout<T> {
    depths_diopter: Vec<T>,
}

impl<T: Real> PlaneLayout<T> {
    pub fn new(depths_diopter: Vec<T>) -> Result<Self, OpticsError> {
        if depths_diopter.is_empty()
            || depths_diopter.iter().any(|d| !(*d >= T::zero()) || !d.is_finite())
            || depths_diopter.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(OpticsError::InvalidLayout);
        }
        Ok(Self { depths_diopter })
    }

    /// `n` planes uniformly spaced in diopters from `near` down to `far`.
    pub fn uniform(near_diopter: T, far_diopter: T, n: usize) -> Result<Self, OpticsError> {
        if n == 0 {
            return Err(OpticsError::InvalidLayout);
        }
        if n == 1 {
            return Self::new(vec![near_diopter]);
        }
        let step = (near_diopter - far_diopter) / T::from_usize_lossy(n - 1);
        let depths = (0..n)
            .map(|i| {
                if i == n - 1 {
                    far_diopter
                } else {
                    near_diopter - step * T::from_usize_lossy(i)
                }
            })
            .collect();
        Self::new(depths)
    }

    /// Keeps the planes at the given zero-based indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, OpticsError> {
        let depths = indices
            .iter()
            .map(|&i| self.depths_diopter.get(i).copied().ok_or(OpticsError::InvalidLayout))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(depths)
    }

    pub fn depths(&self) -> &[T] {
        &self.depths_diopter
    }

    pub fn len(&self) -> usize {
        self.depths_diopter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths_diopter.is_empty()
    }

    pub fn near(&self) -> T {
        self.depths_diopter[0]
    }

    pub fn far(&self) -> T {
        self.depths_diopter[self.depths_diopter.len() - 1]
    }

    /// Largest gap between adjacent planes (zero for a single plane).
    pub fn max_spacing(&self) -> T {
        self.depths_diopter
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(T::zero(), T::max)
    }
}

/// Virtual image depth of the display for lens power `lens_power_diopter`:
/// `1/v = 1/d_o - D_x`.
pub fn virtual_image_diopter<T: Real>(
    display: &DisplayModel<T>,
    lens_power_diopter: T,
) -> Result<T, OpticsError> {
    if !(lens_power_diopter > T::zero()) {
        return Err(OpticsError::NonPositivePower(lens_power_diopter.as_f64()));
    }
    let limit = display.infinity_power();
    if lens_power_diopter > limit {
        return Err(OpticsError::RealImage {
            power: lens_power_diopter.as_f64(),
            limit: limit.as_f64(),
        });
    }
    Ok(limit - lens_power_diopter)
}

/// Accommodation mismatch below which a plane is seen at full display
/// resolution: `Δx / (a d_o)` diopters (half the plane depth of field).
pub fn in_focus_tolerance_diopter<T: Real>(display: &DisplayModel<T>, pupil_diameter_m: T) -> T {
    display.pixel_pitch_m / (pupil_diameter_m * display.display_distance_m)
}

/// Retinal bandwidth contributed by a single plane at accommodation mismatch
/// `mismatch_diopter`. Piecewise: full display resolution inside the plane's
/// depth of field, `1/(2 a d_e |Δ|)` outside.
pub fn plane_bandwidth<T: Real>(
    display: &DisplayModel<T>,
    eye: &EyeModel<T>,
    mismatch_diopter: T,
) -> T {
    let limit = display.retinal_bandwidth_limit(eye.retina_distance_m);
    let m = mismatch_diopter.abs();
    if m <= in_focus_tolerance_diopter(display, eye.pupil_diameter_m) {
        limit
    } else {
        (T::lit(2.0) * eye.pupil_diameter_m * eye.retina_distance_m * m).recip()
    }
}

/// Perceived spatial resolution (cycles per meter on the retina) when the
/// eye focuses at `eye.focus_diopter` in front of the given plane layout.
pub fn perceived_resolution<T: Real>(
    display: &DisplayModel<T>,
    eye: &EyeModel<T>,
    layout: &PlaneLayout<T>,
) -> T {
    let limit = display.retinal_bandwidth_limit(eye.retina_distance_m);
    let best = layout
        .depths()
        .iter()
        .map(|&vi| plane_bandwidth(display, eye, eye.focus_diopter - vi))
        .fold(T::zero(), T::max);
    best.min(limit)
}

/// Converts cycles per meter on the retina into cycles per degree of visual angle.
pub fn cycles_per_degree<T: Real>(cycles_per_meter: T, retina_distance_m: T) -> T {
    cycles_per_meter * retina_distance_m * T::PI() / T::lit(180.0)
}

/// Lowest plane count (real valued) that keeps retinal resolution at or above
/// `target_cycles_per_m` across `range_diopter`: `n = a d_e Δ F`.
pub fn min_focal_planes<T: Real>(
    pupil_diameter_m: T,
    retina_distance_m: T,
    target_cycles_per_m: T,
    range_diopter: T,
) -> T {
    pupil_diameter_m * retina_distance_m * range_diopter * target_cycles_per_m
}

/// Depth of field of one focal plane, `2 Δx / (a d_o)` diopters.
pub fn plane_depth_of_field<T: Real>(display: &DisplayModel<T>, pupil_diameter_m: T) -> T {
    T::lit(2.0) * in_focus_tolerance_diopter(display, pupil_diameter_m)
}

/// Plane count beyond which extra planes no longer raise resolution:
/// `D_o a d_o / (2 Δx)`.
pub fn max_useful_planes<T: Real>(
    display: &DisplayModel<T>,
    pupil_diameter_m: T,
    range_diopter: T,
) -> T {
    range_diopter * pupil_diameter_m * display.display_distance_m
        / (T::lit(2.0) * display.pixel_pitch_m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility<T> {
    pub feasible: bool,
    /// `(D_2 - D_1) - (near - far)`.
    pub span_margin_diopter: T,
    /// `(1/d_o - D_1) - near`: how far beyond the nearest requested plane the lens can reach.
    pub near_margin_diopter: T,
    /// `far - (1/d_o - D_2)`.
    pub far_margin_diopter: T,
}

/// Checks whether the lens power range can place planes over `[far, near]`.
///
/// Reachable plane depths are `1/d_o - D` for `D ∈ [D_1, D_2]`, so the range is
/// covered iff `near + D_1 <= 1/d_o <= far + D_2`, which implies the lens
/// span requirement `D_2 - D_1 >= near - far`.
pub fn accommodation_feasible<T: Real>(
    display: &DisplayModel<T>,
    near_diopter: T,
    far_diopter: T,
) -> Feasibility<T> {
    let inf = display.infinity_power();
    let d1 = display.lens_power_min_diopter;
    let d2 = display.lens_power_max_diopter;
    let span_margin = (d2 - d1) - (near_diopter - far_diopter);
    let near_margin = (inf - d1) - near_diopter;
    let far_margin = far_diopter - (inf - d2);
    Feasibility {
        feasible: span_margin >= T::zero() && near_margin >= T::zero() && far_margin >= T::zero(),
        span_margin_diopter: span_margin,
        near_margin_diopter: near_margin,
        far_margin_diopter: far_margin,
    }
}

/// Horizontal field of view with the eye at the lens, `2 atan(H / (2 d_o))`.
pub fn field_of_view<T: Real>(display: &DisplayModel<T>) -> T {
    T::lit(2.0) * (display.panel_width_m / (T::lit(2.0) * display.display_distance_m)).atan()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricFactors<T> {
    /// Fraction of each frame a single plane is lit.
    pub duty_factor: T,
    /// Fraction of source energy a DMD discards.
    pub dmd_energy_waste: T,
}

pub fn photometric_factors<T: Real>(n_planes: usize) -> Result<PhotometricFactors<T>, OpticsError> {
    if n_planes == 0 {
        return Err(OpticsError::InvalidParameter {
            key: "n_planes",
            reason: "must be at least 1".into(),
        });
    }
    let n = T::from_usize_lossy(n_planes);
    Ok(PhotometricFactors {
        duty_factor: n.recip(),
        dmd_energy_waste: (n - T::one()) / n,
    })
}

/// Full-bit-depth planes per second the display can emit.
pub fn plane_budget<T: Real>(display: &DisplayModel<T>) -> T {
    display.bitplane_rate_hz / T::from_usize_lossy(display.bit_depth.max(1) as usize)
}
