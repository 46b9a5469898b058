//! TOML scenario files.
//!
//! Every section is optional and every key falls back to the prototype
//! value. Keys carry their unit as a suffix (`_m`, `_diopter`, `_s`, `_hz`,
//! `_px`, `_rad`); unitless keys are counts, bit widths or mode switches.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    calibrate_ideal, plane_targets, ControlError, ControlScenario, ControllerConfig, DisplayHold, DriveMap, Drift,
    LensPlantConfig, PsdGeometry,
};
use crate::optics::{DisplayModel, EyeModel, OpticsError, PlaneLayout};
use crate::optimize::OptimizeSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("invalid {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub display: DisplaySection,
    pub eye: EyeSection,
    pub layout: LayoutSection,
    pub psd: PsdSection,
    pub plant: PlantSection,
    pub controller: ControllerSection,
    pub render: RenderSection,
    pub optimize: OptimizeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisplaySection {
    pub pixel_pitch_m: f64,
    pub display_distance_m: f64,
    pub panel_width_px: usize,
    pub panel_height_px: usize,
    pub lens_power_min_diopter: f64,
    pub lens_power_max_diopter: f64,
    pub bitplane_rate_hz: f64,
    pub bit_depth: u32,
}

impl Default for DisplaySection {
    fn default() -> Self {
        let d = DisplayModel::<f64>::prototype();
        Self {
            pixel_pitch_m: d.pixel_pitch_m,
            display_distance_m: d.display_distance_m,
            panel_width_px: d.panel_width_px,
            panel_height_px: d.panel_height_px,
            lens_power_min_diopter: d.lens_power_min_diopter,
            lens_power_max_diopter: d.lens_power_max_diopter,
            bitplane_rate_hz: d.bitplane_rate_hz,
            bit_depth: d.bit_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EyeSection {
    pub pupil_diameter_m: f64,
    pub retina_distance_m: f64,
    pub focus_diopter: f64,
}

impl Default for EyeSection {
    fn default() -> Self {
        let e = EyeModel::<f64>::standard();
        Self { pupil_diameter_m: e.pupil_diameter_m, retina_distance_m: e.retina_distance_m, focus_diopter: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSection {
    pub near_diopter: f64,
    pub far_diopter: f64,
    pub planes: usize,
    /// Explicit depths, nearest first; overrides the uniform layout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depths_diopter: Option<Vec<f64>>,
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self { near_diopter: 4.0, far_diopter: 0.0, planes: 40, depths_diopter: None }
    }
}

/// Missing values come from [`PsdGeometry::prototype`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsdSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam_offset_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psd_distance_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psd_length_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psd_precision_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub transport_delay_s: f64,
    pub time_constant_s: f64,
    /// Lens power at DAC level 0; defaults to slightly past the near plane.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drive_offset_diopter: Option<f64>,
    /// Defaults to just under one plane spacing per bitplane group.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drive_gain_diopter: Option<f64>,
    pub drift_amplitude_diopter: f64,
    pub drift_period_s: f64,
    pub drift_phase_rad: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            transport_delay_s: 3e-3,
            time_constant_s: 1.5e-3,
            drive_offset_diopter: None,
            drive_gain_diopter: None,
            drift_amplitude_diopter: 0.0,
            drift_period_s: 1.0,
            drift_phase_rad: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoldMode {
    Hold,
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    /// Half width of the trigger window in detector-ratio units; defaults
    /// to 0.4 of the smallest target spacing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trigger_window: Option<f64>,
    pub dac_step: i64,
    pub sample_rate_hz: f64,
    pub adc_bits: u32,
    pub dac_bits: u32,
    /// Defaults to bit_depth over bitplane_rate_hz.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plane_display_time_s: Option<f64>,
    pub bitplane_groups: usize,
    pub tracking_latency_s: f64,
    pub hold: HoldMode,
    pub initial_level: i64,
    pub duration_s: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let c = ControllerConfig::prototype(vec![0.0, 1.0]);
        Self {
            trigger_window: None,
            dac_step: c.dac_step,
            sample_rate_hz: c.sample_rate_hz,
            adc_bits: c.adc_bits,
            dac_bits: c.dac_bits,
            plane_display_time_s: None,
            bitplane_groups: c.bitplane_groups,
            tracking_latency_s: c.tracking_latency_s,
            hold: HoldMode::Hold,
            initial_level: 0,
            duration_s: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    /// Focus sweep: number of steps and its diopter range.
    pub sweep_steps: usize,
    pub sweep_near_diopter: f64,
    pub sweep_far_diopter: f64,
    pub psf_rows: usize,
    pub psf_cols: usize,
    pub psf_spot_px: usize,
    pub psf_cell_px: usize,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            sweep_steps: 169,
            sweep_near_diopter: 4.0,
            sweep_far_diopter: 0.0,
            psf_rows: 5,
            psf_cols: 8,
            psf_spot_px: 3,
            psf_cell_px: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub iterations: usize,
    pub focus_samples: usize,
    pub focus_near_diopter: f64,
    pub focus_far_diopter: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper_bound: Option<f64>,
    pub power_iterations: usize,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let s = OptimizeSettings::<f64>::default();
        Self {
            iterations: s.iterations,
            focus_samples: 81,
            focus_near_diopter: 4.0,
            focus_far_diopter: 0.0,
            upper_bound: None,
            power_iterations: s.power_iterations,
        }
    }
}

/// `n` values evenly spaced from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect(),
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Builds every model once so that bad values surface at load time.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.eye()?;
        self.layout()?;
        self.control_scenario()?;
        self.optimize_settings()?;
        let r = &self.render;
        if r.psf_rows == 0 || r.psf_cols == 0 || r.psf_spot_px == 0 || r.psf_cell_px == 0 {
            return Err(ConfigError::Invalid { key: "render.psf_*", reason: "must be positive".into() });
        }
        if self.optimize.focus_samples == 0 {
            return Err(ConfigError::Invalid { key: "optimize.focus_samples", reason: "must be positive".into() });
        }
        Ok(())
    }

    pub fn display(&self) -> Result<DisplayModel<f64>, ConfigError> {
        let s = &self.display;
        let d = DisplayModel {
            pixel_pitch_m: s.pixel_pitch_m,
            display_distance_m: s.display_distance_m,
            panel_width_px: s.panel_width_px,
            panel_height_px: s.panel_height_px,
            panel_width_m: s.pixel_pitch_m * s.panel_width_px as f64,
            lens_power_min_diopter: s.lens_power_min_diopter,
            lens_power_max_diopter: s.lens_power_max_diopter,
            bitplane_rate_hz: s.bitplane_rate_hz,
            bit_depth: s.bit_depth,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn eye(&self) -> Result<EyeModel<f64>, ConfigError> {
        let e = EyeModel {
            pupil_diameter_m: self.eye.pupil_diameter_m,
            retina_distance_m: self.eye.retina_distance_m,
            focus_diopter: self.eye.focus_diopter,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn layout(&self) -> Result<PlaneLayout<f64>, ConfigError> {
        let l = &self.layout;
        Ok(match &l.depths_diopter {
            Some(d) => PlaneLayout::new(d.clone())?,
            None => PlaneLayout::uniform(l.near_diopter, l.far_diopter, l.planes)?,
        })
    }

    pub fn psd(&self, display: &DisplayModel<f64>) -> Result<PsdGeometry<f64>, ConfigError> {
        let p = PsdGeometry::prototype(display);
        let s = &self.psd;
        let g = PsdGeometry {
            beam_offset_m: s.beam_offset_m.unwrap_or(p.beam_offset_m),
            psd_distance_m: s.psd_distance_m.unwrap_or(p.psd_distance_m),
            psd_length_m: s.psd_length_m.unwrap_or(p.psd_length_m),
            psd_precision_m: s.psd_precision_m.unwrap_or(p.psd_precision_m),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn optimize_settings(&self) -> Result<OptimizeSettings<f64>, ConfigError> {
        let o = &self.optimize;
        if let Some(u) = o.upper_bound {
            if !(u > 0.0) {
                return Err(ConfigError::Invalid { key: "optimize.upper_bound", reason: "must be positive".into() });
            }
        }
        Ok(OptimizeSettings {
            iterations: o.iterations,
            upper_bound: o.upper_bound,
            power_iterations: o.power_iterations,
            ..OptimizeSettings::default()
        })
    }

    pub fn focus_samples(&self) -> Vec<f64> {
        let o = &self.optimize;
        linspace(o.focus_near_diopter, o.focus_far_diopter, o.focus_samples)
    }

    pub fn sweep_focus(&self) -> Vec<f64> {
        let r = &self.render;
        linspace(r.sweep_near_diopter, r.sweep_far_diopter, r.sweep_steps)
    }

    /// Display, detector, lens plant and controller for `simulate`.
    ///
    /// Calibration uses the noiseless readings at the nearest and farthest
    /// plane; trigger targets are the calibrated ratios of the plane depths.
    pub fn control_scenario(&self) -> Result<ControlScenario, ConfigError> {
        let display = self.display()?;
        let layout = self.layout()?;
        if layout.len() < 2 {
            return Err(ConfigError::Invalid { key: "layout.planes", reason: "control needs at least 2 planes".into() });
        }
        let geometry = self.psd(&display)?;
        let calibration = calibrate_ideal(&display, &geometry, layout.near(), layout.far())?;
        let targets: Vec<f64> = match self.layout.depths_diopter {
            Some(_) => layout.depths().iter().map(|&d| calibration.ratio_of(d)).collect(),
            None => plane_targets(&calibration, layout.near(), layout.far(), layout.len())?,
        };

        let c = &self.controller;
        let mut controller = ControllerConfig::prototype(targets);
        if let Some(w) = c.trigger_window {
            controller.trigger_window = w;
        }
        controller.dac_step = c.dac_step;
        controller.sample_rate_hz = c.sample_rate_hz;
        controller.adc_bits = c.adc_bits;
        controller.dac_bits = c.dac_bits;
        controller.plane_display_time_s =
            c.plane_display_time_s.unwrap_or(display.bit_depth as f64 / display.bitplane_rate_hz);
        controller.bitplane_groups = c.bitplane_groups;
        controller.tracking_latency_s = c.tracking_latency_s;
        controller.hold = match c.hold {
            HoldMode::Hold => DisplayHold::Hold,
            HoldMode::Continue => DisplayHold::Continue,
        };
        controller.initial_level = c.initial_level;
        controller.validate()?;
        if !(c.duration_s > 0.0) {
            return Err(ConfigError::Invalid { key: "controller.duration_s", reason: "must be positive".into() });
        }

        let p = &self.plant;
        let spacing = layout.max_spacing();
        let gain = p
            .drive_gain_diopter
            .unwrap_or(spacing / controller.event_samples() as f64 * 0.999 / controller.dac_step as f64);
        let drive = DriveMap {
            offset_diopter: p.drive_offset_diopter.unwrap_or(display.power_for_plane(layout.near()) - 0.02),
            gain_diopter_per_level: gain,
        };
        let mut plant = LensPlantConfig::prototype(&display, drive);
        plant.transport_delay_s = p.transport_delay_s;
        plant.time_constant_s = p.time_constant_s;
        if p.drift_amplitude_diopter != 0.0 {
            plant.drift = Some(Drift {
                amplitude_diopter: p.drift_amplitude_diopter,
                period_s: p.drift_period_s,
                phase_rad: p.drift_phase_rad,
            });
        }
        plant.validate()?;
        Ok(ControlScenario { display, layout, geometry, plant, controller, calibration, duration_s: c.duration_s })
    }
}
