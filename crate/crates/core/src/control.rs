//! Tracking-and-display loop: tunable-lens plant, laser-deflection PSD,
//! 12-bit converters, two-point calibration and the sweep controller.
//!
//! The lens is driven with a triangular DAC ramp. A laser deflected by the
//! lens lands on a position sensing detector whose current ratio `r` is an
//! affine function of lens power, so focal planes are triggered on the
//! measured `r` rather than on DAC levels.
//!
//! The discrete-time loop runs in `f64`; geometry and calibration are generic.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::optics::{DisplayModel, PlaneLayout};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("laser spot at {h_m:.6} m is off the {length_m:.6} m detector")]
    OffDetector { h_m: f64, length_m: f64 },
    #[error("calibration points share the ratio {0}")]
    DegenerateCalibration(f64),
    #[error("invalid {key}: {reason}")]
    InvalidParameter { key: &'static str, reason: String },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace holds no complete up-down sweep")]
    NoFullFrame,
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ControlError {
    ControlError::InvalidParameter { key, reason: reason.into() }
}

/// Laser and detector placement.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsdGeometry<T> {
    /// Lateral offset of the laser from the optical axis.
    pub beam_offset_m: T,
    /// Lens-to-detector distance.
    pub psd_distance_m: T,
    /// Active length of the detector.
    pub psd_length_m: T,
    /// Spot-position resolution.
    pub psd_precision_m: T,
}

impl<T: Real> PsdGeometry<T> {
    /// 15 mm detector with 15 µm precision, centred so the spot crosses it at
    /// the midpoint of a 0-4 D plane range and travels 7 mm across that range.
    pub fn prototype(display: &DisplayModel<T>) -> Self {
        let mid = display.power_for_plane(T::lit(2.0));
        let d_p = mid.recip();
        let travel = T::lit(7e-3);
        Self {
            beam_offset_m: travel / (d_p * T::lit(4.0)),
            psd_distance_m: d_p,
            psd_length_m: T::lit(15e-3),
            psd_precision_m: T::lit(15e-6),
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        for (key, v) in [
            ("beam_offset_m", self.beam_offset_m),
            ("psd_distance_m", self.psd_distance_m),
            ("psd_length_m", self.psd_length_m),
            ("psd_precision_m", self.psd_precision_m),
        ] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(invalid(key, "must be positive and finite"));
            }
        }
        Ok(())
    }

    /// Spot position for lens power `power_diopter`: `a (d_p D - 1)`.
    pub fn spot_position(&self, power_diopter: T) -> T {
        self.beam_offset_m * (self.psd_distance_m * power_diopter - T::one())
    }

    /// Spot travel across a power interval.
    pub fn travel(&self, power_a: T, power_b: T) -> T {
        (self.spot_position(power_a) - self.spot_position(power_b)).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReading<T> {
    pub h_m: T,
    /// Normalized anode currents, `i1 + i2 = 1`.
    pub i1: T,
    pub i2: T,
    /// `(i2 - i1) / (i1 + i2) = 2h / ℓ`.
    pub r: T,
}

/// Detector response to lens power `power_diopter`. With `noise`, a uniform
/// position error of width `psd_precision_m` is added before the ratio.
pub fn psd_read<T: Real, R: Rng>(
    power_diopter: T,
    geom: &PsdGeometry<T>,
    noise: Option<&mut R>,
) -> Result<PsdReading<T>, ControlError> {
    let mut h = geom.spot_position(power_diopter);
    if let Some(rng) = noise {
        let u: f64 = rng.gen_range(-0.5..0.5);
        h = h + T::lit(u) * geom.psd_precision_m;
    }
    let half = geom.psd_length_m * T::lit(0.5);
    if h.abs() > half {
        return Err(ControlError::OffDetector { h_m: h.as_f64(), length_m: geom.psd_length_m.as_f64() });
    }
    let l = geom.psd_length_m;
    let i1 = (half - h) / l;
    let i2 = (half + h) / l;
    Ok(PsdReading { h_m: h, i1, i2, r: (i2 - i1) / (i1 + i2) })
}

/// Noise-free detector reading.
pub fn psd_read_ideal<T: Real>(power_diopter: T, geom: &PsdGeometry<T>) -> Result<PsdReading<T>, ControlError> {
    psd_read::<T, ChaCha8Rng>(power_diopter, geom, None)
}

/// Number of lens configurations the detector can tell apart over `span_travel_m`.
pub fn distinguishable_configs<T: Real>(geom: &PsdGeometry<T>, span_travel_m: T) -> u64 {
    (span_travel_m / geom.psd_precision_m).floor().to_u64().unwrap_or(0)
}

/// Affine map from detector ratio to focal-plane depth, `1/v = α + β r`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationResult<T> {
    pub alpha_diopter: T,
    pub beta_diopter_per_ratio: T,
}

impl<T: Real> CalibrationResult<T> {
    pub fn diopter_of(&self, r: T) -> T {
        self.alpha_diopter + self.beta_diopter_per_ratio * r
    }

    pub fn ratio_of(&self, diopter: T) -> T {
        (diopter - self.alpha_diopter) / self.beta_diopter_per_ratio
    }
}

/// Solves the affine depth map through two `(r, diopter)` measurements.
pub fn calibrate<T: Real>(r_a: T, diopter_a: T, r_b: T, diopter_b: T) -> Result<CalibrationResult<T>, ControlError> {
    if r_a == r_b {
        return Err(ControlError::DegenerateCalibration(r_a.as_f64()));
    }
    let beta = (diopter_a - diopter_b) / (r_a - r_b);
    Ok(CalibrationResult { alpha_diopter: diopter_a - beta * r_a, beta_diopter_per_ratio: beta })
}

/// Calibrates against the noise-free detector with the lens set exactly to
/// the planes `near_diopter` and `far_diopter`.
pub fn calibrate_ideal<T: Real>(
    display: &DisplayModel<T>,
    geom: &PsdGeometry<T>,
    near_diopter: T,
    far_diopter: T,
) -> Result<CalibrationResult<T>, ControlError> {
    let ra = psd_read_ideal(display.power_for_plane(near_diopter), geom)?.r;
    let rb = psd_read_ideal(display.power_for_plane(far_diopter), geom)?.r;
    calibrate(ra, near_diopter, rb, far_diopter)
}

/// Trigger ratios for `n` planes uniform in diopters from near to far, in
/// plane order.
pub fn plane_targets<T: Real>(
    calib: &CalibrationResult<T>,
    near_diopter: T,
    far_diopter: T,
    n: usize,
) -> Result<Vec<T>, ControlError> {
    if n < 2 {
        return Err(invalid("plane_count", "need at least 2 targets"));
    }
    let last = T::from_usize_lossy(n - 1);
    Ok((0..n)
        .map(|k| {
            let d = near_diopter + (far_diopter - near_diopter) * T::from_usize_lossy(k) / last;
            calib.ratio_of(d)
        })
        .collect())
}

/// Affine DAC-to-power law of the lens driver.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveMap {
    pub offset_diopter: f64,
    pub gain_diopter_per_level: f64,
}

impl DriveMap {
    pub fn power(&self, level: i64) -> f64 {
        self.offset_diopter + self.gain_diopter_per_level * level as f64
    }
}

/// Slow additive power drift, e.g. from lens temperature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Drift {
    pub amplitude_diopter: f64,
    pub period_s: f64,
    #[serde(default)]
    pub phase_rad: f64,
}

impl Drift {
    pub fn offset(&self, t_s: f64) -> f64 {
        self.amplitude_diopter * (std::f64::consts::TAU * t_s / self.period_s + self.phase_rad).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensPlantConfig {
    pub power_min_diopter: f64,
    pub power_max_diopter: f64,
    pub drive: DriveMap,
    pub transport_delay_s: f64,
    pub time_constant_s: f64,
    #[serde(default)]
    pub drift: Option<Drift>,
}

impl LensPlantConfig {
    /// Lens with the given drive law, 3 ms transport delay and 1.5 ms lag.
    pub fn prototype(display: &DisplayModel<f64>, drive: DriveMap) -> Self {
        Self {
            power_min_diopter: display.lens_power_min_diopter,
            power_max_diopter: display.lens_power_max_diopter,
            drive,
            transport_delay_s: 3e-3,
            time_constant_s: 1.5e-3,
            drift: None,
        }
    }

    /// Delay, lag and drift removed.
    pub fn ideal(self) -> Self {
        Self { transport_delay_s: 0.0, time_constant_s: 0.0, drift: None, ..self }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.power_min_diopter < self.power_max_diopter) {
            return Err(invalid("power_range_diopter", "minimum must be below maximum"));
        }
        if !(self.transport_delay_s >= 0.0) {
            return Err(invalid("transport_delay_s", "must be non-negative"));
        }
        if !(self.time_constant_s >= 0.0) {
            return Err(invalid("time_constant_s", "must be non-negative"));
        }
        if let Some(d) = self.drift {
            if !(d.period_s > 0.0) {
                return Err(invalid("drift.period_s", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Tunable lens: commanded power through a transport delay, a first-order
/// lag, an additive drift and saturation to the lens range.
#[derive(Debug, Clone)]
pub struct LensPlant {
    cfg: LensPlantConfig,
    dt_s: f64,
    delay: VecDeque<f64>,
    lagged: f64,
    t_s: f64,
    power: f64,
    saturated: bool,
}

impl LensPlant {
    /// Plant at rest at the power commanded by `initial_level`.
    pub fn new(cfg: LensPlantConfig, dt_s: f64, initial_level: i64) -> Result<Self, ControlError> {
        cfg.validate()?;
        if !(dt_s > 0.0) {
            return Err(invalid("dt_s", "must be positive"));
        }
        let start = cfg.drive.power(initial_level);
        let n = (cfg.transport_delay_s / dt_s).round() as usize;
        let mut plant = Self {
            cfg,
            dt_s,
            delay: std::iter::repeat_n(start, n).collect(),
            lagged: start,
            t_s: 0.0,
            power: start,
            saturated: false,
        };
        plant.power = plant.output(start);
        Ok(plant)
    }

    fn output(&mut self, lagged: f64) -> f64 {
        let drift = self.cfg.drift.map_or(0.0, |d| d.offset(self.t_s));
        let raw = lagged + drift;
        let clamped = raw.clamp(self.cfg.power_min_diopter, self.cfg.power_max_diopter);
        self.saturated = clamped != raw;
        clamped
    }

    /// Advances one sample with the DAC at `dac_level`; returns the new power.
    pub fn step(&mut self, dac_level: i64) -> f64 {
        self.delay.push_back(self.cfg.drive.power(dac_level));
        let command = self.delay.pop_front().expect("delay line holds the new command");
        let alpha = if self.cfg.time_constant_s > 0.0 {
            1.0 - (-self.dt_s / self.cfg.time_constant_s).exp()
        } else {
            1.0
        };
        self.lagged += alpha * (command - self.lagged);
        self.t_s += self.dt_s;
        self.power = self.output(self.lagged);
        self.power
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn saturated(&self) -> bool {
        self.saturated
    }

    pub fn config(&self) -> &LensPlantConfig {
        &self.cfg
    }
}

/// What the DAC does while a plane is on screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisplayHold {
    /// Sweep pauses until the plane is turned off.
    Hold,
    /// Sweep keeps ramping during display.
    Continue,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Trigger ratios `r_1 … r_n`, strictly monotone, plane 1 first.
    pub targets: Vec<f64>,
    /// Half width `Δr` of each trigger window.
    pub trigger_window: f64,
    /// Magnitude of the DAC increment `ΔL` per sample.
    pub dac_step: i64,
    pub sample_rate_hz: f64,
    pub adc_bits: u32,
    pub dac_bits: u32,
    /// Time to show all bitplanes of one plane.
    pub plane_display_time_s: f64,
    /// Bitplane groups per plane. With 2, the first half of the bitplanes is
    /// shown on the rising sweep and the rest on the falling sweep.
    pub bitplane_groups: usize,
    pub tracking_latency_s: f64,
    pub hold: DisplayHold,
    pub initial_level: i64,
}

impl ControllerConfig {
    /// 200 kHz converters, 12 bits, 8 × 50 µs planes split over both sweep
    /// directions, 20 µs tracking latency, `Δr` at 0.4 × the minimum spacing.
    pub fn prototype(targets: Vec<f64>) -> Self {
        let window = 0.4 * min_spacing(&targets);
        Self {
            targets,
            trigger_window: window,
            dac_step: 1,
            sample_rate_hz: 200_000.0,
            adc_bits: 12,
            dac_bits: 12,
            plane_display_time_s: 8.0 * 50e-6,
            bitplane_groups: 2,
            tracking_latency_s: 20e-6,
            hold: DisplayHold::Hold,
            initial_level: 0,
        }
    }

    pub fn dt_s(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    /// Samples one trigger keeps the display busy.
    pub fn event_samples(&self) -> usize {
        let per_event = self.plane_display_time_s / self.bitplane_groups as f64;
        ((per_event * self.sample_rate_hz).round() as usize).max(1)
    }

    pub fn latency_samples(&self) -> usize {
        (self.tracking_latency_s * self.sample_rate_hz).round() as usize
    }

    /// ADC quantum in ratio units over the `[-1, 1]` input range.
    pub fn adc_quantum(&self) -> f64 {
        2.0 / (1u64 << self.adc_bits) as f64
    }

    pub fn adc_code(&self, r: f64) -> i64 {
        let half = 1i64 << (self.adc_bits - 1);
        ((r / self.adc_quantum()).round() as i64).clamp(-half, half - 1)
    }

    pub fn dac_max(&self) -> i64 {
        (1i64 << self.dac_bits) - 1
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let t = &self.targets;
        if t.len() < 2 {
            return Err(invalid("targets", "need at least 2 targets"));
        }
        let rising = t[1] > t[0];
        if !t.windows(2).all(|w| if rising { w[1] > w[0] } else { w[1] < w[0] }) {
            return Err(invalid("targets", "must be strictly monotone"));
        }
        if !(self.trigger_window > 0.0 && self.trigger_window < 0.5 * min_spacing(t)) {
            return Err(invalid("trigger_window", "must be positive and below half the minimum spacing"));
        }
        if !(self.plane_display_time_s > 0.0) {
            return Err(invalid("plane_display_time_s", "must be positive"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(invalid("sample_rate_hz", "must be positive"));
        }
        if self.dac_step < 1 {
            return Err(invalid("dac_step", "must be at least 1"));
        }
        if !(1..=24).contains(&self.adc_bits) || !(1..=24).contains(&self.dac_bits) {
            return Err(invalid("adc_bits", "converter resolution must be 1-24 bits"));
        }
        if self.bitplane_groups == 0 {
            return Err(invalid("bitplane_groups", "must be at least 1"));
        }
        if !(self.tracking_latency_s >= 0.0) {
            return Err(invalid("tracking_latency_s", "must be non-negative"));
        }
        if !(0..=self.dac_max()).contains(&self.initial_level) {
            return Err(invalid("initial_level", "outside the DAC range"));
        }
        Ok(())
    }
}

fn min_spacing(targets: &[f64]) -> f64 {
    targets.windows(2).map(|w| (w[1] - w[0]).abs()).fold(f64::INFINITY, f64::min)
}

/// One controller sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t_s: f64,
    pub dac_level: i64,
    pub true_power_diopter: f64,
    /// Noise-free detector ratio of the true lens power, clamped to `[-1, 1]`.
    pub psd_ratio: f64,
    /// ADC code the controller acted on (after tracking latency).
    pub adc_code: i64,
    /// 1-based plane index displayed at this sample.
    pub plane: Option<usize>,
    pub direction_flip: bool,
    /// 1-based plane index whose trigger window was overrun.
    pub missed: Option<usize>,
    pub saturated: bool,
    pub off_detector: bool,
}

impl TraceRecord {
    pub fn event_label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(i) = self.plane {
            parts.push(format!("plane_displayed({i})"));
        }
        if self.direction_flip {
            parts.push("direction_flip".to_string());
        }
        if let Some(i) = self.missed {
            parts.push(format!("missed_plane({i})"));
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub records: Vec<TraceRecord>,
    pub dt_s: f64,
    pub adc_quantum: f64,
    pub bitplane_groups: usize,
}

impl SimTrace {
    pub fn planes(&self) -> impl Iterator<Item = (usize, &TraceRecord)> {
        self.records.iter().filter_map(|r| r.plane.map(|i| (i, r)))
    }

    pub fn plane_sequence(&self) -> Vec<usize> {
        self.planes().map(|(i, _)| i).collect()
    }

    pub fn missed_planes(&self) -> usize {
        self.records.iter().filter(|r| r.missed.is_some()).count()
    }
}

/// Runs the sweep controller for `duration_s`.
///
/// Each sample the DAC moves by `ΔL`. When the latency-delayed ADC reading
/// lies within `Δr` of the current target the plane is shown; the display
/// stays busy for one bitplane group, after which the target advances with
/// the sweep direction and the direction flips past either end. If the
/// reading overruns a target window the plane is recorded as missed and the
/// target advances without displaying.
pub fn run_controller(
    plant_cfg: &LensPlantConfig,
    geom: &PsdGeometry<f64>,
    cfg: &ControllerConfig,
    duration_s: f64,
    seed: Option<u64>,
) -> Result<SimTrace, ControlError> {
    cfg.validate()?;
    geom.validate()?;
    let dt = cfg.dt_s();
    let mut plant = LensPlant::new(*plant_cfg, dt, cfg.initial_level)?;
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let n = cfg.targets.len();
    // +1 when increasing i raises r
    let order = if cfg.targets[n - 1] > cfg.targets[0] { 1.0 } else { -1.0 };
    let q = cfg.adc_quantum();

    let measure = |power: f64, rng: &mut Option<ChaCha8Rng>| -> (f64, f64, bool) {
        let ideal = match psd_read_ideal(power, geom) {
            Ok(p) => (p.r, false),
            Err(_) => ((geom.spot_position(power) * 2.0 / geom.psd_length_m).clamp(-1.0, 1.0), true),
        };
        let noisy = match rng.as_mut() {
            Some(g) => match psd_read(power, geom, Some(g)) {
                Ok(p) => p.r,
                Err(_) => ideal.0,
            },
            None => ideal.0,
        };
        (ideal.0, noisy, ideal.1)
    };

    let initial = measure(plant.power(), &mut None);
    let mut adc_line: VecDeque<i64> = std::iter::repeat_n(cfg.adc_code(initial.1), cfg.latency_samples()).collect();

    let steps = (duration_s / dt).round() as usize;
    let mut records = Vec::with_capacity(steps);
    let mut level = cfg.initial_level;
    let mut delta: i64 = 1;
    let mut i: usize = 1;
    let mut busy = 0usize;
    let event_samples = cfg.event_samples();

    let advance = |i: &mut usize, delta: &mut i64| -> bool {
        if *delta > 0 {
            if *i == n {
                *delta = -1;
                return true;
            }
            *i += 1;
        } else {
            if *i == 1 {
                *delta = 1;
                return true;
            }
            *i -= 1;
        }
        false
    };

    for k in 0..steps {
        let mut flip = false;
        let mut displaying = false;
        if busy > 0 {
            busy -= 1;
            if busy == 0 {
                // plane turned off: finish the trigger branch
                flip = advance(&mut i, &mut delta);
            } else {
                displaying = true;
            }
        }
        let moving = !displaying || cfg.hold == DisplayHold::Continue;
        if moving {
            level = (level + delta * cfg.dac_step).clamp(0, cfg.dac_max());
        }
        // the reading reflects commands up to the previous sample
        let power = plant.power();
        let (r_true, r_meas, off) = measure(power, &mut rng);
        adc_line.push_back(cfg.adc_code(r_meas));
        let code = adc_line.pop_front().expect("latency line non-empty");
        let r_hat = code as f64 * q;

        let mut plane = None;
        let mut missed = None;
        if !displaying {
            let target = cfg.targets[i - 1];
            if (r_hat - target).abs() <= cfg.trigger_window {
                plane = Some(i);
                busy = event_samples;
            } else if (r_hat - target) * order * delta as f64 > cfg.trigger_window {
                missed = Some(i);
                flip |= advance(&mut i, &mut delta);
            }
        }
        records.push(TraceRecord {
            t_s: k as f64 * dt,
            dac_level: level,
            true_power_diopter: power,
            psd_ratio: r_true,
            adc_code: code,
            plane,
            direction_flip: flip,
            missed,
            saturated: plant.saturated(),
            off_detector: off,
        });
        plant.step(level);
    }
    Ok(SimTrace { records, dt_s: dt, adc_quantum: q, bitplane_groups: cfg.bitplane_groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlaneError {
    /// Worst |true depth - depth of the reading that fired the trigger|.
    pub max_depth_error_diopter: f64,
    pub mean_depth_error_diopter: f64,
    /// Worst |true depth - target depth| at the trigger instant; dominated by
    /// the trigger window half width.
    pub max_target_offset_diopter: f64,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMetrics {
    pub planes_per_second: f64,
    pub frames_per_second: f64,
    pub per_plane: Vec<PlaneError>,
    pub missed_planes: usize,
    /// Every complete period reads `1..n, n..1`.
    pub order_ok: bool,
    pub full_frames: usize,
    /// `(r_n - r_1) / (r_max - r_min)` over the measured frames.
    pub active_span_fraction: f64,
    pub max_depth_error_diopter: f64,
}

/// Throughput, frame rate and depth accuracy over the complete up-down
/// periods of `trace`. A period starts at a plane-1 display that opens a
/// rising sweep.
pub fn trace_metrics(
    trace: &SimTrace,
    calib: &CalibrationResult<f64>,
    layout: &PlaneLayout<f64>,
) -> Result<TraceMetrics, ControlError> {
    if trace.records.is_empty() {
        return Err(ControlError::EmptyTrace);
    }
    let n = layout.len();
    let recs = &trace.records;
    // period starts: plane 1 shown while rising (first event, or the second of a 1,1 pair)
    let events: Vec<(usize, usize)> = recs
        .iter()
        .enumerate()
        .filter_map(|(k, r)| r.plane.map(|i| (k, i)))
        .collect();
    let mut starts = Vec::new();
    for (e, &(k, i)) in events.iter().enumerate() {
        let rising = if e == 0 { i == 1 } else { events[e - 1].1 == 1 && i == 1 };
        if i == 1 && rising && (e + 1 < events.len() && events[e + 1].1 != 1 || n == 1) {
            starts.push(k);
        }
    }
    if starts.len() < 2 {
        return Err(ControlError::NoFullFrame);
    }
    let (k0, k1) = (starts[0], starts[starts.len() - 1]);
    let span_s = (k1 - k0) as f64 * trace.dt_s;
    let frames = starts.len() - 1;

    let mut expected: Vec<usize> = (1..=n).collect();
    expected.extend((1..=n).rev());
    let mut order_ok = true;
    for w in starts.windows(2) {
        let seq: Vec<usize> = recs[w[0]..w[1]].iter().filter_map(|r| r.plane).collect();
        order_ok &= seq == expected;
    }

    let window = &recs[k0..k1];
    let plane_events = window.iter().filter(|r| r.plane.is_some()).count();
    let missed = window.iter().filter(|r| r.missed.is_some()).count();

    let mut per_plane = vec![PlaneError::default(); n];
    let mut sums = vec![0.0; n];
    for r in window {
        if let Some(i) = r.plane {
            let truth = calib.diopter_of(r.psd_ratio);
            let seen = calib.diopter_of(r.adc_code as f64 * trace.adc_quantum);
            let err = (truth - seen).abs();
            let off = (truth - layout.depths()[i - 1]).abs();
            let p = &mut per_plane[i - 1];
            p.max_depth_error_diopter = p.max_depth_error_diopter.max(err);
            p.max_target_offset_diopter = p.max_target_offset_diopter.max(off);
            p.events += 1;
            sums[i - 1] += err;
        }
    }
    for (p, s) in per_plane.iter_mut().zip(&sums) {
        if p.events > 0 {
            p.mean_depth_error_diopter = s / p.events as f64;
        }
    }
    let (rmin, rmax) = window
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.psd_ratio), b.max(r.psd_ratio)));
    let r1 = calib.ratio_of(layout.depths()[0]);
    let rn = calib.ratio_of(layout.depths()[n - 1]);
    let active = if rmax > rmin { (rn - r1).abs() / (rmax - rmin) } else { 0.0 };
    let max_err = per_plane.iter().map(|p| p.max_depth_error_diopter).fold(0.0, f64::max);
    Ok(TraceMetrics {
        planes_per_second: plane_events as f64 / trace.bitplane_groups as f64 / span_s,
        frames_per_second: frames as f64 / span_s,
        per_plane,
        missed_planes: missed,
        order_ok,
        full_frames: frames,
        active_span_fraction: active,
        max_depth_error_diopter: max_err,
    })
}

/// Plant, detector, controller and calibration bundled for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlScenario {
    pub display: DisplayModel<f64>,
    pub layout: PlaneLayout<f64>,
    pub geometry: PsdGeometry<f64>,
    pub plant: LensPlantConfig,
    pub controller: ControllerConfig,
    pub calibration: CalibrationResult<f64>,
    pub duration_s: f64,
}

impl ControlScenario {
    /// 40 planes over 4-0 D on the prototype display and detector. Level 0
    /// drives the lens 0.02 D past the near plane and each DAC step moves it
    /// just under one plane spacing per bitplane group.
    fn matched_sweep() -> Self {
        let display = DisplayModel::<f64>::prototype();
        let layout = PlaneLayout::uniform(4.0, 0.0, 40).expect("valid layout");
        let geometry = PsdGeometry::prototype(&display);
        let calibration = calibrate_ideal(&display, &geometry, 4.0, 0.0).expect("spot on detector");
        let targets = plane_targets(&calibration, 4.0, 0.0, 40).expect("n >= 2");
        let controller = ControllerConfig::prototype(targets);
        let spacing = 4.0 / 39.0;
        let drive = DriveMap {
            offset_diopter: display.power_for_plane(4.0) - 0.02,
            gain_diopter_per_level: spacing / controller.event_samples() as f64 * 0.999,
        };
        Self {
            plant: LensPlantConfig::prototype(&display, drive),
            controller: ControllerConfig { hold: DisplayHold::Continue, ..controller },
            display,
            layout,
            geometry,
            calibration,
            duration_s: 0.25,
        }
    }

    /// Ideal lens swept just slower than one plane spacing per bitplane
    /// group with the ramp running during display, so display time alone
    /// sets the throughput.
    pub fn display_limited() -> Self {
        let mut s = Self::matched_sweep();
        s.plant = s.plant.ideal();
        s
    }

    /// The matched sweep of [`display_limited`](Self::display_limited)
    /// driving a lens with a pure 3 ms transport delay. The lens overshoots
    /// the far plane by the delay; at the near end the DAC floor sits just
    /// past plane 1 and cuts the overshoot short.
    pub fn prototype_like() -> Self {
        let mut s = Self::matched_sweep();
        s.plant.time_constant_s = 0.0;
        s
    }

    pub fn run(&self, seed: Option<u64>) -> Result<(SimTrace, TraceMetrics), ControlError> {
        let trace = run_controller(&self.plant, &self.geometry, &self.controller, self.duration_s, seed)?;
        let metrics = trace_metrics(&trace, &self.calibration, &self.layout)?;
        Ok((trace, metrics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::linear_fit;

    fn geom() -> PsdGeometry<f64> {
        PsdGeometry::prototype(&DisplayModel::prototype())
    }

    fn plant(delay: f64, tau: f64) -> LensPlantConfig {
        LensPlantConfig {
            power_min_diopter: 0.0,
            power_max_diopter: 100.0,
            drive: DriveMap { offset_diopter: 10.0, gain_diopter_per_level: 0.01 },
            transport_delay_s: delay,
            time_constant_s: tau,
            drift: None,
        }
    }

    #[test]
    fn identity_plant_follows_next_sample() {
        let mut p = LensPlant::new(plant(0.0, 0.0), 5e-6, 0).unwrap();
        assert_eq!(p.power(), 10.0);
        assert_eq!(p.step(100), 11.0);
        assert_eq!(p.step(100), 11.0);
    }

    #[test]
    fn lag_reaches_95_percent_at_three_tau() {
        let dt = 5e-6;
        let tau = 1.5e-3;
        let mut p = LensPlant::new(plant(0.0, tau), dt, 0).unwrap();
        let mut t95 = None;
        for k in 1..=4000 {
            let v = p.step(100);
            if t95.is_none() && v - 10.0 >= 0.95 {
                t95 = Some(k as f64 * dt);
            }
        }
        let t95 = t95.unwrap();
        // closed form: -τ ln 0.05 = 4.4936 ms
        assert!((t95 - 4.4936e-3).abs() < 2.0 * dt, "{t95}");
    }

    #[test]
    fn transport_delay_shifts_triangle() {
        let dt = 5e-6;
        let mut p = LensPlant::new(plant(3e-3, 0.0), dt, 0).unwrap();
        let period = (1.0 / 20.0 / dt) as i64;
        let tri = |k: i64| {
            let m = k % period;
            if m < period / 2 { m / 10 } else { (period - m) / 10 }
        };
        let n = 3 * period as usize;
        let input: Vec<f64> = (0..n as i64).map(|k| p.config().drive.power(tri(k))).collect();
        let output: Vec<f64> = (0..n as i64).map(|k| p.step(tri(k))).collect();
        let mean_in = input.iter().sum::<f64>() / n as f64;
        let mean_out = output.iter().sum::<f64>() / n as f64;
        let best = (0..1200)
            .max_by(|&a, &b| {
                let c = |lag: usize| -> f64 {
                    (period as usize..n).map(|k| (input[k - lag] - mean_in) * (output[k] - mean_out)).sum()
                };
                c(a).partial_cmp(&c(b)).unwrap()
            })
            .unwrap();
        // new command is applied at the next sample: 600 samples of delay + 1
        assert!((best as f64 * dt - 3e-3).abs() <= 2.0 * dt, "{best}");
    }

    #[test]
    fn saturation_is_flagged() {
        let mut cfg = plant(0.0, 0.0);
        cfg.power_max_diopter = 10.5;
        let mut p = LensPlant::new(cfg, 5e-6, 0).unwrap();
        assert_eq!(p.step(100), 10.5);
        assert!(p.saturated());
    }

    #[test]
    fn psd_zero_and_edge() {
        let g = geom();
        let z = psd_read_ideal(1.0 / g.psd_distance_m, &g).unwrap();
        assert!(z.h_m.abs() < 1e-15 && z.r.abs() < 1e-15);
        // power placing the spot on the edge
        let edge = (1.0 + g.psd_length_m / 2.0 / g.beam_offset_m) / g.psd_distance_m;
        let e = psd_read_ideal(edge, &g).unwrap();
        assert!((e.r - 1.0).abs() < 1e-12 && e.i1.abs() < 1e-12);
        assert!(matches!(psd_read_ideal(edge + 1.0, &g), Err(ControlError::OffDetector { .. })));
    }

    #[test]
    fn psd_noise_stays_within_precision() {
        let g = geom();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ideal = psd_read_ideal(12.0, &g).unwrap();
        for _ in 0..200 {
            let n = psd_read(12.0, &g, Some(&mut rng)).unwrap();
            assert!((n.h_m - ideal.h_m).abs() <= 0.5 * g.psd_precision_m);
        }
    }

    #[test]
    fn noiseless_sweep_is_affine() {
        let g = geom();
        let powers: Vec<f64> = (0..20).map(|k| 10.3 + 0.2 * k as f64).collect();
        let rs: Vec<f64> = powers.iter().map(|&p| psd_read_ideal(p, &g).unwrap().r).collect();
        let fit = linear_fit(&rs, &powers).unwrap();
        let max_res = rs.iter().zip(&powers).map(|(&r, &p)| (fit.predict(r) - p).abs()).fold(0.0, f64::max);
        assert!(max_res < 1e-12, "{max_res}");
        // slope matches ℓ / (2 a d_p)
        let slope = g.psd_length_m / (2.0 * g.beam_offset_m * g.psd_distance_m);
        assert!((fit.slope - slope).abs() < 1e-9 * slope);
    }

    #[test]
    fn prototype_geometry_travel() {
        let d = DisplayModel::<f64>::prototype();
        let g = geom();
        let travel = g.travel(d.power_for_plane(4.0), d.power_for_plane(0.0));
        assert!((travel - 7e-3).abs() < 1e-12);
        assert_eq!(distinguishable_configs(&g, travel), 466);
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate(-0.5f64, 4.0, 0.5, 0.0).unwrap();
        assert_eq!((c.alpha_diopter, c.beta_diopter_per_ratio), (2.0, -4.0));
        assert_eq!(c.diopter_of(-0.5), 4.0);
        assert_eq!(c.diopter_of(0.5), 0.0);
        assert!(calibrate(0.1, 1.0, 0.1, 2.0).is_err());
    }

    #[test]
    fn target_examples() {
        let c = calibrate(-0.5f64, 4.0, 0.5, 0.0).unwrap();
        assert_eq!(plane_targets(&c, 4.0, 0.0, 5).unwrap(), vec![-0.5, -0.25, 0.0, 0.25, 0.5]);
        assert_eq!(plane_targets(&c, 4.0, 0.0, 2).unwrap(), vec![-0.5, 0.5]);
        let t = plane_targets(&c, 4.0, 0.0, 40).unwrap();
        let spacing = c.diopter_of(t[0]) - c.diopter_of(t[1]);
        assert!((spacing - 4.0 / 39.0).abs() < 1e-12);
        assert!(plane_targets(&c, 4.0, 0.0, 1).is_err());
    }

    #[test]
    fn distinguishable_examples() {
        let mut g = geom();
        assert_eq!(distinguishable_configs(&g, 7e-3), 466);
        assert_eq!(distinguishable_configs(&g, g.psd_precision_m), 1);
        g.psd_precision_m *= 2.0;
        assert_eq!(distinguishable_configs(&g, 7e-3), 233);
    }

    fn slow_ideal_scenario(n: usize) -> ControlScenario {
        let mut s = ControlScenario::matched_sweep();
        s.plant.drive = DriveMap { offset_diopter: s.display.power_for_plane(4.0) - 0.05, gain_diopter_per_level: 1.2e-3 };
        s.layout = PlaneLayout::uniform(4.0, 0.0, n).unwrap();
        s.controller = ControllerConfig::prototype(plane_targets(&s.calibration, 4.0, 0.0, n).unwrap());
        s.controller.tracking_latency_s = 0.0;
        s.plant = s.plant.ideal();
        s
    }

    #[test]
    fn ideal_slow_sweep_orders_planes() {
        let s = slow_ideal_scenario(4);
        let trace = run_controller(&s.plant, &s.geometry, &s.controller, 0.2, None).unwrap();
        let seq = trace.plane_sequence();
        assert_eq!(&seq[..8], &[1, 2, 3, 4, 4, 3, 2, 1]);
        let m = trace_metrics(&trace, &s.calibration, &s.layout).unwrap();
        assert!(m.order_ok && m.missed_planes == 0);
        let quantum = s.calibration.beta_diopter_per_ratio.abs() / 4096.0;
        assert!(m.max_depth_error_diopter <= quantum * (1.0 + 1e-9), "{}", m.max_depth_error_diopter);
    }

    #[test]
    fn runs_are_deterministic() {
        let s = ControlScenario::prototype_like();
        let a = run_controller(&s.plant, &s.geometry, &s.controller, 0.05, Some(3)).unwrap();
        let b = run_controller(&s.plant, &s.geometry, &s.controller, 0.05, Some(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.records.windows(2).all(|w| w[1].t_s > w[0].t_s));
    }

    #[test]
    fn empty_trace_is_an_error() {
        let s = slow_ideal_scenario(4);
        let t = SimTrace { records: vec![], dt_s: 5e-6, adc_quantum: 1.0, bitplane_groups: 2 };
        assert_eq!(trace_metrics(&t, &s.calibration, &s.layout), Err(ControlError::EmptyTrace));
    }

    #[test]
    fn throughput_never_exceeds_display_budget() {
        let s = ControlScenario::display_limited();
        let (_, m) = s.run(None).unwrap();
        let budget = crate::optics::plane_budget(&s.display);
        assert!(m.planes_per_second <= budget);
    }
}
