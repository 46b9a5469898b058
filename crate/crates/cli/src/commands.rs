use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use multifocal::config::{linspace, ScenarioConfig};
use multifocal::filtering::{assign_direct, assign_linear};
use multifocal::image::Image;
use multifocal::io::{
    load_scene, load_stack, read_plane_raster, read_raster, save_stack, write_objective_csv, write_plane_raster,
    write_png, write_trace_csv,
};
use multifocal::lightfield::{compare_with_closed_form, OracleGrid};
use multifocal::metrics::{estimate_blur_diameter, linear_fit, mtf_from_slit, SlitAxis, RELIABLE_DIAMETER_PX};
use multifocal::optics::{
    accommodation_feasible, field_of_view, max_useful_planes, min_focal_planes, photometric_factors,
    plane_budget, EyeModel,
};
use multifocal::optimize::optimize_stack;
use multifocal::render::render_from_stack;
use rayon::prelude::*;

use crate::target::TargetManifest;
use crate::Method;

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Writes `key = value` lines to `path` and echoes them to stdout.
fn write_summary(path: &Path, lines: &str) -> Result<()> {
    print!("{lines}");
    std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))
}

pub fn plan(config: &ScenarioConfig, target_cpd: f64) -> Result<()> {
    if !(target_cpd > 0.0) {
        bail!("--target-cpd must be positive, got {target_cpd}");
    }
    let display = config.display()?;
    let eye = config.eye()?;
    let layout = config.layout()?;
    let range = layout.near() - layout.far();
    let cycles_per_m = target_cpd * 180.0 / std::f64::consts::PI / eye.retina_distance_m;
    let n_min = min_focal_planes(eye.pupil_diameter_m, eye.retina_distance_m, cycles_per_m, range);
    let n_max = max_useful_planes(&display, eye.pupil_diameter_m, range);
    let feas = accommodation_feasible(&display, layout.near(), layout.far());
    let fov = field_of_view(&display);
    let photo = photometric_factors::<f64>(layout.len())?;

    let mut s = String::new();
    writeln!(s, "range_diopter = {range}")?;
    writeln!(s, "target_cycles_per_degree = {target_cpd}")?;
    writeln!(s, "n_min = {n_min:.4}")?;
    writeln!(s, "n_max = {n_max:.4}")?;
    writeln!(s, "planes = {}", layout.len())?;
    writeln!(s, "feasible = {}", feas.feasible)?;
    writeln!(s, "span_margin_diopter = {:.4}", feas.span_margin_diopter)?;
    writeln!(s, "near_margin_diopter = {:.4}", feas.near_margin_diopter)?;
    writeln!(s, "far_margin_diopter = {:.4}", feas.far_margin_diopter)?;
    writeln!(s, "fov_rad = {fov:.4}")?;
    writeln!(s, "fov_deg = {:.2}", fov.to_degrees())?;
    writeln!(s, "duty_factor = {:.5}", photo.duty_factor)?;
    writeln!(s, "dmd_energy_waste = {:.5}", photo.dmd_energy_waste)?;
    writeln!(s, "plane_budget_per_s = {:.1}", plane_budget(&display))?;
    print!("{s}");
    Ok(())
}

pub fn filter(
    config: &ScenarioConfig,
    out: &Path,
    image: &Path,
    depth: &Path,
    method: Method,
    previews: bool,
) -> Result<()> {
    let scene = load_scene::<f64>(image, depth)?;
    let layout = config.layout()?;
    let stack = match method {
        Method::Direct => assign_direct(&scene, &layout),
        Method::Linear => assign_linear(&scene, &layout),
        Method::Opt => {
            let initial = assign_linear(&scene, &layout);
            let result = optimize_stack(
                &scene,
                &config.focus_samples(),
                &config.eye()?,
                &config.display()?,
                &initial,
                &config.optimize_settings()?,
            )?;
            let mut csv = create(&out.join("objective.csv"))?;
            write_objective_csv(&mut csv, &result.objective)?;
            csv.flush()?;
            let (first, last) = (result.objective[0], result.objective[result.objective.len() - 1]);
            println!("objective {first:e} -> {last:e} over {} iterations", result.objective.len() - 1);
            result.stack
        }
    };
    save_stack(out, &stack, previews)?;
    let lit = stack.planes().iter().filter(|p| p.iter().any(|c| c.max_value() > 0.0)).count();
    println!("{} planes written to {}, {lit} non-empty", stack.len(), out.display());
    Ok(())
}

/// Accepts `a,b,c` or `sweep:<from>:<to>:<steps>`.
pub fn parse_focus(spec: &str) -> Result<Vec<f64>> {
    if let Some(rest) = spec.strip_prefix("sweep:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            bail!("--focus sweep must read sweep:<from>:<to>:<steps>, got {spec:?}");
        }
        let from: f64 = parts[0].parse().with_context(|| format!("--focus sweep start {:?}", parts[0]))?;
        let to: f64 = parts[1].parse().with_context(|| format!("--focus sweep end {:?}", parts[1]))?;
        let steps: usize = parts[2].parse().with_context(|| format!("--focus sweep steps {:?}", parts[2]))?;
        if steps == 0 {
            bail!("--focus sweep needs at least one step");
        }
        return Ok(linspace(from, to, steps));
    }
    spec.split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("--focus value {v:?}")))
        .collect()
}

pub fn render(config: &ScenarioConfig, out: &Path, stack_dir: &Path, focus: Option<&str>) -> Result<()> {
    let focus = match focus {
        Some(spec) => parse_focus(spec)?,
        None => config.sweep_focus(),
    };
    if let Some(f) = focus.iter().find(|f| !f.is_finite()) {
        bail!("--focus values must be finite, got {f}");
    }
    let stack = load_stack::<f64>(stack_dir)?;
    let display = config.display()?;
    let eye = config.eye()?;
    let peak = stack
        .composite()
        .iter()
        .map(Image::max_value)
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { peak } else { 1.0 };
    let digits = focus.len().to_string().len().max(3);

    let names: Vec<(String, String)> = focus
        .par_iter()
        .enumerate()
        .map(|(k, &f)| -> Result<(String, String)> {
            let img = render_from_stack(&stack, &eye.focused_at(f), &display)
                .with_context(|| format!("rendering focus {f} D"))?;
            let stem = format!("render_{:0digits$}", k + 1);
            let (png, raster) = (format!("{stem}.png"), format!("{stem}.dfpl"));
            write_png(&out.join(&png), &img.channels, scale)?;
            write_plane_raster(&out.join(&raster), &img.channels)?;
            Ok((png, raster))
        })
        .collect::<Result<_>>()?;

    let mut csv = create(&out.join("index.csv"))?;
    writeln!(csv, "focus_diopter,filename,raster")?;
    for (f, (png, raster)) in focus.iter().zip(&names) {
        writeln!(csv, "{f},{png},{raster}")?;
    }
    csv.flush()?;
    println!("{} images written to {}", focus.len(), out.display());
    Ok(())
}

pub fn simulate(config: &ScenarioConfig, out: &Path, seed: Option<u64>, duration: Option<f64>) -> Result<()> {
    let mut scenario = config.control_scenario()?;
    if let Some(d) = duration {
        if !(d > 0.0 && d.is_finite()) {
            bail!("--duration-s must be positive, got {d}");
        }
        scenario.duration_s = d;
    }
    let (trace, metrics) = scenario.run(seed)?;

    let mut csv = create(&out.join("trace.csv"))?;
    write_trace_csv(&mut csv, &trace)?;
    csv.flush()?;

    let mut planes = create(&out.join("per_plane.csv"))?;
    writeln!(planes, "plane,depth_diopter,events,max_depth_error_diopter,mean_depth_error_diopter,max_target_offset_diopter")?;
    for (i, (p, d)) in metrics.per_plane.iter().zip(scenario.layout.depths()).enumerate() {
        writeln!(
            planes,
            "{},{d},{},{:.9},{:.9},{:.9}",
            i + 1,
            p.events,
            p.max_depth_error_diopter,
            p.mean_depth_error_diopter,
            p.max_target_offset_diopter
        )?;
    }
    planes.flush()?;

    let mut s = String::new();
    writeln!(s, "planes_per_second = {:.3}", metrics.planes_per_second)?;
    writeln!(s, "frames_per_second = {:.4}", metrics.frames_per_second)?;
    writeln!(s, "full_frames = {}", metrics.full_frames)?;
    writeln!(s, "missed_planes = {}", metrics.missed_planes)?;
    writeln!(s, "order_ok = {}", metrics.order_ok)?;
    writeln!(s, "active_span_fraction = {:.4}", metrics.active_span_fraction)?;
    writeln!(s, "max_depth_error_diopter = {:.6}", metrics.max_depth_error_diopter)?;
    writeln!(s, "adc_quantum = {:e}", trace.adc_quantum)?;
    write_summary(&out.join("metrics.txt"), &s)
}

fn read_image(path: &Path) -> Result<Image<f64>> {
    let channels = match path.extension().and_then(|e| e.to_str()) {
        Some("dfpl") => read_plane_raster::<f64>(path)?,
        _ => read_raster::<f64>(path)?,
    };
    let n = channels.len() as f64;
    let mut it = channels.into_iter();
    let mut sum = it.next().context("image has no channels")?;
    for c in it {
        sum.accumulate(&c);
    }
    Ok(sum.scale(1.0 / n))
}

pub fn analyze(out: &Path, target_dir: &Path, image: &Path) -> Result<()> {
    let target = TargetManifest::load(target_dir)?;
    let img = read_image(image)?;
    match target {
        TargetManifest::Psf { half_window_px, depths_diopter, centers_px, .. } => {
            let mut csv = create(&out.join("spots.csv"))?;
            writeln!(csv, "spot,plane_diopter,diameter_px,confidence")?;
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for (k, (c, &d)) in centers_px.iter().zip(&depths_diopter).enumerate() {
                let est = estimate_blur_diameter(&img, (c[0], c[1]), half_window_px)
                    .with_context(|| format!("spot {}", k + 1))?;
                let conf = if est.low_confidence { "low" } else { "high" };
                writeln!(csv, "{},{d},{:.6},{conf}", k + 1, est.diameter_px)?;
                if est.diameter_px >= RELIABLE_DIAMETER_PX {
                    xs.push(d);
                    ys.push(est.diameter_px);
                }
            }
            csv.flush()?;
            let mut s = String::new();
            writeln!(s, "spots = {}", centers_px.len())?;
            writeln!(s, "fitted_spots = {}", xs.len())?;
            if xs.len() >= 2 {
                let fit = linear_fit(&xs, &ys)?;
                writeln!(s, "slope_px_per_diopter = {:.6}", fit.slope)?;
                writeln!(s, "intercept_px = {:.6}", fit.intercept)?;
                writeln!(s, "r_squared = {:.6}", fit.r_squared)?;
            }
            write_summary(&out.join("analysis.txt"), &s)
        }
        TargetManifest::Slit { .. } => {
            let mtf = mtf_from_slit(&img, SlitAxis::Vertical)?;
            let mut csv = create(&out.join("mtf.csv"))?;
            writeln!(csv, "freq_cycles_per_px,modulation")?;
            for (f, m) in mtf.frequencies.iter().zip(&mtf.modulation) {
                writeln!(csv, "{f:.6},{m:.9}")?;
            }
            csv.flush()?;
            let mut s = String::new();
            writeln!(s, "mtf50_cycles_per_px = {:.6}", mtf.mtf50())?;
            if let Some(null) = mtf.first_null() {
                writeln!(s, "first_null_cycles_per_px = {null:.6}")?;
            }
            write_summary(&out.join("analysis.txt"), &s)
        }
    }
}

pub fn oracle(
    config: &ScenarioConfig,
    out: &Path,
    pupils_mm: &[f64],
    mismatches: &[f64],
    planes: &[f64],
) -> Result<()> {
    let display = config.display()?;
    let base = config.eye()?;
    let mut points = Vec::new();
    for &p in pupils_mm {
        if !(p > 0.0) {
            bail!("--pupil-mm values must be positive, got {p}");
        }
        for &m in mismatches {
            if !(m >= 0.0) {
                bail!("--mismatch-diopter values must be non-negative, got {m}");
            }
            for &d in planes {
                points.push((p, m, d));
            }
        }
    }
    let grid = OracleGrid::default();
    let rows: Vec<_> = points
        .par_iter()
        .map(|&(p, m, d)| {
            let eye = EyeModel { pupil_diameter_m: p * 1e-3, ..base };
            compare_with_closed_form(&display, &eye, d, m, &grid)
                .with_context(|| format!("oracle at pupil {p} mm, mismatch {m} D, plane {d} D"))
        })
        .collect::<Result<_>>()?;

    let mut csv = create(&out.join("oracle.csv"))?;
    writeln!(csv, "pupil_diameter_m,mismatch_diopter,plane_diopter,closed_form_cycles_per_m,measured_cycles_per_m,relative_error")?;
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{:.3},{:.3},{:.6}",
            r.pupil_diameter_m, r.mismatch_diopter, r.plane_diopter, r.closed_form, r.measured, r.relative_error
        )?;
    }
    csv.flush()?;
    let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    let over = rows.iter().filter(|r| r.relative_error > 0.05).count();
    println!("{} points, worst relative error {worst:.4}, {over} above 5%", rows.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focus_lists_and_sweeps() {
        assert_eq!(parse_focus("0.5, 1,2").unwrap(), vec![0.5, 1.0, 2.0]);
        let sweep = parse_focus("sweep:0:4:169").unwrap();
        assert_eq!(sweep.len(), 169);
        assert_eq!((sweep[0], sweep[168]), (0.0, 4.0));
        assert_eq!(sweep[42], 1.0);
        assert_eq!(parse_focus("sweep:2:2:1").unwrap(), vec![2.0]);
        assert!(parse_focus("sweep:0:4").is_err());
        assert!(parse_focus("sweep:a:4:3").is_err());
        assert!(parse_focus("").is_err());
    }
}
