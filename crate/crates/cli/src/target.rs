//! Synthetic targets and the `target.toml` file that tells `analyze` where
//! to look.

use std::path::Path;

use anyhow::{bail, Context, Result};
use multifocal::config::ScenarioConfig;
use multifocal::filtering::FocalStack;
use multifocal::io::save_stack;
use multifocal::optics::PlaneLayout;
use multifocal::render::psf_grid_scene;
use serde::{Deserialize, Serialize};

pub const TARGET_NAME: &str = "target.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetManifest {
    Psf {
        spot_px: usize,
        cell_px: usize,
        /// Half width of the square search window around each spot.
        half_window_px: usize,
        depths_diopter: Vec<f64>,
        centers_px: Vec<[f64; 2]>,
    },
    /// Vertical line, so the line spread runs along `x`.
    Slit { plane_diopter: f64, column_px: usize },
}

impl TargetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(TARGET_NAME);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(TARGET_NAME);
        std::fs::write(&path, toml::to_string(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn psf(config: &ScenarioConfig, out: &Path) -> Result<()> {
    let layout = config.layout()?;
    let r = &config.render;
    let grid = psf_grid_scene(&layout, r.psf_rows, r.psf_cols, r.psf_spot_px, r.psf_cell_px)?;
    save_stack(out, &grid.stack, false)?;
    let manifest = TargetManifest::Psf {
        spot_px: grid.spot_px,
        cell_px: grid.cell_px,
        half_window_px: (grid.cell_px / 2).saturating_sub(2).max(1),
        depths_diopter: layout.depths().to_vec(),
        centers_px: grid.centers.iter().map(|&(x, y)| [x, y]).collect(),
    };
    manifest.save(out)?;
    let (w, h) = grid.stack.dims();
    println!("psf target: {} spots, {w}x{h} px", layout.len());
    Ok(())
}

pub fn slit(config: &ScenarioConfig, out: &Path, plane: usize, width: usize, height: usize) -> Result<()> {
    let layout = config.layout()?;
    if plane == 0 || plane > layout.len() {
        bail!("--plane must be in 1..={}, got {plane}", layout.len());
    }
    if width < 8 || height == 0 {
        bail!("--width must be at least 8 and --height positive");
    }
    let depth = layout.depths()[plane - 1];
    let column = width / 2;
    let mut stack = FocalStack::zeros(PlaneLayout::new(vec![depth])?, 1, width, height);
    let img = &mut stack.plane_mut(0)[0];
    for y in 0..height {
        img.set(column, y, 1.0);
    }
    save_stack(out, &stack, false)?;
    TargetManifest::Slit { plane_diopter: depth, column_px: column }.save(out)?;
    println!("slit target: plane {plane} at {depth} D, {width}x{height} px");
    Ok(())
}
