//! Scene, depth-map and focal-stack files.
//!
//! Depth maps are `DFDM` files: a 16-byte header (magic, width, height, a
//! reserved word, all little endian) followed by `f32` diopters in row-major
//! order. Focal stacks are directories holding one `DFPL` raster per plane
//! (same header layout with the channel count in the last word, then `f64`
//! values channel after channel) and a `manifest.toml` listing plane depths.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::SimTrace;
use crate::filtering::{FocalStack, Scene, SceneError};
use crate::image::Image;
use crate::optics::{OpticsError, PlaneLayout};
use crate::scalar::Real;

pub const DEPTH_MAGIC: [u8; 4] = *b"DFDM";
pub const PLANE_MAGIC: [u8; 4] = *b"DFPL";
pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: expected magic {expected:?}, found {found:?}")]
    BadMagic { path: PathBuf, expected: String, found: String },
    #[error("{path}: {expected} bytes of payload expected, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("image is {image:?} but depth map is {depth:?}")]
    DimensionMismatch { image: (usize, usize), depth: (usize, usize) },
    #[error("{path}: non-finite depth at ({x}, {y})")]
    NonFiniteDepth { path: PathBuf, x: usize, y: usize },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: unsupported pixel layout {layout}")]
    UnsupportedLayout { path: PathBuf, layout: String },
    #[error("{path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Layout(#[from] OpticsError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(io_err(path))?;
    Ok(buf)
}

fn header(magic: [u8; 4], a: u32, b: u32, c: u32) -> [u8; 16] {
    let mut h = [0u8; 16];
    h[..4].copy_from_slice(&magic);
    h[4..8].copy_from_slice(&a.to_le_bytes());
    h[8..12].copy_from_slice(&b.to_le_bytes());
    h[12..16].copy_from_slice(&c.to_le_bytes());
    h
}

/// Splits a file into its three header words and payload after checking the
/// magic.
fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: [u8; 4]) -> Result<([u32; 3], &'a [u8]), IoError> {
    if bytes.len() < 16 || bytes[..4] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(IoError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    Ok(([word(4), word(8), word(12)], &bytes[16..]))
}

pub fn write_depth_map<T: Real>(path: &Path, depth: &Image<T>) -> Result<(), IoError> {
    let (w, h) = depth.dims();
    let mut out = Vec::with_capacity(16 + 4 * w * h);
    out.extend_from_slice(&header(DEPTH_MAGIC, w as u32, h as u32, 0));
    for &d in depth.data() {
        out.extend_from_slice(&(d.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_depth_map<T: Real>(path: &Path) -> Result<Image<T>, IoError> {
    let bytes = read_bytes(path)?;
    let ([w, h, _], payload) = parse_header(path, &bytes, DEPTH_MAGIC)?;
    let (w, h) = (w as usize, h as usize);
    if payload.len() != 4 * w * h {
        return Err(IoError::Truncated { path: path.to_path_buf(), expected: 4 * w * h, found: payload.len() });
    }
    let mut data = Vec::with_capacity(w * h);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(IoError::NonFiniteDepth { path: path.to_path_buf(), x: i % w, y: i / w });
        }
        data.push(T::lit(v as f64));
    }
    Ok(Image::from_vec(w, h, data))
}

/// Reads an 8 or 16 bit grayscale or RGB raster into channels scaled to
/// `[0, 1]`. Alpha is dropped.
pub fn read_raster<T: Real>(path: &Path) -> Result<Vec<Image<T>>, IoError> {
    let img = image::open(path).map_err(|source| IoError::Image { path: path.to_path_buf(), source })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    use image::DynamicImage as D;
    let gray = |data: Vec<f64>| vec![Image::from_vec(w, h, data.into_iter().map(T::lit).collect())];
    let rgb = |data: Vec<f64>, stride: usize| {
        (0..3)
            .map(|c| Image::from_vec(w, h, data.iter().skip(c).step_by(stride).map(|&v| T::lit(v)).collect()))
            .collect()
    };
    let u8s = |v: &[u8]| v.iter().map(|&x| x as f64 / 255.0).collect::<Vec<_>>();
    let u16s = |v: &[u16]| v.iter().map(|&x| x as f64 / 65535.0).collect::<Vec<_>>();
    Ok(match &img {
        D::ImageLuma8(b) => gray(u8s(b.as_raw())),
        D::ImageLuma16(b) => gray(u16s(b.as_raw())),
        D::ImageLumaA8(b) => gray(u8s(b.as_raw()).into_iter().step_by(2).collect()),
        D::ImageLumaA16(b) => gray(u16s(b.as_raw()).into_iter().step_by(2).collect()),
        D::ImageRgb8(b) => rgb(u8s(b.as_raw()), 3),
        D::ImageRgb16(b) => rgb(u16s(b.as_raw()), 3),
        D::ImageRgba8(b) => rgb(u8s(b.as_raw()), 4),
        D::ImageRgba16(b) => rgb(u16s(b.as_raw()), 4),
        other => {
            return Err(IoError::UnsupportedLayout {
                path: path.to_path_buf(),
                layout: format!("{:?}", other.color()),
            })
        }
    })
}

/// Writes one or three channels as an 8-bit PNG, clamping to `[0, 1]`
/// after dividing by `scale`.
pub fn write_png<T: Real>(path: &Path, channels: &[Image<T>], scale: T) -> Result<(), IoError> {
    let (w, h) = channels[0].dims();
    let q = |v: T| ((v / scale).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = match channels.len() {
        3 => {
            let mut buf = Vec::with_capacity(3 * w * h);
            for i in 0..w * h {
                for c in channels {
                    buf.push(q(c.data()[i]));
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf).expect("sized buffer").save(path)
        }
        _ => {
            let buf = channels[0].data().iter().map(|&v| q(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf).expect("sized buffer").save(path)
        }
    };
    result.map_err(|source| IoError::Image { path: path.to_path_buf(), source })
}

pub fn load_scene<T: Real>(image_path: &Path, depth_path: &Path) -> Result<Scene<T>, IoError> {
    let channels = read_raster(image_path)?;
    let depth = read_depth_map(depth_path)?;
    if channels[0].dims() != depth.dims() {
        return Err(IoError::DimensionMismatch { image: channels[0].dims(), depth: depth.dims() });
    }
    Ok(Scene::new(channels, depth)?)
}

/// Writes equally sized channels as one `DFPL` raster.
pub fn write_plane_raster<T: Real>(path: &Path, channels: &[Image<T>]) -> Result<(), IoError> {
    let (w, h) = channels.first().map_or((0, 0), |c| c.dims());
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    out.write_all(&header(PLANE_MAGIC, w as u32, h as u32, channels.len() as u32)).map_err(io_err(path))?;
    for c in channels {
        for &v in c.data() {
            out.write_all(&v.as_f64().to_le_bytes()).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

pub fn read_plane_raster<T: Real>(path: &Path) -> Result<Vec<Image<T>>, IoError> {
    let bytes = read_bytes(path)?;
    let ([w, h, nc], payload) = parse_header(path, &bytes, PLANE_MAGIC)?;
    let (w, h, nc) = (w as usize, h as usize, nc as usize);
    if nc == 0 || w == 0 || h == 0 {
        return Err(IoError::UnsupportedLayout { path: path.to_path_buf(), layout: format!("{w}x{h}x{nc}") });
    }
    let expected = 8 * w * h * nc;
    if payload.len() != expected {
        return Err(IoError::Truncated { path: path.to_path_buf(), expected, found: payload.len() });
    }
    let values: Vec<T> =
        payload.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
    Ok(values.chunks_exact(w * h).map(|c| Image::from_vec(w, h, c.to_vec())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub depths_diopter: Vec<f64>,
    pub planes: Vec<String>,
}

fn plane_file(i: usize) -> String {
    format!("plane_{:03}.dfpl", i + 1)
}

/// Writes `stack` into `dir`, which is created if missing. With
/// `previews`, every plane also gets a PNG scaled by the stack maximum.
pub fn save_stack<T: Real>(dir: &Path, stack: &FocalStack<T>, previews: bool) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (w, h) = stack.dims();
    let channels = stack.channel_count();
    let peak = stack
        .planes()
        .iter()
        .flatten()
        .map(|p| p.max_value())
        .fold(T::zero(), |a, b| a.max(b));
    let mut names = Vec::with_capacity(stack.len());
    for i in 0..stack.len() {
        let name = plane_file(i);
        write_plane_raster(&dir.join(&name), stack.plane(i))?;
        if previews {
            let scale = if peak > T::zero() { peak } else { T::one() };
            write_png(&dir.join(name.replace(".dfpl", ".png")), stack.plane(i), scale)?;
        }
        names.push(name);
    }
    let manifest = StackManifest {
        width: w,
        height: h,
        channels,
        depths_diopter: stack.layout().depths().iter().map(|d| d.as_f64()).collect(),
        planes: names,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_stack<T: Real>(dir: &Path) -> Result<FocalStack<T>, IoError> {
    let mpath = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: StackManifest =
        toml::from_str(&text).map_err(|e| IoError::Manifest { path: mpath.clone(), reason: e.to_string() })?;
    if manifest.planes.len() != manifest.depths_diopter.len() {
        return Err(IoError::Manifest { path: mpath, reason: "planes and depths_diopter differ in length".into() });
    }
    let (w, h, nc) = (manifest.width, manifest.height, manifest.channels);
    let mut planes = Vec::with_capacity(manifest.planes.len());
    for name in &manifest.planes {
        let path = dir.join(name);
        let plane = read_plane_raster(&path)?;
        let (pw, ph) = plane[0].dims();
        if (pw, ph, plane.len()) != (w, h, nc) {
            return Err(IoError::Manifest {
                path,
                reason: format!("raster is {pw}x{ph}x{}, manifest says {w}x{h}x{nc}", plane.len()),
            });
        }
        planes.push(plane);
    }
    let layout = PlaneLayout::new(manifest.depths_diopter.iter().map(|&d| T::lit(d)).collect())?;
    Ok(FocalStack::new(layout, planes)?)
}

/// Trace as CSV with columns `t_s,dac_level,power_diopter,r,adc_code,event`.
pub fn write_trace_csv(out: &mut impl Write, trace: &SimTrace) -> io::Result<()> {
    writeln!(out, "t_s,dac_level,power_diopter,r,adc_code,event")?;
    for r in &trace.records {
        writeln!(
            out,
            "{:.7},{},{:.9},{:.9},{},{}",
            r.t_s,
            r.dac_level,
            r.true_power_diopter,
            r.psd_ratio,
            r.adc_code,
            r.event_label()
        )?;
    }
    Ok(())
}

/// Objective history as CSV with columns `iteration,objective`.
pub fn write_objective_csv<T: Real>(out: &mut impl Write, objective: &[T]) -> io::Result<()> {
    writeln!(out, "iteration,objective")?;
    for (i, j) in objective.iter().enumerate() {
        writeln!(out, "{i},{:e}", j.as_f64())?;
    }
    Ok(())
}
