//! Retinal image formation for focal stacks and continuously deep scenes.
//!
//! Retinal pixels map 1:1 onto display pixels. Each plane is blurred by a
//! uniform disc whose diameter follows from the accommodation mismatch, and
//! image borders fold back with half-sample symmetric reflection so no energy
//! leaves the frame.

use std::collections::HashMap;

use thiserror::Error;

use crate::filtering::{FocalStack, Scene};
use crate::image::Image;
use crate::optics::{DisplayModel, EyeModel, PlaneLayout};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("blur diameter {diameter_px:.2} px exceeds the {extent_px} px image extent")]
    DegenerateBlur { diameter_px: f64, extent_px: usize },
    #[error("eye focus {0} D is negative")]
    NegativeFocus(f64),
    #[error("psf grid has {cells} cells for {planes} planes")]
    GridTooSmall { cells: usize, planes: usize },
}

/// Supersampling factor per axis for disc edges.
const SUPERSAMPLE: usize = 4;

/// Angle-integrated image on the retina, one image per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RetinalImage<T> {
    pub channels: Vec<Image<T>>,
}

impl<T: Real> RetinalImage<T> {
    pub fn total_radiance(&self) -> T {
        self.channels.iter().fold(T::zero(), |acc, im| acc + im.sum())
    }

    pub fn channel(&self, c: usize) -> &Image<T> {
        &self.channels[c]
    }
}

/// Defocus disc diameter in display pixels: `a d_o |F - v| / Δx`.
pub fn blur_diameter_px<T: Real>(eye: &EyeModel<T>, plane_diopter: T, display: &DisplayModel<T>) -> T {
    eye.pupil_diameter_m * display.display_distance_m * (eye.focus_diopter - plane_diopter).abs()
        / display.pixel_pitch_m
}

/// Area-normalized disc kernel centred on a pixel, with odd side length.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscKernel<T> {
    radius: usize,
    weights: Vec<T>,
}

impl<T: Real> DiscKernel<T> {
    /// A diameter too small to cover any supersample collapses to the identity.
    pub fn new(diameter_px: T) -> Self {
        let r_disc = diameter_px * T::lit(0.5);
        let radius = (r_disc - T::lit(0.5)).ceil().max(T::zero()).to_usize().unwrap_or(0);
        let side = 2 * radius + 1;
        let mut weights = vec![T::zero(); side * side];
        let r2 = r_disc * r_disc;
        let step = T::one() / T::from_usize_lossy(SUPERSAMPLE);
        for ky in 0..side {
            for kx in 0..side {
                let cx = T::from_usize_lossy(kx) - T::from_usize_lossy(radius);
                let cy = T::from_usize_lossy(ky) - T::from_usize_lossy(radius);
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let ox = (T::from_usize_lossy(sx) + T::lit(0.5)) * step - T::lit(0.5);
                        let oy = (T::from_usize_lossy(sy) + T::lit(0.5)) * step - T::lit(0.5);
                        let px = cx + ox;
                        let py = cy + oy;
                        if px * px + py * py <= r2 {
                            hits += 1;
                        }
                    }
                }
                weights[ky * side + kx] = T::from_usize_lossy(hits);
            }
        }
        let total = weights.iter().fold(T::zero(), |a, &b| a + b);
        if total == T::zero() {
            return Self { radius: 0, weights: vec![T::one()] };
        }
        weights.iter_mut().for_each(|w| *w = *w / total);
        Self { radius, weights }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at offset `(dx, dy)` from the centre.
    pub fn at(&self, dx: isize, dy: isize) -> T {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return T::zero();
        }
        self.weights[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn is_identity(&self) -> bool {
        self.radius == 0
    }
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
pub(crate) fn fold_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Adds `value` spread by `kernel` around `(x, y)` into `out`.
#[inline]
fn splat<T: Real>(out: &mut Image<T>, kernel: &DiscKernel<T>, x: usize, y: usize, value: T) {
    if kernel.is_identity() {
        out.add_at(x, y, value);
        return;
    }
    let (w, h) = out.dims();
    let r = kernel.radius as isize;
    let side = kernel.side();
    for ky in 0..side {
        let ty = fold_index(y as isize + ky as isize - r, h);
        let row = &kernel.weights[ky * side..(ky + 1) * side];
        for (kx, &kw) in row.iter().enumerate() {
            if kw == T::zero() {
                continue;
            }
            let tx = fold_index(x as isize + kx as isize - r, w);
            out.add_at(tx, ty, value * kw);
        }
    }
}

fn check_diameter<T: Real>(d: T, w: usize, h: usize) -> Result<(), RenderError> {
    let extent = w.min(h);
    if d > T::from_usize_lossy(extent) {
        return Err(RenderError::DegenerateBlur { diameter_px: d.as_f64(), extent_px: extent });
    }
    Ok(())
}

fn check_focus<T: Real>(eye: &EyeModel<T>) -> Result<(), RenderError> {
    if eye.focus_diopter < T::zero() {
        return Err(RenderError::NegativeFocus(eye.focus_diopter.as_f64()));
    }
    Ok(())
}

/// Blurs one image by a disc of `diameter_px`.
pub fn disc_blur<T: Real>(image: &Image<T>, diameter_px: T) -> Result<Image<T>, RenderError> {
    let (w, h) = image.dims();
    check_diameter(diameter_px, w, h)?;
    let kernel = DiscKernel::new(diameter_px);
    let mut out = Image::zeros(w, h);
    scatter_image(&mut out, image, &kernel);
    Ok(out)
}

fn scatter_image<T: Real>(out: &mut Image<T>, src: &Image<T>, kernel: &DiscKernel<T>) {
    let (w, h) = src.dims();
    for y in 0..h {
        for x in 0..w {
            let v = src.get(x, y);
            if v != T::zero() {
                splat(out, kernel, x, y, v);
            }
        }
    }
}

/// Kernels keyed by the exact bit pattern of their diameter.
struct KernelCache<T> {
    map: HashMap<u64, DiscKernel<T>>,
}

impl<T: Real> KernelCache<T> {
    fn new() -> Self {
        Self { map: HashMap::new() }
    }

    fn get(&mut self, d: T) -> &DiscKernel<T> {
        self.map.entry(d.as_f64().to_bits()).or_insert_with(|| DiscKernel::new(d))
    }
}

/// Image seen by `eye` looking at `stack`: the sum of every plane blurred by
/// its own defocus disc, accumulated in plane order.
pub fn render_from_stack<T: Real>(
    stack: &FocalStack<T>,
    eye: &EyeModel<T>,
    display: &DisplayModel<T>,
) -> Result<RetinalImage<T>, RenderError> {
    check_focus(eye)?;
    let (w, h) = stack.dims();
    let mut cache = KernelCache::new();
    let mut channels: Vec<Image<T>> = (0..stack.channel_count()).map(|_| Image::zeros(w, h)).collect();
    for (i, &depth) in stack.layout().depths().iter().enumerate() {
        let d = blur_diameter_px(eye, depth, display);
        check_diameter(d, w, h)?;
        let kernel = cache.get(d);
        for (out, src) in channels.iter_mut().zip(stack.plane(i)) {
            scatter_image(out, src, kernel);
        }
    }
    Ok(RetinalImage { channels })
}

/// Reference retinal image of a continuously deep scene: each source pixel
/// splats its radiance over the disc given by its own depth.
///
/// Pixels are visited grouped by depth from near to far, raster order within
/// a group, so a scene whose depths coincide with plane depths reproduces
/// [`render_from_stack`] of its direct assignment bit for bit.
pub fn render_ground_truth<T: Real>(
    scene: &Scene<T>,
    eye: &EyeModel<T>,
    display: &DisplayModel<T>,
) -> Result<RetinalImage<T>, RenderError> {
    check_focus(eye)?;
    let (w, h) = scene.dims();
    let depth = scene.depth();
    let mut levels: Vec<T> = depth.data().to_vec();
    levels.sort_by(|a, b| b.partial_cmp(a).expect("finite depths"));
    levels.dedup();

    let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, &d) in depth.data().iter().enumerate() {
        groups.entry(d.as_f64().to_bits()).or_default().push(i);
    }

    let mut cache = KernelCache::new();
    let mut channels: Vec<Image<T>> = (0..scene.channel_count()).map(|_| Image::zeros(w, h)).collect();
    for &level in &levels {
        let d = blur_diameter_px(eye, level, display);
        check_diameter(d, w, h)?;
        let kernel = cache.get(d);
        for &i in &groups[&level.as_f64().to_bits()] {
            let (x, y) = (i % w, i / w);
            for (out, src) in channels.iter_mut().zip(scene.channels()) {
                let v = src.get(x, y);
                if v != T::zero() {
                    splat(out, kernel, x, y, v);
                }
            }
        }
    }
    Ok(RetinalImage { channels })
}

/// Stack of square spots, one per plane, laid out row-major on a grid.
#[derive(Debug, Clone)]
pub struct PsfGrid<T> {
    pub stack: FocalStack<T>,
    /// Spot centres `(x, y)` in pixels, indexed by plane.
    pub centers: Vec<(T, T)>,
    pub cell_px: usize,
    pub spot_px: usize,
}

impl<T: Real> PsfGrid<T> {
    /// True when a disc of `max_blur_px` around a spot would reach into a
    /// neighbouring cell's spot.
    pub fn overlap_warning(&self, max_blur_px: T) -> bool {
        let reach = max_blur_px + T::from_usize_lossy(self.spot_px);
        reach > T::from_usize_lossy(self.cell_px)
    }
}

/// Builds a `rows × cols` grid of `spot_px`-wide square spots, spot `k`
/// (row-major) on plane `k`, each in its own `cell_px × cell_px` cell.
pub fn psf_grid_scene<T: Real>(
    layout: &PlaneLayout<T>,
    rows: usize,
    cols: usize,
    spot_px: usize,
    cell_px: usize,
) -> Result<PsfGrid<T>, RenderError> {
    if rows * cols < layout.len() {
        return Err(RenderError::GridTooSmall { cells: rows * cols, planes: layout.len() });
    }
    let cell_px = cell_px.max(spot_px);
    let (w, h) = (cols * cell_px, rows * cell_px);
    let mut stack = FocalStack::zeros(layout.clone(), 1, w, h);
    let mut centers = Vec::with_capacity(layout.len());
    let offset = (cell_px - spot_px) / 2;
    for k in 0..layout.len() {
        let (r, c) = (k / cols, k % cols);
        let x0 = c * cell_px + offset;
        let y0 = r * cell_px + offset;
        let img = &mut stack.plane_mut(k)[0];
        for y in y0..y0 + spot_px {
            for x in x0..x0 + spot_px {
                img.set(x, y, T::one());
            }
        }
        let half = T::from_usize_lossy(spot_px - 1) * T::lit(0.5);
        centers.push((T::from_usize_lossy(x0) + half, T::from_usize_lossy(y0) + half));
    }
    Ok(PsfGrid { stack, centers, cell_px, spot_px })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::assign_direct;
    use crate::metrics::estimate_blur_diameter;
    use approx::assert_relative_eq;

    fn display() -> DisplayModel<f64> {
        DisplayModel::prototype()
    }

    #[test]
    fn blur_diameter_cases() {
        let d = display();
        let eye = EyeModel::standard().focused_at(1.0);
        assert_eq!(blur_diameter_px(&eye, 1.0, &d), 0.0);
        assert_relative_eq!(blur_diameter_px(&eye, 0.0, &d), 20.588_235_294, epsilon = 1e-8);
        let dof = crate::optics::plane_depth_of_field(&d, eye.pupil_diameter_m);
        assert_relative_eq!(blur_diameter_px(&eye, 1.0 - dof, &d), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for d in [0.0, 0.2, 1.0, 2.5, 7.3, 20.0] {
            let k = DiscKernel::<f64>::new(d);
            let s: f64 = k.weights().iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            let r = k.radius() as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    assert_eq!(k.at(dx, dy), k.at(-dx, dy));
                    assert_eq!(k.at(dx, dy), k.at(dx, -dy));
                    assert_eq!(k.at(dx, dy), k.at(dy, dx));
                }
            }
        }
        assert!(DiscKernel::<f64>::new(0.0).is_identity());
        assert_eq!(DiscKernel::<f64>::new(20.0).side(), 21);
    }

    #[test]
    fn fold_reflects_half_sample() {
        let n = 4;
        let got: Vec<usize> = (-3..8).map(|i| fold_index(i, n)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn one_plane_in_focus_is_identity() {
        let layout = PlaneLayout::new(vec![2.0]).unwrap();
        let im = Image::from_fn(16, 12, |x, y| ((x * 7 + y * 3) % 5) as f64 / 5.0);
        let stack = FocalStack::new(layout, vec![vec![im.clone()]]).unwrap();
        let out = render_from_stack(&stack, &EyeModel::standard().focused_at(2.0), &display()).unwrap();
        assert_eq!(out.channels[0], im);
    }

    #[test]
    fn uniform_planes_stay_uniform() {
        let layout = PlaneLayout::uniform(3.0, 0.0, 3).unwrap();
        let planes = [0.1, 0.25, 0.4].iter().map(|&c| vec![Image::filled(80, 80, c)]).collect();
        let stack = FocalStack::new(layout, planes).unwrap();
        for f in [0.0, 0.7, 3.0] {
            let out = render_from_stack(&stack, &EyeModel::standard().focused_at(f), &display()).unwrap();
            for &v in out.channels[0].data() {
                assert!((v - 0.75).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_blur_is_an_error() {
        let layout = PlaneLayout::new(vec![0.0]).unwrap();
        let stack = FocalStack::zeros(layout, 1, 16, 16);
        let eye = EyeModel::standard().focused_at(3.0);
        assert!(matches!(
            render_from_stack(&stack, &eye, &display()),
            Err(RenderError::DegenerateBlur { .. })
        ));
    }

    #[test]
    fn two_point_stack_blurs_only_the_defocused_plane() {
        let layout = PlaneLayout::new(vec![1.0, 0.5]).unwrap();
        let mut stack = FocalStack::zeros(layout, 1, 64, 64);
        stack.plane_mut(0)[0].set(16, 32, 1.0);
        stack.plane_mut(1)[0].set(44, 32, 1.0);
        let eye = EyeModel::standard().focused_at(1.0);
        let out = render_from_stack(&stack, &eye, &display()).unwrap();
        let im = &out.channels[0];
        assert_eq!(im.get(16, 32), 1.0);
        let expected = blur_diameter_px(&eye, 0.5, &display());
        let measured = estimate_blur_diameter(im, (44.0, 32.0), 16).unwrap();
        assert!((measured.diameter_px - expected).abs() <= 1.0, "{measured:?} vs {expected}");
    }

    #[test]
    fn quantized_scene_matches_stack_path_bitwise() {
        let d = display();
        let layout = PlaneLayout::uniform(2.0, 0.0, 5).unwrap();
        let depths = layout.depths().to_vec();
        let im = Image::from_fn(64, 48, |x, y| ((x * 13 + y * 7) % 11) as f64 / 10.0);
        let dm = Image::from_fn(64, 48, |x, y| depths[(x / 3 + y) % 5]);
        let scene = Scene::grayscale(im, dm).unwrap();
        let eye = EyeModel::standard().focused_at(0.8);
        let a = render_ground_truth(&scene, &eye, &d).unwrap();
        let b = render_from_stack(&assign_direct(&scene, &layout), &eye, &d).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn white_scene_stays_white() {
        let dm = Image::from_fn(30, 30, |x, y| ((x + 2 * y) % 7) as f64 * 0.3);
        let scene = Scene::grayscale(Image::filled(30, 30, 1.0), dm).unwrap();
        let out = render_ground_truth(&scene, &EyeModel::standard().focused_at(0.9), &display()).unwrap();
        // per-pixel discs of different sizes do not tile exactly, but energy is kept
        assert_relative_eq!(out.total_radiance(), 900.0, max_relative = 1e-12);
        let constant = Scene::grayscale(Image::filled(30, 30, 1.0), Image::filled(30, 30, 1.2)).unwrap();
        let out = render_ground_truth(&constant, &EyeModel::standard().focused_at(0.1), &display()).unwrap();
        assert!(out.channels[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn psf_grid_layout() {
        let layout = PlaneLayout::uniform(4.0, 0.0, 40).unwrap();
        let g = psf_grid_scene(&layout, 8, 5, 3, 32).unwrap();
        assert_eq!(g.stack.len(), 40);
        for k in 0..40 {
            let nz = g.stack.plane(k)[0].data().iter().filter(|&&v| v > 0.0).count();
            assert_eq!(nz, 9);
        }
        let single = PlaneLayout::new(vec![1.0]).unwrap();
        let g1 = psf_grid_scene(&single, 1, 1, 3, 15).unwrap();
        assert_eq!(g1.centers[0], (7.0, 7.0));
        assert!(psf_grid_scene(&layout, 4, 5, 3, 32).is_err());
        assert!(g.overlap_warning(40.0));
        assert!(!g.overlap_warning(10.0));
    }
}
