//! Decomposition of an all-in-focus image plus depth map into focal planes.

use thiserror::Error;

use crate::image::Image;
use crate::optics::PlaneLayout;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("scene needs 1 or 3 channels, got {0}")]
    ChannelCount(usize),
    #[error("channel and depth dimensions differ")]
    DimensionMismatch,
    #[error("depth at ({x}, {y}) is {value}; depths must be finite and non-negative")]
    InvalidDepth { x: usize, y: usize, value: f64 },
    #[error("radiance at ({x}, {y}) is {value}; expected [0, 1]")]
    RadianceOutOfRange { x: usize, y: usize, value: f64 },
    #[error("focal stack has {planes} planes for a {layout}-plane layout")]
    PlaneCount { planes: usize, layout: usize },
    #[error("negative radiance in focal stack plane {plane}")]
    NegativeRadiance { plane: usize },
}

/// All-in-focus radiance with a per-pixel depth in diopters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    channels: Vec<Image<T>>,
    depth_diopter: Image<T>,
}

impl<T: Real> Scene<T> {
    pub fn new(channels: Vec<Image<T>>, depth_diopter: Image<T>) -> Result<Self, SceneError> {
        if channels.len() != 1 && channels.len() != 3 {
            return Err(SceneError::ChannelCount(channels.len()));
        }
        let dims = depth_diopter.dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(SceneError::DimensionMismatch);
        }
        let (w, _) = dims;
        for (i, &d) in depth_diopter.data().iter().enumerate() {
            if !d.is_finite() || d < T::zero() {
                return Err(SceneError::InvalidDepth { x: i % w, y: i / w, value: d.as_f64() });
            }
        }
        for c in &channels {
            for (i, &v) in c.data().iter().enumerate() {
                if !(v >= T::zero() && v <= T::one()) {
                    return Err(SceneError::RadianceOutOfRange { x: i % w, y: i / w, value: v.as_f64() });
                }
            }
        }
        Ok(Self { channels, depth_diopter })
    }

    pub fn grayscale(image: Image<T>, depth_diopter: Image<T>) -> Result<Self, SceneError> {
        Self::new(vec![image], depth_diopter)
    }

    pub fn channels(&self) -> &[Image<T>] {
        &self.channels
    }

    pub fn depth(&self) -> &Image<T> {
        &self.depth_diopter
    }

    pub fn dims(&self) -> (usize, usize) {
        self.depth_diopter.dims()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

/// Per-plane display content; `planes[i][c]` is channel `c` of plane `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalStack<T> {
    layout: PlaneLayout<T>,
    planes: Vec<Vec<Image<T>>>,
}

impl<T: Real> FocalStack<T> {
    pub fn new(layout: PlaneLayout<T>, planes: Vec<Vec<Image<T>>>) -> Result<Self, SceneError> {
        if planes.len() != layout.len() {
            return Err(SceneError::PlaneCount { planes: planes.len(), layout: layout.len() });
        }
        let first = planes.first().and_then(|p| p.first()).map(|im| im.dims());
        let channels = planes.first().map_or(0, |p| p.len());
        if channels != 1 && channels != 3 {
            return Err(SceneError::ChannelCount(channels));
        }
        for (i, p) in planes.iter().enumerate() {
            if p.len() != channels || p.iter().any(|im| Some(im.dims()) != first) {
                return Err(SceneError::DimensionMismatch);
            }
            if p.iter().any(|im| im.data().iter().any(|&v| !(v >= T::zero()))) {
                return Err(SceneError::NegativeRadiance { plane: i });
            }
        }
        Ok(Self { layout, planes })
    }

    /// Empty stack with `channels` channels of `width × height`.
    pub fn zeros(layout: PlaneLayout<T>, channels: usize, width: usize, height: usize) -> Self {
        let planes = (0..layout.len())
            .map(|_| (0..channels).map(|_| Image::zeros(width, height)).collect())
            .collect();
        Self { layout, planes }
    }

    pub fn layout(&self) -> &PlaneLayout<T> {
        &self.layout
    }

    pub fn planes(&self) -> &[Vec<Image<T>>] {
        &self.planes
    }

    pub fn plane(&self, i: usize) -> &[Image<T>] {
        &self.planes[i]
    }

    pub fn plane_mut(&mut self, i: usize) -> &mut [Image<T>] {
        &mut self.planes[i]
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        self.planes.first().map_or(0, |p| p.len())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes
            .first()
            .and_then(|p| p.first())
            .map_or((0, 0), |im| im.dims())
    }

    /// Sum over planes per channel, accumulated in plane order.
    pub fn composite(&self) -> Vec<Image<T>> {
        let (w, h) = self.dims();
        let mut out: Vec<Image<T>> = (0..self.channel_count()).map(|_| Image::zeros(w, h)).collect();
        for plane in &self.planes {
            for (acc, im) in out.iter_mut().zip(plane) {
                acc.accumulate(im);
            }
        }
        out
    }

    /// Total radiance over every plane and channel, in plane order.
    pub fn total_radiance(&self) -> T {
        self.planes
            .iter()
            .flat_map(|p| p.iter())
            .fold(T::zero(), |acc, im| acc + im.sum())
    }
}

/// Index of the plane nearest to `depth` in diopters. Ties go to the nearer
/// (higher-diopter, lower-index) plane.
pub fn nearest_plane<T: Real>(layout: &PlaneLayout<T>, depth: T) -> usize {
    let mut best = 0;
    let mut best_dist = T::infinity();
    for (i, &v) in layout.depths().iter().enumerate() {
        let dist = (depth - v).abs();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    best
}

/// Triangle-filter weights for `depth`: `(lower index, upper index, weight on upper)`.
/// Outside the layout range the nearest extreme plane takes weight 1.
pub fn linear_weights<T: Real>(layout: &PlaneLayout<T>, depth: T) -> (usize, usize, T) {
    let depths = layout.depths();
    let n = depths.len();
    if depth >= depths[0] {
        return (0, 0, T::zero());
    }
    if depth <= depths[n - 1] {
        return (n - 1, n - 1, T::zero());
    }
    // depths[i] > depth > depths[i + 1]
    let i = depths.windows(2).position(|w| depth < w[0] && depth >= w[1]).unwrap_or(n - 2);
    if depth == depths[i + 1] {
        return (i + 1, i + 1, T::zero());
    }
    let w_far = (depths[i] - depth) / (depths[i] - depths[i + 1]);
    (i, i + 1, w_far)
}

/// Splits `value` into `(near_part, far_part)` whose floating point sum is
/// exactly `value`: the larger share is computed by multiplication and the
/// smaller by subtraction, which is exact for a share of at least one half.
fn split_exact<T: Real>(value: T, w_far: T) -> (T, T) {
    if w_far >= T::lit(0.5) {
        let far = value * w_far;
        (value - far, far)
    } else {
        let near = value * (T::one() - w_far);
        (near, value - near)
    }
}

/// Assigns each pixel's full radiance to the plane nearest in diopters.
pub fn assign_direct<T: Real>(scene: &Scene<T>, layout: &PlaneLayout<T>) -> FocalStack<T> {
    let (w, h) = scene.dims();
    let mut stack = FocalStack::zeros(layout.clone(), scene.channel_count(), w, h);
    for y in 0..h {
        for x in 0..w {
            let i = nearest_plane(layout, scene.depth().get(x, y));
            for (c, ch) in scene.channels().iter().enumerate() {
                stack.planes[i][c].set(x, y, ch.get(x, y));
            }
        }
    }
    stack
}

/// Splits each pixel between its two bracketing planes with a triangle
/// filter in diopters.
pub fn assign_linear<T: Real>(scene: &Scene<T>, layout: &PlaneLayout<T>) -> FocalStack<T> {
    let (w, h) = scene.dims();
    let mut stack = FocalStack::zeros(layout.clone(), scene.channel_count(), w, h);
    for y in 0..h {
        for x in 0..w {
            let (near, far, w_far) = linear_weights(layout, scene.depth().get(x, y));
            for (c, ch) in scene.channels().iter().enumerate() {
                let v = ch.get(x, y);
                if near == far {
                    stack.planes[near][c].set(x, y, v);
                } else {
                    let (a, b) = split_exact(v, w_far);
                    stack.planes[near][c].set(x, y, a);
                    stack.planes[far][c].set(x, y, b);
                }
            }
        }
    }
    stack
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout4() -> PlaneLayout<f64> {
        PlaneLayout::uniform(3.0, 0.0, 4).unwrap()
    }

    fn one_pixel(value: f64, depth: f64) -> Scene<f64> {
        Scene::grayscale(Image::filled(1, 1, value), Image::filled(1, 1, depth)).unwrap()
    }

    fn weights_of(stack: &FocalStack<f64>) -> Vec<f64> {
        stack.planes().iter().map(|p| p[0].get(0, 0)).collect()
    }

    #[test]
    fn scene_validation() {
        let im = Image::<f64>::filled(2, 2, 0.5);
        assert!(Scene::grayscale(im.clone(), Image::filled(2, 1, 0.0)).is_err());
        assert!(matches!(
            Scene::grayscale(im.clone(), Image::filled(2, 2, -1.0)),
            Err(SceneError::InvalidDepth { .. })
        ));
        assert!(matches!(
            Scene::grayscale(Image::filled(2, 2, 1.5), Image::filled(2, 2, 0.0)),
            Err(SceneError::RadianceOutOfRange { .. })
        ));
        assert!(Scene::new(vec![im.clone(), im.clone()], Image::filled(2, 2, 0.0)).is_err());
    }

    #[test]
    fn direct_on_plane_and_single_plane() {
        assert_eq!(weights_of(&assign_direct(&one_pixel(0.7, 2.0), &layout4())), vec![0.0, 0.7, 0.0, 0.0]);
        let single = PlaneLayout::new(vec![1.5]).unwrap();
        let im = Image::from_fn(4, 3, |x, y| (x + 4 * y) as f64 / 12.0);
        let scene = Scene::grayscale(im.clone(), Image::from_fn(4, 3, |x, _| x as f64)).unwrap();
        assert_eq!(assign_direct(&scene, &single).plane(0)[0], im);
    }

    #[test]
    fn direct_tie_goes_to_nearer_plane() {
        assert_eq!(weights_of(&assign_direct(&one_pixel(1.0, 2.5), &layout4())), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(weights_of(&assign_direct(&one_pixel(1.0, 0.5), &layout4())), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn linear_apex_midpoint_and_clamp() {
        let l = layout4();
        assert_eq!(weights_of(&assign_linear(&one_pixel(0.8, 1.0), &l)), vec![0.0, 0.0, 0.8, 0.0]);
        assert_eq!(weights_of(&assign_linear(&one_pixel(1.0, 1.5), &l)), vec![0.0, 0.5, 0.5, 0.0]);
        assert_eq!(weights_of(&assign_linear(&one_pixel(1.0, 3.7), &l)), vec![1.0, 0.0, 0.0, 0.0]);
        let far = PlaneLayout::new(vec![3.0, 2.0, 1.0]).unwrap();
        assert_eq!(weights_of(&assign_linear(&one_pixel(0.6, 0.2), &far)), vec![0.0, 0.0, 0.6]);
    }

    #[test]
    fn color_channels_filtered_independently() {
        let l = layout4();
        let chans = vec![Image::filled(2, 1, 0.2), Image::filled(2, 1, 0.4), Image::filled(2, 1, 0.9)];
        let scene = Scene::new(chans, Image::from_vec(2, 1, vec![0.25, 2.9])).unwrap();
        let s = assign_linear(&scene, &l);
        assert_eq!(s.channel_count(), 3);
        let comp = s.composite();
        for (c, v) in [0.2, 0.4, 0.9].iter().enumerate() {
            assert_eq!(comp[c].data(), &[*v, *v]);
        }
    }

    fn arb_layout() -> impl Strategy<Value = PlaneLayout<f64>> {
        prop::collection::vec(0.01f64..1.5, 1..8).prop_map(|gaps| {
            let mut d = Vec::new();
            let mut acc = 0.0;
            for g in gaps.iter().rev() {
                d.push(acc);
                acc += g;
            }
            d.reverse();
            PlaneLayout::new(d).unwrap()
        })
    }

    proptest! {
        #[test]
        fn partition_of_unity_is_exact(
            layout in arb_layout(),
            px in prop::collection::vec((0.0f64..=1.0, 0.0f64..12.0), 1..64),
        ) {
            let n = px.len();
            let image = Image::from_vec(n, 1, px.iter().map(|p| p.0).collect());
            let depth = Image::from_vec(n, 1, px.iter().map(|p| p.1).collect());
            let scene = Scene::grayscale(image.clone(), depth).unwrap();
            for stack in [assign_direct(&scene, &layout), assign_linear(&scene, &layout)] {
                prop_assert_eq!(&stack.composite()[0], &image);
                for p in stack.planes() {
                    prop_assert!(p[0].min_value() >= 0.0);
                }
            }
        }

        #[test]
        fn linear_weights_continuous_in_depth(layout in arb_layout(), d in 0.0f64..12.0) {
            let eps = 1e-9;
            let at = |depth: f64| weights_of(&assign_linear(&one_pixel(1.0, depth), &layout));
            let a = at(d);
            let b = at(d + eps);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}
