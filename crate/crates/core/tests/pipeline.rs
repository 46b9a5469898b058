//! Scene files through filtering, disk round trip and rendering.

use multifocal::filtering::{assign_direct, assign_linear, Scene};
use multifocal::image::Image;
use multifocal::io::{load_scene, load_stack, save_stack, write_depth_map, write_png};
use multifocal::optics::PlaneLayout;
use multifocal::render::{render_from_stack, render_ground_truth};
use multifocal::{Display, Eye};
use tempfile::TempDir;

fn textured(w: usize, h: usize) -> Image<f64> {
    Image::from_fn(w, h, |x, y| ((x * 13 + y * 5) % 17) as f64 / 16.0)
}

#[test]
fn scene_files_to_stack_and_back() {
    let tmp = TempDir::new().unwrap();
    let (w, h) = (32, 20);
    let depth = Image::from_fn(w, h, |x, _| 4.0 * x as f64 / (w - 1) as f64);
    write_png(&tmp.path().join("s.png"), &[textured(w, h)], 1.0).unwrap();
    write_depth_map(&tmp.path().join("d.dfdm"), &depth).unwrap();

    let scene = load_scene::<f64>(&tmp.path().join("s.png"), &tmp.path().join("d.dfdm")).unwrap();
    assert_eq!(scene.dims(), (w, h));
    let layout = PlaneLayout::uniform(4.0, 0.0, 10).unwrap();
    let stack = assign_linear(&scene, &layout);
    let dir = tmp.path().join("stack");
    save_stack(&dir, &stack, true).unwrap();
    assert!(dir.join("plane_010.png").exists());
    let back = load_stack::<f64>(&dir).unwrap();
    assert_eq!(back.layout(), stack.layout());
    assert_eq!(back.planes(), stack.planes());
}

#[test]
fn rendering_a_loaded_stack_matches_ground_truth_on_plane_depths() {
    let tmp = TempDir::new().unwrap();
    let (w, h) = (40, 24);
    let layout = PlaneLayout::uniform(4.0, 0.0, 5).unwrap();
    let depth = Image::from_fn(w, h, |x, y| layout.depths()[(x / 8 + y / 12) % 5]);
    let scene = Scene::grayscale(textured(w, h), depth).unwrap();
    let dir = tmp.path().join("stack");
    save_stack(&dir, &assign_direct(&scene, &layout), false).unwrap();
    let stack = load_stack::<f64>(&dir).unwrap();

    let display = Display { pixel_pitch_m: 13.6e-6 * 8.0, ..Display::prototype() };
    for focus in [0.0, 1.3, 4.0] {
        let eye = Eye::standard().focused_at(focus);
        let a = render_from_stack(&stack, &eye, &display).unwrap();
        let b = render_ground_truth(&scene, &eye, &display).unwrap();
        assert_eq!(a.channels, b.channels, "focus {focus}");
        let rel = (a.total_radiance() - scene.channels()[0].sum()).abs() / scene.channels()[0].sum();
        assert!(rel < 1e-12, "{rel}");
    }
}
