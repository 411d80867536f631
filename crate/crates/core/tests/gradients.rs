mod common;

use freqsplat::gaussians::{Camera, GaussianCloud};
use freqsplat::gradcheck::{run_gradcheck, GradcheckSpec, Module};
use freqsplat::rasterizer::{render, render_backward, RenderSettings};
use freqsplat::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(module: Module, seeds: &[u64]) {
    for &seed in seeds {
        let spec = GradcheckSpec {
            seed,
            modules: vec![module],
            ..GradcheckSpec::default()
        };
        let report = run_gradcheck(&spec).unwrap();
        assert!(!report.checks.is_empty());
        for c in &report.checks {
            assert!(c.passed(), "seed {seed}: {c}");
        }
    }
}

#[test]
fn projection_gradients() {
    check(Module::Projection, &[0, 1, 2]);
}

#[test]
fn rasterizer_gradients() {
    check(Module::Rasterizer, &[0, 1]);
}

#[test]
fn deformation_gradients() {
    check(Module::Deformation, &[0, 1]);
}

#[test]
fn shf_gradients() {
    check(Module::Shf, &[0, 1]);
}

#[test]
fn thf_gradients() {
    check(Module::Thf, &[0, 1]);
}

#[test]
fn objective_gradients() {
    check(Module::Objective, &[0]);
}

#[test]
fn zero_upstream_gradient_gives_zero_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cloud = common::random_cloud(&mut rng, 10, 1);
    let cam = common::random_camera(&mut rng, 16, 16);
    let out = render(&cloud, &cam, None, RenderSettings::default()).unwrap();
    let g = render_backward(&Image::new(16, 16, 3), &Image::new(16, 16, 1), &Image::new(16, 16, 1), &out.saved).unwrap();
    assert_eq!(g.cloud, cloud.zeros_like());
    assert!(g.screen.iter().all(|s| *s == [0.0, 0.0]));
}

#[test]
fn occluded_gaussian_color_gets_no_gradient() {
    let cam = Camera::identity_pose(8, 8, 8.0, 8.0, 0.1, 10.0);
    let mut cloud = GaussianCloud::empty(0);
    cloud.push_colored([0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 12.0, [0.3; 3]);
    cloud.push_colored([0.0, 0.0, 1.2], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 12.0, [0.3; 3]);
    cloud.push_colored([0.0, 0.0, 1.4], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 12.0, [0.3; 3]);
    cloud.push_colored([0.0, 0.0, 2.0], [1.0, 0.0, 0.0, 0.0], [-1.0; 3], 12.0, [0.6; 3]);
    let out = render(&cloud, &cam, None, RenderSettings::default()).unwrap();
    let g = render_backward(&Image::filled(8, 8, 3, 1.0), &Image::new(8, 8, 1), &Image::new(8, 8, 1), &out.saved).unwrap();
    let front: f64 = g.cloud.sh[..3].iter().map(|v| v.abs()).sum();
    let back: f64 = g.cloud.sh[9..12].iter().map(|v| v.abs()).sum();
    assert!(front > 1.0);
    assert!(back <= 1e-6 * front, "{back}");
}

#[test]
fn mismatched_gradient_shape_is_a_contract_error() {
    let cam = Camera::identity_pose(8, 8, 8.0, 8.0, 0.1, 10.0);
    let mut cloud = GaussianCloud::empty(0);
    cloud.push_colored([0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0], [-1.0; 3], 0.0, [0.3; 3]);
    let out = render(&cloud, &cam, None, RenderSettings::default()).unwrap();
    let err = render_backward(&Image::new(9, 8, 3), &Image::new(8, 8, 1), &Image::new(8, 8, 1), &out.saved);
    assert!(matches!(err, Err(freqsplat::Error::Contract(_))));
}
