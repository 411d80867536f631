use freqsplat::gaussians::{build_covariance, normalize_quat, Camera, GaussianCloud};
use freqsplat::rasterizer::{render, RenderSettings};
use freqsplat::shf::{fft2, shf_loss};
use freqsplat::thf::{census_loss, charbonnier, lk_flow, FlowField};
use freqsplat::Image;
use proptest::prelude::*;

fn image_strategy(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..1.0, w * h * 3).prop_map(move |d| Image::from_vec(w, h, 3, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_spd(q in prop::array::uniform4(-1.0f64..1.0), s in prop::array::uniform3(1e-3f64..10.0)) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let cov = build_covariance(&q, &s).unwrap();
        prop_assert!(cov.cholesky().is_some());
    }

    #[test]
    fn unit_quaternion_normalization_is_noop(q in prop::array::uniform4(-1.0f64..1.0)) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let u = normalize_quat(&q);
        let again = normalize_quat(&u);
        for k in 0..4 {
            prop_assert!((u[k] - again[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn spectrum_inverse_roundtrip(img in image_strategy(9, 6)) {
        prop_assert!(fft2(&img).unwrap().inverse().max_abs_diff(&img) <= 1e-6);
    }

    #[test]
    fn shf_loss_scales_with_residual(gt in image_strategy(8, 8), r in image_strategy(8, 8), lambda in 0.01f64..10.0) {
        let a = Image::from_vec(8, 8, 3, gt.data.iter().zip(&r.data).map(|(g, v)| g + (v - 0.5)).collect()).unwrap();
        let b = Image::from_vec(8, 8, 3, gt.data.iter().zip(&r.data).map(|(g, v)| g + lambda * (v - 0.5)).collect()).unwrap();
        let (la, _) = shf_loss(&gt, &a, 0.25).unwrap();
        let (lb, _) = shf_loss(&gt, &b, 0.25).unwrap();
        prop_assert!(la >= 0.0);
        prop_assert!((lb - lambda * la).abs() <= 1e-9 * lb.abs().max(1.0));
    }

    #[test]
    fn shf_weights_ignore_the_render(gt in image_strategy(8, 8), a in image_strategy(8, 8)) {
        let (_, ga) = shf_loss(&gt, &a, 0.25).unwrap();
        let flipped = a.map(|v| 2.0 - v);
        let (_, gf) = shf_loss(&gt, &flipped, 0.25).unwrap();
        for i in 0..ga.data.len() {
            prop_assert!((ga.data[i].abs() - gf.data[i].abs()).abs() <= 1e-12 || ga.data[i] == 0.0 || gf.data[i] == 0.0);
        }
    }

    #[test]
    fn census_is_symmetric(a in image_strategy(10, 10), b in image_strategy(10, 10)) {
        let ab = census_loss(&a, &b, 7).unwrap();
        let ba = census_loss(&b, &a, 7).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn lk_of_identical_frames_is_zero(a in image_strategy(16, 16)) {
        let f = lk_flow(&a, &a, 2, 5).unwrap();
        prop_assert!(f.u.iter().chain(&f.v).all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn charbonnier_is_nonnegative(u in prop::collection::vec(-5.0f64..5.0, 16), v in prop::collection::vec(-5.0f64..5.0, 16)) {
        let mut f = FlowField::zeros(4, 4);
        f.u = u;
        f.v = v;
        prop_assert!(charbonnier(&f, 1e-3) >= 0.0);
    }

    #[test]
    fn alpha_grows_with_opacity(logit in -4.0f64..4.0, bump in 0.01f64..3.0, dx in -0.3f64..0.3, dy in -0.3f64..0.3) {
        let cam = Camera::identity_pose(12, 12, 12.0, 12.0, 0.1, 10.0);
        let mut cloud = GaussianCloud::empty(0);
        cloud.push_colored([dx, dy, 2.0], [1.0, 0.0, 0.0, 0.0], [-1.5; 3], logit, [0.5; 3]);
        cloud.push_colored([-dx, 0.1, 2.5], [1.0, 0.0, 0.0, 0.0], [-1.0; 3], 0.5, [0.2; 3]);
        let before = render(&cloud, &cam, None, RenderSettings::default()).unwrap().alpha;
        cloud.opacity_logits[0] += bump;
        let after = render(&cloud, &cam, None, RenderSettings::default()).unwrap().alpha;
        for (a, b) in before.data.iter().zip(&after.data) {
            prop_assert!(b >= a);
        }
    }
}

#[test]
fn rendering_is_deterministic() {
    let cam = Camera::identity_pose(20, 20, 20.0, 20.0, 0.1, 10.0);
    let mut cloud = GaussianCloud::empty(1);
    for i in 0..30 {
        let f = i as f64;
        cloud.push([(f * 0.37).sin() * 0.5, (f * 0.71).cos() * 0.5, 2.0 + (f * 0.13).sin()], [1.0, 0.1 * f, 0.0, 0.2], [-2.0, -2.5, -2.2], 0.3, &[0.1; 12]);
    }
    let a = render(&cloud, &cam, None, RenderSettings::default()).unwrap();
    let b = render(&cloud, &cam, None, RenderSettings::default()).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.depth, b.depth);
}
