mod common;

use common::*;
use freqsplat::data_io::{psnr, ssim};
use freqsplat::rasterizer::{cull_and_bin, preprocess, render, RenderSettings};
use freqsplat::shf::{fft2, high_freq_image, low_freq_image, shf_loss};
use freqsplat::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &Image, b: &Image) -> f64 {
    a.max_abs_diff(b)
}

#[test]
fn tiled_renderer_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for scene in 0..100 {
        let (w, h) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let n = rng.random_range(0..=64);
        let cloud = random_cloud(&mut rng, n, scene % 2);
        let cam = random_camera(&mut rng, w, h);
        let tile = [4, 8, 16][scene % 3];
        for cutoffs in [true, false] {
            let out = render(&cloud, &cam, None, RenderSettings { tile_size: tile, cutoffs }).unwrap();
            let (img, depth, alpha) = oracle_render(&cloud, &cam, cutoffs);
            assert!(max_diff(&out.image, &img) <= 1e-6, "scene {scene} color");
            assert!(max_diff(&out.depth, &depth) <= 1e-6, "scene {scene} depth");
            assert!(max_diff(&out.alpha, &alpha) <= 1e-6, "scene {scene} alpha");
        }
    }
}

#[test]
fn five_gaussians_eight_by_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = random_cloud(&mut rng, 5, 0);
    let cam = random_camera(&mut rng, 8, 8);
    let out = render(&cloud, &cam, None, RenderSettings::default()).unwrap();
    assert!(max_diff(&out.image, &oracle_render(&cloud, &cam, true).0) <= 1e-6);
}

#[test]
fn binning_covers_every_contributing_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let (w, h) = (rng.random_range(8..=40), rng.random_range(8..=40));
        let cloud = random_cloud(&mut rng, 40, 0);
        let cam = random_camera(&mut rng, w, h);
        let splats = preprocess(&cloud, &cam).unwrap();
        let bins = cull_and_bin(&splats, w, h, 8, true);
        for ty in 0..bins.tiles_y {
            for tx in 0..bins.tiles_x {
                let list = &bins.lists[ty * bins.tiles_x + tx];
                for pair in list.windows(2) {
                    let (a, b) = (splats[pair[0] as usize].unwrap(), splats[pair[1] as usize].unwrap());
                    assert!(a.depth < b.depth || (a.depth == b.depth && pair[0] < pair[1]));
                }
                for (i, s) in splats.iter().enumerate() {
                    let Some(s) = s else { continue };
                    let touches = (ty * 8..((ty + 1) * 8).min(h)).any(|y| {
                        (tx * 8..((tx + 1) * 8).min(w)).any(|x| {
                            let (dx, dy) = (x as f64 + 0.5 - s.mean2d[0], y as f64 + 0.5 - s.mean2d[1]);
                            let q = &s.conic;
                            q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy <= 9.0
                        })
                    });
                    if touches {
                        assert!(list.contains(&(i as u32)), "splat {i} missing from tile ({tx}, {ty})");
                    }
                }
            }
        }
    }
}

#[test]
fn fft_matches_naive_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (w, h) in [(2, 2), (4, 4), (5, 3), (8, 6), (16, 16), (7, 16)] {
        let img = random_image(&mut rng, w, h, 3);
        let spec = fft2(&img).unwrap();
        for c in 0..3 {
            let naive = naive_dft(&img, c);
            for p in 0..w * h {
                let (a, ph) = (spec.amplitude[p * 3 + c], spec.phase[p * 3 + c]);
                let (re, im) = naive[p];
                assert!((a * ph.cos() - re).abs() <= 1e-6 && (a * ph.sin() - im).abs() <= 1e-6, "{w}x{h} bin {p}");
            }
        }
    }
}

#[test]
fn spectrum_roundtrip_and_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (w, h) in [(4, 4), (9, 12), (32, 17), (64, 64)] {
        let img = random_image(&mut rng, w, h, 3);
        assert!(fft2(&img).unwrap().inverse().max_abs_diff(&img) <= 1e-6);
        for r in [0.1, 0.25, 0.6] {
            let hi = high_freq_image(&img, r).unwrap();
            let lo = low_freq_image(&img, r).unwrap();
            let sum = Image::from_vec(w, h, 3, hi.data.iter().zip(&lo.data).map(|(a, b)| a + b).collect()).unwrap();
            assert!(sum.max_abs_diff(&img) <= 1e-6);
        }
    }
}

#[test]
fn nyquist_checkerboard_is_all_high_frequency() {
    let img = Image::from_fn(8, 8, 3, |x, y, _| if (x + y) % 2 == 0 { 0.5 } else { -0.5 });
    let spec = naive_dft(&img, 0);
    let support: Vec<usize> = (0..64).filter(|&p| spec[p].0.hypot(spec[p].1) > 1e-9).collect();
    assert_eq!(support, vec![0]);
    assert!(high_freq_image(&img, 0.25).unwrap().max_abs_diff(&img) <= 1e-6);
}

#[test]
fn stripe_loss_matches_hand_value() {
    let gt = Image::from_fn(4, 4, 3, |x, _, _| if x % 2 == 0 { 0.8 } else { 0.2 });
    let rendered = gt.map(|v| v + 0.1);
    // the DC bin is the only one inside a disc of radius 0.5
    let mut weight_sum = 0.0;
    for c in 0..3 {
        let mut spec = naive_dft(&gt, c);
        spec[2 * 4 + 2] = (0.0, 0.0);
        weight_sum += naive_idft(&spec, 4, 4).iter().map(|v| v.abs()).sum::<f64>();
    }
    assert!((weight_sum - 48.0 * 0.3).abs() < 1e-12);
    let (loss, _) = shf_loss(&gt, &rendered, 0.25).unwrap();
    assert!((loss - 0.1 * weight_sum).abs() <= 1e-9, "{loss}");
}

#[test]
fn ssim_matches_windowed_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (w, h) in [(11, 11), (16, 13), (24, 24)] {
        let a = random_image(&mut rng, w, h, 3);
        let b = Image::from_vec(w, h, 3, a.data.iter().map(|v| (v + 0.3 * rng.random::<f64>()).min(1.0)).collect())
            .unwrap();
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() <= 1e-6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}
