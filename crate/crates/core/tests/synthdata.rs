mod common;

use common::*;
use proptest::prelude::*;

use gradprom::autodiff::Tensor;
use gradprom::exec::Exec;
use gradprom::losses::psnr;
use gradprom::synthdata::{
    augment, degrade, generate_scene, load_dataset, make_dataset, make_sample, read_pnm, write_dataset, AugmentConfig,
    Degradation, Distribution, SceneConfig, Split,
};

fn mean_psnr(sigma: f64, n: usize) -> f64 {
    (0..n)
        .map(|i| {
            let s = make_sample(1, Split::Eval, i, &small_scene(), &Degradation::Gaussian { sigma }).unwrap();
            psnr(&s.degraded, &s.clean).unwrap()
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn degraded_psnr_falls_as_sigma_grows() {
    let p: Vec<f64> = [0.05, 0.1, 0.2, 0.3].iter().map(|&s| mean_psnr(s, 100)).collect();
    assert!(p.windows(2).all(|w| w[0] > w[1]), "{p:?}");
    // Clamping at [0, 1] only removes error, so σ = 0.1 sits near 20 dB from above.
    assert!(p[1] > 20.0 && p[1] < 20.6, "{}", p[1]);
}

#[test]
fn gaussian_noise_has_requested_std() {
    let clean = Tensor::full(&[1, 256, 256], 0.5);
    let noisy = degrade(&clean, &Degradation::Gaussian { sigma: 0.1 }, 3).unwrap();
    let n = noisy.numel() as f64;
    let mean = noisy.data().iter().sum::<f64>() / n;
    let std = (noisy.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!((std / 0.1 - 1.0).abs() < 0.02, "{std}");
    assert!((mean - 0.5).abs() < 1e-3);
}

#[test]
fn poisson_noise_is_unbiased_before_clamping() {
    let clean = Tensor::full(&[1, 256, 256], 0.2);
    let noisy = degrade(&clean, &Degradation::Poisson { rate: 0.1 }, 4).unwrap();
    let n = noisy.numel() as f64;
    let mean = noisy.data().iter().sum::<f64>() / n;
    let var = noisy.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // At 0.2 the clamp at 1 is 8 counts away from the mean of 2.
    assert!((mean - 0.2).abs() < 2e-3, "{mean}");
    assert!((var / (0.2 * 0.1) - 1.0).abs() < 0.03, "{var}");
    assert!(noisy.data().iter().all(|v| (v / 0.1 - (v / 0.1).round()).abs() < 1e-9));
}

#[test]
fn blur_preserves_constants_and_mass() {
    let flat = Tensor::full(&[2, 16, 16], 0.37);
    let out = degrade(&flat, &Degradation::Blur { kernel: 5, std: 1.5 }, 0).unwrap();
    assert_eq!(out, flat);
    let img = generate_scene(5, &small_scene()).unwrap().clean;
    let blurred = degrade(&img, &Degradation::Blur { kernel: 3, std: 2.0 }, 0).unwrap();
    let (a, b) = (img.data().iter().sum::<f64>(), blurred.data().iter().sum::<f64>());
    assert!((a - b).abs() / a < 0.02);
    assert!(blurred.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn downsampling_takes_block_means() {
    let data: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
    let img = Tensor::new(&[1, 4, 4], data).unwrap();
    let out = degrade(&img, &Degradation::Downsample { gamma: 2 }, 0).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    let expected = [(1 + 4 + 5), (2 + 3 + 6 + 7), (8 + 9 + 12 + 13), (10 + 11 + 14 + 15)].map(|s| s as f64 / 64.0);
    for (o, e) in out.data().iter().zip(expected) {
        assert!((o - e).abs() < 1e-15);
    }
    let odd = Tensor::full(&[1, 6, 6], 0.5);
    assert!(degrade(&odd, &Degradation::Downsample { gamma: 4 }, 0).is_err());
}

#[test]
fn composite_applies_stages_in_order() {
    let img = generate_scene(6, &small_scene()).unwrap().clean;
    let d: Degradation = "blur:3:2+downsample:2".parse().unwrap();
    let staged = degrade(
        &degrade(&img, &Degradation::Blur { kernel: 3, std: 2.0 }, 1).unwrap(),
        &Degradation::Downsample { gamma: 2 },
        1,
    )
    .unwrap();
    assert_eq!(degrade(&img, &d, 1).unwrap(), staged);
    assert_eq!(d.scale_factor(), 2);
    assert!("gaussian:-1".parse::<Degradation>().is_err());
    assert!("blur:4:1".parse::<Degradation>().is_err());
    assert!("downsample:3".parse::<Degradation>().is_err());
}

#[test]
fn samples_are_pure_in_their_seeds() {
    let scene = small_scene();
    let deg = Degradation::Gaussian { sigma: 0.2 };
    let a = make_sample(9, Split::Train, 3, &scene, &deg).unwrap();
    let b = make_sample(9, Split::Train, 3, &scene, &deg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, make_sample(9, Split::Eval, 3, &scene, &deg).unwrap());
    assert_ne!(a, make_sample(10, Split::Train, 3, &scene, &deg).unwrap());
    let seq = make_dataset(9, 12, 6, &scene, &deg, Exec::Sequential).unwrap();
    let par = make_dataset(9, 12, 6, &scene, &deg, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq.train[3], a);
}

#[test]
fn scenes_are_labelled_consistently() {
    for dist in [Distribution::A, Distribution::B] {
        let cfg = SceneConfig {
            distribution: dist,
            ..small_scene()
        };
        let mut labels = [0usize; 3];
        for seed in 0..60 {
            let s = generate_scene(seed, &cfg).unwrap();
            labels[s.label] += 1;
            assert!(s.clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.contains(&1) && s.mask.iter().all(|&m| m <= 1));
            assert_eq!(s.mask.len(), 16 * 16);
        }
        assert!(labels.iter().all(|&c| c > 5), "{dist}: {labels:?}");
    }
    let a = generate_scene(1, &small_scene()).unwrap();
    let b = generate_scene(
        1,
        &SceneConfig {
            distribution: Distribution::B,
            ..small_scene()
        },
    )
    .unwrap();
    assert_ne!(a.clean, b.clean);
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = make_dataset(
        2,
        4,
        3,
        &small_scene(),
        &Degradation::Downsample { gamma: 2 },
        Exec::Sequential,
    )
    .unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(load_dataset(dir.path(), Exec::Sequential).unwrap(), ds);
    let pgm = read_pnm(&dir.path().join("train/00000_degraded.pgm"))
        .unwrap()
        .to_tensor()
        .unwrap();
    assert_eq!(pgm.shape(), &[1, 8, 8]);
    for (a, b) in pgm.data().iter().zip(ds.train[0].degraded.data()) {
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_keeps_pairs_aligned(seed in any::<u64>(), aug_seed in any::<u64>(), crop in any::<bool>()) {
        let s = make_sample(seed, Split::Train, 0, &small_scene(), &Degradation::Gaussian { sigma: 0.0 }).unwrap();
        let config = AugmentConfig { enabled: true, center_crop: crop };
        let a = augment(&s, aug_seed, config);
        // With zero noise the degraded image equals the clean one, so the
        // shared transform must keep them equal.
        prop_assert_eq!(&a.degraded, &a.clean);
        prop_assert_eq!(a.clean.shape(), s.clean.shape());
        prop_assert_eq!(a.label, s.label);
        prop_assert!(a.mask.iter().all(|&m| m <= 1));
        prop_assert_eq!(augment(&s, aug_seed, config), a);
        prop_assert_eq!(augment(&s, aug_seed, AugmentConfig::default()), s);
    }
}
