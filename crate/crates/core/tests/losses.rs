use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use gradprom::autodiff::{Tape, Tensor};
use gradprom::losses::{
    accuracy, ce_loss, miou, pixel_loss, psnr, ssim, unsup_vr_loss, CeTarget, PixelLoss, SegConfusion,
};
use gradprom::nn::{init_params, recognizer_forward, ModelConfig};

fn lcg(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn image(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::new(shape, lcg(seed, shape.iter().product())).unwrap()
}

fn scalar(f: impl FnOnce(&mut Tape) -> gradprom::autodiff::Var) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).item()
}

#[test]
fn pixel_loss_examples() {
    let p = Tensor::new(&[1, 1, 2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
    let q = Tensor::new(&[1, 1, 2, 2], vec![0.5, 0.5, 0.0, 0.75]).unwrap();
    let mse = scalar(|t| {
        let (a, b) = (t.constant(p.clone()), t.constant(q.clone()));
        pixel_loss(t, PixelLoss::Mse, a, b).unwrap()
    });
    let l1 = scalar(|t| {
        let (a, b) = (t.constant(p.clone()), t.constant(q.clone()));
        pixel_loss(t, PixelLoss::L1, a, b).unwrap()
    });
    assert_abs_diff_eq!(mse, (0.25 + 0.0 + 1.0 + 0.25) / 4.0, epsilon = 1e-15);
    assert_abs_diff_eq!(l1, (0.5 + 0.0 + 1.0 + 0.5) / 4.0, epsilon = 1e-15);
}

#[test]
fn cross_entropy_examples() {
    let ce = |shape: &[usize], logits: Vec<f64>, labels: &[usize]| {
        scalar(|t| {
            let l = t.constant(Tensor::new(shape, logits).unwrap());
            ce_loss(t, l, CeTarget::ImageLevel(labels)).unwrap()
        })
    };
    assert_abs_diff_eq!(ce(&[1, 3], vec![0.0; 3], &[2]), 3f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(ce(&[1, 2], vec![1.0, 0.0], &[0]), 0.31326, epsilon = 1e-5);
    assert!(ce(&[1, 3], vec![40.0, 0.0, 0.0], &[0]) < 1e-9);
    assert!(ce(&[1, 3], vec![1e3, 0.0, 0.0], &[1]).is_finite());
}

fn seg_setup() -> (ModelConfig, gradprom::nn::ParameterSet) {
    let cfg = ModelConfig::segmenter(2, 1, (16, 16));
    (cfg, init_params(&cfg, 4).unwrap())
}

#[test]
fn unsup_loss_is_zero_on_clean_input() {
    let (cfg, phi) = seg_setup();
    let x = image(1, &[2, 1, 16, 16]);
    let v = scalar(|t| {
        let p = phi.bind(t, true);
        let (a, b) = (t.constant(x.clone()), t.constant(x.clone()));
        unsup_vr_loss(t, &p, a, b, &cfg).unwrap()
    });
    assert_eq!(v, 0.0);
}

#[test]
fn unsup_loss_equals_two_pass_mse() {
    let (cfg, phi) = seg_setup();
    let enhanced = image(2, &[2, 1, 16, 16]);
    let clean = image(3, &[2, 1, 16, 16]);
    let fused = scalar(|t| {
        let p = phi.bind(t, true);
        let (a, b) = (t.constant(enhanced.clone()), t.constant(clean.clone()));
        unsup_vr_loss(t, &p, a, b, &cfg).unwrap()
    });
    let run = |x: &Tensor| {
        let mut t = Tape::new();
        let p = phi.bind(&mut t, false);
        let v = t.constant(x.clone());
        let out = recognizer_forward(&mut t, &p, v, &cfg).unwrap();
        t.value(out).clone()
    };
    let (fa, fb) = (run(&enhanced), run(&clean));
    let mse = fa
        .data()
        .iter()
        .zip(fb.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / fa.numel() as f64;
    assert!(mse > 0.0);
    assert_abs_diff_eq!(fused, mse, epsilon = 1e-14);
}

#[test]
fn unsup_loss_stops_gradient_at_clean_branch() {
    let (cfg, phi) = seg_setup();
    let mut t = Tape::new();
    let p = phi.bind(&mut t, true);
    let enhanced = t.param(image(5, &[1, 1, 16, 16]));
    let clean = t.param(image(6, &[1, 1, 16, 16]));
    let loss = unsup_vr_loss(&mut t, &p, enhanced, clean, &cfg).unwrap();
    let grads = t.backward(loss).unwrap();
    assert!(grads.get(clean).data().iter().all(|&v| v == 0.0));
    assert!(grads.get(enhanced).data().iter().any(|&v| v != 0.0));
}

#[test]
fn psnr_decreases_with_noise_scale() {
    let clean = Tensor::full(&[1, 16, 16], 0.5);
    let dir: Vec<f64> = lcg(9, 256).iter().map(|v| v - 0.5).collect();
    let mut last = f64::INFINITY;
    for sigma in [0.01, 0.05, 0.1, 0.2, 0.4] {
        let noisy = Tensor::new(&[1, 16, 16], dir.iter().map(|d| 0.5 + sigma * d).collect()).unwrap();
        let p = psnr(&noisy, &clean).unwrap();
        assert!(p < last, "σ={sigma}: {p} ≥ {last}");
        last = p;
    }
}

#[test]
fn ssim_bounds_and_symmetry() {
    for seed in 0..10 {
        let a = image(seed, &[1, 16, 16]);
        let b = image(seed + 100, &[1, 16, 16]);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((-1.0..=1.0).contains(&ab), "{ab}");
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let shifted = a.map(|v| (v * 0.8 + 0.1) + 0.05).unwrap();
        let base = a.map(|v| v * 0.8 + 0.1).unwrap();
        assert!(ssim(&base, &shifted).unwrap() < 1.0);
    }
}

fn permuted<T: Clone>(xs: &[T], perm: &[usize], row: usize) -> Vec<T> {
    perm.iter().flat_map(|&p| xs[p * row..(p + 1) * row].to_vec()).collect()
}

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracy_is_invariant_to_sample_order(
        logits in prop::collection::vec(-3.0f64..3.0, 8 * 3),
        labels in prop::collection::vec(0usize..3, 8),
        perm in perm_strategy(8),
    ) {
        let a = accuracy(&Tensor::new(&[8, 3], logits.clone()).unwrap(), &labels);
        let b = accuracy(&Tensor::new(&[8, 3], permuted(&logits, &perm, 3)).unwrap(), &permuted(&labels, &perm, 1));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn miou_is_invariant_to_sample_order(
        logits in prop::collection::vec(-3.0f64..3.0, 4 * 2 * 16),
        masks in prop::collection::vec(0usize..2, 4 * 16),
        perm in perm_strategy(4),
    ) {
        let a = miou(&Tensor::new(&[4, 2, 4, 4], logits.clone()).unwrap(), &masks);
        let b = miou(&Tensor::new(&[4, 2, 4, 4], permuted(&logits, &perm, 32)).unwrap(), &permuted(&masks, &perm, 16));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn miou_is_invariant_to_class_relabelling(
        logits in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 16),
        masks in prop::collection::vec(0usize..3, 2 * 16),
        perm in perm_strategy(3),
    ) {
        let mut relabelled = vec![0.0; logits.len()];
        for b in 0..2 {
            for c in 0..3 {
                for px in 0..16 {
                    relabelled[(b * 3 + perm[c]) * 16 + px] = logits[(b * 3 + c) * 16 + px];
                }
            }
        }
        let new_masks: Vec<usize> = masks.iter().map(|&m| perm[m]).collect();
        let a = miou(&Tensor::new(&[2, 3, 4, 4], logits).unwrap(), &masks);
        let b = miou(&Tensor::new(&[2, 3, 4, 4], relabelled).unwrap(), &new_masks);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn confusion_merge_equals_single_pass(
        logits in prop::collection::vec(-3.0f64..3.0, 4 * 2 * 16),
        masks in prop::collection::vec(0usize..2, 4 * 16),
    ) {
        let all = Tensor::new(&[4, 2, 4, 4], logits.clone()).unwrap();
        let mut merged = SegConfusion::new(2);
        for half in 0..2 {
            let mut part = SegConfusion::new(2);
            let t = Tensor::new(&[2, 2, 4, 4], logits[half * 64..(half + 1) * 64].to_vec()).unwrap();
            part.add(&t, &masks[half * 32..(half + 1) * 32]);
            merged.merge(&part);
        }
        prop_assert_eq!(merged.miou(), miou(&all, &masks));
    }
}
