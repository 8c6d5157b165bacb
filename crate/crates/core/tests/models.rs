use gradprom::autodiff::{Tape, Tensor};
use gradprom::nn::{
    enhancer_forward, identity_enhancer_params, init_params, recognizer_forward, ModelConfig, ParameterSet,
};

fn batch(seed: u64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut s = seed | 1;
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn matrix() -> Vec<ModelConfig> {
    vec![
        ModelConfig::enhancer_denoise(1, (16, 16)),
        ModelConfig::enhancer_denoise(3, (16, 16)),
        ModelConfig::enhancer_sr(2, 1, (8, 8)),
        ModelConfig::enhancer_sr(4, 1, (4, 4)),
        ModelConfig::classifier(3, 1, (16, 16)),
        ModelConfig::segmenter(2, 1, (16, 16)),
    ]
}

fn bits(p: &ParameterSet) -> Vec<u64> {
    p.flatten_values().iter().map(|v| v.to_bits()).collect()
}

fn forward(cfg: &ModelConfig, params: &ParameterSet, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let input = tape.constant(x.clone());
    let out = if cfg.role.is_enhancer() {
        enhancer_forward(&mut tape, &bound, input, cfg).unwrap()
    } else {
        recognizer_forward(&mut tape, &bound, input, cfg).unwrap()
    };
    tape.value(out).clone()
}

#[test]
fn init_is_deterministic_and_seeded() {
    for cfg in matrix() {
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        let c = init_params(&cfg, 8).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
        let shapes = |p: &ParameterSet| {
            p.iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        assert_eq!(shapes(&a), shapes(&c));
        for (name, t) in a.iter() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}

#[test]
fn init_scale_follows_fan_in() {
    let cfg = ModelConfig::enhancer_denoise(1, (16, 16));
    let p = init_params(&cfg, 3).unwrap();
    let (name, w) = p.iter().find(|(n, _)| n.contains("conv1.weight")).unwrap();
    let fan_in: usize = w.shape()[1..].iter().product();
    let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.numel() as f64;
    let expected = 2.0 / fan_in as f64;
    assert!((var / expected - 1.0).abs() < 0.2, "{name}: {var} vs {expected}");
}

#[test]
fn zero_residual_enhancer_is_identity() {
    let cfg = ModelConfig::enhancer_denoise(1, (16, 16));
    let theta = identity_enhancer_params(&cfg, 1).unwrap();
    let x = batch(1, &[2, 1, 16, 16]);
    assert_eq!(forward(&cfg, &theta, &x), x);
}

#[test]
fn output_shapes() {
    let sr = ModelConfig::enhancer_sr(2, 1, (8, 8));
    let out = forward(&sr, &init_params(&sr, 1).unwrap(), &batch(2, &[2, 1, 8, 8]));
    assert_eq!(out.shape(), &[2, 1, 16, 16]);
    let cls = ModelConfig::classifier(3, 1, (16, 16));
    let out = forward(&cls, &init_params(&cls, 1).unwrap(), &batch(3, &[4, 1, 16, 16]));
    assert_eq!(out.shape(), &[4, 3]);
    let seg = ModelConfig::segmenter(2, 1, (16, 16));
    let out = forward(&seg, &init_params(&seg, 1).unwrap(), &batch(4, &[2, 1, 16, 16]));
    assert_eq!(out.shape(), &[2, 2, 16, 16]);
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let cfg = ModelConfig::classifier(3, 1, (16, 16));
    let params = init_params(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(batch(1, &[2, 3, 16, 16]));
    assert!(recognizer_forward(&mut tape, &bound, x, &cfg).is_err());
}

#[test]
fn invalid_configs_rejected() {
    assert!(ModelConfig::enhancer_sr(3, 1, (8, 8)).validate().is_err());
    assert!(ModelConfig::classifier(1, 1, (16, 16)).validate().is_err());
    assert!(ModelConfig::segmenter(1, 1, (16, 16)).validate().is_err());
    assert!(init_params(&ModelConfig::enhancer_sr(3, 1, (8, 8)), 0).is_err());
}

#[test]
fn forward_is_deterministic() {
    for cfg in matrix() {
        let p = init_params(&cfg, 5).unwrap();
        let x = batch(9, &[2, cfg.channels, cfg.input_hw.0, cfg.input_hw.1]);
        let a = forward(&cfg, &p, &x);
        let b = forward(&cfg, &p, &x);
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

/// Every named parameter and the input receive a nonzero gradient.
#[test]
fn no_dead_parameters_at_init() {
    for cfg in matrix() {
        let mut params = init_params(&cfg, 11).unwrap();
        // Nonzero biases, as after training.
        let perturbed: Vec<f64> = params
            .flatten_values()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v == 0.0 { 0.01 * ((i % 7) as f64 - 3.0) } else { v })
            .collect();
        params = params.with_values(&perturbed).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.param(batch(13, &[4, cfg.channels, cfg.input_hw.0, cfg.input_hw.1]));
        let out = if cfg.role.is_enhancer() {
            enhancer_forward(&mut tape, &bound, x, &cfg).unwrap()
        } else {
            recognizer_forward(&mut tape, &bound, x, &cfg).unwrap()
        };
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(batch(17, &shape));
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = bound.gradient(&grads, &params);
        let mut offset = 0;
        for (name, t) in params.iter() {
            let slice = &g[offset..offset + t.numel()];
            offset += t.numel();
            assert!(
                slice.iter().any(|&v| v != 0.0),
                "{}: {name} has zero gradient",
                cfg.role
            );
        }
        assert!(
            grads.get(x).data().iter().any(|&v| v != 0.0),
            "{}: no input gradient",
            cfg.role
        );
    }
}

#[test]
fn flatten_round_trip_for_every_architecture() {
    for cfg in matrix() {
        let p = init_params(&cfg, 21).unwrap();
        let v = p.flatten_values();
        assert_eq!(v.len(), p.numel());
        let back = p.with_values(&v).unwrap();
        assert_eq!(bits(&back), bits(&p));
        let map = p.unflatten(&v).unwrap();
        let again = p.flatten_grads(&map).unwrap();
        assert_eq!(
            again.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(p.unflatten(&v[1..]).is_err());
    }
}
