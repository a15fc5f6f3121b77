use super::*;
use crate::grad::{fd_check, FdOptions, Probe};
use crate::mixer::{mix_fused, Variant};
use crate::tensor::matmul;

fn small_cfg(layers: usize, head: Head) -> EncoderConfig {
    EncoderConfig {
        dropout_rate: 0.0,
        head,
        mixer: MixerConfig::new(4, 2),
        ..EncoderConfig::new(7, 8, 4, layers, 3)
    }
}

fn randomised(cfg: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut rng = SeededRng::new(seed);
    let mut p = EncoderParams::init(cfg, &mut rng).unwrap();
    // unit-scale embeddings and non-trivial gains, biases and head so every
    // coordinate matters and the first layer norm is well conditioned
    p.token_emb = Tensor::random_normal(p.token_emb.shape(), 1.0, &mut rng);
    p.pos_emb = Tensor::random_normal(p.pos_emb.shape(), 1.0, &mut rng);
    p.visit_mut(&mut |name, t| {
        if name.ends_with("bias") || name.ends_with("gain") || name.starts_with("head") {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    });
    p
}

/// Plain matrix oracle for `LN` with unit-free formula.
fn ln_oracle(x: &Tensor, ln: &LayerNorm) -> Tensor {
    let (n, d) = x.dims2().unwrap();
    let mut out = Tensor::zeros(&[n, d]);
    for t in 0..n {
        let mean: f64 = x.row(t).iter().sum::<f64>() / d as f64;
        let var: f64 = x.row(t).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out.row_mut(t)[j] = (x.at(t, j) - mean) / (var + 1e-12).sqrt() * ln.gain.data()[j] + ln.bias.data()[j];
        }
    }
    out
}

fn add_bias(mut x: Tensor, b: &Tensor) -> Tensor {
    let d = b.len();
    for row in x.data_mut().chunks_exact_mut(d) {
        row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
    }
    x
}

#[test]
fn gelu_reference_points() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    for x in [-2.0, -0.3, 0.0, 0.7, 3.1] {
        let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
        assert!((fd - gelu_grad(x)).abs() < 1e-8);
    }
}

#[test]
fn layer_norm_degenerate_row_is_bias() {
    let ln = LayerNorm { gain: Tensor::vector(vec![2.0, 3.0]), bias: Tensor::vector(vec![0.5, -1.0]) };
    let (y, _) = layer_norm(&Tensor::<f64>::zeros(&[1, 2]), &ln).unwrap();
    assert_eq!(y.data(), &[0.5, -1.0]);
    let (y, _) = layer_norm(&Tensor::from_rows(&[[7.0, 7.0]]).unwrap(), &ln).unwrap();
    assert_eq!(y.data(), &[0.5, -1.0]);
}

#[test]
fn eval_mode_is_deterministic() {
    let cfg = EncoderConfig { dropout_rate: 0.1, ..small_cfg(2, Head::MaxPool) };
    let p = randomised(&cfg, 1);
    let tokens = [1, 4, 2, 6, 0, 3];
    let seg = SegmentMap::even(6, 2).unwrap();
    let a = encode(&tokens, &seg, &p, &cfg).unwrap();
    let b = encode(&tokens, &seg, &p, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dropout_masks_follow_the_rng() {
    let cfg = EncoderConfig { dropout_rate: 0.5, ..small_cfg(1, Head::MaxPool) };
    let p = randomised(&cfg, 2);
    let tokens = [1, 2, 3, 4];
    let seg = SegmentMap::whole(4).unwrap();
    let run = |seed| forward(&tokens, &seg, &p, &cfg, Some(&mut SeededRng::new(seed))).unwrap().output;
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), encode(&tokens, &seg, &p, &cfg).unwrap());
}

#[test]
fn one_layer_matches_manual_composition() {
    let cfg = small_cfg(1, Head::ClsToken);
    let p = randomised(&cfg, 3);
    let tokens = [5u32, 0, 2, 2, 6];
    let seg = SegmentMap::even(5, 2).unwrap();
    let lp = &p.layers[0];

    let mut h = Tensor::zeros(&[5, 4]);
    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..4 {
            h.row_mut(t)[j] = p.token_emb.at(tok as usize, j) + p.pos_emb.at(t, j);
        }
    }
    let mix = mix_fused(&h, &lp.mixer, &seg, &cfg.layer_mixer(0)).unwrap().p;
    let mut r1 = mix.clone();
    r1.add_assign(&h).unwrap();
    let h1 = ln_oracle(&r1, &lp.ln1);
    let pre = add_bias(matmul(&h1, &lp.ffn_in.weight).unwrap(), &lp.ffn_in.bias);
    let act = pre.map(|x| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt())));
    let mut r2 = add_bias(matmul(&act, &lp.ffn_out.weight).unwrap(), &lp.ffn_out.bias);
    r2.add_assign(&h1).unwrap();
    let expect = ln_oracle(&r2, &lp.ln2);

    let got = encode(&tokens, &seg, &p, &cfg).unwrap();
    for (a, b) in got.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn zero_model_stays_finite() {
    let cfg = small_cfg(2, Head::MaxPool);
    let mut p = randomised(&cfg, 4);
    p.visit_mut(&mut |name, t| {
        if !name.ends_with("gain") {
            t.fill(0.0)
        }
    });
    let out = encode(&[0, 1, 2], &SegmentMap::whole(3).unwrap(), &p, &cfg).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_preserved_for_every_variant() {
    for v in Variant::ALL {
        let mut cfg = small_cfg(2, Head::MaxPool);
        cfg.mixer = cfg.mixer.with_variant(v);
        let p = randomised(&cfg, 5);
        let out = encode(&[1, 2, 3, 4, 5], &SegmentMap::even(5, 3).unwrap(), &p, &cfg).unwrap();
        assert_eq!(out.shape(), &[5, 4]);
    }
}

#[test]
fn residual_identity_when_sublayers_vanish() {
    let cfg = small_cfg(1, Head::MaxPool);
    let mut p = randomised(&cfg, 6);
    p.layers[0].mixer = ProjectionSet::random(4, true, 0.0, &mut SeededRng::new(0));
    p.layers[0].ffn_out = Affine::zeros(16, 4);
    let tokens = [3u32, 1, 4, 1, 5];
    let seg = SegmentMap::even(5, 2).unwrap();
    let h = embed(&tokens, &p, &cfg).unwrap();
    let expect = ln_oracle(&ln_oracle(&h, &p.layers[0].ln1), &p.layers[0].ln2);
    let got = encode(&tokens, &seg, &p, &cfg).unwrap();
    for (a, b) in got.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn input_violations_rejected() {
    let cfg = small_cfg(1, Head::MaxPool);
    let p = randomised(&cfg, 7);
    let seg = SegmentMap::whole(2).unwrap();
    assert!(matches!(encode(&[1, 7], &seg, &p, &cfg), Err(Error::Input(_))));
    let long = [0u32; 9];
    assert!(matches!(encode(&long, &SegmentMap::whole(9).unwrap(), &p, &cfg), Err(Error::Input(_))));
    assert!(matches!(encode(&[], &seg, &p, &cfg), Err(Error::EmptySequence)));
}

#[test]
fn classify_heads() {
    let enc = Tensor::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]]).unwrap();
    let id = Affine::identity(3);
    assert_eq!(classify(&enc, Head::ClsToken, &id).unwrap().data(), &[1.0, -2.0, 0.5]);
    assert_eq!(classify(&enc, Head::MaxPool, &id).unwrap().data(), &[1.0, 3.0, 0.5]);

    let constant = Tensor::from_rows(&[[0.4, 0.1, -0.3]; 4]).unwrap();
    let w = Affine::random(3, 2, 1.0, &mut SeededRng::new(1));
    assert_eq!(classify(&constant, Head::MaxPool, &w).unwrap(), classify(&constant, Head::ClsToken, &w).unwrap());
}

#[test]
fn max_pool_head_matches_oracle() {
    let mut rng = SeededRng::new(9);
    let enc = Tensor::random_normal(&[6, 5], 1.0, &mut rng);
    let mut w = Affine::random(5, 3, 1.0, &mut rng);
    w.bias = Tensor::random_normal(&[3], 1.0, &mut rng);
    let (mx, _) = crate::tensor::reduce_max_argmax(&enc, 0).unwrap();
    let expect = add_bias(matmul(&mx.reshape(&[1, 5]).unwrap(), &w.weight).unwrap(), &w.bias);
    let got = classify(&enc, Head::MaxPool, &w).unwrap();
    for (a, b) in got.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_basics() {
    let (l, g) = cross_entropy(&Tensor::vector(vec![0.0, 0.0]), 1).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);
    assert_eq!(g.data(), &[0.5, -0.5]);
    assert!(cross_entropy(&Tensor::vector(vec![0.0]), 1).is_err());
}

fn encoder_fd(head: Head, variant: Variant, seed: u64) -> crate::grad::GradReport {
    let mut cfg = small_cfg(1, head);
    cfg.mixer = cfg.mixer.with_variant(variant);
    let p = randomised(&cfg, seed);
    let tokens = [3u32, 0, 5, 1, 6, 2];
    let seg = SegmentMap::even(6, 2).unwrap();
    let ex = Example { tokens: &tokens, seg: &seg, label: 2 };
    let mut grads = p.zeros_like();
    loss_and_grad(&ex, &p, &cfg, None, &mut grads).unwrap();
    fd_check(
        |q: &EncoderParams| {
            let (value, regime) = loss(&ex, q, &cfg)?;
            Ok(Probe { value, regime })
        },
        &p,
        &grads,
        FdOptions::default(),
    )
    .unwrap()
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    for (i, head) in [Head::MaxPool, Head::ClsToken].into_iter().enumerate() {
        let r = encoder_fd(head, Variant::Full, 20 + i as u64);
        assert!(r.passed, "{head:?}: {:?}", r.params.iter().filter(|p| !p.failing.is_empty()).collect::<Vec<_>>());
        assert!(r.max_rel_err < 1e-4);
    }
    for v in [Variant::NoSsGa, Variant::NoSmp, Variant::GaOnly] {
        let r = encoder_fd(Head::MaxPool, v, 30);
        assert!(r.passed, "{v:?}: {:?}", r.params.iter().filter(|p| !p.failing.is_empty()).collect::<Vec<_>>());
    }
}

#[test]
fn loss_and_grad_agrees_with_loss() {
    let cfg = small_cfg(2, Head::MaxPool);
    let p = randomised(&cfg, 11);
    let tokens = [1u32, 2, 3];
    let seg = SegmentMap::whole(3).unwrap();
    let ex = Example { tokens: &tokens, seg: &seg, label: 0 };
    let mut g = p.zeros_like();
    let lg = loss_and_grad(&ex, &p, &cfg, None, &mut g).unwrap();
    assert_eq!(lg.loss, loss(&ex, &p, &cfg).unwrap().0);
}

#[test]
fn branch_norm_examples() {
    assert_eq!(branch_norm(&Tensor::zeros(&[3, 4]), 2).unwrap(), 0.0);
    assert_eq!(branch_norm(&Tensor::full(&[3, 4], 1.0), 2).unwrap(), 1.0);
    let mut rng = SeededRng::new(12);
    for heads in [1, 2, 4] {
        let x = Tensor::<f64>::random_normal(&[4, 8], 1.0, &mut rng);
        // two-step oracle: per (token, head) RMS, then plain average
        let dh = 8 / heads;
        let mut per = Vec::new();
        for t in 0..4 {
            for h in 0..heads {
                let sq: f64 = (0..dh).map(|k| x.at(t, h * dh + k).powi(2) / dh as f64).sum();
                per.push(sq.sqrt());
            }
        }
        let expect = per.iter().sum::<f64>() / per.len() as f64;
        assert!((branch_norm(&x, heads).unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn pooling_norms_rows_and_errors() {
    let cfg = EncoderConfig { mixer: MixerConfig::new(4, 2), ..small_cfg(3, Head::MaxPool) };
    let p = randomised(&cfg, 13);
    let seg = SegmentMap::even(5, 2).unwrap();
    let runs: Vec<_> = [[1u32, 2, 3, 4, 5], [6, 5, 4, 3, 2]]
        .iter()
        .map(|t| Some(forward(t, &seg, &p, &cfg, None).unwrap().diagnostics()))
        .collect();
    let rows = pooling_norms(&runs, 2).unwrap();
    assert_eq!(rows.len(), 3 * 4);
    for l in 0..3 {
        let r = &rows[l * 4..l * 4 + 4];
        assert_eq!(r.iter().map(|x| x.branch).collect::<Vec<_>>(), [Branch::Ga, Branch::Smp, Branch::Lmp, Branch::Mean]);
        assert!((r[3].value - (r[0].value + r[1].value + r[2].value) / 3.0).abs() < 1e-15);
        let expect: f64 = runs
            .iter()
            .map(|run| branch_norm(&run.as_ref().unwrap()[l].segment_term, 2).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((r[1].value - expect).abs() < 1e-12);
    }
    assert!(matches!(pooling_norms(&[None], 2), Err(Error::State(_))));
    assert!(matches!(pooling_norms(&[], 2), Err(Error::State(_))));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small_cfg(2, Head::ClsToken);
    let p = randomised(&cfg, 14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::from_params(&cfg, &p).save(&path).unwrap();
    let (cfg2, p2) = Checkpoint::load(&path).unwrap().into_params().unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(p2, p);
}

#[test]
fn checkpoint_rejects_bad_content() {
    let cfg = small_cfg(1, Head::MaxPool);
    let p = randomised(&cfg, 15);
    let mut ck = Checkpoint::from_params(&cfg, &p);
    ck.tensors.pop();
    assert!(matches!(ck.clone().into_params(), Err(Error::Input(_))));
    let mut ck = Checkpoint::from_params(&cfg, &p);
    ck.tensors[0].shape = vec![1, 1];
    assert!(ck.into_params().is_err());
    let mut ck = Checkpoint::from_params(&cfg, &p);
    ck.version = 99;
    assert!(ck.into_params().is_err());
    let json = serde_json::to_string(&Checkpoint::from_params(&cfg, &p)).unwrap();
    let tampered = json.replacen("\"version\"", "\"bogus\":1,\"version\"", 1);
    assert!(serde_json::from_str::<Checkpoint>(&tampered).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = small_cfg(1, Head::MaxPool);
    assert!(cfg.validate().is_ok());
    cfg.layers = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = small_cfg(1, Head::MaxPool);
    cfg.mixer.d = 8;
    assert!(cfg.validate().is_err());
    let json = r#"{"vocab_size":4,"max_len":4,"d":4,"layers":1,"mixer":{"d":4},"num_classes":2,"extra":1}"#;
    assert!(serde_json::from_str::<EncoderConfig>(json).is_err());
    let json = r#"{"vocab_size":4,"max_len":4,"d":4,"layers":1,"mixer":{"d":4},"num_classes":2}"#;
    let cfg: EncoderConfig = serde_json::from_str(json).unwrap();
    assert_eq!(cfg.ffn_dim(), 16);
    assert_eq!(cfg.dropout_rate, 0.1);
}
