use pfin_core::gradcheck::check_gradients;
use pfin_core::pfin::{
    beta_nll, beta_nll_loss, classification_loss, classify_eval, fuse_eval, fuse_multimodal_eval, fuse_plain,
    impute, impute_baseline, init_params, uncertainty_gate, BaselineContext, BaselineKind, ImputationNodes,
    ImputationOutput, NormCheck, PfinConfig,
};
use pfin_core::rng::{stream, Purpose};
use pfin_core::synth::{generate, GeneratorSpec};
use pfin_core::{Error, Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(d: usize) -> PfinConfig {
    PfinConfig {
        d,
        n_labels: 5,
        ..PfinConfig::default()
    }
}

fn unit_rows(batch: usize, d: usize, seed: u64) -> Tensor {
    let spec = GeneratorSpec {
        d,
        latent_dim: d.min(16),
        seed,
        ..GeneratorSpec::default()
    };
    let samples = generate(&spec, batch).unwrap();
    Tensor::from_rows(&samples.iter().map(|s| s.z_img.clone()).collect::<Vec<_>>()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    t
}

fn params(cfg: &PfinConfig, seed: u64) -> ParamSet {
    init_params(cfg, &mut stream(seed, Purpose::Init)).unwrap()
}

/// Fresh parameters with non-zero output heads so every path is exercised.
fn trained_like(cfg: &PfinConfig, seed: u64) -> ParamSet {
    let mut p = params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t) in p.iter_mut() {
        if name.ends_with(".w") || name == "pfin.query" {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.4..0.4));
        }
    }
    p
}

#[test]
fn forward_shapes_and_fresh_head_fixture() {
    let cfg = config(16);
    let p = params(&cfg, 1);
    let z = unit_rows(7, 16, 2);
    let out = impute(&p, &z, &cfg).unwrap();
    assert_eq!(out.mu.shape(), &[7, 16]);
    assert_eq!(out.log_var.shape(), &[7, 16]);
    assert!(out.mu.data().iter().all(|&v| v == 0.0));
    assert!(out.log_var.data().iter().all(|&v| v == 0.0));
    assert!(out.variance().data().iter().all(|&v| v == 1.0));
    assert_eq!(out.mean_variance(), 1.0);
}

#[test]
fn forward_has_no_cross_sample_mixing() {
    let cfg = config(16);
    let p = trained_like(&cfg, 3);
    let z = unit_rows(4, 16, 5);
    let mut rows: Vec<Vec<f64>> = (0..4).map(|r| z.row(r).to_vec()).collect();
    rows[2] = rows[0].clone();
    let z = Tensor::from_rows(&rows).unwrap();
    let out = impute(&p, &z, &cfg).unwrap();
    assert_eq!(out.mu.row(0), out.mu.row(2));
    assert_eq!(out.log_var.row(0), out.log_var.row(2));
    assert_ne!(out.mu.row(0), out.mu.row(1));
}

#[test]
fn log_variance_respects_clamp() {
    let cfg = PfinConfig {
        log_var_clamp: 0.05,
        ..config(16)
    };
    let mut p = trained_like(&cfg, 4);
    let w = p.get_mut("pfin.log_var.fc2.w").unwrap();
    w.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    let out = impute(&p, &unit_rows(9, 16, 1), &cfg).unwrap();
    assert!(out.log_var.data().iter().all(|v| v.abs() <= 0.05));
    assert!(out.log_var.data().iter().any(|v| v.abs() == 0.05));
}

#[test]
fn non_unit_input_policy() {
    let cfg = PfinConfig {
        norm_check: NormCheck::Error,
        ..config(16)
    };
    let p = params(&cfg, 1);
    let z = Tensor::full(&[2, 16], 1.0);
    assert!(matches!(impute(&p, &z, &cfg), Err(Error::Contract(_))));
    let lenient = PfinConfig {
        norm_check: NormCheck::Warn,
        ..cfg
    };
    assert!(impute(&p, &z, &lenient).is_ok());
}

#[test]
fn config_validation() {
    assert!(PfinConfig { n_heads: 3, ..config(16) }.validate().is_err());
    assert!(PfinConfig { beta: 1.5, ..config(16) }.validate().is_err());
    assert!(PfinConfig { fusion_heads: 5, ..config(16) }.validate().is_err());
    assert!(config(16).validate().is_ok());
}

fn single(mu: f64, log_var: f64) -> ImputationOutput {
    ImputationOutput {
        mu: Tensor::matrix(1, 1, vec![mu]).unwrap(),
        log_var: Tensor::matrix(1, 1, vec![log_var]).unwrap(),
    }
}

#[test]
fn beta_nll_fixtures() {
    let target = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    for beta in [0.0, 0.25, 0.5, 1.0] {
        assert_eq!(beta_nll(&single(0.0, 0.0), &target, beta).unwrap(), 0.5);
    }
    let at_mean = Tensor::matrix(1, 1, vec![0.3]).unwrap();
    let v = beta_nll(&single(0.3, 1.0), &at_mean, 0.5).unwrap();
    assert!((v - 0.824_361).abs() < 1e-6);
    assert!((v - 0.5 * 0.5f64.exp()).abs() < 1e-15);
}

#[test]
fn beta_zero_is_plain_gaussian_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let out = ImputationOutput {
            mu: random(&[3, 4], &mut rng, -1.0, 1.0),
            log_var: random(&[3, 4], &mut rng, -3.0, 3.0),
        };
        let z = random(&[3, 4], &mut rng, -1.0, 1.0);
        let expected: f64 = (0..12)
            .map(|i| {
                let (m, lv, t) = (out.mu.data()[i], out.log_var.data()[i], z.data()[i]);
                0.5 * lv + (t - m) * (t - m) / (2.0 * lv.exp())
            })
            .sum::<f64>()
            / 12.0;
        assert!((beta_nll(&out, &z, 0.0).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn beta_nll_shape_mismatch() {
    let out = single(0.0, 0.0);
    assert!(matches!(beta_nll(&out, &Tensor::zeros(&[1, 2]), 0.5), Err(Error::Dimension { .. })));
}

#[test]
fn beta_nll_mean_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, d, beta) = (3, 4, 0.5);
    let mu = random(&[batch, d], &mut rng, -1.0, 1.0);
    let lv = random(&[batch, d], &mut rng, -2.0, 2.0);
    let z = random(&[batch, d], &mut rng, -1.0, 1.0);
    let mut g = Graph::new();
    let nodes = ImputationNodes {
        mu: g.variable(mu.clone()),
        log_var: g.variable(lv.clone()),
    };
    let t = g.constant(z.clone());
    let loss = beta_nll_loss(&mut g, nodes, t, beta).unwrap();
    let grads = g.backward(loss).unwrap();
    let gm = grads.get(nodes.mu).unwrap();
    let gl = grads.get(nodes.log_var).unwrap();
    let n = (batch * d) as f64;
    for i in 0..batch * d {
        let (m, l, y) = (mu.data()[i], lv.data()[i], z.data()[i]);
        let s2 = l.exp();
        let w = s2.powf(beta);
        assert!((gm.data()[i] - w * (m - y) / s2 / n).abs() < 1e-14);
        let dl = w * 0.5 * (1.0 - (y - m) * (y - m) / s2) / n;
        assert!((gl.data()[i] - dl).abs() < 1e-14);
    }
}

#[test]
fn beta_nll_matches_finite_differences_with_frozen_weight() {
    let beta = 0.5;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = random(&[2, 5], &mut rng, -1.0, 1.0);
        let lv = random(&[2, 5], &mut rng, -2.0, 2.0);
        let z = random(&[2, 5], &mut rng, -1.0, 1.0);
        let frozen = lv.map(|v| (beta * v).exp());

        let mut g = Graph::new();
        let nodes = ImputationNodes {
            mu: g.variable(mu.clone()),
            log_var: g.variable(lv.clone()),
        };
        let t = g.constant(z.clone());
        let loss = beta_nll_loss(&mut g, nodes, t, beta).unwrap();
        let grads = g.backward(loss).unwrap();

        // Same objective with the SG factor as a literal constant, so finite
        // differences see it as fixed.
        let report = check_gradients(&[mu.clone(), lv.clone()], 1e-5, |g, ids| {
            let w = g.constant(frozen.clone());
            let t = g.constant(z.clone());
            let diff = g.sub(t, ids[0])?;
            let sq = g.square(diff);
            let neg = g.scale(ids[1], -1.0);
            let prec = g.exp(neg);
            let fit = g.mul(sq, prec)?;
            let both = g.add(ids[1], fit)?;
            let half = g.scale(both, 0.5);
            let weighted = g.mul(w, half)?;
            Ok(g.mean(weighted))
        })
        .unwrap();
        assert!(report.max_relative_error() < 1e-4, "seed {seed}");

        // And the frozen-weight analytic gradient equals the SG graph's.
        let mut g2 = Graph::new();
        let m2 = g2.variable(mu.clone());
        let l2 = g2.variable(lv.clone());
        let w = g2.constant(frozen.clone());
        let t2 = g2.constant(z.clone());
        let diff = g2.sub(t2, m2).unwrap();
        let sq = g2.square(diff);
        let neg = g2.scale(l2, -1.0);
        let prec = g2.exp(neg);
        let fit = g2.mul(sq, prec).unwrap();
        let both = g2.add(l2, fit).unwrap();
        let half = g2.scale(both, 0.5);
        let weighted = g2.mul(w, half).unwrap();
        let loss2 = g2.mean(weighted);
        let grads2 = g2.backward(loss2).unwrap();
        for (a, b) in [(nodes.mu, m2), (nodes.log_var, l2)] {
            for (x, y) in grads.get(a).unwrap().data().iter().zip(grads2.get(b).unwrap().data()) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }
}

#[test]
fn gate_fixtures_and_monotonicity() {
    let lv = Tensor::vector(vec![0.0, -2.0, 10.0]).unwrap();
    let g = uncertainty_gate(&lv);
    assert_eq!(g.data()[0], 0.5);
    assert!((g.data()[1] - 0.880_797).abs() < 1e-6);
    assert!((g.data()[2] - 4.54e-5).abs() < 1e-7);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let a: f64 = rng.random_range(-10.0..10.0);
        let b: f64 = rng.random_range(-10.0..10.0);
        if a == b {
            continue;
        }
        let ga = uncertainty_gate(&Tensor::scalar(a)).item();
        let gb = uncertainty_gate(&Tensor::scalar(b)).item();
        assert_eq!(a < b, ga > gb);
    }
}

#[test]
fn fusion_shapes_gate_and_suppression() {
    let cfg = config(16);
    let p = trained_like(&cfg, 9);
    let z = unit_rows(5, 16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = ImputationOutput {
        mu: random(&[5, 16], &mut rng, -0.5, 0.5),
        log_var: random(&[5, 16], &mut rng, -4.0, 4.0),
    };
    let f = fuse_eval(&z, &out, &p, &cfg).unwrap();
    assert_eq!(f.z_fused.shape(), &[5, 16]);
    assert_eq!(f.gate, uncertainty_gate(&out.log_var));

    // Full suppression: the text path sees exactly zero.
    let suppressed = ImputationOutput {
        mu: out.mu.clone(),
        log_var: Tensor::full(&[5, 16], 1e3),
    };
    let f = fuse_eval(&z, &suppressed, &p, &cfg).unwrap();
    let zero = fuse_plain(&z, &Tensor::zeros(&[5, 16]), &p, &cfg).unwrap();
    assert_eq!(f.z_fused, zero.z_fused);
}

#[test]
fn fusion_is_batch_permutation_equivariant() {
    let cfg = config(16);
    let p = trained_like(&cfg, 10);
    let z = unit_rows(4, 16, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = ImputationOutput {
        mu: random(&[4, 16], &mut rng, -0.5, 0.5),
        log_var: random(&[4, 16], &mut rng, -2.0, 2.0),
    };
    let perm = [2, 0, 3, 1];
    let permuted = ImputationOutput {
        mu: out.mu.gather_rows(&perm),
        log_var: out.log_var.gather_rows(&perm),
    };
    let a = fuse_eval(&z, &out, &p, &cfg).unwrap();
    let b = fuse_eval(&z.gather_rows(&perm), &permuted, &p, &cfg).unwrap();
    assert_eq!(a.z_fused.gather_rows(&perm), b.z_fused);
}

#[test]
fn multimodal_fusion_shares_weights() {
    let cfg = config(16);
    let mut p = trained_like(&cfg, 11);
    let z = unit_rows(3, 16, 1);
    let txt = unit_rows(3, 16, 2);

    let f = fuse_multimodal_eval(&z, Some(&txt), &p, &cfg).unwrap();
    assert!(f.gate.data().iter().all(|&g| g == 1.0));
    assert!(matches!(fuse_multimodal_eval(&z, None, &p, &cfg), Err(Error::Contract(_))));

    // Text equal to μ with the gate pinned at one.
    let out = ImputationOutput {
        mu: txt.clone(),
        log_var: Tensor::full(&[3, 16], -1e3),
    };
    assert_eq!(fuse_eval(&z, &out, &p, &cfg).unwrap().z_fused, f.z_fused);

    // Changing a fusion weight moves both paths.
    let before_gated = fuse_eval(&z, &out, &p, &cfg).unwrap().z_fused;
    p.get_mut("fusion.txt_attn.v.w").unwrap().data_mut()[0] += 0.5;
    assert_ne!(fuse_multimodal_eval(&z, Some(&txt), &p, &cfg).unwrap().z_fused, f.z_fused);
    assert_ne!(fuse_eval(&z, &out, &p, &cfg).unwrap().z_fused, before_gated);
}

#[test]
fn classifier_fixtures() {
    let cfg = config(16);
    let mut p = params(&cfg, 1);
    for (name, t) in p.iter_mut() {
        if name.starts_with("cls.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let logits = classify_eval(&unit_rows(4, 16, 1), &p).unwrap();
    assert_eq!(logits.shape(), &[4, 5]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let labels = Tensor::matrix(4, 5, (0..20).map(|i| f64::from(i % 3 == 0)).collect()).unwrap();
    let loss = classification_loss(&logits, &labels).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

    let one = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    assert!((classification_loss(&one, &one).unwrap() - 0.313_262).abs() < 1e-6);
    let confident = Tensor::matrix(1, 2, vec![800.0, -800.0]).unwrap();
    let truth = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    assert_eq!(classification_loss(&confident, &truth).unwrap(), 0.0);
}

#[test]
fn baselines() {
    let cfg = config(16);
    let p = trained_like(&cfg, 12);
    let z = unit_rows(6, 16, 4);
    let mean = Tensor::vector((0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
    let ctx = BaselineContext {
        params: &p,
        cfg: &cfg,
        global_mean: Some(&mean),
    };

    let zero = impute_baseline(BaselineKind::Zero, &z, ctx).unwrap();
    assert!((0..6).all(|r| zero.row(r).iter().all(|&v| v == 0.0)));

    let uniform = impute_baseline(BaselineKind::Uniform, &z, ctx).unwrap();
    assert!((0..6).all(|r| uniform.row(r) == mean.data()));

    let det = impute_baseline(BaselineKind::DeterministicFin, &z, ctx).unwrap();
    assert_eq!(det, impute(&p, &z, &cfg).unwrap().mu);

    assert!(matches!("median".parse::<BaselineKind>(), Err(Error::Config(_))));
    assert_eq!("uniform".parse::<BaselineKind>().unwrap(), BaselineKind::Uniform);
    let no_mean = BaselineContext { global_mean: None, ..ctx };
    assert!(impute_baseline(BaselineKind::Uniform, &z, no_mean).is_err());
}
