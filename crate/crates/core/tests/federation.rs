use pfin_core::federation::{
    aggregate_params, first_difference, local_train, run_federation, weights_from_stats, Executor, FederationConfig,
    Imputer, Method, RoundRecord, Sequential, Strategy as Aggregation,
};
use pfin_core::pfin::{self, NormCheck, PfinConfig};
use pfin_core::rng::{stream, Purpose};
use pfin_core::synth::{assign_modalities, dirichlet_partition, generate, ClientDataset, GeneratorSpec, Modality};
use pfin_core::{Error, ParamSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn weight_fixture() {
    let w = weights_from_stats(&[100, 300], &[0.1, 0.5], 0.6, 0.2).unwrap();
    // Independent evaluation: the confidence weight is logistic(2).
    let c0 = 1.0 / (1.0 + (-2.0f64).exp());
    assert_eq!(w.w_data, vec![0.25, 0.75]);
    assert!(close(w.w_conf[0], c0, 1e-15) && close(w.w_conf[1], 1.0 - c0, 1e-15));
    assert!(close(w.w_conf[0], 0.880797, 1e-6));
    assert!(close(w.lambda[0], 0.628478, 1e-6) && close(w.lambda[1], 0.371522, 1e-6));
    assert!(close(w.lambda[0], 0.4 * 0.25 + 0.6 * c0, 1e-15));
}

#[test]
fn symmetric_clients_get_equal_weight() {
    let w = weights_from_stats(&[50; 4], &[0.3; 4], 0.6, 0.2).unwrap();
    assert!(w.lambda.iter().all(|&l| close(l, 0.25, 1e-15)));
}

#[test]
fn alpha_zero_is_fedavg() {
    let w = weights_from_stats(&[7, 19, 3], &[0.2, 0.9, 0.01], 0.0, 0.2).unwrap();
    assert_eq!(w.lambda, w.w_data);
}

#[test]
fn huge_uncertainties_do_not_underflow() {
    let w = weights_from_stats(&[1, 1, 1], &[1000.0, 2000.0, 1000.0], 1.0, 0.2).unwrap();
    assert_eq!(w.w_conf, vec![0.5, 0.0, 0.5]);
    assert!(w.lambda.iter().all(|l| l.is_finite()));
}

#[test]
fn invalid_blend_is_rejected() {
    assert!(matches!(weights_from_stats(&[1], &[0.1], 1.5, 0.2), Err(Error::Config(_))));
    assert!(matches!(weights_from_stats(&[1], &[0.1], 0.5, 0.0), Err(Error::Config(_))));
    assert!(matches!(weights_from_stats(&[1], &[f64::NAN], 0.5, 0.2), Err(Error::Contract(_))));
}

fn stats() -> impl Strategy<Value = Vec<(usize, f64)>> {
    prop::collection::vec((1usize..500, 0.0f64..2.0), 1..8)
}

proptest! {
    #[test]
    fn weights_are_distributions((pairs, alpha, t) in (stats(), 0.0f64..=1.0, 0.01f64..10.0)) {
        let (n, s): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
        let w = weights_from_stats(&n, &s, alpha, t).unwrap();
        for v in [&w.w_data, &w.w_conf, &w.lambda] {
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn raising_uncertainty_lowers_own_weight(
        (pairs, k, bump) in stats().prop_flat_map(|p| { let n = p.len(); (Just(p), 0..n, 0.01f64..1.0) })
    ) {
        prop_assume!(pairs.len() >= 2);
        let (n, s): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
        let before = weights_from_stats(&n, &s, 0.6, 0.2).unwrap();
        let mut s2 = s.clone();
        s2[k] += bump;
        let after = weights_from_stats(&n, &s2, 0.6, 0.2).unwrap();
        prop_assert!(after.lambda[k] < before.lambda[k]);
        for j in (0..n.len()).filter(|&j| j != k) {
            prop_assert!(after.lambda[j] >= before.lambda[j] - 1e-15);
        }
    }

    #[test]
    fn temperature_limits(pairs in stats()) {
        let (n, s): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
        let k = n.len() as f64;
        let hot = weights_from_stats(&n, &s, 0.6, 1e6).unwrap();
        prop_assert!(hot.w_conf.iter().all(|&c| (c - 1.0 / k).abs() < 1e-6));

        let cold = weights_from_stats(&n, &s, 0.6, 1e-6).unwrap();
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        // Values within the temperature of the minimum count as ties.
        let ties = s.iter().filter(|&&x| x - min < 1e-4).count();
        prop_assume!(s.iter().all(|&x| x == min || x - min > 1e-4));
        for (c, &x) in cold.w_conf.iter().zip(&s) {
            let expected = if x == min { 1.0 / ties as f64 } else { 0.0 };
            prop_assert!((c - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregation_is_linear(
        values in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..5),
        c in -3.0f64..3.0,
    ) {
        let sets: Vec<ParamSet> = values.iter().map(|v| single("w", v.clone())).collect();
        let scaled: Vec<ParamSet> = sets.iter().map(|p| p.scaled(c)).collect();
        let n: Vec<usize> = (1..=sets.len()).collect();
        let w = weights_from_stats(&n, &vec![0.1; n.len()], 0.6, 0.2).unwrap();
        let lhs = aggregate_params(&scaled.iter().collect::<Vec<_>>(), &w.lambda).unwrap();
        let rhs = aggregate_params(&sets.iter().collect::<Vec<_>>(), &w.lambda).unwrap().scaled(c);
        for (a, b) in lhs.get("w").unwrap().data().iter().zip(rhs.get("w").unwrap().data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

fn single(name: &str, v: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name, Tensor::vector(v).unwrap()).unwrap();
    p
}

#[test]
fn aggregate_examples() {
    let a = single("w", vec![-0.0, 1.5, f64::MIN_POSITIVE]);
    let one = aggregate_params(&[&a], &[1.0]).unwrap();
    assert!(first_difference(&one, &a).is_none());

    let same = aggregate_params(&[&a, &a, &a], &[0.2, 0.3, 0.5]).unwrap();
    for (x, y) in same.get("w").unwrap().data().iter().zip(a.get("w").unwrap().data()) {
        assert!((x - y).abs() <= 1e-15);
    }

    let zero = single("w", vec![0.0]);
    let unit = single("w", vec![1.0]);
    let mix = aggregate_params(&[&zero, &unit], &[0.25, 0.75]).unwrap();
    assert_eq!(mix.get("w").unwrap().data(), &[0.75]);
}

#[test]
fn aggregate_names_mismatched_key() {
    let a = single("w", vec![1.0]);
    let b = single("v", vec![1.0]);
    let c = single("w", vec![1.0, 2.0]);
    match aggregate_params(&[&a, &b], &[0.5, 0.5]) {
        Err(Error::Aggregation { key, .. }) => assert!(key == "w" || key == "v"),
        other => panic!("unexpected {other:?}"),
    }
    match aggregate_params(&[&a, &c], &[0.5, 0.5]) {
        Err(Error::Aggregation { key, .. }) => assert_eq!(key, "w"),
        other => panic!("unexpected {other:?}"),
    }
}

fn pfin_config() -> PfinConfig {
    PfinConfig {
        norm_check: NormCheck::Ignore,
        ..PfinConfig::default()
    }
}

fn clients(seed: u64, n: usize, k: usize, multimodal: usize) -> Vec<ClientDataset> {
    let spec = GeneratorSpec {
        seed,
        ..GeneratorSpec::default()
    };
    let mut c = dirichlet_partition(generate(&spec, n).unwrap(), k, 0.5, seed).unwrap();
    assign_modalities(&mut c, k - multimodal, multimodal, seed).unwrap();
    c
}

fn fed_config(method: Method, seed: u64, clients: &[ClientDataset]) -> FederationConfig {
    let mut cfg = FederationConfig::new(pfin_config(), method, seed);
    cfg.lr = 1e-3;
    let texts = clients
        .iter()
        .filter(|c| c.modality == Modality::Multimodal)
        .flat_map(|c| c.samples.iter().map(|s| s.z_txt.as_deref().unwrap()));
    cfg.global_mean = pfin::global_mean_embedding(texts, cfg.pfin.d).ok();
    cfg
}

fn init(seed: u64) -> ParamSet {
    pfin::init_params(&pfin_config(), &mut stream(seed, Purpose::Init)).unwrap()
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let cs = clients(1, 200, 2, 1);
    let mut cfg = fed_config(Method::PfinFedUq, 1, &cs);
    cfg.epochs = 0;
    let global = init(1);
    for c in &cs {
        let u = local_train(&global, c, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(first_difference(&u.theta, &global).is_none());
        assert_eq!(u.sigma_bar_sq, 1.0);
        assert!(u.epoch_losses.is_empty());
    }
}

#[test]
fn local_training_reduces_loss() {
    let spec = GeneratorSpec {
        seed: 2,
        ..GeneratorSpec::default()
    };
    let client = ClientDataset {
        client_id: 0,
        modality: Modality::Multimodal,
        samples: generate(&spec, 300).unwrap(),
    };
    let mut cfg = fed_config(Method::PfinFedUq, 2, std::slice::from_ref(&client));
    cfg.epochs = 4;
    let u = local_train(&init(2), &client, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(u.epoch_losses.len(), 4);
    assert!(u.epoch_losses[3] < u.epoch_losses[0], "{:?}", u.epoch_losses);
    assert!(u.sigma_bar_sq < 1.0);
}

#[test]
fn unimodal_clients_leave_imputer_untouched() {
    let spec = GeneratorSpec {
        seed: 3,
        ..GeneratorSpec::default()
    };
    let mut samples = generate(&spec, 100).unwrap();
    samples.iter_mut().for_each(|s| s.z_txt = None);
    let client = ClientDataset {
        client_id: 4,
        modality: Modality::Unimodal,
        samples,
    };
    let global = init(3);
    let mut cfg = fed_config(Method::PfinFedAvg, 3, &[]);
    cfg.epochs = 1;
    let u = local_train(&global, &client, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for ((name, a), (_, b)) in u.theta.iter().zip(global.iter()) {
        if pfin::is_pfin_key(name) {
            assert_eq!(a, b, "{name} changed");
        }
    }
    assert!(first_difference(&u.theta, &global).is_some());

    cfg.unimodal_grad_into_pfin = true;
    let u = local_train(&global, &client, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_ne!(u.theta.get("pfin.in_proj.w"), global.get("pfin.in_proj.w"));
}

/// Runs clients last-to-first, then restores input order.
struct Reversed;

impl Executor for Reversed {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        let mut out: Vec<R> = items.iter().rev().map(f).collect();
        out.reverse();
        out
    }
}

fn noop(_: &mut RoundRecord, _: &ParamSet) -> pfin_core::Result<()> {
    Ok(())
}

#[test]
fn no_rounds_returns_initial_model() {
    let cs = clients(4, 200, 3, 1);
    let mut cfg = fed_config(Method::PfinFedUq, 4, &cs);
    cfg.rounds = 0;
    let out = run_federation(&cfg, &cs, &[], init(4), &Sequential, noop).unwrap();
    assert!(out.records.is_empty());
    assert!(first_difference(&out.params, &init(4)).is_none());
}

#[test]
fn fedavg_equals_feduq_with_alpha_zero_and_scheduling_is_irrelevant() {
    let cs = clients(5, 240, 4, 2);
    let val = generate(&GeneratorSpec { seed: 55, ..GeneratorSpec::default() }, 60).unwrap();
    let mut avg = fed_config(Method::PfinFedAvg, 5, &cs);
    avg.rounds = 2;
    avg.epochs = 1;
    let mut uq = avg.clone();
    uq.strategy = Aggregation::FedUqAvg {
        alpha: 0.0,
        temperature: 0.2,
    };
    let a = run_federation(&avg, &cs, &val, init(5), &Sequential, noop).unwrap();
    let b = run_federation(&uq, &cs, &val, init(5), &Reversed, noop).unwrap();
    assert_eq!(first_difference(&a.params, &b.params), None);
    for (ra, rb) in a.records.iter().zip(&b.records) {
        assert_eq!(ra.weights.lambda, rb.weights.lambda);
        assert_eq!(ra.val_auc, rb.val_auc);
    }
}

#[test]
fn records_match_weights_and_skip_empty_clients() {
    let mut cs = clients(6, 200, 3, 1);
    cs.push(ClientDataset {
        client_id: 3,
        modality: Modality::Unimodal,
        samples: Vec::new(),
    });
    let mut cfg = fed_config(Method::PfinFedUq, 6, &cs);
    cfg.rounds = 2;
    cfg.epochs = 1;
    let mut seen = 0;
    let out = run_federation(&cfg, &cs, &[], init(6), &Sequential, |r, _| {
        seen += 1;
        r.wall_time_secs = Some(0.0);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 2);
    for (t, r) in out.records.iter().enumerate() {
        assert_eq!(r.round, t + 1);
        assert_eq!(r.clients.len(), 3);
        let lambda: Vec<f64> = r.clients.iter().map(|c| c.lambda).collect();
        assert_eq!(lambda, r.weights.lambda);
        assert_eq!(r.wall_time_secs, Some(0.0));
        assert!(r.val_auc.is_none());
    }
}

#[test]
fn all_unimodal_federation_is_rejected() {
    let mut cs = clients(7, 100, 2, 1);
    for c in &mut cs {
        c.modality = Modality::Unimodal;
    }
    let cfg = fed_config(Method::Zero, 7, &clients(7, 100, 2, 1));
    let r = run_federation(&cfg, &cs, &[], init(7), &Sequential, noop);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn client_errors_carry_round_context() {
    let mut cs = clients(8, 100, 2, 1);
    // A multimodal client missing its text violates the local-training contract.
    let m = cs.iter_mut().find(|c| c.modality == Modality::Multimodal).unwrap();
    m.samples[0].z_txt = None;
    let cfg = fed_config(Method::Zero, 8, &clients(8, 100, 2, 1));
    match run_federation(&cfg, &cs, &[], init(8), &Sequential, noop) {
        Err(Error::Round { round: 1, source }) => assert!(matches!(*source, Error::Contract(_))),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unimodal_uncertainty_falls_over_rounds() {
    let cs = clients(9, 1000, 10, 2);
    let mut cfg = fed_config(Method::PfinFedUq, 9, &cs);
    cfg.rounds = 20;
    cfg.epochs = 1;
    let out = run_federation(&cfg, &cs, &[], init(9), &Sequential, noop).unwrap();
    let first = out.records[0].mean_sigma(Modality::Unimodal).unwrap();
    let last = out.records[19].mean_sigma(Modality::Unimodal).unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!(matches!("fedprox".parse::<Method>(), Err(Error::Config(_))));
    assert_eq!(Method::PfinFedUq.strategy(0.6, 0.2), Aggregation::FedUqAvg { alpha: 0.6, temperature: 0.2 });
    assert_eq!(Method::FinFedAvg.imputer(), Imputer::DeterministicFin);
}
