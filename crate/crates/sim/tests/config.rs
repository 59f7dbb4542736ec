use pfin_core::federation::{Method, Strategy as Aggregation};
use pfin_sim::config::{EvalTextKind, MixingKind, SigmaWindowKind};
use pfin_sim::{ExperimentConfig, Ratio, SimError};
use proptest::prelude::*;

#[test]
fn defaults_follow_the_published_protocol() {
    let c = ExperimentConfig::default();
    assert_eq!((c.clients, c.ratio, c.rounds, c.local_epochs, c.batch_size), (10, Ratio::new(8, 2), 20, 4, 32));
    assert_eq!((c.lr, c.alpha, c.temperature, c.beta, c.alpha_dir), (1e-4, 0.6, 0.2, 0.5, 0.5));
    assert_eq!((c.d, c.latent_dim, c.n_labels, c.n_layers, c.n_heads, c.fusion_heads), (32, 16, 14, 2, 4, 1));
    c.validate().unwrap();
    let fed = c.federation_config(None);
    assert_eq!(fed.strategy, Aggregation::FedUqAvg { alpha: 0.6, temperature: 0.2 });
    assert_eq!((fed.rounds, fed.epochs, fed.batch_size, fed.lr), (20, 4, 32, 1e-4));
}

#[test]
fn toml_file_with_aliases() {
    let c = ExperimentConfig::from_toml("K = 10\nT = 0.5\nratio = \"6:4\"\nmethod = \"fin_fedavg\"\n").unwrap();
    assert_eq!((c.clients, c.temperature, c.ratio, c.method), (10, 0.5, Ratio::new(6, 4), Method::FinFedAvg));
    assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(SimError::Validation(_))));
    assert!(ExperimentConfig::from_toml("method = \"fedprox\"").is_err());
}

#[test]
fn overrides() {
    let mut c = ExperimentConfig::default();
    c.apply_overrides(&["--ratio=4:6", "method=zero", "--lr=1e-3", "alpha=1", "T=0.3", "--output_dir=out/x"])
        .unwrap();
    assert_eq!(c.ratio, Ratio::new(4, 6));
    assert_eq!(c.method, Method::Zero);
    assert_eq!((c.lr, c.alpha, c.temperature), (1e-3, 1.0, 0.3));
    assert_eq!(c.output_dir.to_str(), Some("out/x"));
    c.apply_override("eval_text=observed").unwrap();
    assert_eq!(c.eval_text, EvalTextKind::Observed);
    for bad in ["nokey=1", "rounds=-1", "rounds=abc", "lr", "unimodal_grad_into_pfin=maybe"] {
        assert!(matches!(c.apply_override(bad), Err(SimError::Validation(_))), "{bad}");
    }
}

#[test]
fn validation_names_the_problem() {
    let bad = |edit: fn(&mut ExperimentConfig)| {
        let mut c = ExperimentConfig::default();
        edit(&mut c);
        match c.validate() {
            Err(e @ SimError::Validation(_)) => assert_eq!(e.class(), "ValidationError"),
            other => panic!("expected validation error, got {other:?}"),
        }
    };
    bad(|c| c.ratio = Ratio::new(9, 2));
    bad(|c| c.ratio = Ratio::new(10, 0));
    bad(|c| c.alpha = 1.5);
    bad(|c| c.temperature = 0.0);
    bad(|c| c.n_heads = 5);
    bad(|c| c.noise_ceiling = c.noise_floor / 2.0);
    bad(|c| c.test_fraction = 0.95);
    bad(|c| c.n_samples = 12);
    bad(|c| c.seed = u64::MAX);
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (0u64..i64::MAX as u64, 1usize..12, 1usize..12, 0usize..50, 0usize..8),
        (1e-6f64..1.0, 0.0f64..=1.0, 1e-3f64..10.0, 0.0f64..=1.0, 1e-3f64..100.0),
        (0usize..5, any::<bool>(), any::<bool>(), any::<bool>(), 0usize..6),
        ("[a-z0-9_/]{1,12}", 0.0f64..1.0, 0.0f64..2.0),
    )
        .prop_map(|(ints, floats, kinds, rest)| {
            let (seed, u, m, rounds, epochs) = ints;
            let (lr, alpha, temperature, beta, alpha_dir) = floats;
            let (method, mixing, window, eval, every) = kinds;
            let (dir, floor, extra) = rest;
            ExperimentConfig {
                seed,
                clients: u + m,
                ratio: Ratio::new(u, m),
                rounds,
                local_epochs: epochs,
                lr,
                alpha,
                temperature,
                beta,
                alpha_dir,
                method: Method::ALL[method],
                mixing: if mixing { MixingKind::Identity } else { MixingKind::Gaussian },
                sigma_window: if window { SigmaWindowKind::RunningMean } else { SigmaWindowKind::PostPass },
                eval_text: if eval { EvalTextKind::Observed } else { EvalTextKind::Imputed },
                checkpoint_every: every,
                output_dir: dir.into(),
                noise_floor: floor,
                noise_ceiling: floor + extra,
                ..ExperimentConfig::default()
            }
        })
}

proptest! {
    #[test]
    fn config_round_trips(c in arb_config()) {
        let text = c.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }
}
