use std::fs;

use pfin_core::pfin::{init_params, NormCheck, PfinConfig};
use pfin_core::rng::{stream, Purpose};
use pfin_core::synth::{assign_modalities, dirichlet_partition, generate, GeneratorSpec};
use pfin_core::{ParamSet, Tensor};
use pfin_sim::checkpoint::{self, decode, encode};
use pfin_sim::manifest::{self, Manifest};
use pfin_sim::{dataset, fixtures, SimError};
use proptest::prelude::*;

fn bits(p: &ParamSet) -> Vec<(String, Vec<usize>, Vec<u64>)> {
    p.iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(
            (prop::collection::vec(1usize..4, 1..3), prop::collection::vec(any::<u64>(), 27)),
            1..6,
        )
    ) {
        let mut p = ParamSet::new();
        for (i, (shape, raw)) in tensors.iter().enumerate() {
            let len: usize = shape.iter().product();
            let data = raw[..len].iter().map(|&b| f64::from_bits(b)).collect();
            p.insert(format!("t{i}"), Tensor::new(shape.clone(), data).unwrap()).unwrap();
        }
        let (m, blob) = encode(&p, "x.bin");
        prop_assert_eq!(blob.len(), p.num_scalars() * 8);
        let back = decode(&m, &blob, "x.json".as_ref()).unwrap();
        prop_assert_eq!(bits(&back), bits(&p));
    }
}

#[test]
fn checkpoint_files_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PfinConfig {
        d: 8,
        n_labels: 3,
        ..PfinConfig::default()
    };
    let mut p = init_params(&cfg, &mut stream(1, Purpose::Init)).unwrap();
    p.get_mut("pfin.query").unwrap().data_mut()[0] = -0.0;
    let [json, bin] = checkpoint::save(&p, &dir.path().join("ck")).unwrap();
    assert_eq!(bits(&checkpoint::load(&json).unwrap()), bits(&p));

    let mut blob = fs::read(&bin).unwrap();
    blob.pop();
    fs::write(&bin, &blob).unwrap();
    assert!(matches!(checkpoint::load(&json), Err(SimError::Format { .. })));

    let (mut m, blob) = encode(&p, "ck.bin");
    m.entries[1].offset += 8;
    assert!(decode(&m, &blob, json.as_ref()).is_err());
}

fn spec() -> GeneratorSpec {
    GeneratorSpec {
        d: 8,
        latent_dim: 4,
        n_labels: 5,
        seed: 4,
        ..GeneratorSpec::default()
    }
}

#[test]
fn jsonl_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(&spec(), 50).unwrap();
    let path = dir.path().join("s.jsonl");
    dataset::export_samples(&path, &samples).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 50);
    assert_eq!(dataset::import_samples(&path).unwrap(), samples);

    let mut clients = dirichlet_partition(samples, 4, 0.5, 4).unwrap();
    assign_modalities(&mut clients, 3, 1, 4).unwrap();
    let path = dir.path().join("c.jsonl");
    dataset::export_clients(&path, &clients).unwrap();
    let back = dataset::import_clients(&path).unwrap();
    assert_eq!(back, clients.into_iter().filter(|c| !c.samples.is_empty()).collect::<Vec<_>>());
}

#[test]
fn jsonl_rejects_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let line = |labels: &str, txt: &str, modality: &str| {
        format!(
            r#"{{"modality":"{modality}","z_img":[0.6,0.8],"z_txt":{txt},"labels":{labels},"true_sigma":0.1,"difficulty":0.5}}"#
        )
    };
    for body in [
        line("[0,2]", "null", "unimodal"),
        line("[0,1]", "[1.0,0.0]", "unimodal"),
        line("[0,1]", "null", "multimodal"),
        line("[0,1]", "[1.0]", "multimodal"),
        format!("{}\n{}", line("[0,1]", "null", "unimodal"), line("[0]", "null", "unimodal")),
        "{not json".to_string(),
    ] {
        fs::write(&path, body).unwrap();
        assert!(matches!(dataset::import_samples(&path), Err(SimError::Format { .. })));
    }
}

#[test]
fn fixtures_reproduce_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PfinConfig {
        d: 8,
        n_labels: 5,
        norm_check: NormCheck::Error,
        ..PfinConfig::default()
    };
    let p = init_params(&cfg, &mut stream(2, Purpose::Init)).unwrap();
    let rows: Vec<Vec<f64>> = generate(&spec(), 4).unwrap().into_iter().map(|s| s.z_img).collect();
    let file = fixtures::generate(&p, &cfg, &Tensor::from_rows(&rows).unwrap()).unwrap();
    // Fresh output heads: σ² = 1 and the gate is one half everywhere.
    assert!(file.cases.iter().all(|c| c.sigma_sq.iter().all(|&v| v == 1.0) && c.gate.iter().all(|&g| g == 0.5)));
    let path = dir.path().join("fx.json");
    fixtures::write(&path, &file).unwrap();
    let back = fixtures::read(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(fixtures::max_deviation(&p, &cfg, &back).unwrap(), 0.0);
}

#[test]
fn manifest_detects_changes() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("sub")).unwrap();
    fs::write(dir.path().join("a.txt"), "alpha").unwrap();
    fs::write(dir.path().join("sub/b.txt"), "beta").unwrap();
    let m = Manifest::build(dir.path()).unwrap();
    assert_eq!(m.files.keys().collect::<Vec<_>>(), ["a.txt", "sub/b.txt"]);
    // SHA-256 of "alpha".
    assert_eq!(m.files["a.txt"], "8ed3f6ad685b959ead7022518e1af76cd816f8e8ec7ccdda1ed4018e8f2223f8");
    m.write(dir.path()).unwrap();
    manifest::verify(dir.path()).unwrap();

    fs::write(dir.path().join("sub/b.txt"), "gamma").unwrap();
    assert!(matches!(manifest::verify(dir.path()), Err(SimError::Manifest { .. })));
    fs::write(dir.path().join("sub/b.txt"), "beta").unwrap();
    fs::write(dir.path().join("extra"), "").unwrap();
    assert!(manifest::verify(dir.path()).is_err());
}
