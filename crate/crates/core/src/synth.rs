//! Synthetic paired image/text features with known cross-modal noise, and
//! non-IID federated partitioning.
//!
//! A latent `u ~ N(0, I_m)` drives both modalities:
//!
//! * `z_img = normalize(A·u)`
//! * `z_txt = normalize(B·u + s·ε)`, `ε ~ N(0, I_d)`, where the noise scale
//!   `s = s_min + difficulty·(s_max − s_min)` grows with a per-sample
//!   difficulty `sigmoid(κ·⟨v, u⟩)` for a fixed unit direction `v`
//! * `labels_c ~ Bernoulli(sigmoid((W_y·u)_c))`
//!
//! The generating noise scale is kept on each [`Sample`] as `true_sigma`.
//! It is ground truth for calibration metrics only; no model code reads it.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::special::sigmoid;

const NORM_EPS: f64 = 1e-12;

/// How the latent is mixed into each modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixing {
    /// Seeded Gaussian matrices with entries `N(0, 1/m)`.
    Gaussian,
    /// `A = B = I`; requires `m == d`.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub d: usize,
    pub latent_dim: usize,
    pub n_labels: usize,
    pub noise_floor: f64,
    pub noise_ceiling: f64,
    pub mixing: Mixing,
    /// Slope κ of the difficulty logistic.
    pub difficulty_scale: f64,
    /// Scale of the label logits `W_y·u`.
    pub label_scale: f64,
    /// Norm of the image-feature offset applied to unimodal clients by
    /// [`Generator::apply_domain_shift`]; 0 disables it.
    pub unimodal_shift: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            d: 32,
            latent_dim: 16,
            n_labels: 14,
            noise_floor: 0.1,
            noise_ceiling: 1.5,
            mixing: Mixing::Gaussian,
            difficulty_scale: 2.0,
            label_scale: 3.0,
            unimodal_shift: 0.0,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.d < 2 || self.latent_dim == 0 || self.n_labels == 0 {
            return fail(alloc::format!(
                "generator dimensions must be positive with d >= 2 (d={}, m={}, C={})",
                self.d,
                self.latent_dim,
                self.n_labels
            ));
        }
        if self.latent_dim > self.d {
            return fail(alloc::format!("latent_dim {} exceeds d {}", self.latent_dim, self.d));
        }
        if self.mixing == Mixing::Identity && self.latent_dim != self.d {
            return fail(alloc::format!("identity mixing needs latent_dim == d, got {} vs {}", self.latent_dim, self.d));
        }
        if !(self.noise_floor >= 0.0 && self.noise_ceiling >= self.noise_floor && self.noise_ceiling.is_finite()) {
            return fail(alloc::format!(
                "noise bounds must satisfy 0 <= floor <= ceiling, got [{}, {}]",
                self.noise_floor,
                self.noise_ceiling
            ));
        }
        if !(self.difficulty_scale.is_finite() && self.label_scale.is_finite() && self.unimodal_shift >= 0.0) {
            return fail(alloc::format!("non-finite or negative generator scale"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub z_img: Vec<f64>,
    pub z_txt: Option<Vec<f64>>,
    pub labels: Vec<bool>,
    /// Per-dimension noise scale used to generate `z_txt`.
    pub true_sigma: f64,
    pub difficulty: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Multimodal,
    Unimodal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub modality: Modality,
    pub samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn n_k(&self) -> usize {
        self.samples.len()
    }
}

/// Row-major `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
        let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Mat { rows, cols, data }
    }

    fn identity(n: usize) -> Mat {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Mat { rows: n, cols: n, data }
    }

    fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.cols).map(|row| row.iter().zip(u).map(|(a, b)| a * b).sum()).collect()
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Materialized generator: the seeded mixing matrices for one [`GeneratorSpec`].
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    img_mix: Mat,
    txt_mix: Mat,
    label_mix: Mat,
    difficulty_dir: Vec<f64>,
    shift_dir: Vec<f64>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let (d, m) = (spec.d, spec.latent_dim);
        let mut rng = stream(spec.seed, Purpose::Mixing);
        let std = 1.0 / libm::sqrt(m as f64);
        let (img_mix, txt_mix) = match spec.mixing {
            Mixing::Gaussian => (Mat::gaussian(d, m, std, &mut rng), Mat::gaussian(d, m, std, &mut rng)),
            Mixing::Identity => (Mat::identity(d), Mat::identity(d)),
        };
        let label_mix = Mat::gaussian(spec.n_labels, m, spec.label_scale * std, &mut rng);
        let difficulty_dir = normalize((0..m).map(|_| rng.sample(StandardNormal)).collect());
        let shift_dir = normalize((0..d).map(|_| rng.sample(StandardNormal)).collect());
        Ok(Generator {
            spec,
            img_mix,
            txt_mix,
            label_mix,
            difficulty_dir,
            shift_dir,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn difficulty(&self, latent: &[f64]) -> f64 {
        let proj: f64 = self.difficulty_dir.iter().zip(latent).map(|(a, b)| a * b).sum();
        sigmoid(self.spec.difficulty_scale * proj)
    }

    pub fn noise_scale(&self, difficulty: f64) -> f64 {
        self.spec.noise_floor + difficulty * (self.spec.noise_ceiling - self.spec.noise_floor)
    }

    /// Noise-free text feature `normalize(B·u)`.
    pub fn clean_text(&self, latent: &[f64]) -> Vec<f64> {
        normalize(self.txt_mix.apply(latent))
    }

    /// Text feature for a given latent and noise draw.
    pub fn text_feature(&self, latent: &[f64], sigma: f64, noise: &[f64]) -> Vec<f64> {
        let mut t = self.txt_mix.apply(latent);
        t.iter_mut().zip(noise).for_each(|(x, e)| *x += sigma * e);
        normalize(t)
    }

    pub fn image_feature(&self, latent: &[f64]) -> Vec<f64> {
        normalize(self.img_mix.apply(latent))
    }

    /// Draws `n` samples from the spec's sample stream.
    pub fn generate(&self, n: usize) -> Result<Vec<Sample>> {
        Ok(self.generate_with_latents(n)?.into_iter().map(|(s, _)| s).collect())
    }

    /// Like [`Generator::generate`], also returning each sample's latent `u`.
    pub fn generate_with_latents(&self, n: usize) -> Result<Vec<(Sample, Vec<f64>)>> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = stream(self.spec.seed, Purpose::Samples);
        let (d, m) = (self.spec.d, self.spec.latent_dim);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let difficulty = self.difficulty(&u);
            let sigma = self.noise_scale(difficulty);
            let labels = self
                .label_mix
                .apply(&u)
                .into_iter()
                .map(|logit| rng.random_bool(sigmoid(logit)))
                .collect();
            let sample = Sample {
                z_img: self.image_feature(&u),
                z_txt: Some(self.text_feature(&u, sigma, &eps)),
                labels,
                true_sigma: sigma,
                difficulty,
            };
            out.push((sample, u));
        }
        Ok(out)
    }

    /// Offsets every image feature of `dataset` along a fixed seeded
    /// direction by `unimodal_shift`, then renormalizes.
    pub fn apply_domain_shift(&self, dataset: &mut ClientDataset) {
        let shift = self.spec.unimodal_shift;
        if shift == 0.0 {
            return;
        }
        for s in &mut dataset.samples {
            let v: Vec<f64> = s.z_img.iter().zip(&self.shift_dir).map(|(x, e)| x + shift * e).collect();
            s.z_img = normalize(v);
        }
    }
}

/// Convenience for `Generator::new(spec)?.generate(n)`.
pub fn generate(spec: &GeneratorSpec, n: usize) -> Result<Vec<Sample>> {
    Generator::new(spec.clone())?.generate(n)
}

/// Index of the first positive label, or `n_labels` when there is none.
pub fn pseudo_class(sample: &Sample) -> usize {
    sample.labels.iter().position(|&l| l).unwrap_or(sample.labels.len())
}

/// Splits samples across `k` clients with label skew.
///
/// Each pseudo-class draws client proportions from `Dir(alpha·1_k)` and each
/// of its samples is sent to a client drawn from those proportions. Clients
/// left empty receive one random sample from the currently largest client.
/// All returned datasets are tagged multimodal.
pub fn dirichlet_partition(samples: Vec<Sample>, k: usize, alpha: f64, seed: u64) -> Result<Vec<ClientDataset>> {
    if k < 2 {
        return Err(Error::Config(alloc::format!("need at least 2 clients, got {k}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(alloc::format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    if k > samples.len() {
        return Err(Error::InfeasiblePartition {
            clients: k,
            samples: samples.len(),
        });
    }
    let mut rng = stream(seed, Purpose::Partition);
    let n_classes = samples.iter().map(|s| s.labels.len()).max().unwrap_or(0) + 1;
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(alloc::format!("{e}")))?;
    let proportions: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p.iter_mut().for_each(|x| *x /= total);
            } else {
                // Every gamma draw underflowed: all mass on one client.
                p.iter_mut().for_each(|x| *x = 0.0);
                p[rng.random_range(0..k)] = 1.0;
            }
            p
        })
        .collect();

    let mut buckets: Vec<Vec<Sample>> = (0..k).map(|_| Vec::new()).collect();
    for s in samples {
        let p = &proportions[pseudo_class(&s)];
        let r: f64 = rng.random();
        let mut acc = 0.0;
        let mut target = k - 1;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if r < acc {
                target = i;
                break;
            }
        }
        buckets[target].push(s);
    }

    while let Some(empty) = buckets.iter().position(Vec::is_empty) {
        let largest = (0..k).max_by_key(|&i| (buckets[i].len(), core::cmp::Reverse(i))).expect("k >= 2");
        let pick = rng.random_range(0..buckets[largest].len());
        let moved = buckets[largest].swap_remove(pick);
        buckets[empty].push(moved);
    }

    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(client_id, samples)| ClientDataset {
            client_id,
            modality: Modality::Multimodal,
            samples,
        })
        .collect())
}

/// Tags `ratio_multimodal` clients (chosen by a seeded shuffle) as
/// multimodal; the rest lose their text features.
pub fn assign_modalities(
    datasets: &mut [ClientDataset],
    ratio_unimodal: usize,
    ratio_multimodal: usize,
    seed: u64,
) -> Result<()> {
    let k = datasets.len();
    if ratio_unimodal + ratio_multimodal != k {
        return Err(Error::Config(alloc::format!(
            "modality ratio {ratio_unimodal}:{ratio_multimodal} does not sum to {k} clients"
        )));
    }
    if ratio_multimodal == 0 {
        return Err(Error::Config(
            "at least one multimodal client is required to train the imputation network".into(),
        ));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut stream(seed, Purpose::Modality));
    for (rank, &idx) in order.iter().enumerate() {
        let ds = &mut datasets[idx];
        if rank < ratio_multimodal {
            ds.modality = Modality::Multimodal;
        } else {
            ds.modality = Modality::Unimodal;
            ds.samples.iter_mut().for_each(|s| s.z_txt = None);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        libm::sqrt(v.iter().map(|x| x * x).sum())
    }

    #[test]
    fn features_are_unit_norm() {
        let samples = generate(&GeneratorSpec::default(), 500).unwrap();
        for s in &samples {
            assert!((norm(&s.z_img) - 1.0).abs() < 1e-9);
            assert!((norm(s.z_txt.as_ref().unwrap()) - 1.0).abs() < 1e-9);
            assert_eq!(s.labels.len(), 14);
        }
    }

    #[test]
    fn zero_noise_text_is_normalized_mix() {
        let spec = GeneratorSpec {
            noise_floor: 0.0,
            noise_ceiling: 0.0,
            ..GeneratorSpec::default()
        };
        let gen = Generator::new(spec).unwrap();
        for (s, u) in gen.generate_with_latents(50).unwrap() {
            assert_eq!(s.z_txt.unwrap(), gen.clean_text(&u));
            assert_eq!(s.true_sigma, 0.0);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = GeneratorSpec {
            seed: 11,
            ..GeneratorSpec::default()
        };
        assert_eq!(generate(&spec, 64).unwrap(), generate(&spec, 64).unwrap());
        let other = GeneratorSpec { seed: 12, ..spec };
        assert_ne!(generate(&other, 64).unwrap()[0], generate(&GeneratorSpec { seed: 11, ..GeneratorSpec::default() }, 64).unwrap()[0]);
    }

    #[test]
    fn empty_request_is_an_error() {
        assert_eq!(generate(&GeneratorSpec::default(), 0), Err(Error::EmptyDataset));
    }

    #[test]
    fn noise_scale_is_monotone_in_difficulty() {
        let mut samples = generate(&GeneratorSpec::default(), 400).unwrap();
        samples.sort_by(|a, b| a.difficulty.total_cmp(&b.difficulty));
        for w in samples.windows(2) {
            assert!(w[0].true_sigma <= w[1].true_sigma);
        }
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let samples = generate(&GeneratorSpec::default(), 300).unwrap();
        for (k, alpha) in [(2, 0.1), (5, 0.5), (10, 0.5), (10, 100.0)] {
            let parts = dirichlet_partition(samples.clone(), k, alpha, 3).unwrap();
            assert_eq!(parts.len(), k);
            assert!(parts.iter().all(|p| p.n_k() >= 1));
            let mut seen: Vec<&Sample> = parts.iter().flat_map(|p| &p.samples).collect();
            assert_eq!(seen.len(), samples.len());
            for s in &samples {
                let pos = seen.iter().position(|x| *x == s).expect("sample missing");
                seen.swap_remove(pos);
            }
        }
    }

    #[test]
    fn partition_rejects_more_clients_than_samples() {
        let samples = generate(&GeneratorSpec::default(), 3).unwrap();
        assert_eq!(
            dirichlet_partition(samples, 4, 0.5, 0),
            Err(Error::InfeasiblePartition { clients: 4, samples: 3 })
        );
    }

    #[test]
    fn tiny_alpha_still_fills_every_client() {
        let samples = generate(&GeneratorSpec::default(), 40).unwrap();
        let parts = dirichlet_partition(samples, 10, 1e-3, 9).unwrap();
        assert!(parts.iter().all(|p| p.n_k() >= 1));
    }

    #[test]
    fn modality_assignment() {
        let samples = generate(&GeneratorSpec::default(), 200).unwrap();
        let mut parts = dirichlet_partition(samples, 10, 0.5, 1).unwrap();
        assign_modalities(&mut parts, 8, 2, 1).unwrap();
        let multi: Vec<_> = parts.iter().filter(|p| p.modality == Modality::Multimodal).collect();
        assert_eq!(multi.len(), 2);
        for p in &parts {
            let has_text = p.samples.iter().all(|s| s.z_txt.is_some());
            let no_text = p.samples.iter().all(|s| s.z_txt.is_none());
            match p.modality {
                Modality::Multimodal => assert!(has_text),
                Modality::Unimodal => assert!(no_text),
            }
            assert!(p.samples.iter().all(|s| s.true_sigma > 0.0));
        }

        let mut all_multi = parts.clone();
        assign_modalities(&mut all_multi, 0, 10, 1).unwrap();
        assert!(all_multi.iter().all(|p| p.modality == Modality::Multimodal));

        assert!(matches!(assign_modalities(&mut parts, 10, 0, 1), Err(Error::Config(_))));
        assert!(matches!(assign_modalities(&mut parts, 5, 4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn domain_shift_keeps_unit_norm() {
        let gen = Generator::new(GeneratorSpec {
            unimodal_shift: 0.5,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let mut ds = ClientDataset {
            client_id: 0,
            modality: Modality::Unimodal,
            samples: gen.generate(20).unwrap(),
        };
        let before = ds.clone();
        gen.apply_domain_shift(&mut ds);
        assert_ne!(ds, before);
        assert!(ds.samples.iter().all(|s| (norm(&s.z_img) - 1.0).abs() < 1e-9));
    }
}
