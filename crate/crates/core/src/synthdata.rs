//! Feature-noise patch data.
//!
//! Each sample has `P` patches: one carries a label feature `v_{y,k}`, one
//! carries strong Gaussian noise plus a faint copy `α v_{±1,1}` of a class
//! leading feature, and the rest carry weak Gaussian noise. Noise is drawn from
//! `N(0, σ² Λ)` with `Λ` the projector onto the complement of the feature span.
//!
//! Random decisions are drawn from a ChaCha8 stream in a fixed order per
//! sample: label, feature index, feature patch, dominant patch, feature-noise
//! sign, then the noise patches in increasing patch index.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A label, or the output sign a filter votes for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub const BOTH: [Sign; 2] = [Sign::Pos, Sign::Neg];

    pub fn value(self) -> f64 {
        match self {
            Sign::Pos => 1.0,
            Sign::Neg => -1.0,
        }
    }

    pub fn slot(self) -> usize {
        match self {
            Sign::Pos => 0,
            Sign::Neg => 1,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Pos => Sign::Neg,
            Sign::Neg => Sign::Pos,
        }
    }

    pub fn from_value(v: f64) -> Sign {
        if v >= 0.0 {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }
}

/// Frequency tier of a feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tier {
    Common,
    Rare,
    Extreme,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Common, Tier::Rare, Tier::Extreme];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Common => "common",
            Tier::Rare => "rare",
            Tier::Extreme => "extreme",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Tier::Common => 0,
            Tier::Rare => 1,
            Tier::Extreme => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Tier> {
        Tier::ALL.get(code as usize).copied()
    }
}

impl std::str::FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Tier> {
        match s {
            "common" => Ok(Tier::Common),
            "rare" => Ok(Tier::Rare),
            "extreme" => Ok(Tier::Extreme),
            other => Err(Error::Config(format!("unknown tier `{other}`"))),
        }
    }
}

/// Parameters of the generative model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dim: usize,
    pub n_train: usize,
    pub patches: usize,
    /// Frequency of each feature index, shared by both classes.
    pub freqs: Vec<f64>,
    pub tiers: Vec<Tier>,
    pub sigma_dominant: f64,
    pub sigma_background: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl DataConfig {
    /// Three features per class (common, rare, extremely rare) on 3 patches.
    pub fn three_tier(seed: u64) -> Self {
        DataConfig {
            dim: 2000,
            n_train: 300,
            patches: 3,
            freqs: vec![0.8, 0.15, 0.05],
            tiers: vec![Tier::Common, Tier::Rare, Tier::Extreme],
            sigma_dominant: 0.25,
            sigma_background: 0.15,
            feature_noise: 0.005,
            seed,
        }
    }

    pub fn features_per_class(&self) -> usize {
        self.freqs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_train == 0 {
            return bad("n_train must be positive".into());
        }
        if self.patches < 2 || self.patches > crate::augment::MAX_PATCHES {
            return bad(format!(
                "patches must lie in 2..={}, got {}",
                crate::augment::MAX_PATCHES,
                self.patches
            ));
        }
        let k = self.freqs.len();
        if k == 0 {
            return bad("at least one feature per class is required".into());
        }
        if self.tiers.len() != k {
            return bad(format!("{} tiers for {} frequencies", self.tiers.len(), k));
        }
        if self.dim < 2 * k {
            return bad(format!("dim {} is below 2K = {}", self.dim, 2 * k));
        }
        if self.freqs.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad("frequencies must lie in (0, 1]".into());
        }
        let total: f64 = self.freqs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("frequencies sum to {total}, not 1"));
        }
        if self.freqs.windows(2).any(|w| w[1] > w[0]) {
            return bad("frequencies must be non-increasing".into());
        }
        if !(self.sigma_background > 0.0 && self.sigma_background < self.sigma_dominant) {
            return bad("need 0 < sigma_background < sigma_dominant".into());
        }
        if !(self.feature_noise > 0.0 && self.feature_noise < 1.0) {
            return bad("feature_noise must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Inverse CDF of the feature frequencies on half-open bins `[c_{k-1}, c_k)`.
    pub fn feature_for_uniform(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, &r) in self.freqs.iter().enumerate() {
            acc += r;
            if u < acc {
                return k;
            }
        }
        self.freqs.len() - 1
    }

    /// Total frequency of the features in `tier`.
    pub fn tier_mass(&self, tier: Tier) -> f64 {
        self.freqs
            .iter()
            .zip(&self.tiers)
            .filter(|(_, &t)| t == tier)
            .map(|(r, _)| r)
            .sum()
    }
}

/// A feature vector's identity: its class and index within the class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    pub class: Sign,
    pub k: usize,
}

/// Orthonormal features, realized as the first `2K` standard basis vectors:
/// `v_{+1,k} = e_k` and `v_{-1,k} = e_{K+k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    per_class: usize,
}

impl FeatureBank {
    pub fn new(dim: usize, per_class: usize) -> Result<Self> {
        if per_class == 0 || dim < 2 * per_class {
            return Err(Error::Config(format!(
                "cannot place {} features in dimension {dim}",
                2 * per_class
            )));
        }
        Ok(FeatureBank { dim, per_class })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn len(&self) -> usize {
        2 * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.per_class == 0
    }

    /// Position of a feature in the flat `(s, k)` ordering; also its coordinate.
    pub fn slot(&self, id: FeatureId) -> usize {
        id.class.slot() * self.per_class + id.k
    }

    pub fn id(&self, slot: usize) -> FeatureId {
        FeatureId {
            class: if slot < self.per_class { Sign::Pos } else { Sign::Neg },
            k: slot % self.per_class,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = FeatureId> + '_ {
        (0..self.len()).map(|slot| self.id(slot))
    }

    pub fn coordinate(&self, id: FeatureId) -> usize {
        self.slot(id)
    }

    pub fn vector(&self, id: FeatureId) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        v[self.coordinate(id)] = 1.0;
        v
    }

    /// Applies `Λ = I - Σ v vᵀ` in place.
    pub fn project_out(&self, x: &mut [f64]) {
        for slot in 0..self.len() {
            let c = self.coordinate(self.id(slot));
            let along = x[c];
            x[c] -= along;
        }
    }

    pub fn inner(&self, id: FeatureId, x: &[f64]) -> f64 {
        x[self.coordinate(id)]
    }
}

/// Draws `ξ ~ N(0, σ² Λ)` by projecting an isotropic Gaussian.
pub fn sample_lambda_noise<R: Rng + ?Sized>(bank: &FeatureBank, sigma: f64, rng: &mut R) -> Vec<f64> {
    let mut xi = vec![0.0; bank.dim()];
    fill_lambda_noise(bank, sigma, rng, &mut xi);
    xi
}

fn fill_lambda_noise<R: Rng + ?Sized>(bank: &FeatureBank, sigma: f64, rng: &mut R, out: &mut [f64]) {
    for x in out.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *x = sigma * g;
    }
    bank.project_out(out);
}

/// One sample with its generative metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Patches stored patch-major: patch `p` occupies `[p*d, (p+1)*d)`.
    pub patches: Vec<f64>,
    pub label: Sign,
    pub feature_patch: usize,
    pub dominant_patch: usize,
    pub k: usize,
    pub noise_sign: Sign,
    /// Raw Gaussian noise per patch, zero on the feature patch.
    pub noise: Vec<f64>,
    dim: usize,
}

impl Sample {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len() / self.dim
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.patches[p * self.dim..(p + 1) * self.dim]
    }

    pub fn noise_patch(&self, p: usize) -> &[f64] {
        &self.noise[p * self.dim..(p + 1) * self.dim]
    }

    pub fn feature(&self) -> FeatureId {
        FeatureId {
            class: self.label,
            k: self.k,
        }
    }
}

/// Draws one sample following the documented decision order.
pub fn sample_test_point<R: Rng + ?Sized>(bank: &FeatureBank, config: &DataConfig, rng: &mut R) -> Sample {
    let d = bank.dim();
    let num_patches = config.patches;
    let label = if rng.random::<f64>() < 0.5 { Sign::Pos } else { Sign::Neg };
    let k = config.feature_for_uniform(rng.random::<f64>());
    let feature_patch = rng.random_range(0..num_patches);
    let mut dominant_patch = rng.random_range(0..num_patches - 1);
    if dominant_patch >= feature_patch {
        dominant_patch += 1;
    }
    let noise_sign = if rng.random::<f64>() < 0.5 { Sign::Pos } else { Sign::Neg };

    let mut noise = vec![0.0; num_patches * d];
    for p in (0..num_patches).filter(|&p| p != feature_patch) {
        let sigma = if p == dominant_patch {
            config.sigma_dominant
        } else {
            config.sigma_background
        };
        fill_lambda_noise(bank, sigma, rng, &mut noise[p * d..(p + 1) * d]);
    }

    let mut patches = noise.clone();
    patches[feature_patch * d + bank.coordinate(FeatureId { class: label, k })] = 1.0;
    patches[dominant_patch * d + bank.coordinate(FeatureId { class: noise_sign, k: 0 })] += config.feature_noise;

    Sample {
        patches,
        label,
        feature_patch,
        dominant_patch,
        k,
        noise_sign,
        noise,
        dim: d,
    }
}

/// Membership lists used throughout the analysis.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct IndexSets {
    /// Samples of each label, indexed by `Sign::slot`.
    pub by_label: [Vec<usize>; 2],
    /// Samples carrying each feature, indexed by `FeatureBank::slot`.
    pub by_feature: Vec<Vec<usize>>,
    /// Samples whose dominant patch carries `α v_{s,1}`, indexed by `Sign::slot`.
    pub by_noise_sign: [Vec<usize>; 2],
}

/// A realized training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub bank: FeatureBank,
    pub config: DataConfig,
    pub index: IndexSets,
}

impl Dataset {
    pub fn from_samples(config: DataConfig, bank: FeatureBank, samples: Vec<Sample>) -> Self {
        let mut index = IndexSets {
            by_feature: vec![Vec::new(); bank.len()],
            ..Default::default()
        };
        for (i, s) in samples.iter().enumerate() {
            index.by_label[s.label.slot()].push(i);
            index.by_feature[bank.slot(s.feature())].push(i);
            index.by_noise_sign[s.noise_sign.slot()].push(i);
        }
        Dataset {
            samples,
            bank,
            config,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn num_patches(&self) -> usize {
        self.config.patches
    }

    pub fn class_count(&self, s: Sign) -> usize {
        self.index.by_label[s.slot()].len()
    }

    pub fn feature_count(&self, id: FeatureId) -> usize {
        self.index.by_feature[self.bank.slot(id)].len()
    }

    /// Writes the binary bundle described in the crate documentation.
    pub fn export<W: Write>(&self, mut out: W) -> Result<()> {
        let c = &self.config;
        out.write_all(DATASET_MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [c.dim, c.n_train, c.patches, c.freqs.len()] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&c.seed.to_le_bytes())?;
        for v in [c.sigma_dominant, c.sigma_background, c.feature_noise] {
            out.write_all(&v.to_le_bytes())?;
        }
        for (r, t) in c.freqs.iter().zip(&c.tiers) {
            out.write_all(&r.to_le_bytes())?;
            out.write_all(&[t.code()])?;
        }
        for s in &self.samples {
            out.write_all(&[sign_byte(s.label)])?;
            for v in [s.k, s.feature_patch, s.dominant_patch] {
                out.write_all(&(v as u32).to_le_bytes())?;
            }
            out.write_all(&[sign_byte(s.noise_sign)])?;
        }
        for s in &self.samples {
            for x in &s.patches {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a bundle written by [`Dataset::export`]; noise is recovered as `x - α v`.
    pub fn import<R: Read>(mut input: R) -> Result<Self> {
        let fail = |detail: &str| Error::Format {
            kind: "dataset",
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(fail("bad magic"));
        }
        if read_u32(&mut input)? != FORMAT_VERSION {
            return Err(fail("unsupported version"));
        }
        let dim = read_u64(&mut input)? as usize;
        let n = read_u64(&mut input)? as usize;
        let patches = read_u64(&mut input)? as usize;
        let per_class = read_u64(&mut input)? as usize;
        let seed = read_u64(&mut input)?;
        let sigma_dominant = read_f64(&mut input)?;
        let sigma_background = read_f64(&mut input)?;
        let feature_noise = read_f64(&mut input)?;
        let mut freqs = Vec::with_capacity(per_class);
        let mut tiers = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            freqs.push(read_f64(&mut input)?);
            let mut b = [0u8];
            input.read_exact(&mut b)?;
            tiers.push(Tier::from_code(b[0]).ok_or_else(|| fail("bad tier code"))?);
        }
        let config = DataConfig {
            dim,
            n_train: n,
            patches,
            freqs,
            tiers,
            sigma_dominant,
            sigma_background,
            feature_noise,
            seed,
        };
        config.validate()?;
        let bank = FeatureBank::new(dim, per_class)?;

        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            let label = read_sign(&mut input).ok_or_else(|| fail("bad label"))?;
            let k = read_u32(&mut input)? as usize;
            let feature_patch = read_u32(&mut input)? as usize;
            let dominant_patch = read_u32(&mut input)? as usize;
            let noise_sign = read_sign(&mut input).ok_or_else(|| fail("bad sign"))?;
            if k >= per_class || feature_patch >= patches || dominant_patch >= patches || feature_patch == dominant_patch {
                return Err(fail("sample metadata out of range"));
            }
            meta.push((label, k, feature_patch, dominant_patch, noise_sign));
        }
        let mut samples = Vec::with_capacity(n);
        for (label, k, feature_patch, dominant_patch, noise_sign) in meta {
            let mut xs = vec![0.0; patches * dim];
            for x in xs.iter_mut() {
                *x = read_f64(&mut input)?;
            }
            let mut noise = xs.clone();
            noise[feature_patch * dim..(feature_patch + 1) * dim].fill(0.0);
            noise[dominant_patch * dim + bank.coordinate(FeatureId { class: noise_sign, k: 0 })] -= feature_noise;
            samples.push(Sample {
                patches: xs,
                label,
                feature_patch,
                dominant_patch,
                k,
                noise_sign,
                noise,
                dim,
            });
        }
        Ok(Dataset::from_samples(config, bank, samples))
    }
}

/// Generates the training set deterministically from `config.seed`.
pub fn generate_dataset(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let bank = FeatureBank::new(config.dim, config.features_per_class())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples = (0..config.n_train)
        .map(|_| sample_test_point(&bank, config, &mut rng))
        .collect();
    Ok(Dataset::from_samples(config.clone(), bank, samples))
}

/// Builds a dataset from explicit samples, e.g. for hand-made test instances.
pub fn assemble(config: DataConfig, samples: Vec<Sample>) -> Result<Dataset> {
    config.validate()?;
    let bank = FeatureBank::new(config.dim, config.features_per_class())?;
    for s in &samples {
        if s.dim != config.dim || s.num_patches() != config.patches {
            return Err(crate::error::shape(
                format!("{}x{}", config.dim, config.patches),
                format!("{}x{}", s.dim, s.num_patches()),
            ));
        }
    }
    Ok(Dataset::from_samples(config, bank, samples))
}

impl Sample {
    /// Builds a sample from explicit noise vectors, adding the feature and feature noise.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        bank: &FeatureBank,
        feature_noise: f64,
        label: Sign,
        k: usize,
        feature_patch: usize,
        dominant_patch: usize,
        noise_sign: Sign,
        noise: Vec<f64>,
    ) -> Sample {
        let d = bank.dim();
        let mut patches = noise.clone();
        patches[feature_patch * d..(feature_patch + 1) * d].fill(0.0);
        patches[feature_patch * d + bank.coordinate(FeatureId { class: label, k })] = 1.0;
        patches[dominant_patch * d + bank.coordinate(FeatureId { class: noise_sign, k: 0 })] += feature_noise;
        let mut noise = noise;
        noise[feature_patch * d..(feature_patch + 1) * d].fill(0.0);
        Sample {
            patches,
            label,
            feature_patch,
            dominant_patch,
            k,
            noise_sign,
            noise,
            dim: d,
        }
    }
}

const DATASET_MAGIC: &[u8; 4] = b"PLDS";
const FORMAT_VERSION: u32 = 1;

fn sign_byte(s: Sign) -> u8 {
    match s {
        Sign::Pos => 1,
        Sign::Neg => 0xff,
    }
}

fn read_sign<R: Read>(input: &mut R) -> Option<Sign> {
    let mut b = [0u8];
    input.read_exact(&mut b).ok()?;
    match b[0] {
        1 => Some(Sign::Pos),
        0xff => Some(Sign::Neg),
        _ => None,
    }
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> DataConfig {
        DataConfig {
            dim: 64,
            n_train: 40,
            ..DataConfig::three_tier(seed)
        }
    }

    #[test]
    fn noise_is_orthogonal_to_features() {
        let bank = FeatureBank::new(500, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let xi = sample_lambda_noise(&bank, 0.25, &mut rng);
            let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
            for id in bank.ids() {
                assert!(bank.inner(id, &xi).abs() <= 1e-10 * norm);
            }
        }
    }

    #[test]
    fn noise_norm_band_at_reference_scale() {
        let bank = FeatureBank::new(2000, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma: f64 = 0.25;
        let target = sigma * sigma * 2000.0;
        for _ in 0..10_000 {
            let xi = sample_lambda_noise(&bank, sigma, &mut rng);
            let sq: f64 = xi.iter().map(|x| x * x).sum();
            assert!(sq >= 0.5 * target && sq <= 1.5 * target, "{sq}");
        }
    }

    #[test]
    fn empirical_covariance_matches_lambda() {
        let bank = FeatureBank::new(16, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Ten times the nominal draw count keeps the 5e-3 band several standard errors wide.
        let draws = 1_000_000;
        let mut cov = vec![0.0; 16 * 16];
        for _ in 0..draws {
            let xi = sample_lambda_noise(&bank, 1.0, &mut rng);
            for a in 0..16 {
                for b in 0..16 {
                    cov[a * 16 + b] += xi[a] * xi[b];
                }
            }
        }
        let mut worst: f64 = 0.0;
        for a in 0..16 {
            for b in 0..16 {
                let lambda = if a == b && a >= 4 { 1.0 } else { 0.0 };
                worst = worst.max((cov[a * 16 + b] / draws as f64 - lambda).abs());
            }
        }
        assert!(worst <= 5e-3, "max deviation {worst}");
    }

    #[test]
    fn samples_respect_layout() {
        let data = generate_dataset(&small_config(1)).unwrap();
        let d = data.dim();
        for s in &data.samples {
            assert_ne!(s.feature_patch, s.dominant_patch);
            let v = data.bank.vector(s.feature());
            assert_eq!(s.patch(s.feature_patch), &v[..]);
            let mut expected = s.noise_patch(s.dominant_patch).to_vec();
            expected[data.bank.coordinate(FeatureId { class: s.noise_sign, k: 0 })] += 0.005;
            assert_eq!(s.patch(s.dominant_patch), &expected[..]);
            assert!(s.noise_patch(s.feature_patch).iter().all(|&x| x == 0.0));
            assert_eq!(s.patches.len(), 3 * d);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_config(9)).unwrap();
        let b = generate_dataset(&small_config(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small_config(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn two_patches_force_the_dominant_patch() {
        let cfg = DataConfig {
            dim: 10,
            n_train: 1,
            patches: 2,
            ..DataConfig::three_tier(4)
        };
        let data = generate_dataset(&cfg).unwrap();
        let s = &data.samples[0];
        assert_eq!(s.dominant_patch, 1 - s.feature_patch);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = small_config(0);
        assert!(generate_dataset(&DataConfig { n_train: 0, ..base.clone() }).is_err());
        assert!(generate_dataset(&DataConfig { dim: 5, ..base.clone() }).is_err());
        assert!(DataConfig { freqs: vec![0.15, 0.8, 0.05], ..base.clone() }.validate().is_err());
        assert!(DataConfig { sigma_background: 0.3, ..base.clone() }.validate().is_err());
        assert!(DataConfig { feature_noise: 1.0, ..base.clone() }.validate().is_err());
        assert!(DataConfig { patches: 1, ..base }.validate().is_err());
    }

    #[test]
    fn index_sets_partition_samples() {
        let data = generate_dataset(&small_config(2)).unwrap();
        let n = data.len();
        assert_eq!(data.index.by_label[0].len() + data.index.by_label[1].len(), n);
        assert_eq!(data.index.by_noise_sign[0].len() + data.index.by_noise_sign[1].len(), n);
        for s in Sign::BOTH {
            let total: usize = (0..3).map(|k| data.feature_count(FeatureId { class: s, k })).sum();
            assert_eq!(total, data.class_count(s));
        }
    }

    #[test]
    fn reference_scale_feature_counts() {
        let data = generate_dataset(&DataConfig::three_tier(0)).unwrap();
        let n = data.len() as f64;
        for id in data.bank.ids() {
            let rho = data.config.freqs[id.k];
            let count = data.feature_count(id) as f64;
            assert!((count - rho * n / 2.0).abs() <= rho * n / 4.0, "{id:?}: {count}");
        }
    }

    #[test]
    fn half_open_bins() {
        let cfg = DataConfig::three_tier(0);
        assert_eq!(cfg.feature_for_uniform(0.0), 0);
        assert_eq!(cfg.feature_for_uniform(0.7999), 0);
        assert_eq!(cfg.feature_for_uniform(0.8), 1);
        // 0.8 + 0.15 rounds above 0.95, so the boundary itself still maps to the rare bin.
        assert_eq!(cfg.feature_for_uniform(0.95), 1);
        assert_eq!(cfg.feature_for_uniform(0.950_000_1), 2);
        assert_eq!(cfg.feature_for_uniform(0.999_999_999), 2);
    }

    #[test]
    fn export_import_round_trip() {
        let data = generate_dataset(&small_config(7)).unwrap();
        let mut buf = Vec::new();
        data.export(&mut buf).unwrap();
        let back = Dataset::import(&buf[..]).unwrap();
        assert_eq!(back, data);
        buf[0] = b'X';
        assert!(Dataset::import(&buf[..]).is_err());
    }
}
