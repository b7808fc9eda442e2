//! Train, augmented and test accuracy, and per-feature output traces.
//!
//! A zero output counts as a misclassification everywhere.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::cut_sets;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::Weights;
use crate::synthdata::{sample_test_point, DataConfig, Dataset, FeatureBank, Sample, Tier};
use crate::train::PatchTable;

/// Default number of fresh test draws.
pub const DEFAULT_TEST_DRAWS: usize = 20_000;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

/// Draws evaluated per parallel task.
const TEST_CHUNK: usize = 512;

/// Wilson score interval for `successes / trials` at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// A success count with its 95% Wilson interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub correct: usize,
    pub total: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Rate {
    pub fn new(correct: usize, total: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(correct, total, Z95);
        Rate {
            correct,
            total,
            rate: if total == 0 { f64::NAN } else { correct as f64 / total as f64 },
            ci_low,
            ci_high,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierRate {
    pub tier: Tier,
    #[serde(flatten)]
    pub rate: Rate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub train_acc: Option<f64>,
    pub aug_acc: Option<f64>,
    pub test: Rate,
    /// Test accuracy conditional on the tier of the drawn feature.
    pub by_tier: Vec<TierRate>,
    pub n_test: usize,
    pub seed: u64,
}

impl AccuracyReport {
    pub fn tier(&self, tier: Tier) -> Option<&Rate> {
        self.by_tier.iter().find(|t| t.tier == tier).map(|t| &t.rate)
    }

    /// Accuracy over draws whose feature falls in any of `tiers`.
    pub fn pooled(&self, tiers: &[Tier]) -> Rate {
        let (c, t) = self
            .by_tier
            .iter()
            .filter(|t| tiers.contains(&t.tier))
            .fold((0, 0), |(c, t), r| (c + r.rate.correct, t + r.rate.total));
        Rate::new(c, t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Conditional-accuracy table: one row per tier plus an `all` row.
    pub fn write_tier_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "tier,correct,total,rate,ci_low,ci_high")?;
        let rows = self.by_tier.iter().map(|t| (t.tier.name(), &t.rate)).chain([("all", &self.test)]);
        for (name, r) in rows {
            writeln!(out, "{name},{},{},{},{},{}", r.correct, r.total, r.rate, r.ci_low, r.ci_high)?;
        }
        Ok(())
    }
}

/// Fraction of training samples with `y_i f(X_i) > 0`.
pub fn train_accuracy(weights: &Weights, data: &Dataset) -> f64 {
    let table = PatchTable::compute(weights, data, &Executor::Serial);
    let correct = data
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| s.label.value() * table.output(*i) > 0.0)
        .count();
    correct as f64 / data.len() as f64
}

/// Fraction of the `n·binom(P, C)` masked training points classified correctly.
pub fn augmented_accuracy(weights: &Weights, data: &Dataset, cut_size: usize) -> Result<f64> {
    let np = data.num_patches();
    if cut_size > np {
        return Err(Error::Config(format!("cut size {cut_size} exceeds P = {np}")));
    }
    let cuts = cut_sets(np, cut_size);
    let table = PatchTable::compute(weights, data, &Executor::Serial);
    let mut correct = 0usize;
    for (i, s) in data.samples.iter().enumerate() {
        correct += cuts.iter().filter(|&&c| s.label.value() * table.masked_output(i, c) > 0.0).count();
    }
    Ok(correct as f64 / (data.len() * cuts.len()) as f64)
}

/// The `draw`-th fresh test point for `seed`; independent of evaluation order.
pub fn test_point(bank: &FeatureBank, config: &DataConfig, seed: u64, draw: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    sample_test_point(bank, config, &mut rng)
}

pub fn test_points(bank: &FeatureBank, config: &DataConfig, count: usize, seed: u64) -> Vec<Sample> {
    (0..count as u64).map(|t| test_point(bank, config, seed, t)).collect()
}

/// Monte-Carlo test accuracy over `n_test` fresh draws.
pub fn test_accuracy(weights: &Weights, bank: &FeatureBank, config: &DataConfig, n_test: usize, seed: u64, exec: &Executor) -> Result<AccuracyReport> {
    if weights.dim() != bank.dim() {
        return Err(crate::error::shape(bank.dim(), weights.dim()));
    }
    let chunks = n_test.div_ceil(TEST_CHUNK);
    let counts = exec.map(chunks, |c| {
        let mut hits = [(0usize, 0usize); 3];
        for t in c * TEST_CHUNK..((c + 1) * TEST_CHUNK).min(n_test) {
            let x = test_point(bank, config, seed, t as u64);
            let slot = config.tiers[x.k].code() as usize;
            hits[slot].1 += 1;
            if x.label.value() * weights.forward(&x.patches).expect("dimension checked") > 0.0 {
                hits[slot].0 += 1;
            }
        }
        hits
    });
    let mut totals = [(0usize, 0usize); 3];
    for hits in counts {
        for (acc, h) in totals.iter_mut().zip(hits) {
            acc.0 += h.0;
            acc.1 += h.1;
        }
    }
    let correct = totals.iter().map(|t| t.0).sum();
    let by_tier = Tier::ALL
        .iter()
        .filter(|t| config.tiers.contains(t))
        .map(|&tier| {
            let (c, n) = totals[tier.code() as usize];
            TierRate { tier, rate: Rate::new(c, n) }
        })
        .collect();
    Ok(AccuracyReport {
        train_acc: None,
        aug_acc: None,
        test: Rate::new(correct, n_test),
        by_tier,
        n_test,
        seed,
    })
}

/// Train, augmented (when `cut_size` is given) and test accuracy together.
pub fn full_report(weights: &Weights, data: &Dataset, cut_size: Option<usize>, n_test: usize, seed: u64, exec: &Executor) -> Result<AccuracyReport> {
    let mut report = test_accuracy(weights, &data.bank, &data.config, n_test, seed, exec)?;
    report.train_acc = Some(train_accuracy(weights, data));
    report.aug_acc = cut_size.map(|c| augmented_accuracy(weights, data, c)).transpose()?;
    Ok(report)
}

/// `φ(⟨w₁,v⟩) − φ(⟨w₋₁,v⟩)` for every feature, in feature-slot order.
pub fn feature_output_trace(weights: &Weights, bank: &FeatureBank) -> Vec<f64> {
    bank.ids().map(|id| weights.patch_output(&bank.vector(id))).collect()
}

/// Test accuracy predicted by the accuracy statements: features of the listed
/// tiers are classified correctly and the rest at chance.
pub fn predicted_accuracy(config: &DataConfig, learned: &[Tier]) -> f64 {
    let unlearned: f64 = Tier::ALL.iter().filter(|t| !learned.contains(t)).map(|&t| config.tier_mass(t)).sum();
    1.0 - 0.5 * unlearned
}
