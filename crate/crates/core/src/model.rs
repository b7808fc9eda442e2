//! Two-layer CNN with a smoothed leaky ReLU and a fixed ±1 second layer.
//!
//! With `m` neurons per sign the network output on a sample is
//! `Σ_p [ mean_j φ(⟨w_{+,j}, x_p⟩) − mean_j φ(⟨w_{-,j}, x_p⟩) ]`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::synthdata::{read_f64, read_u32, read_u64, Sign};

/// Negative slope and smoothing width of the activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationParams {
    pub slope: f64,
    pub smoothing: f64,
}

impl ActivationParams {
    pub fn new(slope: f64, smoothing: f64) -> Result<Self> {
        let act = ActivationParams { slope, smoothing };
        act.validate()?;
        Ok(act)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slope > 0.0 && self.slope <= 1.0) {
            // slope 0 is a dead-neuron ReLU and is rejected here.
            return Err(Error::Config(format!("slope must lie in (0, 1], got {}", self.slope)));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::Config(format!("smoothing must be positive, got {}", self.smoothing)));
        }
        Ok(())
    }
}

impl Default for ActivationParams {
    fn default() -> Self {
        ActivationParams {
            slope: 0.1,
            smoothing: 1.0,
        }
    }
}

pub fn phi(z: f64, act: ActivationParams) -> f64 {
    let (b, r) = (act.slope, act.smoothing);
    if z >= r {
        z - (1.0 - b) * r / 2.0
    } else if z >= 0.0 {
        (1.0 - b) * z * z / (2.0 * r) + b * z
    } else {
        b * z
    }
}

pub fn phi_prime(z: f64, act: ActivationParams) -> f64 {
    let (b, r) = (act.slope, act.smoothing);
    if z >= r {
        1.0
    } else if z >= 0.0 {
        (1.0 - b) * z / r + b
    } else {
        b
    }
}

/// `log(1 + e^{-z})`, evaluated without overflow.
pub fn logistic_loss(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `-1 / (1 + e^z)`.
pub fn logistic_loss_prime(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

/// `e^z / (1 + e^z)^2`.
pub fn logistic_loss_second(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Dot product with a fixed four-lane accumulation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Raw filter parameters: `m` rows of length `d` for each output sign.
#[derive(Clone, Debug, PartialEq)]
pub struct Filters {
    dim: usize,
    width: usize,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl Filters {
    pub fn zeros(dim: usize, width: usize) -> Self {
        Filters {
            dim,
            width,
            pos: vec![0.0; dim * width],
            neg: vec![0.0; dim * width],
        }
    }

    pub fn from_rows(dim: usize, width: usize, pos: Vec<f64>, neg: Vec<f64>) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("need at least one neuron per sign".into()));
        }
        if pos.len() != dim * width || neg.len() != dim * width {
            return Err(shape(dim * width, format!("{} and {}", pos.len(), neg.len())));
        }
        Ok(Filters { dim, width, pos, neg })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Neurons per sign.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn block(&self, s: Sign) -> &[f64] {
        match s {
            Sign::Pos => &self.pos,
            Sign::Neg => &self.neg,
        }
    }

    pub fn block_mut(&mut self, s: Sign) -> &mut [f64] {
        match s {
            Sign::Pos => &mut self.pos,
            Sign::Neg => &mut self.neg,
        }
    }

    pub fn row(&self, s: Sign, j: usize) -> &[f64] {
        &self.block(s)[j * self.dim..(j + 1) * self.dim]
    }

    pub fn row_mut(&mut self, s: Sign, j: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.block_mut(s)[j * d..(j + 1) * d]
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.pos.iter().chain(self.neg.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.pos.iter_mut().chain(self.neg.iter_mut())
    }

    pub fn len(&self) -> usize {
        2 * self.dim * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Filters) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &Filters) -> Filters {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn dot(&self, other: &Filters) -> f64 {
        dot(&self.pos, &other.pos) + dot(&self.neg, &other.neg)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.values_mut() {
            *v *= c;
        }
    }
}

/// Initialization scale and seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub sigma_0: f64,
    pub seed: u64,
}

/// Network parameters together with the activation and their initialization record.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub filters: Filters,
    pub act: ActivationParams,
    pub init: InitConfig,
}

impl Weights {
    pub fn zeros(dim: usize, width: usize, act: ActivationParams) -> Self {
        Weights {
            filters: Filters::zeros(dim, width),
            act,
            init: InitConfig { sigma_0: 0.0, seed: 0 },
        }
    }

    pub fn dim(&self) -> usize {
        self.filters.dim
    }

    pub fn width(&self) -> usize {
        self.filters.width
    }

    /// Network contribution of one patch.
    pub fn patch_output(&self, x: &[f64]) -> f64 {
        let m = self.width();
        let mut out = 0.0;
        for s in Sign::BOTH {
            let mut acc = 0.0;
            for j in 0..m {
                acc += phi(dot(self.filters.row(s, j), x), self.act);
            }
            out += s.value() * acc / m as f64;
        }
        out
    }

    /// Network output on a patch-major sample.
    pub fn forward(&self, patches: &[f64]) -> Result<f64> {
        let d = self.dim();
        if d == 0 || patches.len() % d != 0 {
            return Err(shape(format!("a multiple of {d}"), patches.len()));
        }
        Ok(patches.chunks_exact(d).map(|x| self.patch_output(x)).sum())
    }

    /// Gradient of `ℓ(y f(X))` with respect to the filters.
    pub fn grad_sample(&self, patches: &[f64], label: Sign) -> Result<Filters> {
        self.grad_sample_with(patches, label, logistic_loss_prime)
    }

    /// Gradient of `loss(y f(X))` for an arbitrary scalar loss derivative.
    pub fn grad_sample_with(&self, patches: &[f64], label: Sign, loss_prime: impl Fn(f64) -> f64) -> Result<Filters> {
        let y = label.value();
        let margin = y * self.forward(patches)?;
        let outer = loss_prime(margin) * y;
        let (d, m) = (self.dim(), self.width());
        let mut grad = Filters::zeros(d, m);
        for x in patches.chunks_exact(d) {
            for s in Sign::BOTH {
                for j in 0..m {
                    let c = outer * s.value() * phi_prime(dot(self.filters.row(s, j), x), self.act) / m as f64;
                    for (g, xv) in grad.row_mut(s, j).iter_mut().zip(x) {
                        *g += c * xv;
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Writes the flat binary checkpoint layout.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        out.write_all(&(self.width() as u64).to_le_bytes())?;
        for v in [self.act.slope, self.act.smoothing, self.init.sigma_0] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.init.seed.to_le_bytes())?;
        for v in self.filters.values() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC || read_u32(&mut input)? != 1 {
            return Err(Error::Format {
                kind: "weights",
                detail: "bad magic or version".into(),
            });
        }
        let dim = read_u64(&mut input)? as usize;
        let width = read_u64(&mut input)? as usize;
        let act = ActivationParams {
            slope: read_f64(&mut input)?,
            smoothing: read_f64(&mut input)?,
        };
        let sigma_0 = read_f64(&mut input)?;
        let seed = read_u64(&mut input)?;
        let mut rows = vec![0.0; 2 * dim * width];
        for v in rows.iter_mut() {
            *v = read_f64(&mut input)?;
        }
        let neg = rows.split_off(dim * width);
        Ok(Weights {
            filters: Filters::from_rows(dim, width, rows, neg)?,
            act,
            init: InitConfig { sigma_0, seed },
        })
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"PLWT";

/// I.i.d. `N(0, σ₀²)` filters; positive rows are drawn before negative rows.
pub fn init_weights(dim: usize, width: usize, act: ActivationParams, init: InitConfig) -> Result<Weights> {
    if !(init.sigma_0 > 0.0) {
        return Err(Error::Config(format!("sigma_0 must be positive, got {}", init.sigma_0)));
    }
    act.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let normal = Normal::new(0.0, init.sigma_0).expect("positive std");
    let mut filters = Filters::zeros(dim, width);
    if width == 0 {
        return Err(Error::Config("need at least one neuron per sign".into()));
    }
    for v in filters.values_mut() {
        *v = normal.sample(&mut rng);
    }
    Ok(Weights { filters, act, init })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ACT: ActivationParams = ActivationParams {
        slope: 0.1,
        smoothing: 1.0,
    };

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.0, ACT), 0.0);
        assert!((phi(2.0, ACT) - 1.55).abs() < 1e-15);
        assert!((phi(-2.0, ACT) + 0.2).abs() < 1e-15);
        assert!((phi(0.5, ACT) - 0.1625).abs() < 1e-15);
    }

    #[test]
    fn phi_is_c1_at_the_knots() {
        let eps = 1e-9;
        let r = ACT.smoothing;
        assert!((phi(r - eps, ACT) - phi(r + eps, ACT)).abs() <= 2.0 * eps + 1e-15);
        assert!((phi(r, ACT) - (1.0 + ACT.slope) * r / 2.0).abs() < 1e-15);
        assert_eq!(phi_prime(-1e-300, ACT), ACT.slope);
        assert_eq!(phi_prime(0.0, ACT), ACT.slope);
        assert!((phi_prime(r - eps, ACT) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn logistic_values() {
        assert!((logistic_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(logistic_loss_prime(0.0), -0.5);
        let big = logistic_loss(-100.0);
        assert!(big.is_finite() && (100.0..=100.0 + 1e-12).contains(&big));
        for z in [-5.0, 0.0, 5.0] {
            assert!((logistic_loss_prime(z) + logistic_loss_prime(-z) + 1.0).abs() < 1e-15);
        }
        assert!(logistic_loss(800.0) >= 0.0 && logistic_loss(-800.0).is_finite());
    }

    #[test]
    fn forward_of_zero_weights_is_zero() {
        let w = Weights::zeros(5, 1, ACT);
        assert_eq!(w.forward(&[0.3; 15]).unwrap(), 0.0);
        assert!(w.forward(&[0.3; 14]).is_err());
    }

    #[test]
    fn forward_matches_hand_sum() {
        let pos = vec![1.0, 2.0, 0.0];
        let neg = vec![0.0, -1.0, 0.5];
        let w = Weights {
            filters: Filters::from_rows(3, 1, pos.clone(), neg.clone()).unwrap(),
            act: ACT,
            init: InitConfig { sigma_0: 1.0, seed: 0 },
        };
        let norm = (5.0f64).sqrt();
        let x1: Vec<f64> = pos.iter().map(|v| 0.7 * v / norm).collect();
        let x2 = vec![-0.2, 0.1, 0.4];
        let patches: Vec<f64> = x1.iter().chain(&x2).copied().collect();
        let mut expected = 0.0;
        for x in [&x1, &x2] {
            let a: f64 = pos.iter().zip(x.iter()).map(|(p, v)| p * v).sum();
            let b: f64 = neg.iter().zip(x.iter()).map(|(p, v)| p * v).sum();
            expected += phi(a, ACT) - phi(b, ACT);
        }
        assert!((w.forward(&patches).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn gradient_at_zero_has_closed_form() {
        let w = Weights::zeros(4, 1, ACT);
        let patches = [0.1, -0.2, 0.3, 0.4, 1.0, 0.0, -0.5, 0.25, 0.0, 0.0, 0.2, 0.1];
        let g = w.grad_sample(&patches, Sign::Neg).unwrap();
        for s in Sign::BOTH {
            for c in 0..4 {
                let sum: f64 = (0..3).map(|p| patches[p * 4 + c]).sum();
                let expected = Sign::Neg.value() * s.value() * logistic_loss_prime(0.0) * ACT.slope * sum;
                assert!((g.row(s, 0)[c] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_loss_derivative() {
        let w = init_weights(6, 2, ACT, InitConfig { sigma_0: 0.5, seed: 4 }).unwrap();
        let patches: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        let one = w.grad_sample_with(&patches, Sign::Pos, |_| 0.3).unwrap();
        let two = w.grad_sample_with(&patches, Sign::Pos, |_| 0.6).unwrap();
        for (a, b) in one.values().zip(two.values()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let w = init_weights(20, 1, ACT, InitConfig { sigma_0: 0.5, seed }).unwrap();
            let patches: Vec<f64> = (0..60).map(|i| ((i as f64 + seed as f64) * 0.91).cos()).collect();
            let label = if seed % 2 == 0 { Sign::Pos } else { Sign::Neg };
            let g = w.grad_sample(&patches, label).unwrap();
            let h = 1e-5;
            let loss = |w: &Weights| logistic_loss(label.value() * w.forward(&patches).unwrap());
            let mut num = Vec::new();
            for idx in 0..w.filters.len() {
                let mut up = w.clone();
                *up.filters.values_mut().nth(idx).unwrap() += h;
                let mut down = w.clone();
                *down.filters.values_mut().nth(idx).unwrap() -= h;
                num.push((loss(&up) - loss(&down)) / (2.0 * h));
            }
            let diff: f64 = g.values().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(diff <= 1e-6 * scale, "relative error {}", diff / scale);
        }
    }

    #[test]
    fn swapping_signs_negates_output() {
        let w = init_weights(8, 1, ACT, InitConfig { sigma_0: 1.0, seed: 1 }).unwrap();
        let swapped = Weights {
            filters: Filters::from_rows(8, 1, w.filters.block(Sign::Neg).to_vec(), w.filters.block(Sign::Pos).to_vec()).unwrap(),
            ..w.clone()
        };
        let patches: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        assert_eq!(w.forward(&patches).unwrap(), -swapped.forward(&patches).unwrap());
    }

    #[test]
    fn init_is_deterministic_with_expected_scale() {
        let init = InitConfig { sigma_0: 0.01, seed: 3 };
        let a = init_weights(2000, 1, ACT, init).unwrap();
        assert_eq!(a, init_weights(2000, 1, ACT, init).unwrap());
        let bound = 0.01 * (2000f64).ln();
        for c in 0..6 {
            assert!(a.filters.row(Sign::Pos, 0)[c].abs() <= bound);
            assert!(a.filters.row(Sign::Neg, 0)[c].abs() <= bound);
        }
        let big = init_weights(50_000, 1, ACT, InitConfig { sigma_0: 0.2, seed: 8 }).unwrap();
        let var = big.filters.values().map(|v| v * v).sum::<f64>() / big.filters.len() as f64;
        assert!((var / 0.04 - 1.0).abs() < 0.03, "{var}");
        assert!(init_weights(5, 1, ACT, InitConfig { sigma_0: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let w = init_weights(7, 3, ACT, InitConfig { sigma_0: 0.1, seed: 12 }).unwrap();
        let mut buf = Vec::new();
        w.save(&mut buf).unwrap();
        assert_eq!(Weights::load(&buf[..]).unwrap(), w);
    }

    proptest! {
        #[test]
        fn phi_slope_bounds(z in -50.0f64..50.0, b in 0.01f64..1.0, r in 0.05f64..5.0) {
            let act = ActivationParams { slope: b, smoothing: r };
            let d = phi_prime(z, act);
            prop_assert!(d >= b && d <= 1.0);
            prop_assert!(phi(z + 1e-3, act) > phi(z, act));
            if z >= 0.0 {
                prop_assert!((phi(z, act) - z).abs() <= (1.0 - b) * r / 2.0 + 1e-12);
            }
        }

        #[test]
        fn forward_is_patch_permutation_invariant(seed in 0u64..1000, shift in 1usize..3) {
            let w = init_weights(5, 2, ACT, InitConfig { sigma_0: 1.0, seed }).unwrap();
            let patches: Vec<f64> = (0..15).map(|i| ((i as u64 * 7 + seed) as f64).sin()).collect();
            let mut rotated = patches.clone();
            rotated.rotate_left(5 * shift);
            let a = w.forward(&patches).unwrap();
            let b = w.forward(&rotated).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
