//! Convex reparametrization of the CutMix loss and its global minimum.
//!
//! Writing `z_i^(p) = φ(⟨w₁,x_i^(p)⟩) − φ(⟨w₋₁,x_i^(p)⟩)` and aliasing each
//! feature patch to the shared coordinate `z_{s,k}` turns the CutMix loss into
//! a convex function `h(Z)` on `R^{2K + n(P−1)}`. Its unique minimizer is
//! uniform within each class: `y_i z_i^(p) = z*_{y_i}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::augment::cutmix_subsets;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{logistic_loss_prime, logistic_loss_second, phi_prime, Weights};
use crate::synthdata::{Dataset, FeatureId, Sign};
use crate::train::{Method, Objective, PatchTable};

/// Largest `Z` dimension for which the dense Hessian is assembled.
pub const HESSIAN_LIMIT: usize = 200;

/// Largest number of Jacobian columns accepted by [`jacobian_min_singular`].
pub const JACOBIAN_LIMIT: usize = 2000;

/// Which coordinate of `Z` each training patch reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZLayout {
    per_class: usize,
    patches: usize,
    labels: Vec<Sign>,
    feature_patches: Vec<usize>,
    /// Feature slot `(y_i, k_i)` of each sample.
    feature_slots: Vec<usize>,
}

impl ZLayout {
    pub fn new(per_class: usize, patches: usize, labels: Vec<Sign>, feature_patches: Vec<usize>, ks: &[usize]) -> Result<Self> {
        let n = labels.len();
        if feature_patches.len() != n || ks.len() != n {
            return Err(crate::error::shape(n, feature_patches.len().min(ks.len())));
        }
        if patches < 2 || per_class == 0 {
            return Err(Error::Config(format!("need P >= 2 and K >= 1, got P={patches}, K={per_class}")));
        }
        if feature_patches.iter().any(|&p| p >= patches) || ks.iter().any(|&k| k >= per_class) {
            return Err(Error::Config("feature patch or feature index out of range".into()));
        }
        let feature_slots = labels.iter().zip(ks).map(|(s, &k)| s.slot() * per_class + k).collect();
        Ok(ZLayout {
            per_class,
            patches,
            labels,
            feature_patches,
            feature_slots,
        })
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        ZLayout {
            per_class: data.config.features_per_class(),
            patches: data.num_patches(),
            labels: data.samples.iter().map(|s| s.label).collect(),
            feature_patches: data.samples.iter().map(|s| s.feature_patch).collect(),
            feature_slots: data
                .samples
                .iter()
                .map(|s| data.bank.slot(FeatureId { class: s.label, k: s.k }))
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches
    }

    pub fn labels(&self) -> &[Sign] {
        &self.labels
    }

    pub fn num_features(&self) -> usize {
        2 * self.per_class
    }

    /// `2K + n(P−1)`.
    pub fn dim(&self) -> usize {
        self.num_features() + self.n() * (self.patches - 1)
    }

    /// Coordinate read by patch `p` of sample `i`.
    pub fn index(&self, i: usize, p: usize) -> usize {
        let fp = self.feature_patches[i];
        if p == fp {
            self.feature_slots[i]
        } else {
            self.num_features() + i * (self.patches - 1) + p - usize::from(p > fp)
        }
    }

    pub fn feature_index(&self, id: FeatureId) -> usize {
        id.class.slot() * self.per_class + id.k
    }

    pub fn feature_count(&self, slot: usize) -> usize {
        self.feature_slots.iter().filter(|&&s| s == slot).count()
    }

    pub fn class_count(&self, s: Sign) -> usize {
        self.labels.iter().filter(|&&l| l == s).count()
    }
}

/// Per-feature and per-noise-patch network contributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZVector {
    pub layout: ZLayout,
    /// Feature slots first, then `[i][p ≠ p_i*]`.
    pub values: Vec<f64>,
}

impl ZVector {
    pub fn zeros(layout: ZLayout) -> Self {
        let values = vec![0.0; layout.dim()];
        ZVector { layout, values }
    }

    pub fn from_values(layout: ZLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(crate::error::shape(layout.dim(), values.len()));
        }
        Ok(ZVector { layout, values })
    }

    pub fn feature(&self, id: FeatureId) -> f64 {
        self.values[self.layout.feature_index(id)]
    }

    pub fn patch(&self, i: usize, p: usize) -> f64 {
        self.values[self.layout.index(i, p)]
    }

    /// Dense `[i][p]` table of patch contributions with feature aliases resolved.
    pub fn expand(&self) -> Vec<f64> {
        let (n, np) = (self.layout.n(), self.layout.patches);
        let mut out = Vec::with_capacity(n * np);
        for i in 0..n {
            for p in 0..np {
                out.push(self.patch(i, p));
            }
        }
        out
    }

    /// Adjoint of [`ZVector::expand`].
    fn gather(layout: &ZLayout, table: &[f64]) -> Vec<f64> {
        let np = layout.patches;
        let mut out = vec![0.0; layout.dim()];
        for i in 0..layout.n() {
            for p in 0..np {
                out[layout.index(i, p)] += table[i * np + p];
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Contributions of every feature and non-feature training patch at `weights`.
pub fn compute_z(weights: &Weights, data: &Dataset) -> Result<ZVector> {
    if weights.dim() != data.dim() {
        return Err(crate::error::shape(data.dim(), weights.dim()));
    }
    let layout = ZLayout::from_dataset(data);
    let table = PatchTable::compute(weights, data, &Executor::Serial);
    let mut values = vec![0.0; layout.dim()];
    for id in data.bank.ids() {
        values[layout.feature_index(id)] = weights.patch_output(&data.bank.vector(id));
    }
    for (i, s) in data.samples.iter().enumerate() {
        for p in (0..layout.patches).filter(|&p| p != s.feature_patch) {
            values[layout.index(i, p)] = table.patch_output(i, p);
        }
    }
    Ok(ZVector { layout, values })
}

fn cutmix(layout: &ZLayout) -> Result<Objective> {
    Objective::new(Method::CutMix, layout.patches, 0)
}

/// `h(Z)`: the CutMix loss as a function of the patch contributions.
pub fn h_value(z: &ZVector) -> Result<f64> {
    let table = z.expand();
    let out = cutmix(&z.layout)?.dual(&table, &z.layout.labels, z.layout.patches, true, &Executor::Serial);
    Ok(out.loss.expect("loss requested"))
}

/// `∇h(Z)`.
pub fn h_grad(z: &ZVector) -> Result<ZVector> {
    h_value_and_grad(z, &Executor::Serial).map(|(_, grad)| grad)
}

/// `h(Z)` and `∇h(Z)` from one pass.
pub fn h_value_and_grad(z: &ZVector, exec: &Executor) -> Result<(f64, ZVector)> {
    let table = z.expand();
    let out = cutmix(&z.layout)?.dual(&table, &z.layout.labels, z.layout.patches, true, exec);
    let values = ZVector::gather(&z.layout, &out.dual);
    Ok((
        out.loss.expect("loss requested"),
        ZVector {
            layout: z.layout.clone(),
            values,
        },
    ))
}

/// Dense `∇²h(Z) = n⁻² Σ_{i,j} E_S[ℓ″(⟨a_{i,j,S}, Z⟩) a aᵀ]`.
pub fn h_hessian(z: &ZVector) -> Result<DMatrix<f64>> {
    let layout = &z.layout;
    let dim = layout.dim();
    if dim > HESSIAN_LIMIT {
        return Err(Error::TooLarge {
            what: "Hessian",
            dim,
            limit: HESSIAN_LIMIT,
        });
    }
    let (n, np) = (layout.n(), layout.patches);
    let subsets = cutmix_subsets(np);
    let scale = 1.0 / (n as f64 * n as f64);
    let mut hess = DMatrix::zeros(dim, dim);
    let mut idx = vec![0usize; np];
    for i in 0..n {
        for j in 0..n {
            for sub in &subsets {
                for (p, slot) in idx.iter_mut().enumerate() {
                    *slot = layout.index(if sub.mask.contains(p) { i } else { j }, p);
                }
                let u: f64 = idx.iter().map(|&a| z.values[a]).sum();
                let w = scale * sub.prob * logistic_loss_second(u);
                for &a in &idx {
                    for &b in &idx {
                        hess[(a, b)] += w;
                    }
                }
            }
        }
    }
    Ok(hess)
}

/// Smallest singular value of `J(W)`, whose columns are `∇_W z_{s,k}` and `∇_W z_i^(p)`.
pub fn jacobian_min_singular(weights: &Weights, data: &Dataset) -> Result<f64> {
    crate::decompose::require_single_neuron(weights)?;
    let d = data.dim();
    let mut columns: Vec<Vec<f64>> = data.bank.ids().map(|id| data.bank.vector(id)).collect();
    for s in &data.samples {
        for p in (0..data.num_patches()).filter(|&p| p != s.feature_patch) {
            columns.push(s.patch(p).to_vec());
        }
    }
    if columns.len() > JACOBIAN_LIMIT {
        return Err(Error::TooLarge {
            what: "Jacobian",
            dim: columns.len(),
            limit: JACOBIAN_LIMIT,
        });
    }
    let (w_pos, w_neg) = (weights.filters.row(Sign::Pos, 0), weights.filters.row(Sign::Neg, 0));
    let mut jac = DMatrix::zeros(2 * d, columns.len());
    for (c, x) in columns.iter().enumerate() {
        let g_pos = phi_prime(crate::model::dot(w_pos, x), weights.act);
        let g_neg = phi_prime(crate::model::dot(w_neg, x), weights.act);
        for (r, &xv) in x.iter().enumerate() {
            jac[(r, c)] = g_pos * xv;
            jac[(d + r, c)] = -g_neg * xv;
        }
    }
    Ok(jac.singular_values().min())
}

/// Per-class minimizer of `h` restricted to uniform `Z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMin {
    pub z_pos: f64,
    pub z_neg: f64,
    pub residual_pos: f64,
    pub residual_neg: f64,
    /// Outer bisection iterations.
    pub iterations: usize,
    pub count_pos: usize,
    pub count_neg: usize,
    pub patches: usize,
}

impl GlobalMin {
    pub fn z_star(&self, s: Sign) -> f64 {
        match s {
            Sign::Pos => self.z_pos,
            Sign::Neg => self.z_neg,
        }
    }

    /// The minimizer `Ẑ`: `z_{s,k} = s z*_s`, `z_i^(p) = y_i z*_{y_i}`.
    pub fn minimizer(&self, layout: &ZLayout) -> ZVector {
        let mut z = ZVector::zeros(layout.clone());
        for slot in 0..layout.num_features() {
            let s = if slot < layout.per_class { Sign::Pos } else { Sign::Neg };
            z.values[slot] = s.value() * self.z_star(s);
        }
        for (i, &y) in layout.labels.iter().enumerate() {
            for p in 0..layout.patches {
                let a = layout.index(i, p);
                if a >= layout.num_features() {
                    z.values[a] = y.value() * self.z_star(y);
                }
            }
        }
        z
    }
}

/// `g_s(z_s, z_{−s})` with `ratio = |V_s|/|V_{−s}|`.
pub fn stationarity(ratio: f64, own: f64, other: f64, patches: usize) -> f64 {
    let np = patches as f64;
    let mut moment = 0.0;
    for c in 1..=patches {
        let c = c as f64;
        moment += c * logistic_loss_prime(c * own - (np - c) * other);
    }
    moment /= np + 1.0;
    ratio * logistic_loss_prime(np * own) + 2.0 / np * moment + (np - 1.0) / (3.0 * np)
}

const MAX_EXPANSIONS: usize = 200;
const BRACKET_TOL: f64 = 1e-12;
const RESIDUAL_TOL: f64 = 1e-10;

/// Root of an increasing `f` on `[lo, ∞)` with the search started at `[lo, hi]`.
fn bisect_increasing(f: impl Fn(f64) -> f64, lo: f64, mut hi: f64, what: &str) -> Result<(f64, usize)> {
    let f_lo = f(lo);
    if f_lo > 0.0 {
        return Err(Error::Bracket(format!("{what}: positive at the lower end {lo} ({f_lo:.3e})")));
    }
    let mut expansions = 0;
    while f(hi) < 0.0 {
        expansions += 1;
        if expansions > MAX_EXPANSIONS || !hi.is_finite() {
            return Err(Error::Bracket(format!("{what}: no sign change on [{lo}, {hi}]")));
        }
        hi = 2.0 * hi + 1.0;
    }
    let (mut a, mut b) = (lo, hi);
    let mut iterations = 0;
    loop {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        iterations += 1;
        if f(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok((0.5 * (a + b), iterations))
}

/// Solves `g₁ = g₋₁ = 0` by nested bisection: the inner solve defines
/// `S(z₁)` from `g₋₁(S(z₁), z₁) = 0`, the outer one finds the root of `g₁(z₁, S(z₁))`.
pub fn solve_global_minimum(count_pos: usize, count_neg: usize, patches: usize) -> Result<GlobalMin> {
    if count_pos == 0 || count_neg == 0 {
        return Err(Error::Config(format!("both classes need samples, got {count_pos} and {count_neg}")));
    }
    if patches < 2 {
        return Err(Error::Config(format!("need P >= 2, got {patches}")));
    }
    let r_pos = count_pos as f64 / count_neg as f64;
    let r_neg = 1.0 / r_pos;
    let np = patches as f64;
    let inner = |z_pos: f64| -> Result<f64> {
        let start = np * z_pos + 9f64.ln();
        bisect_increasing(|z| stationarity(r_neg, z, z_pos, patches), 0.0, start, "inner solve").map(|r| r.0)
    };
    // Bisection on the outer map; evaluation errors abort with the failing bracket.
    let outer = |z_pos: f64| -> Result<f64> { Ok(stationarity(r_pos, z_pos, inner(z_pos)?, patches)) };
    let (mut a, mut b) = (0.0f64, 1.0f64);
    if outer(a)? > 0.0 {
        return Err(Error::Bracket(format!("outer solve: g_1 positive at z_1 = 0 (P = {patches})")));
    }
    let mut expansions = 0;
    while outer(b)? < 0.0 {
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return Err(Error::Bracket(format!("outer solve: no sign change on [0, {b}]")));
        }
        b = 2.0 * b + 1.0;
    }
    let mut iterations = 0;
    while b - a > BRACKET_TOL * b.max(1.0) {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        iterations += 1;
        if outer(mid)? < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let z_pos = 0.5 * (a + b);
    let z_neg = inner(z_pos)?;
    let residual_pos = stationarity(r_pos, z_pos, z_neg, patches);
    let residual_neg = stationarity(r_neg, z_neg, z_pos, patches);
    if residual_pos.abs() > RESIDUAL_TOL || residual_neg.abs() > RESIDUAL_TOL {
        return Err(Error::Bracket(format!(
            "residuals {residual_pos:.3e}, {residual_neg:.3e} exceed {RESIDUAL_TOL:e} at ({z_pos}, {z_neg})"
        )));
    }
    Ok(GlobalMin {
        z_pos,
        z_neg,
        residual_pos,
        residual_neg,
        iterations,
        count_pos,
        count_neg,
        patches,
    })
}

/// Global minimum for the class counts of `data`.
pub fn global_minimum_for(data: &Dataset) -> Result<GlobalMin> {
    solve_global_minimum(data.class_count(Sign::Pos), data.class_count(Sign::Neg), data.num_patches())
}

/// How close trained weights are to the uniform minimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    /// `max_{i,p} |y_i z_i^(p) − z*_{y_i}|`, feature patches included.
    pub max_patch_deviation: f64,
    /// `max_{s,k} |s z_{s,k} − z*_s|` over features present in the training set.
    pub max_feature_deviation: f64,
    /// Deviation relative to `max(z₁*, z₋₁*)`.
    pub relative_deviation: f64,
    pub grad_h_norm: f64,
    pub distance_to_minimizer: f64,
    /// Constants of the accuracy statement: `C₁ = z₁*`, `C₋₁ = z₋₁*`.
    pub c_pos: f64,
    pub c_neg: f64,
}

pub fn verify_uniform_minimum(weights: &Weights, data: &Dataset, min: &GlobalMin) -> Result<UniformityReport> {
    let z = compute_z(weights, data)?;
    uniformity_of(&z, min)
}

pub fn uniformity_of(z: &ZVector, min: &GlobalMin) -> Result<UniformityReport> {
    let layout = &z.layout;
    let mut max_patch: f64 = 0.0;
    for (i, &y) in layout.labels.iter().enumerate() {
        for p in 0..layout.patches {
            max_patch = max_patch.max((y.value() * z.patch(i, p) - min.z_star(y)).abs());
        }
    }
    let mut max_feature: f64 = 0.0;
    for slot in (0..layout.num_features()).filter(|&a| layout.feature_count(a) > 0) {
        let s = if slot < layout.per_class { Sign::Pos } else { Sign::Neg };
        max_feature = max_feature.max((s.value() * z.values[slot] - min.z_star(s)).abs());
    }
    let target = min.minimizer(layout);
    let distance = z.values.iter().zip(&target.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let (_, grad) = h_value_and_grad(z, &Executor::Serial)?;
    Ok(UniformityReport {
        max_patch_deviation: max_patch,
        max_feature_deviation: max_feature,
        relative_deviation: max_patch / min.z_pos.max(min.z_neg),
        grad_h_norm: grad.norm(),
        distance_to_minimizer: distance,
        c_pos: min.z_pos,
        c_neg: min.z_neg,
    })
}

/// Smoothness constant `9 P σ_d² d / r` of the CutMix loss.
pub fn smoothness_constant(patches: usize, sigma_dominant: f64, dim: usize, smoothing: f64) -> f64 {
    9.0 * patches as f64 * sigma_dominant * sigma_dominant * dim as f64 / smoothing
}
