//! Feature-noise decomposition of the filters and the initialization audit.
//!
//! For a single neuron per sign, every gradient step moves `w_s` inside the
//! span of the features and the training noise vectors, so
//!
//! ```text
//! w_s = w_s⁰ + Σ_k γ_s(s,k) v_{s,k} − Σ_k γ_s(−s,k) v_{−s,k}
//!     + Σ_{i∈V_s} ρ_s(i,p) ξ_i^(p)/‖ξ_i^(p)‖² − Σ_{i∈V_{−s}} ρ_s(i,p) ξ_i^(p)/‖ξ_i^(p)‖²
//!     + α Σ_{i∈F_{±s}} s y_i ρ_s(i,p̃_i) v_{±s,1}/‖ξ_i^(p̃_i)‖².
//! ```
//!
//! `γ` measures feature learning and `ρ` noise memorization. The coefficients
//! are obtained either by projecting `W − W⁰` on `{v} ∪ {ξ}` or by accumulating
//! the per-step updates while training.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, phi, phi_prime, ActivationParams, Filters, Weights};
use crate::synthdata::{Dataset, FeatureId, Sign};
use crate::train::{Evaluation, StepObserver};

/// `γ` and `ρ` coefficients at one iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffTable {
    per_class: usize,
    n: usize,
    patches: usize,
    feature_patches: Vec<usize>,
    dominant_patches: Vec<usize>,
    /// `[s][feature slot]`.
    gamma: Vec<f64>,
    /// `[s][i][p]`, zero on feature patches.
    rho: Vec<f64>,
    pub residual_norm: f64,
}

/// Identifies one coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoeffKey {
    Gamma { neuron: Sign, feature: FeatureId },
    Rho { neuron: Sign, sample: usize, patch: usize },
}

impl CoeffTable {
    pub fn zeros(data: &Dataset) -> Self {
        let (k, n, np) = (data.bank.per_class(), data.len(), data.num_patches());
        CoeffTable {
            per_class: k,
            n,
            patches: np,
            feature_patches: data.samples.iter().map(|s| s.feature_patch).collect(),
            dominant_patches: data.samples.iter().map(|s| s.dominant_patch).collect(),
            gamma: vec![0.0; 2 * 2 * k],
            rho: vec![0.0; 2 * n * np],
            residual_norm: 0.0,
        }
    }

    fn gamma_index(&self, neuron: Sign, feature: FeatureId) -> usize {
        neuron.slot() * 2 * self.per_class + feature.class.slot() * self.per_class + feature.k
    }

    fn rho_index(&self, neuron: Sign, sample: usize, patch: usize) -> usize {
        (neuron.slot() * self.n + sample) * self.patches + patch
    }

    pub fn gamma(&self, neuron: Sign, feature: FeatureId) -> f64 {
        self.gamma[self.gamma_index(neuron, feature)]
    }

    pub fn rho(&self, neuron: Sign, sample: usize, patch: usize) -> f64 {
        self.rho[self.rho_index(neuron, sample, patch)]
    }

    pub fn get(&self, key: CoeffKey) -> f64 {
        match key {
            CoeffKey::Gamma { neuron, feature } => self.gamma(neuron, feature),
            CoeffKey::Rho { neuron, sample, patch } => self.rho(neuron, sample, patch),
        }
    }

    /// Every coefficient key in a fixed order: all `γ`, then all `ρ` off the feature patches.
    pub fn keys(&self) -> Vec<CoeffKey> {
        let mut keys = Vec::new();
        for neuron in Sign::BOTH {
            for class in Sign::BOTH {
                for k in 0..self.per_class {
                    keys.push(CoeffKey::Gamma {
                        neuron,
                        feature: FeatureId { class, k },
                    });
                }
            }
        }
        for neuron in Sign::BOTH {
            for sample in 0..self.n {
                for patch in (0..self.patches).filter(|&p| p != self.feature_patches[sample]) {
                    keys.push(CoeffKey::Rho { neuron, sample, patch });
                }
            }
        }
        keys
    }

    pub fn values(&self) -> Vec<f64> {
        self.keys().into_iter().map(|k| self.get(k)).collect()
    }

    /// Rebuilds `W − W⁰` from the coefficients.
    pub fn reconstruct(&self, data: &Dataset) -> Filters {
        let d = data.dim();
        let alpha = data.config.feature_noise;
        let mut out = Filters::zeros(d, 1);
        for s in Sign::BOTH {
            let row = out.row_mut(s, 0);
            for id in data.bank.ids() {
                row[data.bank.coordinate(id)] += s.value() * id.class.value() * self.gamma(s, id);
            }
            for (i, sample) in data.samples.iter().enumerate() {
                for p in (0..self.patches).filter(|&p| p != sample.feature_patch) {
                    let xi = sample.noise_patch(p);
                    let b = s.value() * sample.label.value() * self.rho(s, i, p) / dot(xi, xi);
                    for (r, x) in row.iter_mut().zip(xi) {
                        *r += b * x;
                    }
                    if p == sample.dominant_patch {
                        let c = data.bank.coordinate(FeatureId {
                            class: sample.noise_sign,
                            k: 0,
                        });
                        row[c] += alpha * b;
                    }
                }
            }
        }
        out
    }

    /// Largest value in each reporting group.
    pub fn summary(&self) -> CoeffSummary {
        let mut s = CoeffSummary::default();
        for key in self.keys() {
            let v = self.get(key);
            let slot = match key {
                CoeffKey::Gamma { neuron, feature } if neuron == feature.class => &mut s.max_gamma_own,
                CoeffKey::Gamma { .. } => &mut s.max_gamma_cross,
                CoeffKey::Rho { sample, patch, .. } if patch == self.dominant_patches[sample] => &mut s.max_rho_dominant,
                CoeffKey::Rho { .. } => &mut s.max_rho_background,
            };
            *slot = slot.max(v);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffSummary {
    pub max_gamma_own: f64,
    pub max_gamma_cross: f64,
    pub max_rho_dominant: f64,
    pub max_rho_background: f64,
}

impl Default for CoeffSummary {
    fn default() -> Self {
        CoeffSummary {
            max_gamma_own: f64::NEG_INFINITY,
            max_gamma_cross: f64::NEG_INFINITY,
            max_rho_dominant: f64::NEG_INFINITY,
            max_rho_background: f64::NEG_INFINITY,
        }
    }
}

impl CoeffSummary {
    pub const COLUMNS: [&'static str; 4] = ["max_gamma_own", "max_gamma_cross", "max_rho_dominant", "max_rho_background"];

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.max_gamma_own, self.max_gamma_cross, self.max_rho_dominant, self.max_rho_background]
    }
}

pub(crate) fn require_single_neuron(w: &Weights) -> Result<()> {
    if w.width() != 1 {
        return Err(Error::Unsupported(format!(
            "the decomposition is defined for one neuron per sign, got {}",
            w.width()
        )));
    }
    Ok(())
}

/// How the noise coefficients are solved for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    NormalEquations,
    Householder,
}

/// Condition number above which the noise basis counts as singular.
pub const MAX_CONDITION: f64 = 1e10;

/// Factorized projection onto the noise span of one dataset.
pub struct Projector {
    /// `(i, p)` for every non-feature patch, sample-major.
    entries: Vec<(usize, usize)>,
    basis: DMatrix<f64>,
    factor: Factor,
}

enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Qr(nalgebra::QR<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

fn noise_entries(data: &Dataset) -> Vec<(usize, usize)> {
    data.samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..data.num_patches()).filter(move |&p| p != s.feature_patch).map(move |p| (i, p)))
        .collect()
}

impl Projector {
    pub fn new(data: &Dataset, solver: Solver) -> Result<Self> {
        let entries = noise_entries(data);
        let d = data.dim();
        if entries.len() > d {
            return Err(Error::SingularBasis(format!("{} noise vectors in dimension {d}", entries.len())));
        }
        let basis = DMatrix::from_fn(d, entries.len(), |r, c| {
            let (i, p) = entries[c];
            data.samples[i].noise_patch(p)[r]
        });
        let gram = basis.tr_mul(&basis);
        let eig = gram.clone().symmetric_eigen();
        let (lo, lo_at) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(k, &v)| (v, k))
            .fold((f64::INFINITY, 0), |acc, (v, k)| if v < acc.0 { (v, k) } else { acc });
        let hi = eig.eigenvalues.max();
        if !(lo > 0.0) || hi / lo > MAX_CONDITION * MAX_CONDITION {
            let dir = eig.eigenvectors.column(lo_at);
            let mut heavy: Vec<(f64, usize)> = dir.iter().enumerate().map(|(k, v)| (v.abs(), k)).collect();
            heavy.sort_by(|a, b| b.0.total_cmp(&a.0));
            let names: Vec<String> = heavy
                .iter()
                .take(3)
                .map(|&(_, k)| format!("xi[{}][{}]", entries[k].0, entries[k].1))
                .collect();
            return Err(Error::SingularBasis(format!(
                "noise basis condition number {:.3e} exceeds {MAX_CONDITION:e}; near-dependence among {}",
                (hi / lo.max(0.0)).sqrt(),
                names.join(", ")
            )));
        }
        let factor = match solver {
            Solver::NormalEquations => Factor::Cholesky(gram.cholesky().ok_or_else(|| Error::SingularBasis("Cholesky failed".into()))?),
            Solver::Householder => Factor::Qr(basis.clone().qr()),
        };
        Ok(Projector { entries, basis, factor })
    }

    fn solve(&self, target: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.factor {
            Factor::Cholesky(ch) => Ok(ch.solve(&self.basis.tr_mul(target))),
            Factor::Qr(qr) => {
                let qtb = qr.q().tr_mul(target);
                qr.r()
                    .solve_upper_triangular(&qtb)
                    .ok_or_else(|| Error::SingularBasis("triangular solve failed".into()))
            }
        }
    }

    /// Coefficients of `weights − initial` in the `(γ, ρ)` convention.
    pub fn project(&self, weights: &Weights, initial: &Weights, data: &Dataset) -> Result<CoeffTable> {
        require_single_neuron(weights)?;
        require_single_neuron(initial)?;
        let alpha = data.config.feature_noise;
        let mut table = CoeffTable::zeros(data);
        let mut residual_sq = 0.0;
        for s in Sign::BOTH {
            let delta: Vec<f64> = weights
                .filters
                .row(s, 0)
                .iter()
                .zip(initial.filters.row(s, 0))
                .map(|(a, b)| a - b)
                .collect();
            // Features are coordinate vectors and the noise is zero there.
            let mut along_v = vec![0.0; data.bank.len()];
            let mut rest = delta.clone();
            for id in data.bank.ids() {
                let c = data.bank.coordinate(id);
                along_v[data.bank.slot(id)] = delta[c];
                rest[c] = 0.0;
            }
            let target = DVector::from_vec(rest.clone());
            let coef = self.solve(&target)?;
            let fitted = &self.basis * &coef;
            residual_sq += fitted.iter().zip(&rest).map(|(f, r)| (f - r).powi(2)).sum::<f64>();

            let mut alpha_part = [0.0; 2];
            for (c, &(i, p)) in self.entries.iter().enumerate() {
                let sample = &data.samples[i];
                let xi = sample.noise_patch(p);
                let idx = table.rho_index(s, i, p);
                table.rho[idx] = s.value() * sample.label.value() * dot(xi, xi) * coef[c];
                if p == sample.dominant_patch {
                    alpha_part[sample.noise_sign.slot()] += alpha * coef[c];
                }
            }
            for id in data.bank.ids() {
                let mut raw = along_v[data.bank.slot(id)];
                if id.k == 0 {
                    raw -= alpha_part[id.class.slot()];
                }
                let idx = table.gamma_index(s, id);
                table.gamma[idx] = s.value() * id.class.value() * raw;
            }
        }
        table.residual_norm = residual_sq.sqrt();
        Ok(table)
    }
}

/// Projects `W − W⁰` onto the feature and noise directions.
pub fn project_coefficients(weights: &Weights, initial: &Weights, data: &Dataset) -> Result<CoeffTable> {
    Projector::new(data, Solver::NormalEquations)?.project(weights, initial, data)
}

/// Accumulates the coefficients step by step from the gradient's per-patch factors.
///
/// The step at `W^(t)` adds `−η c_s(i,p) x_i^(p)` to `w_s`, where
/// `c_s(i,p) = ∂L/∂z_i^(p) · s · φ'(⟨w_s, x_i^(p)⟩)`. Feature patches feed `γ`
/// and noise patches feed `ρ`; the feature-noise copy in `x_i^(p̃)` is carried
/// by the `α` term of the decomposition.
#[derive(Clone, Debug)]
pub struct CoeffRecorder {
    table: CoeffTable,
    noise_sq: Vec<f64>,
    tolerance: f64,
    decreases: usize,
    first_decrease: Option<(usize, CoeffKey, f64)>,
    snapshot_every: Option<usize>,
    snapshots: Vec<(usize, CoeffTable)>,
    act: ActivationParams,
}

impl CoeffRecorder {
    pub fn new(data: &Dataset, act: ActivationParams) -> Self {
        let np = data.num_patches();
        let mut noise_sq = vec![0.0; data.len() * np];
        for (i, s) in data.samples.iter().enumerate() {
            for p in (0..np).filter(|&p| p != s.feature_patch) {
                let xi = s.noise_patch(p);
                noise_sq[i * np + p] = dot(xi, xi);
            }
        }
        CoeffRecorder {
            table: CoeffTable::zeros(data),
            noise_sq,
            tolerance: 1e-12,
            decreases: 0,
            first_decrease: None,
            snapshot_every: None,
            snapshots: Vec::new(),
            act,
        }
    }

    /// Keeps a copy of the table at every multiple of `every`.
    pub fn with_snapshots(mut self, every: usize) -> Self {
        self.snapshot_every = Some(every.max(1));
        self
    }

    pub fn table(&self) -> &CoeffTable {
        &self.table
    }

    pub fn snapshots(&self) -> &[(usize, CoeffTable)] {
        &self.snapshots
    }

    /// Number of single-step decreases larger than the tolerance.
    pub fn decreases(&self) -> usize {
        self.decreases
    }

    pub fn first_decrease(&self) -> Option<(usize, CoeffKey, f64)> {
        self.first_decrease
    }

    fn bump(&mut self, step: usize, key: CoeffKey, idx: usize, is_gamma: bool, delta: f64) {
        if delta < -self.tolerance {
            self.decreases += 1;
            if self.first_decrease.is_none() {
                self.first_decrease = Some((step, key, delta));
            }
        }
        if is_gamma {
            self.table.gamma[idx] += delta;
        } else {
            self.table.rho[idx] += delta;
        }
    }
}

impl StepObserver for CoeffRecorder {
    fn columns(&self) -> Vec<String> {
        CoeffSummary::COLUMNS.iter().map(|s| s.to_string()).collect()
    }

    fn summary(&self) -> Vec<f64> {
        self.table.summary().to_vec()
    }

    fn on_step(&mut self, step: usize, data: &Dataset, eval: &Evaluation, learning_rate: f64) {
        if let Some(every) = self.snapshot_every {
            if step % every == 0 {
                self.snapshots.push((step, self.table.clone()));
            }
        }
        let np = data.num_patches();
        // Per-step increments are gathered first so that each coefficient sees one update.
        let mut gamma_delta = vec![0.0; self.table.gamma.len()];
        for s in Sign::BOTH {
            for (i, sample) in data.samples.iter().enumerate() {
                let y = sample.label.value();
                for p in 0..np {
                    let a = eval.table.pre_activation(i, p, s, 0);
                    let c = eval.duals.dual[i * np + p] * s.value() * phi_prime(a, self.act);
                    if p == sample.feature_patch {
                        let idx = self.table.gamma_index(s, sample.feature());
                        gamma_delta[idx] += -learning_rate * s.value() * y * c;
                    } else {
                        let idx = self.table.rho_index(s, i, p);
                        let delta = -learning_rate * s.value() * y * self.noise_sq[i * np + p] * c;
                        self.bump(step, CoeffKey::Rho { neuron: s, sample: i, patch: p }, idx, false, delta);
                    }
                }
            }
        }
        for s in Sign::BOTH {
            for id in data.bank.ids() {
                let idx = self.table.gamma_index(s, id);
                let delta = gamma_delta[idx];
                self.bump(step, CoeffKey::Gamma { neuron: s, feature: id }, idx, true, delta);
            }
        }
    }
}

/// One inequality of the initialization event evaluated at a realized draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    /// The inequality as tested.
    pub statement: String,
    /// The value checked against the bounds (a minimum for lower bounds, a maximum for upper bounds).
    pub measured: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub pass: bool,
}

impl Clause {
    fn band(name: &str, statement: String, lo_seen: f64, hi_seen: f64, lower: f64, upper: f64) -> Vec<Clause> {
        vec![
            Clause {
                name: format!("{name} (lower)"),
                statement: statement.clone(),
                measured: lo_seen,
                lower: Some(lower),
                upper: None,
                pass: lo_seen >= lower,
            },
            Clause {
                name: format!("{name} (upper)"),
                statement,
                measured: hi_seen,
                lower: None,
                upper: Some(upper),
                pass: hi_seen <= upper,
            },
        ]
    }

    fn at_most(name: &str, statement: String, seen: f64, upper: f64) -> Clause {
        Clause {
            name: name.to_string(),
            statement,
            measured: seen,
            lower: None,
            upper: Some(upper),
            pass: seen <= upper,
        }
    }

    /// Signed slack; negative when the clause fails.
    pub fn margin(&self) -> f64 {
        match (self.lower, self.upper) {
            (Some(lo), _) => self.measured - lo,
            (_, Some(hi)) => hi - self.measured,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EInitReport {
    pub clauses: Vec<Clause>,
}

impl EInitReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Clause> {
        self.clauses.iter().filter(|c| !c.pass).collect()
    }
}

/// Relative threshold on the smallest singular value for linear independence.
pub const INDEPENDENCE_TOL: f64 = 1.0 / MAX_CONDITION;

/// Evaluates every clause of the initialization event for `data` and `initial`.
pub fn check_e_init(data: &Dataset, initial: &Weights) -> Result<EInitReport> {
    require_single_neuron(initial)?;
    let cfg = &data.config;
    let n = data.len() as f64;
    let d = data.dim();
    let log_d = (d as f64).ln();
    let sqrt_d = (d as f64).sqrt();
    let (sd, sb, s0) = (cfg.sigma_dominant, cfg.sigma_background, initial.init.sigma_0);
    let mut clauses = Vec::new();

    let counts: Vec<f64> = Sign::BOTH.iter().map(|&s| data.class_count(s) as f64).collect();
    clauses.extend(Clause::band(
        "class balance",
        "25n/52 <= |V_s| <= 27n/52".into(),
        counts.iter().cloned().fold(f64::INFINITY, f64::min),
        counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        25.0 * n / 52.0,
        27.0 * n / 52.0,
    ));
    for id in data.bank.ids() {
        let rho = cfg.freqs[id.k];
        let c = data.feature_count(id) as f64;
        clauses.extend(Clause::band(
            &format!("feature count {:?} k={}", id.class, id.k + 1),
            "rho_k n/4 <= |V_{s,k}| <= 3 rho_k n/4".into(),
            c,
            c,
            rho * n / 4.0,
            3.0 * rho * n / 4.0,
        ));
    }
    let lead = FeatureId { class: Sign::Pos, k: 0 };
    let mut covered = vec![false; data.num_patches()];
    for &i in &data.index.by_feature[data.bank.slot(lead)] {
        covered[data.samples[i].feature_patch] = true;
    }
    let n_covered = covered.iter().filter(|&&c| c).count();
    clauses.push(Clause {
        name: "feature patch coverage".into(),
        statement: "union of p_i* over V_{1,1} is [P]".into(),
        measured: n_covered as f64,
        lower: Some(data.num_patches() as f64),
        upper: None,
        pass: n_covered == data.num_patches(),
    });

    let mut init_feature: f64 = 0.0;
    let (mut init_dom, mut init_bg): (f64, f64) = (0.0, 0.0);
    for s in Sign::BOTH {
        let w = initial.filters.row(s, 0);
        for id in data.bank.ids() {
            init_feature = init_feature.max(data.bank.inner(id, w).abs());
        }
        for sample in &data.samples {
            for p in (0..data.num_patches()).filter(|&p| p != sample.feature_patch) {
                let v = dot(w, sample.noise_patch(p)).abs();
                if p == sample.dominant_patch {
                    init_dom = init_dom.max(v);
                } else {
                    init_bg = init_bg.max(v);
                }
            }
        }
    }
    clauses.push(Clause::at_most("init vs features", "|<w_s^0, v>| <= sigma_0 log d".into(), init_feature, s0 * log_d));
    clauses.push(Clause::at_most(
        "init vs dominant noise",
        "|<w_s^0, xi_dom>| <= sigma_0 sigma_d sqrt(d) log d".into(),
        init_dom,
        s0 * sd * sqrt_d * log_d,
    ));
    clauses.push(Clause::at_most(
        "init vs background noise",
        "|<w_s^0, xi_bg>| <= sigma_0 sigma_b sqrt(d) log d".into(),
        init_bg,
        s0 * sb * sqrt_d * log_d,
    ));

    let entries = noise_entries(data);
    let xi = DMatrix::from_fn(d, entries.len(), |r, c| {
        let (i, p) = entries[c];
        data.samples[i].noise_patch(p)[r]
    });
    let gram = xi.tr_mul(&xi);
    let dominant: Vec<bool> = entries.iter().map(|&(i, p)| p == data.samples[i].dominant_patch).collect();
    let mut norms = [(f64::INFINITY, f64::NEG_INFINITY); 2];
    let mut cross = [0.0f64; 3];
    for a in 0..entries.len() {
        let slot = if dominant[a] { 0 } else { 1 };
        let sq = gram[(a, a)];
        norms[slot] = (norms[slot].0.min(sq), norms[slot].1.max(sq));
        for b in 0..a {
            let kind = match (dominant[a], dominant[b]) {
                (true, true) => 0,
                (false, false) => 2,
                _ => 1,
            };
            cross[kind] = cross[kind].max(gram[(a, b)].abs());
        }
    }
    for (slot, (name, sigma)) in [("dominant", sd), ("background", sb)].into_iter().enumerate() {
        if norms[slot].0.is_finite() {
            clauses.extend(Clause::band(
                &format!("{name} noise norm"),
                format!("sigma^2 d/2 <= |xi_{name}|^2 <= 3 sigma^2 d/2"),
                norms[slot].0,
                norms[slot].1,
                0.5 * sigma * sigma * d as f64,
                1.5 * sigma * sigma * d as f64,
            ));
        }
    }
    for (kind, (name, bound)) in [
        ("dominant/dominant", sd * sd),
        ("dominant/background", sd * sb),
        ("background/background", sb * sb),
    ]
    .into_iter()
    .enumerate()
    {
        clauses.push(Clause::at_most(
            &format!("{name} noise overlap"),
            "|<xi, xi'>| <= sigma sigma' sqrt(d) log d".into(),
            cross[kind],
            bound * sqrt_d * log_d,
        ));
    }

    let (smallest, largest) = basis_singular_range(data);
    clauses.push(Clause {
        name: "linear independence".into(),
        statement: "sigma_min([v ; x_i^(p), p != p_i*]) > 1e-10 sigma_max".into(),
        measured: smallest,
        lower: Some(INDEPENDENCE_TOL * largest),
        upper: None,
        pass: smallest > INDEPENDENCE_TOL * largest,
    });
    Ok(EInitReport { clauses })
}

/// Smallest and largest singular values of the features plus all non-feature patches.
pub fn basis_singular_range(data: &Dataset) -> (f64, f64) {
    let d = data.dim();
    let mut columns: Vec<Vec<f64>> = data.bank.ids().map(|id| data.bank.vector(id)).collect();
    for s in &data.samples {
        for p in (0..data.num_patches()).filter(|&p| p != s.feature_patch) {
            columns.push(s.patch(p).to_vec());
        }
    }
    if columns.len() > d {
        return (0.0, 1.0);
    }
    let basis = DMatrix::from_fn(d, columns.len(), |r, c| columns[c][r]);
    let sv = basis.singular_values();
    (sv.min(), sv.max())
}

/// Gaps between inner products (or activations) and the coefficients that approximate them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ApproxAudit {
    /// `max |⟨w_s, v_{s,k}⟩ − γ_s(s,k)|`.
    pub feature_own: f64,
    /// `max |⟨w_s, v_{−s,k}⟩ + γ_s(−s,k)|`.
    pub feature_cross: f64,
    /// `max |⟨w_{y_i}, ξ_i^(p)⟩ − ρ_{y_i}(i,p)|`.
    pub noise_own: f64,
    /// `max |⟨w_{−y_i}, ξ_i^(p)⟩ + ρ_{−y_i}(i,p)|`.
    pub noise_cross: f64,
    /// `max |φ(⟨w_s, v_{s,k}⟩) − γ_s(s,k)|`.
    pub phi_feature_own: f64,
    /// `max |φ(⟨w_s, v_{−s,k}⟩) + β γ_s(−s,k)|`.
    pub phi_feature_cross: f64,
    /// `max |φ(⟨w_{y_i}, ξ_i^(p)⟩) − ρ_{y_i}(i,p)|`.
    pub phi_noise_own: f64,
    /// `max |φ(⟨w_{−y_i}, ξ_i^(p)⟩) + β ρ_{−y_i}(i,p)|`.
    pub phi_noise_cross: f64,
    /// `max |φ(⟨w_{y_i}, x_i^(p̃)⟩) − ρ_{y_i}(i,p̃)|` and the opposite-neuron analogue.
    pub phi_dominant_own: f64,
    pub phi_dominant_cross: f64,
}

impl ApproxAudit {
    pub fn max_feature_gap(&self) -> f64 {
        self.feature_own.max(self.feature_cross)
    }

    pub fn max_noise_gap(&self) -> f64 {
        self.noise_own.max(self.noise_cross)
    }
}

/// Measures how well the coefficients approximate the network's inner products.
pub fn approx_error_audit(weights: &Weights, table: &CoeffTable, data: &Dataset) -> Result<ApproxAudit> {
    require_single_neuron(weights)?;
    let act = weights.act;
    let beta = act.slope;
    let mut audit = ApproxAudit::default();
    let upd = |slot: &mut f64, v: f64| *slot = slot.max(v.abs());
    for s in Sign::BOTH {
        let w = weights.filters.row(s, 0);
        for id in data.bank.ids() {
            let inner = data.bank.inner(id, w);
            let g = table.gamma(s, id);
            if id.class == s {
                upd(&mut audit.feature_own, inner - g);
                upd(&mut audit.phi_feature_own, phi(inner, act) - g);
            } else {
                upd(&mut audit.feature_cross, inner + g);
                upd(&mut audit.phi_feature_cross, phi(inner, act) + beta * g);
            }
        }
        for (i, sample) in data.samples.iter().enumerate() {
            let own = sample.label == s;
            for p in (0..data.num_patches()).filter(|&p| p != sample.feature_patch) {
                let inner = dot(w, sample.noise_patch(p));
                let r = table.rho(s, i, p);
                if own {
                    upd(&mut audit.noise_own, inner - r);
                    upd(&mut audit.phi_noise_own, phi(inner, act) - r);
                } else {
                    upd(&mut audit.noise_cross, inner + r);
                    upd(&mut audit.phi_noise_cross, phi(inner, act) + beta * r);
                }
                if p == sample.dominant_patch {
                    let full = phi(dot(w, sample.patch(p)), act);
                    if own {
                        upd(&mut audit.phi_dominant_own, full - r);
                    } else {
                        upd(&mut audit.phi_dominant_cross, full + beta * r);
                    }
                }
            }
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, InitConfig};
    use crate::synthdata::{generate_dataset, DataConfig, Sample};
    use crate::train::{run_training, Method, RunHooks, TrainConfig};

    fn tiny(seed: u64) -> Dataset {
        generate_dataset(&DataConfig {
            dim: 64,
            n_train: 10,
            ..DataConfig::three_tier(seed)
        })
        .unwrap()
    }

    fn init(dim: usize, seed: u64) -> Weights {
        init_weights(dim, 1, ActivationParams::default(), InitConfig { sigma_0: 0.01, seed }).unwrap()
    }

    fn rel_diff(a: &Filters, b: &Filters) -> f64 {
        a.sub(b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn initial_weights_have_zero_coefficients() {
        let data = tiny(1);
        let w0 = init(64, 2);
        let t = project_coefficients(&w0, &w0, &data).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));
        assert_eq!(t.residual_norm, 0.0);
    }

    #[test]
    fn basis_direction_is_recovered() {
        let data = tiny(3);
        let w0 = init(64, 4);
        let mut w = w0.clone();
        let id = FeatureId { class: Sign::Pos, k: 1 };
        w.filters.row_mut(Sign::Pos, 0)[data.bank.coordinate(id)] += 3.0;
        let t = project_coefficients(&w, &w0, &data).unwrap();
        for key in t.keys() {
            let expected = if key == (CoeffKey::Gamma { neuron: Sign::Pos, feature: id }) { 3.0 } else { 0.0 };
            assert!((t.get(key) - expected).abs() < 1e-10, "{key:?}");
        }
    }

    #[test]
    fn recursion_matches_projection_and_round_trips() {
        for method in Method::ALL {
            let data = tiny(5);
            let w0 = init(64, 6);
            let mut rec = CoeffRecorder::new(&data, w0.act).with_snapshots(10);
            let cfg = TrainConfig {
                log_every: 10,
                ..TrainConfig::new(method, 0.5, 50)
            };
            let out = run_training(
                &w0,
                &data,
                &cfg,
                RunHooks {
                    observer: Some(&mut rec),
                    ..Default::default()
                },
            )
            .unwrap();
            let projector = Projector::new(&data, Solver::NormalEquations).unwrap();
            let projected = projector.project(&out.weights, &w0, &data).unwrap();
            let recursed = rec.table();
            let scale = projected.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for key in projected.keys() {
                let (a, b) = (projected.get(key), recursed.get(key));
                assert!((a - b).abs() <= 1e-6 * scale, "{method}: {key:?} {a} vs {b}");
            }
            let delta = out.weights.filters.sub(&w0.filters);
            assert!(rel_diff(&projected.reconstruct(&data), &delta) < 1e-8);
            assert!(rel_diff(&recursed.reconstruct(&data), &delta) < 1e-8);
            assert!(projected.residual_norm <= 1e-8 * delta.norm());
            assert_eq!(rec.snapshots().len(), 5);
        }
    }

    #[test]
    fn solvers_agree() {
        let data = tiny(7);
        let w0 = init(64, 8);
        let cfg = TrainConfig::new(Method::Cutout, 0.5, 30);
        let out = run_training(&w0, &data, &cfg, RunHooks::default()).unwrap();
        let a = Projector::new(&data, Solver::NormalEquations).unwrap().project(&out.weights, &w0, &data).unwrap();
        let b = Projector::new(&data, Solver::Householder).unwrap().project(&out.weights, &w0, &data).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn erm_and_cutout_coefficients_never_decrease() {
        for method in [Method::Erm, Method::Cutout] {
            let data = tiny(9);
            let w0 = init(64, 10);
            let mut rec = CoeffRecorder::new(&data, w0.act);
            run_training(
                &w0,
                &data,
                &TrainConfig::new(method, 1.0, 100),
                RunHooks {
                    observer: Some(&mut rec),
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(rec.decreases(), 0, "{method}: {:?}", rec.first_decrease());
        }
    }

    #[test]
    fn duplicated_noise_breaks_independence() {
        let data = tiny(11);
        let mut samples = data.samples.clone();
        let copy: Sample = samples[0].clone();
        samples[1] = copy;
        let bad = crate::synthdata::assemble(data.config.clone(), samples).unwrap();
        let report = check_e_init(&bad, &init(64, 1)).unwrap();
        let clause = report.clauses.iter().find(|c| c.name == "linear independence").unwrap();
        assert!(!clause.pass);
        assert!(Projector::new(&bad, Solver::NormalEquations).is_err());
    }

    #[test]
    fn approx_gap_at_initialization_is_the_initial_overlap() {
        let data = tiny(12);
        let w0 = init(64, 13);
        let t = CoeffTable::zeros(&data);
        let audit = approx_error_audit(&w0, &t, &data).unwrap();
        let mut own: f64 = 0.0;
        for s in Sign::BOTH {
            for k in 0..3 {
                own = own.max(data.bank.inner(FeatureId { class: s, k }, w0.filters.row(s, 0)).abs());
            }
        }
        assert_eq!(audit.feature_own, own);
    }

    #[test]
    fn multi_neuron_weights_are_rejected() {
        let data = tiny(1);
        let w = init_weights(64, 2, ActivationParams::default(), InitConfig { sigma_0: 0.01, seed: 1 }).unwrap();
        assert!(matches!(project_coefficients(&w, &w, &data), Err(Error::Unsupported(_))));
    }
}
