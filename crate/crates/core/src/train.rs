//! Full-batch gradient descent on the ERM, Cutout and CutMix objectives.
//!
//! Every objective depends on the weights only through the per-patch outputs
//! `z_i^(p)`. A step therefore runs in three passes:
//!
//! 1. a [`PatchTable`] of pre-activations and patch outputs,
//! 2. the objective's loss and its derivative with respect to each `z_i^(p)`
//!    (the "dual" table),
//! 3. one Jacobian-transpose pass mapping the dual table to a filter gradient.
//!
//! Cutout and CutMix expectations are enumerated exactly.
//!
//! For CutMix, pair `(i, j)` with subset `S` has output
//! `f = Σ_{p∈S} z_i^(p) + Σ_{p∉S} z_j^(p)`. Because `P(S) = P(Sᶜ)` and
//! `(i, j, S)` mirrors `(j, i, Sᶜ)`, the dual entry for sample `i` only needs
//! the pairs where `i` supplies the kept patches:
//! `∂L/∂z_i^(p) = (2/n²) Σ_S P(S) 1{p∈S} Σ_j c(i, j, S)` with
//! `c = (|S|/P) y_i ℓ'(y_i f) + (1 − |S|/P) y_j ℓ'(y_j f)`.
//! Rows are independent, so the pair loop parallelizes over `i` without
//! changing any floating-point reduction order.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augment::{cut_sets, cutmix_subsets, MixSubset, PatchMask};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{logistic_loss, logistic_loss_prime, phi, phi_prime, Filters, Weights};
use crate::synthdata::{Dataset, Sample, Sign};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Erm,
    Cutout,
    CutMix,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Erm, Method::Cutout, Method::CutMix];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Cutout => "cutout",
            Method::CutMix => "cutmix",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Method::Erm),
            "cutout" => Ok(Method::Cutout),
            "cutmix" => Ok(Method::CutMix),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    pub steps: usize,
    /// Number of patches removed by Cutout; ignored by the other methods.
    pub cut_size: usize,
    pub log_every: usize,
    pub grad_tol: Option<f64>,
}

impl TrainConfig {
    pub fn new(method: Method, learning_rate: f64, steps: usize) -> Self {
        TrainConfig {
            method,
            learning_rate,
            steps,
            cut_size: 1,
            log_every: (steps / 100).max(1),
            grad_tol: None,
        }
    }

    pub fn validate(&self, num_patches: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.method == Method::Cutout {
            check_cut_size(num_patches, self.cut_size)?;
        }
        if let Some(tol) = self.grad_tol {
            if !(tol > 0.0) {
                return Err(Error::Config("grad_tol must be positive".into()));
            }
        }
        Ok(())
    }
}

fn check_cut_size(num_patches: usize, cut_size: usize) -> Result<()> {
    if cut_size == 0 || 2 * cut_size >= num_patches {
        return Err(Error::Config(format!(
            "cut size must satisfy 1 <= C < P/2, got C={cut_size}, P={num_patches}"
        )));
    }
    Ok(())
}

/// Pre-activations and patch outputs of every training patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTable {
    n: usize,
    patches: usize,
    width: usize,
    /// `[i][p][sign][neuron]`, signs ordered `Pos, Neg`.
    pre: Vec<f64>,
    /// `[i][p]`.
    z: Vec<f64>,
}

impl PatchTable {
    pub fn compute(weights: &Weights, data: &Dataset, exec: &Executor) -> Self {
        let (n, np, m) = (data.len(), data.num_patches(), weights.width());
        let rows = exec.map(n, |i| {
            let sample = &data.samples[i];
            let mut pre = Vec::with_capacity(np * 2 * m);
            let mut z = Vec::with_capacity(np);
            for p in 0..np {
                let x = sample.patch(p);
                let mut out = 0.0;
                for s in Sign::BOTH {
                    let mut acc = 0.0;
                    for j in 0..m {
                        let a = crate::model::dot(weights.filters.row(s, j), x);
                        pre.push(a);
                        acc += phi(a, weights.act);
                    }
                    out += s.value() * acc / m as f64;
                }
                z.push(out);
            }
            (pre, z)
        });
        let mut table = PatchTable {
            n,
            patches: np,
            width: m,
            pre: Vec::with_capacity(n * np * 2 * m),
            z: Vec::with_capacity(n * np),
        };
        for (pre, z) in rows {
            table.pre.extend(pre);
            table.z.extend(z);
        }
        table
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_patches(&self) -> usize {
        self.patches
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn patch_output(&self, i: usize, p: usize) -> f64 {
        self.z[i * self.patches + p]
    }

    pub fn pre_activation(&self, i: usize, p: usize, s: Sign, neuron: usize) -> f64 {
        self.pre[((i * self.patches + p) * 2 + s.slot()) * self.width + neuron]
    }

    pub fn output(&self, i: usize) -> f64 {
        self.z[i * self.patches..(i + 1) * self.patches].iter().sum()
    }

    /// Output with the patches in `removed` zeroed.
    pub fn masked_output(&self, i: usize, removed: PatchMask) -> f64 {
        (0..self.patches)
            .filter(|&p| !removed.contains(p))
            .map(|p| self.patch_output(i, p))
            .sum()
    }
}

/// Loss value (when requested) and derivative with respect to each patch output.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTable {
    pub loss: Option<f64>,
    /// `[i][p]`.
    pub dual: Vec<f64>,
}

/// One of the three training objectives with its enumerated augmentation sets.
#[derive(Clone, Debug)]
pub struct Objective {
    method: Method,
    cuts: Vec<PatchMask>,
    subsets: Vec<MixSubset>,
}

impl Objective {
    pub fn new(method: Method, num_patches: usize, cut_size: usize) -> Result<Self> {
        let cuts = match method {
            Method::Erm => cut_sets(num_patches, 0),
            Method::Cutout => {
                check_cut_size(num_patches, cut_size)?;
                cut_sets(num_patches, cut_size)
            }
            Method::CutMix => Vec::new(),
        };
        let subsets = match method {
            Method::CutMix => cutmix_subsets(num_patches),
            _ => Vec::new(),
        };
        Ok(Objective { method, cuts, subsets })
    }

    /// Cutout with an arbitrary cut size, including the degenerate `C = 0`.
    pub fn cutout_unchecked(num_patches: usize, cut_size: usize) -> Self {
        Objective {
            method: Method::Cutout,
            cuts: cut_sets(num_patches, cut_size),
            subsets: Vec::new(),
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn cuts(&self) -> &[PatchMask] {
        &self.cuts
    }

    /// Maps patch outputs `z` (`[i][p]`) and labels to the loss and its dual table.
    pub fn dual(&self, z: &[f64], labels: &[Sign], num_patches: usize, want_loss: bool, exec: &Executor) -> DualTable {
        match self.method {
            Method::Erm | Method::Cutout => self.cut_dual(z, labels, num_patches, want_loss),
            Method::CutMix => self.mix_dual(z, labels, num_patches, want_loss, exec),
        }
    }

    fn cut_dual(&self, z: &[f64], labels: &[Sign], np: usize, want_loss: bool) -> DualTable {
        let n = labels.len();
        let weight = 1.0 / (n as f64 * self.cuts.len() as f64);
        let mut dual = vec![0.0; n * np];
        let mut loss = 0.0;
        for (i, label) in labels.iter().enumerate() {
            let y = label.value();
            let row = &z[i * np..(i + 1) * np];
            for &cut in &self.cuts {
                let f: f64 = (0..np).filter(|&p| !cut.contains(p)).map(|p| row[p]).sum();
                if want_loss {
                    loss += weight * logistic_loss(y * f);
                }
                let g = weight * y * logistic_loss_prime(y * f);
                for p in (0..np).filter(|&p| !cut.contains(p)) {
                    dual[i * np + p] += g;
                }
            }
        }
        DualTable {
            loss: want_loss.then_some(loss),
            dual,
        }
    }

    fn mix_dual(&self, z: &[f64], labels: &[Sign], np: usize, want_loss: bool, exec: &Executor) -> DualTable {
        let n = labels.len();
        let kernel = MixKernel::new(z, labels, np, &self.subsets);
        let rows = exec.map(n, |i| kernel.row(i, want_loss));
        let scale = 2.0 / (n as f64 * n as f64);
        let mut dual = Vec::with_capacity(n * np);
        let mut loss = 0.0;
        for (row_dual, row_loss) in rows {
            dual.extend(row_dual.iter().map(|g| g * scale));
            loss += row_loss;
        }
        DualTable {
            loss: want_loss.then_some(loss / (n as f64 * n as f64)),
            dual,
        }
    }

    /// Loss, dual table and filter gradient at `weights`.
    pub fn evaluate(&self, weights: &Weights, data: &Dataset, want_loss: bool, exec: &Executor) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if weights.dim() != data.dim() {
            return Err(crate::error::shape(data.dim(), weights.dim()));
        }
        let table = PatchTable::compute(weights, data, exec);
        let labels: Vec<Sign> = data.samples.iter().map(|s| s.label).collect();
        let duals = self.dual(&table.z, &labels, data.num_patches(), want_loss, exec);
        let grad = backprop(weights, data, &table, &duals.dual, exec);
        Ok(Evaluation { table, duals, grad })
    }

    pub fn loss_and_grad(&self, weights: &Weights, data: &Dataset, exec: &Executor) -> Result<(f64, Filters)> {
        let e = self.evaluate(weights, data, true, exec)?;
        Ok((e.duals.loss.expect("loss requested"), e.grad))
    }
}

/// Everything computed for one gradient evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub table: PatchTable,
    pub duals: DualTable,
    pub grad: Filters,
}

/// Beyond this magnitude the product-of-exponentials shortcut could overflow.
const EXP_SAFE: f64 = 300.0;

/// Precomputed per-subset partial sums for the CutMix pair loop.
struct MixKernel<'a> {
    labels: &'a [Sign],
    np: usize,
    subsets: &'a [MixSubset],
    /// `kept[s][i] = Σ_{p∈S} z_i^(p)`.
    kept: Vec<Vec<f64>>,
    /// `rest[s][j] = Σ_{p∉S} z_j^(p)`.
    rest: Vec<Vec<f64>>,
    exp_rest: Vec<[Vec<f64>; 2]>,
    opposite: [f64; 2],
    safe: bool,
}

impl<'a> MixKernel<'a> {
    fn new(z: &[f64], labels: &'a [Sign], np: usize, subsets: &'a [MixSubset]) -> Self {
        let n = labels.len();
        let mut kept = Vec::with_capacity(subsets.len());
        let mut rest = Vec::with_capacity(subsets.len());
        let mut largest: f64 = 0.0;
        for sub in subsets {
            let mut a = Vec::with_capacity(n);
            let mut b = Vec::with_capacity(n);
            for i in 0..n {
                let row = &z[i * np..(i + 1) * np];
                let (mut sa, mut sb) = (0.0, 0.0);
                for (p, zp) in row.iter().enumerate() {
                    if sub.mask.contains(p) {
                        sa += zp;
                    } else {
                        sb += zp;
                    }
                }
                largest = largest.max(sa.abs()).max(sb.abs());
                a.push(sa);
                b.push(sb);
            }
            kept.push(a);
            rest.push(b);
        }
        let safe = largest.is_finite() && largest < EXP_SAFE;
        let exp_rest = if safe {
            rest.iter()
                .map(|b| [b.iter().map(|v| v.exp()).collect(), b.iter().map(|v| (-v).exp()).collect()])
                .collect()
        } else {
            Vec::new()
        };
        let count = |s: Sign| labels.iter().filter(|&&l| l == s).count() as f64;
        MixKernel {
            labels,
            np,
            subsets,
            kept,
            rest,
            exp_rest,
            // number of partners with the opposite label, indexed by own label slot
            opposite: [count(Sign::Neg), count(Sign::Pos)],
            safe,
        }
    }

    /// Undivided dual row `Σ_S P(S) 1{p∈S} Σ_j c(i,j,S)` and the row's loss sum.
    fn row(&self, i: usize, want_loss: bool) -> (Vec<f64>, f64) {
        let yi = self.labels[i];
        let y = yi.value();
        let mut dual = vec![0.0; self.np];
        let mut loss = 0.0;
        for (s, sub) in self.subsets.iter().enumerate() {
            let a = self.kept[s][i];
            if !sub.mask.is_empty() {
                // Σ_j ℓ'(y_i f_ij) over all partners.
                let sum_prime = if self.safe {
                    let e = (y * a).exp();
                    let f = &self.exp_rest[s][yi.slot()];
                    -f.iter().map(|fj| 1.0 / (1.0 + e * fj)).sum::<f64>()
                } else {
                    self.rest[s].iter().map(|b| logistic_loss_prime(y * (a + b))).sum::<f64>()
                };
                // Partners of the other label add (1 - |S|/P) each, via ℓ'(-u) = -1 - ℓ'(u).
                let coef = y * (sum_prime + (1.0 - sub.ratio) * self.opposite[yi.slot()]);
                for (p, d) in dual.iter_mut().enumerate() {
                    if sub.mask.contains(p) {
                        *d += sub.prob * coef;
                    }
                }
            }
            if want_loss {
                let mut acc = 0.0;
                for (j, b) in self.rest[s].iter().enumerate() {
                    let u = y * (a + b);
                    acc += logistic_loss(u);
                    if self.labels[j] != yi {
                        // ℓ(-u) = ℓ(u) + u for the partner's share.
                        acc += (1.0 - sub.ratio) * u;
                    }
                }
                loss += sub.prob * acc;
            }
        }
        (dual, loss)
    }
}

/// Coordinates per parallel chunk of the Jacobian-transpose pass.
const BACKPROP_CHUNK: usize = 256;

/// Filter gradient `Σ_{i,p} dual(i,p) ∂z_i^(p)/∂W`.
pub fn backprop(weights: &Weights, data: &Dataset, table: &PatchTable, dual: &[f64], exec: &Executor) -> Filters {
    let (d, m, np) = (weights.dim(), weights.width(), data.num_patches());
    let mut grad = Filters::zeros(d, m);
    for s in Sign::BOTH {
        for j in 0..m {
            let coefs: Vec<f64> = (0..data.len() * np)
                .map(|ip| {
                    let (i, p) = (ip / np, ip % np);
                    let a = table.pre_activation(i, p, s, j);
                    dual[ip] * s.value() * phi_prime(a, weights.act) / m as f64
                })
                .collect();
            exec.for_chunks(grad.row_mut(s, j), BACKPROP_CHUNK, |chunk_index, out| {
                let start = chunk_index * BACKPROP_CHUNK;
                let end = start + out.len();
                for (ip, &c) in coefs.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let x = &data.samples[ip / np].patch(ip % np)[start..end];
                    for (g, xv) in out.iter_mut().zip(x) {
                        *g += c * xv;
                    }
                }
            });
        }
    }
    grad
}

/// Exact `L_ERM` and its gradient.
pub fn erm_loss_and_grad(weights: &Weights, data: &Dataset) -> Result<(f64, Filters)> {
    Objective::new(Method::Erm, data.num_patches(), 0)?.loss_and_grad(weights, data, &Executor::Serial)
}

/// Exact `L_Cutout` over all cut sets of size `cut_size`, and its gradient.
pub fn cutout_loss_and_grad(weights: &Weights, data: &Dataset, cut_size: usize) -> Result<(f64, Filters)> {
    Objective::new(Method::Cutout, data.num_patches(), cut_size)?.loss_and_grad(weights, data, &Executor::Serial)
}

/// Exact `L_CutMix` over all ordered pairs and subsets, and its gradient.
pub fn cutmix_loss_and_grad(weights: &Weights, data: &Dataset) -> Result<(f64, Filters)> {
    Objective::new(Method::CutMix, data.num_patches(), 0)?.loss_and_grad(weights, data, &Executor::Serial)
}

/// Hook invoked once per gradient step, before the update is applied.
pub trait StepObserver {
    /// Names of the extra trace columns this observer contributes.
    fn columns(&self) -> Vec<String>;

    /// Extra column values describing the current (pre-update) iterate.
    fn summary(&self) -> Vec<f64>;

    fn on_step(&mut self, step: usize, data: &Dataset, eval: &Evaluation, learning_rate: f64);
}

/// One logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// `φ(⟨w₊,v⟩) − φ(⟨w₋,v⟩)` per feature in bank order.
    pub feature_outputs: Vec<f64>,
    pub train_acc: f64,
    pub aug_acc: Option<f64>,
    pub probe_acc: Option<f64>,
    pub extra: Vec<f64>,
}

/// Time series of logged steps with a fixed column layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TraceLog {
    pub feature_names: Vec<String>,
    pub extra_names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl TraceLog {
    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = vec!["t".into(), "loss".into(), "grad_norm".into()];
        cols.extend(self.feature_names.iter().cloned());
        cols.extend(["acc_train", "acc_aug", "acc_test_snapshot"].map(String::from));
        cols.extend(self.extra_names.iter().cloned());
        cols
    }

    /// Writes the trace as CSV; absent values are empty fields.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.header().join(","))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut fields = vec![r.step.to_string(), r.loss.to_string(), r.grad_norm.to_string()];
            fields.extend(r.feature_outputs.iter().map(|v| v.to_string()));
            fields.extend([r.train_acc.to_string(), opt(r.aug_acc), opt(r.probe_acc)]);
            fields.extend(r.extra.iter().map(|v| v.to_string()));
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Column of one feature's output over the logged steps.
    pub fn feature_series(&self, slot: usize) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.step, r.feature_outputs[slot])).collect()
    }
}

/// Why a run stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    Budget,
    GradTol { step: usize },
    NonFinite { step: usize, detail: String },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final iterate, or the last finite one if the run diverged.
    pub weights: Weights,
    pub trace: TraceLog,
    pub stop: StopReason,
    pub steps_taken: usize,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<(Weights, TraceLog)> {
        match self.stop {
            StopReason::NonFinite { step, detail } => Err(Error::NonFinite { step, detail }),
            _ => Ok((self.weights, self.trace)),
        }
    }
}

/// Optional extras for [`run_training`].
#[derive(Default)]
pub struct RunHooks<'a> {
    pub exec: Executor,
    pub observer: Option<&'a mut dyn StepObserver>,
    /// Held-out samples whose accuracy is logged with each trace row.
    pub probe: Option<&'a [Sample]>,
}

/// Runs `config.steps` gradient steps from `initial`, logging every `log_every`
/// steps and at the last iterate.
pub fn run_training(initial: &Weights, data: &Dataset, config: &TrainConfig, hooks: RunHooks<'_>) -> Result<TrainOutcome> {
    config.validate(data.num_patches())?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let RunHooks {
        exec,
        mut observer,
        probe,
    } = hooks;
    let objective = Objective::new(config.method, data.num_patches(), config.cut_size)?;
    let aug_cuts = match config.method {
        Method::Cutout => cut_sets(data.num_patches(), config.cut_size),
        _ => Vec::new(),
    };
    let mut trace = TraceLog {
        feature_names: data
            .bank
            .ids()
            .map(|id| format!("out_v_{}_{}", if id.class == Sign::Pos { "p" } else { "m" }, id.k + 1))
            .collect(),
        extra_names: observer.as_ref().map(|o| o.columns()).unwrap_or_default(),
        rows: Vec::new(),
    };

    let mut weights = initial.clone();
    let mut stop = StopReason::Budget;
    let mut steps_taken = 0;
    for t in 0..=config.steps {
        let last = t == config.steps;
        let mut logging = t % config.log_every == 0 || last;
        let mut eval = objective.evaluate(&weights, data, logging, &exec)?;
        let grad_norm = eval.grad.norm();
        if !grad_norm.is_finite() || eval.duals.loss.is_some_and(|l| !l.is_finite()) {
            stop = StopReason::NonFinite {
                step: t,
                detail: format!("loss {:?}, gradient norm {grad_norm}", eval.duals.loss),
            };
            break;
        }
        let converged = config.grad_tol.is_some_and(|tol| grad_norm <= tol);
        if converged && !logging {
            logging = true;
            eval = objective.evaluate(&weights, data, true, &exec)?;
        }
        if logging {
            let loss = eval.duals.loss.expect("loss requested");
            if !loss.is_finite() {
                stop = StopReason::NonFinite {
                    step: t,
                    detail: format!("loss {loss}"),
                };
                break;
            }
            trace.rows.push(log_row(t, loss, grad_norm, &weights, data, &eval.table, &aug_cuts, probe, observer.as_deref()));
        }
        if converged {
            stop = StopReason::GradTol { step: t };
            break;
        }
        if last {
            break;
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_step(t, data, &eval, config.learning_rate);
        }
        weights.filters.axpy(-config.learning_rate, &eval.grad);
        steps_taken = t + 1;
    }
    Ok(TrainOutcome {
        weights,
        trace,
        stop,
        steps_taken,
    })
}

#[allow(clippy::too_many_arguments)]
fn log_row(
    step: usize,
    loss: f64,
    grad_norm: f64,
    weights: &Weights,
    data: &Dataset,
    table: &PatchTable,
    aug_cuts: &[PatchMask],
    probe: Option<&[Sample]>,
    observer: Option<&dyn StepObserver>,
) -> TraceRow {
    let n = data.len();
    let correct = |f: f64, s: Sign| s.value() * f > 0.0;
    let train_acc = (0..n).filter(|&i| correct(table.output(i), data.samples[i].label)).count() as f64 / n as f64;
    let aug_acc = (!aug_cuts.is_empty()).then(|| {
        let hits: usize = (0..n)
            .map(|i| aug_cuts.iter().filter(|&&c| correct(table.masked_output(i, c), data.samples[i].label)).count())
            .sum();
        hits as f64 / (n * aug_cuts.len()) as f64
    });
    let probe_acc = probe.map(|samples| {
        let hits = samples
            .iter()
            .filter(|s| correct(weights.forward(&s.patches).unwrap_or(0.0), s.label))
            .count();
        hits as f64 / samples.len().max(1) as f64
    });
    TraceRow {
        step,
        loss,
        grad_norm,
        feature_outputs: feature_outputs(weights, data),
        train_acc,
        aug_acc,
        probe_acc,
        extra: observer.map(|o| o.summary()).unwrap_or_default(),
    }
}

/// `φ(⟨w₊,v⟩) − φ(⟨w₋,v⟩)` for every feature, averaged over neurons.
pub fn feature_outputs(weights: &Weights, data: &Dataset) -> Vec<f64> {
    data.bank.ids().map(|id| weights.patch_output(&data.bank.vector(id))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ActivationParams, InitConfig};
    use crate::synthdata::{generate_dataset, DataConfig};

    fn tiny(seed: u64, n: usize, dim: usize) -> Dataset {
        generate_dataset(&DataConfig {
            dim,
            n_train: n,
            ..DataConfig::three_tier(seed)
        })
        .unwrap()
    }

    fn weights(dim: usize, seed: u64, sigma_0: f64) -> Weights {
        init_weights(dim, 1, ActivationParams::default(), InitConfig { sigma_0, seed }).unwrap()
    }

    /// Builds the mixed sample explicitly and evaluates the network on it.
    fn naive_cutmix_loss(w: &Weights, data: &Dataset) -> f64 {
        let (n, np, d) = (data.len(), data.num_patches(), data.dim());
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                for sub in cutmix_subsets(np) {
                    let mut x = vec![0.0; np * d];
                    for p in 0..np {
                        let src = if sub.mask.contains(p) { &data.samples[i] } else { &data.samples[j] };
                        x[p * d..(p + 1) * d].copy_from_slice(src.patch(p));
                    }
                    let f = w.forward(&x).unwrap();
                    let (yi, yj) = (data.samples[i].label.value(), data.samples[j].label.value());
                    total += sub.prob * (sub.ratio * logistic_loss(yi * f) + (1.0 - sub.ratio) * logistic_loss(yj * f));
                }
            }
        }
        total / (n * n) as f64
    }

    fn naive_cutout_loss(w: &Weights, data: &Dataset, cut: usize) -> f64 {
        let (np, d) = (data.num_patches(), data.dim());
        let cuts = cut_sets(np, cut);
        let mut total = 0.0;
        for s in &data.samples {
            for c in &cuts {
                let mut x = s.patches.clone();
                for p in c.iter(np) {
                    x[p * d..(p + 1) * d].fill(0.0);
                }
                total += logistic_loss(s.label.value() * w.forward(&x).unwrap());
            }
        }
        total / (data.len() * cuts.len()) as f64
    }

    #[test]
    fn zero_weights_give_log_two() {
        let data = tiny(1, 6, 12);
        let w = Weights::zeros(12, 1, ActivationParams::default());
        for loss in [
            erm_loss_and_grad(&w, &data).unwrap().0,
            cutout_loss_and_grad(&w, &data, 1).unwrap().0,
            cutmix_loss_and_grad(&w, &data).unwrap().0,
        ] {
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn cutout_matches_masked_enumeration() {
        let data = tiny(2, 7, 16);
        let w = weights(16, 3, 0.8);
        let (loss, _) = cutout_loss_and_grad(&w, &data, 1).unwrap();
        assert!((loss - naive_cutout_loss(&w, &data, 1)).abs() < 1e-14);
    }

    #[test]
    fn cutout_with_empty_mask_is_erm() {
        let data = tiny(3, 8, 16);
        let w = weights(16, 4, 0.8);
        let (a, ga) = erm_loss_and_grad(&w, &data).unwrap();
        let (b, gb) = Objective::cutout_unchecked(3, 0).loss_and_grad(&w, &data, &Executor::Serial).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(ga.sub(&gb).norm() < 1e-14);
    }

    #[test]
    fn cutmix_matches_pair_enumeration() {
        let cfg = DataConfig {
            dim: 4,
            n_train: 2,
            patches: 2,
            freqs: vec![1.0],
            tiers: vec![crate::Tier::Common],
            ..DataConfig::three_tier(5)
        };
        let data = generate_dataset(&cfg).unwrap();
        let w = weights(4, 6, 1.0);
        let (loss, _) = cutmix_loss_and_grad(&w, &data).unwrap();
        assert!((loss - naive_cutmix_loss(&w, &data)).abs() < 1e-12);

        let data = tiny(7, 5, 12);
        let w = weights(12, 8, 2.0);
        let (loss, _) = cutmix_loss_and_grad(&w, &data).unwrap();
        assert!((loss - naive_cutmix_loss(&w, &data)).abs() < 1e-12);
    }

    #[test]
    fn cutmix_large_outputs_use_the_stable_path() {
        let data = tiny(9, 4, 12);
        let mut w = weights(12, 10, 1.0);
        w.filters.scale(400.0);
        let (loss, grad) = cutmix_loss_and_grad(&w, &data).unwrap();
        assert!(loss.is_finite() && grad.is_finite());
        assert!((loss - naive_cutmix_loss(&w, &data)).abs() <= 1e-10 * loss.max(1.0));
    }

    #[test]
    fn invalid_cut_sizes_are_rejected() {
        let data = tiny(1, 3, 12);
        let w = weights(12, 1, 0.1);
        assert!(cutout_loss_and_grad(&w, &data, 0).is_err());
        assert!(cutout_loss_and_grad(&w, &data, 2).is_err());
        assert!(TrainConfig { cut_size: 2, ..TrainConfig::new(Method::Cutout, 1.0, 1) }.validate(3).is_err());
        assert!(TrainConfig { cut_size: 2, ..TrainConfig::new(Method::Cutout, 1.0, 1) }.validate(5).is_ok());
    }

    fn finite_difference_error(method: Method, seed: u64) -> f64 {
        let data = tiny(seed, 6, 20);
        let w = weights(20, seed + 100, 0.7);
        let obj = Objective::new(method, 3, 1).unwrap();
        let exec = Executor::Serial;
        let (_, grad) = obj.loss_and_grad(&w, &data, &exec).unwrap();
        let h = 1e-5;
        let mut num = Vec::new();
        for idx in 0..w.filters.len() {
            let mut up = w.clone();
            *up.filters.values_mut().nth(idx).unwrap() += h;
            let mut down = w.clone();
            *down.filters.values_mut().nth(idx).unwrap() -= h;
            let lu = obj.loss_and_grad(&up, &data, &exec).unwrap().0;
            let ld = obj.loss_and_grad(&down, &data, &exec).unwrap().0;
            num.push((lu - ld) / (2.0 * h));
        }
        let diff: f64 = grad.values().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        diff / num.iter().map(|b| b * b).sum::<f64>().sqrt()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for method in Method::ALL {
            for seed in 0..3 {
                let err = finite_difference_error(method, seed);
                assert!(err <= 1e-6, "{method} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn first_erm_step_grows_the_common_feature_margin() {
        let data = tiny(11, 40, 64);
        let w = weights(64, 12, 0.01);
        let (_, grad) = erm_loss_and_grad(&w, &data).unwrap();
        let mut next = w.clone();
        next.filters.axpy(-1.0, &grad);
        let c = data.bank.coordinate(crate::FeatureId { class: Sign::Pos, k: 0 });
        let margin = |w: &Weights| w.filters.row(Sign::Pos, 0)[c] - w.filters.row(Sign::Neg, 0)[c];
        assert!(margin(&next) > margin(&w));
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = tiny(4, 8, 16);
        let w = weights(16, 5, 0.1);
        let cfg = TrainConfig {
            log_every: 1,
            ..TrainConfig::new(Method::CutMix, 0.0, 3)
        };
        let out = run_training(&w, &data, &cfg, RunHooks::default()).unwrap();
        assert_eq!(out.weights, w);
        let first = &out.trace.rows[0];
        assert!(out.trace.rows.iter().all(|r| r.loss == first.loss && r.feature_outputs == first.feature_outputs));
        assert_eq!(out.trace.rows.len(), 4);
    }

    #[test]
    fn parallel_evaluation_is_bit_identical() {
        let data = tiny(6, 12, 600);
        let w = weights(600, 7, 0.3);
        let pool = Executor::with_threads(3).unwrap();
        for method in Method::ALL {
            let obj = Objective::new(method, 3, 1).unwrap();
            let (a, ga) = obj.loss_and_grad(&w, &data, &Executor::Serial).unwrap();
            let (b, gb) = obj.loss_and_grad(&w, &data, &pool).unwrap();
            assert_eq!(a, b);
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn grad_tol_stops_early_and_logs_the_stop() {
        let data = tiny(2, 10, 30);
        let w = weights(30, 3, 0.1);
        let cfg = TrainConfig {
            grad_tol: Some(1e3),
            ..TrainConfig::new(Method::Erm, 0.5, 50)
        };
        let out = run_training(&w, &data, &cfg, RunHooks::default()).unwrap();
        assert_eq!(out.stop, StopReason::GradTol { step: 0 });
        assert_eq!(out.trace.rows.len(), 1);
    }

    #[test]
    fn divergence_returns_last_finite_weights() {
        let data = tiny(2, 10, 30);
        let mut w = weights(30, 3, 0.1);
        w.filters.values_mut().for_each(|v| *v = f64::NAN);
        let out = run_training(&w, &data, &TrainConfig::new(Method::Erm, 0.5, 5), RunHooks::default()).unwrap();
        assert!(matches!(out.stop, StopReason::NonFinite { step: 0, .. }));
        assert!(out.into_result().is_err());
    }

    #[test]
    fn trace_csv_has_constant_width() {
        let data = tiny(2, 10, 30);
        let w = weights(30, 3, 0.1);
        let cfg = TrainConfig {
            log_every: 2,
            ..TrainConfig::new(Method::Cutout, 0.5, 5)
        };
        let out = run_training(&w, &data, &cfg, RunHooks::default()).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let widths: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
        assert!(text.starts_with("t,loss,grad_norm,out_v_p_1"));
        let steps: Vec<usize> = out.trace.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 2, 4, 5]);
    }
}
