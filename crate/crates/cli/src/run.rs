//! Generates the data, trains every configured method and writes the run directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use patchlab::augment::binomial;
use patchlab::decompose::{check_e_init, CoeffRecorder, CoeffTable};
use patchlab::eval::{self, AccuracyReport};
use patchlab::model::init_weights;
use patchlab::synthdata::generate_dataset;
use patchlab::theory::{self, GlobalMin, UniformityReport};
use patchlab::train::{run_training, RunHooks, StopReason, TraceLog};
use patchlab::{Dataset, Executor, Method, Sign, Tier, Weights};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunSpec};
use crate::svg;

pub struct RunOptions {
    pub out: PathBuf,
    pub threads: usize,
    pub plots: bool,
}

/// Index of a run directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub runs: Vec<String>,
    pub data_seed: u64,
    pub tier_mass: Vec<(Tier, f64)>,
}

/// Everything `check` needs about one trained method.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub method: Method,
    pub cut_size: usize,
    pub learning_rate: f64,
    pub steps_requested: usize,
    pub steps_taken: usize,
    pub stop: StopReason,
    pub grad_tol: Option<f64>,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub feature_names: Vec<String>,
    pub feature_outputs: Vec<f64>,
    /// Per-step coefficient decreases (single-neuron runs only).
    pub coeff_decreases: Option<usize>,
    pub first_decrease: Option<String>,
    pub uniformity: Option<UniformityReport>,
    pub uniform_band: f64,
}

/// Dataset-level theory quantities.
#[derive(Debug, Serialize, Deserialize)]
pub struct TheoryRecord {
    pub class_counts: [usize; 2],
    pub global_min: Option<GlobalMin>,
    pub global_min_error: Option<String>,
    pub smoothness_constant: f64,
    pub predicted_accuracy: Vec<(Method, f64)>,
    pub e_init_passed: Option<bool>,
    pub e_init_failures: Vec<String>,
}

pub fn learned_tiers(method: Method) -> &'static [Tier] {
    match method {
        Method::Erm => &[Tier::Common],
        Method::Cutout => &[Tier::Common, Tier::Rare],
        Method::CutMix => &Tier::ALL,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Derived quantities printed by `--dry-run`.
pub fn describe(cfg: &ExperimentConfig) -> Result<String> {
    let data = generate_dataset(&cfg.data)?;
    let d = &cfg.data;
    let mut out = String::new();
    use std::fmt::Write as _;
    writeln!(out, "data: d={} n={} P={} K={} seed={}", d.dim, d.n_train, d.patches, d.freqs.len(), d.seed)?;
    writeln!(out, "class counts: |V_1|={} |V_-1|={}", data.class_count(Sign::Pos), data.class_count(Sign::Neg))?;
    writeln!(out, "CutMix subsets: 2^P = {}", 1u64 << d.patches)?;
    for run in &cfg.runs {
        let t = &run.train;
        write!(out, "[{}] {} eta={} steps={} log_every={}", run.label, t.method, t.learning_rate, t.steps, t.log_every)?;
        if t.method == Method::Cutout {
            write!(out, " C={} cut sets={}", t.cut_size, binomial(d.patches, t.cut_size))?;
        }
        writeln!(out, " predicted test accuracy={:.4}", eval::predicted_accuracy(d, learned_tiers(t.method)))?;
    }
    let lip = theory::smoothness_constant(d.patches, d.sigma_dominant, d.dim, cfg.model.act.smoothing);
    writeln!(out, "smoothness constant L = {lip:.6} (1/L = {:.6e})", 1.0 / lip)?;
    match theory::global_minimum_for(&data) {
        Ok(m) => writeln!(out, "CutMix minimum: z1*={:.10} z-1*={:.10}", m.z_pos, m.z_neg)?,
        Err(e) => writeln!(out, "CutMix minimum: {e}")?,
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<()> {
    fs::create_dir_all(&opts.out).with_context(|| format!("creating {}", opts.out.display()))?;
    fs::write(opts.out.join("config.cfg"), cfg.serialize())?;
    let exec = Executor::with_threads(opts.threads)?;
    let data = generate_dataset(&cfg.data)?;
    let w0 = init_weights(data.dim(), cfg.model.width, cfg.model.act, cfg.model.init)?;
    eprintln!("dataset: n={} d={} P={}", data.len(), data.dim(), data.num_patches());

    let theory_record = dataset_theory(cfg, &data, &w0)?;
    write_json(&opts.out.join("theory.json"), &theory_record)?;

    let probe = eval::test_points(&data.bank, &data.config, cfg.eval.probe_size, cfg.eval.seed);
    let mut traces = Vec::new();
    for spec in &cfg.runs {
        let trace = train_one(cfg, spec, &data, &w0, theory_record.global_min.as_ref(), &probe, &exec, &opts.out)?;
        traces.push((spec.label.clone(), trace));
    }
    if opts.plots {
        fs::write(opts.out.join("figure1.svg"), figure(&data, &traces))?;
    }
    let summary = Summary {
        runs: cfg.runs.iter().map(|r| r.label.clone()).collect(),
        data_seed: cfg.data.seed,
        tier_mass: Tier::ALL.iter().map(|&t| (t, cfg.data.tier_mass(t))).collect(),
    };
    write_json(&opts.out.join("summary.json"), &summary)?;
    Ok(())
}

fn dataset_theory(cfg: &ExperimentConfig, data: &Dataset, w0: &Weights) -> Result<TheoryRecord> {
    let (global_min, global_min_error) = match theory::global_minimum_for(data) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (e_init_passed, e_init_failures) = if cfg.model.width == 1 {
        let report = check_e_init(data, w0)?;
        let failures = report.failures().iter().map(|c| format!("{}: {} (measured {:.4e})", c.name, c.statement, c.measured)).collect();
        (Some(report.passed()), failures)
    } else {
        (None, Vec::new())
    };
    Ok(TheoryRecord {
        class_counts: [data.class_count(Sign::Pos), data.class_count(Sign::Neg)],
        global_min,
        global_min_error,
        smoothness_constant: theory::smoothness_constant(data.num_patches(), cfg.data.sigma_dominant, data.dim(), cfg.model.act.smoothing),
        predicted_accuracy: Method::ALL
            .iter()
            .map(|&m| (m, eval::predicted_accuracy(&cfg.data, learned_tiers(m))))
            .collect(),
        e_init_passed,
        e_init_failures,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    data: &Dataset,
    w0: &Weights,
    global_min: Option<&GlobalMin>,
    probe: &[patchlab::Sample],
    exec: &Executor,
    out: &Path,
) -> Result<TraceLog> {
    let dir = out.join(&spec.label);
    fs::create_dir_all(&dir)?;
    let t = &spec.train;
    eprintln!("[{}] training {} for {} steps", spec.label, t.method, t.steps);
    let mut recorder = (cfg.model.width == 1).then(|| CoeffRecorder::new(data, cfg.model.act));
    let outcome = run_training(
        w0,
        data,
        t,
        RunHooks {
            exec: exec.clone(),
            observer: recorder.as_mut().map(|r| r as &mut dyn patchlab::train::StepObserver),
            probe: (!probe.is_empty()).then_some(probe),
        },
    )?;
    outcome.trace.write_csv(create(&dir.join("trace.csv"))?)?;
    if let StopReason::NonFinite { step, detail } = &outcome.stop {
        let path = dir.join("last_good.plwt");
        outcome.weights.save(create(&path)?)?;
        bail!("[{}] non-finite value at step {step} ({detail}); last finite weights saved to {}", spec.label, path.display());
    }
    let w = &outcome.weights;
    w.save(create(&dir.join("weights.plwt"))?)?;

    let cut = (t.method == Method::Cutout).then_some(t.cut_size);
    let report: AccuracyReport = eval::full_report(w, data, cut, cfg.eval.n_test, cfg.eval.seed, exec)?;
    write_json(&dir.join("accuracy.json"), &report)?;
    report.write_tier_csv(create(&dir.join("accuracy_tiers.csv"))?)?;

    if let Some(rec) = &recorder {
        let table: &CoeffTable = rec.table();
        write_json(&dir.join("coefficients.json"), table)?;
    }
    let uniformity = match (t.method, global_min) {
        (Method::CutMix, Some(min)) => Some(theory::verify_uniform_minimum(w, data, min)?),
        _ => None,
    };
    let last = outcome.trace.last().context("empty trace")?;
    let record = RunRecord {
        label: spec.label.clone(),
        method: t.method,
        cut_size: t.cut_size,
        learning_rate: t.learning_rate,
        steps_requested: t.steps,
        steps_taken: outcome.steps_taken,
        stop: outcome.stop.clone(),
        grad_tol: t.grad_tol,
        final_loss: last.loss,
        final_grad_norm: last.grad_norm,
        feature_names: outcome.trace.feature_names.clone(),
        feature_outputs: eval::feature_output_trace(w, &data.bank),
        coeff_decreases: recorder.as_ref().map(|r| r.decreases()),
        first_decrease: recorder.as_ref().and_then(|r| r.first_decrease()).map(|(step, key, delta)| format!("step {step}: {key:?} by {delta:.3e}")),
        uniformity,
        uniform_band: cfg.eval.uniform_band,
    };
    write_json(&dir.join("run.json"), &record)?;
    eprintln!(
        "[{}] done: loss {:.5} grad {:.3e} train {:.4} test {:.4}",
        spec.label,
        record.final_loss,
        record.final_grad_norm,
        report.train_acc.unwrap_or(f64::NAN),
        report.test.rate
    );
    Ok(outcome.trace)
}

/// One panel per tier, plotting the first class-1 feature of that tier for every run.
fn figure(data: &Dataset, traces: &[(String, TraceLog)]) -> String {
    let panels = Tier::ALL
        .iter()
        .filter_map(|&tier| {
            let k = data.config.tiers.iter().position(|&t| t == tier)?;
            let slot = data.bank.slot(patchlab::FeatureId { class: Sign::Pos, k });
            Some(svg::Panel {
                title: format!("{} feature v_(1,{})", tier.name(), k + 1),
                series: traces
                    .iter()
                    .map(|(label, trace)| svg::Series {
                        name: label.clone(),
                        points: trace.feature_series(slot).into_iter().map(|(s, v)| (s as f64, v)).collect(),
                    })
                    .collect(),
            })
        })
        .collect::<Vec<_>>();
    svg::render(&panels)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
