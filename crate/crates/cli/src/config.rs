//! Experiment configuration: `key = value` lines grouped under `[section]` headers.
//!
//! ```text
//! # comment
//! [data]
//! dim = 2000
//! freqs = 0.8, 0.15, 0.05
//! tiers = common, rare, extreme
//!
//! [train.cutout]
//! method = cutout
//! steps = 3000
//! ```
//!
//! Sections: `data`, `model`, `eval`, `output` and any number of `train.<label>`.
//! Missing keys take the defaults of [`ExperimentConfig::default`]; unknown keys
//! and sections are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use patchlab::{ActivationParams, DataConfig, InitConfig, Method, Tier, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
    pub act: ActivationParams,
    pub init: InitConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_test: usize,
    pub seed: u64,
    /// Fresh points whose accuracy is logged with every trace row; 0 disables.
    pub probe_size: usize,
    /// Relative band on `max |y z − z*|` accepted as the uniform CutMix minimum.
    pub uniform_band: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub plots: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub runs: Vec<RunSpec>,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::three_tier(0),
            model: ModelConfig {
                width: 1,
                act: ActivationParams::default(),
                init: InitConfig { sigma_0: 0.01, seed: 1 },
            },
            runs: Vec::new(),
            eval: EvalConfig {
                n_test: patchlab::eval::DEFAULT_TEST_DRAWS,
                seed: 2,
                probe_size: 1000,
                uniform_band: 0.1,
            },
            output: OutputConfig { dir: None, plots: true },
        }
    }
}

struct Entry {
    key: String,
    value: String,
    line: usize,
    used: bool,
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(e) = self.entries.iter_mut().find(|e| e.key == key) {
            e.used = true;
            *slot = e
                .value
                .parse()
                .map_err(|err| anyhow!("line {}: bad value `{}` for `{key}`: {err}", e.line, e.value))?;
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(e) = self.entries.iter_mut().find(|e| e.key == key) {
            e.used = true;
            *slot = e
                .value
                .split(',')
                .map(|v| v.trim().parse().map_err(|err| anyhow!("line {}: bad item `{}` in `{key}`: {err}", e.line, v.trim())))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    fn take_optional<T: FromStr>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(e) = self.entries.iter_mut().find(|e| e.key == key) {
            e.used = true;
            *slot = match e.value.as_str() {
                "" | "none" => None,
                v => Some(v.parse().map_err(|err| anyhow!("line {}: bad value `{v}` for `{key}`: {err}", e.line))?),
            };
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.used) {
            Some(e) => bail!("line {}: unknown key `{}` in [{}]", e.line, e.key, self.name),
            None => Ok(()),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| anyhow!("line {line}: unterminated section header"))?.trim();
            if name.is_empty() {
                bail!("line {line}: empty section name");
            }
            if sections.iter().any(|s| s.name == name) {
                bail!("line {line}: duplicate section [{name}]");
            }
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| anyhow!("line {line}: expected `key = value`"))?;
        let section = sections.last_mut().ok_or_else(|| anyhow!("line {line}: key outside of any section"))?;
        let key = key.trim();
        if section.entries.iter().any(|e| e.key == key) {
            bail!("line {line}: duplicate key `{key}`");
        }
        section.entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
            used: false,
        });
    }
    Ok(sections)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for mut sec in tokenize(text)? {
            let name = sec.name.clone();
            match name.as_str() {
                "data" => {
                    let d = &mut cfg.data;
                    sec.take("dim", &mut d.dim)?;
                    sec.take("n_train", &mut d.n_train)?;
                    sec.take("patches", &mut d.patches)?;
                    sec.take_list("freqs", &mut d.freqs)?;
                    sec.take_list::<Tier>("tiers", &mut d.tiers)?;
                    sec.take("sigma_dominant", &mut d.sigma_dominant)?;
                    sec.take("sigma_background", &mut d.sigma_background)?;
                    sec.take("feature_noise", &mut d.feature_noise)?;
                    sec.take("seed", &mut d.seed)?;
                }
                "model" => {
                    let m = &mut cfg.model;
                    sec.take("width", &mut m.width)?;
                    sec.take("slope", &mut m.act.slope)?;
                    sec.take("smoothing", &mut m.act.smoothing)?;
                    sec.take("sigma_0", &mut m.init.sigma_0)?;
                    sec.take("init_seed", &mut m.init.seed)?;
                }
                "eval" => {
                    let e = &mut cfg.eval;
                    sec.take("n_test", &mut e.n_test)?;
                    sec.take("seed", &mut e.seed)?;
                    sec.take("probe_size", &mut e.probe_size)?;
                    sec.take("uniform_band", &mut e.uniform_band)?;
                }
                "output" => {
                    let mut dir = String::new();
                    sec.take("dir", &mut dir)?;
                    if !dir.is_empty() {
                        cfg.output.dir = Some(PathBuf::from(dir));
                    }
                    sec.take("plots", &mut cfg.output.plots)?;
                }
                name => {
                    let label = name
                        .strip_prefix("train.")
                        .filter(|l| !l.is_empty() && l.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
                        .ok_or_else(|| anyhow!("line {}: unknown section [{name}]", sec.line))?;
                    let mut method: Option<Method> = label.parse().ok();
                    sec.take_optional("method", &mut method)?;
                    let method = method.ok_or_else(|| anyhow!("line {}: [{name}] needs `method`", sec.line))?;
                    let mut train = TrainConfig::new(method, 1.0, 1000);
                    sec.take("learning_rate", &mut train.learning_rate)?;
                    sec.take("steps", &mut train.steps)?;
                    train.log_every = (train.steps / 100).max(1);
                    sec.take("log_every", &mut train.log_every)?;
                    sec.take("cut_size", &mut train.cut_size)?;
                    sec.take_optional("grad_tol", &mut train.grad_tol)?;
                    cfg.runs.push(RunSpec {
                        label: label.to_string(),
                        train,
                    });
                }
            }
            sec.finish()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.act.validate()?;
        if self.model.width == 0 {
            bail!("model width must be positive");
        }
        if !(self.model.init.sigma_0 >= 0.0) {
            bail!("sigma_0 must be non-negative");
        }
        if self.runs.is_empty() {
            bail!("no [train.<label>] sections");
        }
        for r in &self.runs {
            r.train.validate(self.data.patches).with_context(|| format!("[train.{}]", r.label))?;
        }
        if self.eval.n_test == 0 {
            bail!("n_test must be positive");
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields `self` again.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let d = &self.data;
        let list = |xs: Vec<String>| xs.join(", ");
        let _ = writeln!(out, "[data]");
        let _ = writeln!(out, "dim = {}", d.dim);
        let _ = writeln!(out, "n_train = {}", d.n_train);
        let _ = writeln!(out, "patches = {}", d.patches);
        let _ = writeln!(out, "freqs = {}", list(d.freqs.iter().map(|f| f.to_string()).collect()));
        let _ = writeln!(out, "tiers = {}", list(d.tiers.iter().map(|t| t.name().to_string()).collect()));
        let _ = writeln!(out, "sigma_dominant = {}", d.sigma_dominant);
        let _ = writeln!(out, "sigma_background = {}", d.sigma_background);
        let _ = writeln!(out, "feature_noise = {}", d.feature_noise);
        let _ = writeln!(out, "seed = {}", d.seed);
        let m = &self.model;
        let _ = writeln!(out, "\n[model]");
        let _ = writeln!(out, "width = {}", m.width);
        let _ = writeln!(out, "slope = {}", m.act.slope);
        let _ = writeln!(out, "smoothing = {}", m.act.smoothing);
        let _ = writeln!(out, "sigma_0 = {}", m.init.sigma_0);
        let _ = writeln!(out, "init_seed = {}", m.init.seed);
        for r in &self.runs {
            let t = &r.train;
            let _ = writeln!(out, "\n[train.{}]", r.label);
            let _ = writeln!(out, "method = {}", t.method);
            let _ = writeln!(out, "learning_rate = {}", t.learning_rate);
            let _ = writeln!(out, "steps = {}", t.steps);
            let _ = writeln!(out, "log_every = {}", t.log_every);
            let _ = writeln!(out, "cut_size = {}", t.cut_size);
            let _ = writeln!(out, "grad_tol = {}", t.grad_tol.map_or("none".to_string(), |g| g.to_string()));
        }
        let e = &self.eval;
        let _ = writeln!(out, "\n[eval]");
        let _ = writeln!(out, "n_test = {}", e.n_test);
        let _ = writeln!(out, "seed = {}", e.seed);
        let _ = writeln!(out, "probe_size = {}", e.probe_size);
        let _ = writeln!(out, "uniform_band = {}", e.uniform_band);
        let _ = writeln!(out, "\n[output]");
        if let Some(dir) = &self.output.dir {
            let _ = writeln!(out, "dir = {}", dir.display());
        }
        let _ = writeln!(out, "plots = {}", self.output.plots);
        out
    }
}
