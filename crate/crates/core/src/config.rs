//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are dotted (`stream.tasks`, `projector.eta1`, ...) and every key is
//! optional; unknown or repeated keys are errors. [`RunConfig::echo`]
//! prints every key in canonical order and parses back to the same config.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::harness::{
    ExperimentSpec, LrSchedule, Method, MethodConfig, ModelSettings, Optimizer, SyntheticTaskSpec,
};
use crate::projector::NullityMode;
use crate::vit::LogitScope;

/// Every recognised key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("output_dir", "directory receiving the CSV reports"),
    ("seeds", "comma-separated run seeds; each seed gets its own stream and initial model"),
    ("methods", "comma-separated methods: seq, nsp2, nsp2_b1_only, nsp2_b2_only, nsp2_no_lnloss, nsp2_b1_lnloss, nsp2_b2_lnloss, pgp"),
    ("stream.image_size", "image side in pixels"),
    ("stream.patch_size", "patch side in pixels; must divide image_size"),
    ("stream.classes_per_task", "classes introduced by each task"),
    ("stream.tasks", "number of tasks"),
    ("stream.train_per_class", "training images per class"),
    ("stream.test_per_class", "test images per class"),
    ("stream.signal", "per-pixel RMS of the class pattern"),
    ("stream.shared", "per-pixel RMS of the background shared by all classes"),
    ("stream.noise", "standard deviation of the pixel noise"),
    ("model.dim", "token width D"),
    ("model.heads", "attention heads H; must divide D"),
    ("model.layers", "prompted layers L"),
    ("model.prompts", "prompts per layer M"),
    ("model.mlp_ratio", "MLP hidden width as a multiple of D"),
    ("model.ln_eps", "LayerNorm epsilon"),
    ("model.temperature", "cosine-classifier temperature"),
    ("train.optimizer", "sgd or adam"),
    ("train.lr", "prompt learning rate"),
    ("train.head_lr", "classifier-head learning rate"),
    ("train.lr_schedule", "constant or cosine (decay over each task)"),
    ("train.epochs", "epochs per task"),
    ("train.batch_size", "minibatch size"),
    ("train.logit_scope", "current (task-local logits) or seen (all heads so far)"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator offset"),
    ("train.collect_samples", "training samples per task used for the projector update; 0 = all"),
    ("projector.nullity", "adaptive, exact, or gamma:<g> with g >= 1"),
    ("projector.eta1", "weight of the B1 null-space projector, in [0, 1]"),
    ("projector.eta2", "weight of the B2 null-space projector, in [0, 1]"),
    ("ln.coeff", "coefficient of the prompt-distribution drift loss"),
    ("audit.direct", "true to also audit every update against the stored Omega matrices"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub stream: SyntheticTaskSpec,
    pub model: ModelSettings,
    /// Shared training settings; `method` is replaced per listed method.
    pub train: MethodConfig,
    adam: (f64, f64, f64),
    use_adam: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = MethodConfig::default();
        let (use_adam, adam) = match train.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => (true, (beta1, beta2, eps)),
            Optimizer::Sgd => (false, (0.9, 0.999, 1e-8)),
        };
        Self {
            output_dir: PathBuf::from("nsp2-out"),
            seeds: vec![0, 1, 2],
            methods: vec![Method::Seq, Method::Nsp2],
            stream: SyntheticTaskSpec::default(),
            model: ModelSettings::default(),
            train,
            adam,
            use_adam,
        }
    }
}

impl RunConfig {
    /// Parses a config document. Errors name the line and the key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {line_no}: expected `key = value`, got `{line}`"
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&(known, _)) = KEYS.iter().find(|(k, _)| *k == key) else {
                return Err(Error::Config(format!(
                    "line {line_no}: unknown key `{key}`"
                )));
            };
            if seen.contains(&known) {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key `{key}`"
                )));
            }
            seen.push(known);
            cfg.set(known, value)
                .map_err(|e| Error::Config(format!("line {line_no}: key `{key}`: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Cross-field checks shared by parsing and programmatic construction.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("`methods` is empty".into()));
        }
        self.stream.validate()?;
        self.model
            .dims(&self.stream)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.model.ln_eps > 0.0) {
            return Err(Error::Config(format!(
                "model.ln_eps = {} must be positive",
                self.model.ln_eps
            )));
        }
        self.method_config(Method::Nsp2).validate()
    }

    /// The training settings for one method.
    pub fn method_config(&self, method: Method) -> MethodConfig {
        let optimizer = if self.use_adam {
            Optimizer::Adam {
                beta1: self.adam.0,
                beta2: self.adam.1,
                eps: self.adam.2,
            }
        } else {
            Optimizer::Sgd
        };
        MethodConfig {
            method,
            optimizer,
            ..self.train
        }
    }

    pub fn experiment(&self) -> ExperimentSpec {
        ExperimentSpec {
            stream: self.stream.clone(),
            model: self.model,
            methods: self
                .methods
                .iter()
                .map(|&m| self.method_config(m))
                .collect(),
            seeds: self.seeds.clone(),
        }
    }

    /// Canonical text form: every key, in table order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            writeln!(out, "{key} = {}", self.get(key)).expect("string write");
        }
        out
    }

    /// Current value of a key in config syntax.
    pub fn get(&self, key: &str) -> String {
        let s = &self.stream;
        let m = &self.model;
        let t = &self.train;
        match key {
            "output_dir" => self.output_dir.display().to_string(),
            "seeds" => join(&self.seeds),
            "methods" => join(&self.methods),
            "stream.image_size" => s.image_size.to_string(),
            "stream.patch_size" => s.patch_size.to_string(),
            "stream.classes_per_task" => s.classes_per_task.to_string(),
            "stream.tasks" => s.tasks.to_string(),
            "stream.train_per_class" => s.train_per_class.to_string(),
            "stream.test_per_class" => s.test_per_class.to_string(),
            "stream.signal" => s.signal.to_string(),
            "stream.shared" => s.shared.to_string(),
            "stream.noise" => s.noise.to_string(),
            "model.dim" => m.dim.to_string(),
            "model.heads" => m.heads.to_string(),
            "model.layers" => m.layers.to_string(),
            "model.prompts" => m.prompts.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.ln_eps" => m.ln_eps.to_string(),
            "model.temperature" => t.temperature.to_string(),
            "train.optimizer" => if self.use_adam { "adam" } else { "sgd" }.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.head_lr" => t.head_lr.to_string(),
            "train.lr_schedule" => t.schedule.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.logit_scope" => match t.scope {
                LogitScope::Current => "current",
                LogitScope::Seen => "seen",
            }
            .to_string(),
            "train.adam_beta1" => self.adam.0.to_string(),
            "train.adam_beta2" => self.adam.1.to_string(),
            "train.adam_eps" => self.adam.2.to_string(),
            "train.collect_samples" => t.collect_samples.to_string(),
            "projector.nullity" => t.nullity.to_string(),
            "projector.eta1" => t.eta1.to_string(),
            "projector.eta2" => t.eta2.to_string(),
            "ln.coeff" => t.ln_coeff.to_string(),
            "audit.direct" => t.audit_direct.to_string(),
            _ => unreachable!("key table and getter out of sync: {key}"),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let s = &mut self.stream;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "output_dir" => {
                if v.is_empty() {
                    return Err("empty path".into());
                }
                self.output_dir = PathBuf::from(v);
            }
            "seeds" => self.seeds = list(v)?,
            "methods" => {
                self.methods = v
                    .split(',')
                    .map(|x| x.trim().parse::<Method>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "stream.image_size" => s.image_size = num(v)?,
            "stream.patch_size" => s.patch_size = num(v)?,
            "stream.classes_per_task" => s.classes_per_task = num(v)?,
            "stream.tasks" => s.tasks = num(v)?,
            "stream.train_per_class" => s.train_per_class = num(v)?,
            "stream.test_per_class" => s.test_per_class = num(v)?,
            "stream.signal" => s.signal = real(v)?,
            "stream.shared" => s.shared = real(v)?,
            "stream.noise" => s.noise = real(v)?,
            "model.dim" => m.dim = num(v)?,
            "model.heads" => m.heads = num(v)?,
            "model.layers" => m.layers = num(v)?,
            "model.prompts" => m.prompts = num(v)?,
            "model.mlp_ratio" => m.mlp_ratio = num(v)?,
            "model.ln_eps" => m.ln_eps = real(v)?,
            "model.temperature" => t.temperature = real(v)?,
            "train.optimizer" => {
                self.use_adam = match v {
                    "sgd" => false,
                    "adam" => true,
                    _ => return Err(format!("`{v}` is not sgd or adam")),
                }
            }
            "train.lr" => t.lr = real(v)?,
            "train.head_lr" => t.head_lr = real(v)?,
            "train.lr_schedule" => {
                t.schedule = v.parse::<LrSchedule>().map_err(|e| e.to_string())?
            }
            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.logit_scope" => {
                t.scope = match v {
                    "current" => LogitScope::Current,
                    "seen" => LogitScope::Seen,
                    _ => return Err(format!("`{v}` is not current or seen")),
                }
            }
            "train.adam_beta1" => self.adam.0 = real(v)?,
            "train.adam_beta2" => self.adam.1 = real(v)?,
            "train.adam_eps" => self.adam.2 = real(v)?,
            "train.collect_samples" => t.collect_samples = num(v)?,
            "projector.nullity" => {
                t.nullity = v.parse::<NullityMode>().map_err(|e| e.to_string())?
            }
            "projector.eta1" => t.eta1 = real(v)?,
            "projector.eta2" => t.eta2 = real(v)?,
            "ln.coeff" => t.ln_coeff = real(v)?,
            "audit.direct" => {
                t.audit_direct = v
                    .parse()
                    .map_err(|_| format!("`{v}` is not true or false"))?
            }
            _ => unreachable!("key table and setter out of sync: {key}"),
        }
        Ok(())
    }
}

/// Markdown table of every key with its default, for documentation.
pub fn defaults_table() -> String {
    let d = RunConfig::default();
    let mut out = String::from("| key | default | meaning |\n|---|---|---|\n");
    for (key, doc) in KEYS {
        writeln!(out, "| `{key}` | `{}` | {doc} |", d.get(key)).expect("string write");
    }
    out
}

fn num(v: &str) -> std::result::Result<usize, String> {
    v.parse()
        .map_err(|_| format!("`{v}` is not a non-negative integer"))
}

fn real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("`{v}` is not a number"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn list(v: &str) -> std::result::Result<Vec<u64>, String> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| format!("`{x}` is not an unsigned integer"))
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(
            RunConfig::parse("# nothing\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn echo_round_trips() {
        let text = "seeds = 4,5\nmethods = pgp, nsp2_b1_only\nstream.noise = 0.3 # quieter\n\
                    projector.nullity = gamma:5\ntrain.optimizer = adam\nprojector.eta1 = 0.125\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.methods, vec![Method::Pgp, Method::Nsp2B1Only]);
        assert_eq!(cfg.stream.noise, 0.3);
        assert!(matches!(
            cfg.method_config(Method::Seq).optimizer,
            Optimizer::Adam { .. }
        ));
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named_with_its_line() {
        let err = RunConfig::parse("seeds = 1\nfoo=1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("`foo`"), "{err}");
    }

    #[test]
    fn bad_values_and_duplicates() {
        for text in [
            "stream.tasks = two",
            "projector.eta1 = 1.5",
            "seeds = 1\nseeds = 2",
            "methods = seq,l2p",
            "model.heads = 5",
            "just words",
            "stream.classes_per_task = 200",
            "stream.noise = nan",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn every_key_has_a_getter_and_documented_default() {
        let table = defaults_table();
        for (key, _) in KEYS {
            assert!(table.contains(&format!("`{key}`")));
        }
    }
}
