//! Declarative run configuration: one flat `key = value` text format with
//! dotted namespaces, fail-closed parsing (unknown keys are rejected with
//! their path), and a resolved snapshot writer so every output directory
//! records the exact settings that produced it.
//!
//! All randomness flows from `run.seed` through named substreams (task,
//! model, train, noise, sampling, power iteration), so components can be
//! re-run in isolation with identical behavior.

use crate::error::{Error, Result};
use crate::eval::{BenchmarkConfig, ALL_METHODS};
use crate::model::{ModelConfig, ParamLocation};
use crate::rng;
use crate::taskgen::{CorruptionMode, TaskSpec};
use crate::trainer::TrainConfig;
use crate::epgs::EpgsConfig;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task_n_facts: usize,
    pub task_n_singletons: usize,
    pub task_n_transient: usize,
    pub task_redundancy: usize,
    pub task_n_templates: usize,
    pub task_corruption_mode: CorruptionMode,

    pub model_vocab_size: usize,
    pub model_d_model: usize,
    pub model_n_layers: usize,
    pub model_n_heads: usize,
    pub model_d_ff: usize,
    pub model_max_seq_len: usize,

    pub train_steps: usize,
    pub train_batch_size: usize,
    pub train_learning_rate: f64,
    pub train_beta1: f64,
    pub train_beta2: f64,
    pub train_weight_decay: f64,
    pub train_grad_clip_norm: Option<f64>,
    pub train_log_every: usize,

    pub epgs_sigma: f64,
    pub epgs_location: ParamLocation,
    pub epgs_stabilization_eps: f64,
    pub epgs_perturb_prompt_only: bool,

    pub curvature_iterations: usize,
    pub curvature_tolerance: f64,
    /// `None` probes every stubborn-subset member.
    pub curvature_max_examples: Option<usize>,

    pub eval_k: usize,
    pub eval_temperature: f64,
    pub eval_consistency_threshold: f64,
    pub eval_methods: Vec<String>,
    pub eval_max_new: usize,
    pub eval_eigenscore_reg: f64,

    pub run_seed: u64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task_n_facts: 36,
            task_n_singletons: 36,
            task_n_transient: 24,
            task_redundancy: 5,
            task_n_templates: 12,
            task_corruption_mode: CorruptionMode::WrongValue,

            model_vocab_size: 256,
            model_d_model: 64,
            model_n_layers: 4,
            model_n_heads: 4,
            model_d_ff: 256,
            model_max_seq_len: 32,

            train_steps: 1500,
            train_batch_size: 32,
            train_learning_rate: 3e-4,
            train_beta1: 0.9,
            train_beta2: 0.999,
            train_weight_decay: 0.0,
            train_grad_clip_norm: Some(1.0),
            train_log_every: 50,

            epgs_sigma: 0.1,
            epgs_location: ParamLocation::LastBlock,
            epgs_stabilization_eps: 1e-8,
            epgs_perturb_prompt_only: false,

            curvature_iterations: 15,
            curvature_tolerance: 1e-4,
            curvature_max_examples: None,

            eval_k: 5,
            eval_temperature: 1.0,
            eval_consistency_threshold: 0.8,
            eval_methods: ALL_METHODS.iter().map(|s| s.to_string()).collect(),
            eval_max_new: 6,
            eval_eigenscore_reg: 1e-3,

            run_seed: 42,
            output_dir: "out".to_string(),
        }
    }
}

impl RunConfig {
    /// Parse a config file; every key is optional, unknown keys fail closed.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for key {key}")))
        }
        match key {
            "task.n_facts" => self.task_n_facts = parse(key, value)?,
            "task.n_singletons" => self.task_n_singletons = parse(key, value)?,
            "task.n_transient" => self.task_n_transient = parse(key, value)?,
            "task.redundancy" => self.task_redundancy = parse(key, value)?,
            "task.n_templates" => self.task_n_templates = parse(key, value)?,
            "task.corruption_mode" => self.task_corruption_mode = CorruptionMode::parse(value)?,

            "model.vocab_size" => self.model_vocab_size = parse(key, value)?,
            "model.d_model" => self.model_d_model = parse(key, value)?,
            "model.n_layers" => self.model_n_layers = parse(key, value)?,
            "model.n_heads" => self.model_n_heads = parse(key, value)?,
            "model.d_ff" => self.model_d_ff = parse(key, value)?,
            "model.max_seq_len" => self.model_max_seq_len = parse(key, value)?,

            "train.steps" => self.train_steps = parse(key, value)?,
            "train.batch_size" => self.train_batch_size = parse(key, value)?,
            "train.learning_rate" => self.train_learning_rate = parse(key, value)?,
            "train.beta1" => self.train_beta1 = parse(key, value)?,
            "train.beta2" => self.train_beta2 = parse(key, value)?,
            "train.weight_decay" => self.train_weight_decay = parse(key, value)?,
            "train.grad_clip_norm" => {
                self.train_grad_clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "train.log_every" => self.train_log_every = parse(key, value)?,

            "epgs.sigma" => self.epgs_sigma = parse(key, value)?,
            "epgs.location" => self.epgs_location = ParamLocation::parse(value)?,
            "epgs.stabilization_eps" => self.epgs_stabilization_eps = parse(key, value)?,
            "epgs.perturb_prompt_only" => self.epgs_perturb_prompt_only = parse(key, value)?,

            "curvature.iterations" => self.curvature_iterations = parse(key, value)?,
            "curvature.tolerance" => self.curvature_tolerance = parse(key, value)?,
            "curvature.max_examples" => {
                self.curvature_max_examples =
                    if value == "all" { None } else { Some(parse(key, value)?) }
            }

            "eval.k" => self.eval_k = parse(key, value)?,
            "eval.temperature" => self.eval_temperature = parse(key, value)?,
            "eval.consistency_threshold" => self.eval_consistency_threshold = parse(key, value)?,
            "eval.methods" => {
                self.eval_methods = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "eval.max_new" => self.eval_max_new = parse(key, value)?,
            "eval.eigenscore_reg" => self.eval_eigenscore_reg = parse(key, value)?,

            "run.seed" => self.run_seed = parse(key, value)?,
            "output.dir" => self.output_dir = value.to_string(),

            unknown => {
                return Err(Error::Config(format!("unknown config key '{unknown}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.eval_methods {
            if !ALL_METHODS.contains(&m.as_str()) {
                return Err(Error::Config(format!("eval.methods: unknown method '{m}'")));
            }
        }
        if self.epgs_sigma < 0.0 {
            return Err(Error::Config("epgs.sigma must be >= 0".into()));
        }
        if self.epgs_stabilization_eps <= 0.0 {
            return Err(Error::Config("epgs.stabilization_eps must be > 0".into()));
        }
        if !(self.eval_consistency_threshold > 0.0 && self.eval_consistency_threshold <= 1.0) {
            return Err(Error::Config("eval.consistency_threshold must be in (0, 1]".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    /// Materialize every key with its resolved value, sorted, including the
    /// derived per-component seeds.
    pub fn resolved_snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv: Vec<(String, String)> = vec![
            ("task.n_facts".into(), self.task_n_facts.to_string()),
            ("task.n_singletons".into(), self.task_n_singletons.to_string()),
            ("task.n_transient".into(), self.task_n_transient.to_string()),
            ("task.redundancy".into(), self.task_redundancy.to_string()),
            ("task.n_templates".into(), self.task_n_templates.to_string()),
            (
                "task.corruption_mode".into(),
                match self.task_corruption_mode {
                    CorruptionMode::WrongValue => "wrong_value".into(),
                    CorruptionMode::SwappedValue => "swapped_value".into(),
                },
            ),
            ("model.vocab_size".into(), self.model_vocab_size.to_string()),
            ("model.d_model".into(), self.model_d_model.to_string()),
            ("model.n_layers".into(), self.model_n_layers.to_string()),
            ("model.n_heads".into(), self.model_n_heads.to_string()),
            ("model.d_ff".into(), self.model_d_ff.to_string()),
            ("model.max_seq_len".into(), self.model_max_seq_len.to_string()),
            ("train.steps".into(), self.train_steps.to_string()),
            ("train.batch_size".into(), self.train_batch_size.to_string()),
            ("train.learning_rate".into(), self.train_learning_rate.to_string()),
            ("train.beta1".into(), self.train_beta1.to_string()),
            ("train.beta2".into(), self.train_beta2.to_string()),
            ("train.weight_decay".into(), self.train_weight_decay.to_string()),
            (
                "train.grad_clip_norm".into(),
                self.train_grad_clip_norm.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
            ),
            ("train.log_every".into(), self.train_log_every.to_string()),
            ("epgs.sigma".into(), self.epgs_sigma.to_string()),
            ("epgs.location".into(), self.epgs_location.name()),
            ("epgs.stabilization_eps".into(), self.epgs_stabilization_eps.to_string()),
            ("epgs.perturb_prompt_only".into(), self.epgs_perturb_prompt_only.to_string()),
            ("curvature.iterations".into(), self.curvature_iterations.to_string()),
            ("curvature.tolerance".into(), self.curvature_tolerance.to_string()),
            (
                "curvature.max_examples".into(),
                self.curvature_max_examples.map(|v| v.to_string()).unwrap_or_else(|| "all".into()),
            ),
            ("eval.k".into(), self.eval_k.to_string()),
            ("eval.temperature".into(), self.eval_temperature.to_string()),
            ("eval.consistency_threshold".into(), self.eval_consistency_threshold.to_string()),
            ("eval.methods".into(), self.eval_methods.join(",")),
            ("eval.max_new".into(), self.eval_max_new.to_string()),
            ("eval.eigenscore_reg".into(), self.eval_eigenscore_reg.to_string()),
            ("run.seed".into(), self.run_seed.to_string()),
            ("output.dir".into(), self.output_dir.clone()),
            ("derived.task_seed".into(), self.task_seed().to_string()),
            ("derived.model_seed".into(), self.model_seed().to_string()),
            ("derived.train_seed".into(), self.train_seed().to_string()),
            ("derived.noise_seed".into(), self.noise_seed().to_string()),
            ("derived.sampling_seed".into(), self.sampling_seed().to_string()),
        ];
        kv.sort();
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    // Named substreams of run.seed.
    pub fn task_seed(&self) -> u64 {
        rng::derive(self.run_seed, "task")
    }
    pub fn model_seed(&self) -> u64 {
        rng::derive(self.run_seed, "model")
    }
    pub fn train_seed(&self) -> u64 {
        rng::derive(self.run_seed, "train")
    }
    pub fn noise_seed(&self) -> u64 {
        rng::derive(self.run_seed, "noise")
    }
    pub fn sampling_seed(&self) -> u64 {
        rng::derive(self.run_seed, "sampling")
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            n_facts: self.task_n_facts,
            n_singletons: self.task_n_singletons,
            n_transient: self.task_n_transient,
            redundancy: self.task_redundancy,
            n_templates: self.task_n_templates,
            corruption_mode: self.task_corruption_mode,
            seed: self.task_seed(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.model_vocab_size,
            d_model: self.model_d_model,
            n_layers: self.model_n_layers,
            n_heads: self.model_n_heads,
            d_ff: self.model_d_ff,
            max_seq_len: self.model_max_seq_len,
            seed: self.model_seed(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            batch_size: self.train_batch_size,
            learning_rate: self.train_learning_rate,
            adam_betas: (self.train_beta1, self.train_beta2),
            weight_decay: self.train_weight_decay,
            grad_clip_norm: self.train_grad_clip_norm,
            seed: self.train_seed(),
            log_every: self.train_log_every,
        }
    }

    pub fn epgs_config(&self) -> EpgsConfig {
        EpgsConfig {
            sigma: self.epgs_sigma,
            location: self.epgs_location,
            stabilization_eps: self.epgs_stabilization_eps,
            noise_seed: self.noise_seed(),
            perturb_prompt_only: self.epgs_perturb_prompt_only,
            max_new: self.eval_max_new,
        }
    }

    pub fn benchmark_config(&self, config_digest: String) -> BenchmarkConfig {
        BenchmarkConfig {
            epgs: self.epgs_config(),
            methods: self.eval_methods.clone(),
            k: self.eval_k,
            temperature: self.eval_temperature,
            consistency_threshold: self.eval_consistency_threshold,
            curvature_iters: self.curvature_iterations,
            curvature_tol: self.curvature_tolerance,
            curvature_max_examples: self.curvature_max_examples,
            eigenscore_reg: self.eval_eigenscore_reg,
            seed: self.run_seed,
            max_new: self.eval_max_new,
            config_digest,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_snapshot() {
        let cfg = RunConfig::default();
        let snap = cfg.resolved_snapshot();
        // The snapshot itself parses (derived.* keys excluded).
        let filtered: String =
            snap.lines().filter(|l| !l.starts_with("derived.")).collect::<Vec<_>>().join("\n");
        let reparsed = RunConfig::from_str_contents(&filtered).unwrap();
        assert_eq!(reparsed.resolved_snapshot(), snap);
    }

    #[test]
    fn unknown_key_fails_closed_with_path() {
        let err = RunConfig::from_str_contents("task.n_factz = 3").unwrap_err();
        assert!(err.to_string().contains("task.n_factz"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::from_str_contents("# comment\n\nrun.seed = 7\n").unwrap();
        assert_eq!(cfg.run_seed, 7);
    }

    #[test]
    fn bad_value_reports_key() {
        let err = RunConfig::from_str_contents("train.steps = many").unwrap_err();
        assert!(err.to_string().contains("train.steps"), "{err}");
    }

    #[test]
    fn clip_none_parses() {
        let cfg = RunConfig::from_str_contents("train.grad_clip_norm = none").unwrap();
        assert_eq!(cfg.train_grad_clip_norm, None);
    }

    #[test]
    fn method_validation() {
        assert!(RunConfig::from_str_contents("eval.methods = epgs,nonsense").is_err());
        let cfg = RunConfig::from_str_contents("eval.methods = epgs, max_prob").unwrap();
        assert_eq!(cfg.eval_methods, vec!["epgs", "max_prob"]);
    }
}
