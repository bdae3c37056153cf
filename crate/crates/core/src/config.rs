//! Run configuration: one flat `key=value` namespace shared by the config
//! file, the `MISSFUSE_SEED` environment variable and command-line flags,
//! applied in that order over the built-in defaults.
//!
//! Keys carry a section prefix (`gen.`, `model.`, `train.`, `eval.`,
//! `ablate.`) except for the root `seed`, `out_dir` and `cohort`. The ablation
//! switches and `beta` also accept their bare names.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::{format_split, parse_split, GenConfig};
use crate::error::{Error, Result};
use crate::model::{Inference, ModelConfig};
use crate::training::{Precision, TrainConfig};

pub const SEED_ENV: &str = "MISSFUSE_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Monte Carlo draws at inference.
    pub mc_samples: usize,
    /// Classify at the posterior mean (the "w/o MC" variant). Also turns off
    /// sampling during training.
    pub deterministic_inference: bool,
    /// Evaluation seeds; empty means "the root seed".
    pub seeds: Vec<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mc_samples: 10,
            deterministic_inference: false,
            seeds: Vec::new(),
        }
    }
}

impl EvalOptions {
    pub fn inference(&self) -> Inference {
        if self.deterministic_inference {
            Inference::Mean
        } else {
            Inference::MonteCarlo(self.mc_samples)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateOptions {
    /// Training seeds; each variant is trained once per seed.
    pub seeds: Vec<u64>,
    /// Monte Carlo draw counts evaluated on the full model.
    pub l_sweep: Vec<usize>,
    /// Retrain with `train.mc_samples = L` for each sweep point instead of
    /// only changing the inference draw count.
    pub retrain_l_sweep: bool,
    /// Optional KL weights to train the full model with.
    pub beta_sweep: Vec<f64>,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            l_sweep: vec![1, 2, 5, 10, 20],
            retrain_l_sweep: false,
            beta_sweep: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Cohort directory; defaults to `<out_dir>/cohort`.
    pub cohort: Option<PathBuf>,
    pub gen: GenConfig,
    /// Explicit generator seed; the root seed otherwise.
    pub gen_seed: Option<u64>,
    /// Model widths and switches. Modality dims and class count come from
    /// the cohort at training time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Explicit training seed; the root seed otherwise.
    pub train_seed: Option<u64>,
    pub eval: EvalOptions,
    pub ablate: AblateOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("missfuse-out"),
            cohort: None,
            gen: GenConfig::default(),
            gen_seed: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_seed: None,
            eval: EvalOptions::default(),
            ablate: AblateOptions::default(),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

/// Every recognised key, for help output and error messages.
pub const KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "cohort",
    "gen.num_classes",
    "gen.input_dims",
    "gen.latent_dim",
    "gen.separation",
    "gen.noise_std",
    "gen.tabular_noise_std",
    "gen.degraded_rate",
    "gen.degraded_noise_std",
    "gen.subset_weights",
    "gen.n_samples",
    "gen.split",
    "gen.seed",
    "model.dim",
    "model.latent_dim",
    "model.hidden",
    "model.heads",
    "model.literal_attention",
    "model.vector_gate",
    "model.disable_pra",
    "model.disable_uapoe_variance",
    "train.lr",
    "train.warmup_epochs",
    "train.max_epochs",
    "train.patience",
    "train.batch_size",
    "train.beta",
    "train.mc_samples",
    "train.sample_during_training",
    "train.modality_dropout",
    "train.precision",
    "train.seed",
    "eval.mc_samples",
    "eval.deterministic_inference",
    "eval.seeds",
    "ablate.seeds",
    "ablate.l_sweep",
    "ablate.retrain_l_sweep",
    "ablate.beta_sweep",
];

fn canonical(key: &str) -> &str {
    match key {
        "disable_pra" => "model.disable_pra",
        "disable_uapoe_variance" => "model.disable_uapoe_variance",
        "literal_attention" => "model.literal_attention",
        "vector_gate" => "model.vector_gate",
        "deterministic_inference" => "eval.deterministic_inference",
        "beta" => "train.beta",
        other => other,
    }
}

impl RunConfig {
    /// Apply one setting. `L` sets both the training and inference draw counts.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = || Error::Config(format!("invalid value {value:?} for {key}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        let flag = || parse_bool(value).ok_or_else(bad);
        if key == "L" || key == "eval.L" {
            let l: usize = num!();
            if key == "L" {
                self.train.mc_samples = l;
            }
            self.eval.mc_samples = l;
            return Ok(());
        }
        match canonical(key) {
            "seed" => self.seed = num!(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "cohort" => self.cohort = Some(PathBuf::from(value)),
            "gen.num_classes" => self.gen.num_classes = num!(),
            "gen.input_dims" => self.gen.input_dims = parse_list(value).ok_or_else(bad)?,
            "gen.latent_dim" => self.gen.latent_dim = num!(),
            "gen.separation" => self.gen.separation = num!(),
            "gen.noise_std" => self.gen.noise_std = num!(),
            "gen.tabular_noise_std" => self.gen.tabular_noise_std = num!(),
            "gen.degraded_rate" => self.gen.degraded_rate = num!(),
            "gen.degraded_noise_std" => self.gen.degraded_noise_std = num!(),
            "gen.subset_weights" => {
                self.gen.subset_weights = if value == "default" {
                    None
                } else {
                    Some(parse_list(value).ok_or_else(bad)?)
                }
            }
            "gen.n_samples" => self.gen.n_samples = num!(),
            "gen.split" => self.gen.split = parse_split(value)?,
            "gen.seed" => self.gen_seed = Some(num!()),
            "model.dim" => self.model.dim = num!(),
            "model.latent_dim" => self.model.latent_dim = num!(),
            "model.hidden" => self.model.hidden = num!(),
            "model.heads" => self.model.heads = num!(),
            "model.literal_attention" => self.model.literal_attention = flag()?,
            "model.vector_gate" => self.model.vector_gate = flag()?,
            "model.disable_pra" => self.model.disable_pra = flag()?,
            "model.disable_uapoe_variance" => self.model.disable_uapoe_variance = flag()?,
            "train.lr" => self.train.lr = num!(),
            "train.warmup_epochs" => self.train.warmup_epochs = num!(),
            "train.max_epochs" => self.train.max_epochs = num!(),
            "train.patience" => self.train.patience = num!(),
            "train.batch_size" => self.train.batch_size = num!(),
            "train.beta" => self.train.beta = num!(),
            "train.mc_samples" => self.train.mc_samples = num!(),
            "train.sample_during_training" => self.train.sample_during_training = flag()?,
            "train.modality_dropout" => self.train.modality_dropout = num!(),
            "train.precision" => self.train.precision = Precision::parse(value)?,
            "train.seed" => self.train_seed = Some(num!()),
            "eval.mc_samples" => self.eval.mc_samples = num!(),
            "eval.deterministic_inference" => self.eval.deterministic_inference = flag()?,
            "eval.seeds" => self.eval.seeds = parse_list(value).ok_or_else(bad)?,
            "ablate.seeds" => self.ablate.seeds = parse_list(value).ok_or_else(bad)?,
            "ablate.l_sweep" => self.ablate.l_sweep = parse_list(value).ok_or_else(bad)?,
            "ablate.retrain_l_sweep" => self.ablate.retrain_l_sweep = flag()?,
            "ablate.beta_sweep" => self.ablate.beta_sweep = parse_list(value).ok_or_else(bad)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a `key=value` file. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let line_no = i as u64 + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, line_no, line, "expected key=value"))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::parse(path, line_no, k.trim(), e.to_string()))?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `env_seed`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, path)?;
        }
        if let Some(seed) = env_seed {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an integer, got {seed:?}")))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.cohort.clone().unwrap_or_else(|| self.out_dir.join("cohort"))
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.gen_seed.unwrap_or(self.seed),
            ..self.gen.clone()
        }
    }

    /// Model configuration for a cohort with the given layout.
    pub fn model_config(&self, input_dims: &[usize], num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dims: input_dims.to_vec(),
            num_classes,
            ..self.model.clone()
        }
    }

    /// Training configuration with the seed resolved and the inference mode
    /// tied to the evaluation options.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.train_seed.unwrap_or(self.seed);
        t.validation = self.eval.inference();
        if self.eval.deterministic_inference {
            t.sample_during_training = false;
        }
        t
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        if self.eval.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.eval.seeds.clone()
        }
    }

    /// Render the resolved configuration as a loadable file.
    pub fn to_text(&self) -> String {
        fn list<T: ToString>(xs: &[T]) -> String {
            xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        }
        let g = &self.gen;
        let m = &self.model;
        let t = &self.train;
        let mut lines = vec![
            format!("seed={}", self.seed),
            format!("out_dir={}", self.out_dir.display()),
        ];
        if let Some(c) = &self.cohort {
            lines.push(format!("cohort={}", c.display()));
        }
        lines.extend([
            format!("gen.num_classes={}", g.num_classes),
            format!("gen.input_dims={}", list(&g.input_dims)),
            format!("gen.latent_dim={}", g.latent_dim),
            format!("gen.separation={}", g.separation),
            format!("gen.noise_std={}", g.noise_std),
            format!("gen.tabular_noise_std={}", g.tabular_noise_std),
            format!("gen.degraded_rate={}", g.degraded_rate),
            format!("gen.degraded_noise_std={}", g.degraded_noise_std),
            format!(
                "gen.subset_weights={}",
                g.subset_weights.as_deref().map_or_else(|| "default".into(), list)
            ),
            format!("gen.n_samples={}", g.n_samples),
            format!("gen.split={}", format_split(&g.split)),
        ]);
        if let Some(s) = self.gen_seed {
            lines.push(format!("gen.seed={s}"));
        }
        lines.extend([
            format!("model.dim={}", m.dim),
            format!("model.latent_dim={}", m.latent_dim),
            format!("model.hidden={}", m.hidden),
            format!("model.heads={}", m.heads),
            format!("model.literal_attention={}", m.literal_attention),
            format!("model.vector_gate={}", m.vector_gate),
            format!("model.disable_pra={}", m.disable_pra),
            format!("model.disable_uapoe_variance={}", m.disable_uapoe_variance),
            format!("train.lr={}", t.lr),
            format!("train.warmup_epochs={}", t.warmup_epochs),
            format!("train.max_epochs={}", t.max_epochs),
            format!("train.patience={}", t.patience),
            format!("train.batch_size={}", t.batch_size),
            format!("train.beta={}", t.beta),
            format!("train.mc_samples={}", t.mc_samples),
            format!("train.sample_during_training={}", t.sample_during_training),
            format!("train.modality_dropout={}", t.modality_dropout),
            format!("train.precision={}", t.precision.name()),
        ]);
        if let Some(s) = self.train_seed {
            lines.push(format!("train.seed={s}"));
        }
        lines.extend([
            format!("eval.mc_samples={}", self.eval.mc_samples),
            format!("eval.deterministic_inference={}", self.eval.deterministic_inference),
            format!("eval.seeds={}", list(&self.eval.seeds)),
            format!("ablate.seeds={}", list(&self.ablate.seeds)),
            format!("ablate.l_sweep={}", list(&self.ablate.l_sweep)),
            format!("ablate.retrain_l_sweep={}", self.ablate.retrain_l_sweep),
            format!("ablate.beta_sweep={}", list(&self.ablate.beta_sweep)),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn precedence_defaults_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nseed=5\ntrain.beta=0.5\ngen.n_samples=100\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), None, &[]).unwrap();
        assert_eq!((cfg.seed, cfg.train.beta, cfg.gen.n_samples), (5, 0.5, 100));
        assert_eq!(cfg.train.lr, 2e-4);

        let cfg = RunConfig::resolve(Some(&path), Some("9"), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        let cfg = RunConfig::resolve(Some(&path), Some("9"), &[kv("seed", "11"), kv("beta", "0")]).unwrap();
        assert_eq!((cfg.seed, cfg.train.beta), (11, 0.0));
    }

    #[test]
    fn bad_settings_are_reported() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("train.nonsense", "1").is_err());
        assert!(cfg.set("train.lr", "fast").is_err());
        assert!(cfg.set("gen.split", "1:2").is_err());
        let err = cfg.apply_text("seed=1\nbroken line\n", Path::new("x.cfg")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("disable_pra", "true").unwrap();
        cfg.set("ablate.beta_sweep", "0,0.001,0.01").unwrap();
        cfg.set("gen.subset_weights", &vec!["1"; 15].join(",")).unwrap();
        cfg.set("train.seed", "4").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), Path::new("t")).unwrap();
        assert_eq!(back, cfg);
        for key in KEYS {
            assert!(cfg.to_text().contains(&format!("{key}=")) || matches!(*key, "cohort" | "gen.seed"));
        }
    }

    #[test]
    fn deterministic_inference_disables_training_noise() {
        let mut cfg = RunConfig::default();
        cfg.set("deterministic_inference", "true").unwrap();
        let t = cfg.train_config();
        assert!(!t.sample_during_training);
        assert_eq!(t.validation, Inference::Mean);
    }
}
