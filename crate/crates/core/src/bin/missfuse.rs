use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use missfuse::commands::{cmd_ablate, cmd_eval, cmd_generate, cmd_train, cmd_verify, CHECKPOINT_FILE};
use missfuse::config::{RunConfig, SEED_ENV};
use missfuse::verify::VerifyOptions;

#[derive(Parser)]
#[command(name = "missfuse", version, about = "Classification under arbitrary modality missingness")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the file and MISSFUSE_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long = "out", global = true)]
    out_dir: Option<PathBuf>,
    /// Cohort directory (defaults to <out>/cohort).
    #[arg(long, global = true)]
    cohort: Option<PathBuf>,
    /// Arbitrary configuration override, applied last; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Generate(GenerateArgs),
    /// Train a model on the cohort's train split.
    Train(ModelArgs),
    /// Evaluate a checkpoint on every modality subset of the test split.
    Eval(EvalArgs),
    /// Train each ablation arm over several seeds and sweep L.
    Ablate(AblateArgs),
    /// Run the built-in numerical self checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n_samples: Option<usize>,
    /// Train:val:test ratio such as 40:7:10.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Args, Default)]
struct ModelArgs {
    #[arg(long = "disable_pra", alias = "disable-pra")]
    disable_pra: bool,
    #[arg(long = "disable_uapoe_variance", alias = "disable-uapoe-variance")]
    disable_uapoe_variance: bool,
    #[arg(long = "deterministic_inference", alias = "deterministic-inference")]
    deterministic_inference: bool,
    #[arg(long = "literal_attention", alias = "literal-attention")]
    literal_attention: bool,
    #[arg(long = "vector_gate", alias = "vector-gate")]
    vector_gate: bool,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "max_epochs", alias = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<usize>,
    /// Monte Carlo draws for training and inference.
    #[arg(long = "L")]
    mc_samples: Option<usize>,
    /// f32 (default) or f64 parameter storage.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate (defaults to <out>/model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated evaluation seeds.
    #[arg(long = "eval_seeds", alias = "eval-seeds")]
    eval_seeds: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated training seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated Monte Carlo draw counts.
    #[arg(long = "l_sweep", alias = "l-sweep")]
    l_sweep: Option<String>,
    /// Retrain the full model for each L instead of only re-evaluating.
    #[arg(long = "retrain_l_sweep", alias = "retrain-l-sweep")]
    retrain_l_sweep: bool,
    /// Comma-separated KL weights to train the full model with.
    #[arg(long = "beta_sweep", alias = "beta-sweep")]
    beta_sweep: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Flip a sign inside fusion; the oracle check must then fail.
    #[arg(long = "inject-fault", alias = "inject_fault")]
    inject_fault: bool,
}

type Pairs = Vec<(String, String)>;

fn push<T: ToString>(pairs: &mut Pairs, key: &str, value: Option<T>) {
    if let Some(v) = value {
        pairs.push((key.to_string(), v.to_string()));
    }
}

fn push_flag(pairs: &mut Pairs, key: &str, on: bool) {
    if on {
        pairs.push((key.to_string(), "true".into()));
    }
}

impl ModelArgs {
    fn overrides(&self, pairs: &mut Pairs) {
        push_flag(pairs, "model.disable_pra", self.disable_pra);
        push_flag(pairs, "model.disable_uapoe_variance", self.disable_uapoe_variance);
        push_flag(pairs, "eval.deterministic_inference", self.deterministic_inference);
        push_flag(pairs, "model.literal_attention", self.literal_attention);
        push_flag(pairs, "model.vector_gate", self.vector_gate);
        push(pairs, "train.beta", self.beta);
        push(pairs, "train.lr", self.lr);
        push(pairs, "train.max_epochs", self.max_epochs);
        push(pairs, "train.patience", self.patience);
        push(pairs, "train.batch_size", self.batch_size);
        push(pairs, "L", self.mc_samples);
        push(pairs, "train.precision", self.precision.as_ref());
    }
}

fn overrides(cli: &Cli) -> Result<Pairs, String> {
    let mut pairs = Pairs::new();
    push(&mut pairs, "seed", cli.seed);
    push(&mut pairs, "out_dir", cli.out_dir.as_ref().map(|p| p.display()));
    push(&mut pairs, "cohort", cli.cohort.as_ref().map(|p| p.display()));
    match &cli.command {
        Command::Generate(a) => {
            push(&mut pairs, "gen.n_samples", a.n_samples);
            push(&mut pairs, "gen.split", a.split.as_ref());
            push(&mut pairs, "gen.separation", a.separation);
            push(&mut pairs, "gen.noise_std", a.noise_std);
        }
        Command::Train(m) => m.overrides(&mut pairs),
        Command::Eval(a) => {
            a.model.overrides(&mut pairs);
            push(&mut pairs, "eval.seeds", a.eval_seeds.as_ref());
        }
        Command::Ablate(a) => {
            a.model.overrides(&mut pairs);
            push(&mut pairs, "ablate.seeds", a.seeds.as_ref());
            push(&mut pairs, "ablate.l_sweep", a.l_sweep.as_ref());
            push_flag(&mut pairs, "ablate.retrain_l_sweep", a.retrain_l_sweep);
            push(&mut pairs, "ablate.beta_sweep", a.beta_sweep.as_ref());
        }
        Command::Verify(_) => {}
    }
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        pairs.push((k.trim().to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn run(cli: &Cli) -> Result<bool, String> {
    let pairs = overrides(cli)?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(cli.config.as_deref(), env_seed.as_deref(), &pairs).map_err(|e| e.to_string())?;
    let mut out = io::stdout().lock();
    let result = match &cli.command {
        Command::Generate(_) => cmd_generate(&cfg, &mut out).map(|_| true),
        Command::Train(_) => cmd_train(&cfg, &mut out).map(|_| true),
        Command::Eval(a) => {
            let ckpt = a.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            cmd_eval(&cfg, &ckpt, &mut out).map(|_| true)
        }
        Command::Ablate(_) => cmd_ablate(&cfg, &mut out).map(|_| true),
        Command::Verify(a) => cmd_verify(
            VerifyOptions {
                seed: cfg.seed,
                inject_fault: a.inject_fault,
            },
            &mut out,
        ),
    };
    result.map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
