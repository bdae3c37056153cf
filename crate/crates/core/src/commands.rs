//! Implementations behind the `missfuse` subcommands. Each takes a resolved
//! [`RunConfig`] and writes human-readable progress to `out`; primary
//! artifacts go under the configured output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::datagen::{self, availability, Cohort, Split};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_all, evaluate_seed, percent_cell, report_table, report_tsv, EvalSummary, ModelPredictor, SeedRun};
use crate::model::{Inference, ModelParams};
use crate::training::{self, format_history, TrainOutcome};
use crate::verify::{self, CheckOutcome, VerifyOptions};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const REPORT_FILE: &str = "report.tsv";
pub const REPORT_TABLE_FILE: &str = "report.txt";

fn say(out: &mut dyn Write, msg: impl AsRef<str>) {
    // Progress output is best effort; a closed pipe must not fail a run.
    let _ = writeln!(out, "{}", msg.as_ref());
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn rates(xs: &[f64]) -> String {
    xs.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ")
}

/// Generate a cohort into the cohort directory.
pub fn cmd_generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Cohort> {
    let gen = cfg.gen_config();
    let cohort = datagen::generate(&gen)?;
    let dir = cfg.cohort_dir();
    datagen::write_cohort(&cohort, &dir)?;
    say(out, format!("cohort written to {}", dir.display()));
    let m = gen.num_modalities();
    for split in Split::ALL {
        let samples = cohort.split(split);
        say(
            out,
            format!(
                "{:<5} n={:<5} availability per modality: {}",
                split.name(),
                samples.len(),
                rates(&availability(samples, m))
            ),
        );
    }
    say(out, format!("expected (train/val): {}", rates(&gen.expected_availability()?)));
    Ok(cohort)
}

fn load_cohort(cfg: &RunConfig) -> Result<Cohort> {
    let dir = cfg.cohort_dir();
    if !dir.join(datagen::MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "no cohort at {}; run `missfuse generate` first or pass --cohort",
            dir.display()
        )));
    }
    datagen::read_cohort(&dir)
}

/// Train on an in-memory cohort; no files are written.
pub fn train_on(cfg: &RunConfig, cohort: &Cohort) -> Result<TrainOutcome, training::TrainError> {
    let model_config = cfg.model_config(&cohort.config.input_dims, cohort.config.num_classes);
    training::train(&cohort.train, &cohort.val, &model_config, &cfg.train_config())
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub outcome: TrainOutcome,
}

/// Train, then write the best checkpoint, the history log and the resolved config.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainArtifacts> {
    let cohort = load_cohort(cfg)?;
    let train_cfg = cfg.train_config();
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    let history = cfg.out_dir.join(HISTORY_FILE);
    say(
        out,
        format!(
            "training on {} samples (val {}), seed {}",
            cohort.train.len(),
            cohort.val.len(),
            train_cfg.seed
        ),
    );
    let outcome = match train_on(cfg, &cohort) {
        Ok(o) => o,
        Err(e) => {
            if let Some(best) = &e.last_good {
                checkpoint::save(&checkpoint, best, train_cfg.precision)?;
                write_file(&history, format_history(&e.history, e.best_epoch))?;
                say(out, format!("training aborted; last good checkpoint kept at {}", checkpoint.display()));
            }
            return Err(e.source);
        }
    };
    write_file(&cfg.out_dir.join(RUN_CONFIG_FILE), cfg.to_text())?;
    checkpoint::save(&checkpoint, &outcome.params, train_cfg.precision)?;
    write_file(&history, format_history(&outcome.history, Some(outcome.best_epoch)))?;
    let best = &outcome.history[outcome.best_epoch];
    say(
        out,
        format!(
            "{} parameters; {} epochs{}; best epoch {} (val macro-F1 {:.4}, acc {:.4})",
            outcome.params.store.scalar_count(),
            outcome.history.len(),
            if outcome.stopped_early { " (early stop)" } else { "" },
            outcome.best_epoch,
            best.val_macro_f1,
            best.val_acc
        ),
    );
    say(out, format!("checkpoint {}", checkpoint.display()));
    Ok(TrainArtifacts {
        checkpoint,
        history,
        outcome,
    })
}

fn check_compatible(params: &ModelParams, cohort: &Cohort) -> Result<()> {
    let c = &params.config;
    if c.input_dims != cohort.config.input_dims || c.num_classes != cohort.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint expects modality dims {:?} and {} classes, cohort has {:?} and {}",
            c.input_dims, c.num_classes, cohort.config.input_dims, cohort.config.num_classes
        )));
    }
    Ok(())
}

/// Evaluate a checkpoint on every modality subset of the test split.
/// Nothing is written unless evaluation succeeds.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, out: &mut dyn Write) -> Result<EvalSummary> {
    let (params, _) = checkpoint::load(checkpoint_path)?;
    let cohort = load_cohort(cfg)?;
    check_compatible(&params, &cohort)?;
    let predictor = ModelPredictor {
        params: &params,
        inference: cfg.eval.inference(),
    };
    let summary = evaluate_all(&predictor, &cohort.test, &cfg.eval_seeds())?;
    let table = report_table(&summary);
    write_file(&cfg.out_dir.join(REPORT_FILE), report_tsv(&summary, params.config.num_classes))?;
    write_file(&cfg.out_dir.join(REPORT_TABLE_FILE), &table)?;
    say(out, table.trim_end());
    Ok(summary)
}

/// One ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    WithoutPra,
    WithoutUaPoe,
    WithoutMc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::WithoutPra, Variant::WithoutUaPoe, Variant::WithoutMc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutPra => "w/o-PRA",
            Variant::WithoutUaPoe => "w/o-UA-PoE",
            Variant::WithoutMc => "w/o-MC",
        }
    }

    /// The base configuration with this arm's switch flipped.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutPra => cfg.model.disable_pra = true,
            Variant::WithoutUaPoe => cfg.model.disable_uapoe_variance = true,
            Variant::WithoutMc => cfg.eval.deterministic_inference = true,
        }
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub variants: Vec<(Variant, EvalSummary)>,
    /// `(L, summary)` for the full model.
    pub l_sweep: Vec<(usize, EvalSummary)>,
    pub beta_sweep: Vec<(f64, EvalSummary)>,
}

impl AblationResult {
    pub fn variant(&self, v: Variant) -> Option<&EvalSummary> {
        self.variants.iter().find(|(x, _)| *x == v).map(|(_, s)| s)
    }
}

fn train_and_score(
    cfg: &RunConfig,
    cohort: &Cohort,
    seed: u64,
    label: &str,
    out: &mut dyn Write,
) -> Result<(ModelParams, SeedRun)> {
    let mut run_cfg = cfg.clone();
    run_cfg.train_seed = Some(seed);
    let outcome = train_on(&run_cfg, cohort).map_err(|e| e.source)?;
    let predictor = ModelPredictor {
        params: &outcome.params,
        inference: run_cfg.eval.inference(),
    };
    let run = evaluate_seed(&predictor, &cohort.test, seed)?;
    say(
        out,
        format!(
            "{label:<12} seed {seed}: {} epochs, best {}, avg acc {:.4}, macro-F1 {:.4}",
            outcome.history.len(),
            outcome.best_epoch,
            run.average.acc,
            run.average.macro_f1
        ),
    );
    Ok((outcome.params, run))
}

fn summary_row(label: String, s: &EvalSummary) -> Vec<String> {
    vec![
        label,
        percent_cell(s.mean.acc, s.std.acc),
        percent_cell(s.mean.macro_f1, s.std.macro_f1),
        match (s.mean.auc, s.std.auc) {
            (Some(m), Some(sd)) => percent_cell(m, sd),
            _ => "NA".into(),
        },
    ]
}

fn tsv_rows(out: &mut String, key: &str, label: &str, s: &EvalSummary) {
    for run in &s.runs {
        let auc = run.average.auc.map_or("NA".into(), |a| format!("{a:.6}"));
        let _ = writeln!(
            out,
            "{key}\t{label}\t{}\t{:.6}\t{:.6}\t{auc}",
            run.seed, run.average.acc, run.average.macro_f1
        );
    }
}

fn table(header: &str, rows: &[Vec<String>]) -> String {
    let mut all = vec![header.split('|').map(String::from).collect::<Vec<_>>()];
    all.extend(rows.iter().cloned());
    let widths: Vec<usize> = (0..all[0].len())
        .map(|c| all.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &all {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(x, w)| format!("{x:<w$}")).collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    s
}

/// Train every ablation arm over the configured seeds, then sweep `L`
/// (and optionally `β`) on the full model.
pub fn run_ablation(cfg: &RunConfig, cohort: &Cohort, out: &mut dyn Write) -> Result<AblationResult> {
    if cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut variants = Vec::new();
    let mut full_models = Vec::new();
    for v in Variant::ALL {
        let vcfg = v.configure(cfg);
        let mut runs = Vec::new();
        for &seed in &cfg.ablate.seeds {
            let (params, run) = train_and_score(&vcfg, cohort, seed, v.name(), out)?;
            if v == Variant::Full {
                full_models.push((seed, params));
            }
            runs.push(run);
        }
        variants.push((v, EvalSummary::from_runs(runs)));
    }

    let mut l_sweep = Vec::new();
    for &l in &cfg.ablate.l_sweep {
        Inference::MonteCarlo(l).validate()?;
        let mut runs = Vec::new();
        if cfg.ablate.retrain_l_sweep {
            let mut lcfg = cfg.clone();
            lcfg.train.mc_samples = l;
            lcfg.eval.mc_samples = l;
            for &seed in &cfg.ablate.seeds {
                runs.push(train_and_score(&lcfg, cohort, seed, &format!("L={l}"), out)?.1);
            }
        } else {
            for (seed, params) in &full_models {
                let predictor = ModelPredictor {
                    params,
                    inference: Inference::MonteCarlo(l),
                };
                runs.push(evaluate_seed(&predictor, &cohort.test, *seed)?);
            }
        }
        let s = EvalSummary::from_runs(runs);
        say(out, format!("L={l:<3} avg acc {:.4}", s.mean.acc));
        l_sweep.push((l, s));
    }

    let mut beta_sweep = Vec::new();
    for &beta in &cfg.ablate.beta_sweep {
        let mut bcfg = cfg.clone();
        bcfg.train.beta = beta;
        let mut runs = Vec::new();
        for &seed in &cfg.ablate.seeds {
            runs.push(train_and_score(&bcfg, cohort, seed, &format!("beta={beta}"), out)?.1);
        }
        beta_sweep.push((beta, EvalSummary::from_runs(runs)));
    }
    Ok(AblationResult {
        variants,
        l_sweep,
        beta_sweep,
    })
}

/// Tab-separated per-seed rows and the aligned summary tables.
pub fn ablation_reports(result: &AblationResult) -> (String, String) {
    let mut tsv = String::from("table\tarm\tseed\tacc\tmacro_f1\tauc\n");
    let mut text = String::new();
    let rows: Vec<Vec<String>> = result
        .variants
        .iter()
        .map(|(v, s)| {
            tsv_rows(&mut tsv, "ablation", v.name(), s);
            summary_row(v.name().to_string(), s)
        })
        .collect();
    text.push_str(&table("variant|ACC|Macro-F1|AUC", &rows));
    if !result.l_sweep.is_empty() {
        let rows: Vec<Vec<String>> = result
            .l_sweep
            .iter()
            .map(|(l, s)| {
                tsv_rows(&mut tsv, "l_sweep", &l.to_string(), s);
                summary_row(l.to_string(), s)
            })
            .collect();
        text.push('\n');
        text.push_str(&table("L|ACC|Macro-F1|AUC", &rows));
    }
    if !result.beta_sweep.is_empty() {
        let rows: Vec<Vec<String>> = result
            .beta_sweep
            .iter()
            .map(|(b, s)| {
                tsv_rows(&mut tsv, "beta_sweep", &b.to_string(), s);
                summary_row(b.to_string(), s)
            })
            .collect();
        text.push('\n');
        text.push_str(&table("beta|ACC|Macro-F1|AUC", &rows));
    }
    (tsv, text)
}

pub const ABLATION_FILE: &str = "ablation.tsv";
pub const ABLATION_TABLE_FILE: &str = "ablation.txt";

pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<AblationResult> {
    let cohort = load_cohort(cfg)?;
    let result = run_ablation(cfg, &cohort, out)?;
    let (tsv, text) = ablation_reports(&result);
    write_file(&cfg.out_dir.join(ABLATION_FILE), tsv)?;
    write_file(&cfg.out_dir.join(ABLATION_TABLE_FILE), &text)?;
    say(out, text.trim_end());
    if let (Some(full), Some(pra), Some(uapoe)) = (
        result.variant(Variant::Full),
        result.variant(Variant::WithoutPra),
        result.variant(Variant::WithoutUaPoe),
    ) {
        let gap = |s: &EvalSummary| 100.0 * (full.mean.acc - s.mean.acc);
        say(
            out,
            format!(
                "full - w/o-PRA: {:+.2} points; full - w/o-UA-PoE: {:+.2} points",
                gap(pra),
                gap(uapoe)
            ),
        );
    }
    Ok(result)
}

/// Run the self-check suite; `Ok(false)` when any check fails.
pub fn cmd_verify(options: VerifyOptions, out: &mut dyn Write) -> Result<bool> {
    let outcomes: Vec<CheckOutcome> = verify::run_all(options);
    for o in &outcomes {
        say(out, o.line());
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    say(out, format!("{passed}/{} checks passed", outcomes.len()));
    Ok(passed == outcomes.len())
}
