use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbridge::config::{RunConfig, KEYS};
use sbridge::conditioning::ConditionKey;
use sbridge::data::{self, ExpressionDataset, Provenance};
use sbridge::error::{Error, Result};
use sbridge::metrics;
use sbridge::training::{self, BridgeModel};

#[derive(Parser)]
#[command(name = "sbridge", version, about = "Bridge-matching model of perturbation response")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its ground-truth shifts.
    Synth(Common),
    /// Preprocess, split, and train; writes a run directory.
    Train(Common),
    /// Sample perturbed cells for one condition from a trained run.
    Generate(Common),
    /// Score held-out conditions of a trained run.
    Evaluate(Common),
}

#[derive(Args)]
#[command(after_help = key_help())]
struct Common {
    /// JSON file of dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one key, e.g. `--set bridge.sigma=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn key_help() -> String {
    format!("Config keys:\n  {}", KEYS.join("\n  "))
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("an output directory is required (--out)".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn required<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("`{key}` is required")))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synth_spec()?;
    let dir = out_dir(cfg)?;
    let (ds, truth) = data::synth_generate(&spec)?;
    data::save_matrix(&ds, &dir.join("expression.csv"))?;
    truth.write_csv(&ds.vocab, &dir.join("shifts.csv"))
}

fn prepare(cfg: &RunConfig) -> Result<ExpressionDataset> {
    let path = required(&cfg.data.path, "data.path")?;
    let mut ds = data::load_matrix(path, cfg.data.provenance)?;
    if ds.provenance == Provenance::Raw {
        ds = data::log1p_normalize(&ds)?;
    }
    if cfg.data.hvg > 0 && cfg.data.hvg < ds.n_genes() {
        ds = data::select_hvg(&ds, cfg.data.hvg)?;
    }
    Ok(ds)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train_cfg = cfg.train_config()?;
    let ds = prepare(cfg)?;
    let dir = out_dir(cfg)?;
    let seed = train_cfg.seed;
    let (train, test, split_seed) = if cfg.split.seen_perturbations {
        data::split_with_seen_perturbations(&ds, cfg.split.mode, cfg.split.fraction, seed)?
    } else {
        let (a, b) = data::split(&ds, cfg.split.mode, cfg.split.fraction, seed)?;
        (a, b, seed)
    };
    data::save_matrix(&train, &dir.join("train.csv"))?;
    data::save_matrix(&test, &dir.join("test.csv"))?;
    let every = cfg.checkpoint_every;
    let (model, log) = training::train_with(&train, &train_cfg, |epoch, model| {
        if every > 0 && epoch % every == 0 {
            let ckpt = dir.join("checkpoints");
            std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
            model.save(&ckpt.join(format!("epoch_{epoch}.ckpt")))?;
        }
        Ok(())
    })?;
    model.save(&dir.join("model.ckpt"))?;
    training::write_log_csv(&log, &dir.join("train_log.csv"))?;
    let summary = serde_json::json!({
        "seed": seed,
        "split_seed": split_seed,
        "train_cells": train.n_cells(),
        "test_cells": test.n_cells(),
        "genes": train.n_genes(),
        "train": train_cfg,
    });
    write_json(&dir.join("run.json"), &summary)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a run's model and the named splits, keyed by the model's vocabulary.
fn load_run(dir: &Path, splits: &[&str]) -> Result<(BridgeModel, Vec<ExpressionDataset>)> {
    let model = BridgeModel::load(&dir.join("model.ckpt"))?;
    let sets = splits
        .iter()
        .map(|s| data::load_matrix(&dir.join(format!("{s}.csv")), Provenance::Log1p)?.with_vocab(&model.vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, sets))
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let g = &cfg.generate;
    let run_dir = required(&g.run_dir, "generate.run_dir")?;
    let pert = required(&g.perturbation, "generate.perturbation")?;
    let dir = out_dir(cfg)?;
    let (mut model, mut sets) = load_run(run_dir, &["train"])?;
    let train = sets.remove(0);
    // Sampling settings may differ from training, e.g. sigma = 0.
    model.bridge = cfg.bridge();
    model.bridge.validate()?;
    let ct_name = match &g.cell_type {
        Some(c) => c.clone(),
        None => model
            .vocab
            .cell_types
            .first()
            .cloned()
            .ok_or_else(|| Error::Data("model has no cell types".into()))?,
    };
    let key = ConditionKey::new(
        model.vocab.cell_type_id(&ct_name)?,
        model.vocab.perturbation_id(pert)?,
        g.dosage,
    );
    model.vocab.check(&key)?;
    let pool = train
        .controls_by_cell_type()
        .remove(&key.cell_type_id)
        .ok_or_else(|| Error::Data(format!("no control cells of cell type `{ct_name}`")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = training::sample_rows(&pool, g.count, &mut rng);
    let out = training::generate(&model, &train.rows(&picked), &key, &mut rng)?;
    let labelled = |m| ExpressionDataset {
        matrix: m,
        gene_names: model.gene_names.clone(),
        cell_ids: (0..g.count).map(|i| format!("generated_{i}")).collect(),
        conditions: vec![key; g.count],
        vocab: model.vocab.clone(),
        provenance: Provenance::Log1p,
    };
    data::save_matrix(&labelled(out.values), &dir.join("predictions.csv"))?;
    data::save_matrix(&labelled(out.activations), &dir.join("activations.csv"))
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let run_dir = required(&cfg.evaluate.run_dir, "evaluate.run_dir")?;
    let dir = out_dir(cfg)?;
    let (model, sets) = load_run(run_dir, &["train", "test"])?;
    let (train, test) = (&sets[0], &sets[1]);
    let eval = if cfg.evaluate.self_test {
        let groups = test.perturbed_groups();
        training::evaluate_with(train, test, seed, |key, _, _| Ok(test.rows(&groups[key])))?
    } else {
        training::evaluate(&model, train, test, seed)?
    };
    write_json(&dir.join("metrics.json"), &eval)?;
    let rows: Vec<(String, metrics::MetricsReport)> = eval
        .per_condition
        .iter()
        .map(|c| (c.condition.clone(), c.metrics.clone()))
        .collect();
    metrics::write_reports_csv(&rows, &dir.join("metrics.csv"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => cmd_synth(&c.resolve()?),
        Command::Train(c) => cmd_train(&c.resolve()?),
        Command::Generate(c) => cmd_generate(&c.resolve()?),
        Command::Evaluate(c) => cmd_evaluate(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
