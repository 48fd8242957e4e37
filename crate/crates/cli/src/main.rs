//! `bmcl` command-line front end.
//!
//! Config precedence: built-in defaults, then `--config FILE` (TOML), then
//! flags. `--set a.b=value` reaches any `RunConfig` field; values parse as
//! JSON and fall back to plain strings.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmcl_core::btg::Strategy;
use bmcl_core::error::{Error, Result};
use bmcl_core::harness::{
    evaluate, evaluate_checkpoint, export_attention_heatmaps, run_ablation, run_balance_comparison,
    run_training, RunCache, RunConfig, Variant,
};
use bmcl_core::model::Model;
use bmcl_core::synthdata::{generate, Dataset};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "bmcl",
    version,
    about = "Balanced partitions + meta-learned causal features on a synthetic OOD benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test dataset files.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run into a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file, or on val/test regenerated from the config.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the five-row ablation ladder.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Train the balancing strategy x feature learner grid.
    BalanceCompare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Render gate heatmaps for a checkpoint.
    Heatmaps {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the test split regenerated from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// TOML file with RunConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; also the data seed unless --data-seed is given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// erm, backbone or meta.
    #[arg(long)]
    variant: Option<Variant>,
    /// none, lb, mb or gb.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    gated: Option<bool>,
    #[arg(long)]
    splits: Option<usize>,
    #[arg(long)]
    irm_weight: Option<f64>,
    #[arg(long)]
    refresh_start: Option<usize>,
    #[arg(long)]
    refresh_period: Option<usize>,
    /// Any field by dotted path, e.g. `--set meta.inner_lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{key}` is not inside a table")))?;
        if !obj.contains_key(*key) {
            return Err(Error::Config(format!("unknown config field `{path}`")));
        }
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*key).expect("checked");
    }
    unreachable!("split yields at least one key")
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("serializable");
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Value =
                toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            let file =
                serde_json::to_value(file).map_err(|e| Error::format(path, e.to_string()))?;
            merge(&mut value, file);
        }
        let mut flag = |path: &str, v: Value| set_path(&mut value, path, v);
        if let Some(s) = self.seed {
            flag("seed", s.into())?;
            flag("data.seed", s.into())?;
        }
        if let Some(s) = self.data_seed {
            flag("data.seed", s.into())?;
        }
        if let Some(e) = self.epochs {
            flag("epochs", e.into())?;
        }
        if let Some(v) = self.variant {
            flag("variant", serde_json::to_value(v).expect("serializable"))?;
        }
        if let Some(s) = self.strategy {
            flag(
                "btg.strategy",
                serde_json::to_value(s).expect("serializable"),
            )?;
        }
        if let Some(g) = self.gated {
            flag("model.gated", g.into())?;
        }
        if let Some(m) = self.splits {
            flag("btg.splits", m.into())?;
        }
        if let Some(w) = self.irm_weight {
            flag("btg.irm_weight", w.into())?;
        }
        if let Some(e) = self.refresh_start {
            flag("refresh_start", e.into())?;
        }
        if let Some(p) = self.refresh_period {
            flag("refresh_period", p.into())?;
        }
        for kv in &self.overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            flag(key.trim(), v)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json(v: Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(&v).expect("serializable")
    );
}

fn load_model(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    Ok(Model::load(path)?.0)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { cfg, out } => {
            let cfg = cfg.resolve()?;
            let splits = generate(&cfg.data)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for ds in [&splits.train, &splits.val, &splits.test] {
                let path = out.join(format!("{}.txt", ds.role.as_str()));
                ds.save(&path)?;
                println!("{} ({} samples)", path.display(), ds.len());
            }
        }
        Command::Train { cfg, out } => {
            let mut cfg = cfg.resolve()?;
            cfg.out_dir = Some(out);
            print_json(serde_json::to_value(run_training(&cfg)?.report).expect("serializable"));
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
        } => {
            let cfg = cfg.resolve()?;
            let sets = match data {
                Some(path) => vec![Dataset::load(&path)?],
                None => {
                    let s = generate(&cfg.data)?;
                    vec![s.val, s.test]
                }
            };
            let mut out = serde_json::Map::new();
            for ds in &sets {
                let acc = evaluate_checkpoint(&checkpoint, ds)?;
                out.insert(
                    ds.role.as_str().to_string(),
                    serde_json::to_value(acc).expect("serializable"),
                );
            }
            print_json(Value::Object(out));
        }
        Command::Ablate { cfg, out, seeds } => {
            let mut cfg = cfg.resolve()?;
            cfg.out_dir = Some(out);
            print!(
                "{}",
                run_ablation(&cfg, &seeds, &mut RunCache::new())?.to_text()
            );
        }
        Command::BalanceCompare { cfg, out, seeds } => {
            let mut cfg = cfg.resolve()?;
            cfg.out_dir = Some(out);
            print!(
                "{}",
                run_balance_comparison(&cfg, &seeds, &mut RunCache::new())?.to_text()
            );
        }
        Command::Heatmaps {
            cfg,
            checkpoint,
            data,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let model = load_model(&checkpoint)?;
            let ds = match data {
                Some(path) => Dataset::load(&path)?,
                None => generate(&cfg.data)?.test,
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let export = export_attention_heatmaps(
                &model,
                &ds,
                cfg.data.class_range(),
                cfg.data.context_range(),
                &out,
            )?;
            let acc = evaluate(&model, &ds)?;
            println!(
                "{} images; gate class dims {:.3}, context dims {:.3}; top1 {:.2}",
                export.files.len(),
                export.summary.class_dims,
                export.summary.context_dims,
                acc.top1
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
