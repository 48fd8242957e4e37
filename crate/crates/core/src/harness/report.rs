use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::run::{run_training_on, RunConfig, RunReport, Variant};
use crate::btg::Strategy;
use crate::error::{Error, Result};
use crate::synthdata::generate;

/// Ladder rows, in order.
pub const LADDER: [&str; 5] = ["baseline", "+gate", "+gate+meta", "+gate+BTG", "full"];

/// Cells of the balance comparison.
pub const BALANCE_GRID: [(Variant, Strategy); 8] = [
    (Variant::Backbone, Strategy::None),
    (Variant::Backbone, Strategy::Lb),
    (Variant::Backbone, Strategy::Mb),
    (Variant::Backbone, Strategy::Gb),
    (Variant::Meta, Strategy::None),
    (Variant::Meta, Strategy::Lb),
    (Variant::Meta, Strategy::Mb),
    (Variant::Meta, Strategy::Gb),
];

fn with(base: &RunConfig, gated: bool, variant: Variant, strategy: Strategy) -> RunConfig {
    let mut c = base.clone();
    c.model.gated = gated;
    c.variant = variant;
    c.btg.strategy = strategy;
    c
}

/// `(row name, config)` for the ablation ladder.
pub fn ladder_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let rows = [
        (false, Variant::Erm, Strategy::None),
        (true, Variant::Erm, Strategy::None),
        (true, Variant::Meta, Strategy::None),
        (true, Variant::Backbone, Strategy::Gb),
        (true, Variant::Meta, Strategy::Gb),
    ];
    LADDER
        .iter()
        .zip(rows)
        .map(|(name, (g, v, s))| (name.to_string(), with(base, g, v, s)))
        .collect()
}

pub fn balance_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    BALANCE_GRID
        .iter()
        .map(|&(v, s)| {
            let learner = if v == Variant::Meta {
                "meta"
            } else {
                "backbone"
            };
            (format!("{learner}/{}", s.label()), with(base, true, v, s))
        })
        .collect()
}

/// Run reports keyed by config hash, so cells shared between tables are
/// trained once.
#[derive(Clone, Debug, Default)]
pub struct RunCache {
    runs: BTreeMap<String, RunReport>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, cfg: &RunConfig) -> Option<&RunReport> {
        self.runs.get(&cfg.hash())
    }

    pub fn insert(&mut self, report: RunReport) {
        self.runs.insert(report.config_hash.clone(), report);
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Refuses to put runs trained on different data side by side.
pub fn check_same_data(reports: &[&RunReport]) -> Result<()> {
    if let Some(first) = reports.first() {
        for r in &reports[1..] {
            if r.data_hash != first.data_hash {
                return Err(Error::HashMismatch(
                    first.data_hash.clone(),
                    r.data_hash.clone(),
                ));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
    pub mean_val: f64,
    pub mean_test: f64,
    pub mean_entropy: Option<f64>,
    /// Per seed: gate mass on class dims exceeds mass on context dims.
    pub gate_focus: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub title: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\nseeds: {:?}\n\n", self.title, self.seeds);
        let _ = writeln!(
            s,
            "| {:<14} | {:>8} | {:>8} | {:>7} | {:>10} |",
            "method", "val", "test", "entropy", "gate focus"
        );
        let _ = writeln!(
            s,
            "|{:-<16}|{:->10}|{:->10}|{:->9}|{:->12}|",
            "", "", "", "", ""
        );
        for r in &self.rows {
            let ent = r
                .mean_entropy
                .map_or("-".to_string(), |e| format!("{e:.3}"));
            let focus = r.gate_focus.iter().filter(|&&f| f).count();
            let _ = writeln!(
                s,
                "| {:<14} | {:>8.2} | {:>8.2} | {:>7} | {:>7}/{:<2} |",
                r.name,
                r.mean_val,
                r.mean_test,
                ent,
                focus,
                r.gate_focus.len()
            );
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn run_table(
    title: &str,
    base: &RunConfig,
    seeds: &[u64],
    cells: fn(&RunConfig) -> Vec<(String, RunConfig)>,
    cache: &mut RunCache,
) -> Result<ComparisonTable> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut per_row: Vec<(String, Vec<RunReport>)> = Vec::new();
    for &seed in seeds {
        let mut seeded = base.clone();
        seeded.seed = seed;
        seeded.data.seed = seed;
        let configs = cells(&seeded);
        let mut splits = None;
        let mut reports = Vec::with_capacity(configs.len());
        for (name, mut cfg) in configs {
            if let Some(dir) = &base.out_dir {
                cfg.out_dir = Some(dir.join(format!("seed{seed}")).join(sanitize(&name)));
            }
            let report = match cache.get(&cfg) {
                Some(r) => r.clone(),
                None => {
                    if splits.is_none() {
                        splits = Some(generate(&cfg.data)?);
                    }
                    log::info!("training {name} (seed {seed})");
                    let r = run_training_on(&cfg, splits.as_ref().expect("generated"))?.report;
                    cache.insert(r.clone());
                    r
                }
            };
            reports.push((name, report));
        }
        check_same_data(&reports.iter().map(|(_, r)| r).collect::<Vec<_>>())?;
        for (i, (name, r)) in reports.into_iter().enumerate() {
            if per_row.len() <= i {
                per_row.push((name, Vec::new()));
            }
            per_row[i].1.push(r);
        }
    }
    let rows = per_row
        .into_iter()
        .map(|(name, rs)| {
            let val: Vec<f64> = rs.iter().map(|r| r.final_val).collect();
            let test: Vec<f64> = rs.iter().map(|r| r.final_test).collect();
            let ents: Vec<f64> = rs.iter().filter_map(|r| r.balance_entropy).collect();
            ComparisonRow {
                name,
                mean_val: mean(&val),
                mean_test: mean(&test),
                val,
                test,
                mean_entropy: (!ents.is_empty()).then(|| mean(&ents)),
                gate_focus: rs
                    .iter()
                    .map(|r| r.gate_class_dims > r.gate_context_dims)
                    .collect(),
            }
        })
        .collect();
    let table = ComparisonTable {
        title: title.to_string(),
        seeds: seeds.to_vec(),
        rows,
    };
    if let Some(dir) = &base.out_dir {
        let slug = sanitize(title).to_lowercase();
        let path = dir.join(format!("{slug}.txt"));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&path, table.to_text()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(format!("{slug}.json"));
        let json = serde_json::to_string_pretty(&table).expect("serializable");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}

/// Trains the five-row ablation ladder for every seed.
pub fn run_ablation(
    base: &RunConfig,
    seeds: &[u64],
    cache: &mut RunCache,
) -> Result<ComparisonTable> {
    run_table("Ablation", base, seeds, ladder_configs, cache)
}

/// Trains the balancing strategy x feature learner grid for every seed.
pub fn run_balance_comparison(
    base: &RunConfig,
    seeds: &[u64],
    cache: &mut RunCache,
) -> Result<ComparisonTable> {
    run_table("Balance comparison", base, seeds, balance_configs, cache)
}
