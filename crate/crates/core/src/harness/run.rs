use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::heatmap::GateSummary;
use super::metrics::{
    top1_accuracy, Accuracy, EvalRecord, MetricsRecord, PartitionRecord, UpdateRecord,
};
use crate::autodiff::{Tape, Tensor};
use crate::btg::{build_partition, export_partition, BtgConfig, Partition};
use crate::error::{Error, Result};
use crate::io;
use crate::mcfl::{
    is_meta_param, mixup_batch, sample_meta_tasks, stage2_step, task_loss, MetaTaskConfig,
    MixupConfig,
};
use crate::model::{Model, ModelConfig};
use crate::rng;
use crate::synthdata::{generate, Dataset, GenConfig, Splits};

/// How stage 2 learns features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain minibatch cross-entropy on the task head. No partitions.
    Erm,
    /// Split-sampled tasks without inner adaptation, plus the mixup branch.
    Backbone,
    /// Split-sampled tasks with inner adaptation, plus the mixup branch.
    Meta,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Variant::Erm),
            "backbone" => Ok(Variant::Backbone),
            "meta" => Ok(Variant::Meta),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (erm, backbone, meta)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub btg: BtgConfig,
    pub meta: MetaTaskConfig,
    pub mixup: MixupConfig,
    pub variant: Variant,
    pub epochs: usize,
    /// First epoch with a partition refresh. Values `>= epochs` disable
    /// refreshing and keep the initial random partition.
    pub refresh_start: usize,
    pub refresh_period: usize,
    /// Multiplier applied to the step size from `decay_fraction * epochs` on.
    pub lr_decay: f64,
    pub decay_fraction: f64,
    pub erm_weight: f64,
    pub seed: u64,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GenConfig::default(),
            model: ModelConfig::default(),
            btg: BtgConfig::default(),
            meta: MetaTaskConfig::default(),
            mixup: MixupConfig::default(),
            variant: Variant::Meta,
            epochs: 60,
            refresh_start: 12,
            refresh_period: 6,
            lr_decay: 0.1,
            decay_fraction: 0.9,
            erm_weight: 1.0,
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.btg.validate()?;
        self.meta.validate(self.btg.splits)?;
        self.mixup.validate()?;
        if self.model.input_dim != self.data.feature_dim
            || self.model.num_classes != self.data.num_classes
        {
            return Err(Error::Config(format!(
                "model expects {} dims / {} classes, data has {} / {}",
                self.model.input_dim,
                self.model.num_classes,
                self.data.feature_dim,
                self.data.num_classes
            )));
        }
        if self.epochs == 0 || self.refresh_period == 0 {
            return Err(Error::Config(
                "epochs and refresh_period must be >= 1".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
            || !(0.0..=1.0).contains(&self.decay_fraction)
        {
            return Err(Error::Config(
                "lr_decay must be in (0, 1], decay_fraction in [0, 1]".into(),
            ));
        }
        if !(self.erm_weight >= 0.0) {
            return Err(Error::Config("erm_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Hash of everything except the output directory.
    pub fn hash(&self) -> String {
        io::config_hash(self)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay_epoch = (self.decay_fraction * self.epochs as f64).ceil() as usize;
        if epoch >= decay_epoch {
            self.meta.outer_lr * self.lr_decay
        } else {
            self.meta.outer_lr
        }
    }

    pub fn refresh_due(&self, epoch: usize) -> bool {
        self.variant != Variant::Erm
            && epoch >= self.refresh_start
            && (epoch - self.refresh_start) % self.refresh_period == 0
    }

    fn stage2_meta(&self) -> MetaTaskConfig {
        match self.variant {
            Variant::Backbone => MetaTaskConfig {
                inner_steps: 0,
                ..self.meta.clone()
            },
            _ => self.meta.clone(),
        }
    }
}

/// Final numbers of a run, written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub data_hash: String,
    pub variant: Variant,
    pub strategy: crate::btg::Strategy,
    pub gated: bool,
    pub seed: u64,
    pub final_val: f64,
    pub final_test: f64,
    /// Mean gate on class-signal and context-signal dims over the test set.
    pub gate_class_dims: f64,
    pub gate_context_dims: f64,
    pub balance_entropy: Option<f64>,
    pub partition_refreshes: usize,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: RunReport,
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub partition: Option<Partition>,
    pub wall_secs: f64,
}

struct Artifacts {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Artifacts {
    fn open(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let failed = dir.join("FAILED");
        if failed.exists() {
            std::fs::remove_file(&failed).map_err(|e| Error::io(&failed, e))?;
        }
        let config = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg });
        write_json(&dir.join("config.json"), &config)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: io::create(&dir.join("metrics.jsonl"))?,
        })
    }

    fn record(&mut self, r: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("serializable");
        let path = self.dir.join("metrics.jsonl");
        io::write_line(&mut self.metrics, &path, &line)
    }

    fn flush(&mut self) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        self.metrics.flush().map_err(|e| Error::io(&path, e))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Accuracy> {
    let pred = model.classify(&data.features())?;
    top1_accuracy(&pred, &data.labels(), data.num_classes)
}

/// Splits the `run:data` hash pair stored in checkpoints.
pub fn load_run_hashes(stored: &str) -> (String, String) {
    match stored.split_once(':') {
        Some((r, d)) => (r.to_string(), d.to_string()),
        None => (stored.to_string(), String::new()),
    }
}

/// Loads a checkpoint and evaluates it, refusing data generated from a
/// different config than the run's.
pub fn evaluate_checkpoint(path: &Path, data: &Dataset) -> Result<Accuracy> {
    let (model, stored) = Model::load(path)?;
    let (_, data_hash) = load_run_hashes(&stored);
    if !data_hash.is_empty() && data_hash != data.config_hash {
        return Err(Error::HashMismatch(data_hash, data.config_hash.clone()));
    }
    evaluate(&model, data)
}

/// Generates the datasets from `cfg.data` and trains.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let splits = generate(&cfg.data)?;
    run_training_on(cfg, &splits)
}

/// Trains on pre-generated datasets (shared between runs of one seed).
pub fn run_training_on(cfg: &RunConfig, splits: &Splits) -> Result<RunSummary> {
    cfg.validate()?;
    if splits.train.config_hash != cfg.data.hash() {
        return Err(Error::HashMismatch(
            cfg.data.hash(),
            splits.train.config_hash.clone(),
        ));
    }
    let mut artifacts = match &cfg.out_dir {
        Some(dir) => Some(Artifacts::open(dir, cfg)?),
        None => None,
    };
    let started = Instant::now();
    let mut trainer = Trainer::new(cfg, splits)?;
    let result = trainer.run(&mut artifacts);
    let wall_secs = started.elapsed().as_secs_f64();

    if let Some(a) = artifacts.as_mut() {
        a.flush()?;
        let timing = serde_json::json!({
            "total_secs": wall_secs,
            "epoch_secs": trainer.epoch_secs,
        });
        write_json(&a.dir.join("timing.json"), &timing)?;
        if let Err(e) = &result {
            let path = a.dir.join("FAILED");
            std::fs::write(&path, format!("{e}\n")).map_err(|err| Error::io(&path, err))?;
        }
    }
    result?;

    let test_gate = trainer.model.encode(&splits.test.features())?.gate;
    let gate = GateSummary::from_gate(&test_gate, cfg.data.class_range(), cfg.data.context_range());
    let report = RunReport {
        config_hash: cfg.hash(),
        data_hash: splits.train.config_hash.clone(),
        variant: cfg.variant,
        strategy: cfg.btg.strategy,
        gated: cfg.model.gated,
        seed: cfg.seed,
        final_val: evaluate(&trainer.model, &splits.val)?.top1,
        final_test: evaluate(&trainer.model, &splits.test)?.top1,
        gate_class_dims: gate.class_dims,
        gate_context_dims: gate.context_dims,
        balance_entropy: trainer.entropy,
        partition_refreshes: trainer.refreshes,
    };
    if let Some(a) = &artifacts {
        let stored = format!("{}:{}", report.config_hash, report.data_hash);
        trainer.model.save(&a.dir.join("checkpoint.txt"), &stored)?;
        write_json(&a.dir.join("report.json"), &report)?;
    }
    Ok(RunSummary {
        report,
        model: trainer.model,
        records: trainer.records,
        partition: trainer.partition,
        wall_secs,
    })
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    splits: &'a Splits,
    train_x: Tensor,
    val_x: Tensor,
    test_x: Tensor,
    labels: Vec<usize>,
    model: Model,
    partition: Option<Partition>,
    entropy: Option<f64>,
    refreshes: usize,
    records: Vec<MetricsRecord>,
    epoch_secs: Vec<f64>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, splits: &'a Splits) -> Result<Self> {
        let model = Model::init(cfg.model.clone(), rng::derive_seed(cfg.seed, "model", 0))?;
        let k = splits.train.len();
        let partition = (cfg.variant != Variant::Erm).then(|| {
            Partition::random(
                k,
                cfg.btg.splits,
                rng::derive_seed(cfg.seed, "initial-partition", 0),
            )
        });
        let entropy = partition.as_ref().map(Partition::size_entropy);
        Ok(Self {
            cfg,
            splits,
            train_x: splits.train.features(),
            val_x: splits.val.features(),
            test_x: splits.test.features(),
            labels: splits.train.labels(),
            model,
            partition,
            entropy,
            refreshes: 0,
            records: Vec::new(),
            epoch_secs: Vec::new(),
        })
    }

    fn emit(&mut self, artifacts: &mut Option<Artifacts>, r: MetricsRecord) -> Result<()> {
        if let Some(a) = artifacts.as_mut() {
            a.record(&r)?;
        }
        self.records.push(r);
        Ok(())
    }

    fn run(&mut self, artifacts: &mut Option<Artifacts>) -> Result<()> {
        for epoch in 0..self.cfg.epochs {
            let t0 = Instant::now();
            if self.cfg.refresh_due(epoch) {
                self.refresh_partition(epoch, artifacts)
                    .map_err(|e| match e {
                        Error::NonFinite(msg) => Error::NonFinite(format!(
                            "{msg} in the partition refresh at epoch {epoch}"
                        )),
                        other => other,
                    })?;
            }
            let updates = match self.cfg.variant {
                Variant::Erm => self.erm_epoch(epoch)?,
                Variant::Backbone | Variant::Meta => self.stage2_epoch(epoch)?,
            };
            let n = updates.len().max(1) as f64;
            let mean = |f: fn(&UpdateRecord) -> f64| updates.iter().map(f).sum::<f64>() / n;
            let (lm, le, lt) = (mean(|u| u.meta), mean(|u| u.erm), mean(|u| u.total));
            for u in updates {
                self.emit(artifacts, MetricsRecord::Update(u))?;
            }
            let mut evals = Vec::with_capacity(2);
            for (name, x, data) in [
                ("val", &self.val_x, &self.splits.val),
                ("test", &self.test_x, &self.splits.test),
            ] {
                let pred = self.model.classify(x)?;
                let acc = top1_accuracy(&pred, &data.labels(), data.num_classes)?;
                evals.push(MetricsRecord::Eval(EvalRecord {
                    epoch,
                    split: name.into(),
                    top1: acc.top1,
                    loss_meta: lm,
                    loss_erm: le,
                    loss_total: lt,
                    balance_entropy: self.entropy,
                }));
            }
            for r in evals {
                self.emit(artifacts, r)?;
            }
            self.epoch_secs.push(t0.elapsed().as_secs_f64());
        }
        Ok(())
    }

    fn refresh_partition(&mut self, epoch: usize, artifacts: &mut Option<Artifacts>) -> Result<()> {
        let fs = self.model.encode(&self.train_x)?.confounding;
        let seed = rng::derive_seed(self.cfg.seed, "stage1", epoch as u64);
        let out = build_partition(
            &self.cfg.btg,
            &fs,
            &self.labels,
            self.splits.train.num_classes,
            seed,
        )?;
        out.head.store_into(&mut self.model.params)?;
        if let Some(a) = artifacts.as_ref() {
            export_partition(
                &a.dir.join("partition.txt"),
                &out.partition,
                &out.probabilities,
            )?;
            write_json(&a.dir.join("balance.json"), &out.report)?;
        }
        self.entropy = Some(out.report.entropy);
        self.refreshes += 1;
        let r = MetricsRecord::Partition(PartitionRecord {
            epoch,
            split_sizes: out.report.split_sizes.clone(),
            entropy: out.report.entropy,
            warnings: out.report.warnings.len(),
        });
        self.partition = Some(out.partition);
        self.emit(artifacts, r)
    }

    fn erm_epoch(&mut self, epoch: usize) -> Result<Vec<UpdateRecord>> {
        let lr = self.cfg.lr_at(epoch);
        let mut perm: Vec<usize> = (0..self.labels.len()).collect();
        perm.shuffle(&mut rng::stream(self.cfg.seed, "erm-order", epoch as u64));
        let mut out = Vec::new();
        for (update, chunk) in perm.chunks(self.cfg.mixup.batch_size).enumerate() {
            let x = self.train_x.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&k| self.labels[k]).collect();
            let mut tape = Tape::new();
            let vars = self.model.params.register(&mut tape, is_meta_param);
            let l = task_loss(&self.model.config, &x, &y)(&mut tape, &vars)?;
            let loss = tape.value(l).item();
            let grads = tape.backward(l)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "ERM loss at epoch {epoch}, update {update}"
                )));
            }
            self.model.params.sgd_step(&grads, lr)?;
            out.push(UpdateRecord {
                epoch,
                update,
                query_losses: Vec::new(),
                meta: 0.0,
                erm: loss,
                total: loss,
                meta_grad_norm: 0.0,
                erm_grad_norm: grads.norm(),
            });
        }
        Ok(out)
    }

    fn stage2_epoch(&mut self, epoch: usize) -> Result<Vec<UpdateRecord>> {
        let lr = self.cfg.lr_at(epoch);
        let meta = self.cfg.stage2_meta();
        let partition = self
            .partition
            .as_ref()
            .expect("stage 2 variants keep a partition");
        let m = partition.num_splits();
        let k = self.labels.len();
        let b = self.cfg.mixup.batch_size.min(k);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng::stream(self.cfg.seed, "mixup-order", epoch as u64));

        let mut out = Vec::new();
        for update in 0..meta.updates_per_epoch(m) {
            let key = (epoch as u64) << 20 | update as u64;
            let (tasks, _) = sample_meta_tasks(
                partition,
                &self.labels,
                &meta,
                rng::derive_seed(self.cfg.seed, "tasks", key),
            )?;
            let idx: Vec<usize> = (0..b).map(|i| perm[(update * b + i) % k]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
            let batch = mixup_batch(
                &self.train_x.select_rows(&idx),
                &y,
                self.splits.train.num_classes,
                &self.cfg.mixup,
                rng::derive_seed(self.cfg.seed, "mixup", key),
            )?;
            let (params, losses) = stage2_step(
                &self.model,
                &self.splits.train,
                &tasks,
                Some(&batch),
                &meta,
                lr,
                self.cfg.erm_weight,
            )
            .map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("{msg} at epoch {epoch}, update {update}"))
                }
                other => other,
            })?;
            self.model.params = params;
            out.push(UpdateRecord {
                epoch,
                update,
                query_losses: losses.query_losses,
                meta: losses.meta,
                erm: losses.erm,
                total: losses.total,
                meta_grad_norm: losses.meta_grad_norm,
                erm_grad_norm: losses.erm_grad_norm,
            });
        }
        Ok(out)
    }
}
