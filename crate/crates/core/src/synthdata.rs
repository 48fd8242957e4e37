//! Synthetic class x context datasets with a controllable spurious
//! correlation.
//!
//! Every sample is `class prototype + context prototype + noise`:
//!
//! ```text
//! dims [0, d_c)            class prototype
//! dims [d_c, d_c + d_s)    context prototype
//! remaining dims           noise only
//! ```
//!
//! At train/val time a sample takes its class-linked context
//! (`class mod train_contexts`) with probability `correlation`, otherwise a
//! context drawn uniformly from the training contexts. In zero-shot mode the
//! test set uses only the held-out contexts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_classes: usize,
    pub train_contexts: usize,
    pub test_contexts: usize,
    pub feature_dim: usize,
    pub class_dims: usize,
    pub context_dims: usize,
    /// Probability of the class-linked context, in `[1/train_contexts, 1]`.
    pub correlation: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Standard deviation of class prototype entries.
    pub class_scale: f64,
    /// Standard deviation of context prototype entries.
    pub context_scale: f64,
    pub zero_shot: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_contexts: 4,
            test_contexts: 2,
            feature_dim: 32,
            class_dims: 8,
            context_dims: 8,
            correlation: 0.9,
            n_train: 2870,
            n_val: 1754,
            n_test: 1755,
            noise: 0.25,
            class_scale: 0.4,
            context_scale: 1.0,
            zero_shot: true,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.train_contexts == 0 || self.feature_dim == 0 {
            return bad("train_contexts and feature_dim must be positive".into());
        }
        if self.zero_shot && self.test_contexts == 0 {
            return bad("zero-shot mode needs at least one held-out context".into());
        }
        if self.class_dims == 0 || self.context_dims == 0 {
            return bad("class_dims and context_dims must be positive".into());
        }
        if self.class_dims + self.context_dims > self.feature_dim {
            return bad(format!(
                "class_dims + context_dims = {} exceeds feature_dim {}",
                self.class_dims + self.context_dims,
                self.feature_dim
            ));
        }
        let lo = 1.0 / self.train_contexts as f64;
        if !(lo..=1.0).contains(&self.correlation) {
            return bad(format!(
                "correlation {} outside [{lo}, 1]",
                self.correlation
            ));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if !(self.class_scale > 0.0 && self.context_scale > 0.0) {
            return bad("prototype scales must be positive".into());
        }
        Ok(())
    }

    pub fn num_contexts(&self) -> usize {
        self.train_contexts + self.test_contexts
    }

    pub fn linked_context(&self, class: usize) -> usize {
        class % self.train_contexts
    }

    /// Feature dims carrying class signal.
    pub fn class_range(&self) -> std::ops::Range<usize> {
        0..self.class_dims
    }

    /// Feature dims carrying context signal.
    pub fn context_range(&self) -> std::ops::Range<usize> {
        self.class_dims..self.class_dims + self.context_dims
    }

    pub fn hash(&self) -> String {
        io::config_hash(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class_label: usize,
    pub context_label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Role::Train),
            "val" => Some(Role::Val),
            "test" => Some(Role::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub role: Role,
    pub num_classes: usize,
    pub num_contexts: usize,
    pub dim: usize,
    pub config_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All features as an `[n, dim]` matrix.
    pub fn features(&self) -> Tensor {
        self.features_of(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn features_of(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].features);
        }
        Tensor::new(vec![idx.len(), self.dim], data).expect("consistent dims")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_label).collect()
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].class_label).collect()
    }

    pub fn contexts(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.context_label).collect()
    }

    /// Writes the text format described in `docs/FORMATS.md`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = io::create(path)?;
        let header = [
            "bmcl-dataset 1".to_string(),
            format!("role {}", self.role.as_str()),
            format!("classes {}", self.num_classes),
            format!("contexts {}", self.num_contexts),
            format!("dim {}", self.dim),
            format!("count {}", self.len()),
            format!("config_hash {}", self.config_hash),
        ];
        for line in &header {
            io::write_line(&mut w, path, line)?;
        }
        for s in &self.samples {
            let line = format!(
                "{} {} {}",
                s.context_label,
                s.class_label,
                io::join_f64(&s.features)
            );
            io::write_line(&mut w, path, &line)?;
        }
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = io::open_lines(path)?;
        let magic = r.expect_line()?;
        if magic != "bmcl-dataset 1" {
            return Err(r.err(&format!("not a dataset file (header `{magic}`)")));
        }
        let role_s = r.field("role")?;
        let role = Role::parse(&role_s).ok_or_else(|| r.err(&format!("bad role `{role_s}`")))?;
        let num_classes: usize = r.parsed("classes")?;
        let num_contexts: usize = r.parsed("contexts")?;
        let dim: usize = r.parsed("dim")?;
        let count: usize = r.parsed("count")?;
        let config_hash = r.field("config_hash")?;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let line = r.expect_line()?;
            let mut it = line.split(' ');
            let ctx = it.next().and_then(|v| v.parse().ok());
            let cls = it.next().and_then(|v| v.parse().ok());
            let feats = io::parse_f64s(it);
            match (ctx, cls, feats) {
                (Some(context_label), Some(class_label), Some(features))
                    if features.len() == dim
                        && class_label < num_classes
                        && context_label < num_contexts =>
                {
                    samples.push(Sample {
                        features,
                        class_label,
                        context_label,
                    })
                }
                _ => return Err(r.err("malformed sample row")),
            }
        }
        if r.next_line()?.is_some_and(|l| !l.is_empty()) {
            return Err(r.err("trailing data after declared count"));
        }
        Ok(Self {
            samples,
            role,
            num_classes,
            num_contexts,
            dim,
            config_hash,
        })
    }
}

/// Train, validation and test splits from one generator run.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

struct Prototypes {
    class: Vec<Vec<f64>>,
    context: Vec<Vec<f64>>,
}

fn prototypes(cfg: &GenConfig) -> Prototypes {
    let mut r = rng::stream(cfg.seed, "prototypes", 0);
    let cn = Normal::new(0.0, cfg.class_scale).expect("positive scale");
    let sn = Normal::new(0.0, cfg.context_scale).expect("positive scale");
    let class = (0..cfg.num_classes)
        .map(|_| (0..cfg.class_dims).map(|_| cn.sample(&mut r)).collect())
        .collect();
    let context = (0..cfg.num_contexts())
        .map(|_| (0..cfg.context_dims).map(|_| sn.sample(&mut r)).collect())
        .collect();
    Prototypes { class, context }
}

fn draw_role(cfg: &GenConfig, protos: &Prototypes, role: Role, n: usize) -> Dataset {
    let mut r = rng::stream(cfg.seed, role.as_str(), 0);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite");
    // balanced classes, shuffled order
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
    labels.shuffle(&mut r);

    let samples = labels
        .into_iter()
        .map(|class| {
            let context = match role {
                Role::Test if cfg.zero_shot => {
                    cfg.train_contexts + r.random_range(0..cfg.test_contexts)
                }
                Role::Test => r.random_range(0..cfg.num_contexts()),
                _ => {
                    if r.random::<f64>() < cfg.correlation {
                        cfg.linked_context(class)
                    } else {
                        r.random_range(0..cfg.train_contexts)
                    }
                }
            };
            let mut features = vec![0.0; cfg.feature_dim];
            for (f, p) in features.iter_mut().zip(&protos.class[class]) {
                *f += p;
            }
            for (f, p) in features[cfg.class_dims..]
                .iter_mut()
                .zip(&protos.context[context])
            {
                *f += p;
            }
            if cfg.noise > 0.0 {
                for f in &mut features {
                    *f += noise.sample(&mut r);
                }
            }
            Sample {
                features,
                class_label: class,
                context_label: context,
            }
        })
        .collect();
    Dataset {
        samples,
        role,
        num_classes: cfg.num_classes,
        num_contexts: cfg.num_contexts(),
        dim: cfg.feature_dim,
        config_hash: cfg.hash(),
    }
}

/// Generates train, validation and test sets. Pure in `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Splits> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    Ok(Splits {
        train: draw_role(cfg, &protos, Role::Train, cfg.n_train),
        val: draw_role(cfg, &protos, Role::Val, cfg.n_val),
        test: draw_role(cfg, &protos, Role::Test, cfg.n_test),
    })
}

/// Counts per `(class, context)` cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ContextHistogram {
    /// `counts[class][context]`
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
}

impl ContextHistogram {
    /// Empirical mutual information between class and context, in nats.
    pub fn mutual_information(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n = self.total as f64;
        let ctx_n = self.counts.first().map_or(0, Vec::len);
        let row: Vec<f64> = self
            .counts
            .iter()
            .map(|r| r.iter().sum::<usize>() as f64)
            .collect();
        let col: Vec<f64> = (0..ctx_n)
            .map(|e| self.counts.iter().map(|r| r[e]).sum::<usize>() as f64)
            .collect();
        let mut mi = 0.0;
        for (c, r) in self.counts.iter().enumerate() {
            for (e, &k) in r.iter().enumerate() {
                if k > 0 {
                    let p = k as f64 / n;
                    mi += p * (p * n * n / (row[c] * col[e])).ln();
                }
            }
        }
        mi
    }
}

pub fn context_histogram(ds: &Dataset) -> ContextHistogram {
    let mut counts = vec![vec![0; ds.num_contexts]; ds.num_classes];
    for s in &ds.samples {
        counts[s.class_label][s.context_label] += 1;
    }
    ContextHistogram {
        counts,
        total: ds.len(),
    }
}
