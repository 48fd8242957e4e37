//! Balanced task generation: learns a soft partition of the training set
//! from confounder features and turns it into hard, balanced splits.
//!
//! A partition matrix `theta` (`K x m` logits) is trained by alternating
//! (a) fitting the bias head `h` on `F_s` by cross-entropy and (b) gradient
//! ascent of the split objective
//!
//! ```text
//! sum_t  R_t(h) + lambda * (d/dw R_t(w * h) at w = 1)^2
//! ```
//!
//! where `R_t` is the `softmax(theta)[:, t]`-weighted mean cross-entropy.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Target, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::rng;
use crate::synthdata::Dataset;

/// Soft splits lighter than this contribute nothing to the split objective.
pub const DEGENERATE_WEIGHT: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Single matrix, plain argmax.
    None,
    /// Entropy regularizer on expected split sizes.
    Lb,
    /// Per-class post-hoc reassignment.
    Mb,
    /// Aggregate of several independently trained matrices.
    Gb,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Lb, Strategy::Mb, Strategy::Gb];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::None => "-",
            Strategy::Lb => "LB",
            Strategy::Mb => "MB",
            Strategy::Gb => "GB",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "-" => Ok(Strategy::None),
            "lb" => Ok(Strategy::Lb),
            "mb" => Ok(Strategy::Mb),
            "gb" => Ok(Strategy::Gb),
            _ => Err(Error::Config(format!("unknown balance strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BtgConfig {
    /// Number of splits `m`.
    pub splits: usize,
    /// Number of matrices aggregated under GB.
    pub matrices: usize,
    pub irm_weight: f64,
    pub balance_weight: f64,
    pub epochs: usize,
    /// Early stopping is only considered after this many epochs.
    pub min_epochs: usize,
    pub patience: usize,
    /// Step size for `theta`, applied to the gradient rescaled by `K`.
    pub theta_lr: f64,
    pub theta_init_scale: f64,
    pub bias_lr: f64,
    /// Full-batch steps fitting `h` before the first `theta` update.
    pub bias_warmup_steps: usize,
    pub bias_steps_per_epoch: usize,
    pub strategy: Strategy,
}

impl Default for BtgConfig {
    fn default() -> Self {
        Self {
            splits: 4,
            matrices: 4,
            irm_weight: 1.0,
            balance_weight: 1.0,
            epochs: 100,
            min_epochs: 40,
            patience: 5,
            theta_lr: 0.1,
            theta_init_scale: 1.0,
            bias_lr: 0.5,
            bias_warmup_steps: 100,
            bias_steps_per_epoch: 1,
            strategy: Strategy::Gb,
        }
    }
}

impl BtgConfig {
    /// Penalty weight suited to large image models, whose penalty term is
    /// tiny relative to the risk.
    pub const LARGE_SCALE_IRM_WEIGHT: f64 = 1e6;

    pub fn validate(&self) -> Result<()> {
        if self.splits < 2 {
            return Err(Error::Config(format!(
                "need at least 2 splits, got {}",
                self.splits
            )));
        }
        if self.matrices == 0 {
            return Err(Error::Config("need at least one partition matrix".into()));
        }
        if !(self.irm_weight >= 0.0) || !(self.balance_weight >= 0.0) {
            return Err(Error::Config(
                "irm_weight and balance_weight must be >= 0".into(),
            ));
        }
        if !(self.theta_lr >= 0.0) || !(self.bias_lr >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// `K x m` split-assignment logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMatrix {
    logits: Tensor,
}

impl PartitionMatrix {
    pub fn new(logits: Tensor) -> Result<Self> {
        let (_, m) = logits.rank2("partition matrix")?;
        if m < 2 {
            return Err(Error::Config(format!(
                "partition matrix needs m >= 2, got {m}"
            )));
        }
        Ok(Self { logits })
    }

    pub fn random(samples: usize, splits: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "theta-init", 0);
        let n = Normal::new(0.0, scale.max(f64::MIN_POSITIVE)).expect("positive");
        let data = (0..samples * splits).map(|_| n.sample(&mut r)).collect();
        Self::new(Tensor::new(vec![samples, splits], data)?)
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn samples(&self) -> usize {
        self.logits.rows()
    }

    pub fn splits(&self) -> usize {
        self.logits.cols()
    }

    /// Row-softmax probabilities.
    pub fn probabilities(&self) -> Tensor {
        self.logits.softmax_rows().expect("rank 2")
    }

    pub fn assignment(&self) -> Vec<usize> {
        self.logits.argmax_rows()
    }
}

/// Hard assignment of every training sample to one split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub splits: Vec<Vec<usize>>,
}

impl Partition {
    pub fn from_assignment(assignment: Vec<usize>, m: usize) -> Result<Self> {
        let mut splits = vec![Vec::new(); m];
        for (k, &s) in assignment.iter().enumerate() {
            if s >= m {
                return Err(Error::Config(format!(
                    "sample {k} assigned to split {s} >= {m}"
                )));
            }
            splits[s].push(k);
        }
        Ok(Self { assignment, splits })
    }

    /// Uniformly random assignment, the state before any partition learning.
    pub fn random(samples: usize, m: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut r = rng::stream(seed, "random-partition", 0);
        let a = (0..samples).map(|_| r.random_range(0..m)).collect();
        Self::from_assignment(a, m).expect("in range")
    }

    pub fn num_splits(&self) -> usize {
        self.splits.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.splits.iter().map(Vec::len).collect()
    }

    /// Shannon entropy (nats) of the split-size distribution.
    pub fn size_entropy(&self) -> f64 {
        entropy(&self.sizes().iter().map(|&s| s as f64).collect::<Vec<_>>())
    }

    pub fn class_split_counts(&self, labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
        let mut c = vec![vec![0; self.num_splits()]; classes];
        for (k, &s) in self.assignment.iter().enumerate() {
            c[labels[k]][s] += 1;
        }
        c
    }
}

/// Entropy of `weights / sum(weights)`.
pub fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum()
}

/// The LB regularizer `-lambda * H(s)` for a vector of (soft) split sizes.
pub fn balance_term(sizes: &[f64], weight: f64) -> f64 {
    -weight * entropy(sizes)
}

/// Linear bias head `h` over confounder features.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl BiasHead {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[dim, classes]),
            bias: Tensor::zeros(&[1, classes]),
        }
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut z = features.matmul(&self.weight)?;
        let c = z.cols();
        for r in 0..z.rows() {
            for (v, b) in z.data_mut()[r * c..(r + 1) * c]
                .iter_mut()
                .zip(self.bias.data())
            {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Copies this head into the `bias.*` slots of a model's parameters.
    pub fn store_into(&self, params: &mut ParamSet) -> Result<()> {
        *params.get_mut("bias.w")? = self.weight.clone();
        *params.get_mut("bias.b")? = self.bias.clone();
        Ok(())
    }

    /// Mean cross-entropy over all samples and its gradient.
    fn loss_and_grad(&self, fs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, Tensor)> {
        let mut t = Tape::new();
        let w = t.param("w", self.weight.clone());
        let b = t.param("b", self.bias.clone());
        let x = t.constant(fs.clone());
        let z = t.affine(x, w, b)?;
        let l = t.cross_entropy(z, Target::Labels(labels))?;
        let value = t.value(l).item();
        let mut g = t.gradients(l, &[w, b])?;
        let gb = g.pop().expect("two grads");
        let gw = g.pop().expect("two grads");
        Ok((value, gw, gb))
    }
}

/// Result of fitting the bias head.
#[derive(Clone, Debug)]
pub struct BiasFit {
    pub head: BiasHead,
    /// Loss before each step.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the mean cross-entropy of `h(F_s)`.
pub fn train_bias_classifier(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    lr: f64,
    steps: usize,
) -> Result<BiasFit> {
    let head = BiasHead::zeros(features.cols(), classes);
    continue_bias_training(head, features, labels, lr, steps)
}

fn continue_bias_training(
    mut head: BiasHead,
    features: &Tensor,
    labels: &[usize],
    lr: f64,
    steps: usize,
) -> Result<BiasFit> {
    if labels.is_empty() || features.rows() == 0 {
        return Err(Error::Empty("bias classifier training set"));
    }
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, gw, gb) = head.loss_and_grad(features, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("bias head loss at step {step}")));
        }
        losses.push(loss);
        head.weight.axpy(-lr, &gw)?;
        head.bias.axpy(-lr, &gb)?;
    }
    Ok(BiasFit { head, losses })
}

/// Per-split breakdown of the split objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitTerm {
    pub weight: f64,
    pub risk: f64,
    /// `(d/dw R_t(w h))^2` at `w = 1`, before multiplying by `lambda`.
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitObjective {
    pub value: f64,
    pub terms: Vec<SplitTerm>,
    /// Splits whose total soft weight fell under [`DEGENERATE_WEIGHT`].
    pub degenerate: Vec<usize>,
}

/// Records the split objective on `tape` with `theta` as a tape variable.
///
/// `logits` are the frozen bias-head outputs `h(F_s)`, `[K, C]`.
pub fn record_split_objective(
    tape: &mut Tape,
    theta: Var,
    logits: &Tensor,
    labels: &[usize],
    irm_weight: f64,
) -> Result<(Var, SplitObjective)> {
    let (k, m) = tape.value(theta).rank2("split objective")?;
    let (kz, c) = logits.rank2("split objective")?;
    if k != kz || labels.len() != k {
        return Err(Error::ShapeMismatch {
            op: "split objective",
            lhs: vec![k, m],
            rhs: vec![kz, c],
        });
    }
    let q = tape.softmax(theta)?;
    let w = tape.param("dummy_w", Tensor::scalar(1.0));
    let z = tape.constant(logits.clone());
    let wb = tape.broadcast_scalar(w, k, c)?;
    let wz = tape.mul(wb, z)?;
    let losses = tape.cross_entropy_rows(wz, Target::Labels(labels))?;

    let mut total: Option<Var> = None;
    let mut terms = Vec::with_capacity(m);
    let mut degenerate = Vec::new();
    for t in 0..m {
        let mut e = Tensor::zeros(&[m, 1]);
        e.data_mut()[t] = 1.0;
        let e = tape.constant(e);
        let qt = tape.matmul(q, e)?;
        let den = tape.sum(qt);
        let weight = tape.value(den).item();
        if weight < DEGENERATE_WEIGHT {
            log::warn!("split {t} is degenerate (soft weight {weight:e}); its term is zero");
            degenerate.push(t);
            terms.push(SplitTerm {
                weight,
                risk: 0.0,
                penalty: 0.0,
            });
            continue;
        }
        let weighted = tape.mul(qt, losses)?;
        let num = tape.sum(weighted);
        let inv = tape.reciprocal(den);
        let risk = tape.mul(num, inv)?;
        let dw = tape.grad_graph(risk, &[w])?[0];
        let sq = tape.mul(dw, dw)?;
        let pen = tape.scale(sq, irm_weight);
        let term = tape.add(risk, pen)?;
        terms.push(SplitTerm {
            weight,
            risk: tape.value(risk).item(),
            penalty: tape.value(sq).item(),
        });
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let value = tape.value(total).item();
    Ok((
        total,
        SplitObjective {
            value,
            terms,
            degenerate,
        },
    ))
}

/// Value of the split objective for a fixed `theta` and bias head outputs.
pub fn irm_split_loss(
    theta: &PartitionMatrix,
    logits: &Tensor,
    labels: &[usize],
    irm_weight: f64,
) -> Result<SplitObjective> {
    let mut tape = Tape::new();
    let th = tape.constant(theta.logits().clone());
    Ok(record_split_objective(&mut tape, th, logits, labels, irm_weight)?.1)
}

/// Gradient of the split objective (plus the LB term when `balance_weight`
/// is nonzero) with respect to `theta`.
///
/// Returns `(objective to maximize, gradient, details)`.
pub fn split_objective_grad(
    theta: &PartitionMatrix,
    logits: &Tensor,
    labels: &[usize],
    irm_weight: f64,
    balance_weight: f64,
) -> Result<(f64, Tensor, SplitObjective)> {
    let mut tape = Tape::new();
    let th = tape.param("theta", theta.logits().clone());
    let (obj, details) = record_split_objective(&mut tape, th, logits, labels, irm_weight)?;
    let target = if balance_weight > 0.0 {
        // maximize obj + lambda_bal * H(mean soft assignment)
        let q = tape.softmax(th)?;
        let mass = tape.sum_rows(q)?;
        let s = tape.scale(mass, 1.0 / theta.samples() as f64);
        let ls = tape.ln(s);
        let plogp = tape.mul(s, ls)?;
        let neg_h = tape.sum(plogp);
        let lb = tape.scale(neg_h, balance_weight);
        tape.sub(obj, lb)?
    } else {
        obj
    };
    let value = tape.value(target).item();
    let grad = tape.gradients(target, &[th])?.pop().expect("one grad");
    Ok((value, grad, details))
}

/// Outcome of training one partition matrix.
#[derive(Clone, Debug)]
pub struct MatrixFit {
    pub theta: PartitionMatrix,
    pub head: BiasHead,
    /// Maximized objective per epoch.
    pub objective: Vec<f64>,
    pub epochs_run: usize,
    pub final_terms: Option<SplitObjective>,
}

/// Alternating min-max training of a single partition matrix on fixed
/// confounder features.
pub fn optimize_partition_matrix(
    cfg: &BtgConfig,
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    balance: bool,
    seed: u64,
) -> Result<MatrixFit> {
    cfg.validate()?;
    let k = features.rows();
    let mut theta = PartitionMatrix::random(k, cfg.splits, cfg.theta_init_scale, seed)?;
    let mut head = train_bias_classifier(
        features,
        labels,
        classes,
        cfg.bias_lr,
        cfg.bias_warmup_steps,
    )?
    .head;
    let lb_weight = if balance { cfg.balance_weight } else { 0.0 };

    let mut objective = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut final_terms = None;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        head = continue_bias_training(
            head,
            features,
            labels,
            cfg.bias_lr,
            cfg.bias_steps_per_epoch,
        )?
        .head;
        let logits = head.logits(features)?;
        let (value, grad, terms) =
            split_objective_grad(&theta, &logits, labels, cfg.irm_weight, lb_weight)?;
        if !value.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "partition objective at iteration {epoch} (value {value})"
            )));
        }
        objective.push(value);
        final_terms = Some(terms);
        let mut logits_theta = theta.logits.clone();
        logits_theta.axpy(cfg.theta_lr * k as f64, &grad)?;
        theta = PartitionMatrix::new(logits_theta)?;
        epochs_run = epoch + 1;

        if value > best + 1e-12 {
            best = value;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if epochs_run >= cfg.min_epochs && since_best >= cfg.patience {
            break;
        }
    }
    Ok(MatrixFit {
        theta,
        head,
        objective,
        epochs_run,
        final_terms,
    })
}

/// Confounder features `F_s` of `data` under `model`.
pub fn confounder_features(model: &Model, data: &Dataset) -> Result<Tensor> {
    Ok(model.encode(&data.features())?.confounding)
}

/// Trains a single partition matrix from the model's current `F_s`.
pub fn stage1_optimize(
    cfg: &BtgConfig,
    model: &Model,
    data: &Dataset,
    seed: u64,
) -> Result<PartitionMatrix> {
    let fs = confounder_features(model, data)?;
    let fit = optimize_partition_matrix(
        cfg,
        &fs,
        &data.labels(),
        data.num_classes,
        cfg.strategy == Strategy::Lb,
        seed,
    )?;
    Ok(fit.theta)
}

/// Sums row-softmaxed matrices and assigns each row to its most probable
/// split (lowest index on ties).
pub fn aggregate_partitions(probabilities: &[Tensor]) -> Result<(Tensor, Partition)> {
    let first = probabilities
        .first()
        .ok_or(Error::Empty("partition matrices"))?;
    let mut sum = first.clone();
    for p in &probabilities[1..] {
        sum.axpy(1.0, p)?;
    }
    let m = sum.cols();
    let assignment = sum.softmax_rows()?.argmax_rows();
    Ok((sum, Partition::from_assignment(assignment, m)?))
}

/// Per class, moves the least confident surplus members of over-full splits
/// into under-full splits until every split holds `floor(n_c / m)` or one
/// more. The extra slots go to the splits that already hold the most.
///
/// Classes with fewer than `m` members are left as they are.
pub fn manual_balance(
    probabilities: &Tensor,
    assignment: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<(Partition, Vec<String>)> {
    let m = probabilities.cols();
    let mut assign = assignment.to_vec();
    let mut warnings = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == c).collect();
        let n = members.len();
        if n < m {
            if n > 0 {
                let w = format!("class {c} has {n} samples < {m} splits; left unbalanced");
                log::warn!("{w}");
                warnings.push(w);
            }
            continue;
        }
        let mut by_split = vec![Vec::new(); m];
        for &k in &members {
            by_split[assign[k]].push(k);
        }
        let (base, extra) = (n / m, n % m);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| by_split[b].len().cmp(&by_split[a].len()).then(a.cmp(&b)));
        let mut target = vec![base; m];
        for &s in order.iter().take(extra) {
            target[s] += 1;
        }

        let conf = |k: usize, s: usize| probabilities.get(k, s);
        let mut movers = Vec::new();
        for s in 0..m {
            let surplus = by_split[s].len().saturating_sub(target[s]);
            if surplus == 0 {
                continue;
            }
            let mut ranked = by_split[s].clone();
            ranked.sort_by(|&a, &b| conf(a, s).total_cmp(&conf(b, s)).then(a.cmp(&b)));
            movers.extend(ranked.into_iter().take(surplus).map(|k| (k, s)));
        }
        movers.sort_by(|a, b| {
            conf(a.0, a.1)
                .total_cmp(&conf(b.0, b.1))
                .then(a.0.cmp(&b.0))
        });

        let mut deficit: Vec<usize> = (0..m)
            .map(|s| target[s].saturating_sub(by_split[s].len()))
            .collect();
        for (k, _) in movers {
            let row = probabilities.row_slice(k);
            let dest = (0..m)
                .filter(|&s| deficit[s] > 0)
                .fold(None::<usize>, |best, s| match best {
                    Some(b) if row[b] >= row[s] => Some(b),
                    _ => Some(s),
                })
                .expect("surplus equals deficit");
            deficit[dest] -= 1;
            assign[k] = dest;
        }
    }
    Ok((Partition::from_assignment(assign, m)?, warnings))
}

/// Summary of a generated partition, written next to the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceReport {
    pub strategy: Strategy,
    pub split_sizes: Vec<usize>,
    /// `class_split_counts[class][split]`
    pub class_split_counts: Vec<Vec<usize>>,
    pub entropy: f64,
    pub matrices: usize,
    pub epochs_run: Vec<usize>,
    pub final_objective: Vec<f64>,
    /// Both the risk and the penalty terms are ascended.
    pub ascended_terms: &'static str,
    pub warnings: Vec<String>,
}

/// Centers `F_s` per column and divides by one global scale, the root mean
/// column variance. Relative magnitudes between dims are kept, so the
/// strongest signal in `F_s` still dominates the early fit of the bias head,
/// while its overall step size no longer depends on how far the gate has
/// closed. [`Standardizer::fold`] maps a head back to raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    /// Reciprocal global scale; zero for constant input.
    inv_scale: f64,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut ss = 0.0;
        for r in 0..n {
            for (v, m) in x.row_slice(r).iter().zip(&mean) {
                ss += (v - m) * (v - m);
            }
        }
        let sd = (ss / (n * d).max(1) as f64).sqrt();
        let inv_scale = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
        Self { mean, inv_scale }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.mean[c]) * self.inv_scale;
        }
        out
    }

    /// Head on raw features equivalent to `head` on scaled ones.
    pub fn fold(&self, head: &BiasHead) -> BiasHead {
        let (d, c) = (head.weight.rows(), head.weight.cols());
        let mut weight = head.weight.clone();
        let mut bias = head.bias.clone();
        for r in 0..d {
            for j in 0..c {
                let w = head.weight.get(r, j) * self.inv_scale;
                weight.data_mut()[r * c + j] = w;
                bias.data_mut()[j] -= w * self.mean[r];
            }
        }
        BiasHead { weight, bias }
    }
}

/// Partition plus everything needed to export and report it.
#[derive(Clone, Debug)]
pub struct PartitionOutcome {
    pub partition: Partition,
    /// `K x m` probabilities (summed over matrices for GB).
    pub probabilities: Tensor,
    /// Bias head of the last trained matrix.
    pub head: BiasHead,
    pub report: BalanceReport,
}

/// Runs stage 1 with the configured balancing strategy on fixed features.
pub fn build_partition(
    cfg: &BtgConfig,
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    seed: u64,
) -> Result<PartitionOutcome> {
    cfg.validate()?;
    let scaler = Standardizer::fit(features);
    let scaled = scaler.apply(features);
    let n_matrices = if cfg.strategy == Strategy::Gb {
        cfg.matrices
    } else {
        1
    };
    let fits = (0..n_matrices)
        .map(|i| {
            optimize_partition_matrix(
                cfg,
                &scaled,
                labels,
                classes,
                cfg.strategy == Strategy::Lb,
                rng::derive_seed(seed, "partition-matrix", i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut warnings: Vec<String> = fits
        .iter()
        .filter_map(|f| f.final_terms.as_ref())
        .flat_map(|t| t.degenerate.iter().map(|s| format!("degenerate split {s}")))
        .collect();
    let probs: Vec<Tensor> = fits.iter().map(|f| f.theta.probabilities()).collect();
    let (summed, mut partition) = aggregate_partitions(&probs)?;
    if cfg.strategy == Strategy::Mb {
        let (p, w) = manual_balance(&summed, &partition.assignment, labels, classes)?;
        partition = p;
        warnings.extend(w);
    }

    let report = BalanceReport {
        strategy: cfg.strategy,
        split_sizes: partition.sizes(),
        class_split_counts: partition.class_split_counts(labels, classes),
        entropy: partition.size_entropy(),
        matrices: n_matrices,
        epochs_run: fits.iter().map(|f| f.epochs_run).collect(),
        final_objective: fits
            .iter()
            .filter_map(|f| f.objective.last().copied())
            .collect(),
        ascended_terms: "risk+penalty",
        warnings,
    };
    let head = scaler.fold(&fits.last().expect("at least one matrix").head);
    Ok(PartitionOutcome {
        partition,
        probabilities: summed,
        head,
        report,
    })
}

/// Text table: one row per sample, `index split p_0 .. p_{m-1}`.
pub fn export_partition(
    path: &std::path::Path,
    partition: &Partition,
    probabilities: &Tensor,
) -> Result<()> {
    use crate::io;
    let mut w = io::create(path)?;
    let m = partition.num_splits();
    let cols: Vec<String> = (0..m).map(|s| format!("p_{s}")).collect();
    io::write_line(&mut w, path, &format!("# sample split {}", cols.join(" ")))?;
    for (k, &s) in partition.assignment.iter().enumerate() {
        let line = format!("{k} {s} {}", io::join_f64(probabilities.row_slice(k)));
        io::write_line(&mut w, path, &line)?;
    }
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}
