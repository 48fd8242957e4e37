//! Meta-causal feature learning: per-split meta-tasks with a MAML-style
//! inner/outer update, plus the mixup ERM branch.
//!
//! Parameter groups: `phi` is the encoder and gate (`enc.*`, `gate.*`), `mu`
//! the task head, `g` the auxiliary head trained on mixed inputs.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Tape, Target, Tensor, Var};
use crate::btg::Partition;
use crate::error::{Error, Result};
use crate::model::{
    forward_features, head_logits, is_encoder, is_head, Head, Model, ModelConfig, ParamSet,
    ParamVars,
};
use crate::rng;
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTaskConfig {
    /// Classes per task (`w`).
    pub ways: usize,
    /// Support samples per class (`i`).
    pub support_shots: usize,
    /// Query samples per class (`j`).
    pub query_shots: usize,
    /// Tasks per epoch (`s`); one update consumes one task per split.
    pub tasks_per_epoch: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    /// Differentiate through the inner step instead of using the
    /// first-order approximation.
    pub second_order: bool,
}

impl Default for MetaTaskConfig {
    fn default() -> Self {
        Self {
            ways: 10,
            support_shots: 2,
            query_shots: 13,
            tasks_per_epoch: 48,
            inner_lr: 0.02,
            outer_lr: 0.1,
            inner_steps: 1,
            second_order: false,
        }
    }
}

impl MetaTaskConfig {
    pub fn validate(&self, splits: usize) -> Result<()> {
        if self.ways == 0 || self.support_shots == 0 || self.query_shots == 0 {
            return Err(Error::Config(
                "ways, support_shots and query_shots must be >= 1".into(),
            ));
        }
        if splits == 0 || self.tasks_per_epoch % splits != 0 || self.tasks_per_epoch == 0 {
            return Err(Error::Config(format!(
                "tasks_per_epoch ({}) must be a positive multiple of the split count ({splits})",
                self.tasks_per_epoch
            )));
        }
        if !(self.inner_lr >= 0.0) || !(self.outer_lr >= 0.0) {
            return Err(Error::Config("meta step sizes must be >= 0".into()));
        }
        Ok(())
    }

    /// Updates per epoch, `s / m`.
    pub fn updates_per_epoch(&self, splits: usize) -> usize {
        self.tasks_per_epoch / splits.max(1)
    }
}

/// Support and query sample indices into the training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MetaTask {
    pub split: usize,
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// One task per split, always with `ways` distinct classes. When a split
/// cannot serve that many classes with `support + query` samples, short
/// classes are drawn with replacement and missing ones are borrowed from
/// the whole training set.
pub fn sample_meta_tasks(
    partition: &Partition,
    labels: &[usize],
    cfg: &MetaTaskConfig,
    seed: u64,
) -> Result<(Vec<MetaTask>, Vec<String>)> {
    let mut r = rng::stream(seed, "meta-tasks", 0);
    let classes = labels.iter().max().map_or(0, |&c| c + 1);
    let need = cfg.support_shots + cfg.query_shots;
    let mut tasks = Vec::with_capacity(partition.num_splits());
    let mut warnings = Vec::new();

    let group = |members: &[usize]| {
        let mut by_class = vec![Vec::new(); classes];
        for &k in members {
            by_class[labels[k]].push(k);
        }
        by_class
    };
    let everyone: Vec<usize> = (0..labels.len()).collect();

    for (split, members) in partition.splits.iter().enumerate() {
        let by_class = group(members);
        let eligible: Vec<usize> = (0..classes)
            .filter(|&c| by_class[c].len() >= need)
            .collect();
        if eligible.len() >= cfg.ways {
            let mut pick = eligible;
            let (chosen, _) = pick.partial_shuffle(&mut r, cfg.ways);
            let chosen = chosen.to_vec();
            let (mut support, mut query) = (Vec::new(), Vec::new());
            for &c in &chosen {
                let mut pool = by_class[c].clone();
                let (drawn, _) = pool.partial_shuffle(&mut r, need);
                support.extend_from_slice(&drawn[..cfg.support_shots]);
                query.extend_from_slice(&drawn[cfg.support_shots..]);
            }
            tasks.push(MetaTask {
                split,
                classes: chosen,
                support,
                query,
            });
            continue;
        }

        // Keep `ways` distinct classes: classes the split can serve come
        // first, the rest borrow members from the whole training set.
        let global = group(&everyone);
        let mut tiers: [Vec<usize>; 3] = Default::default();
        for c in 0..classes {
            let tier = match by_class[c].len() {
                n if n >= need => 0,
                n if n >= 2 => 1,
                _ => 2,
            };
            if tier < 2 || global[c].len() >= 2 {
                tiers[tier].push(c);
            }
        }
        let mut chosen = Vec::with_capacity(cfg.ways);
        let mut borrowed = 0;
        for (tier, mut pool) in tiers.into_iter().enumerate() {
            let take = (cfg.ways - chosen.len()).min(pool.len());
            let (picked, _) = pool.partial_shuffle(&mut r, take);
            if tier == 2 {
                borrowed = take;
            }
            chosen.extend_from_slice(picked);
        }
        if chosen.len() < cfg.ways {
            return Err(Error::Empty("training classes with at least 2 samples"));
        }
        let msg = format!(
            "split {split} has fewer than {} classes with {need} samples; {borrowed} classes borrowed from the whole training set, short classes drawn with replacement",
            cfg.ways
        );
        log::warn!("{msg}");
        warnings.push(msg);
        let (mut support, mut query) = (Vec::new(), Vec::new());
        for &c in &chosen {
            let source = if by_class[c].len() >= 2 {
                &by_class[c]
            } else {
                &global[c]
            };
            let mut pool = source.clone();
            if pool.len() >= need {
                let (drawn, _) = pool.partial_shuffle(&mut r, need);
                support.extend_from_slice(&drawn[..cfg.support_shots]);
                query.extend_from_slice(&drawn[cfg.support_shots..]);
            } else {
                // disjoint halves, drawn with replacement
                pool.shuffle(&mut r);
                let qry = pool.split_off(pool.len() / 2);
                support.extend((0..cfg.support_shots).map(|_| pool[r.random_range(0..pool.len())]));
                query.extend((0..cfg.query_shots).map(|_| qry[r.random_range(0..qry.len())]));
            }
        }
        tasks.push(MetaTask {
            split,
            classes: chosen,
            support,
            query,
        });
    }
    Ok((tasks, warnings))
}

/// Loss recorded on a tape for a given set of parameter handles.
pub type LossFn<'a> = dyn Fn(&mut Tape, &ParamVars) -> Result<Var> + 'a;

pub fn is_meta_param(name: &str) -> bool {
    is_encoder(name) || is_head(name, Head::Task)
}

pub fn is_erm_param(name: &str) -> bool {
    is_encoder(name) || is_head(name, Head::Aux)
}

/// Mean cross-entropy of the task head on `(x, y)`.
pub fn task_loss<'a>(
    cfg: &'a ModelConfig,
    x: &'a Tensor,
    y: &'a [usize],
) -> impl Fn(&mut Tape, &ParamVars) -> Result<Var> + 'a {
    move |tape, vars| {
        let xv = tape.constant(x.clone());
        let f = forward_features(tape, cfg, vars, xv)?;
        let z = head_logits(tape, vars, Head::Task, &f)?;
        tape.cross_entropy(z, Target::Labels(y))
    }
}

/// `steps` plain gradient steps of size `alpha` on the parameters selected
/// by `trainable`. Returns an adapted copy.
pub fn inner_update(
    params: &ParamSet,
    trainable: impl Fn(&str) -> bool,
    alpha: f64,
    steps: usize,
    loss: &LossFn<'_>,
) -> Result<ParamSet> {
    let mut cur = params.clone();
    for step in 0..steps {
        let mut tape = Tape::new();
        let vars = cur.register(&mut tape, &trainable);
        let l = loss(&mut tape, &vars)?;
        let grads = tape.backward(l)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("inner gradient at step {step}")));
        }
        cur.sgd_step(&grads, alpha)?;
    }
    Ok(cur)
}

/// Records the inner steps on `tape` so the result stays differentiable
/// with respect to the original handles in `vars`.
pub fn record_inner_steps(
    tape: &mut Tape,
    vars: &ParamVars,
    names: &[String],
    alpha: f64,
    steps: usize,
    loss: &LossFn<'_>,
) -> Result<ParamVars> {
    let mut cur = vars.clone();
    for _ in 0..steps {
        let l = loss(tape, &cur)?;
        let wrt = names
            .iter()
            .map(|n| cur.get(n))
            .collect::<Result<Vec<_>>>()?;
        let grads = tape.grad_graph(l, &wrt)?;
        for ((name, p), g) in names.iter().zip(wrt).zip(grads) {
            let step = tape.scale(g, alpha);
            let next = tape.sub(p, step)?;
            cur.insert(name.clone(), next);
        }
    }
    Ok(cur)
}

/// Averaged meta-gradient over a round of tasks.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grads: GradientMap,
    pub query_losses: Vec<f64>,
    pub loss: f64,
}

/// Query loss after adaptation on the support set, and its gradient with
/// respect to the base `phi` and `mu`.
pub fn task_gradient(
    model: &Model,
    data: &Dataset,
    task: &MetaTask,
    cfg: &MetaTaskConfig,
) -> Result<(f64, GradientMap)> {
    let xs = data.features_of(&task.support);
    let ys = data.labels_of(&task.support);
    let xq = data.features_of(&task.query);
    let yq = data.labels_of(&task.query);
    let support = task_loss(&model.config, &xs, &ys);
    let query = task_loss(&model.config, &xq, &yq);

    let (value, grads) = if cfg.second_order {
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, is_meta_param);
        let names: Vec<String> = tape.params().iter().map(|(n, _)| n.clone()).collect();
        let adapted = record_inner_steps(
            &mut tape,
            &vars,
            &names,
            cfg.inner_lr,
            cfg.inner_steps,
            &support,
        )?;
        let q = query(&mut tape, &adapted)?;
        (tape.value(q).item(), tape.backward(q)?)
    } else {
        let adapted = inner_update(
            &model.params,
            is_meta_param,
            cfg.inner_lr,
            cfg.inner_steps,
            &support,
        )
        .map_err(|e| tag_task(e, task))?;
        let mut tape = Tape::new();
        let vars = adapted.register(&mut tape, is_meta_param);
        let q = query(&mut tape, &vars)?;
        (tape.value(q).item(), tape.backward(q)?)
    };
    if !value.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "query loss on task from split {}",
            task.split
        )));
    }
    Ok((value, grads))
}

fn tag_task(e: Error, task: &MetaTask) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (task from split {})", task.split)),
        other => other,
    }
}

/// Mean of the per-task query losses and meta-gradients.
pub fn meta_gradient(
    model: &Model,
    data: &Dataset,
    tasks: &[MetaTask],
    cfg: &MetaTaskConfig,
) -> Result<MetaGradient> {
    if tasks.is_empty() {
        return Err(Error::Empty("meta tasks"));
    }
    let scale = 1.0 / tasks.len() as f64;
    let mut grads = GradientMap::new();
    let mut query_losses = Vec::with_capacity(tasks.len());
    for task in tasks {
        let (l, g) = task_gradient(model, data, task, cfg)?;
        grads.add_scaled(scale, &g)?;
        query_losses.push(l);
    }
    let loss = query_losses.iter().sum::<f64>() * scale;
    Ok(MetaGradient {
        grads,
        query_losses,
        loss,
    })
}

/// Mean query loss over tasks, each under its own adapted snapshot.
pub fn meta_query_loss(
    cfg: &ModelConfig,
    data: &Dataset,
    tasks: &[MetaTask],
    snapshots: &[ParamSet],
    expected_tasks: usize,
) -> Result<f64> {
    if tasks.len() != expected_tasks || snapshots.len() != tasks.len() {
        return Err(Error::Config(format!(
            "expected {expected_tasks} tasks with one snapshot each, got {} tasks and {} snapshots",
            tasks.len(),
            snapshots.len()
        )));
    }
    let mut total = 0.0;
    for (task, params) in tasks.iter().zip(snapshots) {
        let x = data.features_of(&task.query);
        let y = data.labels_of(&task.query);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, |_| false);
        let l = task_loss(cfg, &x, &y)(&mut tape, &vars)?;
        total += tape.value(l).item();
    }
    Ok(total / tasks.len() as f64)
}

/// `params - beta * grads`, returned as a new set.
pub fn outer_update(params: &ParamSet, grads: &GradientMap, beta: f64) -> Result<ParamSet> {
    params.stepped(grads, beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupConfig {
    /// Both shape parameters of the Beta distribution.
    pub alpha: f64,
    pub batch_size: usize,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            batch_size: 64,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "mixup alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("mixup batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub features: Tensor,
    /// Soft labels `[n, C]`.
    pub targets: Tensor,
    pub lambdas: Vec<f64>,
    pub partners: Vec<usize>,
}

/// `x_k <- l_k x_k + (1 - l_k) x_{partner(k)}`, same for one-hot targets.
pub fn mix_pairs(
    x: &Tensor,
    targets: &Tensor,
    partners: &[usize],
    lambdas: &[f64],
) -> Result<MixedBatch> {
    let n = x.rows();
    if targets.rows() != n || partners.len() != n || lambdas.len() != n {
        return Err(Error::ShapeMismatch {
            op: "mixup",
            lhs: x.shape().to_vec(),
            rhs: vec![targets.rows(), partners.len(), lambdas.len()],
        });
    }
    let mix = |t: &Tensor| {
        let c = t.cols();
        let mut out = Vec::with_capacity(n * c);
        for k in 0..n {
            let (a, b, l) = (t.row_slice(k), t.row_slice(partners[k]), lambdas[k]);
            out.extend(a.iter().zip(b).map(|(u, v)| l * u + (1.0 - l) * v));
        }
        Tensor::new(vec![n, c], out)
    };
    Ok(MixedBatch {
        features: mix(x)?,
        targets: mix(targets)?,
        lambdas: lambdas.to_vec(),
        partners: partners.to_vec(),
    })
}

/// Pairs each row with a row of a seeded shuffle of the batch and mixes
/// them with `lambda ~ Beta(alpha, alpha)` drawn per pair.
pub fn mixup_batch(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &MixupConfig,
    seed: u64,
) -> Result<MixedBatch> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "mixup", 0);
    let mut partners: Vec<usize> = (0..labels.len()).collect();
    partners.shuffle(&mut r);
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::Config(e.to_string()))?;
    let lambdas: Vec<f64> = partners.iter().map(|_| beta.sample(&mut r)).collect();
    mix_pairs(x, &Tensor::one_hot(labels, classes)?, &partners, &lambdas)
}

/// ERM loss of the auxiliary head on a mixed batch and its gradient for
/// the encoder and that head.
pub fn erm_gradient(model: &Model, batch: &MixedBatch) -> Result<(f64, GradientMap)> {
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape, is_erm_param);
    let x = tape.constant(batch.features.clone());
    let f = forward_features(&mut tape, &model.config, &vars, x)?;
    let z = head_logits(&mut tape, &vars, Head::Aux, &f)?;
    let l = tape.cross_entropy(z, Target::Soft(&batch.targets))?;
    let value = tape.value(l).item();
    let grads = tape.backward(l)?;
    if !value.is_finite() || !grads.all_finite() {
        return Err(Error::NonFinite("mixup ERM loss".into()));
    }
    Ok((value, grads))
}

/// Loss components of one stage-2 update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage2Losses {
    pub query_losses: Vec<f64>,
    pub meta: f64,
    pub erm: f64,
    pub total: f64,
    pub meta_grad_norm: f64,
    pub erm_grad_norm: f64,
}

/// One combined update: the meta-gradient over `tasks` plus `erm_weight`
/// times the mixup ERM gradient, both applied with step `beta`.
///
/// Empty `tasks` disables the meta branch; `batch == None` or a zero weight
/// disables the ERM branch.
pub fn stage2_step(
    model: &Model,
    data: &Dataset,
    tasks: &[MetaTask],
    batch: Option<&MixedBatch>,
    cfg: &MetaTaskConfig,
    beta: f64,
    erm_weight: f64,
) -> Result<(ParamSet, Stage2Losses)> {
    let mut grads = GradientMap::new();
    let (mut meta, mut query_losses, mut meta_grad_norm) = (0.0, Vec::new(), 0.0);
    if !tasks.is_empty() {
        let mg = meta_gradient(model, data, tasks, cfg)?;
        meta = mg.loss;
        meta_grad_norm = mg.grads.norm();
        query_losses = mg.query_losses;
        grads.add_scaled(1.0, &mg.grads)?;
    }
    let (mut erm, mut erm_grad_norm) = (0.0, 0.0);
    if let Some(b) = batch.filter(|_| erm_weight != 0.0) {
        let (l, g) = erm_gradient(model, b)?;
        erm = erm_weight * l;
        erm_grad_norm = g.norm();
        grads.add_scaled(erm_weight, &g)?;
    }
    let params = outer_update(&model.params, &grads, beta)?;
    Ok((
        params,
        Stage2Losses {
            query_losses,
            meta,
            erm,
            total: meta + erm,
            meta_grad_norm,
            erm_grad_norm,
        },
    ))
}

#[cfg(test)]
mod tests;
