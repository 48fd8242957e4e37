//! Encoder, attention gate and the three classification heads.
//!
//! The encoder is residual, `F_x = x + MLP(x)`, so feature dims stay aligned
//! with input dims and gate values can be read per input dimension. The gate
//! `a = sigmoid(F_x W_g + b_g)` splits the representation into complementary
//! parts `F_c = a * F_x` and `F_s = (1 - a) * F_x`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::io;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Without a gate, `a == 1`: the task head sees all of `F_x`.
    pub gated: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dim: 64,
            feature_dim: 32,
            num_classes: 10,
            gated: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim != self.input_dim {
            return Err(Error::Config(format!(
                "residual encoder needs feature_dim == input_dim ({} != {})",
                self.feature_dim, self.input_dim
            )));
        }
        if self.hidden_dim == 0 || self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "model sizes must be positive, classes >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Which classifier to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// `f_mu` over `F_c`; used for inference.
    Task,
    /// `h` over `F_s`; drives partition learning.
    Bias,
    /// `g` over `F_c`; mixup ERM branch only.
    Aux,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Task => "task",
            Head::Bias => "bias",
            Head::Aux => "aux",
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(Head::Task),
            "bias" => Ok(Head::Bias),
            "aux" => Ok(Head::Aux),
            other => Err(Error::UnknownHead(other.to_string())),
        }
    }
}

/// Named parameter tensors. Cloning gives an independent snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `p -= lr * grad` for every gradient whose name is present.
    pub fn sgd_step(&mut self, grads: &GradientMap, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            self.get_mut(name)?.axpy(-lr, g)?;
        }
        Ok(())
    }

    /// Returns an updated copy, leaving `self` untouched.
    pub fn stepped(&self, grads: &GradientMap, lr: f64) -> Result<ParamSet> {
        let mut p = self.clone();
        p.sgd_step(grads, lr)?;
        Ok(p)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Puts every tensor on `tape`; names accepted by `trainable` become
    /// parameters (receiving gradients), the rest constants.
    pub fn register(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(name.clone(), t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }
}

/// Tape handles for a [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Parameter groups.
pub fn is_encoder(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("gate.")
}

pub fn is_head(name: &str, head: Head) -> bool {
    name.strip_prefix(head.prefix())
        .is_some_and(|rest| rest.starts_with('.'))
}

/// Numeric `(F_x, a, F_c, F_s)` for a batch, each `[n, d_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledFeatures {
    pub mixed: Tensor,
    pub gate: Tensor,
    pub causal: Tensor,
    pub confounding: Tensor,
}

/// Tape handles for the decoupled features.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub mixed: Var,
    pub gate: Var,
    pub causal: Var,
    pub confounding: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// He-normal hidden layers; residual output layer, gate and heads start
    /// at zero, so at initialization `F_x = x` and `a = 0.5`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "model-init", 0);
        let mut he = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("positive");
            let data = (0..rows * cols).map(|_| n.sample(&mut r)).collect();
            Tensor::new(vec![rows, cols], data).expect("shape")
        };
        let (d, h, f, c) = (
            config.input_dim,
            config.hidden_dim,
            config.feature_dim,
            config.num_classes,
        );
        let mut p = ParamSet::new();
        p.insert("enc.w1", he(d, h));
        p.insert("enc.b1", Tensor::zeros(&[1, h]));
        p.insert("enc.w2", he(h, h));
        p.insert("enc.b2", Tensor::zeros(&[1, h]));
        p.insert("enc.w3", Tensor::zeros(&[h, f]));
        p.insert("enc.b3", Tensor::zeros(&[1, f]));
        if config.gated {
            p.insert("gate.w", Tensor::zeros(&[f, f]));
            p.insert("gate.b", Tensor::zeros(&[1, f]));
        }
        for head in [Head::Task, Head::Bias, Head::Aux] {
            p.insert(format!("{}.w", head.prefix()), Tensor::zeros(&[f, c]));
            p.insert(format!("{}.b", head.prefix()), Tensor::zeros(&[1, c]));
        }
        Ok(Self { config, params: p })
    }

    pub fn with_params(&self, params: ParamSet) -> Self {
        Self {
            config: self.config.clone(),
            params,
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<DecoupledFeatures> {
        let mut t = Tape::new();
        let vars = self.params.register(&mut t, |_| false);
        let xv = t.constant(x.clone());
        let f = forward_features(&mut t, &self.config, &vars, xv)?;
        Ok(DecoupledFeatures {
            mixed: t.value(f.mixed).clone(),
            gate: t.value(f.gate).clone(),
            causal: t.value(f.causal).clone(),
            confounding: t.value(f.confounding).clone(),
        })
    }

    /// Logits `[n, C]` from the chosen head.
    pub fn predict(&self, x: &Tensor, head: Head) -> Result<Tensor> {
        let mut t = Tape::new();
        let vars = self.params.register(&mut t, |_| false);
        let xv = t.constant(x.clone());
        let f = forward_features(&mut t, &self.config, &vars, xv)?;
        let z = head_logits(&mut t, &vars, head, &f)?;
        Ok(t.value(z).clone())
    }

    /// Predicted classes from the task head.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(x, Head::Task)?.argmax_rows())
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut w = io::create(path)?;
        let model_json = serde_json::to_string(&self.config).expect("serializable");
        io::write_line(&mut w, path, "bmcl-checkpoint 1")?;
        io::write_line(&mut w, path, &format!("config_hash {config_hash}"))?;
        io::write_line(&mut w, path, &format!("model {model_json}"))?;
        io::write_line(&mut w, path, &format!("tensors {}", self.params.len()))?;
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            io::write_line(
                &mut w,
                path,
                &format!("{name} {} {}", t.shape().len(), dims.join(" ")),
            )?;
            io::write_line(&mut w, path, &io::join_f64(t.data()))?;
        }
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    /// Returns the model and the embedded config hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut r = io::open_lines(path)?;
        let magic = r.expect_line()?;
        if magic != "bmcl-checkpoint 1" {
            return Err(r.err(&format!("not a checkpoint (header `{magic}`)")));
        }
        let hash = r.field("config_hash")?;
        let model_json = r.field("model")?;
        let config: ModelConfig =
            serde_json::from_str(&model_json).map_err(|e| r.err(&format!("model config: {e}")))?;
        let count: usize = r.parsed("tensors")?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let head = r.expect_line()?;
            let mut it = head.split(' ');
            let name = it.next().unwrap_or_default().to_string();
            let ndim: usize = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| r.err("bad tensor header"))?;
            let shape: Vec<usize> = it.filter_map(|v| v.parse().ok()).collect();
            if shape.len() != ndim || name.is_empty() {
                return Err(r.err("bad tensor header"));
            }
            let line = r.expect_line()?;
            let data = if line.is_empty() {
                Vec::new()
            } else {
                io::parse_f64s(line.split(' ')).ok_or_else(|| r.err("bad tensor values"))?
            };
            let t = Tensor::new(shape, data).map_err(|e| r.err(&e.to_string()))?;
            params.insert(name, t);
        }
        config.validate()?;
        let model = Model { config, params };
        model.check_shapes()?;
        Ok((model, hash))
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = Model::init(self.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let have = self.params.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    lhs: have.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Records encoder and gate on `tape`. `x` is `[n, input_dim]`.
pub fn forward_features(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ParamVars,
    x: Var,
) -> Result<FeatureVars> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: shape,
            rhs: vec![0, cfg.input_dim],
        });
    }
    let h = tape.affine(x, p.get("enc.w1")?, p.get("enc.b1")?)?;
    let h = tape.relu(h);
    let h = tape.affine(h, p.get("enc.w2")?, p.get("enc.b2")?)?;
    let h = tape.relu(h);
    let r = tape.affine(h, p.get("enc.w3")?, p.get("enc.b3")?)?;
    let mixed = tape.add(x, r)?;

    let gate = if cfg.gated {
        let pre = tape.affine(mixed, p.get("gate.w")?, p.get("gate.b")?)?;
        tape.sigmoid(pre)
    } else {
        let shape = tape.value(mixed).shape().to_vec();
        tape.constant(Tensor::ones(&shape))
    };
    let causal = tape.mul(gate, mixed)?;
    let neg = tape.scale(gate, -1.0);
    let comp = tape.add_scalar(neg, 1.0);
    let confounding = tape.mul(comp, mixed)?;
    Ok(FeatureVars {
        mixed,
        gate,
        causal,
        confounding,
    })
}

pub fn head_logits(tape: &mut Tape, p: &ParamVars, head: Head, f: &FeatureVars) -> Result<Var> {
    let input = match head {
        Head::Task | Head::Aux => f.causal,
        Head::Bias => f.confounding,
    };
    let pre = head.prefix();
    tape.affine(
        input,
        p.get(&format!("{pre}.w"))?,
        p.get(&format!("{pre}.b"))?,
    )
}

/// Mean gate value per feature dimension over the rows of `gate`.
pub fn mean_gate(gate: &Tensor) -> Vec<f64> {
    let (n, d) = (gate.rows(), gate.cols());
    let mut m = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in m.iter_mut().zip(gate.row_slice(i)) {
            *acc += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Target;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn perturbed(cfg: ModelConfig, seed: u64) -> Model {
        let mut m = Model::init(cfg, seed).unwrap();
        let mut r = rng::stream(seed, "perturb", 0);
        for (_, t) in m.params.iter_mut() {
            for v in t.data_mut() {
                *v += 0.3 * r.sample::<f64, _>(StandardNormal);
            }
        }
        m
    }

    fn batch(seed: u64, n: usize, d: usize) -> Tensor {
        let mut r = rng::stream(seed, "x", 0);
        let data = (0..n * d)
            .map(|_| r.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dim: 8,
            feature_dim: 6,
            num_classes: 3,
            gated: true,
        }
    }

    #[test]
    fn decoupling_identity_holds() {
        for seed in 0..20 {
            let m = perturbed(ModelConfig::default(), seed);
            let x = batch(seed, 16, 32);
            let f = m.encode(&x).unwrap();
            for i in 0..f.mixed.numel() {
                let d = f.causal.data()[i] + f.confounding.data()[i] - f.mixed.data()[i];
                assert!(d.abs() < 1e-12);
                let a = f.gate.data()[i];
                assert!((0.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn saturated_and_half_gate() {
        let mut m = Model::init(small_cfg(), 1).unwrap();
        let x = batch(1, 4, 6);
        let f = m.encode(&x).unwrap();
        assert!(f.gate.data().iter().all(|&a| a == 0.5));
        for i in 0..f.mixed.numel() {
            assert_eq!(f.causal.data()[i], 0.5 * f.mixed.data()[i]);
            assert_eq!(f.confounding.data()[i], 0.5 * f.mixed.data()[i]);
        }
        *m.params.get_mut("gate.b").unwrap() = Tensor::full(&[1, 6], 60.0);
        let f = m.encode(&x).unwrap();
        assert_eq!(f.causal, f.mixed);
        assert!(f.confounding.data().iter().all(|v| v.abs() == 0.0));
    }

    #[test]
    fn zero_head_gives_zero_logits_and_bias_head_ignores_fc() {
        let mut m = Model::init(small_cfg(), 2).unwrap();
        let z = m.predict(&Tensor::zeros(&[1, 6]), Head::Task).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        *m.params.get_mut("gate.b").unwrap() = Tensor::full(&[1, 6], 60.0);
        *m.params.get_mut("bias.w").unwrap() = batch(3, 6, 3);
        *m.params.get_mut("bias.b").unwrap() = Tensor::row(&[0.1, -0.2, 0.3]);
        let z = m.predict(&batch(4, 5, 6), Head::Bias).unwrap();
        for r in 0..5 {
            assert_eq!(z.row_slice(r), &[0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn unknown_head_rejected() {
        assert!(matches!(
            "policy".parse::<Head>(),
            Err(Error::UnknownHead(_))
        ));
        assert_eq!("aux".parse::<Head>().unwrap(), Head::Aux);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = Model::init(small_cfg(), 0).unwrap();
        assert!(matches!(
            m.encode(&Tensor::zeros(&[2, 5])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn task_loss(m: &Model, x: &Tensor, y: &[usize], head: Head) -> (f64, GradientMap) {
        let mut t = Tape::new();
        let vars = m.params.register(&mut t, |_| true);
        let xv = t.constant(x.clone());
        let f = forward_features(&mut t, &m.config, &vars, xv).unwrap();
        let z = head_logits(&mut t, &vars, head, &f).unwrap();
        let l = t.cross_entropy(z, Target::Labels(y)).unwrap();
        (t.value(l).item(), t.backward(l).unwrap())
    }

    #[test]
    fn gate_gradient_nonzero_and_matches_finite_differences() {
        for seed in 0..5 {
            let m = perturbed(small_cfg(), seed);
            let x = batch(seed + 100, 7, 6);
            let y = [0, 1, 2, 0, 1, 2, 0];
            let (_, g) = task_loss(&m, &x, &y, Head::Task);
            let gw = g.get("gate.w").unwrap();
            assert!(gw.max_abs() > 1e-6);
            let h = 1e-5;
            for i in [0, 7, 20, 35] {
                let mut mp = m.clone();
                mp.params.get_mut("gate.w").unwrap().data_mut()[i] += h;
                let mut mm = m.clone();
                mm.params.get_mut("gate.w").unwrap().data_mut()[i] -= h;
                let fd = (task_loss(&mp, &x, &y, Head::Task).0
                    - task_loss(&mm, &x, &y, Head::Task).0)
                    / (2.0 * h);
                let ad = gw.data()[i];
                assert!(
                    (fd - ad).abs() <= 1e-6 + 1e-4 * fd.abs().max(ad.abs()),
                    "{fd} {ad}"
                );
            }
        }
    }

    #[test]
    fn heads_are_gradient_isolated() {
        let m = perturbed(small_cfg(), 9);
        let x = batch(9, 5, 6);
        let y = [0, 1, 2, 1, 0];
        let (_, g) = task_loss(&m, &x, &y, Head::Task);
        for n in ["bias.w", "bias.b", "aux.w", "aux.b"] {
            assert!(g.get(n).unwrap().data().iter().all(|&v| v == 0.0), "{n}");
        }
        let (_, g) = task_loss(&m, &x, &y, Head::Bias);
        for n in ["task.w", "task.b", "aux.w", "aux.b"] {
            assert!(g.get(n).unwrap().data().iter().all(|&v| v == 0.0), "{n}");
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let m = perturbed(ModelConfig::default(), 4);
        let x = batch(4, 10, 32);
        let a = m.predict(&x, Head::Task).unwrap();
        let b = m.predict(&x, Head::Task).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ungated_model_passes_everything_to_task_head() {
        let cfg = ModelConfig {
            gated: false,
            ..small_cfg()
        };
        let m = perturbed(cfg, 5);
        let f = m.encode(&batch(5, 3, 6)).unwrap();
        assert_eq!(f.causal, f.mixed);
        assert!(m.params.get("gate.w").is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = perturbed(ModelConfig::default(), 6);
        let p = dir.path().join("ckpt.txt");
        m.save(&p, "abc123").unwrap();
        let (back, hash) = Model::load(&p).unwrap();
        assert_eq!(hash, "abc123");
        assert_eq!(back, m);
        let x = batch(6, 8, 32);
        assert_eq!(
            back.predict(&x, Head::Task).unwrap(),
            m.predict(&x, Head::Task).unwrap()
        );
        assert!(matches!(
            Model::load(&dir.path().join("missing.txt")),
            Err(Error::Io { .. })
        ));
    }
}
