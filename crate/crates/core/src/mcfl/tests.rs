use super::*;
use crate::synthdata::{Role, Sample};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_distr::Normal;

const DIM: usize = 4;
const CLASSES: usize = 3;

fn toy_data(n: usize, seed: u64) -> Dataset {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let samples = (0..n)
        .map(|k| {
            let c = k % CLASSES;
            let features = (0..DIM)
                .map(|d| if d == c { 1.0 } else { 0.0 } + noise.sample(&mut r))
                .collect();
            Sample {
                features,
                class_label: c,
                context_label: 0,
            }
        })
        .collect();
    Dataset {
        samples,
        role: Role::Train,
        num_classes: CLASSES,
        num_contexts: 1,
        dim: DIM,
        config_hash: "toy".into(),
    }
}

fn toy_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        input_dim: DIM,
        hidden_dim: 5,
        feature_dim: DIM,
        num_classes: CLASSES,
        gated: true,
    };
    let mut m = Model::init(cfg, seed).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let n = Normal::new(0.0, 0.5).unwrap();
    for (_, t) in m.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut r));
    }
    m
}

fn query_value(model: &Model, params: &ParamSet, x: &Tensor, y: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |_| false);
    let l = task_loss(&model.config, x, y)(&mut tape, &vars).unwrap();
    tape.value(l).item()
}

fn split_partition(n: usize, m: usize) -> Partition {
    Partition::from_assignment((0..n).map(|k| (k / CLASSES) % m).collect(), m).unwrap()
}

fn rel_close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(floor)
}

#[test]
fn task_sizes_and_structure() {
    let labels: Vec<usize> = (0..800).map(|k| k % 10).collect();
    let p = Partition::from_assignment((0..800).map(|k| (k / 10) % 4).collect(), 4).unwrap();
    let cfg = MetaTaskConfig::default();
    let (tasks, warnings) = sample_meta_tasks(&p, &labels, &cfg, 3).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(tasks.len(), 4);
    for (t, task) in tasks.iter().enumerate() {
        assert_eq!(task.split, t);
        assert_eq!(task.support.len(), cfg.ways * cfg.support_shots);
        assert_eq!(task.query.len(), cfg.ways * cfg.query_shots);
        assert!(task.support.iter().all(|k| !task.query.contains(k)));
        let mut sc: Vec<usize> = task.support.iter().map(|&k| labels[k]).collect();
        let mut qc: Vec<usize> = task.query.iter().map(|&k| labels[k]).collect();
        sc.sort();
        sc.dedup();
        qc.sort();
        qc.dedup();
        let mut chosen = task.classes.clone();
        chosen.sort();
        assert_eq!(sc, chosen);
        assert_eq!(qc, chosen);
        assert!(task
            .support
            .iter()
            .chain(&task.query)
            .all(|&k| p.assignment[k] == t));
    }
    let (again, _) = sample_meta_tasks(&p, &labels, &cfg, 3).unwrap();
    assert_eq!(tasks, again);
}

#[test]
fn small_splits_fall_back_with_warning() {
    let labels: Vec<usize> = (0..60).map(|k| k % 3).collect();
    // split 1 gets three samples, split 2 none
    let assign: Vec<usize> = (0..60).map(|k| if k < 3 { 1 } else { 0 }).collect();
    let p = Partition::from_assignment(assign, 3).unwrap();
    let cfg = MetaTaskConfig {
        ways: 2,
        support_shots: 1,
        query_shots: 2,
        ..Default::default()
    };
    let (tasks, warnings) = sample_meta_tasks(&p, &labels, &cfg, 0).unwrap();
    assert_eq!(tasks.len(), 3);
    assert_eq!(warnings.len(), 2);
    for task in &tasks {
        assert_eq!(task.support.len(), 2);
        assert_eq!(task.query.len(), 4);
        assert!(task.support.iter().all(|k| !task.query.contains(k)));
        let mut distinct = task.classes.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
    }
    // split 2 is empty, so both of its classes come from outside it
    assert!(tasks[2].support.iter().all(|&k| p.assignment[k] == 0));
}

#[test]
fn config_validation() {
    let cfg = MetaTaskConfig {
        tasks_per_epoch: 10,
        ..Default::default()
    };
    assert!(cfg.validate(4).is_err());
    assert!(cfg.validate(5).is_ok());
    assert_eq!(cfg.updates_per_epoch(5), 2);
    assert!(MetaTaskConfig {
        query_shots: 0,
        ..Default::default()
    }
    .validate(2)
    .is_err());
    assert!(MixupConfig {
        alpha: 0.0,
        ..Default::default()
    }
    .validate()
    .is_err());
}

fn quadratic(tape: &mut Tape, vars: &ParamVars) -> Result<Var> {
    let p = vars.get("enc.phi")?;
    let sq = tape.mul(p, p)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 0.5))
}

#[test]
fn quadratic_inner_update_is_analytic() {
    let mut params = ParamSet::new();
    params.insert("enc.phi", Tensor::row(&[1.0, -2.0]));
    let out = inner_update(&params, is_encoder, 0.1, 1, &quadratic).unwrap();
    let got = out.get("enc.phi").unwrap().data();
    assert!((got[0] - 0.9).abs() < 1e-12 && (got[1] + 1.8).abs() < 1e-12);
    assert_eq!(params.get("enc.phi").unwrap().data(), &[1.0, -2.0]);
    let two = inner_update(&params, is_encoder, 0.1, 2, &quadratic).unwrap();
    assert!((two.get("enc.phi").unwrap().data()[0] - 0.81).abs() < 1e-12);
    assert_eq!(
        inner_update(&params, is_encoder, 0.0, 3, &quadratic).unwrap(),
        params
    );
}

#[test]
fn inner_update_matches_finite_difference_step() {
    let data = toy_data(30, 1);
    let model = toy_model(2);
    let idx: Vec<usize> = (0..6).collect();
    let (x, y) = (data.features_of(&idx), data.labels_of(&idx));
    let alpha = 0.3;
    let adapted = inner_update(
        &model.params,
        is_meta_param,
        alpha,
        1,
        &task_loss(&model.config, &x, &y),
    )
    .unwrap();
    for (name, base) in model.params.iter() {
        let new = adapted.get(name).unwrap();
        for i in 0..base.numel() {
            let expect = if is_meta_param(name) {
                let h = 1e-6;
                let mut plus = model.params.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = model.params.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= h;
                let fd = (query_value(&model, &plus, &x, &y) - query_value(&model, &minus, &x, &y))
                    / (2.0 * h);
                base.data()[i] - alpha * fd
            } else {
                base.data()[i]
            };
            assert!((new.data()[i] - expect).abs() < 1e-7, "{name}[{i}]");
        }
    }
}

fn two_tasks() -> Vec<MetaTask> {
    vec![
        MetaTask {
            split: 0,
            classes: vec![0, 1, 2],
            support: vec![0, 1, 2],
            query: vec![3, 4, 5, 6, 7, 8],
        },
        MetaTask {
            split: 1,
            classes: vec![0, 1, 2],
            support: vec![9, 10, 11],
            query: vec![12, 13, 14, 15, 16, 17],
        },
    ]
}

#[test]
fn meta_query_loss_cases() {
    let data = toy_data(30, 3);
    let model = toy_model(4);
    let tasks = two_tasks();
    let snap = vec![model.params.clone()];
    let single = meta_query_loss(&model.config, &data, &tasks[..1], &snap, 1).unwrap();
    let x = data.features_of(&tasks[0].query);
    let y = data.labels_of(&tasks[0].query);
    assert_eq!(single, query_value(&model, &model.params, &x, &y));
    let same = vec![tasks[0].clone(), tasks[0].clone()];
    let both = meta_query_loss(
        &model.config,
        &data,
        &same,
        &[model.params.clone(), model.params.clone()],
        2,
    )
    .unwrap();
    assert!((both - single).abs() < 1e-15);
    assert!(meta_query_loss(&model.config, &data, &tasks, &snap, 2).is_err());
    assert!(meta_query_loss(&model.config, &data, &tasks[..1], &snap, 2).is_err());
}

#[test]
fn perfect_adapted_params_give_near_zero_query_loss() {
    let mut data = toy_data(12, 0);
    for s in &mut data.samples {
        s.features = (0..DIM)
            .map(|d| if d == s.class_label { 1.0 } else { 0.0 })
            .collect();
    }
    let mut model = toy_model(1);
    // identity encoder, open gate, task head reading the class dims
    *model.params.get_mut("enc.w3").unwrap() = Tensor::zeros(&[5, DIM]);
    *model.params.get_mut("enc.b3").unwrap() = Tensor::zeros(&[1, DIM]);
    *model.params.get_mut("gate.w").unwrap() = Tensor::zeros(&[DIM, DIM]);
    *model.params.get_mut("gate.b").unwrap() = Tensor::full(&[1, DIM], 50.0);
    let mut w = Tensor::zeros(&[DIM, CLASSES]);
    for c in 0..CLASSES {
        w.data_mut()[c * CLASSES + c] = 40.0;
    }
    *model.params.get_mut("task.w").unwrap() = w;
    *model.params.get_mut("task.b").unwrap() = Tensor::zeros(&[1, CLASSES]);
    let task = MetaTask {
        split: 0,
        classes: vec![0, 1, 2],
        support: vec![],
        query: (0..12).collect(),
    };
    let l = meta_query_loss(&model.config, &data, &[task], &[model.params.clone()], 1).unwrap();
    assert!(l < 1e-6, "{l}");
}

#[test]
fn outer_identities() {
    let data = toy_data(30, 5);
    let model = toy_model(6);
    let tasks = two_tasks();
    let cfg = MetaTaskConfig {
        inner_lr: 0.0,
        ..Default::default()
    };
    let mg = meta_gradient(&model, &data, &tasks, &cfg).unwrap();
    assert_eq!(
        outer_update(&model.params, &mg.grads, 0.0).unwrap(),
        model.params
    );

    // alpha = 0: the averaged plain query gradients
    let mut plain = GradientMap::new();
    for t in &tasks {
        let x = data.features_of(&t.query);
        let y = data.labels_of(&t.query);
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, is_meta_param);
        let l = task_loss(&model.config, &x, &y)(&mut tape, &vars).unwrap();
        plain.add_scaled(0.5, &tape.backward(l).unwrap()).unwrap();
    }
    for (name, g) in mg.grads.iter() {
        let p = plain.get(name).unwrap();
        for (a, b) in g.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    let single = meta_gradient(&model, &data, &tasks[..1], &cfg).unwrap();
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape, is_meta_param);
    let x = data.features_of(&tasks[0].query);
    let y = data.labels_of(&tasks[0].query);
    let l = task_loss(&model.config, &x, &y)(&mut tape, &vars).unwrap();
    let direct = tape.backward(l).unwrap();
    let stepped = outer_update(&model.params, &single.grads, 0.2).unwrap();
    assert_eq!(stepped, model.params.stepped(&direct, 0.2).unwrap());
}

/// Query loss after one numeric inner step from `params`.
fn composed(model: &Model, params: &ParamSet, data: &Dataset, task: &MetaTask, alpha: f64) -> f64 {
    let xs = data.features_of(&task.support);
    let ys = data.labels_of(&task.support);
    let adapted = inner_update(
        params,
        is_meta_param,
        alpha,
        1,
        &task_loss(&model.config, &xs, &ys),
    )
    .unwrap();
    query_value(
        model,
        &adapted,
        &data.features_of(&task.query),
        &data.labels_of(&task.query),
    )
}

#[test]
fn second_order_matches_composed_finite_differences() {
    let data = toy_data(30, 7);
    let model = toy_model(8);
    let task = &two_tasks()[0];
    let alpha = 0.5;
    let so = MetaTaskConfig {
        inner_lr: alpha,
        second_order: true,
        ..Default::default()
    };
    let fo = MetaTaskConfig {
        second_order: false,
        ..so.clone()
    };
    let (_, g2) = task_gradient(&model, &data, task, &so).unwrap();
    let (_, g1) = task_gradient(&model, &data, task, &fo).unwrap();
    let mut differs = false;
    for (name, g) in g2.iter() {
        for i in 0..g.numel() {
            let h = 1e-5;
            let mut plus = model.params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = model.params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (composed(&model, &plus, &data, task, alpha)
                - composed(&model, &minus, &data, task, alpha))
                / (2.0 * h);
            assert!(
                rel_close(g.data()[i], fd, 1e-3, 1e-6),
                "{name}[{i}]: {} vs {fd}",
                g.data()[i]
            );
            differs |= (g.data()[i] - g1.get(name).unwrap().data()[i]).abs() > 1e-6;
        }
    }
    assert!(differs);
}

#[test]
fn mixup_examples() {
    let x = Tensor::from_rows(&[[0.0, 2.0], [2.0, 0.0]]).unwrap();
    let y = Tensor::one_hot(&[0, 1], 2).unwrap();
    let same = mix_pairs(&x, &y, &[1, 0], &[1.0, 1.0]).unwrap();
    assert_eq!(same.features, x);
    assert_eq!(same.targets, y);
    let half = mix_pairs(&x, &y, &[1, 0], &[0.5, 0.5]).unwrap();
    assert_eq!(half.features.row_slice(0), &[1.0, 1.0]);
    let soft = mix_pairs(&x, &y, &[1, 0], &[0.3, 0.3]).unwrap();
    assert!((soft.targets.get(0, 0) - 0.3).abs() < 1e-15);
    assert!((soft.targets.get(0, 1) - 0.7).abs() < 1e-15);
}

#[test]
fn stage2_branch_switches() {
    let data = toy_data(30, 9);
    let model = toy_model(10);
    let tasks = two_tasks();
    let cfg = MetaTaskConfig::default();
    let batch = mixup_batch(
        &data.features_of(&[18, 19, 20, 21, 22, 23]),
        &data.labels_of(&[18, 19, 20, 21, 22, 23]),
        CLASSES,
        &MixupConfig::default(),
        4,
    )
    .unwrap();

    let (p_meta, l_meta) =
        stage2_step(&model, &data, &tasks, Some(&batch), &cfg, 0.1, 0.0).unwrap();
    let mg = meta_gradient(&model, &data, &tasks, &cfg).unwrap();
    assert_eq!(l_meta.total, mg.loss);
    assert_eq!(p_meta, outer_update(&model.params, &mg.grads, 0.1).unwrap());

    let (p_erm, l_erm) = stage2_step(&model, &data, &[], Some(&batch), &cfg, 0.1, 1.0).unwrap();
    let (e, g) = erm_gradient(&model, &batch).unwrap();
    assert_eq!(l_erm.total, e);
    assert_eq!(l_erm.meta, 0.0);
    assert_eq!(p_erm, model.params.stepped(&g, 0.1).unwrap());
    // the task head is untouched by the ERM branch
    assert_eq!(
        p_erm.get("task.w").unwrap(),
        model.params.get("task.w").unwrap()
    );

    let (a, la) = stage2_step(&model, &data, &tasks, Some(&batch), &cfg, 0.1, 1.0).unwrap();
    let (b, lb) = stage2_step(&model, &data, &tasks, Some(&batch), &cfg, 0.1, 1.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.total, la.meta + la.erm);
    assert_eq!(la.query_losses.len(), 2);
}

proptest! {
    #[test]
    fn mixed_labels_are_distributions(seed in any::<u64>(), n in 2usize..20, a in 0.1f64..4.0) {
        let data = toy_data(n, seed);
        let cfg = MixupConfig { alpha: a, batch_size: n };
        let b = mixup_batch(&data.features(), &data.labels(), CLASSES, &cfg, seed).unwrap();
        let mut partners = b.partners.clone();
        partners.sort();
        prop_assert_eq!(partners, (0..n).collect::<Vec<_>>());
        for k in 0..n {
            prop_assert!((0.0..=1.0).contains(&b.lambdas[k]));
            let row = b.targets.row_slice(k);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let again = mixup_batch(&data.features(), &data.labels(), CLASSES, &cfg, seed).unwrap();
        prop_assert_eq!(b, again);
    }

    #[test]
    fn sampled_tasks_respect_invariants(seed in any::<u64>(), n in 20usize..200, m in 2usize..5) {
        let labels: Vec<usize> = (0..n).map(|k| (k * 7 + k / 3) % 5).collect();
        let p = split_partition(n, m);
        let cfg = MetaTaskConfig { ways: 2, support_shots: 1, query_shots: 3, tasks_per_epoch: m, ..Default::default() };
        let (tasks, _) = sample_meta_tasks(&p, &labels, &cfg, seed).unwrap();
        prop_assert_eq!(tasks.len(), m);
        for t in &tasks {
            prop_assert!(t.support.iter().all(|k| !t.query.contains(k)));
            prop_assert_eq!(t.support.len(), 2);
            prop_assert_eq!(t.query.len(), 6);
            prop_assert!(t.classes[0] != t.classes[1]);
            for &k in t.support.iter().chain(&t.query) {
                prop_assert!(t.classes.contains(&labels[k]));
            }
        }
    }
}
