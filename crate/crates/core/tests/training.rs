mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use wbr::data::LabeledDataset;
use wbr::linalg::{DenseMatrix, SeededRng};
use wbr::memory::{build_memory_average, ImportanceMode, MemoryStore};
use wbr::model::{softmax_ce, MlpModel};
use wbr::optim::{ClipPolicy, SgdState};
use wbr::scenario::{build_scenario, ClassSet, TaskSplit};
use wbr::trainer::{batch_rng, init_model, run_continual, wbr_train_task, TrainConfig, UpdateMode};
use wbr::Error;

/// Plain linear softmax classifier on `Vec`s, used as the reference trajectory.
struct LinearOracle {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl LinearOracle {
    fn from_model(m: &MlpModel) -> Self {
        Self {
            w: m.weights()[0].iter_rows().map(<[f64]>::to_vec).collect(),
            b: m.biases()[0].clone(),
        }
    }

    /// One SGD step of mean masked cross-entropy over `xs`.
    fn step(&mut self, xs: &[Vec<f64>], ys: &[u32], mask: &[u32], lr: f64) {
        let n = xs.len() as f64;
        let mut gw = vec![vec![0.0; self.w[0].len()]; self.w.len()];
        let mut gb = vec![0.0; self.b.len()];
        for (x, &y) in xs.iter().zip(ys) {
            let z: Vec<f64> = mask
                .iter()
                .map(|&c| {
                    self.b[c as usize]
                        + self.w[c as usize]
                            .iter()
                            .zip(x)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for (k, &c) in mask.iter().enumerate() {
                let d = e[k] / s - f64::from(u8::from(c == y));
                gb[c as usize] += d / n;
                for (g, xi) in gw[c as usize].iter_mut().zip(x) {
                    *g += d * xi / n;
                }
            }
        }
        for (row, grow) in self.w.iter_mut().zip(&gw) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= lr * g;
            }
        }
        for (b, g) in self.b.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
    }
}

fn toy(seed: u64) -> LabeledDataset {
    common::gaussian_blobs(4, 5, 9, 2.0, &mut SeededRng::new(seed))
}

#[test]
fn unclipped_trajectory_matches_alternating_oracle() {
    let data = toy(1);
    let scenario = build_scenario(&data, &data, 0, 2, None).unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        epochs_per_task: 3,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut model = init_model(&[5, 4], cfg.seed).unwrap();
    let mut oracle = LinearOracle::from_model(&model);
    run_continual(&mut model, &scenario, &data, &data, &cfg).unwrap();

    let mut order_rng = batch_rng(cfg.seed);
    let mut memory: Vec<(Vec<f64>, u32)> = Vec::new();
    let mut mask: Vec<u32> = Vec::new();
    for task in &scenario.tasks {
        mask.extend(task.class_ids.iter());
        for _ in 0..cfg.epochs_per_task {
            let order = order_rng.shuffle(task.train_rows.len());
            for chunk in order.chunks(cfg.batch_size) {
                let xs: Vec<Vec<f64>> = chunk
                    .iter()
                    .map(|&i| data.features().row(task.train_rows[i]).to_vec())
                    .collect();
                let ys: Vec<u32> = chunk
                    .iter()
                    .map(|&i| data.labels()[task.train_rows[i]])
                    .collect();
                oracle.step(&xs, &ys, &mask, cfg.lr);
                if !memory.is_empty() {
                    let mx: Vec<Vec<f64>> = memory.iter().map(|(v, _)| v.clone()).collect();
                    let my: Vec<u32> = memory.iter().map(|(_, c)| *c).collect();
                    oracle.step(&mx, &my, &mask, cfg.lr);
                }
            }
        }
        for c in task.class_ids.iter() {
            let rows: Vec<&[f64]> = task
                .train_rows
                .iter()
                .filter(|&&r| data.labels()[r] == c)
                .map(|&r| data.features().row(r))
                .collect();
            let mean = (0..5)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                .collect();
            memory.push((mean, c));
        }
    }

    for (row, orow) in model.weights()[0].iter_rows().zip(&oracle.w) {
        for (a, b) in row.iter().zip(orow) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
    for (a, b) in model.biases()[0].iter().zip(&oracle.b) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn memory_gradient_of_linear_model_is_outer_product() {
    let mut rng = SeededRng::new(4);
    let model = MlpModel::new(&[6, 3], &mut rng).unwrap();
    let memory = common::uniform_batch(3, 6, &mut rng);
    let labels = [0u32, 1, 2];
    let mask = ClassSet::new(0..3);
    let (logits, cache) = model.forward(&memory, &mask).unwrap();
    let ce = softmax_ce(&logits, &labels, &mask).unwrap();
    let g = model.backward(&cache, &ce.d_logits).unwrap();

    // delta_i = softmax(W a_i) - onehot(y_i); dW = (1/n) sum_i delta_i a_i^T.
    let w = &model.weights()[0];
    for c in 0..3 {
        for j in 0..6 {
            let mut expected = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let a = memory.row(i);
                let z: Vec<f64> = (0..3)
                    .map(|k| (0..6).map(|t| w.get(k, t) * a[t]).sum())
                    .collect();
                let s: f64 = z.iter().map(|v| v.exp()).sum();
                let delta = z[c].exp() / s - if c as u32 == y { 1.0 } else { 0.0 };
                expected += delta * a[j] / 3.0;
            }
            assert_abs_diff_eq!(g.d_weights[0].get(c, j), expected, epsilon = 1e-14);
        }
    }
}

#[test]
fn alternating_update_is_two_sequential_steps() {
    let data = toy(2);
    let scenario = build_scenario(&data, &data, 0, 2, None).unwrap();
    let (t0, t1) = (&scenario.tasks[0], &scenario.tasks[1]);
    let mut store = MemoryStore::new(5, ImportanceMode::Average);
    store
        .append(build_memory_average(&data.subset(&t0.train_rows), &t0.class_ids, 0).unwrap())
        .unwrap();
    let one_batch = TaskSplit {
        train_rows: t1.train_rows[..3].to_vec(),
        ..t1.clone()
    };
    let mask = ClassSet::new(0..4);
    let cfg = TrainConfig {
        lr: 0.1,
        epochs_per_task: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let start = MlpModel::new(&[5, 6, 4], &mut SeededRng::new(3)).unwrap();

    let mut trained = start.clone();
    let mut state = SgdState::new(cfg.lr, 0.0).unwrap();
    wbr_train_task(
        &mut trained,
        &one_batch,
        &data,
        &store,
        &mask,
        &cfg,
        &mut state,
        &mut SeededRng::new(0),
    )
    .unwrap();

    let grad = |m: &MlpModel, x: &DenseMatrix, y: &[u32]| {
        let (logits, cache) = m.forward(x, &mask).unwrap();
        m.backward(&cache, &softmax_ce(&logits, y, &mask).unwrap().d_logits)
            .unwrap()
    };
    let rows: Vec<usize> = SeededRng::new(0)
        .shuffle(3)
        .into_iter()
        .map(|i| one_batch.train_rows[i])
        .collect();
    let batch = data.features().select_rows(&rows);
    let labels: Vec<u32> = rows.iter().map(|&r| data.labels()[r]).collect();
    let (mem, mem_labels) = store.memory_batch();

    let mut manual = start.clone();
    let mut s = SgdState::new(cfg.lr, 0.0).unwrap();
    s.step(&mut manual, &grad(&start, &batch, &labels)).unwrap();
    let g_mem = grad(&manual, &mem, &mem_labels);
    s.step(&mut manual, &g_mem).unwrap();
    assert_eq!(trained, manual);

    // Joint-loss semantics evaluates both gradients at the same point and differs.
    let mut joint = start.clone();
    let joint_cfg = TrainConfig {
        update_mode: UpdateMode::JointLoss,
        ..cfg.clone()
    };
    let mut state = SgdState::new(cfg.lr, 0.0).unwrap();
    wbr_train_task(
        &mut joint,
        &one_batch,
        &data,
        &store,
        &mask,
        &joint_cfg,
        &mut state,
        &mut SeededRng::new(0),
    )
    .unwrap();
    assert_ne!(joint, trained);
}

#[test]
fn old_task_samples_never_reach_a_gradient_step() {
    let data = toy(3);
    let scenario = build_scenario(&data, &data, 0, 2, None).unwrap();
    let mut leaky = scenario.tasks[1].clone();
    leaky.train_rows.push(scenario.tasks[0].train_rows[0]);
    let mut model = init_model(&[5, 4], 0).unwrap();
    let mut state = SgdState::new(0.01, 0.0).unwrap();
    let err = wbr_train_task(
        &mut model,
        &leaky,
        &data,
        &MemoryStore::new(5, ImportanceMode::Average),
        &ClassSet::new(0..4),
        &TrainConfig::default(),
        &mut state,
        &mut SeededRng::new(0),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn clipped_runs_differ_from_unclipped() {
    let data = toy(5);
    let scenario = build_scenario(&data, &data, 0, 1, None).unwrap();
    let base = TrainConfig {
        lr: 0.5,
        epochs_per_task: 2,
        ..TrainConfig::default()
    };
    let run = |cfg: &TrainConfig| {
        let mut m = init_model(&[5, 4], 0).unwrap();
        let r = run_continual(&mut m, &scenario, &data, &data, cfg).unwrap();
        let steps: usize = r
            .diagnostics
            .iter()
            .map(|d| d.steps.new_steps + d.steps.memory_steps)
            .sum();
        (m, steps)
    };
    let tight = TrainConfig {
        clip_new: ClipPolicy::global_norm(1e-3).unwrap(),
        clip_memory: ClipPolicy::global_norm(1e-3).unwrap(),
        ..base.clone()
    };
    let start = init_model(&[5, 4], 0).unwrap();
    let ((free, _), (clipped, steps)) = (run(&base), run(&tight));
    let moved = |m: &MlpModel| {
        let mut d = m.weights()[0].clone();
        d.axpy(-1.0, &start.weights()[0]).unwrap();
        d.l2_norm()
    };
    // Every clipped step moves the parameters by at most lr * 1e-3.
    assert!(moved(&clipped) <= steps as f64 * base.lr * 1e-3 * (1.0 + 1e-9));
    assert!(moved(&free) > moved(&clipped));
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = toy(6);
    let scenario = build_scenario(&data, &data, 0, 1, Some(3)).unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        epochs_per_task: 2,
        batch_size: 5,
        momentum: 0.9,
        clip_new: ClipPolicy::global_norm(0.5).unwrap(),
        clip_memory: ClipPolicy::element_clamp(0.1).unwrap(),
        importance_mode: ImportanceMode::Confidence,
        seed: 17,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = init_model(&[5, 8, 4], cfg.seed).unwrap();
        let r = run_continual(&mut m, &scenario, &data, &data, &cfg).unwrap();
        (m, r)
    };
    let ((m1, r1), (m2, r2)) = (run(), run());
    assert_eq!(m1.to_bytes(), m2.to_bytes());
    assert_eq!(r1.metrics, r2.metrics);
    assert_eq!(r1.diagnostics, r2.diagnostics);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn store_holds_one_vector_per_seen_class(
        num_classes in 2u32..7,
        inc in 1usize..4,
        seed in any::<u64>(),
    ) {
        let inc = inc.min(num_classes as usize);
        let data = common::gaussian_blobs(num_classes, 7, 3, 3.0, &mut SeededRng::new(seed));
        let scenario = build_scenario(&data, &data, 0, inc, Some(seed)).unwrap();
        let cfg = TrainConfig { epochs_per_task: 1, seed, ..TrainConfig::default() };
        let mut m = init_model(&[7, num_classes as usize], seed).unwrap();
        let r = run_continual(&mut m, &scenario, &data, &data, &cfg).unwrap();
        for (b, d) in r.diagnostics.iter().enumerate() {
            prop_assert_eq!(d.memory_vectors, scenario.seen_classes(b).unwrap().len());
        }
        for (b, s) in r.stages.iter().enumerate() {
            prop_assert_eq!(s.stage, b + 1);
            prop_assert!((0.0..=100.0).contains(&s.accuracy));
        }
        prop_assert_eq!(r.metrics.num_stages(), scenario.num_tasks());
    }
}
