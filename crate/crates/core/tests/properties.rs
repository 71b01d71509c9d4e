//! Property tests for the module invariants.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tasml::checkpoint::Checkpoint;
use tasml::dataset_kernel::{fit_scoring, kernel_eval, kernel_matrix, signature, top_m_filter, KernelConfig, KernelFamily};
use tasml::driver::{adapt, evaluate, meta_train, AdaptParams, Bandwidth, TasmlConfig};
use tasml::ls_meta_learn::{repr_forward_batch, solve_head, task_loss, task_loss_grad, MetaParams};
use tasml::meta_objectives::{erm_objective, optimizer_step, weighted_objective, OptimizerMode, OptimizerState, WeightedObjectiveSpec};
use tasml::numerics::{cholesky_solve, grad_check, Matrix};
use tasml::taskgen::{inputs_matrix, one_hot, sample_multimodal_tasks, GeneratorConfig, MetaSet, Split, Task};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_theta(p: usize, seed: u64) -> MetaParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = MetaParams::init(p, &mut rng).to_flat();
    let n_w = p * p;
    for (i, v) in flat.iter_mut().enumerate() {
        if (n_w..n_w + p).contains(&i) || i >= 2 * n_w + p {
            *v = 0.1 * normal(&mut rng);
        }
    }
    MetaParams::from_flat(p, &flat).unwrap()
}

fn small_gen(seed: u64, ways: usize, shots: usize, d: usize) -> GeneratorConfig {
    GeneratorConfig {
        d,
        informative_dims: 2,
        ways,
        shots,
        query_per_class: 2,
        classes_per_split: 3 * ways,
        seed,
        ..GeneratorConfig::default()
    }
}

fn tasks(seed: u64, n: usize, ways: usize, shots: usize, d: usize) -> MetaSet {
    sample_multimodal_tasks(&small_gen(seed, ways, shots, d), n, Split::Train).unwrap()
}

/// `(XᵀX + λI)⁻¹ XᵀY` by Gaussian elimination, as `p × C`.
fn primal_ridge(x: &Matrix, y: &Matrix, lambda: f64) -> Vec<Vec<f64>> {
    let (m, p) = x.shape();
    let c = y.cols();
    let mut aug = vec![vec![0.0; p + c]; p];
    for r in 0..m {
        for i in 0..p {
            for j in 0..p {
                aug[i][j] += x[(r, i)] * x[(r, j)];
            }
            for k in 0..c {
                aug[i][p + k] += x[(r, i)] * y[(r, k)];
            }
        }
    }
    for (i, row) in aug.iter_mut().enumerate() {
        row[i] += lambda;
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&a, &b| aug[a][col].abs().total_cmp(&aug[b][col].abs())).unwrap();
        aug.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = aug[r][col] / aug[col][col];
                for k in col..p + c {
                    aug[r][k] -= f * aug[col][k];
                }
            }
        }
    }
    (0..p).map(|i| (0..c).map(|k| aug[i][p + k] / aug[i][i]).collect()).collect()
}

fn tiny_config() -> TasmlConfig {
    TasmlConfig {
        sigma: Bandwidth::MEDIAN,
        init_steps: 10,
        init_eta: Some(1e-3),
        eta: 1e-3,
        top_m: Some(3),
        steps: 3,
        meta_batch: 3,
        ..TasmlConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solving_an_spd_matrix_against_itself_gives_identity(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Matrix::zeros(n, n);
        g.as_mut_slice().iter_mut().for_each(|v| *v = normal(&mut rng));
        let mut a = g.matmul_t(&g);
        a.add_diag(0.5);
        let (x, factor) = cholesky_solve(&a, &a, 0.0).unwrap();
        prop_assert_eq!(factor.jitter(), 0.0);
        prop_assert!(x.max_abs_diff(&Matrix::identity(n)) <= 1e-8);
        let rec = factor.reconstruct();
        prop_assert!(rec.max_abs_diff(&a) <= 1e-8 * a.max_abs());
    }

    #[test]
    fn episodes_have_the_declared_shape(
        seed in any::<u64>(),
        ways in 1usize..6,
        shots in 1usize..6,
        query in 1usize..5,
        n_modes in 1usize..4,
    ) {
        let cfg = GeneratorConfig {
            n_modes,
            d: 12,
            informative_dims: 3,
            ways,
            shots,
            query_per_class: query,
            classes_per_split: 2 * ways,
            seed,
            ..GeneratorConfig::default()
        };
        let set = sample_multimodal_tasks(&cfg, 6, Split::Test).unwrap();
        for t in &set.tasks {
            prop_assert_eq!(t.support.len(), ways * shots);
            prop_assert!(t.validate(shots).is_ok());
            let support_labels: BTreeSet<usize> = t.support.iter().map(|e| e.y).collect();
            for c in 0..ways {
                prop_assert_eq!(t.query.iter().filter(|e| e.y == c).count(), query);
            }
            prop_assert!(t.query.iter().all(|e| support_labels.contains(&e.y)));
            prop_assert!(t.query.iter().all(|q| t.support.iter().all(|s| s.x != q.x)));
            prop_assert!(t.support.iter().chain(&t.query).all(|e| e.x.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn split_pools_never_overlap(ways in 1usize..8, per_split in 8usize..40) {
        let cfg = GeneratorConfig { ways, classes_per_split: per_split.max(ways), ..GeneratorConfig::default() };
        let pools = [Split::Train, Split::Validation, Split::Test].map(|s| cfg.class_pool(s));
        for i in 0..3 {
            for j in i + 1..3 {
                prop_assert!(pools[i].is_disjoint(&pools[j]));
            }
        }
    }

    #[test]
    fn signatures_ignore_example_order(seed in any::<u64>()) {
        let set = tasks(seed, 1, 3, 4, 8);
        let mut support = set.tasks[0].support.clone();
        let kernel = KernelConfig::default();
        let before = signature(&support, &kernel).unwrap();
        support.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let after = signature(&support, &kernel).unwrap();
        prop_assert!(before.mean_embedding.iter().zip(&after.mean_embedding).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn kernel_matrix_is_symmetric_with_unit_diagonal(seed in any::<u64>(), sigma in 0.5f64..10.0, laplace in any::<bool>()) {
        let set = tasks(seed, 6, 2, 2, 8);
        let kernel = KernelConfig {
            family: if laplace { KernelFamily::Laplace } else { KernelFamily::Gaussian },
            sigma,
            ..KernelConfig::default()
        };
        let sigs: Vec<_> = set.tasks.iter().map(|t| signature(&t.support, &kernel).unwrap()).collect();
        let k = kernel_matrix(&sigs, &kernel).unwrap();
        for i in 0..sigs.len() {
            prop_assert_eq!(k[(i, i)], 1.0);
            for j in 0..sigs.len() {
                prop_assert_eq!(k[(i, j)], k[(j, i)]);
                prop_assert_eq!(kernel_eval(&sigs[i], &sigs[j], &kernel).unwrap(), kernel_eval(&sigs[j], &sigs[i], &kernel).unwrap());
            }
        }
    }

    #[test]
    fn scoring_a_training_task_ranks_it_first(seed in any::<u64>(), n in 5usize..25) {
        let set = tasks(seed, n, 3, 3, 16);
        let sigs: Vec<_> = set.tasks.iter().map(|t| signature(&t.support, &KernelConfig::default()).unwrap()).collect();
        let kernel = KernelConfig {
            sigma: tasml::dataset_kernel::median_pairwise_distance(&sigs),
            ..KernelConfig::default()
        };
        let model = fit_scoring(&set, &kernel, 1e-8).unwrap();
        for (i, t) in set.tasks.iter().enumerate() {
            let w = model.score(&t.support).unwrap();
            let best = (0..n).max_by(|&a, &b| w.full[a].total_cmp(&w.full[b])).unwrap();
            prop_assert_eq!(best, i);
        }
    }

    #[test]
    fn top_m_weights_are_a_distribution_over_the_largest_scores(
        full in prop::collection::vec(-1.0f64..1.0, 1..40),
        m in 1usize..40,
    ) {
        let w = tasml::dataset_kernel::TaskWeights { full: full.clone(), selected: Vec::new() };
        let f = top_m_filter(&w, m);
        let m = m.min(full.len());
        prop_assert_eq!(f.selected.len(), m);
        let total: f64 = f.selected.iter().map(|(_, w)| w).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(f.selected.iter().all(|(_, w)| *w >= 0.0));
        let kept: BTreeSet<usize> = f.selected_indices().into_iter().collect();
        let floor = f.selected_indices().iter().map(|&i| full[i]).fold(f64::INFINITY, f64::min);
        prop_assert!((0..full.len()).filter(|i| !kept.contains(i)).all(|i| full[i] <= floor));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dual_head_equals_primal_ridge(seed in any::<u64>(), ways in 2usize..6, shots in 1usize..6, p in 2usize..65, lt in 0.05f64..2.0) {
        prop_assume!(ways * shots <= 25);
        let gen = GeneratorConfig { informative_dims: 1, ..small_gen(seed, ways, shots, p) };
        let task = &sample_multimodal_tasks(&gen, 1, Split::Train).unwrap().tasks[0];
        let theta = random_theta(p, seed);
        let head = solve_head(&theta, &task.support, ways, lt).unwrap();
        let x = repr_forward_batch(&theta, inputs_matrix(&task.support).unwrap()).unwrap();
        let primal = primal_ridge(&x, &one_hot(&task.support, ways), lt);
        for i in 0..p {
            for c in 0..ways {
                prop_assert!((head.w[(c, i)] - primal[i][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_network_head_is_ridge_on_raw_inputs(seed in any::<u64>(), ways in 2usize..5, shots in 1usize..5) {
        let set = tasks(seed, 1, ways, shots, 10);
        let task = &set.tasks[0];
        let head = solve_head(&MetaParams::zeros(10), &task.support, ways, 0.1).unwrap();
        let direct = primal_ridge(&inputs_matrix(&task.support).unwrap(), &one_hot(&task.support, ways), 0.1);
        for i in 0..10 {
            for c in 0..ways {
                prop_assert!((head.w[(c, i)] - direct[i][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_accuracies_bounded(seed in any::<u64>(), ways in 1usize..5, shots in 1usize..5, lt in 1e-3f64..10.0) {
        let set = tasks(seed, 1, ways, shots, 8);
        let t = &set.tasks[0];
        let r = task_loss(&random_theta(8, seed), &t.support, &t.query, ways, lt).unwrap();
        prop_assert!(r.loss >= 0.0 && r.loss.is_finite());
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
    }

    #[test]
    fn uniform_weighted_objective_is_erm(seed in any::<u64>(), n in 1usize..6, l2 in 0.0f64..1e-2) {
        let set = tasks(seed, n, 3, 2, 8);
        let theta = random_theta(8, seed);
        let spec = WeightedObjectiveSpec {
            weighted_tasks: set.tasks.iter().map(|t| (t, 1.0 / n as f64)).collect(),
            target_task: None,
            beta1: 1.0,
            beta2: 0.0,
            lambda_theta: 0.1,
            l2_theta: l2,
        };
        let (wl, wg) = weighted_objective(&theta, &spec).unwrap();
        let batch: Vec<&Task> = set.tasks.iter().collect();
        let (el, eg) = erm_objective(&theta, &batch, 0.1, l2).unwrap();
        prop_assert!((wl - el).abs() <= 1e-12);
        prop_assert!(wg.iter().zip(&eg).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn weighted_loss_is_linear_in_each_weight(seed in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let set = tasks(seed, 2, 3, 2, 8);
        let theta = random_theta(8, seed);
        let loss = |w0: f64, w1: f64| {
            let spec = WeightedObjectiveSpec {
                weighted_tasks: vec![(&set.tasks[0], w0), (&set.tasks[1], w1)],
                target_task: None,
                beta1: 1.0,
                beta2: 0.0,
                lambda_theta: 0.1,
                l2_theta: 0.0,
            };
            weighted_objective(&theta, &spec).unwrap().0
        };
        let sum = a * loss(1.0, 0.0) + b * loss(0.0, 1.0);
        prop_assert!((loss(a, b) - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }

    #[test]
    fn sgd_step_is_theta_minus_eta_grad(seed in any::<u64>(), eta in 1e-5f64..1.0) {
        let theta = random_theta(5, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let grad: Vec<f64> = (0..theta.n_params()).map(|_| normal(&mut rng)).collect();
        let state = OptimizerState::new(theta.n_params(), eta, OptimizerMode::Sgd);
        let (_, next) = optimizer_step(&state, &theta, &grad).unwrap();
        for ((n, t), g) in next.to_flat().iter().zip(theta.to_flat()).zip(&grad) {
            prop_assert_eq!(*n, t - eta * g);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), n in 1usize..8) {
        let set = tasks(seed, n, 2, 2, 6);
        let scoring = fit_scoring(&set, &KernelConfig { sigma: 3.0, ..KernelConfig::default() }, 1e-6).unwrap();
        let ck = Checkpoint {
            config: serde_json::json!({"seed": seed, "n": n}),
            theta0: random_theta(6, seed),
            scoring,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.theta0, ck.theta0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gradients_pass_finite_difference_checks(seed in any::<u64>(), ways in prop::sample::select(vec![2usize, 5]), shots in prop::sample::select(vec![1usize, 5])) {
        let set = tasks(seed, 3, ways, shots, 6);
        let theta = random_theta(6, seed);
        let t = &set.tasks[0];
        let (_, g) = task_loss_grad(&theta, &t.support, &t.query, ways, 0.2, 1e-3).unwrap();
        let f = |v: &[f64]| {
            let th = MetaParams::from_flat(6, v).unwrap();
            task_loss(&th, &t.support, &t.query, ways, 0.2).unwrap().loss + 1e-3 * th.squared_norm()
        };
        prop_assert!(grad_check(f, &theta.to_flat(), &g).unwrap() < 1e-4);

        let spec = WeightedObjectiveSpec {
            weighted_tasks: vec![(&set.tasks[1], 0.6), (&set.tasks[2], 0.4)],
            target_task: Some(t),
            beta1: 1.0,
            beta2: 0.5,
            lambda_theta: 0.2,
            l2_theta: 1e-3,
        };
        let (_, g) = weighted_objective(&theta, &spec).unwrap();
        let f = |v: &[f64]| weighted_objective(&MetaParams::from_flat(6, v).unwrap(), &spec).unwrap().0;
        prop_assert!(grad_check(f, &theta.to_flat(), &g).unwrap() < 1e-4);
    }

    #[test]
    fn adaptation_traces_are_well_formed_and_deterministic(seed in any::<u64>(), steps in 0usize..6) {
        let train = Arc::new(tasks(seed, 12, 3, 2, 8));
        let test = sample_multimodal_tasks(&small_gen(seed, 3, 2, 8), 2, Split::Test).unwrap();
        let cfg = TasmlConfig { steps, seed, ..tiny_config() };
        let sys = meta_train(train, &cfg).unwrap();
        let params = AdaptParams::from_config(&cfg, 12);
        let tr = adapt(&sys, &test.tasks[0], &params, 0).unwrap();
        prop_assert_eq!(tr.records.len(), steps + 1);
        prop_assert!(tr.records.iter().enumerate().all(|(i, r)| r.step == i));
        prop_assert!(tr.records.iter().filter_map(|r| r.accuracy).all(|a| (0.0..=1.0).contains(&a)));
        let again = adapt(&sys, &test.tasks[0], &params, 0).unwrap();
        prop_assert_eq!(&again.records, &tr.records);
        prop_assert_eq!(&again.final_theta, &tr.final_theta);
    }

    #[test]
    fn query_labels_never_affect_adaptation(seed in any::<u64>()) {
        let train = Arc::new(tasks(seed, 10, 3, 2, 8));
        let test = sample_multimodal_tasks(&small_gen(seed, 3, 2, 8), 1, Split::Test).unwrap();
        let cfg = TasmlConfig { seed, trace_eval: false, ..tiny_config() };
        let sys = meta_train(train, &cfg).unwrap();
        let params = AdaptParams::from_config(&cfg, 10);
        let mut scrambled = test.tasks[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for q in &mut scrambled.query {
            q.y = rng.gen_range(0..3);
            q.x.iter_mut().for_each(|v| *v = normal(&mut rng));
        }
        let a = adapt(&sys, &test.tasks[0], &params, 0).unwrap();
        let b = adapt(&sys, &scrambled, &params, 0).unwrap();
        prop_assert_eq!(&a.final_theta, &b.final_theta);
        let objectives = |t: &tasml::driver::AdaptationTrace| t.records.iter().map(|r| r.objective.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(objectives(&a), objectives(&b));
    }

    #[test]
    fn zero_steps_evaluates_the_unconditional_initialization(seed in any::<u64>()) {
        let train = Arc::new(tasks(seed, 10, 3, 2, 8));
        let test = sample_multimodal_tasks(&small_gen(seed, 3, 2, 8), 3, Split::Test).unwrap();
        let cfg = TasmlConfig { steps: 0, seed, ..tiny_config() };
        let sys = meta_train(train, &cfg).unwrap();
        let s = evaluate(&sys, &test, &AdaptParams::from_config(&cfg, 10)).unwrap();
        let direct: Vec<f64> = test
            .tasks
            .iter()
            .map(|t| task_loss(&sys.theta0, &t.support, &t.query, t.ways, cfg.lambda_theta).unwrap().accuracy)
            .collect();
        prop_assert_eq!(s.mean_accuracy, tasml::driver::mean_std(&direct).0);
        prop_assert_eq!(s.mean_accuracy, s.mean_initial_accuracy);
    }
}

#[test]
fn every_mode_appears_with_fifty_tasks_per_mode() {
    for n_modes in 1..=4 {
        for seed in 0..5 {
            let cfg = GeneratorConfig {
                n_modes,
                d: 4 * n_modes,
                informative_dims: 2,
                ways: 2,
                shots: 1,
                query_per_class: 1,
                classes_per_split: 4,
                seed,
                ..GeneratorConfig::default()
            };
            let set = sample_multimodal_tasks(&cfg, 50 * n_modes, Split::Train).unwrap();
            let modes: BTreeSet<usize> = set.tasks.iter().filter_map(|t| t.mode_id).collect();
            assert_eq!(modes, (0..n_modes).collect());
        }
    }
}
