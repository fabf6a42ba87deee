use std::path::Path;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use loramerge_core::adapters::{refactor_low_rank, LoraAdapter};
use loramerge_core::graph::builders::mlp_chain;
use loramerge_core::graph::{capture_features, iteration_bound, Activation};
use loramerge_core::harness::oracles::{jacobi_eigenvalues, naive_matmul, naive_mlp, naive_transpose};
use loramerge_core::harness::synth::{random_adapters, random_base};
use loramerge_core::harness::{normal_matrix, random_dag, random_site_problem, DagShape};
use loramerge_core::io::{DType, TensorBundle};
use loramerge_core::merging::site::{adaptive_weight, iteris_normal_equations, iteris_solve_site, regmean_merge};
use loramerge_core::numerics::{frobenius_norm, gram, regularize_gram, solve_symmetric};
use loramerge_core::{merge, Matrix, MergeConfig, ModelInstance, SiteId, WeightMode};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.distance(b).unwrap() / b.frobenius_norm().max(1e-300)
}

fn refs(v: &[Matrix]) -> Vec<&Matrix> {
    v.iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_is_positive_semidefinite(seed: u64, d in 1usize..10, s in 1usize..16) {
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, d, s, 1.0);
        let g = gram(&x, &x).unwrap();
        let v = normal_matrix(&mut r, d, 1, 1.0);
        // vᵀGv = ‖Xᵀv‖²
        let quad = naive_matmul(&naive_transpose(&v), &naive_matmul(&g, &v))[(0, 0)];
        prop_assert!(quad >= -1e-12 * g.frobenius_norm());
        for e in jacobi_eigenvalues(&g) {
            prop_assert!(e >= -1e-10 * g.frobenius_norm().max(1.0));
        }
    }

    #[test]
    fn regularized_gram_is_positive_definite(seed: u64, d in 2usize..12, s in 1usize..6, log_alpha in -7.0f64..0.0) {
        // s < d leaves the plain Gram matrix singular
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, d, s, 1.0);
        let g = regularize_gram(&gram(&x, &x).unwrap(), 10f64.powf(log_alpha)).unwrap();
        for e in jacobi_eigenvalues(&g) {
            prop_assert!(e > 0.0);
        }
        let b = normal_matrix(&mut r, d, 3, 1.0);
        let sol = solve_symmetric(&g, &b).unwrap();
        prop_assert!(rel(&g.matmul(&sol).unwrap(), &b) < 1e-6);
    }

    #[test]
    fn solve_reconstructs_rhs(seed: u64, d in 1usize..=64, k in 1usize..4) {
        let mut r = rng(seed);
        let m = normal_matrix(&mut r, d, d, 1.0);
        let mut a = gram(&m, &m).unwrap();
        for i in 0..d {
            a[(i, i)] += d as f64;
        }
        let b = normal_matrix(&mut r, d, k, 1.0);
        let x = solve_symmetric(&a, &b).unwrap();
        prop_assert!(rel(&naive_matmul(&a, &x), &b) < 1e-8);
    }

    #[test]
    fn frobenius_norm_is_homogeneous(seed: u64, rows in 1usize..8, cols in 1usize..8, c in -1e3f64..1e3) {
        let m = normal_matrix(&mut rng(seed), rows, cols, 1.0);
        let lhs = frobenius_norm(&m.scale(c));
        let rhs = c.abs() * frobenius_norm(&m);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
    }

    #[test]
    fn delta_is_linear_in_each_factor(seed: u64, d_in in 1usize..7, d_out in 1usize..7, c in -10.0f64..10.0) {
        let mut r = rng(seed);
        let rank = 1 + (seed as usize) % d_in.min(d_out);
        let site = SiteId::new(0, "s");
        let down = normal_matrix(&mut r, rank, d_in, 1.0);
        let up = normal_matrix(&mut r, d_out, rank, 1.0);
        let a = LoraAdapter::new(site.clone(), down.clone(), up.clone(), 0.5).unwrap();
        let by_down = LoraAdapter::new(site.clone(), down.scale(c), up.clone(), 0.5).unwrap();
        let by_up = LoraAdapter::new(site, down, up.scale(c), 0.5).unwrap();
        let expect = a.delta().scale(c);
        let tol = 1e-12 * (1.0 + expect.frobenius_norm());
        prop_assert!(by_down.delta().distance(&expect).unwrap() <= tol);
        prop_assert!(by_up.delta().distance(&expect).unwrap() <= tol);
    }

    #[test]
    fn refactor_error_never_grows_with_rank(seed: u64, d_in in 1usize..8, d_out in 1usize..8) {
        let delta = normal_matrix(&mut rng(seed), d_in, d_out, 1.0);
        let site = SiteId::new(0, "s");
        let mut last = f64::INFINITY;
        for r in 1..=d_in.min(d_out) {
            let err = refactor_low_rank(site.clone(), &delta, r).unwrap().delta().distance(&delta).unwrap();
            prop_assert!(err <= last + 1e-10);
            last = err;
        }
        prop_assert!(last <= 1e-9 * delta.frobenius_norm());
    }

    #[test]
    fn bundle_round_trip_is_byte_identical(
        seed: u64,
        shapes in prop::collection::vec((1usize..6, 1usize..6, any::<bool>()), 1..5),
    ) {
        let mut r = rng(seed);
        let mut b = TensorBundle::new();
        for (i, &(rows, cols, f32)) in shapes.iter().enumerate() {
            let m = normal_matrix(&mut r, rows, cols, 1.0);
            b.insert_as(format!("t{i}"), m, if f32 { DType::F32 } else { DType::F64 });
        }
        b.set_metadata("seed", serde_json::json!(seed));
        let bytes = b.to_bytes();
        let back = TensorBundle::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back.to_bytes(), &bytes);
        for (i, &(_, _, f32)) in shapes.iter().enumerate() {
            let name = format!("t{i}");
            let (orig, got) = (b.get(&name).unwrap(), back.get(&name).unwrap());
            for (x, y) in orig.data().iter().zip(got.data()) {
                if f32 {
                    prop_assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
                } else {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn solve_satisfies_normal_equations(
        seed: u64,
        d_in in 1usize..24,
        d_out in 1usize..8,
        samples in prop::collection::vec(8usize..64, 1..5),
        log_alpha in -8.0f64..-2.0,
    ) {
        let p = random_site_problem(&mut rng(seed), d_in, d_out, &samples, false);
        let alpha = 10f64.powf(log_alpha);
        let w = iteris_solve_site(&p.weights(), &p.x(), &p.xtilde(), &p.lambdas, alpha).unwrap();
        let (lhs, rhs) = iteris_normal_equations(&p.weights(), &p.x(), &p.xtilde(), &p.lambdas, alpha).unwrap();
        prop_assert!(rel(&naive_matmul(&lhs, &w), &rhs) < 1e-8);
    }

    #[test]
    fn iteris_with_exact_features_is_regmean(
        seed: u64,
        d_in in 1usize..12,
        d_out in 1usize..6,
        tasks in 1usize..4,
    ) {
        // S ≥ d keeps the unregularized Gram sum invertible
        let samples = vec![d_in + 4; tasks];
        let p = random_site_problem(&mut rng(seed), d_in, d_out, &samples, true);
        let uniform = vec![1.0; tasks];
        let a = iteris_solve_site(&p.weights(), &p.x(), &p.xtilde(), &uniform, 0.0).unwrap();
        let b = regmean_merge(&p.weights(), &p.x(), 1.0).unwrap();
        prop_assert!(rel(&a, &b) < 1e-10);
    }

    #[test]
    fn adaptive_solution_ignores_task_input_scale(
        seed: u64,
        d_in in 1usize..10,
        d_out in 1usize..5,
        tasks in 2usize..4,
        log_c in -2.0f64..2.0,
        alpha in prop::sample::select(vec![0.0, 1e-6, 1e-4, 1e-2]),
    ) {
        let samples = vec![d_in + 3; tasks];
        let p = random_site_problem(&mut rng(seed), d_in, d_out, &samples, true);
        let solve = |x: &[Matrix]| {
            let l: Vec<f64> = p.weights.iter().zip(x).map(|(w, x)| adaptive_weight(w, x).unwrap()).collect();
            iteris_solve_site(&p.weights(), &refs(x), &refs(x), &l, alpha).unwrap()
        };
        let mut scaled = p.x.clone();
        let k = (seed as usize) % tasks;
        scaled[k] = scaled[k].scale(10f64.powf(log_c));
        prop_assert!(rel(&solve(&scaled), &solve(&p.x)) < 1e-9);
    }

    #[test]
    fn forward_and_capture_are_deterministic(seed: u64, depth in 1usize..4, width in 1usize..6) {
        let mut r = rng(seed);
        let graph = Arc::new(mlp_chain(depth, width, Activation::Gelu));
        let base = random_base(Arc::clone(&graph), &mut r).unwrap();
        let model = random_adapters(&graph, 0, 1, 0.5, &mut r).unwrap().instantiate(&base).unwrap();
        let x = normal_matrix(&mut r, width, 7, 1.0);
        let a = model.trace(&x).unwrap().into_parts();
        let b = model.trace(&x).unwrap().into_parts();
        prop_assert_eq!(a, b);
        let fa = capture_features(&model, std::slice::from_ref(&x)).unwrap();
        let fb = capture_features(&model, std::slice::from_ref(&x)).unwrap();
        for j in 0..depth {
            prop_assert_eq!(fa.get(0, j), fb.get(0, j));
        }
    }

    #[test]
    fn captured_features_reproduce_each_layer(seed: u64, depth in 1usize..5, width in 1usize..6) {
        let mut r = rng(seed);
        let graph = Arc::new(mlp_chain(depth, width, Activation::Tanh));
        let base = random_base(Arc::clone(&graph), &mut r).unwrap();
        let model = random_adapters(&graph, 0, 1, 0.5, &mut r).unwrap().instantiate(&base).unwrap();
        let x = normal_matrix(&mut r, width, 5, 1.0);
        let trace = model.trace(&x).unwrap();
        let weights: Vec<Matrix> = (0..depth)
            .map(|j| model.site_base(j).add(model.delta(j)).unwrap())
            .collect();
        let biases: Vec<&Matrix> = (0..depth).map(|l| &model.params()[&format!("fc{l}.bias")]).collect();
        for j in 0..depth {
            // layer j evaluated alone on its captured input gives the next site's input
            let layer = [(&weights[j], biases[j], Activation::Tanh)];
            let (out, _) = naive_mlp(&layer, trace.site_input(j));
            let next = if j + 1 < depth { trace.site_input(j + 1) } else { trace.output() };
            prop_assert!(out.distance(next).unwrap() <= 1e-12 * (1.0 + next.frobenius_norm()));
        }
    }

    #[test]
    fn adapters_are_fixed_after_bound_iterations(seed: u64, tasks in 1usize..4) {
        let mut r = rng(seed);
        let graph = Arc::new(random_dag(&mut r, DagShape::default()));
        let bound = iteration_bound(&graph).unwrap();
        let (base, models, inputs) = random_problem(&mut r, &graph, tasks);
        let config = MergeConfig {
            max_iterations: bound + 2,
            convergence_tolerance: 0.0,
            ..MergeConfig::iteris(1e-4)
        };
        let report = merge(&models, &base, &inputs, &config).unwrap().report;
        let change = report.iterations[bound + 1].max_relative_change.unwrap();
        prop_assert!(change < 1e-12, "bound {bound}: change {change:e}");
    }
}

fn random_problem(
    r: &mut ChaCha8Rng,
    graph: &Arc<loramerge_core::ModelGraph>,
    tasks: usize,
) -> (ModelInstance, Vec<ModelInstance>, Vec<Matrix>) {
    let base = random_base(Arc::clone(graph), r).unwrap();
    let d = graph.input_width();
    let models = (0..tasks)
        .map(|n| random_adapters(graph, n, 1, 0.5, r).unwrap().instantiate(&base).unwrap())
        .collect();
    let inputs = (0..tasks).map(|_| normal_matrix(r, d, 3 * d * graph.positions(), 1.0)).collect();
    (base, models, inputs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stopping_is_monotone_on_chains(seed: u64, depth in 1usize..5, tasks in 2usize..4) {
        let mut r = rng(seed);
        let graph = Arc::new(mlp_chain(depth, 5, Activation::Tanh));
        let (base, models, inputs) = random_problem(&mut r, &graph, tasks);
        let tol = 1e-9;
        let forced = MergeConfig {
            max_iterations: 12,
            convergence_tolerance: 0.0,
            ..MergeConfig::iteris(1e-4)
        };
        let report = merge(&models, &base, &inputs, &forced).unwrap().report;
        let changes: Vec<f64> = report.iterations.iter().filter_map(|it| it.max_relative_change).collect();
        let first = changes.iter().position(|&c| c < tol);
        prop_assert!(first.is_some());
        for &c in &changes[first.unwrap()..] {
            prop_assert!(c < tol);
        }
        // the default loop stops where the forced one first dropped below tolerance
        let stopping = MergeConfig { convergence_tolerance: tol, ..forced };
        let stopped = merge(&models, &base, &inputs, &stopping).unwrap().report;
        prop_assert_eq!(stopped.converged_at, Some(first.unwrap() + 1));
    }

    #[test]
    fn fixed_point_has_no_self_discrepancy(seed: u64, depth in 1usize..4, uniform: bool) {
        let mut r = rng(seed);
        let graph = Arc::new(mlp_chain(depth, 4, Activation::Gelu));
        let (base, models, inputs) = random_problem(&mut r, &graph, 2);
        let config = MergeConfig {
            weight_mode: if uniform { WeightMode::Uniform } else { WeightMode::Adaptive },
            ..MergeConfig::iteris(1e-4)
        };
        let report = merge(&models, &base, &inputs, &config).unwrap().report;
        prop_assert!(report.converged_at.is_some());
        for (j, row) in report.self_discrepancy.iter().enumerate() {
            for (n, &v) in row.iter().enumerate() {
                let scale = 1.0 + report.discrepancy[j][n];
                prop_assert!(v <= 1e-9 * scale, "site {j} task {n}: {v:e}");
            }
        }
    }
}
