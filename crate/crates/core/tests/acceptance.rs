//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Statistical thresholds (seed fractions, stability bands, the 10% sample
//! efficiency band) are harness conventions.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use loramerge_core::graph::builders::{attention_chain, encoder_decoder, AdaptedProjections};
use loramerge_core::graph::{iteration_bound, task_features};
use loramerge_core::harness::oracles::{descent_minimizer, naive_matmul, naive_objective, naive_sum_sq};
use loramerge_core::harness::synth::{random_adapters, random_base};
use loramerge_core::harness::{
    compare_methods, normal_matrix, random_dag, random_site_problem, score_methods, synth_instance, AdapterMode,
    Architecture, DagShape, InputSampler, SynthSpec, TaskDistribution,
};
use loramerge_core::io::{
    adapters_from_bundle, adapters_to_bundle, base_from_bundle, base_to_bundle, merged_from_bundle, merged_to_bundle,
    DType, TensorBundle,
};
use loramerge_core::merging::site::{
    adaptive_weight, balance_shares, iteris_normal_equations, iteris_solve_site, linear_merge, regmean_merge,
};
use loramerge_core::{merge, Matrix, MergeConfig, Method};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.distance(b).unwrap() / b.frobenius_norm().max(1e-300)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Normal-equation residual and agreement with a descent oracle.
fn closed_form_correctness() -> Verdict {
    let start = Instant::now();
    let results: Vec<(f64, f64)> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(1_000 + i);
            let d_in = r.random_range(1..=64usize);
            let d_out = r.random_range(1..=4usize);
            let tasks = r.random_range(1..=5usize);
            let mut samples: Vec<usize> = (0..tasks).map(|_| r.random_range(8..=256usize)).collect();
            // the unregularized oracle comparison needs an invertible Gram sum
            while samples.iter().sum::<usize>() <= d_in {
                samples[0] = r.random_range(8..=256usize);
                samples.push(r.random_range(8..=256usize).min(256));
                samples.truncate(5);
            }
            let alpha = 10f64.powf(r.random_range(-8.0..-2.0));
            let p = random_site_problem(&mut r, d_in, d_out, &samples, false);
            let (w, x, xt) = (p.weights(), p.x(), p.xtilde());
            let sol = iteris_solve_site(&w, &x, &xt, &p.lambdas, alpha).unwrap();
            let (lhs, rhs) = iteris_normal_equations(&w, &x, &xt, &p.lambdas, alpha).unwrap();
            let residual = rel(&naive_matmul(&lhs, &sol), &rhs);

            let exact = iteris_solve_site(&w, &x, &x, &p.lambdas, 0.0).unwrap();
            let oracle = descent_minimizer(&w, &x, &x, &p.lambdas, 0.0, 1e-12);
            let f = naive_objective(&exact, &w, &x, &x, &p.lambdas);
            let g = naive_objective(&oracle, &w, &x, &x, &p.lambdas);
            // relative to the objective of the zero merge
            let zero = Matrix::zeros(d_in, d_out);
            let scale = naive_objective(&zero, &w, &x, &x, &p.lambdas);
            (residual, (f - g) / scale)
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let worst_res = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_gap = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    verdict(
        worst_res < 1e-8 && worst_gap < 1e-6 && secs < 60.0,
        format!("1000 instances, max residual {worst_res:.2e}, max objective gap {worst_gap:.2e}, {secs:.1}s"),
    )
}

fn reductions() -> Verdict {
    let mut worst = 0.0f64;
    for i in 0..200u64 {
        let mut r = rng(2_000 + i);
        let d_in = r.random_range(1..=24usize);
        let tasks = r.random_range(1..=5usize);
        let samples: Vec<usize> = (0..tasks).map(|_| d_in + r.random_range(1..40usize)).collect();
        let d_out = r.random_range(1..=6usize);
        let p = random_site_problem(&mut r, d_in, d_out, &samples, true);
        let uniform = vec![1.0; tasks];
        let a = iteris_solve_site(&p.weights(), &p.x(), &p.x(), &uniform, 0.0).unwrap();
        let b = regmean_merge(&p.weights(), &p.x(), 1.0).unwrap();
        worst = worst.max(rel(&a, &b));
    }

    // isotropic features: the Gram-based merge approaches the plain average
    let (d, d_out, tasks, seeds) = (8usize, 4usize, 3usize, 10u64);
    let sizes = [100usize, 1_000, 10_000];
    let mut gaps = vec![0.0; sizes.len()];
    for seed in 0..seeds {
        let mut r = rng(2_500 + seed);
        let weights: Vec<Matrix> = (0..tasks)
            .map(|_| normal_matrix(&mut r, d, d_out, 1.0 / (d as f64).sqrt()))
            .collect();
        let w: Vec<&Matrix> = weights.iter().collect();
        let average = linear_merge(&w, &vec![1.0 / tasks as f64; tasks]).unwrap();
        let sampler = InputSampler::isotropic(d);
        for (k, &s) in sizes.iter().enumerate() {
            let xs: Vec<Matrix> = (0..tasks).map(|_| sampler.sample(&mut r, s)).collect();
            let x: Vec<&Matrix> = xs.iter().collect();
            gaps[k] += regmean_merge(&w, &x, 1.0).unwrap().distance(&average).unwrap() / seeds as f64;
        }
    }
    let decreasing = gaps.windows(2).all(|g| g[1] < g[0]);
    verdict(
        worst < 1e-10 && gaps[2] < 5e-2 && decreasing,
        format!(
            "regmean reduction max {worst:.2e}; isotropic gap to average {:.3e} / {:.3e} / {:.3e} at S = 1e2 / 1e3 / 1e4",
            gaps[0], gaps[1], gaps[2]
        ),
    )
}

fn self_recovery() -> Verdict {
    // layer-normalized stacks feed centered, rank-deficient inputs to later sites
    let architectures = [(3, 6), (2, 12)].map(|(depth, width)| Architecture::MlpChain {
        depth,
        width,
        activation: loramerge_core::graph::Activation::Tanh,
    });
    let mut worst = 0.0f64;
    for (a, arch) in architectures.iter().enumerate() {
        for seed in 0..5u64 {
            let spec = SynthSpec {
                architecture: arch.clone(),
                samples: 200,
                ..SynthSpec::mlp(1, 1, 1, 2, 3_000 + 10 * a as u64 + seed)
            };
            let inst = synth_instance(&spec).unwrap();
            let task = &inst.task_models().unwrap()[0];
            for method in [Method::Linear, Method::Regmean, Method::Iteris] {
                let config = MergeConfig {
                    alpha: 0.0,
                    ..MergeConfig::with_method(method)
                };
                let merged = inst.merge(&config).unwrap().merged;
                for j in 0..task.graph().site_count() {
                    worst = worst.max(rel(merged.delta(j), task.delta(j)));
                }
            }
        }
    }
    verdict(worst < 1e-10, format!("max relative deviation {worst:.2e} over 30 single-task merges"))
}

fn convergence_bound() -> Verdict {
    let results: Vec<(usize, f64)> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(4_000 + i);
            let graph = Arc::new(random_dag(&mut r, DagShape::default()));
            let bound = iteration_bound(&graph).unwrap();
            let base = random_base(Arc::clone(&graph), &mut r).unwrap();
            let tasks = r.random_range(2..=3usize);
            let models: Vec<_> = (0..tasks)
                .map(|n| random_adapters(&graph, n, 2, 0.5, &mut r).unwrap().instantiate(&base).unwrap())
                .collect();
            let d = graph.input_width();
            let inputs: Vec<Matrix> = (0..tasks).map(|_| normal_matrix(&mut r, d, 4 * d, 1.0)).collect();
            let config = MergeConfig {
                max_iterations: bound + 2,
                convergence_tolerance: 0.0,
                ..MergeConfig::iteris(1e-4)
            };
            let report = merge(&models, &base, &inputs, &config).unwrap().report;
            (bound, report.iterations[bound + 1].max_relative_change.unwrap())
        })
        .collect();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let deepest = results.iter().map(|r| r.0).max().unwrap();
    let encdec = iteration_bound(&encoder_decoder(1, 8, 2, 4)).unwrap();
    let chains: Vec<(usize, usize)> = (1..=6)
        .map(|n| (n, iteration_bound(&attention_chain(n, 8, 2, 4, AdaptedProjections::QKV)).unwrap()))
        .collect();
    let chains_ok = chains.iter().all(|&(n, b)| b == n - 1);
    verdict(
        worst < 1e-12 && encdec == 2 && chains_ok,
        format!(
            "100 DAGs (bounds up to {deepest}), max change after bound {worst:.2e}; encoder-decoder(1) bound {encdec}; attention chains {}",
            if chains_ok { "N - 1 for N = 1..6" } else { "MISMATCH" }
        ),
    )
}

fn regularization_necessity() -> Verdict {
    // two tasks of d/4 samples each pool to S = d/2 < d
    let width = 16;
    let spec = |seed| SynthSpec {
        samples: width / 4,
        holdout_samples: 200,
        ..SynthSpec::mlp(2, width, 2, 2, 5_000 + seed)
    };
    let mut singular = 0;
    let mut errors = [Vec::new(), Vec::new()];
    for seed in 0..20u64 {
        let problem = synth_instance(&spec(seed)).unwrap().problem().unwrap();
        if let Err(e) = score_methods(&problem, &[Method::Iteris], &MergeConfig::iteris(0.0)) {
            if e.kind() == loramerge_core::ErrorKind::Singular {
                singular += 1;
            }
        }
        for (k, alpha) in [1e-7, 1e-4].into_iter().enumerate() {
            if let Ok(s) = score_methods(&problem, &[Method::Iteris], &MergeConfig::iteris(alpha)) {
                errors[k].push(s[0].heldout.mean_alignment_error());
            }
        }
    }
    // stable: every seed finite and no seed beyond 10× the median
    let stable = |e: &Vec<f64>| {
        e.len() == 20 && e.iter().all(|v| v.is_finite()) && e.iter().cloned().fold(0.0, f64::max) <= 10.0 * median(e.clone())
    };
    let summary = |e: &Vec<f64>| {
        format!(
            "{} ok, median {:.3}, max {:.3}",
            e.len(),
            median(e.clone()),
            e.iter().cloned().fold(0.0, f64::max)
        )
    };
    verdict(
        singular == 20 && stable(&errors[0]) && stable(&errors[1]),
        format!(
            "alpha 0 singular on {singular}/20; alpha 1e-7: {}; alpha 1e-4: {}",
            summary(&errors[0]),
            summary(&errors[1])
        ),
    )
}

fn adaptive_balance() -> Verdict {
    let spec = |seed| {
        let mut s = SynthSpec::mlp(3, 8, 2, 2, 6_000 + seed);
        s.distribution = TaskDistribution::Anisotropic { decay: 2.0, shift: 0.5 };
        s
    };
    let mut worst_share = 0.0f64;
    let mut worst_invariance = 0.0f64;
    let mut uniform_moved = 0;
    for seed in 0..50u64 {
        let inst = synth_instance(&spec(seed)).unwrap();
        let tasks = inst.task_models().unwrap();
        let x = task_features(&tasks, &inst.inputs).unwrap();
        let mut scaled = x.clone();
        scaled.scale_task(0, 100.0);
        let mut moved = false;
        for j in 0..inst.graph().site_count() {
            let w: Vec<Matrix> = tasks.iter().map(|t| t.delta(j).clone()).collect();
            let wr: Vec<&Matrix> = w.iter().collect();
            let norms: Vec<f64> = w.iter().map(naive_sum_sq).collect();
            let total: f64 = norms.iter().sum();
            let adaptive = |f: &loramerge_core::graph::CapturedFeatures| -> Vec<f64> {
                w.iter().zip(f.at_site(j)).map(|(w, x)| adaptive_weight(w, x).unwrap()).collect()
            };
            let lambdas = adaptive(&x);
            let shares = balance_shares(&wr, &x.at_site(j), &lambdas).unwrap();
            for (s, n) in shares.iter().zip(&norms) {
                worst_share = worst_share.max((s - n / total).abs());
            }
            let solve = |f: &loramerge_core::graph::CapturedFeatures, l: &[f64]| {
                iteris_solve_site(&wr, &f.at_site(j), &f.at_site(j), l, 1e-4).unwrap()
            };
            worst_invariance = worst_invariance.max(rel(&solve(&scaled, &adaptive(&scaled)), &solve(&x, &lambdas)));
            let uniform = [1.0, 1.0];
            if rel(&solve(&scaled, &uniform), &solve(&x, &uniform)) > 1e-3 {
                moved = true;
            }
        }
        if moved {
            uniform_moved += 1;
        }
    }
    verdict(
        worst_share < 1e-12 && worst_invariance < 1e-9 && uniform_moved >= 45,
        format!(
            "max share deviation {worst_share:.2e}; adaptive change under x100 {worst_invariance:.2e}; uniform moved > 1e-3 on {uniform_moved}/50"
        ),
    )
}

fn method_ordering() -> Verdict {
    let mut spec = SynthSpec::mlp(3, 8, 2, 2, 0);
    spec.distribution = TaskDistribution::Anisotropic { decay: 2.0, shift: 0.5 };
    spec.adapter_mode = AdapterMode::TargetFit;
    let seeds: Vec<u64> = (7_000..7_050).collect();
    let methods = [Method::Linear, Method::Regmean, Method::Iteris];
    let result = compare_methods(&spec, &methods, &seeds, &MergeConfig::default()).unwrap();
    let improved = (0..seeds.len())
        .filter(|&i| {
            let s = result.score(i, Method::Iteris);
            s.objective <= s.first_objective
        })
        .count();
    let beats_linear = result.pairwise_wins(Method::Iteris, Method::Linear);
    let wins: Vec<String> = result
        .summary
        .iter()
        .map(|s| format!("{:?} {} (mean err {:.3})", s.method, s.wins, s.mean_alignment_error))
        .collect();
    verdict(
        improved >= 40 && beats_linear >= 45,
        format!(
            "final <= first objective on {improved}/50; IterIS beats linear on {beats_linear}/50; wins: {}",
            wins.join(", ")
        ),
    )
}

fn sample_efficiency() -> Verdict {
    let spec = |seed, samples| {
        let mut s = SynthSpec::mlp(2, 64, 3, 2, 8_000 + seed);
        s.distribution = TaskDistribution::Spiked {
            rank: 2,
            noise: 1e-2,
            shift: 0.5,
        };
        s.adapter_mode = AdapterMode::TargetFit;
        s.samples = samples;
        s.holdout_samples = 500;
        s
    };
    let within = |alpha: f64| -> usize {
        (0..20u64)
            .filter(|&seed| {
                let err = |samples| {
                    let problem = synth_instance(&spec(seed, samples)).unwrap().problem().unwrap();
                    score_methods(&problem, &[Method::Iteris], &MergeConfig::iteris(alpha))
                        .map(|s| s[0].heldout.mean_alignment_error())
                        .unwrap_or(f64::INFINITY)
                };
                let (few, many) = (err(50), err(1000));
                (few - many).abs() <= 0.1 * many
            })
            .count()
    };
    let (alpha, regularized, plain) = (1e-2, within(1e-2), within(0.0));
    verdict(
        regularized >= 16 && plain < 16,
        format!("S = 50 within 10% of S = 1000: alpha {alpha:e} on {regularized}/20, alpha 0 on {plain}/20"),
    )
}

fn io_determinism(suite_start: Instant) -> Verdict {
    let mut r = rng(9_000);
    let mut identical = true;
    for i in 0..50 {
        let mut b = TensorBundle::new();
        for t in 0..r.random_range(1..5) {
            let (rows, cols) = (r.random_range(1..9), r.random_range(1..9));
            let m = normal_matrix(&mut r, rows, cols, 1.0);
            b.insert_as(format!("t{t}"), m, if (i + t) % 2 == 0 { DType::F64 } else { DType::F32 });
        }
        let bytes = b.to_bytes();
        identical &= TensorBundle::from_bytes(&bytes, Path::new("mem")).unwrap().to_bytes() == bytes;
    }
    let inst = synth_instance(&SynthSpec::mlp(3, 6, 2, 2, 9_001)).unwrap();
    let origin = Path::new("mem");
    let graph = inst.base.shared_graph();
    let base_bytes = base_to_bundle(&inst.base).to_bytes();
    let base = base_from_bundle(Arc::clone(&graph), &TensorBundle::from_bytes(&base_bytes, origin).unwrap(), origin).unwrap();
    identical &= base_to_bundle(&base).to_bytes() == base_bytes;
    for set in &inst.adapters {
        let bytes = adapters_to_bundle(set).to_bytes();
        let back = adapters_from_bundle(&graph, &TensorBundle::from_bytes(&bytes, origin).unwrap(), set.task, origin).unwrap();
        identical &= adapters_to_bundle(&back).to_bytes() == bytes;
    }
    let run = || {
        let mut out = inst.merge(&MergeConfig::default()).unwrap();
        out.report.timings = None;
        out
    };
    let (a, b) = (run(), run());
    let merged_bytes = merged_to_bundle(&a.merged, None).unwrap().to_bytes();
    let reloaded = merged_from_bundle(&base, &TensorBundle::from_bytes(&merged_bytes, origin).unwrap(), origin).unwrap();
    identical &= merged_to_bundle(&reloaded, None).unwrap().to_bytes() == merged_bytes;
    let same_reports = a.report.to_json() == b.report.to_json();
    let secs = suite_start.elapsed().as_secs_f64();
    verdict(
        identical && same_reports && secs < 300.0,
        format!("round-trips identical: {identical}; repeated reports identical: {same_reports}; acceptance suite {secs:.1}s"),
    )
}

fn main() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("closed-form correctness", closed_form_correctness),
        ("reductions", reductions),
        ("self-recovery", self_recovery),
        ("convergence bound", convergence_bound),
        ("regularization necessity", regularization_necessity),
        ("adaptive-weight balance", adaptive_balance),
        ("method ordering", method_ordering),
        ("sample efficiency", sample_efficiency),
    ];
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        if !v.pass {
            failed += 1;
        }
        println!("criterion {n} [{tag}] {name}: {}", v.detail);
    };
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = f();
        let v = Verdict {
            detail: format!("{} ({:.1}s)", v.detail, t.elapsed().as_secs_f64()),
            ..v
        };
        report(i + 1, name, v);
    }
    report(9, "io and determinism", io_determinism(start));
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
