//! Diagnostics and experiments over synthetic problems.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{synth_instance, SynthInstance, SynthSpec};
use crate::adapters::WeightScope;
use crate::error::{Error, Result};
use crate::graph::{capture_features, ModelInstance};
use crate::merging::{merged_weight, site_weights, MergeConfig, Method, WeightMode};
use crate::numerics::Matrix;

/// `‖X̃ − X‖_F` per task and site, with `X̃` captured on `merged` and `X` on
/// each task's own model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyCurve {
    pub sites: Vec<String>,
    /// `[task][site]`
    pub values: Vec<Vec<f64>>,
}

pub fn discrepancy_curve(
    task_models: &[ModelInstance],
    merged: &ModelInstance,
    task_inputs: &[Matrix],
) -> Result<DiscrepancyCurve> {
    if task_models.len() != task_inputs.len() {
        return Err(Error::Config("one input batch per task model is required".into()));
    }
    if let Some(n) = task_models.iter().position(|t| t.graph() != merged.graph()) {
        return Err(Error::Config(format!("task {n} uses a different graph")));
    }
    let xtilde = capture_features(merged, task_inputs)?;
    let values = task_models
        .par_iter()
        .zip(task_inputs)
        .enumerate()
        .map(|(n, (model, input))| {
            let x = capture_features(model, std::slice::from_ref(input))?;
            (0..merged.graph().site_count())
                .map(|j| xtilde.get(n, j).distance(x.get(0, j)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscrepancyCurve {
        sites: merged.graph().sites().iter().map(|s| s.label.clone()).collect(),
        values,
    })
}

/// Held-out quality of a merged model for every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutScore {
    /// Per task, `√Σⱼ‖WᵢⱼᵀXᵢⱼ − WⱼᵀX̃ᵢⱼ‖² / √Σⱼ‖WᵢⱼᵀXᵢⱼ‖²` over sites.
    pub alignment_error: Vec<f64>,
    /// Per task, `‖fᵢ(x) − f_M(x)‖_F / ‖fᵢ(x)‖_F` on the model outputs.
    pub output_error: Vec<f64>,
}

impl HeldoutScore {
    pub fn mean_alignment_error(&self) -> f64 {
        self.alignment_error.iter().sum::<f64>() / self.alignment_error.len() as f64
    }
}

pub fn heldout_score(
    task_models: &[ModelInstance],
    merged: &ModelInstance,
    holdout: &[Matrix],
    scope: WeightScope,
) -> Result<HeldoutScore> {
    let weights = site_weights(task_models, scope)?;
    let merged_w = (0..merged.graph().site_count())
        .map(|j| merged_weight(merged, j, scope))
        .collect::<Result<Vec<_>>>()?;
    let scores = task_models
        .par_iter()
        .zip(holdout)
        .enumerate()
        .map(|(n, (model, input))| {
            let task_trace = model.trace(input)?;
            let merged_trace = merged.trace(input)?;
            let mut err = 0.0;
            let mut norm = 0.0;
            for (j, mw) in merged_w.iter().enumerate() {
                let target = weights[n][j].tr_matmul(task_trace.site_input(j))?;
                let got = mw.tr_matmul(merged_trace.site_input(j))?;
                err += target.sub(&got)?.frobenius_norm_sq();
                norm += target.frobenius_norm_sq();
            }
            let out_err = task_trace.output().distance(merged_trace.output())?;
            let out_norm = task_trace.output().frobenius_norm();
            Ok((
                (err / norm.max(1e-300)).sqrt(),
                out_err / out_norm.max(1e-300),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeldoutScore {
        alignment_error: scores.iter().map(|s| s.0).collect(),
        output_error: scores.iter().map(|s| s.1).collect(),
    })
}

/// One method's result on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    pub heldout: HeldoutScore,
    /// Objective of the final merged model on merge-time samples, with
    /// features captured on that model.
    pub objective: f64,
    /// The same objective after the first solve.
    pub first_objective: f64,
    pub converged_at: Option<usize>,
}

/// Everything a merge and its held-out evaluation need.
#[derive(Debug, Clone)]
pub struct MergeProblem {
    pub base: ModelInstance,
    pub tasks: Vec<ModelInstance>,
    pub inputs: Vec<Matrix>,
    pub holdout: Vec<Matrix>,
}

impl SynthInstance {
    pub fn problem(&self) -> Result<MergeProblem> {
        Ok(MergeProblem {
            base: self.base.clone(),
            tasks: self.task_models()?,
            inputs: self.inputs.clone(),
            holdout: self.holdout.clone(),
        })
    }
}

/// Scores of every method on one problem.
pub fn score_methods(problem: &MergeProblem, methods: &[Method], base: &MergeConfig) -> Result<Vec<MethodScore>> {
    let tasks = &problem.tasks;
    methods
        .iter()
        .map(|&method| {
            let config = MergeConfig {
                method,
                ..base.clone()
            };
            let outcome = crate::merging::merge(tasks, &problem.base, &problem.inputs, &config)
                .map_err(|e| e.context(format!("{method:?} merge")))?;
            let heldout = heldout_score(tasks, &outcome.merged, &problem.holdout, config.weight_scope)?;
            let report = outcome.report;
            Ok(MethodScore {
                method,
                heldout,
                objective: report.final_objective(),
                first_objective: report.iterations[0].total_objective(),
                converged_at: report.converged_at,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub scores: Vec<MethodScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_alignment_error: f64,
    pub mean_output_error: f64,
    pub mean_objective: f64,
    /// Seeds on which this method had the lowest mean held-out alignment
    /// error (ties within 1e-12 relative count for every tied method).
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub methods: Vec<Method>,
    pub per_seed: Vec<SeedComparison>,
    pub summary: Vec<MethodSummary>,
}

impl ComparisonResult {
    pub fn score(&self, seed_index: usize, method: Method) -> &MethodScore {
        self.per_seed[seed_index]
            .scores
            .iter()
            .find(|s| s.method == method)
            .expect("method was compared")
    }

    /// Seeds on which `a`'s mean held-out alignment error is below `b`'s.
    pub fn pairwise_wins(&self, a: Method, b: Method) -> usize {
        (0..self.per_seed.len())
            .filter(|&i| {
                self.score(i, a).heldout.mean_alignment_error() < self.score(i, b).heldout.mean_alignment_error()
            })
            .count()
    }
}

/// Runs every method on the instance of each seed and aggregates.
pub fn compare_methods(spec: &SynthSpec, methods: &[Method], seeds: &[u64], base: &MergeConfig) -> Result<ComparisonResult> {
    if methods.len() < 2 {
        return Err(Error::Config("comparison needs at least two methods".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let problem = synth_instance(&spec.with_seed(seed))?.problem()?;
            let scores = score_methods(&problem, methods, base).map_err(|e| e.context(format!("seed {seed}")))?;
            Ok(SeedComparison { seed, scores })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut wins = vec![0usize; methods.len()];
    for s in &per_seed {
        let errs: Vec<f64> = s.scores.iter().map(|m| m.heldout.mean_alignment_error()).collect();
        let best = errs.iter().copied().fold(f64::INFINITY, f64::min);
        for (k, e) in errs.iter().enumerate() {
            if *e <= best * (1.0 + 1e-12) {
                wins[k] += 1;
            }
        }
    }
    let count = per_seed.len() as f64;
    let summary = methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let mean = |f: &dyn Fn(&MethodScore) -> f64| per_seed.iter().map(|s| f(&s.scores[k])).sum::<f64>() / count;
            MethodSummary {
                method,
                mean_alignment_error: mean(&|m| m.heldout.mean_alignment_error()),
                mean_output_error: mean(&|m| {
                    m.heldout.output_error.iter().sum::<f64>() / m.heldout.output_error.len() as f64
                }),
                mean_objective: mean(&|m| m.objective),
                wins: wins[k],
            }
        })
        .collect();
    Ok(ComparisonResult {
        methods: methods.to_vec(),
        per_seed,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Grid value `g` allows `g` refinements after the first solve.
    MaxIterations,
    /// Grid values are the regularization coefficient.
    Alpha,
    /// Nonzero grid values select adaptive weights, zero selects uniform.
    AdaptiveWeights,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max_iterations" | "max-iterations" => Ok(AblationAxis::MaxIterations),
            "alpha" | "alpha_on_off" => Ok(AblationAxis::Alpha),
            "adaptive" | "adaptive_weights" | "adaptive_on_off" => Ok(AblationAxis::AdaptiveWeights),
            other => Err(Error::Config(format!("unknown ablation axis '{other}'"))),
        }
    }
}

impl AblationAxis {
    pub fn apply(self, config: &MergeConfig, value: f64) -> Result<MergeConfig> {
        let mut c = config.clone();
        c.method = Method::Iteris;
        match self {
            AblationAxis::MaxIterations => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("iteration grid values must be whole numbers, got {value}")));
                }
                c.max_iterations = value as usize + 1;
            }
            AblationAxis::Alpha => c.alpha = value,
            AblationAxis::AdaptiveWeights => {
                c.weight_mode = if value != 0.0 {
                    WeightMode::Adaptive
                } else {
                    WeightMode::Uniform
                }
            }
        }
        Ok(c)
    }
}

/// One grid point. A failed merge is recorded rather than aborting the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<MethodScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub error_kind: Option<crate::error::ErrorKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub points: Vec<AblationPoint>,
}

/// Sweeps one configuration axis over an existing problem.
pub fn ablation_sweep_problem(
    problem: &MergeProblem,
    axis: AblationAxis,
    grid: &[f64],
    base: &MergeConfig,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let points = grid
        .par_iter()
        .map(|&value| {
            let config = axis.apply(base, value)?;
            Ok(match score_methods(problem, &[Method::Iteris], &config) {
                Ok(mut s) => AblationPoint {
                    value,
                    score: s.pop(),
                    error: None,
                    error_kind: None,
                },
                Err(e) => AblationPoint {
                    value,
                    score: None,
                    error: Some(e.to_string()),
                    error_kind: Some(e.kind()),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { axis, points })
}

pub fn ablation_sweep(spec: &SynthSpec, axis: AblationAxis, grid: &[f64], base: &MergeConfig) -> Result<AblationTable> {
    ablation_sweep_problem(&synth_instance(spec)?.problem()?, axis, grid, base)
}
