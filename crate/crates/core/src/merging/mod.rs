//! Merging N task adapters into one adapter per site.

pub mod site;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use site::{
    adaptive_weight, alignment_error, balance_shares, iteris_normal_equations, iteris_solve_site,
    linear_merge, objective_value, regmean_merge,
};

use crate::adapters::WeightScope;
use crate::error::{Error, Result};
use crate::graph::{capture_features, iteration_bound, task_features, CapturedFeatures, ModelInstance};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Linear,
    Regmean,
    #[default]
    Iteris,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Method::Linear),
            "regmean" => Ok(Method::Regmean),
            "iteris" => Ok(Method::Iteris),
            other => Err(Error::Config(format!("unknown merge method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Adaptive,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub method: Method,
    /// Gram regularization coefficient (IterIS only).
    pub alpha: f64,
    /// Total number of solves, including the first one.
    pub max_iterations: usize,
    pub convergence_tolerance: f64,
    pub weight_mode: WeightMode,
    pub weight_scope: WeightScope,
    pub regmean_offdiagonal_scale: f64,
    /// Per-task coefficients for linear merging; uniform when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: Method::Iteris,
            alpha: 1e-4,
            max_iterations: 20,
            convergence_tolerance: 1e-9,
            weight_mode: WeightMode::Adaptive,
            weight_scope: WeightScope::Delta,
            regmean_offdiagonal_scale: 0.1,
            linear_weights: None,
            seed: 0,
        }
    }
}

impl MergeConfig {
    pub fn iteris(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self, tasks: usize) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be a nonnegative number, got {}", self.alpha)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_tolerance.is_finite() && self.convergence_tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "convergence_tolerance must be nonnegative, got {}",
                self.convergence_tolerance
            )));
        }
        let s = self.regmean_offdiagonal_scale;
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Config(format!("regmean_offdiagonal_scale must lie in (0, 1], got {s}")));
        }
        if let Some(w) = &self.linear_weights {
            if w.len() != tasks {
                return Err(Error::Config(format!(
                    "linear_weights has {} entries for {tasks} tasks",
                    w.len()
                )));
            }
            let sum: f64 = w.iter().sum();
            if !w.iter().all(|v| v.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("linear_weights must sum to 1, got {sum}")));
            }
        }
        Ok(())
    }

    fn linear_coefficients(&self, tasks: usize) -> Vec<f64> {
        self.linear_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / tasks as f64; tasks])
    }
}

/// Diagnostics for one solve of every site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Per site, with the features the solve consumed.
    pub objective: Vec<f64>,
    /// Per site, with features re-captured on the model after installation.
    pub objective_recaptured: Vec<f64>,
    /// Largest relative change of any site's delta; absent on the first solve.
    pub max_relative_change: Option<f64>,
    /// `[site][task]`, on re-captured features.
    pub alignment_error: Vec<Vec<f64>>,
}

impl IterationRecord {
    pub fn total_objective(&self) -> f64 {
        self.objective_recaptured.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub capture_seconds: f64,
    pub solve_seconds: f64,
    pub install_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub config: MergeConfig,
    pub sites: Vec<String>,
    pub tasks: usize,
    pub iteration_bound: usize,
    pub converged_at: Option<usize>,
    /// `[site][task]`
    pub lambdas: Vec<Vec<f64>>,
    pub iterations: Vec<IterationRecord>,
    /// `[site][task]`; absent for a single task.
    pub balance_shares: Option<Vec<Vec<f64>>>,
    /// `[site][task]`: `‖X̃ − X‖_F` between merged-model and task-model features.
    pub discrepancy: Vec<Vec<f64>>,
    /// `[site][task]`: distance between the features captured on the final
    /// merged model and those its last solve consumed. Zero at a fixed point.
    pub self_discrepancy: Vec<Vec<f64>>,
    /// Wall-clock measurements; not deterministic, so omitted unless requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<PhaseTimings>,
}

impl MergeReport {
    pub fn final_iteration(&self) -> &IterationRecord {
        self.iterations.last().expect("a merge runs at least one solve")
    }

    pub fn final_objective(&self) -> f64 {
        self.final_iteration().total_objective()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub struct MergeOutcome {
    pub merged: ModelInstance,
    pub report: MergeReport,
}

/// Per-site weights of one task under `scope`.
fn task_weights(task: &ModelInstance, scope: WeightScope) -> Result<Vec<Matrix>> {
    (0..task.graph().site_count())
        .map(|j| match scope {
            WeightScope::Delta => Ok(task.delta(j).clone()),
            WeightScope::Full => task.site_base(j).add(task.delta(j)),
        })
        .collect()
}

fn to_delta(merged: Matrix, base: &ModelInstance, site: usize, scope: WeightScope) -> Result<Matrix> {
    match scope {
        WeightScope::Delta => Ok(merged),
        WeightScope::Full => merged.sub(base.site_base(site)),
    }
}

fn from_delta(delta: &Matrix, base: &ModelInstance, site: usize, scope: WeightScope) -> Result<Matrix> {
    match scope {
        WeightScope::Delta => Ok(delta.clone()),
        WeightScope::Full => base.site_base(site).add(delta),
    }
}

struct Problem<'a> {
    base: &'a ModelInstance,
    inputs: &'a [Matrix],
    scope: WeightScope,
    /// `[task][site]`
    weights: Vec<Vec<Matrix>>,
    /// Task-model features, fixed for the whole merge.
    x: CapturedFeatures,
    /// `[site][task]`
    lambdas: Vec<Vec<f64>>,
}

impl Problem<'_> {
    fn sites(&self) -> usize {
        self.x.sites().len()
    }

    fn tasks(&self) -> usize {
        self.weights.len()
    }

    fn site_weights(&self, j: usize) -> Vec<&Matrix> {
        self.weights.iter().map(|w| &w[j]).collect()
    }

    fn record(
        &self,
        iteration: usize,
        merged: &[Matrix],
        consumed: &CapturedFeatures,
        recaptured: &CapturedFeatures,
        change: Option<f64>,
    ) -> Result<IterationRecord> {
        let mut objective = Vec::new();
        let mut objective_recaptured = Vec::new();
        let mut alignment = Vec::new();
        for (j, w) in merged.iter().enumerate() {
            let ws = self.site_weights(j);
            let x = self.x.at_site(j);
            objective.push(objective_value(w, &ws, &x, &consumed.at_site(j), &self.lambdas[j])?);
            objective_recaptured.push(objective_value(w, &ws, &x, &recaptured.at_site(j), &self.lambdas[j])?);
            alignment.push(
                (0..self.tasks())
                    .map(|i| alignment_error(w, ws[i], x[i], recaptured.get(i, j)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(IterationRecord {
            iteration,
            objective,
            objective_recaptured,
            max_relative_change: change,
            alignment_error: alignment,
        })
    }
}

fn feature_distances(a: &CapturedFeatures, b: &CapturedFeatures) -> Result<Vec<Vec<f64>>> {
    (0..a.sites().len())
        .map(|j| (0..a.tasks()).map(|i| a.get(i, j).distance(b.get(i, j))).collect())
        .collect()
}

fn site_context(problem: &Problem, j: usize) -> String {
    problem.x.sites()[j].to_string()
}

/// Merges the task models' adapters with the configured method.
///
/// `tasks[n]` is the base model with task `n`'s adapters installed and
/// `task_inputs[n]` that task's merge-time samples.
pub fn merge(
    tasks: &[ModelInstance],
    base: &ModelInstance,
    task_inputs: &[Matrix],
    config: &MergeConfig,
) -> Result<MergeOutcome> {
    let started = Instant::now();
    config.validate(tasks.len())?;
    if tasks.is_empty() {
        return Err(Error::Config("nothing to merge: no tasks".into()));
    }
    if task_inputs.len() != tasks.len() {
        return Err(Error::Config(format!(
            "{} task models but {} input batches",
            tasks.len(),
            task_inputs.len()
        )));
    }
    if let Some(n) = tasks.iter().position(|t| !t.shares_base_with(base)) {
        return Err(Error::Config(format!("task {n} does not share the base model")));
    }
    let graph = base.graph();
    let bound = iteration_bound(graph)?;
    let scope = config.weight_scope;
    let f_m = base.with_deltas(base.deltas().iter().map(|d| Matrix::zeros(d.rows(), d.cols())).collect())?;

    let mut timings = PhaseTimings::default();
    let t = Instant::now();
    let x = task_features(tasks, task_inputs)?;
    timings.capture_seconds += t.elapsed().as_secs_f64();

    let weights = tasks
        .iter()
        .map(|t| task_weights(t, scope))
        .collect::<Result<Vec<_>>>()?;
    let lambdas = site_lambdas(&weights, &x, config.weight_mode)?;

    let problem = Problem {
        base,
        inputs: task_inputs,
        scope,
        weights,
        x,
        lambdas,
    };
    let (merged, iterations, converged_at, consumed, recaptured) = match config.method {
        Method::Linear | Method::Regmean => {
            let t = Instant::now();
            let merged = (0..problem.sites())
                .into_par_iter()
                .map(|j| {
                    let ws = problem.site_weights(j);
                    let w = match config.method {
                        Method::Linear => linear_merge(&ws, &config.linear_coefficients(problem.tasks())),
                        _ => regmean_merge(&ws, &problem.x.at_site(j), config.regmean_offdiagonal_scale),
                    };
                    w.map_err(|e| e.at_site(site_context(&problem, j)))
                })
                .collect::<Result<Vec<_>>>()?;
            timings.solve_seconds += t.elapsed().as_secs_f64();
            let (_, recaptured) = install(&problem, &f_m, &merged, &mut timings)?;
            let record = problem.record(0, &merged, &problem.x, &recaptured, None)?;
            (merged, vec![record], None, problem.x.clone(), recaptured)
        }
        Method::Iteris => iterate(&problem, &f_m, config, &mut timings)?,
    };

    let merged_model = f_m.with_deltas(
        merged
            .iter()
            .enumerate()
            .map(|(j, w)| to_delta(w.clone(), base, j, scope))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let balance = balance_table(&problem.weights, &problem.x, &problem.lambdas)?;
    timings.total_seconds = started.elapsed().as_secs_f64();
    let report = MergeReport {
        config: config.clone(),
        sites: graph.sites().iter().map(|s| s.label.clone()).collect(),
        tasks: problem.tasks(),
        iteration_bound: bound,
        converged_at,
        discrepancy: feature_distances(&recaptured, &problem.x)?,
        self_discrepancy: feature_distances(&recaptured, &consumed)?,
        lambdas: problem.lambdas,
        iterations,
        balance_shares: balance,
        timings: Some(timings),
    };
    Ok(MergeOutcome {
        merged: merged_model,
        report,
    })
}

/// Installs merged site weights into `f_m` and re-captures features on it.
fn install(
    problem: &Problem,
    f_m: &ModelInstance,
    merged: &[Matrix],
    timings: &mut PhaseTimings,
) -> Result<(ModelInstance, CapturedFeatures)> {
    let t = Instant::now();
    let deltas = merged
        .iter()
        .enumerate()
        .map(|(j, w)| to_delta(w.clone(), problem.base, j, problem.scope))
        .collect::<Result<Vec<_>>>()?;
    let model = f_m.with_deltas(deltas)?;
    timings.install_seconds += t.elapsed().as_secs_f64();
    let t = Instant::now();
    let features = capture_features(&model, problem.inputs)?;
    timings.capture_seconds += t.elapsed().as_secs_f64();
    Ok((model, features))
}

type IterationOutput = (
    Vec<Matrix>,
    Vec<IterationRecord>,
    Option<usize>,
    CapturedFeatures,
    CapturedFeatures,
);

fn iterate(
    problem: &Problem,
    f_m: &ModelInstance,
    config: &MergeConfig,
    timings: &mut PhaseTimings,
) -> Result<IterationOutput> {
    let mut xtilde = problem.x.clone();
    let mut records = Vec::new();
    let mut previous: Option<Vec<Matrix>> = None;
    let mut converged_at = None;
    let mut last = None;
    for k in 0..config.max_iterations {
        let t = Instant::now();
        let merged = (0..problem.sites())
            .into_par_iter()
            .map(|j| {
                iteris_solve_site(
                    &problem.site_weights(j),
                    &problem.x.at_site(j),
                    &xtilde.at_site(j),
                    &problem.lambdas[j],
                    config.alpha,
                )
                .map_err(|e| e.at_site(site_context(problem, j)).context(format!("iteration {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        timings.solve_seconds += t.elapsed().as_secs_f64();

        let change = match &previous {
            None => None,
            Some(prev) => {
                let mut worst = 0.0f64;
                for (j, (new, old)) in merged.iter().zip(prev).enumerate() {
                    let new_d = to_delta(new.clone(), problem.base, j, problem.scope)?;
                    let old_d = to_delta(old.clone(), problem.base, j, problem.scope)?;
                    let rel = new_d.distance(&old_d)? / old_d.frobenius_norm().max(1e-12);
                    worst = worst.max(rel);
                }
                Some(worst)
            }
        };
        let (_, recaptured) = install(problem, f_m, &merged, timings)?;
        records.push(problem.record(k, &merged, &xtilde, &recaptured, change)?);
        log::debug!("iteration {k}: max relative change {change:?}");

        let consumed = std::mem::replace(&mut xtilde, recaptured.clone());
        let done = change.is_some_and(|c| c < config.convergence_tolerance);
        last = Some((merged.clone(), consumed, recaptured));
        previous = Some(merged);
        if done {
            converged_at = Some(k);
            break;
        }
    }
    let (merged, consumed, recaptured) = last.expect("at least one iteration");
    if converged_at.is_none() {
        log::info!(
            "no convergence within {} iterations (tolerance {})",
            config.max_iterations,
            config.convergence_tolerance
        );
    }
    Ok((merged, records, converged_at, consumed, recaptured))
}

/// `[site][task]` task weights, from the task-model features.
pub fn site_lambdas(weights: &[Vec<Matrix>], x: &CapturedFeatures, mode: WeightMode) -> Result<Vec<Vec<f64>>> {
    (0..x.sites().len())
        .map(|j| {
            weights
                .iter()
                .enumerate()
                .map(|(n, w)| match mode {
                    WeightMode::Uniform => Ok(1.0),
                    WeightMode::Adaptive => adaptive_weight(&w[j], x.get(n, j))
                        .map_err(|e| e.context(format!("task {n} at {}", x.sites()[j]))),
                })
                .collect()
        })
        .collect()
}

/// `[site][task]` balance shares, or `None` for a single task.
pub fn balance_table(weights: &[Vec<Matrix>], x: &CapturedFeatures, lambdas: &[Vec<f64>]) -> Result<Option<Vec<Vec<f64>>>> {
    if weights.len() < 2 {
        return Ok(None);
    }
    (0..x.sites().len())
        .map(|j| {
            let ws: Vec<&Matrix> = weights.iter().map(|w| &w[j]).collect();
            balance_shares(&ws, &x.at_site(j), &lambdas[j]).map_err(|e| e.context(x.sites()[j].to_string()))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Weights each site would contribute under `scope`, for the given task models.
pub fn site_weights(tasks: &[ModelInstance], scope: WeightScope) -> Result<Vec<Vec<Matrix>>> {
    tasks.iter().map(|t| task_weights(t, scope)).collect()
}

/// The merged model's per-site weight under `scope`.
pub fn merged_weight(merged: &ModelInstance, site: usize, scope: WeightScope) -> Result<Matrix> {
    from_delta(merged.delta(site), merged, site, scope)
}
