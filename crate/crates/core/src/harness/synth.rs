//! Reproducible synthetic merging problems.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{refactor_low_rank, AdapterSet, LoraAdapter};
use crate::error::{Error, Result};
use crate::graph::builders::{self, AdaptedProjections};
use crate::graph::{capture_features, site_levels, Activation, ModelGraph, ModelInstance};
use crate::merging::{merge, MergeConfig, MergeOutcome};
use crate::numerics::{gram, solve_symmetric, Matrix};

fn tanh() -> Activation {
    Activation::Tanh
}

fn four() -> usize {
    4
}

fn qkv() -> Projections {
    Projections::Qkv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projections {
    Qkv,
    Kv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    MlpChain {
        depth: usize,
        width: usize,
        #[serde(default = "tanh")]
        activation: Activation,
    },
    AttentionStack {
        layers: usize,
        heads: usize,
        width: usize,
        #[serde(default = "four")]
        positions: usize,
        #[serde(default = "qkv")]
        adapted: Projections,
    },
    EncoderDecoder {
        layers: usize,
        heads: usize,
        width: usize,
        #[serde(default = "four")]
        positions: usize,
    },
}

impl Architecture {
    pub fn build(&self) -> Result<ModelGraph> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("architecture {name} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            Architecture::MlpChain {
                depth,
                width,
                activation,
            } => {
                positive("depth", depth)?;
                positive("width", width)?;
                Ok(builders::mlp_chain(depth, width, activation))
            }
            Architecture::AttentionStack {
                layers,
                heads,
                width,
                positions,
                adapted,
            } => {
                positive("layers", layers)?;
                positive("positions", positions)?;
                check_heads(heads, width)?;
                let adapted = match adapted {
                    Projections::Qkv => AdaptedProjections::QKV,
                    Projections::Kv => AdaptedProjections::KV,
                };
                Ok(builders::attention_chain(layers, width, heads, positions, adapted))
            }
            Architecture::EncoderDecoder {
                layers,
                heads,
                width,
                positions,
            } => {
                positive("layers", layers)?;
                positive("positions", positions)?;
                check_heads(heads, width)?;
                Ok(builders::encoder_decoder(layers, width, heads, positions))
            }
        }
    }
}

fn check_heads(heads: usize, width: usize) -> Result<()> {
    if heads == 0 || width == 0 || width % heads != 0 {
        return Err(Error::Config(format!("width {width} is not divisible into {heads} heads")));
    }
    Ok(())
}

/// Family of per-task input distributions. Each task draws its own
/// orientation and mean from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskDistribution {
    /// Standard normal, the same for every task.
    Isotropic,
    /// Randomly rotated Gaussian whose standard deviations decay as
    /// `exp(−decay · k / (d − 1))`, plus a random mean of norm about `shift`.
    Anisotropic {
        decay: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `rank` strong random directions over an isotropic floor of scale `noise`.
    Spiked {
        rank: usize,
        noise: f64,
        #[serde(default)]
        shift: f64,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    #[default]
    RandomLowrank,
    TargetFit,
}

fn default_holdout() -> usize {
    500
}

fn default_samples() -> usize {
    50
}

fn default_magnitude() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub architecture: Architecture,
    pub tasks: usize,
    /// Merge-time samples per task.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_holdout")]
    pub holdout_samples: usize,
    pub rank: usize,
    pub distribution: TaskDistribution,
    /// Multiplies each task's inputs; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scales: Option<Vec<f64>>,
    #[serde(default)]
    pub adapter_mode: AdapterMode,
    /// Typical entry size of an adapter update relative to a base weight.
    #[serde(default = "default_magnitude")]
    pub adapter_magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn mlp(depth: usize, width: usize, tasks: usize, rank: usize, seed: u64) -> Self {
        Self {
            architecture: Architecture::MlpChain {
                depth,
                width,
                activation: Activation::Tanh,
            },
            tasks,
            samples: default_samples(),
            holdout_samples: default_holdout(),
            rank,
            distribution: TaskDistribution::Isotropic,
            input_scales: None,
            adapter_mode: AdapterMode::RandomLowrank,
            adapter_magnitude: default_magnitude(),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<ModelGraph> {
        if self.tasks == 0 || self.samples == 0 || self.holdout_samples == 0 {
            return Err(Error::Config("tasks, samples and holdout_samples must be positive".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if !(self.adapter_magnitude.is_finite() && self.adapter_magnitude > 0.0) {
            return Err(Error::Config("adapter_magnitude must be positive".into()));
        }
        if let Some(s) = &self.input_scales {
            if s.len() != self.tasks || !s.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::Config(format!(
                    "input_scales needs {} positive entries",
                    self.tasks
                )));
            }
        }
        match self.distribution {
            TaskDistribution::Isotropic => {}
            TaskDistribution::Anisotropic { decay, shift } => {
                if !(decay.is_finite() && decay >= 0.0 && shift.is_finite()) {
                    return Err(Error::Config("anisotropic decay must be nonnegative".into()));
                }
            }
            TaskDistribution::Spiked { rank, noise, shift } => {
                if rank == 0 || !(noise.is_finite() && noise >= 0.0 && shift.is_finite()) {
                    return Err(Error::Config("spiked distribution needs rank ≥ 1 and noise ≥ 0".into()));
                }
            }
        }
        let graph = self.architecture.build()?;
        for j in 0..graph.site_count() {
            let (d_in, d_out) = graph.site_shape(j);
            if self.rank > d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "rank {} exceeds the width of {}",
                    self.rank,
                    graph.sites()[j]
                )));
            }
        }
        Ok(graph)
    }
}

/// Matrix with independent `N(0, std²)` entries.
pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Random orthogonal matrix (columns orthonormalized by Gram-Schmidt).
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Matrix {
    loop {
        let g = normal_matrix(rng, d, d, 1.0);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for c in 0..d {
            let mut v = g.column(c);
            for _ in 0..2 {
                for q in &cols {
                    let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= dot * qi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
        if ok {
            return Matrix::from_fn(d, d, |r, c| cols[c][r]);
        }
    }
}

/// A sampler for one task's input columns.
#[derive(Debug, Clone)]
pub struct InputSampler {
    /// `x = mix · z + mean`, with `z` standard normal.
    mix: Option<Matrix>,
    mean: Vec<f64>,
    scale: f64,
}

impl InputSampler {
    pub fn isotropic(d: usize) -> Self {
        Self {
            mix: None,
            mean: vec![0.0; d],
            scale: 1.0,
        }
    }

    pub fn new(distribution: &TaskDistribution, d: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let random_mean = |rng: &mut _, shift: f64| -> Vec<f64> {
            if shift == 0.0 {
                return vec![0.0; d];
            }
            let g = normal_matrix(rng, d, 1, 1.0);
            let norm = g.frobenius_norm().max(1e-300);
            g.column(0).into_iter().map(|v| shift * v / norm).collect()
        };
        match *distribution {
            TaskDistribution::Isotropic => Self {
                scale,
                ..Self::isotropic(d)
            },
            TaskDistribution::Anisotropic { decay, shift } => {
                let q = random_orthogonal(rng, d);
                let raw: Vec<f64> = (0..d)
                    .map(|k| (-decay * k as f64 / (d.max(2) - 1) as f64).exp())
                    .collect();
                // keep the average per-coordinate variance at one
                let norm = (raw.iter().map(|s| s * s).sum::<f64>() / d as f64).sqrt();
                let mix = Matrix::from_fn(d, d, |r, c| q[(r, c)] * raw[c] / norm);
                Self {
                    mix: Some(mix),
                    mean: random_mean(rng, shift),
                    scale,
                }
            }
            TaskDistribution::Spiked { rank, noise, shift } => {
                let q = random_orthogonal(rng, d);
                let strong = (d as f64 / rank.min(d) as f64).sqrt();
                let mix = Matrix::from_fn(d, d, |r, c| q[(r, c)] * if c < rank { strong } else { noise });
                Self {
                    mix: Some(mix),
                    mean: random_mean(rng, shift),
                    scale,
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, columns: usize) -> Matrix {
        let d = self.mean.len();
        let z = normal_matrix(rng, d, columns, 1.0);
        let mut x = match &self.mix {
            None => z,
            Some(m) => m.matmul(&z).expect("mixing matrix is d × d"),
        };
        for r in 0..d {
            for v in x.row_mut(r) {
                *v = self.scale * (*v + self.mean[r]);
            }
        }
        x
    }
}

/// Base parameters: weights `N(0, 1/d_in)`, biases `N(0, 0.1²)`.
pub fn random_base(graph: Arc<ModelGraph>, rng: &mut impl Rng) -> Result<ModelInstance> {
    let params: BTreeMap<String, Matrix> = graph
        .params()
        .iter()
        .map(|(name, &[r, c])| {
            let std = if name.ends_with(".bias") { 0.1 } else { 1.0 / (r as f64).sqrt() };
            (name.clone(), normal_matrix(rng, r, c, std))
        })
        .collect();
    ModelInstance::base(graph, params)
}

/// Adapter factors drawn so that the update's entries have standard deviation
/// about `magnitude / √d_in`.
pub fn random_adapters(graph: &ModelGraph, task: usize, rank: usize, magnitude: f64, rng: &mut impl Rng) -> Result<AdapterSet> {
    let adapters = graph
        .sites()
        .iter()
        .enumerate()
        .map(|(j, site)| {
            let (d_in, d_out) = graph.site_shape(j);
            let down = normal_matrix(rng, rank, d_in, 1.0 / (d_in as f64).sqrt());
            let up = normal_matrix(rng, d_out, rank, magnitude / (rank as f64).sqrt());
            LoraAdapter::new(site.clone(), down, up, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdapterSet::new(task, adapters))
}

/// Fits each site's update by ridge regression onto a random task-specific
/// target map, upstream sites first, then truncates it to `rank`.
pub fn fitted_adapters(
    base: &ModelInstance,
    task: usize,
    rank: usize,
    magnitude: f64,
    sampler: &InputSampler,
    rng: &mut impl Rng,
) -> Result<AdapterSet> {
    let graph = base.graph();
    let d = graph.input_width();
    let fit_samples = (4 * d).max(200);
    let columns = fit_samples * graph.positions();
    let inputs = [sampler.sample(rng, columns)];
    let levels = site_levels(graph);
    let mut order: Vec<usize> = (0..graph.site_count()).collect();
    order.sort_by_key(|&j| (levels[j], j));

    let mut model = base.clone();
    let mut adapters: Vec<Option<LoraAdapter>> = vec![None; graph.site_count()];
    for j in order {
        let (d_in, d_out) = graph.site_shape(j);
        let target_shift = normal_matrix(rng, d_in, d_out, magnitude / (d_in as f64).sqrt());
        let x = capture_features(&model, &inputs)?.get(0, j).clone();
        let g = gram(&x, &x)?;
        let trace: f64 = (0..d_in).map(|i| g[(i, i)]).sum();
        let ridge = 1e-3 * trace / d_in as f64;
        let mut lhs = g.clone();
        for i in 0..d_in {
            lhs[(i, i)] += ridge;
        }
        let delta = solve_symmetric(&lhs, &g.matmul(&target_shift)?)?;
        let adapter = refactor_low_rank(graph.sites()[j].clone(), &delta, rank)?;
        model.set_delta(j, adapter.delta())?;
        adapters[j] = Some(adapter);
    }
    Ok(AdapterSet::new(
        task,
        adapters.into_iter().map(|a| a.expect("every site fitted")).collect(),
    ))
}

/// One generated problem.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub spec: SynthSpec,
    pub base: ModelInstance,
    pub adapters: Vec<AdapterSet>,
    /// Merge-time inputs, `d × (samples · positions)` per task.
    pub inputs: Vec<Matrix>,
    pub holdout: Vec<Matrix>,
}

impl SynthInstance {
    pub fn graph(&self) -> &ModelGraph {
        self.base.graph()
    }

    pub fn task_models(&self) -> Result<Vec<ModelInstance>> {
        self.adapters.iter().map(|a| a.instantiate(&self.base)).collect()
    }

    pub fn merge(&self, config: &MergeConfig) -> Result<MergeOutcome> {
        merge(&self.task_models()?, &self.base, &self.inputs, config)
    }
}

fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates a problem; a pure function of the spec.
pub fn synth_instance(spec: &SynthSpec) -> Result<SynthInstance> {
    let graph = Arc::new(spec.validate()?);
    let base = random_base(Arc::clone(&graph), &mut task_rng(spec.seed, 0))?;
    let d = graph.input_width();
    let cols = |s: usize| s * graph.positions();
    let mut adapters = Vec::new();
    let mut inputs = Vec::new();
    let mut holdout = Vec::new();
    for n in 0..spec.tasks {
        let scale = spec.input_scales.as_ref().map_or(1.0, |s| s[n]);
        let mut rng = task_rng(spec.seed, 1 + n as u64);
        let sampler = InputSampler::new(&spec.distribution, d, scale, &mut rng);
        let set = match spec.adapter_mode {
            AdapterMode::RandomLowrank => random_adapters(&graph, n, spec.rank, spec.adapter_magnitude, &mut rng)?,
            AdapterMode::TargetFit => fitted_adapters(&base, n, spec.rank, spec.adapter_magnitude, &sampler, &mut rng)?,
        };
        adapters.push(set);
        inputs.push(sampler.sample(&mut rng, cols(spec.samples)));
        holdout.push(sampler.sample(&mut rng, cols(spec.holdout_samples)));
    }
    Ok(SynthInstance {
        spec: spec.clone(),
        base,
        adapters,
        inputs,
        holdout,
    })
}
