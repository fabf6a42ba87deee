//! Synthetic problems and the diagnostic experiments run on them.

pub mod dag;
pub mod experiments;
pub mod oracles;
pub mod synth;

use rand::Rng;

pub use dag::{random_dag, DagShape};
pub use experiments::{
    ablation_sweep, ablation_sweep_problem, compare_methods, discrepancy_curve, heldout_score, score_methods,
    AblationAxis, AblationPoint, AblationTable, ComparisonResult, DiscrepancyCurve, HeldoutScore, MergeProblem, MethodScore,
    MethodSummary, SeedComparison,
};
pub use synth::{
    normal_matrix, synth_instance, AdapterMode, Architecture, InputSampler, Projections, SynthInstance, SynthSpec,
    TaskDistribution,
};

use crate::numerics::Matrix;

/// The inputs of a single-site merge.
#[derive(Debug, Clone)]
pub struct SiteProblem {
    pub weights: Vec<Matrix>,
    pub x: Vec<Matrix>,
    pub xtilde: Vec<Matrix>,
    pub lambdas: Vec<f64>,
}

impl SiteProblem {
    pub fn weights(&self) -> Vec<&Matrix> {
        self.weights.iter().collect()
    }

    pub fn x(&self) -> Vec<&Matrix> {
        self.x.iter().collect()
    }

    pub fn xtilde(&self) -> Vec<&Matrix> {
        self.xtilde.iter().collect()
    }
}

/// Random site problem. Each task gets its own feature scale and
/// anisotropy; `X̃` is a perturbation of `X` unless `exact` is set.
pub fn random_site_problem(
    rng: &mut impl Rng,
    d_in: usize,
    d_out: usize,
    samples: &[usize],
    exact: bool,
) -> SiteProblem {
    let n = samples.len();
    let mut p = SiteProblem {
        weights: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        xtilde: Vec::with_capacity(n),
        lambdas: Vec::with_capacity(n),
    };
    for &s in samples {
        let scale = 10f64.powf(rng.random_range(-1.0..1.0));
        let col_scales: Vec<f64> = (0..d_in).map(|_| 10f64.powf(rng.random_range(-0.5..0.5))).collect();
        let mut x = normal_matrix(rng, d_in, s, scale);
        for (r, cs) in col_scales.iter().enumerate() {
            for v in x.row_mut(r) {
                *v *= cs;
            }
        }
        let xtilde = if exact {
            x.clone()
        } else {
            let mut noise = normal_matrix(rng, d_in, s, 0.1 * scale);
            noise.add_assign(&x).expect("same shape");
            noise
        };
        p.weights.push(normal_matrix(rng, d_in, d_out, 1.0 / (d_in as f64).sqrt()));
        p.x.push(x);
        p.xtilde.push(xtilde);
        p.lambdas.push(10f64.powf(rng.random_range(-1.0..1.0)));
    }
    p
}
