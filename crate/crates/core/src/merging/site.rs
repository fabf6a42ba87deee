//! Closed-form merges of one adapter site.
//!
//! Weights are `d_in × d_out`, features `d_in × S` with samples as columns.

use crate::error::{Error, Result};
use crate::numerics::{gram, regularize_gram, solve_symmetric, Matrix};

fn check_tasks(what: &str, n: usize, lens: &[usize]) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain(format!("{what}: no tasks")));
    }
    if let Some(&bad) = lens.iter().find(|&&l| l != n) {
        return Err(Error::Shape(format!("{what}: {n} weights but a list of length {bad}")));
    }
    Ok(())
}

fn check_finite(what: &str, ms: &[&Matrix]) -> Result<()> {
    if let Some(i) = ms.iter().position(|m| !m.is_finite()) {
        return Err(Error::Data(format!("{what}: task {i} has non-finite entries")));
    }
    Ok(())
}

/// `‖w‖² / ‖wᵀx‖²`.
pub fn adaptive_weight(w: &Matrix, x: &Matrix) -> Result<f64> {
    let response = w.tr_matmul(x)?.frobenius_norm_sq();
    if response == 0.0 {
        return Err(Error::DegenerateTask(
            "‖WᵀX‖ is zero, so the adaptive weight is undefined".into(),
        ));
    }
    Ok(w.frobenius_norm_sq() / response)
}

/// `Σ cᵢ Wᵢ` with coefficients summing to one.
pub fn linear_merge(weights: &[&Matrix], coefficients: &[f64]) -> Result<Matrix> {
    check_tasks("linear merge", weights.len(), &[coefficients.len()])?;
    let total: f64 = coefficients.iter().sum();
    if !coefficients.iter().all(|c| c.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "linear merge coefficients must be finite and sum to 1, got sum {total}"
        )));
    }
    let mut out = Matrix::zeros(weights[0].rows(), weights[0].cols());
    for (w, &c) in weights.iter().zip(coefficients) {
        if w.shape() != out.shape() {
            return Err(Error::Domain(format!(
                "linear merge: weight shapes differ ({:?} vs {:?})",
                w.shape(),
                out.shape()
            )));
        }
        out.axpy(c, w)?;
    }
    Ok(out)
}

/// `(Σ Gᵢ)⁻¹ Σ Gᵢ Wᵢ` with `Gᵢ = XᵢXᵢᵀ`, off-diagonal entries multiplied by
/// `offdiagonal_scale`.
pub fn regmean_merge(weights: &[&Matrix], features: &[&Matrix], offdiagonal_scale: f64) -> Result<Matrix> {
    check_tasks("regmean", weights.len(), &[features.len()])?;
    if !(offdiagonal_scale > 0.0 && offdiagonal_scale <= 1.0) {
        return Err(Error::Domain(format!(
            "off-diagonal scale must lie in (0, 1], got {offdiagonal_scale}"
        )));
    }
    check_finite("regmean features", features)?;
    let d = weights[0].rows();
    let mut lhs = Matrix::zeros(d, d);
    let mut rhs = Matrix::zeros(d, weights[0].cols());
    for (w, x) in weights.iter().zip(features) {
        let mut g = gram(x, x)?;
        if offdiagonal_scale != 1.0 {
            for r in 0..d {
                for c in 0..d {
                    if r != c {
                        g[(r, c)] *= offdiagonal_scale;
                    }
                }
            }
        }
        rhs.add_assign(&g.matmul(w)?)?;
        lhs.add_assign(&g)?;
    }
    solve_symmetric(&lhs, &rhs).map_err(|e| match e {
        Error::Singular { .. } => e.context(
            "summed Gram matrix is singular; use more samples per task or fewer tasks",
        ),
        e => e,
    })
}

/// Left and right sides of the regularized normal equations
/// `(Σ λᵢ G̃ᵢ) W = Σ λᵢ Gᵢ Wᵢ`.
pub fn iteris_normal_equations(
    weights: &[&Matrix],
    features_x: &[&Matrix],
    features_xtilde: &[&Matrix],
    lambdas: &[f64],
    alpha: f64,
) -> Result<(Matrix, Matrix)> {
    check_tasks(
        "iteris",
        weights.len(),
        &[features_x.len(), features_xtilde.len(), lambdas.len()],
    )?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Domain(format!("alpha must be nonnegative, got {alpha}")));
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::Domain(format!("task weights must be positive, got {l}")));
    }
    check_finite("iteris features", features_x)?;
    check_finite("iteris features", features_xtilde)?;
    let d = weights[0].rows();
    let mut lhs = Matrix::zeros(d, d);
    let mut rhs = Matrix::zeros(d, weights[0].cols());
    for i in 0..weights.len() {
        let (x, xt) = (features_x[i], features_xtilde[i]);
        if x.shape() != xt.shape() || x.rows() != d {
            return Err(Error::Shape(format!(
                "task {i}: features {:?} and {:?} for a {d}-wide site",
                x.shape(),
                xt.shape()
            )));
        }
        let cross = regularize_gram(&gram(xt, x)?, alpha)?;
        let own = regularize_gram(&gram(xt, xt)?, alpha)?;
        rhs.axpy(lambdas[i], &cross.matmul(weights[i])?)?;
        lhs.axpy(lambdas[i], &own)?;
    }
    Ok((lhs, rhs))
}

pub fn iteris_solve_site(
    weights: &[&Matrix],
    features_x: &[&Matrix],
    features_xtilde: &[&Matrix],
    lambdas: &[f64],
    alpha: f64,
) -> Result<Matrix> {
    let (lhs, rhs) = iteris_normal_equations(weights, features_x, features_xtilde, lambdas, alpha)?;
    solve_symmetric(&lhs, &rhs)
}

/// `‖Wᵢᵀ Xᵢ − Wᵀ X̃ᵢ‖_F`
pub fn alignment_error(merged: &Matrix, weight: &Matrix, x: &Matrix, xtilde: &Matrix) -> Result<f64> {
    weight.tr_matmul(x)?.distance(&merged.tr_matmul(xtilde)?)
}

/// `Σ λᵢ ‖Wᵢᵀ Xᵢ − Wᵀ X̃ᵢ‖²`
pub fn objective_value(
    merged: &Matrix,
    weights: &[&Matrix],
    features_x: &[&Matrix],
    features_xtilde: &[&Matrix],
    lambdas: &[f64],
) -> Result<f64> {
    check_tasks(
        "objective",
        weights.len(),
        &[features_x.len(), features_xtilde.len(), lambdas.len()],
    )?;
    let mut total = 0.0;
    for i in 0..weights.len() {
        let e = alignment_error(merged, weights[i], features_x[i], features_xtilde[i])?;
        total += lambdas[i] * e * e;
    }
    Ok(total)
}

/// Each task's share `λᵢ‖WᵢᵀXᵢ‖² / Σⱼ λⱼ‖WⱼᵀXⱼ‖²` of the objective's target energy.
pub fn balance_shares(weights: &[&Matrix], features_x: &[&Matrix], lambdas: &[f64]) -> Result<Vec<f64>> {
    check_tasks("balance", weights.len(), &[features_x.len(), lambdas.len()])?;
    if weights.len() < 2 {
        return Err(Error::Domain("balance shares need at least two tasks".into()));
    }
    let terms = weights
        .iter()
        .zip(features_x)
        .zip(lambdas)
        .map(|((w, x), l)| Ok(l * w.tr_matmul(x)?.frobenius_norm_sq()))
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = terms.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::DegenerateTask("every task term is zero".into()));
    }
    Ok(terms.into_iter().map(|t| t / total).collect())
}
