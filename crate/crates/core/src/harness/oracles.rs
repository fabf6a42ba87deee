//! Independent reference computations used to check the engine.
//!
//! Everything here is written with plain index loops over `Vec`s and shares no
//! kernels with [`crate::numerics`], the graph evaluator or the merging solver;
//! `Matrix` is used only as storage.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::graph::{Activation, GraphSpec, NodeKind};
use crate::numerics::Matrix;

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c])
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = vec![vec![0.0; b.cols()]; a.rows()];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            *cell = s;
        }
    }
    from_rows(&out)
}

pub fn naive_transpose(a: &Matrix) -> Matrix {
    let mut rows = vec![vec![0.0; a.rows()]; a.cols()];
    for (c, row) in rows.iter_mut().enumerate() {
        for (r, cell) in row.iter_mut().enumerate() {
            *cell = a[(r, c)];
        }
    }
    from_rows(&rows)
}

pub fn naive_sum_sq(a: &Matrix) -> f64 {
    let mut s = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            s += a[(r, c)] * a[(r, c)];
        }
    }
    s
}

/// Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_solve(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    let k = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| a[(i, j)]).collect();
            row.extend((0..k).map(|j| b[(i, j)]));
            row
        })
        .collect();
    for col in 0..n {
        let p = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, p);
        let piv = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= piv;
        }
        let pivot_row = aug[col].clone();
        for (r, row) in aug.iter_mut().enumerate() {
            if r != col {
                let f = row[col];
                for (c, v) in row.iter_mut().enumerate() {
                    *v -= f * pivot_row[c];
                }
            }
        }
    }
    Matrix::from_fn(n, k, |i, j| aug[i][n + j])
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m = to_rows(a);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    off += v * v;
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Least squares `min ‖A z − B‖_F` by Householder QR of `A` (tall, full column rank).
pub fn householder_least_squares(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    assert!(m >= n, "least squares needs a tall system");
    let mut r = to_rows(a);
    let mut y = to_rows(b);
    let k = b.cols();
    for col in 0..n {
        let norm: f64 = (col..m).map(|i| r[i][col] * r[i][col]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[col][col] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (col..m).map(|i| r[i][col]).collect();
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        for c in col..n {
            let dot: f64 = (col..m).map(|i| v[i - col] * r[i][c]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for i in col..m {
                r[i][c] -= f * v[i - col];
            }
        }
        for c in 0..k {
            let dot: f64 = (col..m).map(|i| v[i - col] * y[i][c]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for i in col..m {
                y[i][c] -= f * v[i - col];
            }
        }
    }
    let mut z = vec![vec![0.0; k]; n];
    for i in (0..n).rev() {
        for c in 0..k {
            let mut s = y[i][c];
            for j in (i + 1)..n {
                s -= r[i][j] * z[j][c];
            }
            z[i][c] = s / r[i][i];
        }
    }
    from_rows(&z)
}

/// Merge objective `Σ λ ‖Wᵢᵀ Xᵢ − Wᵀ X̃ᵢ‖²` evaluated by loops.
pub fn naive_objective(
    merged: &Matrix,
    weights: &[&Matrix],
    xs: &[&Matrix],
    xtildes: &[&Matrix],
    lambdas: &[f64],
) -> f64 {
    let mut total = 0.0;
    for i in 0..weights.len() {
        let target = naive_matmul(&naive_transpose(weights[i]), xs[i]);
        let got = naive_matmul(&naive_transpose(merged), xtildes[i]);
        let mut s = 0.0;
        for r in 0..target.rows() {
            for c in 0..target.cols() {
                let d = target[(r, c)] - got[(r, c)];
                s += d * d;
            }
        }
        total += lambdas[i] * s;
    }
    total
}

fn naive_gram_norm(left: &Matrix, right: &Matrix) -> f64 {
    naive_sum_sq(&naive_matmul(left, &naive_transpose(right))).sqrt()
}

/// The objective whose stationarity conditions are the regularized normal
/// equations: the merge objective plus, per task,
/// `λ α (‖X̃X̃ᵀ‖ ‖W‖² − 2 ‖X̃Xᵀ‖ ⟨W, Wᵢ⟩)`. Equal to [`naive_objective`] at `α = 0`.
pub fn naive_regularized_objective(
    merged: &Matrix,
    weights: &[&Matrix],
    xs: &[&Matrix],
    xtildes: &[&Matrix],
    lambdas: &[f64],
    alpha: f64,
) -> f64 {
    let mut total = naive_objective(merged, weights, xs, xtildes, lambdas);
    if alpha == 0.0 {
        return total;
    }
    for i in 0..weights.len() {
        let mut inner = 0.0;
        for r in 0..merged.rows() {
            for c in 0..merged.cols() {
                inner += merged[(r, c)] * weights[i][(r, c)];
            }
        }
        total += lambdas[i]
            * alpha
            * (naive_gram_norm(xtildes[i], xtildes[i]) * naive_sum_sq(merged)
                - 2.0 * naive_gram_norm(xtildes[i], xs[i]) * inner);
    }
    total
}

/// Minimizes [`naive_regularized_objective`] by conjugate gradient descent
/// on `W`, applying the Hessian through the feature matrices (no Gram matrix
/// enters the iteration). Stops when the gradient norm falls below `tol`
/// times its initial value.
pub fn descent_minimizer(
    weights: &[&Matrix],
    xs: &[&Matrix],
    xtildes: &[&Matrix],
    lambdas: &[f64],
    alpha: f64,
    tol: f64,
) -> Matrix {
    let d_in = weights[0].rows();
    let d_out = weights[0].cols();
    let zeros = || vec![vec![0.0; d_out]; d_in];
    let ridge: Vec<(f64, f64)> = (0..weights.len())
        .map(|i| {
            if alpha == 0.0 {
                (0.0, 0.0)
            } else {
                (
                    alpha * naive_gram_norm(xtildes[i], xtildes[i]),
                    alpha * naive_gram_norm(xtildes[i], xs[i]),
                )
            }
        })
        .collect();

    // H(W) = Σ λ (X̃ (X̃ᵀ W) + ridge W)
    let apply = |w: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let mut out = zeros();
        for i in 0..weights.len() {
            let xt = xtildes[i];
            for (out_r, w_r) in out.iter_mut().zip(w) {
                for (o, v) in out_r.iter_mut().zip(w_r) {
                    *o += lambdas[i] * ridge[i].0 * v;
                }
            }
            for s in 0..xt.cols() {
                let mut proj = vec![0.0; d_out];
                for (r, wr) in w.iter().enumerate() {
                    let x = xt[(r, s)];
                    for (p, v) in proj.iter_mut().zip(wr) {
                        *p += x * v;
                    }
                }
                for (r, out_r) in out.iter_mut().enumerate() {
                    let x = lambdas[i] * xt[(r, s)];
                    for (o, p) in out_r.iter_mut().zip(&proj) {
                        *o += x * p;
                    }
                }
            }
        }
        out
    };
    // rhs = Σ λ (X̃ (Xᵀ Wᵢ) + ridge Wᵢ)
    let mut rhs = zeros();
    for i in 0..weights.len() {
        let (x, xt, wi) = (xs[i], xtildes[i], weights[i]);
        for (r, rhs_r) in rhs.iter_mut().enumerate() {
            for (c, v) in rhs_r.iter_mut().enumerate() {
                *v += lambdas[i] * ridge[i].1 * wi[(r, c)];
            }
        }
        for s in 0..x.cols() {
            let mut proj = vec![0.0; d_out];
            for r in 0..d_in {
                for (o, p) in proj.iter_mut().enumerate() {
                    *p += x[(r, s)] * wi[(r, o)];
                }
            }
            for (r, rhs_r) in rhs.iter_mut().enumerate() {
                let f = lambdas[i] * xt[(r, s)];
                for (v, p) in rhs_r.iter_mut().zip(&proj) {
                    *v += f * p;
                }
            }
        }
    }
    let dot = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    };

    let mut w = zeros();
    let mut resid = rhs.clone();
    let mut dir = resid.clone();
    let mut rr = dot(&resid, &resid);
    let initial = rr.sqrt();
    if initial == 0.0 {
        return from_rows(&w);
    }
    let max_iter = 50 * d_in * d_out.max(1) + 100;
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * initial {
            break;
        }
        let hd = apply(&dir);
        let curvature = dot(&dir, &hd);
        if curvature <= 0.0 {
            break;
        }
        let step = rr / curvature;
        for r in 0..d_in {
            for c in 0..d_out {
                w[r][c] += step * dir[r][c];
                resid[r][c] -= step * hd[r][c];
            }
        }
        let new_rr = dot(&resid, &resid);
        let beta = new_rr / rr;
        rr = new_rr;
        for r in 0..d_in {
            for c in 0..d_out {
                dir[r][c] = resid[r][c] + beta * dir[r][c];
            }
        }
    }
    from_rows(&w)
}

/// Kahn's algorithm over a graph document. `None` if the graph has a cycle.
pub fn kahn_order(spec: &GraphSpec) -> Option<Vec<String>> {
    let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
    let mut consumers: HashMap<&str, Vec<&str>> = HashMap::new();
    for node in &spec.nodes {
        indegree.insert(&node.id, node.inputs.len());
        for up in &node.inputs {
            consumers.entry(up.as_str()).or_default().push(&node.id);
        }
    }
    let mut queue: VecDeque<&str> = spec
        .nodes
        .iter()
        .filter(|n| n.inputs.is_empty())
        .map(|n| n.id.as_str())
        .collect();
    let mut order = Vec::new();
    while let Some(id) = queue.pop_front() {
        order.push(id.to_string());
        for &c in consumers.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let e = indegree.get_mut(c).unwrap();
            *e -= 1;
            if *e == 0 {
                queue.push_back(c);
            }
        }
    }
    (order.len() == spec.nodes.len()).then_some(order)
}

/// Builds the site dependency graph by explicit reachability and returns the
/// longest input-rooted path (in site vertices) minus one, by enumerating
/// every path.
pub fn brute_force_iteration_bound<'a>(spec: &'a GraphSpec) -> Option<usize> {
    let mut consumers: HashMap<&'a str, Vec<&'a str>> = HashMap::new();
    for node in &spec.nodes {
        for up in &node.inputs {
            consumers.entry(up.as_str()).or_default().push(&node.id);
        }
    }
    let site_nodes: Vec<&str> = spec
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Linear { site: Some(_), .. }))
        .map(|n| n.id.as_str())
        .collect();
    if site_nodes.is_empty() {
        return None;
    }
    let reach = |from: &'a str| -> Vec<&'a str> {
        let mut seen = vec![from];
        let mut queue = VecDeque::from([from]);
        while let Some(cur) = queue.pop_front() {
            for &c in consumers.get(cur).map(Vec::as_slice).unwrap_or(&[]) {
                if !seen.contains(&c) {
                    seen.push(c);
                    queue.push_back(c);
                }
            }
        }
        seen
    };
    // edge a -> b when site a's linear output reaches site b's linear
    let n = site_nodes.len();
    let mut edges = vec![vec![false; n]; n];
    for a in 0..n {
        let r = reach(site_nodes[a]);
        for b in 0..n {
            if a != b && r.contains(&site_nodes[b]) {
                edges[a][b] = true;
            }
        }
    }
    fn longest(v: usize, edges: &[Vec<bool>]) -> usize {
        let mut best = 1;
        for (w, &e) in edges[v].iter().enumerate() {
            if e {
                best = best.max(1 + longest(w, edges));
            }
        }
        best
    }
    // the input vertex reaches every site
    let s = (0..n).map(|v| longest(v, &edges)).max().unwrap();
    Some(s - 1)
}

/// Evaluates `linear → bias → activation` layers one sample at a time.
pub fn naive_mlp(
    layers: &[(&Matrix, &Matrix, Activation)],
    input: &Matrix,
) -> (Matrix, Vec<Matrix>) {
    let samples = input.cols();
    let mut site_inputs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers.len()];
    let mut outputs = Vec::new();
    for s in 0..samples {
        let mut x: Vec<f64> = (0..input.rows()).map(|r| input[(r, s)]).collect();
        for (l, (w, b, act)) in layers.iter().enumerate() {
            site_inputs[l].push(x.clone());
            let mut y = vec![0.0; w.cols()];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, xi) in x.iter().enumerate() {
                    acc += w[(i, o)] * xi;
                }
                acc += b[(o, 0)];
                *yo = match act {
                    Activation::Relu => {
                        if acc > 0.0 {
                            acc
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => acc.tanh(),
                    Activation::Gelu => {
                        let c = (2.0 / std::f64::consts::PI).sqrt();
                        0.5 * acc * (1.0 + (c * (acc + 0.044715 * acc.powi(3))).tanh())
                    }
                };
            }
            x = y;
        }
        outputs.push(x);
    }
    let columns_to_matrix = |cols: &[Vec<f64>]| Matrix::from_fn(cols[0].len(), cols.len(), |r, c| cols[c][r]);
    (
        columns_to_matrix(&outputs),
        site_inputs.iter().map(|c| columns_to_matrix(c)).collect(),
    )
}

/// Sample covariance of the columns of `x` (divides by `S − 1`).
pub fn sample_covariance(x: &Matrix) -> Matrix {
    let (d, s) = x.shape();
    let mean: Vec<f64> = (0..d)
        .map(|r| (0..s).map(|c| x[(r, c)]).sum::<f64>() / s as f64)
        .collect();
    Matrix::from_fn(d, d, |i, j| {
        (0..s)
            .map(|c| (x[(i, c)] - mean[i]) * (x[(j, c)] - mean[j]))
            .sum::<f64>()
            / (s as f64 - 1.0)
    })
}
