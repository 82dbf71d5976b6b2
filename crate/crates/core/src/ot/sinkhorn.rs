//! Entropic transport by log-domain Sinkhorn with epsilon scaling.
//!
//! Plan parametrization: `gamma_ij = m_i w_j exp((f_i + g_j - C_ij) / eps)`.

use serde::{Deserialize, Serialize};

use super::{check_marginals, CostMatrix, KantorovichPotentials, OtSolution, SmoothDual, TransportPlan};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropicOptions {
    /// Total-variation style bound on `sum |row - m| + sum |col - w|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EntropicOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200_000,
        }
    }
}

fn lse(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + vals.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

struct Reduced {
    m: usize,
    n: usize,
    c: Vec<f64>,
    ct: Vec<f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
}

impl Reduced {
    fn update_f(&self, f: &mut [f64], g: &[f64], eps: f64) {
        for i in 0..self.m {
            let row = &self.c[i * self.n..(i + 1) * self.n];
            let v = lse(row
                .iter()
                .zip(g)
                .zip(&self.log_b)
                .map(|((c, gj), lb)| (gj - c) / eps + lb));
            f[i] = -eps * v;
        }
    }

    fn update_g(&self, f: &[f64], g: &mut [f64], eps: f64) {
        for j in 0..self.n {
            let col = &self.ct[j * self.m..(j + 1) * self.m];
            let v = lse(col
                .iter()
                .zip(f)
                .zip(&self.log_a)
                .map(|((c, fi), la)| (fi - c) / eps + la));
            g[j] = -eps * v;
        }
    }

    /// Semi-dual objective `sum w g + sum m f(g)` with `f` the soft c-transform.
    fn semi_dual(&self, f: &mut [f64], g: &[f64], eps: f64) -> f64 {
        self.update_f(f, g, eps);
        let a: f64 = f.iter().zip(&self.log_a).map(|(fi, la)| fi * la.exp()).sum();
        let b: f64 = g.iter().zip(&self.log_b).map(|(gj, lb)| gj * lb.exp()).sum();
        a + b
    }

    /// Newton ascent on the semi-dual in `g`. Rows are exact after each
    /// step, so the returned violation is the column error.
    fn newton(&self, f: &mut [f64], g: &mut [f64], eps: f64, tol: f64, iters: &mut usize, max_iter: usize) -> f64 {
        let (m, n) = (self.m, self.n);
        let w: Vec<f64> = self.log_b.iter().map(|v| v.exp()).collect();
        let a: Vec<f64> = self.log_a.iter().map(|v| v.exp()).collect();
        let mut obj = self.semi_dual(f, g, eps);
        let mut viol = f64::INFINITY;
        let mut p = vec![0.0; n];
        for _ in 0..100 {
            let mut col = vec![0.0; n];
            let mut hess = vec![0.0; n * n];
            for i in 0..m {
                let row = &self.c[i * n..(i + 1) * n];
                for j in 0..n {
                    p[j] = ((f[i] + g[j] - row[j]) / eps + self.log_b[j]).exp();
                    col[j] += a[i] * p[j];
                }
                for j in 0..n {
                    let s = a[i] * p[j];
                    if s == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        hess[j * n + k] -= s * p[k];
                    }
                }
            }
            let grad: Vec<f64> = w.iter().zip(&col).map(|(wj, cj)| wj - cj).collect();
            viol = grad.iter().map(|v| v.abs()).sum();
            if viol <= tol || *iters >= max_iter {
                break;
            }
            let mut diag_max = 0.0f64;
            for j in 0..n {
                hess[j * n + j] += col[j];
                diag_max = diag_max.max(hess[j * n + j]);
            }
            for j in 0..n {
                hess[j * n + j] += 1e-12 * diag_max.max(1e-300);
            }
            // hess now holds eps times the negated Hessian of the semi-dual.
            let Some(mut d) = solve_dense(hess, grad.clone(), n) else {
                break;
            };
            d.iter_mut().for_each(|v| *v *= eps);
            let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            let mut trial_g = vec![0.0; n];
            let mut trial_f = vec![0.0; m];
            let mut accepted = false;
            for _ in 0..40 {
                for j in 0..n {
                    trial_g[j] = g[j] + t * d[j];
                }
                let o = self.semi_dual(&mut trial_f, &trial_g, eps);
                if o >= obj + 1e-4 * t * slope || (o - obj).abs() <= 1e-15 * obj.abs().max(1.0) {
                    g.copy_from_slice(&trial_g);
                    f.copy_from_slice(&trial_f);
                    obj = o;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            *iters += 1;
            if !accepted {
                break;
            }
        }
        viol
    }

    /// Row-marginal violation; columns are exact right after a `g` update.
    fn violation(&self, f: &[f64], g: &[f64], eps: f64) -> f64 {
        let mut v = 0.0;
        for i in 0..self.m {
            let row = &self.c[i * self.n..(i + 1) * self.n];
            let s: f64 = row
                .iter()
                .zip(g)
                .zip(&self.log_b)
                .map(|((c, gj), lb)| ((f[i] + gj - c) / eps + lb).exp())
                .sum();
            let a = self.log_a[i].exp();
            v += (a * s - a).abs();
        }
        v
    }
}

const SINKHORN_FINAL_SWEEPS: usize = 2000;

pub fn solve_entropic(
    masses: &[f64],
    weights: &[f64],
    c: &CostMatrix,
    epsilon: f64,
    options: &EntropicOptions,
) -> Result<OtSolution> {
    solve_entropic_from(masses, weights, c, epsilon, options, None)
}

/// As [`solve_entropic`], starting Newton at `warm` (a previous `g`). The
/// epsilon ladder is skipped unless the warm start fails to converge.
pub fn solve_entropic_from(
    masses: &[f64],
    weights: &[f64],
    c: &CostMatrix,
    epsilon: f64,
    options: &EntropicOptions,
    warm: Option<&[f64]>,
) -> Result<OtSolution> {
    let (m0, n0) = (c.rows(), c.cols());
    check_marginals(masses, weights, m0, n0)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!(
            "entropic epsilon must be positive, got {epsilon}"
        )));
    }
    let rows: Vec<usize> = (0..m0).filter(|&i| masses[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n0).filter(|&j| weights[j] > 0.0).collect();
    let (m, n) = (rows.len(), cols.len());
    let mut sub = Vec::with_capacity(m * n);
    for &i in &rows {
        for &j in &cols {
            sub.push(c.get(i, j));
        }
    }
    let mut ct = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            ct[j * m + i] = sub[i * n + j];
        }
    }
    let red = Reduced {
        m,
        n,
        c: sub,
        ct,
        log_a: rows.iter().map(|&i| masses[i].ln()).collect(),
        log_b: cols.iter().map(|&j| weights[j].ln()).collect(),
    };

    let (cmin, cmax) = red
        .c
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let mut eps = (cmax - cmin).max(epsilon);
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut iters = 0usize;
    let mut viol = f64::INFINITY;
    if let Some(w) = warm.filter(|w| w.len() == n0 && w.iter().all(|v| v.is_finite())) {
        for (cj, &j) in cols.iter().enumerate() {
            g[cj] = w[j];
        }
        viol = red.newton(&mut f, &mut g, epsilon, options.tol, &mut iters, options.max_iter);
        if !(viol <= options.tol) {
            f.iter_mut().for_each(|v| *v = 0.0);
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    if !(viol <= options.tol) {
        loop {
            let last = eps <= epsilon;
            let target = if last { options.tol } else { 1e-3 };
            // Plain scaling stalls at small eps; the last stage hands over to Newton.
            let budget = if last {
                iters + SINKHORN_FINAL_SWEEPS
            } else {
                options.max_iter
            };
            loop {
                red.update_f(&mut f, &g, eps);
                red.update_g(&f, &mut g, eps);
                iters += 1;
                viol = red.violation(&f, &g, eps);
                if viol <= target || iters >= options.max_iter.min(budget) {
                    break;
                }
            }
            if last || iters >= options.max_iter {
                if !(viol <= options.tol) && iters < options.max_iter {
                    viol = red.newton(&mut f, &mut g, epsilon, options.tol, &mut iters, options.max_iter);
                }
                break;
            }
            eps = (0.5 * eps).max(epsilon);
        }
    }
    if !(viol <= options.tol) {
        return Err(Error::Convergence {
            iterations: iters,
            residual: viol,
        });
    }
    let eps = epsilon;

    let mut trip = Vec::with_capacity(m * n);
    for (ri, &i) in rows.iter().enumerate() {
        for (cj, &j) in cols.iter().enumerate() {
            let v = ((f[ri] + g[cj] - red.c[ri * n + cj]) / eps + red.log_a[ri] + red.log_b[cj]).exp();
            trip.push((i, j, v));
        }
    }
    let plan = TransportPlan::from_triplets(m0, n0, trip)?;

    // Dropped columns get the soft c-transform of f; then f is replaced by the
    // hard c-transform of g over all columns, which makes the pair exactly
    // feasible at an O(eps log n) loss of dual value.
    let mut g_full = vec![0.0; n0];
    let mut cj = 0;
    for j in 0..n0 {
        if cj < n && cols[cj] == j {
            g_full[j] = g[cj];
            cj += 1;
        } else {
            g_full[j] = -eps
                * lse(rows
                    .iter()
                    .enumerate()
                    .map(|(ri, &i)| (f[ri] - c.get(i, j)) / eps + red.log_a[ri]));
        }
    }
    let f_full: Vec<f64> = (0..m0)
        .map(|i| {
            c.row(i)
                .iter()
                .zip(&g_full)
                .map(|(cij, gj)| cij - gj)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    // The soft potential extends to dropped rows by the soft c-transform of g.
    let mut f_soft = vec![0.0; m0];
    let mut ri = 0;
    for i in 0..m0 {
        if ri < m && rows[ri] == i {
            f_soft[i] = f[ri];
            ri += 1;
        } else {
            f_soft[i] = -eps
                * lse(cols
                    .iter()
                    .enumerate()
                    .map(|(cj, &j)| (g[cj] - c.get(i, j)) / eps + red.log_b[cj]));
        }
    }
    let value = rows.iter().enumerate().map(|(ri, &i)| f[ri] * masses[i]).sum::<f64>()
        + cols.iter().enumerate().map(|(cj, &j)| g[cj] * weights[j]).sum::<f64>();
    let total_cost = plan.cost(c);
    Ok(OtSolution {
        plan,
        potentials: KantorovichPotentials::gauged(f_full, g_full, masses),
        total_cost,
        smooth: Some(SmoothDual { f: f_soft, value }),
    })
}

/// Gaussian elimination with partial pivoting on a dense `n x n` system.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for k in 0..n {
        let piv = (k..n).max_by(|&x, &y| a[x * n + k].abs().total_cmp(&a[y * n + k].abs()))?;
        if !(a[piv * n + k].abs() > 0.0) {
            return None;
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            b.swap(k, piv);
        }
        let d = a[k * n + k];
        for r in k + 1..n {
            let l = a[r * n + k] / d;
            if l == 0.0 {
                continue;
            }
            for c in k..n {
                a[r * n + c] -= l * a[k * n + c];
            }
            b[r] -= l * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|c| a[k * n + c] * x[c]).sum();
        x[k] = (b[k] - s) / a[k * n + k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
