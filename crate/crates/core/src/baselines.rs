//! Genie-aided comparison estimators: MMSE with known activity (the lower
//! bound) and block-OMP with known active-user count.

use crate::error::{Error, Result};
use crate::mpbsbl::Estimate;
use crate::pilots::ExpandedPilot;
use crate::C64;

/// Side information a genie estimator is allowed to use.
#[derive(Debug, Clone)]
pub struct GenieInfo {
    /// True active users, ascending.
    pub active_set: Vec<usize>,
    /// True noise variance.
    pub noise_var: f64,
}

fn dense_column(pilot: &ExpandedPilot, j: usize) -> Vec<C64> {
    let mut col = vec![C64::new(0.0, 0.0); pilot.n_obs];
    for e in pilot.edges_of_var(j) {
        col[pilot.edge_obs[e]] += pilot.edge_val[e];
    }
    col
}

fn columns_of_users(pilot: &ExpandedPilot, users: &[usize]) -> Vec<usize> {
    users
        .iter()
        .flat_map(|&k| (0..pilot.dc).map(move |d| k * pilot.dc + d))
        .collect()
}

/// In-place Cholesky factorization of a Hermitian matrix (row-major, m x m);
/// on success the lower triangle holds L with `a = L Lᴴ`.
fn cholesky(a: &mut [C64], m: usize) -> Result<()> {
    let scale = (0..m).map(|i| a[i * m + i].re.abs()).fold(1.0f64, f64::max);
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for t in 0..j {
                s -= a[i * m + t] * a[j * m + t].conj();
            }
            if i == j {
                let d = s.re;
                if d <= 1e-13 * scale {
                    return Err(Error::Singularity(format!(
                        "normal matrix is not positive definite at pivot {} (value {:.3e})",
                        i, d
                    )));
                }
                a[i * m + i] = C64::new(d.sqrt(), 0.0);
            } else {
                a[i * m + j] = s / a[j * m + j].re;
            }
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[C64], m: usize, b: &mut [C64]) {
    for i in 0..m {
        let mut s = b[i];
        for t in 0..i {
            s -= l[i * m + t] * b[t];
        }
        b[i] = s / l[i * m + i].re;
    }
    for i in (0..m).rev() {
        let mut s = b[i];
        for t in i + 1..m {
            s -= l[t * m + i].conj() * b[t];
        }
        b[i] = s / l[i * m + i].re;
    }
}

/// Gram matrix of the selected columns plus a real ridge on the diagonal.
fn gram(cols: &[Vec<C64>], ridge: f64) -> Vec<C64> {
    let m = cols.len();
    let mut g = vec![C64::new(0.0, 0.0); m * m];
    for r in 0..m {
        for c in 0..m {
            let mut s = C64::new(0.0, 0.0);
            for (a, b) in cols[r].iter().zip(&cols[c]) {
                s += a.conj() * b;
            }
            if r == c {
                s += ridge;
            }
            g[r * m + c] = s;
        }
    }
    g
}

fn correlate(col: &[C64], y: &[C64]) -> C64 {
    col.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

/// Solves `(PᴴP + ridge·I) x = Pᴴy` on the given columns.
fn normal_solve(cols: &[Vec<C64>], y: &[C64], ridge: f64) -> Result<Vec<C64>> {
    let m = cols.len();
    let mut g = gram(cols, ridge);
    cholesky(&mut g, m)?;
    let mut x: Vec<C64> = cols.iter().map(|c| correlate(c, y)).collect();
    cholesky_solve(&g, m, &mut x);
    Ok(x)
}

fn scatter(pilot: &ExpandedPilot, col_ids: &[usize], values: &[C64]) -> Vec<C64> {
    let mut h = vec![C64::new(0.0, 0.0); pilot.n_vars];
    for (&j, &v) in col_ids.iter().zip(values) {
        h[j] = v;
    }
    h
}

/// MMSE estimate restricted to the known active blocks, with a unit-variance
/// channel prior: `ĥ_A = (P_AᴴP_A + σ_w²I)⁻¹ P_Aᴴ y`, zeros elsewhere.
pub fn ga_mmse(y: &[C64], pilot: &ExpandedPilot, genie: &GenieInfo) -> Result<Estimate> {
    if y.len() != pilot.n_obs {
        return Err(Error::Dimension(format!(
            "observation length {} does not match N*Lt = {}",
            y.len(),
            pilot.n_obs
        )));
    }
    let mut active = genie.active_set.clone();
    active.sort_unstable();
    active.dedup();
    if active.iter().any(|&k| k >= pilot.k) {
        return Err(Error::Dimension("active set references unknown users".into()));
    }
    let col_ids = columns_of_users(pilot, &active);
    if col_ids.is_empty() {
        return Ok(Estimate {
            h_hat: vec![C64::new(0.0, 0.0); pilot.n_vars],
            active_set: Vec::new(),
            gamma_inv: vec![0.0; pilot.k],
        });
    }
    let cols: Vec<Vec<C64>> = col_ids.iter().map(|&j| dense_column(pilot, j)).collect();
    let x = normal_solve(&cols, y, genie.noise_var)?;
    Ok(Estimate {
        h_hat: scatter(pilot, &col_ids, &x),
        active_set: active,
        gamma_inv: vec![0.0; pilot.k],
    })
}

/// Analytic per-realization MSE of `ga_mmse` under the unit channel prior:
/// `trace(σ_w² (P_AᴴP_A + σ_w²I)⁻¹)`.
pub fn posterior_mse_oracle(
    pilot: &ExpandedPilot,
    active_set: &[usize],
    noise_var: f64,
) -> Result<f64> {
    if noise_var == 0.0 || active_set.is_empty() {
        return Ok(0.0);
    }
    let col_ids = columns_of_users(pilot, active_set);
    let cols: Vec<Vec<C64>> = col_ids.iter().map(|&j| dense_column(pilot, j)).collect();
    let m = cols.len();
    let mut g = gram(&cols, noise_var);
    cholesky(&mut g, m)?;
    let mut trace = 0.0;
    for i in 0..m {
        let mut e = vec![C64::new(0.0, 0.0); m];
        e[i] = C64::new(1.0, 0.0);
        cholesky_solve(&g, m, &mut e);
        trace += e[i].re;
    }
    Ok(noise_var * trace)
}

/// Block-OMP with known active-user count: greedily selects the user block
/// whose correlation with the residual has the largest norm, refitting the
/// least-squares solution on the full selection after every pick.
pub fn bomp(y: &[C64], pilot: &ExpandedPilot, ka: usize) -> Result<Estimate> {
    if y.len() != pilot.n_obs {
        return Err(Error::Dimension(format!(
            "observation length {} does not match N*Lt = {}",
            y.len(),
            pilot.n_obs
        )));
    }
    if ka == 0 || ka > pilot.k {
        return Err(Error::Dimension(format!(
            "active count {} outside 1..={}",
            ka, pilot.k
        )));
    }
    let all_cols: Vec<Vec<C64>> = (0..pilot.n_vars).map(|j| dense_column(pilot, j)).collect();
    let mut selected: Vec<usize> = Vec::with_capacity(ka);
    let mut residual = y.to_vec();
    let mut solution: Vec<C64> = Vec::new();
    let mut col_ids: Vec<usize> = Vec::new();
    for _ in 0..ka {
        let mut best_k = pilot.k;
        let mut best_score = f64::NEG_INFINITY;
        for k in 0..pilot.k {
            if selected.contains(&k) {
                continue;
            }
            let mut score = 0.0;
            for d in 0..pilot.dc {
                score += correlate(&all_cols[k * pilot.dc + d], &residual).norm_sqr();
            }
            if score > best_score {
                best_score = score;
                best_k = k;
            }
        }
        selected.push(best_k);
        selected.sort_unstable();
        col_ids = columns_of_users(pilot, &selected);
        let cols: Vec<Vec<C64>> = col_ids.iter().map(|&j| all_cols[j].clone()).collect();
        solution = normal_solve(&cols, y, 0.0)?;
        residual = y.to_vec();
        for (c, &v) in cols.iter().zip(&solution) {
            for (r, &p) in residual.iter_mut().zip(c) {
                *r -= p * v;
            }
        }
    }
    Ok(Estimate {
        h_hat: scatter(pilot, &col_ids, &solution),
        active_set: selected,
        gamma_inv: vec![0.0; pilot.k],
    })
}
