//! Reference message-passing block sparse Bayesian learning estimator.
//!
//! One `iterate` call is one full sweep: extrinsic aggregation toward the
//! channel variables, posterior update, precision hyper-parameter update,
//! messages back toward the observations, and the noise-precision update.
//! Every division is guarded: variance-producing denominators are floored at
//! `eps_v` (`gp`), signed denominators keep their sign but are floored in
//! magnitude (`gs`), and the noise precision is confined to a fixed range.
//! The weighted network in `unfolded` follows the same guard placement and
//! summation order so that unit weights reproduce this implementation
//! exactly.

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::pilots::ExpandedPilot;
use crate::C64;

pub(crate) const LAMBDA_MIN: f64 = 1e-6;
pub(crate) const LAMBDA_MAX: f64 = 1e9;

/// Positive floor for variances and variance denominators.
#[inline]
pub(crate) fn gp(x: f64, eps: f64) -> f64 {
    if x < eps {
        eps
    } else {
        x
    }
}

/// Sign-preserving magnitude floor for signed denominators.
#[inline]
pub(crate) fn gs(x: f64, eps: f64) -> f64 {
    if x.abs() < eps {
        eps.copysign(x)
    } else {
        x
    }
}

/// Noise-precision clamp; keeps near-noiseless runs finite.
#[inline]
pub(crate) fn clamp_lambda(x: f64) -> f64 {
    x.clamp(LAMBDA_MIN, LAMBDA_MAX)
}

/// Every per-edge, per-variable, and per-observation message of one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    /// Constraint-to-z variance, length N*Lt.
    pub v_dz: Vec<f64>,
    /// Constraint-to-z mean, length N*Lt.
    pub m_dz: Vec<C64>,
    /// Extrinsic variance per variable, length K*dc.
    pub v_q: Vec<f64>,
    /// Extrinsic mean per variable, length K*dc.
    pub m_q: Vec<C64>,
    /// Channel posterior variance, length K*dc.
    pub v_h: Vec<f64>,
    /// Channel posterior mean, length K*dc.
    pub m_h: Vec<C64>,
    /// Block precision estimate per user, length K.
    pub gamma_hat: Vec<f64>,
    /// Noise precision estimate.
    pub lambda_hat: f64,
    /// z-node variance, length N*Lt.
    pub v_z: Vec<f64>,
    /// z-node mean, length N*Lt.
    pub m_z: Vec<C64>,
}

/// Final point estimate with the thresholded activity decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Channel estimate, zero outside active blocks, length K*dc.
    pub h_hat: Vec<C64>,
    /// Detected users, ascending.
    pub active_set: Vec<usize>,
    /// Inverse block precisions, length K.
    pub gamma_inv: Vec<f64>,
}

/// Initial state: unit precision per block, unit constraint variances, zero
/// means, and the configured initial noise precision. Posterior and z-node
/// slots stay zero until the first sweep fills them.
pub fn init_state(cfg: &SystemConfig) -> MessageState {
    let zero = C64::new(0.0, 0.0);
    MessageState {
        v_dz: vec![1.0; cfg.n_obs()],
        m_dz: vec![zero; cfg.n_obs()],
        v_q: vec![0.0; cfg.n_vars()],
        m_q: vec![zero; cfg.n_vars()],
        v_h: vec![0.0; cfg.n_vars()],
        m_h: vec![zero; cfg.n_vars()],
        gamma_hat: vec![1.0; cfg.k],
        lambda_hat: cfg.lambda0,
        v_z: vec![0.0; cfg.n_obs()],
        m_z: vec![zero; cfg.n_obs()],
    }
}

/// Mean-field block precision update from the channel posterior.
pub(crate) fn gamma_from_posteriors(m_h: &[C64], v_h: &[f64], cfg: &SystemConfig) -> Vec<f64> {
    let num = cfg.a + cfg.dc as f64 + 1.0;
    (0..cfg.k)
        .map(|k| {
            let mut sm = 0.0;
            let mut sv = 0.0;
            for d in 0..cfg.dc {
                sm += m_h[k * cfg.dc + d].norm_sqr();
                sv += v_h[k * cfg.dc + d];
            }
            num / gs(cfg.b + sm + sv, cfg.eps_v)
        })
        .collect()
}

/// Mean-field noise precision update from the z-node beliefs.
pub(crate) fn lambda_from_z(m_z: &[C64], v_z: &[f64], y: &[C64], eps: f64) -> f64 {
    let mut sq = 0.0;
    let mut sv = 0.0;
    for n in 0..y.len() {
        sq += (m_z[n] - y[n]).norm_sqr();
        sv += v_z[n];
    }
    clamp_lambda(y.len() as f64 / gp(sq + sv, eps))
}

/// One full sweep; consumes the previous state, never mutates it.
pub fn iterate(
    state: &MessageState,
    y: &[C64],
    pilot: &ExpandedPilot,
    cfg: &SystemConfig,
) -> Result<MessageState> {
    let eps = cfg.eps_v;
    let n_obs = pilot.n_obs;
    let n_vars = pilot.n_vars;
    let ne = pilot.n_edges();
    let lam_old = state.lambda_hat;
    let lam_old_inv = 1.0 / lam_old;

    let mut a1v = vec![0.0f64; ne];
    let mut a1m = vec![C64::new(0.0, 0.0); ne];
    for e in 0..ne {
        let n = pilot.edge_obs[e];
        let p = pilot.edge_val[e];
        let den_v = gs(lam_old_inv + state.v_dz[n], eps);
        a1v[e] = p.norm_sqr() / den_v;
        let den_m = gs(lam_old_inv + state.v_dz[n], eps);
        a1m[e] = p.conj() * (y[n] - state.m_dz[n]) / den_m;
    }

    let mut v_q = vec![0.0f64; n_vars];
    let mut m_q = vec![C64::new(0.0, 0.0); n_vars];
    for j in 0..n_vars {
        let mut sv = 0.0;
        let mut sm = C64::new(0.0, 0.0);
        for e in pilot.edges_of_var(j) {
            sv += a1v[e];
            sm += a1m[e];
        }
        let vq = gp(1.0 / gp(sv, eps), eps);
        v_q[j] = vq;
        m_q[j] = vq * sm + state.m_h[j];
    }

    let mut v_h = vec![0.0f64; n_vars];
    let mut m_h = vec![C64::new(0.0, 0.0); n_vars];
    for j in 0..n_vars {
        let g = state.gamma_hat[j / cfg.dc];
        v_h[j] = gp(1.0 / gp(1.0 / v_q[j] + g, eps), eps);
        m_h[j] = m_q[j] / gs(1.0 + v_q[j] * g, eps);
    }

    let gamma_hat = gamma_from_posteriors(&m_h, &v_h, cfg);

    let mut v_dz = vec![0.0f64; n_obs];
    let mut m_dz = vec![C64::new(0.0, 0.0); n_obs];
    for n in 0..n_obs {
        let mut sv = 0.0;
        let mut sm = C64::new(0.0, 0.0);
        for &e in &pilot.obs_edges[n] {
            let j = pilot.var_of_edge(e);
            let p = pilot.edge_val[e];
            sv += p.norm_sqr() * v_h[j];
            sm += p * m_h[j];
        }
        let vdz = gp(sv, eps);
        v_dz[n] = vdz;
        let corr_den = gs(lam_old_inv + state.v_dz[n], eps);
        m_dz[n] = sm - vdz * (y[n] - state.m_dz[n]) / corr_den;
    }

    let mut v_z = vec![0.0f64; n_obs];
    let mut m_z = vec![C64::new(0.0, 0.0); n_obs];
    for n in 0..n_obs {
        let vz = gp(1.0 / gp(lam_old + 1.0 / v_dz[n], eps), eps);
        v_z[n] = vz;
        m_z[n] = vz * (y[n] * lam_old + m_dz[n] / v_dz[n]);
    }

    let lambda_hat = lambda_from_z(&m_z, &v_z, y, eps);

    let next = MessageState {
        v_dz,
        m_dz,
        v_q,
        m_q,
        v_h,
        m_h,
        gamma_hat,
        lambda_hat,
        v_z,
        m_z,
    };
    check_finite(&next)?;
    Ok(next)
}

pub(crate) fn check_finite(s: &MessageState) -> Result<()> {
    let reals = s
        .v_dz
        .iter()
        .chain(&s.v_q)
        .chain(&s.v_h)
        .chain(&s.gamma_hat)
        .chain(&s.v_z)
        .all(|v| v.is_finite());
    let complexes = s
        .m_dz
        .iter()
        .chain(&s.m_q)
        .chain(&s.m_h)
        .chain(&s.m_z)
        .all(|v| v.re.is_finite() && v.im.is_finite());
    if reals && complexes && s.lambda_hat.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite message after sweep".into()))
    }
}

/// Thresholded activity decision shared by every estimator: user k is active
/// iff its inverse precision strictly exceeds the threshold, and inactive
/// blocks are zeroed.
pub fn threshold_estimate(m_h: &[C64], gamma_hat: &[f64], cfg: &SystemConfig) -> Estimate {
    let mut h_hat = vec![C64::new(0.0, 0.0); m_h.len()];
    let mut active_set = Vec::new();
    let gamma_inv: Vec<f64> = gamma_hat.iter().map(|g| 1.0 / g).collect();
    for (k, &gi) in gamma_inv.iter().enumerate() {
        if gi > cfg.gamma_th {
            active_set.push(k);
            h_hat[k * cfg.dc..(k + 1) * cfg.dc].copy_from_slice(&m_h[k * cfg.dc..(k + 1) * cfg.dc]);
        }
    }
    Estimate {
        h_hat,
        active_set,
        gamma_inv,
    }
}

/// Runs `Nit` sweeps and thresholds.
pub fn run(y: &[C64], pilot: &ExpandedPilot, cfg: &SystemConfig) -> Result<Estimate> {
    let mut state = init_state(cfg);
    for _ in 0..cfg.nit {
        state = iterate(&state, y, pilot, cfg)?;
    }
    Ok(threshold_estimate(&state.m_h, &state.gamma_hat, cfg))
}

/// As `run`, but returns the state after every sweep; used by equivalence
/// checks against the unfolded network.
pub fn run_trace(y: &[C64], pilot: &ExpandedPilot, cfg: &SystemConfig) -> Result<Vec<MessageState>> {
    let mut states = Vec::with_capacity(cfg.nit);
    let mut state = init_state(cfg);
    for _ in 0..cfg.nit {
        state = iterate(&state, y, pilot, cfg)?;
        states.push(state.clone());
    }
    Ok(states)
}
