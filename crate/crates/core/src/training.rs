//! Loss, exact reverse-mode gradients, optimizers, and the training loop.
//!
//! The backward pass mirrors `unfolded::forward_block` statement by
//! statement in reverse. Complex intermediates are differentiated as pairs
//! of reals; an adjoint `ū` packs `∂L/∂Re(u) + i·∂L/∂Im(u)`, so for real
//! scalars `w` the rules are `v = w·u ⇒ ū += w·v̄, ∂L/∂w += Re(v̄·conj(u))`
//! and `v = c·u ⇒ ū += conj(c)·v̄` for complex constants `c`. Guard
//! functions use pass-through sub-gradients inside the active region and
//! zero outside; the cached raw denominators decide which side applies.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::mpbsbl::{gp, gs, init_state, MessageState, LAMBDA_MAX, LAMBDA_MIN};
use crate::pilots::{assemble_expanded_pilot, build_lds_graph, gen_zc_bank, ExpandedPilot};
use crate::scenario::{sample_rng, sample_scenario, Dataset, Scenario};
use crate::unfolded::{forward, gid, init_weights, input_hash, BlockCache, ForwardCache, WeightSet};
use crate::C64;

/// Pass threshold for gradient checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Squared error between a soft estimate and the truth.
pub fn loss_mse(m_h: &[C64], h_true: &[C64]) -> Result<f64> {
    if m_h.len() != h_true.len() {
        return Err(Error::Dimension(format!(
            "estimate has {} entries, truth has {}",
            m_h.len(),
            h_true.len()
        )));
    }
    Ok(m_h
        .iter()
        .zip(h_true)
        .map(|(m, h)| (m - h).norm_sqr())
        .sum())
}

/// Gradient of the loss for every trainable scalar; same nesting as
/// `WeightSet::blocks`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub blocks: Vec<Vec<Vec<f64>>>,
}

impl GradSet {
    pub fn zeros_like(ws: &WeightSet) -> GradSet {
        GradSet {
            blocks: ws
                .blocks
                .iter()
                .map(|b| b.iter().map(|g| vec![0.0; g.len()]).collect())
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |m, &g| m.max(g.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().flatten().all(|g| g.is_finite())
    }
}

/// Adjoints of the messages carried from one block into the next.
struct Carried {
    v_dz: Vec<f64>,
    m_dz: Vec<C64>,
    m_h: Vec<C64>,
    gamma: Vec<f64>,
    lambda: f64,
}

/// Exact gradient of `loss_mse(final m_h, h_true)` with respect to every
/// weight, by reverse traversal of the cached blocks.
pub fn backward(
    cache: &ForwardCache,
    y: &[C64],
    h_true: &[C64],
    pilot: &ExpandedPilot,
    ws: &WeightSet,
    cfg: &SystemConfig,
) -> Result<GradSet> {
    if cache.input_hash != input_hash(ws, y) {
        return Err(Error::CacheMismatch(
            "forward cache was produced from different weights or observations".into(),
        ));
    }
    if h_true.len() != pilot.n_vars {
        return Err(Error::Dimension(format!(
            "truth has {} entries, expected {}",
            h_true.len(),
            pilot.n_vars
        )));
    }
    let zero = C64::new(0.0, 0.0);
    let mut grads = GradSet::zeros_like(ws);
    let mut carried = Carried {
        v_dz: vec![0.0; pilot.n_obs],
        m_dz: vec![zero; pilot.n_obs],
        m_h: cache
            .final_m_h
            .iter()
            .zip(h_true)
            .map(|(m, h)| 2.0 * (m - h))
            .collect(),
        gamma: vec![0.0; cfg.k],
        lambda: 0.0,
    };
    let init = init_state(cfg);
    for l in (0..cache.blocks.len()).rev() {
        let input = if l == 0 { &init } else { &cache.blocks[l - 1].state };
        carried = backward_block(
            input,
            &cache.blocks[l],
            y,
            pilot,
            &ws.blocks[l],
            cfg,
            carried,
            &mut grads.blocks[l],
        );
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn backward_block(
    input: &MessageState,
    bc: &BlockCache,
    y: &[C64],
    pilot: &ExpandedPilot,
    bw: &[Vec<f64>],
    cfg: &SystemConfig,
    out: Carried,
    gb: &mut [Vec<f64>],
) -> Carried {
    let eps = cfg.eps_v;
    let ne = pilot.n_edges();
    let n_obs = pilot.n_obs;
    let n_vars = pilot.n_vars;
    let zero = C64::new(0.0, 0.0);
    let lam_old = input.lambda_hat;
    let linv = 1.0 / lam_old;

    let mut a_vdz = out.v_dz;
    let mut a_mdz = out.m_dz;
    let mut a_mh = out.m_h;
    let a_gamma = out.gamma;
    let mut a_vh = vec![0.0f64; n_vars];
    let mut a_vq = vec![0.0f64; n_vars];
    let mut a_mq = vec![zero; n_vars];
    let mut a_mz = vec![zero; n_obs];
    let mut a_vz = vec![0.0f64; n_obs];
    let mut a_a1v = vec![0.0f64; ne];
    let mut a_a1m = vec![zero; ne];

    let mut in_vdz = vec![0.0f64; n_obs];
    let mut in_mdz = vec![zero; n_obs];
    let mut in_mh = vec![zero; n_vars];
    let mut in_gamma = vec![0.0f64; cfg.k];
    let mut in_lam = 0.0f64;
    let mut a_linv = 0.0f64;

    let gld = gp(bc.lam_den, eps);
    let lam_raw = n_obs as f64 / gld;
    let a_raw = if lam_raw > LAMBDA_MIN && lam_raw < LAMBDA_MAX {
        out.lambda
    } else {
        0.0
    };
    let a_gld = -(n_obs as f64) / (gld * gld) * a_raw;
    let a_ld = if bc.lam_den >= eps { a_gld } else { 0.0 };
    for n in 0..n_obs {
        a_vz[n] += bw[gid::VZ_TO_LAM][n] * a_ld;
        gb[gid::VZ_TO_LAM][n] += bc.state.v_z[n] * a_ld;
        let r = bc.state.m_z[n] * bw[gid::MZ_TO_LAM][n] - y[n] * bw[gid::Y_TO_LAM][n];
        let a_r = 2.0 * a_ld * r;
        a_mz[n] += bw[gid::MZ_TO_LAM][n] * a_r;
        gb[gid::MZ_TO_LAM][n] += (a_r * bc.state.m_z[n].conj()).re;
        gb[gid::Y_TO_LAM][n] -= (a_r * y[n].conj()).re;
    }

    for n in 0..n_obs {
        let vdz = bc.state.v_dz[n];
        let mdz = bc.state.m_dz[n];
        let vz = bc.state.v_z[n];
        let t = mdz / vdz;
        let q = y[n] * lam_old * bw[gid::YLAM_TO_MZ][n] + t * bw[gid::MDZ_VDZ_TO_MZ][n];
        let a_mzn = a_mz[n];
        let mut a_vzn = a_vz[n];
        a_vzn += (a_mzn * q.conj()).re;
        let a_q = vz * a_mzn;
        in_lam += (a_q * y[n].conj()).re * bw[gid::YLAM_TO_MZ][n];
        gb[gid::YLAM_TO_MZ][n] += (a_q * (y[n] * lam_old).conj()).re;
        let a_t = bw[gid::MDZ_VDZ_TO_MZ][n] * a_q;
        gb[gid::MDZ_VDZ_TO_MZ][n] += (a_q * t.conj()).re;
        a_mdz[n] += a_t / vdz;
        a_vdz[n] -= (a_t * mdz.conj()).re / (vdz * vdz);

        let dz = bc.den_vz[n];
        let gdz = gp(dz, eps);
        let inner = 1.0 / gdz;
        let a_inner = if inner >= eps { a_vzn } else { 0.0 };
        let a_gdz = -a_inner / (gdz * gdz);
        let a_dz = if dz >= eps { a_gdz } else { 0.0 };
        in_lam += bw[gid::LAM_TO_VZ][n] * a_dz;
        gb[gid::LAM_TO_VZ][n] += lam_old * a_dz;
        gb[gid::VDZ_TO_VZ][n] += (1.0 / vdz) * a_dz;
        a_vdz[n] -= bw[gid::VDZ_TO_VZ][n] * a_dz / (vdz * vdz);
    }

    for n in 0..n_obs {
        let vdz = bc.state.v_dz[n];
        let a_mdzn = a_mdz[n];
        let a_sm2 = a_mdzn;
        let cd = bc.corr_den[n];
        let gcd = gs(cd, eps);
        let b = y[n] * bw[gid::Y_TO_MDZ][n] - input.m_dz[n] * bw[gid::MDZ_TO_MDZ][n];
        let f = vdz / gcd;
        let a_u = -a_mdzn;
        let a_b = f * a_u;
        let a_f = (a_u * b.conj()).re;
        a_vdz[n] += a_f / gcd;
        let a_gcd = -a_f * vdz / (gcd * gcd);
        gb[gid::Y_TO_MDZ][n] += (a_b * y[n].conj()).re;
        in_mdz[n] -= bw[gid::MDZ_TO_MDZ][n] * a_b;
        gb[gid::MDZ_TO_MDZ][n] -= (a_b * input.m_dz[n].conj()).re;
        let a_cd = if cd.abs() >= eps { a_gcd } else { 0.0 };
        a_linv += bw[gid::LAM_TO_MDZ][n] * a_cd;
        gb[gid::LAM_TO_MDZ][n] += linv * a_cd;
        in_vdz[n] += bw[gid::VDZ_TO_MDZ][n] * a_cd;
        gb[gid::VDZ_TO_MDZ][n] += input.v_dz[n] * a_cd;

        let a_sv2 = if bc.sum_a2v[n] >= eps { a_vdz[n] } else { 0.0 };
        for &e in &pilot.obs_edges[n] {
            let j = pilot.var_of_edge(e);
            let p = pilot.edge_val[e];
            a_vh[j] += p.norm_sqr() * bw[gid::A2V_TO_VDZ][e] * a_sv2;
            gb[gid::A2V_TO_VDZ][e] += p.norm_sqr() * bc.state.v_h[j] * a_sv2;
            a_mh[j] += bw[gid::A2M_TO_MDZ][e] * p.conj() * a_sm2;
            gb[gid::A2M_TO_MDZ][e] += (a_sm2 * (p * bc.state.m_h[j]).conj()).re;
        }
    }

    let num_g = cfg.a + cfg.dc as f64 + 1.0;
    for k in 0..cfg.k {
        let dg = bc.den_g[k];
        let gdg = gs(dg, eps);
        let a_gdg = -num_g / (gdg * gdg) * a_gamma[k];
        let a_dg = if dg.abs() >= eps { a_gdg } else { 0.0 };
        for d in 0..cfg.dc {
            let j = k * cfg.dc + d;
            let mh = bc.state.m_h[j];
            gb[gid::MH_TO_GAMMA][j] += mh.norm_sqr() * a_dg;
            a_mh[j] += 2.0 * (bw[gid::MH_TO_GAMMA][j] * a_dg) * mh;
            gb[gid::VH_TO_GAMMA][j] += bc.state.v_h[j] * a_dg;
            a_vh[j] += bw[gid::VH_TO_GAMMA][j] * a_dg;
        }
    }

    for j in 0..n_vars {
        let g_old = input.gamma_hat[j / cfg.dc];
        let vq = bc.state.v_q[j];
        let mq = bc.state.m_q[j];
        let dmh = bc.den_mh[j];
        let gdmh = gs(dmh, eps);
        let a_mhj = a_mh[j];
        a_mq[j] += a_mhj / gdmh;
        let a_gdmh = -(a_mhj * mq.conj()).re / (gdmh * gdmh);
        let a_dmh = if dmh.abs() >= eps { a_gdmh } else { 0.0 };
        gb[gid::ONE_TO_MH][j] += a_dmh;
        gb[gid::VQ_GAMMA_TO_MH][j] += vq * g_old * a_dmh;
        a_vq[j] += g_old * bw[gid::VQ_GAMMA_TO_MH][j] * a_dmh;
        in_gamma[j / cfg.dc] += vq * bw[gid::VQ_GAMMA_TO_MH][j] * a_dmh;

        let dvh = bc.den_vh[j];
        let gdvh = gp(dvh, eps);
        let inner = 1.0 / gdvh;
        let a_inner = if inner >= eps { a_vh[j] } else { 0.0 };
        let a_gdvh = -a_inner / (gdvh * gdvh);
        let a_dvh = if dvh >= eps { a_gdvh } else { 0.0 };
        a_vq[j] -= a_dvh / (vq * vq);
        in_gamma[j / cfg.dc] += bw[gid::GAMMA_TO_VH][j] * a_dvh;
        gb[gid::GAMMA_TO_VH][j] += g_old * a_dvh;
    }

    for j in 0..n_vars {
        let vq = bc.state.v_q[j];
        let sm = bc.sum_am[j];
        let a_mqj = a_mq[j];
        let a_smj = vq * a_mqj;
        a_vq[j] += (a_mqj * sm.conj()).re;
        in_mh[j] += bw[gid::MH_TO_Q][j] * a_mqj;
        gb[gid::MH_TO_Q][j] += (a_mqj * input.m_h[j].conj()).re;

        let sv = bc.sum_av[j];
        let gsv = gp(sv, eps);
        let inv = 1.0 / gsv;
        let a_inv = if inv >= eps { a_vq[j] } else { 0.0 };
        let a_gsv = -a_inv / (gsv * gsv);
        let a_sv = if sv >= eps { a_gsv } else { 0.0 };
        for e in pilot.edges_of_var(j) {
            a_a1v[e] = bw[gid::A1V_TO_VQ][e] * a_sv;
            gb[gid::A1V_TO_VQ][e] += bc.a1v[e] * a_sv;
            a_a1m[e] = bw[gid::A1M_TO_MQ][e] * a_smj;
            gb[gid::A1M_TO_MQ][e] += (a_smj * bc.a1m[e].conj()).re;
        }
    }

    for e in 0..ne {
        let n = pilot.edge_obs[e];
        let p = pilot.edge_val[e];
        let dv = bc.den_v[e];
        let gdv = gs(dv, eps);
        let a_gdv = -p.norm_sqr() / (gdv * gdv) * a_a1v[e];
        let a_dv = if dv.abs() >= eps { a_gdv } else { 0.0 };
        a_linv += bw[gid::LAM_TO_A1V][e] * a_dv;
        gb[gid::LAM_TO_A1V][e] += linv * a_dv;
        in_vdz[n] += bw[gid::VDZ_TO_A1V][e] * a_dv;
        gb[gid::VDZ_TO_A1V][e] += input.v_dz[n] * a_dv;

        let dm = bc.den_m[e];
        let gdm = gs(dm, eps);
        let num = p.conj() * (y[n] * bw[gid::Y_TO_A1M][e] - input.m_dz[n] * bw[gid::MDZ_TO_A1M][e]);
        let a_num = a_a1m[e] / gdm;
        let a_gdm = -(a_a1m[e] * num.conj()).re / (gdm * gdm);
        let a_dm = if dm.abs() >= eps { a_gdm } else { 0.0 };
        a_linv += bw[gid::LAM_TO_A1M][e] * a_dm;
        gb[gid::LAM_TO_A1M][e] += linv * a_dm;
        in_vdz[n] += bw[gid::VDZ_TO_A1M][e] * a_dm;
        gb[gid::VDZ_TO_A1M][e] += input.v_dz[n] * a_dm;
        let a_in = p * a_num;
        gb[gid::Y_TO_A1M][e] += (a_in * y[n].conj()).re;
        in_mdz[n] -= bw[gid::MDZ_TO_A1M][e] * a_in;
        gb[gid::MDZ_TO_A1M][e] -= (a_in * input.m_dz[n].conj()).re;
    }

    in_lam -= a_linv / (lam_old * lam_old);
    Carried {
        v_dz: in_vdz,
        m_dz: in_mdz,
        m_h: in_mh,
        gamma: in_gamma,
        lambda: in_lam,
    }
}

/// Finite-difference comparison for one instance. `backward_fn` is injected
/// so a deliberately broken rule can serve as a negative control.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_instance<F>(
    y: &[C64],
    h_true: &[C64],
    pilot: &ExpandedPilot,
    ws: &WeightSet,
    cfg: &SystemConfig,
    n_probes: usize,
    seed: u64,
    backward_fn: F,
) -> Result<f64>
where
    F: Fn(&ForwardCache, &[C64], &[C64], &ExpandedPilot, &WeightSet, &SystemConfig) -> Result<GradSet>,
{
    let cache = forward(y, pilot, ws, cfg)?;
    let grads = backward_fn(&cache, y, h_true, pilot, ws, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..n_probes {
        let l = rng.gen_range(0..ws.blocks.len());
        let g = rng.gen_range(0..ws.blocks[l].len());
        let i = rng.gen_range(0..ws.blocks[l][g].len());
        let probe = |delta: f64| -> Result<f64> {
            let mut w2 = ws.clone();
            w2.blocks[l][g][i] += delta;
            let c = forward(y, pilot, &w2, cfg)?;
            loss_mse(&c.final_m_h, h_true)
        };
        let fd = (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP);
        let a = grads.blocks[l][g][i];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-3);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Runs the finite-difference comparison over `trials` random instances,
/// probing at least 200 random parameters each; returns the max relative
/// error. Values below `GRAD_TOL` pass.
pub fn grad_check(cfg: &SystemConfig, trials: usize, seed: u64) -> Result<f64> {
    let bank = gen_zc_bank(cfg.lt, cfg.k)?;
    let graph = build_lds_graph(cfg.n, cfg.k, cfg.dc, cfg.graph_seed)?;
    let pilot = assemble_expanded_pilot(&bank, &graph);
    let snrs = [0.0, 5.0, 10.0, 15.0];
    let mut max_rel = 0.0f64;
    for t in 0..trials {
        let ws = if t == 0 {
            init_weights(cfg)
        } else {
            let mut ws = init_weights(cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15 ^ t as u64);
            for block in &mut ws.blocks {
                for group in block {
                    for w in group {
                        *w = rng.gen_range(0.5..1.5);
                    }
                }
            }
            ws
        };
        let mut rng = sample_rng(seed, t as u64);
        let s = sample_scenario(cfg, &pilot, snrs[t % snrs.len()], &mut rng);
        let rel = grad_check_instance(
            &s.y,
            &s.h_bar,
            &pilot,
            &ws,
            cfg,
            200,
            seed.wrapping_add(t as u64),
            backward,
        )?;
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Adam accumulators; moments are shape-congruent with the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<Vec<f64>>>,
    pub v: Vec<Vec<Vec<f64>>>,
}

impl OptState {
    pub fn new(ws: &WeightSet, lr: f64) -> OptState {
        let zeros: Vec<Vec<Vec<f64>>> = ws
            .blocks
            .iter()
            .map(|b| b.iter().map(|g| vec![0.0; g.len()]).collect())
            .collect();
        OptState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

fn check_congruent(ws: &WeightSet, grads: &GradSet, opt: &OptState) -> Result<()> {
    let same = |a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]| {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.len() == y.len() && x.iter().zip(y).all(|(u, v)| u.len() == v.len())
            })
    };
    if !same(&ws.blocks, &grads.blocks) || !same(&ws.blocks, &opt.m) || !same(&ws.blocks, &opt.v) {
        return Err(Error::Dimension(
            "weights, gradients, and optimizer moments are not shape-congruent".into(),
        ));
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(ws: &mut WeightSet, grads: &GradSet, opt: &mut OptState) -> Result<()> {
    check_congruent(ws, grads, opt)?;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for l in 0..ws.blocks.len() {
        for g in 0..ws.blocks[l].len() {
            for i in 0..ws.blocks[l][g].len() {
                let grad = grads.blocks[l][g][i];
                let m = &mut opt.m[l][g][i];
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * grad;
                let v = &mut opt.v[l][g][i];
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * grad * grad;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                ws.blocks[l][g][i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
            }
        }
    }
    Ok(())
}

/// Plain SGD update; shares the step counter for reporting.
pub fn sgd_step(ws: &mut WeightSet, grads: &GradSet, opt: &mut OptState) -> Result<()> {
    check_congruent(ws, grads, opt)?;
    opt.step += 1;
    for l in 0..ws.blocks.len() {
        for g in 0..ws.blocks[l].len() {
            for i in 0..ws.blocks[l][g].len() {
                ws.blocks[l][g][i] -= opt.lr * grads.blocks[l][g][i];
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// Compensated batch-gradient accumulator; the mean is invariant to sample
/// order within 1e-12 relative.
pub struct GradAccum {
    sum: Vec<Vec<Vec<Kahan>>>,
    count: usize,
}

impl GradAccum {
    pub fn zeros_like(ws: &WeightSet) -> GradAccum {
        GradAccum {
            sum: ws
                .blocks
                .iter()
                .map(|b| b.iter().map(|g| vec![Kahan::default(); g.len()]).collect())
                .collect(),
            count: 0,
        }
    }

    pub fn add(&mut self, grads: &GradSet) {
        for (sb, gb) in self.sum.iter_mut().zip(&grads.blocks) {
            for (sg, gg) in sb.iter_mut().zip(gb) {
                for (s, &g) in sg.iter_mut().zip(gg) {
                    s.add(g);
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Batch gradient: sum over samples divided by sample count.
    pub fn mean(&self) -> Result<GradSet> {
        if self.count == 0 {
            return Err(Error::Config("empty gradient batch".into()));
        }
        let n = self.count as f64;
        Ok(GradSet {
            blocks: self
                .sum
                .iter()
                .map(|b| {
                    b.iter()
                        .map(|g| g.iter().map(|k| k.value() / n).collect())
                        .collect()
                })
                .collect(),
        })
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Samples reserved from the end of the dataset for held-out NMSE.
    pub holdout: usize,
    pub shuffle_seed: u64,
    pub use_sgd: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64, holdout: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            lr,
            holdout,
            shuffle_seed: 0,
            use_sgd: false,
        }
    }
}

/// Per-epoch history plus provenance; vector lengths equal the number of
/// completed epochs.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_nmse: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub init_nmse: f64,
    /// Epoch whose weights are returned; 0 means the initialization.
    pub best_epoch: usize,
    pub best_nmse: f64,
    pub wall_clock: Duration,
    pub seed: u64,
    pub fingerprint: u64,
    pub note: Option<String>,
}

/// Mean NMSE of the soft estimate over samples with nonzero truth.
fn holdout_nmse(
    ws: &WeightSet,
    samples: &[Scenario],
    pilot: &ExpandedPilot,
    cfg: &SystemConfig,
) -> Result<f64> {
    let mut sum = Kahan::default();
    let mut n = 0usize;
    for s in samples {
        let denom: f64 = s.h_bar.iter().map(|h| h.norm_sqr()).sum();
        if denom == 0.0 {
            continue;
        }
        let cache = forward(&s.y, pilot, ws, cfg)?;
        sum.add(loss_mse(&cache.final_m_h, &s.h_bar)? / denom);
        n += 1;
    }
    if n == 0 {
        return Err(Error::DegenerateSample(
            "holdout contains no samples with active users".into(),
        ));
    }
    Ok(sum.value() / n as f64)
}

/// Trains from the all-ones initialization and returns the weights of the
/// best held-out epoch (possibly the initialization itself). A numerical
/// failure mid-run aborts and returns the best weights seen, with a note.
pub fn train(
    dataset: &Dataset,
    pilot: &ExpandedPilot,
    cfg: &SystemConfig,
    tc: &TrainConfig,
) -> Result<(WeightSet, TrainReport)> {
    dataset.verify_against(cfg)?;
    if tc.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if tc.holdout == 0 || tc.holdout >= dataset.samples.len() {
        return Err(Error::Config(format!(
            "holdout of {} must leave both holdout and training samples from {}",
            tc.holdout,
            dataset.samples.len()
        )));
    }
    let split = dataset.samples.len() - tc.holdout;
    let (train_s, hold_s) = dataset.samples.split_at(split);

    let start = Instant::now();
    let mut ws = init_weights(cfg);
    let mut opt = OptState::new(&ws, tc.lr);
    let init_nmse = holdout_nmse(&ws, hold_s, pilot, cfg)?;
    let mut best_ws = ws.clone();
    let mut best_nmse = init_nmse;
    let mut best_epoch = 0usize;
    let mut note: Option<String> = None;
    let mut epoch_loss = Vec::new();
    let mut epoch_nmse = Vec::new();
    let mut epoch_seconds = Vec::new();

    'epochs: for epoch in 1..=tc.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..train_s.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = Kahan::default();
        let mut loss_n = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let mut acc = GradAccum::zeros_like(&ws);
            for &idx in batch {
                let s = &train_s[idx];
                let cache = match forward(&s.y, pilot, &ws, cfg) {
                    Ok(c) => c,
                    Err(Error::Numerical(msg)) => {
                        note = Some(format!("aborted in epoch {}: {}", epoch, msg));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                loss_sum.add(loss_mse(&cache.final_m_h, &s.h_bar)?);
                loss_n += 1;
                let grads = backward(&cache, &s.y, &s.h_bar, pilot, &ws, cfg)?;
                acc.add(&grads);
            }
            let grads = acc.mean()?;
            if !grads.is_finite() {
                note = Some(format!("aborted in epoch {}: non-finite batch gradient", epoch));
                break 'epochs;
            }
            if tc.use_sgd {
                sgd_step(&mut ws, &grads, &mut opt)?;
            } else {
                adam_step(&mut ws, &grads, &mut opt)?;
            }
        }

        epoch_loss.push(loss_sum.value() / loss_n as f64);
        let nmse = match holdout_nmse(&ws, hold_s, pilot, cfg) {
            Ok(v) => v,
            Err(Error::Numerical(msg)) => {
                note = Some(format!("aborted in epoch {}: {}", epoch, msg));
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        epoch_nmse.push(nmse);
        epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
        if nmse < best_nmse {
            best_nmse = nmse;
            best_epoch = epoch;
            best_ws = ws.clone();
        }
    }

    if note.is_none() && tc.epochs > 0 && best_epoch == 0 {
        note = Some("no held-out improvement over the initialization".into());
    }
    let report = TrainReport {
        epoch_loss,
        epoch_nmse,
        epoch_seconds,
        init_nmse,
        best_epoch,
        best_nmse,
        wall_clock: start.elapsed(),
        seed: tc.shuffle_seed,
        fingerprint: cfg.fingerprint(),
        note,
    };
    Ok((best_ws, report))
}
