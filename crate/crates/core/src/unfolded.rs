//! Deep-unfolded weighted variant of the message-passing estimator.
//!
//! Each iteration becomes a block of nine layers; every message flow carries
//! one real trainable scalar per factor-graph connection, stored directly on
//! the sparsity mask. With every weight at one the block reproduces
//! `mpbsbl::iterate` bit for bit: both implementations traverse the same
//! adjacency in the same order and share the same guards.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::bytes::{Cursor, Fnv64};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::mpbsbl::{
    check_finite, clamp_lambda, gp, gs, init_state, threshold_estimate, Estimate, MessageState,
};
use crate::pilots::ExpandedPilot;
use crate::training::OptState;
use crate::C64;

/// Mask domain of a weight group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskShape {
    /// One scalar per factor-graph edge.
    Edges,
    /// One scalar per channel variable.
    Vars,
    /// One scalar per observation.
    Obs,
}

/// Canonical weight-group catalogue: name and mask shape, in storage order.
pub const GROUPS: [(&str, MaskShape); 27] = [
    ("lam_to_a1v", MaskShape::Edges),
    ("vdz_to_a1v", MaskShape::Edges),
    ("y_to_a1m", MaskShape::Edges),
    ("mdz_to_a1m", MaskShape::Edges),
    ("lam_to_a1m", MaskShape::Edges),
    ("vdz_to_a1m", MaskShape::Edges),
    ("a1v_to_vq", MaskShape::Edges),
    ("a1m_to_mq", MaskShape::Edges),
    ("mh_to_q", MaskShape::Vars),
    ("gamma_to_vh", MaskShape::Vars),
    ("one_to_mh", MaskShape::Vars),
    ("vq_gamma_to_mh", MaskShape::Vars),
    ("mh_to_gamma", MaskShape::Vars),
    ("vh_to_gamma", MaskShape::Vars),
    ("a2v_to_vdz", MaskShape::Edges),
    ("a2m_to_mdz", MaskShape::Edges),
    ("y_to_mdz", MaskShape::Obs),
    ("mdz_to_mdz", MaskShape::Obs),
    ("lam_to_mdz", MaskShape::Obs),
    ("vdz_to_mdz", MaskShape::Obs),
    ("lam_to_vz", MaskShape::Obs),
    ("vdz_to_vz", MaskShape::Obs),
    ("ylam_to_mz", MaskShape::Obs),
    ("mdz_vdz_to_mz", MaskShape::Obs),
    ("mz_to_lam", MaskShape::Obs),
    ("y_to_lam", MaskShape::Obs),
    ("vz_to_lam", MaskShape::Obs),
];

/// Group indices into `GROUPS` and `WeightSet::blocks[l]`.
pub mod gid {
    pub const LAM_TO_A1V: usize = 0;
    pub const VDZ_TO_A1V: usize = 1;
    pub const Y_TO_A1M: usize = 2;
    pub const MDZ_TO_A1M: usize = 3;
    pub const LAM_TO_A1M: usize = 4;
    pub const VDZ_TO_A1M: usize = 5;
    pub const A1V_TO_VQ: usize = 6;
    pub const A1M_TO_MQ: usize = 7;
    pub const MH_TO_Q: usize = 8;
    pub const GAMMA_TO_VH: usize = 9;
    pub const ONE_TO_MH: usize = 10;
    pub const VQ_GAMMA_TO_MH: usize = 11;
    pub const MH_TO_GAMMA: usize = 12;
    pub const VH_TO_GAMMA: usize = 13;
    pub const A2V_TO_VDZ: usize = 14;
    pub const A2M_TO_MDZ: usize = 15;
    pub const Y_TO_MDZ: usize = 16;
    pub const MDZ_TO_MDZ: usize = 17;
    pub const LAM_TO_MDZ: usize = 18;
    pub const VDZ_TO_MDZ: usize = 19;
    pub const LAM_TO_VZ: usize = 20;
    pub const VDZ_TO_VZ: usize = 21;
    pub const YLAM_TO_MZ: usize = 22;
    pub const MDZ_VDZ_TO_MZ: usize = 23;
    pub const MZ_TO_LAM: usize = 24;
    pub const Y_TO_LAM: usize = 25;
    pub const VZ_TO_LAM: usize = 26;
}

/// Mask support size of a shape under a config.
pub fn mask_len(shape: MaskShape, cfg: &SystemConfig) -> usize {
    match shape {
        MaskShape::Edges => cfg.dims().n_edges,
        MaskShape::Vars => cfg.n_vars(),
        MaskShape::Obs => cfg.n_obs(),
    }
}

/// Trainable weights, untied across iteration blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    /// Fingerprint of the config these weights were built for.
    pub fingerprint: u64,
    pub n_edges: usize,
    pub n_vars: usize,
    pub n_obs: usize,
    /// `blocks[l][g][i]`: block l, group g in `GROUPS` order, mask slot i.
    pub blocks: Vec<Vec<Vec<f64>>>,
}

impl WeightSet {
    /// Iteration-block count.
    pub fn nit(&self) -> usize {
        self.blocks.len()
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.iter().map(Vec::len).sum::<usize>())
            .sum()
    }

    /// Validates group lengths against the masks implied by the config.
    pub fn from_blocks(cfg: &SystemConfig, blocks: Vec<Vec<Vec<f64>>>) -> Result<WeightSet> {
        for (l, block) in blocks.iter().enumerate() {
            if block.len() != GROUPS.len() {
                return Err(Error::Shape(format!(
                    "block {} has {} weight groups, expected {}",
                    l,
                    block.len(),
                    GROUPS.len()
                )));
            }
            for (g, values) in block.iter().enumerate() {
                let want = mask_len(GROUPS[g].1, cfg);
                if values.len() != want {
                    return Err(Error::Shape(format!(
                        "block {} group {:?} holds {} scalars but its mask has {}",
                        l,
                        GROUPS[g].0,
                        values.len(),
                        want
                    )));
                }
            }
        }
        Ok(WeightSet {
            fingerprint: cfg.fingerprint(),
            n_edges: cfg.dims().n_edges,
            n_vars: cfg.n_vars(),
            n_obs: cfg.n_obs(),
            blocks,
        })
    }
}

/// All-ones initialization: the network starts as the unweighted algorithm.
pub fn init_weights(cfg: &SystemConfig) -> WeightSet {
    let blocks: Vec<Vec<Vec<f64>>> = (0..cfg.nit)
        .map(|_| {
            GROUPS
                .iter()
                .map(|&(_, shape)| vec![1.0; mask_len(shape, cfg)])
                .collect()
        })
        .collect();
    let ws = WeightSet::from_blocks(cfg, blocks).expect("all-ones blocks are shape-correct");
    let d = cfg.dims();
    let per_block = 10 * d.n_edges + 6 * cfg.n_vars() + 11 * cfg.n_obs();
    assert_eq!(
        ws.param_count(),
        cfg.nit * per_block,
        "weight-group catalogue disagrees with the declared shape table"
    );
    ws
}

/// Everything the backward pass needs from one block: the block's output
/// state plus every raw (pre-guard) denominator and aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    /// Output messages of this block.
    pub state: MessageState,
    /// Raw variance denominator per edge.
    pub den_v: Vec<f64>,
    /// Raw mean denominator per edge.
    pub den_m: Vec<f64>,
    /// Per-edge variance contribution (post-division).
    pub a1v: Vec<f64>,
    /// Per-edge mean contribution (post-division).
    pub a1m: Vec<C64>,
    /// Raw weighted aggregation feeding each v_Q.
    pub sum_av: Vec<f64>,
    /// Weighted aggregation feeding each m_Q.
    pub sum_am: Vec<C64>,
    /// Raw posterior variance denominator per variable.
    pub den_vh: Vec<f64>,
    /// Raw posterior mean denominator per variable.
    pub den_mh: Vec<f64>,
    /// Raw precision denominator per user.
    pub den_g: Vec<f64>,
    /// Raw weighted aggregation feeding each v_dz.
    pub sum_a2v: Vec<f64>,
    /// Raw correction denominator per observation.
    pub corr_den: Vec<f64>,
    /// Raw z variance denominator per observation.
    pub den_vz: Vec<f64>,
    /// Raw noise precision denominator.
    pub lam_den: f64,
}

/// Layer outputs of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    /// Soft channel estimate after the last block.
    pub final_m_h: Vec<C64>,
    pub final_gamma: Vec<f64>,
    pub final_lambda: f64,
    /// Hash binding this cache to its weights and observation.
    pub input_hash: u64,
}

pub(crate) fn input_hash(ws: &WeightSet, y: &[C64]) -> u64 {
    let mut h = Fnv64::new();
    h.write_u64(ws.fingerprint);
    h.write_u64(ws.nit() as u64);
    for block in &ws.blocks {
        for group in block {
            for &w in group {
                h.write_f64(w);
            }
        }
    }
    for v in y {
        h.write_f64(v.re);
        h.write_f64(v.im);
    }
    h.finish()
}

/// One weighted iteration block (layers 2 through 9).
pub fn forward_block(
    state: &MessageState,
    y: &[C64],
    pilot: &ExpandedPilot,
    bw: &[Vec<f64>],
    cfg: &SystemConfig,
) -> Result<(MessageState, BlockCache)> {
    let eps = cfg.eps_v;
    let ne = pilot.n_edges();
    let n_vars = pilot.n_vars;
    let n_obs = pilot.n_obs;
    let zero = C64::new(0.0, 0.0);
    let lam_old = state.lambda_hat;
    let lam_old_inv = 1.0 / lam_old;

    let mut den_v = vec![0.0f64; ne];
    let mut den_m = vec![0.0f64; ne];
    let mut a1v = vec![0.0f64; ne];
    let mut a1m = vec![zero; ne];
    for e in 0..ne {
        let n = pilot.edge_obs[e];
        let p = pilot.edge_val[e];
        let dv = lam_old_inv * bw[gid::LAM_TO_A1V][e] + state.v_dz[n] * bw[gid::VDZ_TO_A1V][e];
        den_v[e] = dv;
        a1v[e] = p.norm_sqr() / gs(dv, eps);
        let num = p.conj() * (y[n] * bw[gid::Y_TO_A1M][e] - state.m_dz[n] * bw[gid::MDZ_TO_A1M][e]);
        let dm = lam_old_inv * bw[gid::LAM_TO_A1M][e] + state.v_dz[n] * bw[gid::VDZ_TO_A1M][e];
        den_m[e] = dm;
        a1m[e] = num / gs(dm, eps);
    }

    let mut sum_av = vec![0.0f64; n_vars];
    let mut sum_am = vec![zero; n_vars];
    let mut v_q = vec![0.0f64; n_vars];
    let mut m_q = vec![zero; n_vars];
    for j in 0..n_vars {
        let mut sv = 0.0;
        let mut sm = zero;
        for e in pilot.edges_of_var(j) {
            sv += a1v[e] * bw[gid::A1V_TO_VQ][e];
            sm += a1m[e] * bw[gid::A1M_TO_MQ][e];
        }
        sum_av[j] = sv;
        sum_am[j] = sm;
        let vq = gp(1.0 / gp(sv, eps), eps);
        v_q[j] = vq;
        m_q[j] = vq * sm + state.m_h[j] * bw[gid::MH_TO_Q][j];
    }

    let mut den_vh = vec![0.0f64; n_vars];
    let mut den_mh = vec![0.0f64; n_vars];
    let mut v_h = vec![0.0f64; n_vars];
    let mut m_h = vec![zero; n_vars];
    for j in 0..n_vars {
        let g = state.gamma_hat[j / cfg.dc];
        let dvh = 1.0 / v_q[j] + g * bw[gid::GAMMA_TO_VH][j];
        den_vh[j] = dvh;
        v_h[j] = gp(1.0 / gp(dvh, eps), eps);
        let dmh = bw[gid::ONE_TO_MH][j] + v_q[j] * g * bw[gid::VQ_GAMMA_TO_MH][j];
        den_mh[j] = dmh;
        m_h[j] = m_q[j] / gs(dmh, eps);
    }

    let num_g = cfg.a + cfg.dc as f64 + 1.0;
    let mut den_g = vec![0.0f64; cfg.k];
    let mut gamma_hat = vec![0.0f64; cfg.k];
    for k in 0..cfg.k {
        let mut sm = 0.0;
        let mut sv = 0.0;
        for d in 0..cfg.dc {
            let j = k * cfg.dc + d;
            sm += m_h[j].norm_sqr() * bw[gid::MH_TO_GAMMA][j];
            sv += v_h[j] * bw[gid::VH_TO_GAMMA][j];
        }
        let dg = cfg.b + sm + sv;
        den_g[k] = dg;
        gamma_hat[k] = num_g / gs(dg, eps);
    }

    let mut sum_a2v = vec![0.0f64; n_obs];
    let mut corr_den = vec![0.0f64; n_obs];
    let mut v_dz = vec![0.0f64; n_obs];
    let mut m_dz = vec![zero; n_obs];
    for n in 0..n_obs {
        let mut sv = 0.0;
        let mut sm = zero;
        for &e in &pilot.obs_edges[n] {
            let j = pilot.var_of_edge(e);
            let p = pilot.edge_val[e];
            sv += (p.norm_sqr() * v_h[j]) * bw[gid::A2V_TO_VDZ][e];
            sm += (p * m_h[j]) * bw[gid::A2M_TO_MDZ][e];
        }
        sum_a2v[n] = sv;
        let vdz = gp(sv, eps);
        v_dz[n] = vdz;
        let cd = lam_old_inv * bw[gid::LAM_TO_MDZ][n] + state.v_dz[n] * bw[gid::VDZ_TO_MDZ][n];
        corr_den[n] = cd;
        let b = y[n] * bw[gid::Y_TO_MDZ][n] - state.m_dz[n] * bw[gid::MDZ_TO_MDZ][n];
        m_dz[n] = sm - vdz * b / gs(cd, eps);
    }

    let mut den_vz = vec![0.0f64; n_obs];
    let mut v_z = vec![0.0f64; n_obs];
    let mut m_z = vec![zero; n_obs];
    for n in 0..n_obs {
        let dz = lam_old * bw[gid::LAM_TO_VZ][n] + (1.0 / v_dz[n]) * bw[gid::VDZ_TO_VZ][n];
        den_vz[n] = dz;
        let vz = gp(1.0 / gp(dz, eps), eps);
        v_z[n] = vz;
        m_z[n] = vz
            * (y[n] * lam_old * bw[gid::YLAM_TO_MZ][n]
                + (m_dz[n] / v_dz[n]) * bw[gid::MDZ_VDZ_TO_MZ][n]);
    }

    let mut sq = 0.0;
    let mut svz = 0.0;
    for n in 0..n_obs {
        sq += (m_z[n] * bw[gid::MZ_TO_LAM][n] - y[n] * bw[gid::Y_TO_LAM][n]).norm_sqr();
        svz += v_z[n] * bw[gid::VZ_TO_LAM][n];
    }
    let lam_den = sq + svz;
    let lambda_hat = clamp_lambda(n_obs as f64 / gp(lam_den, eps));

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
    Ok((
        next.clone(),
        BlockCache {
            state: next,
            den_v,
            den_m,
            a1v,
            a1m,
            sum_av,
            sum_am,
            den_vh,
            den_mh,
            den_g,
            sum_a2v,
            corr_den,
            den_vz,
            lam_den,
        },
    ))
}

fn check_compat(ws: &WeightSet, y: &[C64], pilot: &ExpandedPilot, cfg: &SystemConfig) -> Result<()> {
    if ws.fingerprint != cfg.fingerprint() {
        return Err(Error::Fingerprint(format!(
            "weights carry fingerprint {:016x}, config is {:016x}",
            ws.fingerprint,
            cfg.fingerprint()
        )));
    }
    if ws.n_edges != pilot.n_edges() || ws.n_vars != pilot.n_vars || ws.n_obs != pilot.n_obs {
        return Err(Error::Shape(format!(
            "weight masks sized for ({}, {}, {}) but pilot has ({}, {}, {})",
            ws.n_edges,
            ws.n_vars,
            ws.n_obs,
            pilot.n_edges(),
            pilot.n_vars,
            pilot.n_obs
        )));
    }
    if y.len() != pilot.n_obs {
        return Err(Error::Dimension(format!(
            "observation length {} does not match N*Lt = {}",
            y.len(),
            pilot.n_obs
        )));
    }
    Ok(())
}

/// Full forward pass: one block per entry of `weights.blocks`, starting from
/// the standard initialization. Zero blocks returns the initialization.
pub fn forward(
    y: &[C64],
    pilot: &ExpandedPilot,
    weights: &WeightSet,
    cfg: &SystemConfig,
) -> Result<ForwardCache> {
    check_compat(weights, y, pilot, cfg)?;
    let mut state = init_state(cfg);
    let mut blocks = Vec::with_capacity(weights.nit());
    for bw in &weights.blocks {
        let (next, cache) = forward_block(&state, y, pilot, bw, cfg)?;
        blocks.push(cache);
        state = next;
    }
    Ok(ForwardCache {
        blocks,
        final_m_h: state.m_h,
        final_gamma: state.gamma_hat,
        final_lambda: state.lambda_hat,
        input_hash: input_hash(weights, y),
    })
}

/// Forward pass plus the thresholded activity decision.
pub fn infer(
    y: &[C64],
    pilot: &ExpandedPilot,
    weights: &WeightSet,
    cfg: &SystemConfig,
) -> Result<Estimate> {
    let cache = forward(y, pilot, weights, cfg)?;
    Ok(threshold_estimate(&cache.final_m_h, &cache.final_gamma, cfg))
}

const MAGIC: &[u8; 5] = b"WSET1";
const VERSION: u8 = 1;
const OPT_MAGIC: &[u8; 4] = b"OPT1";

/// Writes weights, and optimizer state when present, to a checkpoint file.
pub fn save_checkpoint(path: &Path, ws: &WeightSet, opt: Option<&OptState>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&ws.fingerprint.to_le_bytes())?;
    w.write_all(&(ws.nit() as u32).to_le_bytes())?;
    for block in &ws.blocks {
        for (g, values) in block.iter().enumerate() {
            let name = GROUPS[g].0.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for &v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    if let Some(opt) = opt {
        w.write_all(OPT_MAGIC)?;
        for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&opt.step.to_le_bytes())?;
        for moments in [&opt.m, &opt.v] {
            for block in moments {
                for group in block {
                    for &v in group {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint and validates magic, version, fingerprint, group
/// names, and counts against the config.
pub fn load_checkpoint(path: &Path, cfg: &SystemConfig) -> Result<(WeightSet, Option<OptState>)> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor::new(&buf);
    if c.take(5)? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}, expected {}",
            version, VERSION
        )));
    }
    let fingerprint = c.u64()?;
    if fingerprint != cfg.fingerprint() {
        return Err(Error::Fingerprint(format!(
            "checkpoint fingerprint {:016x} does not match config {:016x}",
            fingerprint,
            cfg.fingerprint()
        )));
    }
    let nit = c.u32()? as usize;
    let mut blocks = Vec::with_capacity(nit);
    for l in 0..nit {
        let mut block = Vec::with_capacity(GROUPS.len());
        for (g, &(name, shape)) in GROUPS.iter().enumerate() {
            let name_len = c.u32()? as usize;
            let got = c.take(name_len)?;
            if got != name.as_bytes() {
                return Err(Error::Format(format!(
                    "block {} group {}: name {:?} where {:?} was expected",
                    l,
                    g,
                    String::from_utf8_lossy(got),
                    name
                )));
            }
            let count = c.u64()? as usize;
            let want = mask_len(shape, cfg);
            if count != want {
                return Err(Error::Format(format!(
                    "group {:?} stores {} scalars, mask holds {}",
                    name, count, want
                )));
            }
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(c.f64()?);
            }
            block.push(values);
        }
        blocks.push(block);
    }
    let ws = WeightSet::from_blocks(cfg, blocks)?;

    if c.remaining() == 0 {
        return Ok((ws, None));
    }
    if c.take(4)? != OPT_MAGIC {
        return Err(Error::Format("trailing bytes are not an optimizer section".into()));
    }
    let lr = c.f64()?;
    let beta1 = c.f64()?;
    let beta2 = c.f64()?;
    let eps = c.f64()?;
    let step = c.u64()?;
    let read_moments = |c: &mut Cursor| -> Result<Vec<Vec<Vec<f64>>>> {
        let mut out = Vec::with_capacity(ws.nit());
        for block in &ws.blocks {
            let mut ob = Vec::with_capacity(block.len());
            for group in block {
                let mut og = Vec::with_capacity(group.len());
                for _ in 0..group.len() {
                    og.push(c.f64()?);
                }
                ob.push(og);
            }
            out.push(ob);
        }
        Ok(out)
    };
    let m = read_moments(&mut c)?;
    let v = read_moments(&mut c)?;
    if c.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the optimizer section",
            c.remaining()
        )));
    }
    Ok((
        ws,
        Some(OptState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpbsbl;
    use crate::pilots::{assemble_expanded_pilot, build_lds_graph, gen_zc_bank};
    use crate::scenario::{sample_rng, sample_scenario, Scenario};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk(nit: usize) -> (SystemConfig, ExpandedPilot) {
        let mut cfg = SystemConfig::new(20, 4, 5, 2);
        cfg.nit = nit;
        let bank = gen_zc_bank(cfg.lt, cfg.k).unwrap();
        let graph = build_lds_graph(cfg.n, cfg.k, cfg.dc, cfg.graph_seed).unwrap();
        let pilot = assemble_expanded_pilot(&bank, &graph);
        (cfg, pilot)
    }

    fn scen(cfg: &SystemConfig, pilot: &ExpandedPilot, seed: u64, snr: f64) -> Scenario {
        let mut rng = sample_rng(seed, 0);
        sample_scenario(cfg, pilot, snr, &mut rng)
    }

    pub(crate) fn perturbed_weights(cfg: &SystemConfig, seed: u64) -> WeightSet {
        let mut ws = init_weights(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut ws.blocks {
            for group in block {
                for w in group {
                    *w = rng.gen_range(0.5..1.5);
                }
            }
        }
        ws
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    fn assert_states_match(a: &MessageState, b: &MessageState, tol: f64) {
        for (x, y) in a.v_dz.iter().zip(&b.v_dz) {
            assert!(rel(*x, *y) <= tol, "v_dz {} vs {}", x, y);
        }
        for (x, y) in a.v_q.iter().zip(&b.v_q) {
            assert!(rel(*x, *y) <= tol, "v_q {} vs {}", x, y);
        }
        for (x, y) in a.v_h.iter().zip(&b.v_h) {
            assert!(rel(*x, *y) <= tol, "v_h {} vs {}", x, y);
        }
        for (x, y) in a.v_z.iter().zip(&b.v_z) {
            assert!(rel(*x, *y) <= tol, "v_z {} vs {}", x, y);
        }
        for (x, y) in a.gamma_hat.iter().zip(&b.gamma_hat) {
            assert!(rel(*x, *y) <= tol, "gamma {} vs {}", x, y);
        }
        assert!(rel(a.lambda_hat, b.lambda_hat) <= tol);
        for (x, y) in a.m_dz.iter().zip(&b.m_dz) {
            assert!((x - y).norm() <= tol * x.norm().max(y.norm()).max(1e-300));
        }
        for (x, y) in a.m_q.iter().zip(&b.m_q) {
            assert!((x - y).norm() <= tol * x.norm().max(y.norm()).max(1e-300));
        }
        for (x, y) in a.m_h.iter().zip(&b.m_h) {
            assert!((x - y).norm() <= tol * x.norm().max(y.norm()).max(1e-300));
        }
        for (x, y) in a.m_z.iter().zip(&b.m_z) {
            assert!((x - y).norm() <= tol * x.norm().max(y.norm()).max(1e-300));
        }
    }

    #[test]
    fn parameter_count_matches_shape_table() {
        let mut cfg = SystemConfig::new(110, 8, 11, 4);
        cfg.lt = 11;
        let ws = init_weights(&cfg);
        assert_eq!(ws.param_count(), 10 * 52_008);
        let (desk_cfg, _) = desk(10);
        assert_eq!(init_weights(&desk_cfg).param_count(), 10 * 2460);
    }

    #[test]
    fn unit_weights_reproduce_the_reference_per_iteration() {
        let (cfg, pilot) = desk(5);
        let ws = init_weights(&cfg);
        for seed in 0..10u64 {
            let s = scen(&cfg, &pilot, 100 + seed, 8.0);
            let trace = mpbsbl::run_trace(&s.y, &pilot, &cfg).unwrap();
            let cache = forward(&s.y, &pilot, &ws, &cfg).unwrap();
            assert_eq!(trace.len(), cache.blocks.len());
            for (ref_state, block) in trace.iter().zip(&cache.blocks) {
                assert_states_match(ref_state, &block.state, 1e-12);
            }
        }
    }

    #[test]
    fn unit_weight_inference_equals_the_reference_estimate() {
        let (cfg, pilot) = desk(10);
        let ws = init_weights(&cfg);
        let s = scen(&cfg, &pilot, 7, 12.0);
        let a = mpbsbl::run(&s.y, &pilot, &cfg).unwrap();
        let b = infer(&s.y, &pilot, &ws, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layer_lengths_match_the_declared_table() {
        let (cfg, pilot) = desk(3);
        let d = cfg.dims();
        let ws = init_weights(&cfg);
        let s = scen(&cfg, &pilot, 9, 10.0);
        let cache = forward(&s.y, &pilot, &ws, &cfg).unwrap();
        for b in &cache.blocks {
            assert_eq!(s.y.len(), d.layer_len[0]);
            assert_eq!(b.a1v.len(), d.layer_len[1]);
            assert_eq!(b.state.v_q.len(), d.layer_len[2]);
            assert_eq!(b.state.v_h.len(), d.layer_len[3]);
            assert_eq!(b.state.gamma_hat.len(), d.layer_len[4]);
            assert_eq!(pilot.n_edges(), d.layer_len[5]);
            assert_eq!(b.state.v_dz.len(), d.layer_len[6]);
            assert_eq!(b.state.v_z.len(), d.layer_len[7]);
            assert_eq!(d.layer_len[8], 1);
        }
    }

    #[test]
    fn zero_aggregation_weights_hit_the_variance_ceiling() {
        let (cfg, pilot) = desk(1);
        let mut ws = init_weights(&cfg);
        for w in &mut ws.blocks[0][gid::A1V_TO_VQ] {
            *w = 0.0;
        }
        let s = scen(&cfg, &pilot, 13, 10.0);
        let cache = forward(&s.y, &pilot, &ws, &cfg).unwrap();
        for &vq in &cache.blocks[0].state.v_q {
            assert_eq!(vq, 1.0 / cfg.eps_v);
        }
    }

    #[test]
    fn empty_weight_set_returns_the_initialization() {
        let (cfg, pilot) = desk(1);
        let ws = WeightSet::from_blocks(&cfg, Vec::new()).unwrap();
        let s = scen(&cfg, &pilot, 17, 10.0);
        let cache = forward(&s.y, &pilot, &ws, &cfg).unwrap();
        assert!(cache.blocks.is_empty());
        assert!(cache.final_m_h.iter().all(|m| m.norm() == 0.0));
        assert!(cache.final_gamma.iter().all(|&g| g == 1.0));
        assert_eq!(cache.final_lambda, cfg.lambda0);
    }

    #[test]
    fn forward_is_pure() {
        let (cfg, pilot) = desk(4);
        let ws = perturbed_weights(&cfg, 3);
        let s = scen(&cfg, &pilot, 19, 10.0);
        let a = forward(&s.y, &pilot, &ws, &cfg).unwrap();
        let b = forward(&s.y, &pilot, &ws, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phase_rotation_rotates_means_and_fixes_variances() {
        let (cfg, pilot) = desk(5);
        let ws = perturbed_weights(&cfg, 5);
        let s = scen(&cfg, &pilot, 23, 10.0);
        let rot = C64::from_polar(1.0, 0.7);
        let y2: Vec<C64> = s.y.iter().map(|v| v * rot).collect();

        let a = forward(&s.y, &pilot, &ws, &cfg).unwrap();
        let b = forward(&y2, &pilot, &ws, &cfg).unwrap();
        let tol = 1e-9;
        for (ba, bb) in a.blocks.iter().zip(&b.blocks) {
            for (x, y) in ba.state.v_h.iter().zip(&bb.state.v_h) {
                assert!(rel(*x, *y) <= tol);
            }
            for (x, y) in ba.state.gamma_hat.iter().zip(&bb.state.gamma_hat) {
                assert!(rel(*x, *y) <= tol);
            }
            assert!(rel(ba.state.lambda_hat, bb.state.lambda_hat) <= tol);
            for (x, y) in ba.state.m_h.iter().zip(&bb.state.m_h) {
                let rotated = x * rot;
                assert!((rotated - y).norm() <= tol * rotated.norm().max(1e-12));
            }
            for (x, y) in ba.state.m_z.iter().zip(&bb.state.m_z) {
                let rotated = x * rot;
                assert!((rotated - y).norm() <= tol * rotated.norm().max(1e-12));
            }
        }
    }

    #[test]
    fn shape_violations_are_rejected() {
        let (cfg, _) = desk(2);
        let mut blocks = init_weights(&cfg).blocks;
        blocks[1][gid::MH_TO_Q].push(1.0);
        match WeightSet::from_blocks(&cfg, blocks) {
            Err(Error::Shape(msg)) => assert!(msg.contains("mh_to_q")),
            other => panic!("expected ShapeError, got {:?}", other),
        }
    }

    #[test]
    fn mismatched_fingerprint_is_rejected_at_forward() {
        let (cfg, pilot) = desk(2);
        let ws = init_weights(&cfg);
        let mut other = cfg.clone();
        other.pa = 0.5;
        let s = scen(&cfg, &pilot, 29, 10.0);
        match forward(&s.y, &pilot, &ws, &other) {
            Err(Error::Fingerprint(_)) => {}
            other => panic!("expected FingerprintError, got {:?}", other),
        }
    }

    #[test]
    fn checkpoint_weights_round_trip() {
        let (cfg, _) = desk(3);
        let ws = perturbed_weights(&cfg, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&path, &ws, None).unwrap();
        let (back, opt) = load_checkpoint(&path, &cfg).unwrap();
        assert_eq!(ws, back);
        assert!(opt.is_none());
    }

    #[test]
    fn checkpoint_rejects_foreign_config() {
        let (cfg, _) = desk(3);
        let ws = init_weights(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&path, &ws, None).unwrap();
        let other = SystemConfig::new(110, 8, 11, 4);
        match load_checkpoint(&path, &other) {
            Err(Error::Fingerprint(_)) => {}
            other => panic!("expected FingerprintError, got {:?}", other),
        }
    }

    #[test]
    fn checkpoint_rejects_version_bump_and_truncation() {
        let (cfg, _) = desk(2);
        let ws = init_weights(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&path, &ws, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[5] = 2;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path, &cfg) {
            Err(Error::Format(msg)) => assert!(msg.contains("version")),
            other => panic!("expected FormatError, got {:?}", other),
        }
        bytes[5] = 1;
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_checkpoint(&path, &cfg) {
            Err(Error::Format(_)) => {}
            other => panic!("expected FormatError, got {:?}", other),
        }
    }
}
