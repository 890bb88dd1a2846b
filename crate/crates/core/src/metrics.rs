//! NMSE and activity-detection metrics, SNR sweeps across estimators, and
//! the stable CSV schema.

use crate::baselines::{bomp, ga_mmse, GenieInfo};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::mpbsbl::{self, Estimate};
use crate::pilots::ExpandedPilot;
use crate::scenario::{generate_dataset, Scenario};
use crate::unfolded::{infer, WeightSet};
use crate::C64;

/// Normalized squared error; defined only for nonzero truth.
pub fn nmse(h_hat: &[C64], h_true: &[C64]) -> Result<f64> {
    if h_hat.len() != h_true.len() {
        return Err(Error::Dimension(format!(
            "estimate has {} entries, truth has {}",
            h_hat.len(),
            h_true.len()
        )));
    }
    let denom: f64 = h_true.iter().map(|h| h.norm_sqr()).sum();
    if denom == 0.0 {
        return Err(Error::DegenerateSample(
            "NMSE is undefined when no user is active".into(),
        ));
    }
    let num: f64 = h_hat
        .iter()
        .zip(h_true)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(num / denom)
}

/// Miss and false-alarm rates of an activity decision.
/// miss = |truth \ detected| / max(1, |truth|);
/// false alarm = |detected \ truth| / max(1, K − |truth|).
pub fn uad_metrics(detected: &[usize], alpha_true: &[bool]) -> (f64, f64) {
    let k = alpha_true.len();
    let truth_count = alpha_true.iter().filter(|&&a| a).count();
    let missed = (0..k)
        .filter(|&u| alpha_true[u] && !detected.contains(&u))
        .count();
    let false_alarms = detected.iter().filter(|&&u| !alpha_true[u]).count();
    let miss = missed as f64 / truth_count.max(1) as f64;
    let fa = false_alarms as f64 / (k - truth_count).max(1) as f64;
    (miss, fa)
}

/// One aggregated line of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub snr_db: f64,
    pub estimator: String,
    pub nit: usize,
    /// Mean per-sample NMSE over samples with at least one active user;
    /// NaN when no sample qualified.
    pub nmse: f64,
    /// Mean miss rate over all samples.
    pub uad_miss: f64,
    /// Mean false-alarm rate over all samples.
    pub uad_fa: f64,
    /// Samples included in the NMSE mean.
    pub n: usize,
    pub seed: u64,
}

/// Estimators a sweep can run.
pub enum Estimator<'a> {
    MpBsbl,
    Dnn(&'a WeightSet),
    Bomp,
    GaMmse,
}

impl Estimator<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::MpBsbl => "mp-bsbl",
            Estimator::Dnn(_) => "dnn",
            Estimator::Bomp => "bomp",
            Estimator::GaMmse => "ga-mmse",
        }
    }

    fn nit(&self, cfg: &SystemConfig) -> usize {
        match self {
            Estimator::MpBsbl => cfg.nit,
            Estimator::Dnn(ws) => ws.nit(),
            Estimator::Bomp | Estimator::GaMmse => 0,
        }
    }

    fn run(&self, s: &Scenario, pilot: &ExpandedPilot, cfg: &SystemConfig) -> Result<Estimate> {
        match self {
            Estimator::MpBsbl => mpbsbl::run(&s.y, pilot, cfg),
            Estimator::Dnn(ws) => infer(&s.y, pilot, ws, cfg),
            Estimator::Bomp => {
                let ka = s.alpha.iter().filter(|&&a| a).count();
                if ka == 0 {
                    return Ok(Estimate {
                        h_hat: vec![C64::new(0.0, 0.0); pilot.n_vars],
                        active_set: Vec::new(),
                        gamma_inv: vec![0.0; pilot.k],
                    });
                }
                bomp(&s.y, pilot, ka)
            }
            Estimator::GaMmse => {
                let active: Vec<usize> = (0..cfg.k).filter(|&u| s.alpha[u]).collect();
                ga_mmse(
                    &s.y,
                    pilot,
                    &GenieInfo {
                        active_set: active,
                        noise_var: s.noise_var,
                    },
                )
            }
        }
    }
}

/// Evaluates every estimator over the given samples, one row per estimator
/// per distinct SNR value (first-appearance order).
pub fn evaluate(
    cfg: &SystemConfig,
    pilot: &ExpandedPilot,
    samples: &[Scenario],
    estimators: &[Estimator],
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut snr_order: Vec<u64> = Vec::new();
    for s in samples {
        let bits = s.snr_db.to_bits();
        if !snr_order.contains(&bits) {
            snr_order.push(bits);
        }
    }
    let mut rows = Vec::with_capacity(snr_order.len() * estimators.len());
    for bits in snr_order {
        let group: Vec<&Scenario> = samples.iter().filter(|s| s.snr_db.to_bits() == bits).collect();
        for est in estimators {
            let mut nmse_sum = 0.0;
            let mut nmse_n = 0usize;
            let mut miss_sum = 0.0;
            let mut fa_sum = 0.0;
            for s in &group {
                let e = est.run(s, pilot, cfg)?;
                let (miss, fa) = uad_metrics(&e.active_set, &s.alpha);
                miss_sum += miss;
                fa_sum += fa;
                match nmse(&e.h_hat, &s.h_bar) {
                    Ok(v) => {
                        nmse_sum += v;
                        nmse_n += 1;
                    }
                    Err(Error::DegenerateSample(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            rows.push(EvalRow {
                snr_db: f64::from_bits(bits),
                estimator: est.name().to_string(),
                nit: est.nit(cfg),
                nmse: if nmse_n > 0 {
                    nmse_sum / nmse_n as f64
                } else {
                    f64::NAN
                },
                uad_miss: miss_sum / group.len() as f64,
                uad_fa: fa_sum / group.len() as f64,
                n: nmse_n,
                seed,
            });
        }
    }
    Ok(rows)
}

/// Evaluates every estimator on a fresh test set per SNR point. The same
/// master seed is reused across SNR points, so all points share activity and
/// fading draws and differ only in noise scale.
pub fn sweep_snr(
    cfg: &SystemConfig,
    pilot: &ExpandedPilot,
    snr_list: &[f64],
    estimators: &[Estimator],
    count: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(snr_list.len() * estimators.len());
    for &snr in snr_list {
        let ds = generate_dataset(cfg, pilot, &[snr], count, seed);
        rows.extend(evaluate(cfg, pilot, &ds.samples, estimators, seed)?);
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "snr_db,estimator,nit,nmse,uad_miss,uad_fa,n,seed";

/// Renders rows in the stable schema; header only when `rows` is empty.
pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.snr_db, r.estimator, r.nit, r.nmse, r.uad_miss, r.uad_fa, r.n, r.seed
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots::{assemble_expanded_pilot, build_lds_graph, gen_zc_bank};
    use crate::unfolded::init_weights;

    fn desk(nit: usize) -> (SystemConfig, ExpandedPilot) {
        let mut cfg = SystemConfig::new(20, 4, 5, 2);
        cfg.nit = nit;
        let bank = gen_zc_bank(cfg.lt, cfg.k).unwrap();
        let graph = build_lds_graph(cfg.n, cfg.k, cfg.dc, cfg.graph_seed).unwrap();
        (cfg, assemble_expanded_pilot(&bank, &graph))
    }

    #[test]
    fn nmse_known_points() {
        let h = vec![C64::new(0.4, -1.1), C64::new(0.0, 2.0)];
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        let zero = vec![C64::new(0.0, 0.0); 2];
        assert_eq!(nmse(&zero, &h).unwrap(), 1.0);
        assert_eq!(
            nmse(&[C64::new(2.0, 0.0)], &[C64::new(1.0, 0.0)]).unwrap(),
            1.0
        );
        assert!(matches!(
            nmse(&h, &zero),
            Err(Error::DegenerateSample(_))
        ));
        assert!(matches!(
            nmse(&h, &[C64::new(1.0, 0.0)]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn uad_known_points() {
        let mut alpha = vec![false; 10];
        alpha[1] = true;
        alpha[2] = true;
        assert_eq!(uad_metrics(&[1, 2], &alpha), (0.0, 0.0));
        assert_eq!(uad_metrics(&[2, 3], &alpha), (0.5, 0.125));
        let mut three = vec![false; 10];
        three[0] = true;
        three[4] = true;
        three[9] = true;
        assert_eq!(uad_metrics(&[], &three), (1.0, 0.0));
        assert_eq!(uad_metrics(&[], &vec![false; 10]), (0.0, 0.0));
    }

    #[test]
    fn sweep_produces_one_row_per_snr_and_estimator() {
        let (cfg, pilot) = desk(3);
        let ws = init_weights(&cfg);
        let ests = [
            Estimator::MpBsbl,
            Estimator::Dnn(&ws),
            Estimator::Bomp,
            Estimator::GaMmse,
        ];
        let rows = sweep_snr(&cfg, &pilot, &[5.0, 10.0], &ests, 25, 3).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].estimator, "mp-bsbl");
        assert_eq!(rows[0].nit, 3);
        assert_eq!(rows[1].estimator, "dnn");
        assert_eq!(rows[2].nit, 0);
        for r in &rows {
            assert!(r.uad_miss >= 0.0 && r.uad_miss <= 1.0);
            assert!(r.uad_fa >= 0.0 && r.uad_fa <= 1.0);
            assert!(r.n <= 25);
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let (cfg, pilot) = desk(2);
        let ests = [Estimator::MpBsbl, Estimator::GaMmse];
        let a = rows_to_csv(&sweep_snr(&cfg, &pilot, &[0.0, 10.0], &ests, 20, 9).unwrap());
        let b = rows_to_csv(&sweep_snr(&cfg, &pilot, &[0.0, 10.0], &ests, 20, 9).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("snr_db,estimator,nit,nmse,uad_miss,uad_fa,n,seed\n"));
    }

    #[test]
    fn empty_estimator_list_gives_a_header_only_csv() {
        let (cfg, pilot) = desk(2);
        let rows = sweep_snr(&cfg, &pilot, &[10.0], &[], 5, 1).unwrap();
        assert!(rows.is_empty());
        assert_eq!(
            rows_to_csv(&rows),
            "snr_db,estimator,nit,nmse,uad_miss,uad_fa,n,seed\n"
        );
    }

    #[test]
    fn genie_bound_sits_below_the_iterative_estimator() {
        let (cfg, pilot) = desk(10);
        let ests = [Estimator::MpBsbl, Estimator::GaMmse];
        let rows = sweep_snr(&cfg, &pilot, &[12.0], &ests, 150, 4).unwrap();
        let mp = rows.iter().find(|r| r.estimator == "mp-bsbl").unwrap();
        let ga = rows.iter().find(|r| r.estimator == "ga-mmse").unwrap();
        assert!(
            ga.nmse <= mp.nmse,
            "bound {} above estimator {}",
            ga.nmse,
            mp.nmse
        );
        assert_eq!(ga.uad_miss, 0.0);
        assert_eq!(ga.uad_fa, 0.0);
    }

    #[test]
    fn all_idle_population_reports_nan_nmse_and_counts_zero() {
        let (mut cfg, pilot) = desk(2);
        cfg.pa = 0.0;
        let rows = sweep_snr(&cfg, &pilot, &[10.0], &[Estimator::Bomp], 10, 5).unwrap();
        assert_eq!(rows[0].n, 0);
        assert!(rows[0].nmse.is_nan());
        assert_eq!(rows[0].uad_miss, 0.0);
        assert_eq!(rows[0].uad_fa, 0.0);
    }
}
