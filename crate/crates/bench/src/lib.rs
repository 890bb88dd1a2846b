//! Shared fixtures for the criterion benches.

use nora_core::pilots::{assemble_expanded_pilot, build_lds_graph, gen_zc_bank, ExpandedPilot};
use nora_core::scenario::{sample_rng, sample_scenario, Scenario};
use nora_core::SystemConfig;

/// Desk-scale system used across benches: K=20, N=4, Lt=5, dc=2.
pub fn desk_setup(nit: usize) -> (SystemConfig, ExpandedPilot, Scenario) {
    let mut cfg = SystemConfig::new(20, 4, 5, 2);
    cfg.nit = nit;
    let bank = gen_zc_bank(cfg.lt, cfg.k).unwrap();
    let graph = build_lds_graph(cfg.n, cfg.k, cfg.dc, cfg.graph_seed).unwrap();
    let pilot = assemble_expanded_pilot(&bank, &graph);
    let mut rng = sample_rng(1, 0);
    let s = sample_scenario(&cfg, &pilot, 10.0, &mut rng);
    (cfg, pilot, s)
}
