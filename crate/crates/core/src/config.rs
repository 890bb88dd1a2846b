//! System configuration and dimension bookkeeping.
//!
//! `SystemConfig` is the single source of truth for every size used in the
//! pipeline; everything else derives its lengths from it through
//! [`DerivedDims`].

use std::fmt::Write as _;
use std::path::Path;

use crate::bytes::Fnv64;
use crate::error::{Error, Result};

/// All scenario and estimator parameters.
///
/// Field names double as the keys of the flat `key=value` config-file format.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// User count.
    pub k: usize,
    /// Subcarrier count.
    pub n: usize,
    /// Pilot length in symbols.
    pub lt: usize,
    /// Spreading degree: occupied subcarriers per user.
    pub dc: usize,
    /// Activation probability per user.
    pub pa: f64,
    /// Activity threshold on the inverse precision estimate.
    pub gamma_th: f64,
    /// Gamma-prior shape parameter.
    pub a: f64,
    /// Gamma-prior rate parameter.
    pub b: f64,
    /// Iteration-block count.
    pub nit: usize,
    /// Initial noise precision.
    pub lambda0: f64,
    /// Variance clamp floor.
    pub eps_v: f64,
    /// Seed for spreading-graph construction.
    pub graph_seed: u64,
}

impl SystemConfig {
    /// Defaults for everything except the four dimensions.
    pub fn new(k: usize, n: usize, lt: usize, dc: usize) -> Self {
        Self {
            k,
            n,
            lt,
            dc,
            pa: 0.1,
            gamma_th: 0.1,
            a: 1e-4,
            b: 1e-4,
            nit: 10,
            lambda0: 1e3,
            eps_v: 1e-12,
            graph_seed: 0,
        }
    }

    /// Checks every structural invariant, naming the first violated one.
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Dimension("K must be >= 1".into()));
        }
        if self.n < 1 {
            return Err(Error::Dimension("N must be >= 1".into()));
        }
        if self.lt < 1 {
            return Err(Error::Dimension("Lt must be >= 1".into()));
        }
        if self.dc < 1 || self.dc > self.n {
            return Err(Error::Dimension(format!(
                "dc must satisfy 1 <= dc <= N, got dc={} N={}",
                self.dc, self.n
            )));
        }
        if (self.k * self.dc) % self.n != 0 {
            return Err(Error::Dimension(format!(
                "K*dc = {} is not divisible by N = {}, row degree would not be integral",
                self.k * self.dc,
                self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.pa) {
            return Err(Error::Dimension(format!("Pa must be in [0,1], got {}", self.pa)));
        }
        if !(self.gamma_th > 0.0) {
            return Err(Error::Dimension(format!(
                "gamma_th must be positive, got {}",
                self.gamma_th
            )));
        }
        if !(self.a > 0.0) || !(self.b > 0.0) {
            return Err(Error::Dimension(format!(
                "prior parameters must be positive, got a={} b={}",
                self.a, self.b
            )));
        }
        if self.nit < 1 {
            return Err(Error::Dimension("Nit must be >= 1".into()));
        }
        if !(self.lambda0 > 0.0) {
            return Err(Error::Dimension(format!(
                "lambda0 must be positive, got {}",
                self.lambda0
            )));
        }
        if !(self.eps_v > 0.0) {
            return Err(Error::Dimension(format!(
                "eps_v must be positive, got {}",
                self.eps_v
            )));
        }
        Ok(())
    }

    /// Derived sizes; pure in the config.
    pub fn dims(&self) -> DerivedDims {
        let n_obs = self.n * self.lt;
        let n_vars = self.k * self.dc;
        let n_edges = self.lt * self.dc * self.k;
        DerivedDims {
            dr: self.k * self.dc / self.n,
            n_edges,
            layer_len: [
                n_obs, n_edges, n_vars, n_vars, self.k, n_edges, n_obs, n_obs, 1,
            ],
        }
    }

    /// Observation vector length.
    pub fn n_obs(&self) -> usize {
        self.n * self.lt
    }

    /// Effective channel vector length.
    pub fn n_vars(&self) -> usize {
        self.k * self.dc
    }

    /// Stable 64-bit hash of the fields that determine generated data:
    /// dimensions, activation probability, and the spreading-graph seed.
    /// Estimator-side knobs (nit, priors, clamps) do not enter, so one
    /// dataset serves runs that differ only in those.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u32(self.k as u32);
        h.write_u32(self.n as u32);
        h.write_u32(self.lt as u32);
        h.write_u32(self.dc as u32);
        h.write_u64(self.pa.to_bits());
        h.write_u64(self.graph_seed);
        h.finish()
    }

    /// Parses the flat `key=value` config format. Unknown keys are an error;
    /// missing keys other than `K`, `N`, `Lt`, `dc` fall back to defaults.
    pub fn from_str_cfg(text: &str) -> Result<Self> {
        let mut k = None;
        let mut n = None;
        let mut lt = None;
        let mut dc = None;
        let mut cfg_rest: Vec<(String, String)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {:?}", lineno + 1, raw))
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "K" => k = Some(parse_usize(key, value)?),
                "N" => n = Some(parse_usize(key, value)?),
                "Lt" => lt = Some(parse_usize(key, value)?),
                "dc" => dc = Some(parse_usize(key, value)?),
                "Pa" | "gamma_th" | "a" | "b" | "Nit" | "lambda0" | "eps_v" | "graph_seed" => {
                    cfg_rest.push((key.to_string(), value.to_string()));
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {:?}",
                        lineno + 1,
                        other
                    )))
                }
            }
        }

        let need = |v: Option<usize>, name: &str| -> Result<usize> {
            v.ok_or_else(|| Error::Config(format!("missing required key {:?}", name)))
        };
        let mut cfg = SystemConfig::new(need(k, "K")?, need(n, "N")?, need(lt, "Lt")?, need(dc, "dc")?);
        for (key, value) in cfg_rest {
            match key.as_str() {
                "Pa" => cfg.pa = parse_f64(&key, &value)?,
                "gamma_th" => cfg.gamma_th = parse_f64(&key, &value)?,
                "a" => cfg.a = parse_f64(&key, &value)?,
                "b" => cfg.b = parse_f64(&key, &value)?,
                "Nit" => cfg.nit = parse_usize(&key, &value)?,
                "lambda0" => cfg.lambda0 = parse_f64(&key, &value)?,
                "eps_v" => cfg.eps_v = parse_f64(&key, &value)?,
                "graph_seed" => {
                    cfg.graph_seed = value
                        .parse()
                        .map_err(|_| Error::Config(format!("key graph_seed: bad integer {:?}", value)))?
                }
                _ => unreachable!(),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_cfg(&text)
    }

    /// Renders the config in the same flat format `from_str_cfg` accepts.
    pub fn to_cfg_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "K={}", self.k);
        let _ = writeln!(s, "N={}", self.n);
        let _ = writeln!(s, "Lt={}", self.lt);
        let _ = writeln!(s, "dc={}", self.dc);
        let _ = writeln!(s, "Pa={}", self.pa);
        let _ = writeln!(s, "gamma_th={}", self.gamma_th);
        let _ = writeln!(s, "a={}", self.a);
        let _ = writeln!(s, "b={}", self.b);
        let _ = writeln!(s, "Nit={}", self.nit);
        let _ = writeln!(s, "lambda0={}", self.lambda0);
        let _ = writeln!(s, "eps_v={}", self.eps_v);
        let _ = writeln!(s, "graph_seed={}", self.graph_seed);
        s
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {}: bad integer {:?}", key, value)))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {}: bad number {:?}", key, value)))
}

/// Sizes derived from a validated config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedDims {
    /// Row degree: users sharing each subcarrier.
    pub dr: usize,
    /// Factor-graph edge count, `Lt * dc * K`.
    pub n_edges: usize,
    /// Output length of each of the nine layers in one iteration block.
    pub layer_len: [usize; 9],
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_cfg() -> SystemConfig {
        SystemConfig {
            lt: 11,
            ..SystemConfig::new(110, 8, 11, 4)
        }
    }

    #[test]
    fn paper_config_is_valid() {
        let cfg = paper_cfg();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn minimal_config_is_valid() {
        let mut cfg = SystemConfig::new(1, 1, 1, 1);
        cfg.pa = 0.0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn indivisible_spreading_is_rejected() {
        // K*dc = 330 does not divide into 8 subcarriers.
        let cfg = SystemConfig::new(110, 8, 11, 3);
        match cfg.validate() {
            Err(Error::Dimension(msg)) => assert!(msg.contains("330")),
            other => panic!("expected DimensionError, got {:?}", other),
        }
    }

    #[test]
    fn derived_dims_match_layer_table() {
        let d = paper_cfg().dims();
        assert_eq!(d.dr, 55);
        assert_eq!(d.n_edges, 4840);
        assert_eq!(d.layer_len, [88, 4840, 440, 440, 110, 4840, 88, 88, 1]);
    }

    #[test]
    fn orthogonal_assignment_has_unit_row_degree() {
        let cfg = SystemConfig::new(6, 6, 3, 1);
        assert_eq!(cfg.dims().dr, 1);
    }

    #[test]
    fn dims_is_pure() {
        let cfg = paper_cfg();
        assert_eq!(cfg.dims(), cfg.dims());
    }

    #[test]
    fn config_file_round_trip() {
        let cfg = paper_cfg();
        let parsed = SystemConfig::from_str_cfg(&cfg.to_cfg_string()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = SystemConfig::from_str_cfg("K=4\nN=2\nLt=3\ndc=1\nbogus=1\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("bogus")),
            other => panic!("expected ConfigError, got {:?}", other),
        }
    }

    #[test]
    fn fingerprint_tracks_data_fields_only() {
        let cfg = paper_cfg();
        let mut other = cfg.clone();
        other.nit = 5;
        assert_eq!(cfg.fingerprint(), other.fingerprint());
        other.graph_seed = 1;
        assert_ne!(cfg.fingerprint(), other.fingerprint());
        let mut smaller = cfg.clone();
        smaller.k = 20;
        assert_ne!(cfg.fingerprint(), smaller.fingerprint());
    }
}
