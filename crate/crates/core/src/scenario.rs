//! Random-access realizations: activity, block-sparse channels, noise, and
//! dataset persistence.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bytes::Cursor;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::pilots::ExpandedPilot;
use crate::C64;

/// One random-access slot realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Operating point this sample was drawn at.
    pub snr_db: f64,
    /// Per-user activity indicators.
    pub alpha: Vec<bool>,
    /// Effective channel, length K*dc; block k is zero iff user k is idle.
    pub h_bar: Vec<C64>,
    /// Noise variance implied by `snr_db`.
    pub noise_var: f64,
    /// Observation y = P̄ h̄ + w, length N*Lt.
    pub y: Vec<C64>,
}

/// Noise variance under unit-power pilots and unit-variance channels.
pub fn snr_to_noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Dedicated generator for one sample: the master seed keys the cipher and
/// the sample index selects its stream, so samples are independent and any
/// subset can be regenerated without drawing the rest.
pub fn sample_rng(master_seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(sample_index);
    rng
}

/// Draws one realization: Bernoulli activity, circular complex Gaussian
/// channels on active blocks (unit variance), AWGN at the given SNR.
pub fn sample_scenario(
    cfg: &SystemConfig,
    pilot: &ExpandedPilot,
    snr_db: f64,
    rng: &mut ChaCha8Rng,
) -> Scenario {
    let half = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
    let alpha: Vec<bool> = (0..cfg.k).map(|_| rng.gen_bool(cfg.pa)).collect();

    let mut h_bar = vec![C64::new(0.0, 0.0); cfg.n_vars()];
    for (k, &active) in alpha.iter().enumerate() {
        if active {
            for d in 0..cfg.dc {
                h_bar[k * cfg.dc + d] = C64::new(half.sample(rng), half.sample(rng));
            }
        }
    }

    let noise_var = snr_to_noise_var(snr_db);
    let noise = Normal::new(0.0, (noise_var / 2.0).sqrt()).unwrap();
    let mut y = pilot.mul(&h_bar);
    for v in &mut y {
        *v += C64::new(noise.sample(rng), noise.sample(rng));
    }

    Scenario {
        snr_db,
        alpha,
        h_bar,
        noise_var,
        y,
    }
}

/// Samples drawn under one configuration and spreading graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Hash of the data-affecting config fields.
    pub cfg_fingerprint: u64,
    /// Dimensions recorded in the header.
    pub k: usize,
    pub n: usize,
    pub lt: usize,
    pub dc: usize,
    pub samples: Vec<Scenario>,
}

impl Dataset {
    pub fn new(cfg: &SystemConfig) -> Self {
        Dataset {
            cfg_fingerprint: cfg.fingerprint(),
            k: cfg.k,
            n: cfg.n,
            lt: cfg.lt,
            dc: cfg.dc,
            samples: Vec::new(),
        }
    }

    /// Rejects datasets generated under a different configuration.
    pub fn verify_against(&self, cfg: &SystemConfig) -> Result<()> {
        if self.cfg_fingerprint != cfg.fingerprint() {
            return Err(Error::Fingerprint(format!(
                "dataset was generated under fingerprint {:016x}, current config is {:016x}",
                self.cfg_fingerprint,
                cfg.fingerprint()
            )));
        }
        Ok(())
    }
}

/// Appends `count` samples at each listed SNR (list order), using one RNG
/// stream per sample index.
pub fn generate_dataset(
    cfg: &SystemConfig,
    pilot: &ExpandedPilot,
    snr_list: &[f64],
    count: usize,
    master_seed: u64,
) -> Dataset {
    let mut ds = Dataset::new(cfg);
    let mut index = 0u64;
    for &snr_db in snr_list {
        for _ in 0..count {
            let mut rng = sample_rng(master_seed, index);
            ds.samples.push(sample_scenario(cfg, pilot, snr_db, &mut rng));
            index += 1;
        }
    }
    ds
}

/// As `generate_dataset` but draws each sample's SNR uniformly from the list,
/// producing `count` samples total.
pub fn generate_dataset_mixed(
    cfg: &SystemConfig,
    pilot: &ExpandedPilot,
    snr_list: &[f64],
    count: usize,
    master_seed: u64,
) -> Dataset {
    assert!(!snr_list.is_empty(), "need at least one SNR");
    let mut ds = Dataset::new(cfg);
    for index in 0..count as u64 {
        let mut rng = sample_rng(master_seed, index);
        let snr_db = snr_list[rng.gen_range(0..snr_list.len())];
        ds.samples.push(sample_scenario(cfg, pilot, snr_db, &mut rng));
    }
    ds
}

const MAGIC: &[u8; 5] = b"NORA1";
const VERSION: u8 = 1;

/// Serializes the dataset; see `read_dataset` for the inverse.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for dim in [ds.k, ds.n, ds.lt, ds.dc] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    w.write_all(&ds.cfg_fingerprint.to_le_bytes())?;
    for s in &ds.samples {
        w.write_all(&s.snr_db.to_le_bytes())?;
        for &a in &s.alpha {
            w.write_all(&[a as u8])?;
        }
        for v in &s.h_bar {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
        for v in &s.y {
            w.write_all(&v.re.to_le_bytes())?;
            w.write_all(&v.im.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Deserializes a dataset written by `write_dataset`.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = std::fs::read(path)?;
    let mut c = Cursor::new(&buf);

    if c.take(5)? != MAGIC {
        return Err(Error::Format("bad magic, not a dataset file".into()));
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}, expected {}",
            version, VERSION
        )));
    }
    let k = c.u32()? as usize;
    let n = c.u32()? as usize;
    let lt = c.u32()? as usize;
    let dc = c.u32()? as usize;
    let count = c.u64()? as usize;
    let cfg_fingerprint = c.u64()?;

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let snr_db = c.f64()?;
        let mut alpha = Vec::with_capacity(k);
        for _ in 0..k {
            alpha.push(c.u8()? != 0);
        }
        let mut h_bar = Vec::with_capacity(k * dc);
        for _ in 0..k * dc {
            h_bar.push(c.c64()?);
        }
        let mut y = Vec::with_capacity(n * lt);
        for _ in 0..n * lt {
            y.push(c.c64()?);
        }
        samples.push(Scenario {
            snr_db,
            alpha,
            h_bar,
            noise_var: snr_to_noise_var(snr_db),
            y,
        });
    }
    if c.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last sample",
            c.remaining()
        )));
    }
    Ok(Dataset {
        cfg_fingerprint,
        k,
        n,
        lt,
        dc,
        samples,
    })
}
