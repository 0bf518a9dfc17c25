//! Euler simulation of the fitted model and ensemble file formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pestim::Diffusion;

/// Which trends are put back on the simulated normalized paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No trends: the model is fitted on the raw series.
    Model1,
    /// Mean trend only.
    Model2,
    /// Mean and scale trends.
    #[default]
    Model3,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Model1, Variant::Model2, Variant::Model3];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Model1 => "model1",
            Variant::Model2 => "model2",
            Variant::Model3 => "model3",
        }
    }

    pub fn uses_mean(self) -> bool {
        !matches!(self, Variant::Model1)
    }

    pub fn uses_scale(self) -> bool {
        matches!(self, Variant::Model3)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "model1" | "1" => Ok(Variant::Model1),
            "model2" | "2" => Ok(Variant::Model2),
            "model3" | "3" => Ok(Variant::Model3),
            other => Err(Error::InvalidInput(format!("unknown model variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// Redraw the innovation, then clamp after `max_resamples` failures.
    #[default]
    Resample,
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub boundary_policy: BoundaryPolicy,
    pub max_resamples: usize,
    /// Steps discarded before the first recorded value.
    pub burn_in: usize,
    /// Keep the normalized paths alongside the denormalized ones.
    pub keep_z: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            seed: 0,
            boundary_policy: BoundaryPolicy::Resample,
            max_resamples: 100,
            burn_in: 200,
            keep_z: false,
        }
    }
}

/// Margin kept from a finite boundary.
pub fn boundary_margin(lower: f64, upper: f64) -> f64 {
    if lower.is_finite() && upper.is_finite() {
        1e-6 * (upper - lower)
    } else if lower.is_finite() {
        1e-6 * (1.0 + lower.abs())
    } else if upper.is_finite() {
        1e-6 * (1.0 + upper.abs())
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimPath {
    pub values: Vec<f64>,
    pub clamp_events: usize,
    pub resamples: usize,
}

/// Per-path random stream: the master seed with the path index as stream
/// id.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

struct Stepper<'a, D: ?Sized> {
    model: &'a D,
    lo: f64,
    hi: f64,
    policy: BoundaryPolicy,
    max_resamples: usize,
    clamp_events: usize,
    resamples: usize,
}

impl<D: Diffusion + ?Sized> Stepper<'_, D> {
    fn step(&mut self, z: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        let b = self.model.drift(z);
        let a = self.model.diffusion(z);
        let mut tries = 0;
        loop {
            let e: f64 = rng.sample(StandardNormal);
            let next = z + b + a * e;
            if !next.is_finite() {
                return Err(Error::Degenerate(format!("simulated path diverged from z = {z}")));
            }
            if next >= self.lo && next <= self.hi {
                return Ok(next);
            }
            if self.policy == BoundaryPolicy::Resample && tries < self.max_resamples {
                tries += 1;
                self.resamples += 1;
                continue;
            }
            self.clamp_events += 1;
            return Ok(next.clamp(self.lo, self.hi));
        }
    }
}

/// `n` values of the Euler recursion `z <- z + b(z) + a(z) eps`, starting
/// with `z0` itself.
pub fn simulate_path<D: Diffusion + ?Sized>(
    model: &D,
    z0: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
    policy: BoundaryPolicy,
    max_resamples: usize,
) -> Result<SimPath> {
    let (lo, hi) = model.support();
    if !(z0 > lo && z0 < hi) {
        return Err(Error::OutsideSupport {
            z: z0,
            lower: lo,
            upper: hi,
        });
    }
    let margin = boundary_margin(lo, hi);
    let mut stepper = Stepper {
        model,
        lo: lo + margin,
        hi: hi - margin,
        policy,
        max_resamples,
        clamp_events: 0,
        resamples: 0,
    };
    let mut values = Vec::with_capacity(n);
    let mut z = z0;
    for i in 0..n {
        if i > 0 {
            z = stepper.step(z, rng)?;
        }
        values.push(z);
    }
    Ok(SimPath {
        values,
        clamp_events: stepper.clamp_events,
        resamples: stepper.resamples,
    })
}

/// Starting state before burn-in: zero when inside the support, otherwise
/// the middle of the support.
pub fn start_state<D: Diffusion + ?Sized>(model: &D) -> f64 {
    let (lo, hi) = model.support();
    if 0.0 > lo && 0.0 < hi {
        0.0
    } else if lo.is_finite() && hi.is_finite() {
        0.5 * (lo + hi)
    } else if lo.is_finite() {
        lo + 1.0
    } else {
        hi - 1.0
    }
}

/// Trend curves laid over one path, record by record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trends {
    pub mean: Option<Vec<f64>>,
    pub scale: Option<Vec<f64>>,
}

impl Trends {
    pub fn none() -> Self {
        Self::default()
    }

    fn check(&self, variant: Variant, len: usize) -> Result<()> {
        let mean_ok = self.mean.is_some() == variant.uses_mean();
        let scale_ok = self.scale.is_some() == variant.uses_scale();
        if !(mean_ok && scale_ok) {
            return Err(Error::InvalidInput(format!(
                "{variant} needs {} but got mean trend: {}, scale trend: {}",
                match variant {
                    Variant::Model1 => "no trends",
                    Variant::Model2 => "the mean trend only",
                    Variant::Model3 => "mean and scale trends",
                },
                self.mean.is_some(),
                self.scale.is_some()
            )));
        }
        for t in [&self.mean, &self.scale].into_iter().flatten() {
            if t.len() != len {
                return Err(Error::InvalidInput(format!(
                    "trend length {} differs from path length {len}",
                    t.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub variant: Option<Variant>,
    pub path_length: usize,
    /// One row per path on the observation scale.
    pub paths: Vec<Vec<f64>>,
    #[serde(default)]
    pub z_paths: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub stream_ids: Vec<u64>,
    #[serde(default)]
    pub clamp_events: Vec<usize>,
    #[serde(default)]
    pub config: Option<SimConfig>,
}

impl Ensemble {
    pub fn from_paths(paths: Vec<Vec<f64>>) -> Result<Self> {
        let path_length = paths.first().map(Vec::len).unwrap_or(0);
        if paths.is_empty() || path_length == 0 {
            return Err(Error::Empty("ensemble has no values".into()));
        }
        if paths.iter().any(|p| p.len() != path_length) {
            return Err(Error::Format("ensemble paths differ in length".into()));
        }
        Ok(Self {
            variant: None,
            path_length,
            stream_ids: (0..paths.len() as u64).collect(),
            clamp_events: vec![0; paths.len()],
            paths,
            z_paths: None,
            config: None,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }
}

/// Simulates `config.n_paths` independent paths of `path_length` records
/// and puts the trends of `variant` back on.
pub fn simulate_ensemble<D: Diffusion + ?Sized>(
    model: &D,
    trends: &Trends,
    variant: Variant,
    path_length: usize,
    config: &SimConfig,
) -> Result<Ensemble> {
    if config.n_paths == 0 || path_length == 0 {
        return Err(Error::InvalidInput("ensemble needs at least one path and one record".into()));
    }
    trends.check(variant, path_length)?;
    let z0 = start_state(model);
    let runs: Vec<Result<SimPath>> = (0..config.n_paths as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = path_rng(config.seed, id);
            let burn = simulate_path(
                model,
                z0,
                config.burn_in + 1,
                &mut rng,
                config.boundary_policy,
                config.max_resamples,
            )?;
            let start = *burn.values.last().expect("burn-in has at least one value");
            let mut path = simulate_path(
                model,
                start,
                path_length + 1,
                &mut rng,
                config.boundary_policy,
                config.max_resamples,
            )?;
            path.values.remove(0);
            path.clamp_events += burn.clamp_events;
            Ok(path)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let clamp_events: Vec<usize> = runs.iter().map(|r| r.clamp_events).collect();
    let total: usize = clamp_events.iter().sum();
    if total > 0 {
        log::info!("{total} boundary clamp event(s) across the ensemble");
    }
    let paths: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| {
            r.values
                .iter()
                .enumerate()
                .map(|(t, z)| {
                    let s = trends.scale.as_ref().map_or(1.0, |s| s[t]);
                    let m = trends.mean.as_ref().map_or(0.0, |m| m[t]);
                    s * z + m
                })
                .collect()
        })
        .collect();
    let z_paths = config
        .keep_z
        .then(|| runs.into_iter().map(|r| r.values).collect());
    Ok(Ensemble {
        variant: Some(variant),
        path_length,
        paths,
        z_paths,
        stream_ids: (0..config.n_paths as u64).collect(),
        clamp_events,
        config: Some(config.clone()),
    })
}

/// Long-format CSV: `path,t_index,value`.
pub fn write_csv(ensemble: &Ensemble, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["path", "t_index", "value"])?;
    for (p, row) in ensemble.paths.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            w.write_record([p.to_string(), t.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Ensemble> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "t_index", "value"] {
        return Err(Error::Format(format!(
            "ensemble CSV header must be path,t_index,value, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut paths: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let parse_idx = |s: &str| {
            s.trim().parse::<usize>().map_err(|e| Error::Parse {
                row,
                message: format!("bad index '{s}': {e}"),
            })
        };
        let p = parse_idx(rec.get(0).unwrap_or(""))?;
        let t = parse_idx(rec.get(1).unwrap_or(""))?;
        let v: f64 = rec
            .get(2)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| Error::Parse {
                row,
                message: format!("bad value: {e}"),
            })?;
        if p == paths.len() {
            paths.push(Vec::new());
        }
        if p + 1 != paths.len() || t != paths[p].len() {
            return Err(Error::Parse {
                row,
                message: format!("records must be ordered by path then t_index (got {p},{t})"),
            });
        }
        paths[p].push(v);
    }
    Ensemble::from_paths(paths)
}

pub const BINARY_MAGIC: &[u8; 4] = b"TDSE";
pub const BINARY_VERSION: u32 = 1;

/// Binary layout: magic `TDSE`, `u32` version, `u64` path count, `u64` path
/// length, then little-endian `f64` values path by path.
pub fn write_binary(ensemble: &Ensemble, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&(ensemble.n_paths() as u64).to_le_bytes())?;
    w.write_all(&(ensemble.path_length as u64).to_le_bytes())?;
    for row in &ensemble.paths {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<Ensemble> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 24];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("ensemble file is shorter than its header".into()))?;
    if &head[0..4] != BINARY_MAGIC {
        return Err(Error::Format("not a binary ensemble file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported ensemble version {version}")));
    }
    let n_paths = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let len = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes")) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n_paths * len * 8 {
        return Err(Error::Format(format!(
            "ensemble body has {} bytes, header announces {n_paths} x {len} values",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ensemble::from_paths(values.chunks(len.max(1)).map(<[f64]>::to_vec).collect())
}

/// Reads either format, chosen by the `.bin` extension.
pub fn read_ensemble(path: impl AsRef<Path>) -> Result<Ensemble> {
    let p = path.as_ref();
    if p.extension().is_some_and(|e| e == "bin") {
        read_binary(p)
    } else {
        read_csv(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pestim::ConstantDiffusion;

    #[test]
    fn deterministic_recursions() {
        let mut rng = path_rng(1, 0);
        let still = ConstantDiffusion {
            alpha: 0.0,
            beta: 0.0,
            a: 0.0,
        };
        let p = simulate_path(&still, 0.7, 5, &mut rng, BoundaryPolicy::Resample, 100).unwrap();
        assert_eq!(p.values, vec![0.7; 5]);
        let collapse = ConstantDiffusion {
            alpha: 0.0,
            beta: -1.0,
            a: 0.0,
        };
        let p = simulate_path(&collapse, 1.0, 4, &mut rng, BoundaryPolicy::Resample, 100).unwrap();
        assert_eq!(p.values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_hand_rolled_recursion() {
        let m = ConstantDiffusion {
            alpha: 0.0,
            beta: -0.2,
            a: 0.5,
        };
        let p = simulate_path(&m, 0.3, 5, &mut path_rng(9, 3), BoundaryPolicy::Resample, 100).unwrap();
        let mut rng = path_rng(9, 3);
        let mut z = 0.3;
        let mut oracle = vec![z];
        for _ in 0..4 {
            let e: f64 = rng.sample(StandardNormal);
            z = z - 0.2 * z + 0.5 * e;
            oracle.push(z);
        }
        for (a, b) in p.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    struct Boxed;
    impl Diffusion for Boxed {
        fn drift(&self, _z: f64) -> f64 {
            0.0
        }
        fn diffusion(&self, _z: f64) -> f64 {
            1.0
        }
        fn support(&self) -> (f64, f64) {
            (-1.0, 1.0)
        }
    }

    #[test]
    fn support_is_respected() {
        for policy in [BoundaryPolicy::Resample, BoundaryPolicy::Clamp] {
            let p = simulate_path(&Boxed, 0.0, 2000, &mut path_rng(5, 0), policy, 3).unwrap();
            let m = boundary_margin(-1.0, 1.0);
            assert!(p.values.iter().all(|z| *z >= -1.0 + m && *z <= 1.0 - m));
            assert!(p.clamp_events > 0);
        }
        assert!(simulate_path(&Boxed, 1.5, 3, &mut path_rng(5, 0), BoundaryPolicy::Clamp, 3).is_err());
    }

    fn ou() -> ConstantDiffusion {
        ConstantDiffusion {
            alpha: 0.0,
            beta: -0.2,
            a: 0.5,
        }
    }

    #[test]
    fn variant_preconditions_and_identities() {
        let cfg = SimConfig {
            n_paths: 4,
            seed: 3,
            ..SimConfig::default()
        };
        let full = Trends {
            mean: Some(vec![1.0; 10]),
            scale: Some(vec![1.0; 10]),
        };
        assert!(simulate_ensemble(&ou(), &full, Variant::Model1, 10, &cfg).is_err());
        let m3 = simulate_ensemble(&ou(), &full, Variant::Model3, 10, &cfg).unwrap();
        let mean_only = Trends {
            mean: Some(vec![1.0; 10]),
            scale: None,
        };
        let m2 = simulate_ensemble(&ou(), &mean_only, Variant::Model2, 10, &cfg).unwrap();
        assert_eq!(m2.paths, m3.paths);

        let again = simulate_ensemble(&ou(), &full, Variant::Model3, 10, &cfg).unwrap();
        assert_eq!(again, m3);
        let other = simulate_ensemble(&ou(), &full, Variant::Model3, 10, &SimConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(other.paths, m3.paths);
    }

    #[test]
    fn parallelism_does_not_change_output() {
        let cfg = SimConfig {
            n_paths: 16,
            seed: 8,
            ..SimConfig::default()
        };
        let par = simulate_ensemble(&ou(), &Trends::none(), Variant::Model1, 50, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| simulate_ensemble(&ou(), &Trends::none(), Variant::Model1, 50, &cfg).unwrap());
        assert_eq!(par, seq);
    }

    #[test]
    fn file_round_trips() {
        let cfg = SimConfig {
            n_paths: 3,
            seed: 1,
            ..SimConfig::default()
        };
        let e = simulate_ensemble(&ou(), &Trends::none(), Variant::Model1, 7, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("e.csv");
        let bin_path = dir.path().join("e.bin");
        write_csv(&e, &csv_path).unwrap();
        write_binary(&e, &bin_path).unwrap();
        assert_eq!(read_ensemble(&csv_path).unwrap().paths, e.paths);
        assert_eq!(read_ensemble(&bin_path).unwrap().paths, e.paths);
        std::fs::write(&csv_path, "path,t_index,value\n").unwrap();
        assert!(read_csv(&csv_path).is_err());
    }
}
