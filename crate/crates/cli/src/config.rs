use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bounded_diffusion::extremes::Direction;
use bounded_diffusion::ingest::{self, ColumnSpec, DailySeries, Season};
use bounded_diffusion::pipeline::{EstimationConfig, ExtremesConfig, FitConfig};
use bounded_diffusion::sim::{BoundaryPolicy, SimConfig, Variant};
use bounded_diffusion::trend::SmootherConfig;
use bounded_diffusion::validate::ValidationConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    /// CSV file with a date column and a value column.
    pub path: Option<PathBuf>,
    pub date_column: String,
    pub value_column: String,
    /// `MM-DD:MM-DD[,...]`; the whole record when absent.
    pub season: Option<String>,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            path: None,
            date_column: "date".into(),
            value_column: "value".into(),
            season: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n_paths: usize,
    pub seed: u64,
    pub boundary_policy: BoundaryPolicy,
    pub max_resamples: usize,
    pub burn_in: usize,
    pub format: EnsembleFormat,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            n_paths: d.n_paths,
            seed: d.seed,
            boundary_policy: d.boundary_policy,
            max_resamples: d.max_resamples,
            burn_in: d.burn_in,
            format: EnsembleFormat::Csv,
        }
    }
}

impl SimulationSection {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_paths: self.n_paths,
            seed: self.seed,
            boundary_policy: self.boundary_policy,
            max_resamples: self.max_resamples,
            burn_in: self.burn_in,
            keep_z: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    pub out: PathBuf,
    pub input: InputConfig,
    pub trend: SmootherConfig,
    pub estimation: EstimationConfig,
    pub extremes: ExtremesConfig,
    pub simulation: SimulationSection,
    pub validation: ValidationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Model3,
            out: PathBuf::from("out"),
            input: InputConfig::default(),
            trend: SmootherConfig::default(),
            estimation: EstimationConfig::default(),
            extremes: ExtremesConfig::default(),
            simulation: SimulationSection::default(),
            validation: ValidationConfig {
                gev_directions: vec![Direction::Max, Direction::Min],
                ..ValidationConfig::default()
            },
        }
    }
}

/// Marker for errors caused by the user's input rather than the numerics.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

impl RunConfig {
    /// Parses a TOML file; relative paths are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| InputError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        if let Some(p) = &cfg.input.path {
            if p.is_relative() {
                cfg.input.path = Some(base.join(p));
            }
        }
        if let Some(p) = &cfg.input.path {
            if !p.exists() {
                bail!(InputError(format!("input file {} does not exist", p.display())));
            }
        }
        if let Some(s) = &cfg.input.season {
            s.parse::<Season>()
                .map_err(|e| InputError(format!("invalid season: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            variant: self.variant,
            trend: self.trend,
            estimation: self.estimation.clone(),
            extremes: self.extremes.clone(),
        }
    }

    pub fn load_series(&self) -> Result<(DailySeries, PathBuf)> {
        let Some(path) = self.input.path.clone() else {
            bail!(InputError("no input file: set [input] path or pass --input".into()));
        };
        if !path.exists() {
            bail!(InputError(format!("input file {} does not exist", path.display())));
        }
        let cols = ColumnSpec {
            date: self.input.date_column.clone(),
            value: self.input.value_column.clone(),
        };
        let series = ingest::load_csv(&path, &cols)
            .with_context(|| format!("loading {}", path.display()))?;
        let series = match &self.input.season {
            Some(s) => {
                let season: Season = s.parse().map_err(|e| InputError(format!("invalid season: {e}")))?;
                ingest::extract_season(&series, &season)?
            }
            None => series,
        };
        Ok((series, path))
    }
}

/// Example configuration with every key at its default value.
pub fn example_config() -> String {
    let mut cfg = RunConfig::default();
    cfg.input.path = Some(PathBuf::from("data.csv"));
    toml::to_string_pretty(&cfg).unwrap_or_default()
}
