//! Fit pipeline: trends, normalization, extremes, nonparametric and
//! parametric estimation, tail grafting; plus the model file that links
//! fitting to simulation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extremes::{
    self, BoundaryInfo, Direction, GevFitOptions, GevParams, LemmaVariant, Tail,
};
use crate::ingest::{DailySeries, YearBlock};
use crate::npestim::{self, CurveEstimate, KernelConfig, LambdaSelection, SplineFit};
use crate::pestim::{
    self, BoundaryVerdict, CentralPoly, DriftParams, JointFit, PiecewiseDiffusion, TailPiece,
    TailPolicy, WhitenessReport,
};
use crate::sim::{self, Ensemble, SimConfig, Trends, Variant};
use crate::stats;
use crate::trend::{self, NormalizedSeries, SmootherConfig, TrendCurve};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    pub degree_a: usize,
    /// Quantile levels of the junctions between central and tail pieces.
    pub central_probs: [f64; 2],
    pub lemma_variant: LemmaVariant,
    pub lower_tail: TailPolicy,
    pub upper_tail: TailPolicy,
    /// Move a junction slope that admits no positive tail quadratic to the
    /// nearest admissible value instead of failing.
    pub clamp_incompatible_slope: bool,
    /// Run the kernel and spline first pass.
    pub nonparametric: bool,
    pub knots: usize,
    /// Roughness weight as a multiple of its natural scale; chosen on a
    /// holdout when absent.
    pub lambda_multiplier: Option<f64>,
    /// Rounds of alternating spline / weighted drift refits (0 = skip).
    pub alternate_refit_iters: usize,
    /// Share of pairs in each drift LOESS window.
    pub drift_span_fraction: f64,
    /// Symmetric trim levels for the robustness study.
    pub robustness_trims: Vec<f64>,
    pub whiteness_alpha: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            degree_a: 4,
            central_probs: [0.01, 0.99],
            lemma_variant: LemmaVariant::PlugIn,
            lower_tail: TailPolicy::Quadratic,
            upper_tail: TailPolicy::Quadratic,
            clamp_incompatible_slope: true,
            nonparametric: true,
            knots: 12,
            lambda_multiplier: None,
            alternate_refit_iters: 0,
            drift_span_fraction: 0.3,
            robustness_trims: Vec::new(),
            whiteness_alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtremesConfig {
    /// Fewest usable blocks for a GEV fit.
    pub min_blocks: usize,
    /// Fit block minima for the lower boundary.
    pub lower: bool,
    /// Fit block maxima for the upper boundary.
    pub upper: bool,
    /// Boundaries on the normalized scale that replace the GEV endpoints.
    pub manual_lower: Option<f64>,
    pub manual_upper: Option<f64>,
    pub seed: u64,
}

impl Default for ExtremesConfig {
    fn default() -> Self {
        Self {
            min_blocks: 10,
            lower: true,
            upper: true,
            manual_lower: None,
            manual_upper: None,
            seed: GevFitOptions::default().seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub variant: Variant,
    pub trend: SmootherConfig,
    pub estimation: EstimationConfig,
    pub extremes: ExtremesConfig,
}

/// Calendar layout of the observations that simulated paths mirror.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub season_label: String,
    pub n_records: usize,
    pub blocks: Vec<YearBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the fitted records (dates and values).
    pub data_sha256: String,
    pub package_version: String,
    pub config: FitConfig,
}

/// Everything needed to simulate from a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub variant: Variant,
    pub model: PiecewiseDiffusion,
    pub gev_lower: Option<GevParams>,
    pub gev_upper: Option<GevParams>,
    pub lemma_variant: LemmaVariant,
    pub mean_trend: Option<TrendCurve>,
    pub scale_trend: Option<TrendCurve>,
    pub layout: Layout,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(MODEL_FORMAT_VERSION as u64) {
            return Err(Error::Format(format!(
                "model format version {version:?} is not supported (expected {MODEL_FORMAT_VERSION})"
            )));
        }
        Ok(serde_json::from_value(raw)?)
    }

    /// Trend curves for the model's variant, checked against the layout.
    pub fn trends(&self) -> Result<Trends> {
        let take = |c: &Option<TrendCurve>, used: bool, what: &str| -> Result<Option<Vec<f64>>> {
            match (c, used) {
                (_, false) => Ok(None),
                (Some(c), true) => Ok(Some(c.fitted.clone())),
                (None, true) => Err(Error::InvalidInput(format!(
                    "{} model file has no {what} trend",
                    self.variant
                ))),
            }
        };
        Ok(Trends {
            mean: take(&self.mean_trend, self.variant.uses_mean(), "mean")?,
            scale: take(&self.scale_trend, self.variant.uses_scale(), "scale")?,
        })
    }

    pub fn simulate(&self, config: &SimConfig) -> Result<Ensemble> {
        sim::simulate_ensemble(
            &self.model,
            &self.trends()?,
            self.variant,
            self.layout.n_records,
            config,
        )
    }
}

/// Junction slope before and after the admissibility clamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionSlope {
    pub side: Tail,
    pub junction: f64,
    pub boundary: f64,
    pub lemma_slope: f64,
    pub used_slope: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub trim: f64,
    pub beta: f64,
    pub coeffs: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_records: usize,
    pub n_pairs: usize,
    pub excluded_pairs: usize,
    pub z_range: (f64, f64),
    pub gev_notes: Vec<String>,
    pub drift_ls: DriftParams,
    pub joint: JointFit,
    pub junction_slopes: Vec<JunctionSlope>,
    pub drift_loess: Option<CurveEstimate>,
    pub kernel_drift: Option<CurveEstimate>,
    pub kernel_diffusion: Option<CurveEstimate>,
    pub spline: Option<SplineFit>,
    pub lambda_selection: Option<LambdaSelection>,
    pub refit_drift: Option<DriftParams>,
    pub robustness: Vec<RobustnessRow>,
    pub whiteness: Option<WhitenessReport>,
    pub whiteness_error: Option<String>,
    pub lower_boundary: BoundaryVerdict,
    pub upper_boundary: BoundaryVerdict,
}

/// Pipeline result: the model file plus diagnostics and intermediate
/// series.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: ModelFile,
    pub diagnostics: FitDiagnostics,
    pub normalized: NormalizedSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trend,
    Normalize,
    Pairs,
    Extremes,
    Nonparametric,
    Parametric,
    Tails,
    Assemble,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        f.write_str(&s)
    }
}

/// A failed stage with whatever finished before it.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
    /// Completed artifacts by name.
    pub partial: serde_json::Map<String, serde_json::Value>,
}

struct Partial(serde_json::Map<String, serde_json::Value>);

impl Partial {
    fn keep<T: Serialize>(&mut self, name: &str, value: &T) {
        if let Ok(v) = serde_json::to_value(value) {
            self.0.insert(name.to_string(), v);
        }
    }

    fn fail(&mut self, stage: Stage) -> impl FnOnce(Error) -> StageError + '_ {
        move |source| StageError {
            stage,
            source,
            partial: std::mem::take(&mut self.0),
        }
    }
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the ISO dates and little-endian values of `series`.
pub fn series_digest(series: &DailySeries) -> String {
    let mut h = Sha256::new();
    for (d, v) in series.dates.iter().zip(&series.values) {
        h.update(d.to_string().as_bytes());
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn fit_side(
    z: &NormalizedSeries,
    direction: Direction,
    cfg: &ExtremesConfig,
) -> Result<GevParams> {
    let ext = extremes::block_extremes(&z.z, &z.base.blocks, direction, cfg.min_blocks)?;
    let opts = GevFitOptions {
        seed: cfg.seed,
        ..GevFitOptions::default()
    };
    extremes::fit_block_extremes(&ext.values, direction, &opts)
}

/// Runs the whole estimation chain on `series`.
pub fn fit(series: &DailySeries, cfg: &FitConfig) -> std::result::Result<FitOutput, StageError> {
    let mut partial = Partial(serde_json::Map::new());
    let est = &cfg.estimation;

    let (mean_trend, scale_trend) = (|| -> Result<_> {
        if !cfg.variant.uses_mean() {
            return Ok((None, None));
        }
        let m = trend::estimate_mean_trend(series, &cfg.trend)?;
        let s = if cfg.variant.uses_scale() {
            Some(trend::estimate_scale_trend(series, &m, &cfg.trend)?)
        } else {
            None
        };
        Ok((Some(m), s))
    })()
    .map_err(partial.fail(Stage::Trend))?;
    partial.keep("mean_trend", &mean_trend);
    partial.keep("scale_trend", &scale_trend);

    let z = trend::normalize(series, mean_trend.as_ref(), scale_trend.as_ref())
        .map_err(partial.fail(Stage::Normalize))?;
    let pairs = npestim::make_pairs(&z).map_err(partial.fail(Stage::Pairs))?;
    let z_min = z.z.iter().copied().fold(f64::INFINITY, f64::min);
    let z_max = z.z.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut gev_notes = Vec::new();
    let mut side = |on: bool, dir: Direction| -> Option<GevParams> {
        if !on {
            return None;
        }
        match fit_side(&z, dir, &cfg.extremes) {
            Ok(g) => {
                if g.endpoint.is_none() {
                    gev_notes.push(format!(
                        "{dir:?}: xi = {} gives no finite endpoint; side left unbounded",
                        g.xi
                    ));
                }
                Some(g)
            }
            Err(e) => {
                gev_notes.push(format!("{dir:?}: GEV fit failed ({e}); side left unbounded"));
                None
            }
        }
    };
    let gev_lower = side(cfg.extremes.lower, Direction::Min);
    let gev_upper = side(cfg.extremes.upper, Direction::Max);
    let mut boundaries = BoundaryInfo::from_gev(gev_lower.as_ref(), gev_upper.as_ref());
    if cfg.extremes.manual_lower.is_some() || cfg.extremes.manual_upper.is_some() {
        let mut manual = BoundaryInfo::manual(
            cfg.extremes.manual_lower.or(boundaries.r_lower),
            cfg.extremes.manual_upper.or(boundaries.r_upper),
        );
        manual.xi_lower = boundaries.xi_lower;
        manual.xi_upper = boundaries.xi_upper;
        boundaries = manual;
    }
    partial.keep("gev_lower", &gev_lower);
    partial.keep("gev_upper", &gev_upper);
    partial.keep("boundaries", &boundaries);
    boundaries
        .check_contains(&z.z)
        .map_err(partial.fail(Stage::Extremes))?;

    let sorted_z = stats::sorted(&z.z);
    let domain = (
        stats::quantile_sorted(&sorted_z, est.central_probs[0]),
        stats::quantile_sorted(&sorted_z, est.central_probs[1]),
    );
    let drift_ls = npestim::drift_linear_ls(&pairs, domain).map_err(partial.fail(Stage::Parametric))?;
    partial.keep("drift_ls", &drift_ls);

    let mut drift_loess = None;
    let mut kernel_drift = None;
    let mut kernel_diffusion = None;
    let mut spline = None;
    let mut lambda_selection = None;
    let mut refit_drift = None;
    if est.nonparametric {
        let np = (|| -> Result<_> {
            let span = ((est.drift_span_fraction * pairs.len() as f64).ceil() as usize).max(3);
            let smoother = SmootherConfig {
                span,
                robust_iters: 0,
                ..SmootherConfig::default()
            };
            let dl = npestim::drift_loess(&pairs, &smoother)?;
            let (kb, ka) = npestim::kernel_curves(&pairs, &dl.grid, &KernelConfig::silverman(&pairs))?;
            let knots = npestim::default_knots(&pairs, est.knots);
            let (lambda, selection) = match est.lambda_multiplier {
                Some(mult) => (mult * npestim::lambda_scale(&pairs, &drift_ls, &knots), None),
                None => {
                    let s = npestim::select_lambda(&pairs, &drift_ls, &knots)?;
                    (s.lambda, Some(s))
                }
            };
            let (sp, refit) = if est.alternate_refit_iters > 0 {
                let r = npestim::alternate_refit(
                    &pairs,
                    &drift_ls,
                    lambda,
                    &knots,
                    est.alternate_refit_iters,
                    1e-6,
                )?;
                (r.spline, Some(r.drift))
            } else {
                (npestim::penalized_spline_a(&pairs, &drift_ls, lambda, &knots)?, None)
            };
            Ok((dl, kb, ka, sp, selection, refit))
        })()
        .map_err(partial.fail(Stage::Nonparametric))?;
        partial.keep("spline", &np.3);
        drift_loess = Some(np.0);
        kernel_drift = Some(np.1);
        kernel_diffusion = Some(np.2);
        spline = Some(np.3);
        lambda_selection = np.4;
        refit_drift = np.5;
    }

    let joint = pestim::fit_joint_mle_on(&pairs, est.degree_a, domain)
        .map_err(partial.fail(Stage::Parametric))?;
    partial.keep("joint", &joint);

    let mut junction_slopes = Vec::new();
    let mut tail = |gev: Option<&GevParams>, r: Option<f64>, q: f64, policy: TailPolicy| -> Result<TailPiece> {
        let level = joint.central.eval(q);
        let (Some(gev), Some(r)) = (gev, r) else {
            return Ok(TailPiece::Flat { level });
        };
        if policy == TailPolicy::UseCentral {
            return Ok(TailPiece::Central);
        }
        // A manual boundary keeps the GEV shape for the slope but moves r.
        let mut g = gev.clone();
        if g.endpoint != Some(r) {
            g.endpoint = Some(r);
            g.mu = match g.tail {
                Tail::Upper => r + g.sigma / g.xi,
                Tail::Lower => r - g.sigma / g.xi,
            };
        }
        let lemma = pestim::junction_slope(&joint.drift, &g, q, est.lemma_variant)?;
        let (used, clamped) = if est.clamp_incompatible_slope {
            pestim::admissible_slope(r, q, level, lemma)
        } else {
            (lemma, false)
        };
        junction_slopes.push(JunctionSlope {
            side: g.tail,
            junction: q,
            boundary: r,
            lemma_slope: lemma,
            used_slope: used,
            clamped,
        });
        if clamped {
            log::warn!("{:?} junction slope {lemma} moved to {used} to keep a positive tail", g.tail);
        }
        Ok(TailPiece::Quadratic(pestim::build_tail_quadratic(&joint.central, r, q, used)?))
    };
    let lower = tail(gev_lower.as_ref(), boundaries.r_lower, domain.0, est.lower_tail)
        .map_err(partial.fail(Stage::Tails))?;
    let upper = tail(gev_upper.as_ref(), boundaries.r_upper, domain.1, est.upper_tail)
        .map_err(partial.fail(Stage::Tails))?;

    let model = pestim::assemble(
        joint.drift.clone(),
        CentralPoly {
            domain,
            ..joint.central.clone()
        },
        lower,
        upper,
        boundaries,
    )
    .map_err(partial.fail(Stage::Assemble))?;

    let (whiteness, whiteness_error) = match pestim::residuals(&pairs, &model)
        .and_then(|r| pestim::whiteness_tests(&r, est.whiteness_alpha))
    {
        Ok(w) => (Some(w), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let mut robustness = Vec::new();
    for &p in &est.robustness_trims {
        let row = (|| -> Result<RobustnessRow> {
            let trimmed = pestim::trim_sample(&z, p, p)?;
            let tp = npestim::TransitionPairs::from_values(&trimmed.z, &trimmed.base);
            let fit = pestim::fit_joint_mle_on(&tp, est.degree_a, domain)?;
            Ok(RobustnessRow {
                trim: p,
                beta: fit.drift.beta,
                delta: pestim::robustness_delta(&fit.central.coeffs, &joint.central.coeffs)?,
                coeffs: fit.central.coeffs,
            })
        })();
        match row {
            Ok(r) => robustness.push(r),
            Err(e) => log::warn!("robustness refit at trim {p} failed: {e}"),
        }
    }

    let z0 = sim::start_state(&model);
    let scale = pestim::scale_function_diagnostic(&model, &[z0], z0).ok();
    let verdict = |v: Option<BoundaryVerdict>| v.unwrap_or(BoundaryVerdict::Inconclusive);

    let diagnostics = FitDiagnostics {
        n_records: series.len(),
        n_pairs: pairs.len(),
        excluded_pairs: pairs.excluded,
        z_range: (z_min, z_max),
        gev_notes,
        drift_ls,
        joint,
        junction_slopes,
        drift_loess,
        kernel_drift,
        kernel_diffusion,
        spline,
        lambda_selection,
        refit_drift,
        robustness,
        whiteness,
        whiteness_error,
        lower_boundary: verdict(scale.as_ref().map(|s| s.lower)),
        upper_boundary: verdict(scale.as_ref().map(|s| s.upper)),
    };
    let model_file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        variant: cfg.variant,
        model,
        gev_lower,
        gev_upper,
        lemma_variant: est.lemma_variant,
        mean_trend: z.mean_trend.clone(),
        scale_trend: z.scale_trend.clone(),
        layout: Layout {
            season_label: series.season_label.clone(),
            n_records: series.len(),
            blocks: series.blocks.clone(),
        },
        provenance: Provenance {
            data_sha256: series_digest(series),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
        },
    };
    Ok(FitOutput {
        model: model_file,
        diagnostics,
        normalized: z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn fit_simulate_round_trip() {
        let obs = synth::reference_series(20, 90, 31).unwrap();
        let cfg = FitConfig {
            trend: SmootherConfig::with_span(400),
            ..FitConfig::default()
        };
        let out = fit(&obs, &cfg).unwrap();
        assert!(out.diagnostics.whiteness.as_ref().unwrap().n > 100);
        let json = out.model.to_json().unwrap();
        let back = ModelFile::from_json(&json).unwrap();
        assert_eq!(back, out.model);
        assert_eq!(back.to_json().unwrap(), json);

        let e = back
            .simulate(&SimConfig {
                n_paths: 2,
                seed: 1,
                ..SimConfig::default()
            })
            .unwrap();
        assert_eq!(e.path_length, obs.len());

        let mut bad: serde_json::Value = serde_json::from_str(&json).unwrap();
        bad["format_version"] = serde_json::json!(99);
        assert!(matches!(ModelFile::from_json(&bad.to_string()), Err(Error::Format(_))));

        let mut no_trend = back.clone();
        no_trend.scale_trend = None;
        assert!(no_trend.simulate(&SimConfig::default()).is_err());
    }

    #[test]
    fn model1_skips_trends() {
        let obs = synth::reference_series(12, 90, 32).unwrap();
        let cfg = FitConfig {
            variant: Variant::Model1,
            estimation: EstimationConfig {
                nonparametric: false,
                ..EstimationConfig::default()
            },
            ..FitConfig::default()
        };
        let out = fit(&obs, &cfg).unwrap();
        assert!(out.model.mean_trend.is_none() && out.model.scale_trend.is_none());
        assert_eq!(out.normalized.z, obs.values);
    }

    #[test]
    fn stage_errors_keep_partial_results() {
        let obs = synth::reference_series(3, 90, 33).unwrap();
        let err = fit(&obs, &FitConfig::default()).unwrap_err();
        assert_eq!(err.stage, Stage::Trend);
        let cfg = FitConfig {
            variant: Variant::Model1,
            extremes: ExtremesConfig {
                manual_lower: Some(12.0),
                ..ExtremesConfig::default()
            },
            ..FitConfig::default()
        };
        let err = fit(&obs, &cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Extremes);
        assert!(err.partial.contains_key("boundaries"));
    }
}
