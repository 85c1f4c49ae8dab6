//! Ladder experiments, power-law fits, saturation detection and model
//! sizing advice.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelDataset;
use crate::error::{Error, Result};
use crate::mae::{evaluate_mcm, pretrain, ModelConfig, ModelState, PretrainOptions};
use crate::manifold::{collapse_risk, flatten_normalize, twonn_estimate, CollapseRisk, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub params: f64,
    pub loss: f64,
    pub loss_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub alpha: f64,
    pub log_c: f64,
    pub per_scale: Vec<ScalePoint>,
    pub r_squared: f64,
    pub saturation_at: Option<f64>,
}

pub const DEFAULT_GAIN_THRESHOLD_DB: f64 = 0.6;

fn sorted_points(points: &[(f64, f64)]) -> Result<Vec<ScalePoint>> {
    if points.len() < 3 {
        return Err(Error::arg(format!("need at least 3 scales, got {}", points.len())));
    }
    if points.iter().any(|&(p, l)| !(p > 0.0 && l > 0.0 && p.is_finite() && l.is_finite())) {
        return Err(Error::arg("params and losses must be positive and finite"));
    }
    let mut v: Vec<ScalePoint> = points
        .iter()
        .map(|&(params, loss)| ScalePoint {
            params,
            loss,
            loss_db: 10.0 * loss.log10(),
        })
        .collect();
    v.sort_by(|a, b| a.params.total_cmp(&b.params));
    Ok(v)
}

/// Least squares of `ln(loss) = log_c - alpha ln(params)`; the saturation
/// point uses the default threshold.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let per_scale = sorted_points(points)?;
    let n = per_scale.len() as f64;
    let xs: Vec<f64> = per_scale.iter().map(|p| p.params.ln()).collect();
    let ys: Vec<f64> = per_scale.iter().map(|p| p.loss.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::arg("all scales have the same parameter count"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    let saturation_at = detect_saturation(points, DEFAULT_GAIN_THRESHOLD_DB)?;
    Ok(ScalingFit {
        alpha: -slope,
        log_c: intercept,
        per_scale,
        r_squared,
        saturation_at,
    })
}

/// dB gain per parameter doubling between adjacent scales (positive when
/// the loss falls).
pub fn gains_per_doubling(points: &[(f64, f64)]) -> Result<Vec<f64>> {
    let s = sorted_points(points)?;
    Ok(s.windows(2)
        .map(|w| (w[0].loss_db - w[1].loss_db) / (w[1].params / w[0].params).log2())
        .collect())
}

/// Smallest scale `P_j` (j >= 1) from which every remaining segment gains
/// less than `gain_threshold_db` per doubling; `None` if there is none.
pub fn detect_saturation(points: &[(f64, f64)], gain_threshold_db: f64) -> Result<Option<f64>> {
    let s = sorted_points(points)?;
    let gains = gains_per_doubling(points)?;
    let mut first = None;
    for j in (1..gains.len()).rev() {
        if gains[j] < gain_threshold_db {
            first = Some(j);
        } else {
            break;
        }
    }
    Ok(first.map(|j| s[j].params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "small+TTT")]
    SmallTtt,
    #[serde(rename = "medium+TTT")]
    MediumTtt,
    #[serde(rename = "large-if-data-rich")]
    LargeIfDataRich,
    #[serde(rename = "classical")]
    Classical,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::SmallTtt => "small+TTT",
            Strategy::MediumTtt => "medium+TTT",
            Strategy::LargeIfDataRich => "large-if-data-rich",
            Strategy::Classical => "classical",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizingAdvice {
    pub d_nl: f64,
    pub n_samples: u64,
    pub rho: f64,
    pub regime: Regime,
    /// `None` when no foundation model is recommended.
    pub recommended_params_range: Option<(u64, u64)>,
    pub strategy: Strategy,
    pub warning: Option<String>,
    pub rationale: String,
}

const M: u64 = 1_000_000;

/// Sizing bands keyed on the nonlinear dimension, closed on the left.
pub fn recommend_size(d_nl: f64, n_samples: u64) -> Result<SizingAdvice> {
    if !(d_nl > 0.0 && d_nl.is_finite()) {
        return Err(Error::arg(format!("d_nl must be positive and finite, got {d_nl}")));
    }
    let CollapseRisk { rho, regime } = collapse_risk(n_samples, d_nl)?;
    let rho_text = format!("rho = N / 2^d_nl = {n_samples} / 2^{d_nl} = {rho:.4e} ({regime})");
    let mut warning = None;
    let (range, strategy, why) = if d_nl < 10.0 {
        (
            None,
            Strategy::Classical,
            "d_nl below 10: the channel family is simple enough for classical estimation with a single covariance; a foundation model is not recommended".to_string(),
        )
    } else if d_nl < 15.0 {
        (
            Some((10 * M, 15 * M)),
            Strategy::SmallTtt,
            "10 <= d_nl < 15: a small model with test-time training".to_string(),
        )
    } else if d_nl < 25.0 {
        (
            Some((15 * M, 50 * M)),
            Strategy::MediumTtt,
            "15 <= d_nl < 25: a medium model with test-time training".to_string(),
        )
    } else if rho > 10.0 {
        (
            Some((30 * M, 100 * M)),
            Strategy::LargeIfDataRich,
            "d_nl >= 25 with enough data per manifold cell: a large model is justified".to_string(),
        )
    } else {
        if regime == Regime::Collapse {
            warning = Some("data is far too sparse for the manifold; large models may suffer degenerate collapse".to_string());
        }
        (
            Some((10 * M, 15 * M)),
            Strategy::SmallTtt,
            "d_nl >= 25 but rho <= 10: too little data for a large model, fall back to a small model (<= 15M) with test-time training"
                .to_string(),
        )
    };
    let rationale = match range {
        Some((lo, hi)) => format!("{why}. Recommended size {}-{}M parameters. {rho_text}.", lo / M, hi / M),
        None => format!("{why}. {rho_text}."),
    };
    Ok(SizingAdvice {
        d_nl,
        n_samples,
        rho,
        regime,
        recommended_params_range: range,
        strategy,
        warning,
        rationale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub pretrain: PretrainOptions,
    /// Trailing samples of the dataset held out for evaluation.
    pub n_eval: usize,
    pub masks_per_sample: usize,
    pub init_seed: u64,
    /// Nonlinear dimension for the rho report; estimated with Two-NN when
    /// absent.
    pub d_nl: Option<f64>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            pretrain: PretrainOptions::default(),
            n_eval: 200,
            masks_per_sample: 2,
            init_seed: 0,
            d_nl: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleResult {
    pub index: usize,
    pub config: ModelConfig,
    pub params: usize,
    pub loss: Option<f64>,
    pub loss_db: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub scales: Vec<ScaleResult>,
    /// Absent when fewer than three scales succeeded.
    pub fit: Option<ScalingFit>,
    pub failed: Vec<usize>,
    pub d_nl: f64,
    pub rho: f64,
    pub regime: Regime,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Trains every config on the same data, steps and seeds, evaluates the MCM
/// loss on the held-out tail with fixed masks, and fits the power law over
/// the scales that trained successfully. Artifacts go to `out_dir`.
pub fn run_scaling_experiment(
    ds: &ChannelDataset,
    ladder: &[ModelConfig],
    opts: &ExperimentOptions,
    out_dir: Option<&Path>,
) -> Result<(ScalingReport, Vec<Option<ModelState>>)> {
    if ladder.is_empty() {
        return Err(Error::arg("empty ladder"));
    }
    if opts.n_eval == 0 || opts.n_eval >= ds.len() {
        return Err(Error::arg(format!("n_eval must be in 1..{}, got {}", ds.len(), opts.n_eval)));
    }
    for c in ladder {
        c.validate()?;
    }
    let n_train = ds.len() - opts.n_eval;
    let train = ds.select(0..n_train);
    let eval = ds.select(n_train..ds.len());
    let d_nl = match opts.d_nl {
        Some(d) => d,
        None => twonn_estimate(&flatten_normalize(&train)?)?,
    };
    let risk = collapse_risk(n_train as u64, d_nl)?;

    let outcomes: Vec<Result<(ModelState, f64)>> = ladder
        .par_iter()
        .map(|cfg| {
            let model = ModelState::init(cfg, opts.init_seed)?;
            let trained = pretrain(model, &train, &opts.pretrain)?;
            let loss = evaluate_mcm(&trained, &eval, opts.masks_per_sample, opts.pretrain.seed ^ 0x6576_616c)?;
            Ok((trained, loss.loss))
        })
        .collect();

    let mut scales = Vec::with_capacity(ladder.len());
    let mut models = Vec::with_capacity(ladder.len());
    for (i, (cfg, out)) in ladder.iter().zip(outcomes).enumerate() {
        let params = cfg.param_count();
        match out {
            Ok((m, loss)) => {
                scales.push(ScaleResult {
                    index: i,
                    config: cfg.clone(),
                    params,
                    loss: Some(loss),
                    loss_db: Some(10.0 * loss.log10()),
                    error: None,
                });
                models.push(Some(m));
            }
            Err(e) => {
                scales.push(ScaleResult {
                    index: i,
                    config: cfg.clone(),
                    params,
                    loss: None,
                    loss_db: None,
                    error: Some(e.to_string()),
                });
                models.push(None);
            }
        }
    }
    let mut order: Vec<usize> = (0..scales.len()).collect();
    order.sort_by_key(|&i| (scales[i].params, i));
    let scales: Vec<ScaleResult> = order.iter().map(|&i| scales[i].clone()).collect();
    let mut models: Vec<Option<ModelState>> = order.iter().map(|&i| models[i].take()).collect();

    let points: Vec<(f64, f64)> = scales
        .iter()
        .filter_map(|s| s.loss.filter(|l| *l > 0.0 && l.is_finite()).map(|l| (s.params as f64, l)))
        .collect();
    let fit = if points.len() >= 3 { Some(fit_power_law(&points)?) } else { None };
    let failed = scales.iter().filter(|s| s.loss.is_none()).map(|s| s.index).collect();
    let report = ScalingReport {
        scales,
        fit,
        failed,
        d_nl,
        rho: risk.rho,
        regime: risk.regime,
        n_train,
        n_eval: opts.n_eval,
    };
    if let Some(dir) = out_dir {
        write_artifacts(dir, &report, &mut models)?;
    }
    Ok((report, models))
}

fn write_artifacts(dir: &Path, report: &ScalingReport, models: &mut [Option<ModelState>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (s, m) in report.scales.iter().zip(models.iter()) {
        if let Some(m) = m {
            m.save(dir.join(format!("scale_{}_{}.wnn", s.index, s.params)))?;
        }
    }
    std::fs::write(dir.join("scaling.csv"), scales_csv(report)?)?;
    std::fs::write(dir.join("scaling.json"), serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// `params,loss,loss_db,status` rows in ascending parameter order.
pub fn scales_csv(report: &ScalingReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["params", "loss", "loss_db", "status"])?;
    for s in &report.scales {
        let (loss, db) = match (s.loss, s.loss_db) {
            (Some(l), Some(d)) => (format!("{l:e}"), format!("{d:.6}")),
            _ => (String::new(), String::new()),
        };
        let status = if s.error.is_some() { "failed" } else { "ok" };
        w.write_record([s.params.to_string(), loss, db, status.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Reads `(params, loss)` pairs from a CSV with `params` and `loss` columns;
/// other columns are ignored and rows with an empty loss are skipped, so the
/// experiment's own `scaling.csv` is accepted.
pub fn parse_points_csv(bytes: &[u8]) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::arg(format!("points CSV lacks a `{name}` column")))
    };
    let (ip, il) = (col("params")?, col("loss")?);
    let mut points = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        if field(il).is_empty() {
            continue;
        }
        let parse = |i: usize| {
            field(i)
                .parse::<f64>()
                .map_err(|_| Error::arg(format!("row {}: `{}` is not a number", line + 1, field(i))))
        };
        points.push((parse(ip)?, parse(il)?));
    }
    Ok(points)
}

/// Plot-ready rows: measured and fitted loss per scale plus the dB gain per
/// doubling of the segment ending at that scale.
pub fn fit_csv(fit: &ScalingFit) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["params", "loss", "loss_db", "fitted_loss", "fitted_loss_db", "gain_per_doubling_db"])?;
    for (i, p) in fit.per_scale.iter().enumerate() {
        let fitted = (fit.log_c - fit.alpha * p.params.ln()).exp();
        let gain = if i == 0 {
            String::new()
        } else {
            let prev = &fit.per_scale[i - 1];
            ((prev.loss_db - p.loss_db) / (p.params / prev.params).log2()).to_string()
        };
        w.write_record([
            p.params.to_string(),
            p.loss.to_string(),
            p.loss_db.to_string(),
            fitted.to_string(),
            (10.0 * fitted.log10()).to_string(),
            gain,
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn law(params: &[f64], c: f64, alpha: f64) -> Vec<(f64, f64)> {
        params.iter().map(|&p| (p, c * p.powf(-alpha))).collect()
    }

    #[test]
    fn exact_power_law_recovery() {
        let pts = law(&[3e4, 1e5, 3e5, 1e6, 3e6], 10.0, 0.41);
        let f = fit_power_law(&pts).unwrap();
        assert!((f.alpha - 0.41).abs() < 1e-9);
        assert!((f.log_c - 10f64.ln()).abs() < 1e-9);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(f.saturation_at, None);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_power_law(&[(1.0, 1.0), (2.0, 0.5)]), Err(Error::InvalidArgument(_))));
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 0.2)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (-2.0, 0.5), (3.0, 0.2)]).is_err());
    }

    #[test]
    fn per_scale_sorted() {
        let mut pts = law(&[1e6, 3e4, 3e5], 2.0, 0.3);
        pts.swap(0, 1);
        let f = fit_power_law(&pts).unwrap();
        assert!(f.per_scale.windows(2).all(|w| w[0].params < w[1].params));
    }

    #[test]
    fn saturation_examples() {
        let pure = law(&[3e4, 1e5, 3e5, 1e6], 1.0, 0.41);
        assert_eq!(detect_saturation(&pure, 0.6).unwrap(), None);
        let g = gains_per_doubling(&pure).unwrap();
        for v in g {
            assert!((v - 0.41 * 10.0 * 2f64.log10()).abs() < 1e-9);
        }

        let flat = vec![(1e4, 1.0), (2e4, 0.5), (4e4, 0.25), (8e4, 0.25), (16e4, 0.25)];
        assert_eq!(detect_saturation(&flat, 0.6).unwrap(), Some(4e4));

        // 12M, 96M, 150M with -2.3 dB and a further -0.52 dB.
        let x = 1.0;
        let db = [-x, -x - 2.3, -x - 2.82];
        let paper: Vec<(f64, f64)> = [12e6, 96e6, 150e6]
            .iter()
            .zip(db)
            .map(|(&p, d)| (p, 10f64.powf(d / 10.0)))
            .collect();
        assert_eq!(detect_saturation(&paper, 0.6).unwrap(), None);
        assert_eq!(detect_saturation(&paper, 0.9).unwrap(), Some(96e6));
    }

    #[test]
    fn recommend_worked_examples() {
        let a = recommend_size(14.0, 224_000).unwrap();
        assert_eq!(a.recommended_params_range, Some((10 * M, 15 * M)));
        assert_eq!(a.strategy, Strategy::SmallTtt);
        assert!((a.rho - 13.671875).abs() < 1e-9);
        assert_eq!(a.regime, Regime::Healthy);

        let b = recommend_size(30.0, 100).unwrap();
        assert_eq!(b.regime, Regime::Collapse);
        assert_eq!(b.strategy, Strategy::SmallTtt);
        assert!(b.warning.is_some());
        assert!((b.rho - 100.0 / 2f64.powi(30)).abs() < 1e-20);

        assert_eq!(recommend_size(8.0, 1_000_000).unwrap().strategy, Strategy::Classical);
        assert!(recommend_size(0.0, 10).is_err());
    }

    #[test]
    fn recommend_band_edges_closed_on_left() {
        let s = |d: f64| recommend_size(d, 1 << 40).unwrap().strategy;
        assert_eq!(s(9.999), Strategy::Classical);
        assert_eq!(s(10.0), Strategy::SmallTtt);
        assert_eq!(s(14.999), Strategy::SmallTtt);
        assert_eq!(s(15.0), Strategy::MediumTtt);
        assert_eq!(s(24.999), Strategy::MediumTtt);
        assert_eq!(s(25.0), Strategy::LargeIfDataRich);
        assert_eq!(recommend_size(25.0, 1000).unwrap().strategy, Strategy::SmallTtt);
        assert_eq!(
            recommend_size(25.0, 1 << 40).unwrap().recommended_params_range,
            Some((30 * M, 100 * M))
        );
    }

    #[test]
    fn advice_serializes_strategy_labels() {
        let j = serde_json::to_value(recommend_size(14.0, 224_000).unwrap()).unwrap();
        assert_eq!(j["strategy"], "small+TTT");
        assert_eq!(j["regime"], "healthy");
    }
}
