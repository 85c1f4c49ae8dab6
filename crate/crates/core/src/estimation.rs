//! Pilot-aided channel estimation: LS at pilot subcarriers, linear
//! interpolation, model-based reconstruction and the NMSE metric.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelDataset, ChannelMatrix};
use crate::error::{Error, Result};
use crate::mae::{patchify, unpatchify, Mask, TokenPredictor, Tokens};
use crate::rng::{stream_seed, Stream};

/// Comb-type pilots on every `spacing`-th subcarrier starting at `offset`,
/// identical across antennas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotPattern {
    pub spacing: usize,
    pub offset: usize,
    pub symbol: Complex64,
}

impl Default for PilotPattern {
    fn default() -> Self {
        Self {
            spacing: 8,
            offset: 0,
            symbol: Complex64::new(1.0, 0.0),
        }
    }
}

impl PilotPattern {
    pub fn new(spacing: usize, offset: usize, symbol: Complex64) -> Result<Self> {
        let p = Self { spacing, offset, symbol };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing == 0 || self.offset >= self.spacing {
            return Err(Error::arg(format!(
                "pilot spacing {} with offset {} (need spacing >= 1, offset < spacing)",
                self.spacing, self.offset
            )));
        }
        if self.symbol.norm() == 0.0 || !self.symbol.norm().is_finite() {
            return Err(Error::arg("pilot symbol must be non-zero and finite"));
        }
        Ok(())
    }

    /// Pilot subcarrier indices; at least two are required.
    pub fn columns(&self, n_subcarriers: usize) -> Result<Vec<usize>> {
        self.validate()?;
        let cols: Vec<usize> = (self.offset..n_subcarriers).step_by(self.spacing).collect();
        if cols.len() < 2 {
            return Err(Error::arg(format!(
                "pattern spacing {} offset {} leaves {} pilot(s) over {n_subcarriers} subcarriers",
                self.spacing,
                self.offset,
                cols.len()
            )));
        }
        Ok(cols)
    }

    pub fn overhead(&self, n_subcarriers: usize) -> Result<f64> {
        Ok(self.columns(n_subcarriers)?.len() as f64 / n_subcarriers as f64)
    }
}

/// Complex values on the pilot columns of an `n_antennas x n_subcarriers`
/// grid, stored antenna-major: `values[m * columns.len() + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotGrid {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub columns: Vec<usize>,
    pub values: Vec<Complex64>,
}

impl PilotGrid {
    pub fn get(&self, m: usize, j: usize) -> Complex64 {
        self.values[m * self.columns.len() + j]
    }

    fn check(&self) -> Result<()> {
        if self.values.len() != self.n_antennas * self.columns.len() {
            return Err(Error::shape(
                "pilot_grid",
                format!("{} values for {}x{} pilots", self.values.len(), self.n_antennas, self.columns.len()),
            ));
        }
        if self.columns.iter().any(|&c| c >= self.n_subcarriers) || self.columns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("pilot columns must be ascending and inside the grid"));
        }
        Ok(())
    }
}

/// Received pilot symbols `Y = x (H + n)` at the pattern's pilot columns,
/// with complex Gaussian noise at `snr_db` relative to the mean entry power
/// of `h`. `snr_db = +inf` gives noiseless reception.
pub fn receive_pilots(h: &ChannelMatrix, pattern: &PilotPattern, snr_db: f64, noise_seed: u64) -> Result<PilotGrid> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::arg(format!("snr_db must be a number below +inf, got {snr_db}")));
    }
    let columns = pattern.columns(h.cols())?;
    let variance = if snr_db == f64::INFINITY {
        0.0
    } else {
        h.mean_power() / 10f64.powf(snr_db / 10.0)
    };
    let mut rng = Stream::new(noise_seed);
    let mut values = Vec::with_capacity(h.rows() * columns.len());
    for m in 0..h.rows() {
        for &c in &columns {
            let n = if variance > 0.0 {
                rng.complex_normal(variance)
            } else {
                Complex64::new(0.0, 0.0)
            };
            values.push(pattern.symbol * (h.get(m, c) + n));
        }
    }
    Ok(PilotGrid {
        n_antennas: h.rows(),
        n_subcarriers: h.cols(),
        columns,
        values,
    })
}

/// `H_hat[m, k] = Y[m, k] / x` at every pilot position.
pub fn ls_pilot_estimate(y: &PilotGrid, pattern: &PilotPattern) -> Result<PilotGrid> {
    if pattern.symbol.norm() == 0.0 {
        return Err(Error::arg("pilot symbol is zero"));
    }
    y.check()?;
    Ok(PilotGrid {
        values: y.values.iter().map(|v| v / pattern.symbol).collect(),
        ..y.clone()
    })
}

/// Per-antenna linear interpolation of real and imaginary parts between
/// adjacent pilots; subcarriers outside the pilot span hold the nearest pilot.
pub fn interpolate_linear(est: &PilotGrid) -> Result<ChannelMatrix> {
    est.check()?;
    let cols = &est.columns;
    if cols.len() < 2 {
        return Err(Error::arg(format!("linear interpolation needs >= 2 pilots, got {}", cols.len())));
    }
    let p = cols.len();
    let mut out = ChannelMatrix::zeros(est.n_antennas, est.n_subcarriers);
    for m in 0..est.n_antennas {
        let mut seg = 0;
        for k in 0..est.n_subcarriers {
            let v = if k <= cols[0] {
                est.get(m, 0)
            } else if k >= cols[p - 1] {
                est.get(m, p - 1)
            } else {
                while cols[seg + 1] < k {
                    seg += 1;
                }
                let (k0, k1) = (cols[seg], cols[seg + 1]);
                let t = (k - k0) as f64 / (k1 - k0) as f64;
                let (a, b) = (est.get(m, seg), est.get(m, seg + 1));
                Complex64::new(a.re + t * (b.re - a.re), a.im + t * (b.im - a.im))
            };
            out.set(m, k, v);
        }
    }
    Ok(out)
}

/// `10 log10(sum |h_hat - h|^2 / sum |h|^2)`; `-inf` on an exact match.
pub fn nmse_db(h_hat: &ChannelMatrix, h_true: &ChannelMatrix) -> Result<f64> {
    if h_hat.shape() != h_true.shape() {
        return Err(Error::shape("nmse_db", format!("{:?} vs {:?}", h_hat.shape(), h_true.shape())));
    }
    let signal = h_true.energy();
    if signal == 0.0 {
        return Err(Error::arg("nmse_db: reference channel is all zero"));
    }
    let err = h_hat.distance(h_true).powi(2);
    Ok(10.0 * (err / signal).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    #[serde(skip)]
    pub h_hat: ChannelMatrix,
    /// Present when ground truth was supplied; `-inf` on an exact match.
    #[serde(with = "crate::serde_ext::extended_f64_opt")]
    pub nmse_db: Option<f64>,
    pub method: String,
    pub snr_db: f64,
}

pub const METHOD_LS: &str = "ls_interp";
pub const METHOD_MODEL: &str = "model";

pub fn ls_interp_estimate(y: &PilotGrid, pattern: &PilotPattern, snr_db: f64, truth: Option<&ChannelMatrix>) -> Result<EstimationResult> {
    let h_hat = interpolate_linear(&ls_pilot_estimate(y, pattern)?)?;
    let nmse_db = truth.map(|h| nmse_db(&h_hat, h)).transpose()?;
    Ok(EstimationResult {
        h_hat,
        nmse_db,
        method: METHOD_LS.into(),
        snr_db,
    })
}

/// Model input for one observation: LS values on the pilot columns, zeros
/// elsewhere, and the visibility of every token (visible iff it touches a
/// pilot column).
pub fn pilot_tokens<P: TokenPredictor + ?Sized>(model: &P, ls: &PilotGrid) -> Result<(Tokens, Mask)> {
    ls.check()?;
    let p = model.patching();
    if (ls.n_antennas, ls.n_subcarriers) != (p.grid_rows, p.grid_cols) {
        return Err(Error::shape(
            "model_estimate",
            format!(
                "{}x{} grid, model expects {}x{}",
                ls.n_antennas, ls.n_subcarriers, p.grid_rows, p.grid_cols
            ),
        ));
    }
    let mut partial = ChannelMatrix::zeros(ls.n_antennas, ls.n_subcarriers);
    for m in 0..ls.n_antennas {
        for (j, &c) in ls.columns.iter().enumerate() {
            partial.set(m, c, ls.get(m, j));
        }
    }
    let mask = Mask::from_visibility(&p.tokens_touching_columns(&ls.columns));
    if mask.visible.is_empty() {
        return Err(Error::arg("no token contains a pilot"));
    }
    Ok((patchify(&partial, &p)?, mask))
}

/// Writes LS values over the pilot positions of a predicted channel.
pub fn overwrite_pilots(h: &mut ChannelMatrix, ls: &PilotGrid) {
    for m in 0..ls.n_antennas {
        for (j, &c) in ls.columns.iter().enumerate() {
            h.set(m, c, ls.get(m, j));
        }
    }
}

/// Model-based estimates for a batch of observations. Non-pilot entries
/// come from the decoder, pilot entries keep their LS values.
pub fn model_estimate_batch<P: TokenPredictor + ?Sized>(
    model: &P,
    observations: &[PilotGrid],
    pattern: &PilotPattern,
    snr_db: f64,
    truths: Option<&[ChannelMatrix]>,
) -> Result<Vec<EstimationResult>> {
    if let Some(t) = truths {
        if t.len() != observations.len() {
            return Err(Error::arg("one ground-truth channel per observation is required"));
        }
    }
    let p = model.patching();
    let mut out = Vec::with_capacity(observations.len());
    for (chunk_idx, chunk) in observations.chunks(BATCH).enumerate() {
        let ls: Vec<PilotGrid> = chunk.iter().map(|y| ls_pilot_estimate(y, pattern)).collect::<Result<_>>()?;
        let inputs: Vec<(Tokens, Mask)> = ls.iter().map(|l| pilot_tokens(model, l)).collect::<Result<_>>()?;
        let toks: Vec<&Tokens> = inputs.iter().map(|i| &i.0).collect();
        let vis: Vec<Vec<usize>> = inputs.iter().map(|i| i.1.visible.clone()).collect();
        let pred = model.predict(&toks, &vis)?;
        for (i, (pr, l)) in pred.iter().zip(&ls).enumerate() {
            let mut h_hat = unpatchify(pr, &p)?;
            overwrite_pilots(&mut h_hat, l);
            if !h_hat.is_finite() {
                return Err(Error::InvalidState("model estimate is not finite".into()));
            }
            let truth = truths.map(|t| &t[chunk_idx * BATCH + i]);
            let nmse_db = truth.map(|h| nmse_db(&h_hat, h)).transpose()?;
            out.push(EstimationResult {
                h_hat,
                nmse_db,
                method: METHOD_MODEL.into(),
                snr_db,
            });
        }
    }
    Ok(out)
}

const BATCH: usize = 32;

pub fn model_estimate<P: TokenPredictor + ?Sized>(
    model: &P,
    y: &PilotGrid,
    pattern: &PilotPattern,
    snr_db: f64,
    truth: Option<&ChannelMatrix>,
) -> Result<EstimationResult> {
    let truths = truth.map(|t| vec![t.clone()]);
    Ok(model_estimate_batch(model, std::slice::from_ref(y), pattern, snr_db, truths.as_deref())?.remove(0))
}

/// One row of an SNR sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub method: String,
    /// Mean over channels of the per-channel NMSE in dB.
    pub mean_nmse_db: f64,
    pub std: f64,
}

/// Noise seed of channel `i`; shared across SNR points so that every point
/// scales the same noise realization.
pub fn noise_seed(seed: u64, i: usize) -> u64 {
    stream_seed(seed ^ 0x006e_6f69_7365, i as u64)
}

/// Received pilots for the first `n` channels of `ds` at one SNR.
pub fn observe_dataset(ds: &ChannelDataset, n: usize, pattern: &PilotPattern, snr_db: f64, seed: u64) -> Result<Vec<PilotGrid>> {
    if n == 0 || n > ds.len() {
        return Err(Error::arg(format!("need 1..={} channels, got {n}", ds.len())));
    }
    ds.samples[..n]
        .par_iter()
        .enumerate()
        .map(|(i, h)| receive_pilots(h, pattern, snr_db, noise_seed(seed, i)))
        .collect()
}

pub fn summarize(snr_db: f64, method: &str, nmse: &[f64]) -> SweepRow {
    let n = nmse.len() as f64;
    let mean = nmse.iter().sum::<f64>() / n;
    let var = nmse.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    SweepRow {
        snr_db,
        method: method.into(),
        mean_nmse_db: mean,
        std: var.sqrt(),
    }
}

/// LS+interpolation NMSE over the first `n_channels` channels of `ds` at
/// each SNR.
pub fn ls_sweep(ds: &ChannelDataset, pattern: &PilotPattern, snrs: &[f64], n_channels: usize, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(snrs.len());
    for &snr in snrs {
        let obs = observe_dataset(ds, n_channels, pattern, snr, seed)?;
        let nmse: Vec<f64> = obs
            .par_iter()
            .zip(&ds.samples[..n_channels])
            .map(|(y, h)| Ok(ls_interp_estimate(y, pattern, snr, Some(h))?.nmse_db.unwrap()))
            .collect::<Result<_>>()?;
        rows.push(summarize(snr, METHOD_LS, &nmse));
    }
    Ok(rows)
}

/// `snr_db,method,mean_nmse_db,std` rows.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_channel, ScenarioConfig};
    use crate::mae::Patching;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn pattern_columns_and_overhead() {
        let p = PilotPattern::default();
        assert_eq!(p.columns(76).unwrap().len(), 10);
        assert_eq!(p.overhead(64).unwrap(), 0.125);
        assert!(PilotPattern::new(8, 8, c(1.0, 0.0)).is_err());
        assert!(PilotPattern::new(8, 0, c(0.0, 0.0)).is_err());
        assert!(PilotPattern::new(8, 0, c(1.0, 0.0)).unwrap().columns(8).is_err());
    }

    #[test]
    fn noiseless_ls_is_exact() {
        let sc = ScenarioConfig::default();
        let h = synthesize_channel(&sc, 3).unwrap();
        for sym in [c(1.0, 0.0), c(0.0, 1.0), Complex64::from_polar(1.0, 0.7)] {
            let p = PilotPattern::new(8, 3, sym).unwrap();
            let y = receive_pilots(&h, &p, f64::INFINITY, 0).unwrap();
            let ls = ls_pilot_estimate(&y, &p).unwrap();
            for m in 0..h.rows() {
                for (j, &col) in ls.columns.iter().enumerate() {
                    assert!((ls.get(m, j) - h.get(m, col)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ls_with_imaginary_pilot_by_hand() {
        let p = PilotPattern::new(1, 0, c(0.0, 1.0)).unwrap();
        let y = PilotGrid {
            n_antennas: 1,
            n_subcarriers: 2,
            columns: vec![0, 1],
            values: vec![c(2.0, 3.0), c(-1.0, 0.5)],
        };
        let ls = ls_pilot_estimate(&y, &p).unwrap();
        // (a + bi) / i = b - ai
        assert_eq!(ls.values, vec![c(3.0, -2.0), c(0.5, 1.0)]);
        let zero = PilotPattern { symbol: c(0.0, 0.0), ..p };
        assert!(ls_pilot_estimate(&y, &zero).is_err());
    }

    #[test]
    fn interpolation_exact_on_constant_and_linear() {
        let p = PilotPattern::new(4, 1, c(1.0, 0.0)).unwrap();
        let constant = ChannelMatrix::from_fn(2, 16, |m, _| c(1.0 + m as f64, -0.5));
        let y = receive_pilots(&constant, &p, f64::INFINITY, 0).unwrap();
        let h = interpolate_linear(&ls_pilot_estimate(&y, &p).unwrap()).unwrap();
        assert_eq!(nmse_db(&h, &constant).unwrap(), f64::NEG_INFINITY);

        let linear = ChannelMatrix::from_fn(1, 16, |_, k| c(k as f64 * 0.25, 1.0 - k as f64 * 0.125));
        let y = receive_pilots(&linear, &p, f64::INFINITY, 0).unwrap();
        let h = interpolate_linear(&ls_pilot_estimate(&y, &p).unwrap()).unwrap();
        let cols = p.columns(16).unwrap();
        for k in 0..16 {
            let inside = k >= cols[0] && k <= *cols.last().unwrap();
            let err = (h.get(0, k) - linear.get(0, k)).norm();
            if inside {
                assert!(err < 1e-6, "k={k} err={err}");
            }
        }
        // Edge hold.
        assert_eq!(h.get(0, 0), h.get(0, 1));
        assert_eq!(h.get(0, 15), h.get(0, 13));
    }

    #[test]
    fn interpolation_needs_two_pilots() {
        let est = PilotGrid {
            n_antennas: 1,
            n_subcarriers: 4,
            columns: vec![0],
            values: vec![c(1.0, 0.0)],
        };
        assert!(matches!(interpolate_linear(&est), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nmse_examples() {
        let h = ChannelMatrix::from_fn(3, 5, |m, k| c(m as f64 + 1.0, k as f64));
        assert_eq!(nmse_db(&h, &h).unwrap(), f64::NEG_INFINITY);
        assert!(nmse_db(&ChannelMatrix::zeros(3, 5), &h).unwrap().abs() < 1e-12);
        assert!(nmse_db(&h, &ChannelMatrix::zeros(3, 5)).is_err());
        assert!(nmse_db(&h, &ChannelMatrix::zeros(5, 3)).is_err());
    }

    #[test]
    fn nmse_of_scaled_noise_is_minus_twenty() {
        let sc = ScenarioConfig::default();
        let h = synthesize_channel(&sc, 1).unwrap();
        let mut rng = Stream::new(5);
        let noise: Vec<Complex64> = (0..h.rows() * h.cols()).map(|_| rng.complex_normal(1.0)).collect();
        let np: f64 = noise.iter().map(|z| z.norm_sqr()).sum();
        let s = (0.01 * h.energy() / np).sqrt();
        let hn = ChannelMatrix::from_fn(h.rows(), h.cols(), |m, k| h.get(m, k) + noise[m * h.cols() + k] * s);
        assert!((nmse_db(&hn, &h).unwrap() + 20.0).abs() < 0.1);
    }

    #[test]
    fn per_pilot_nmse_at_twenty_db() {
        let sc = ScenarioConfig {
            n_antennas: 8,
            n_subcarriers: 64,
            ..ScenarioConfig::default()
        };
        let p = PilotPattern::default();
        let (mut err, mut sig) = (0.0, 0.0);
        for i in 0..1000 {
            let h = synthesize_channel(&sc, i).unwrap();
            let y = receive_pilots(&h, &p, 20.0, noise_seed(9, i as usize)).unwrap();
            let ls = ls_pilot_estimate(&y, &p).unwrap();
            for m in 0..h.rows() {
                for (j, &col) in ls.columns.iter().enumerate() {
                    err += (ls.get(m, j) - h.get(m, col)).norm_sqr() / h.mean_power();
                    sig += h.get(m, col).norm_sqr() / h.mean_power();
                }
            }
        }
        let db = 10.0 * (err / sig).log10();
        assert!((db + 20.0).abs() < 0.3, "{db}");
    }

    struct Oracle {
        truth: ChannelMatrix,
        patching: Patching,
    }

    impl TokenPredictor for Oracle {
        fn patching(&self) -> Patching {
            self.patching
        }

        fn predict(&self, tokens: &[&Tokens], _visible: &[Vec<usize>]) -> Result<Vec<Tokens>> {
            Ok(vec![patchify(&self.truth, &self.patching)?; tokens.len()])
        }
    }

    #[test]
    fn oracle_model_error_is_pilot_noise_only() {
        let sc = ScenarioConfig {
            n_antennas: 4,
            n_subcarriers: 32,
            ..ScenarioConfig::default()
        };
        let h = synthesize_channel(&sc, 2).unwrap();
        let patching = Patching {
            grid_rows: 4,
            grid_cols: 32,
            patch_rows: 4,
            patch_cols: 1,
        };
        let oracle = Oracle {
            truth: h.clone(),
            patching,
        };
        let p = PilotPattern::default();
        let y = receive_pilots(&h, &p, 10.0, 4).unwrap();
        let ls = ls_pilot_estimate(&y, &p).unwrap();
        let r = model_estimate(&oracle, &y, &p, 10.0, Some(&h)).unwrap();
        let pilot_err: f64 = (0..4)
            .flat_map(|m| ls.columns.iter().enumerate().map(move |(j, &col)| (m, j, col)))
            .map(|(m, j, col)| (ls.get(m, j) - h.get(m, col)).norm_sqr())
            .sum();
        let expected = 10.0 * (pilot_err / h.energy()).log10();
        assert!((r.nmse_db.unwrap() - expected).abs() < 1e-4);
        for m in 0..4 {
            for (j, &col) in ls.columns.iter().enumerate() {
                assert!((r.h_hat.get(m, col) - ls.get(m, j)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn ls_sweep_improves_with_snr() {
        let sc = ScenarioConfig {
            n_antennas: 4,
            n_subcarriers: 64,
            ..ScenarioConfig::default()
        };
        let ds = crate::channel::synthesize_dataset(&sc, 50).unwrap();
        let rows = ls_sweep(&ds, &PilotPattern::default(), &[0.0, 10.0, 20.0], 50, 1).unwrap();
        assert!(rows[0].mean_nmse_db > rows[1].mean_nmse_db);
        assert!(rows[1].mean_nmse_db > rows[2].mean_nmse_db);
    }
}
