//! Synthetic multipath MIMO-OFDM channels and the `WCH1` dataset format.
//!
//! The generator is a cluster channel: an optional line-of-sight path plus
//! `n_clusters` scattering clusters of `rays_per_cluster` rays each. Cluster
//! delays are exponential with mean `delay_spread`, cluster powers decay as
//! `exp(-tau / delay_spread)` and are normalized to unit total, and ray angles
//! are Laplacian around the cluster centre. The LoS/NLOS power split is
//! `K/(K+1)` and `1/(K+1)`, so the expected per-entry power is exactly 1.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_seed, Stream};

/// Inter-element spacing of the uniform linear array, in wavelengths.
pub const ANTENNA_SPACING: f64 = 0.5;
/// Cluster centres are drawn uniformly from this sector (degrees).
const SECTOR_DEG: f64 = 60.0;
/// Ray delays are clipped at this multiple of the delay spread.
const MAX_DELAY_SPREADS: f64 = 4.0;
/// Intra-cluster delay offsets have this fraction of the delay spread as mean.
const INTRA_CLUSTER_DELAY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    /// LoS-to-NLOS power ratio in dB. `-inf` is pure NLOS, `+inf` pure LoS.
    #[serde(with = "crate::serde_ext::extended_f64")]
    pub rician_k_db: f64,
    pub delay_spread: f64,
    pub bandwidth: f64,
    pub carrier_freq: f64,
    pub angle_spread_deg: f64,
    pub elevation_deg: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_antennas: 128,
            n_subcarriers: 76,
            n_clusters: 8,
            rays_per_cluster: 10,
            rician_k_db: 3.0,
            delay_spread: 100e-9,
            bandwidth: 20e6,
            carrier_freq: 2e9,
            angle_spread_deg: 5.0,
            elevation_deg: 0.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(format!("scenario config: {m}")));
        if self.n_antennas < 1 {
            return bad("n_antennas must be >= 1");
        }
        if self.n_subcarriers < 2 {
            return bad("n_subcarriers must be >= 2");
        }
        if self.n_clusters < 1 {
            return bad("n_clusters must be >= 1");
        }
        if self.rays_per_cluster < 1 {
            return bad("rays_per_cluster must be >= 1");
        }
        if !(self.delay_spread.is_finite() && self.delay_spread > 0.0) {
            return bad("delay_spread must be > 0");
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return bad("bandwidth must be > 0");
        }
        if !(self.angle_spread_deg.is_finite() && self.angle_spread_deg >= 0.0) {
            return bad("angle_spread_deg must be >= 0");
        }
        if !(0.0..=90.0).contains(&self.elevation_deg) {
            return bad("elevation_deg must lie in [0, 90]");
        }
        if self.rician_k_db.is_nan() || !self.carrier_freq.is_finite() {
            return bad("rician_k_db and carrier_freq must be numbers");
        }
        Ok(())
    }

    /// Cluster count after the elevation mapping.
    pub fn effective_clusters(&self) -> usize {
        let scale = 1.0 - 0.7 * self.elevation_deg / 90.0;
        ((self.n_clusters as f64 * scale).round() as usize).max(1)
    }

    /// K-factor in dB after the elevation mapping (+10 dB at zenith).
    pub fn effective_k_db(&self) -> f64 {
        self.rician_k_db + 10.0 * self.elevation_deg / 90.0
    }

    /// Baseband frequency of subcarrier `k`: `(k - N/2) * bandwidth / N`.
    pub fn subcarrier_freq(&self, k: usize) -> f64 {
        let n = self.n_subcarriers as f64;
        (k as f64 - n / 2.0) * (self.bandwidth / n)
    }
}

/// Complex frequency response over an antenna x subcarrier grid, row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex32>,
}

impl ChannelMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex32::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "channel_matrix",
                format!("{} values for a {rows}x{cols} grid", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for m in 0..rows {
            for k in 0..cols {
                let z = f(m, k);
                data.push(Complex32::new(z.re as f32, z.im as f32));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, m: usize, k: usize) -> Complex64 {
        let z = self.data[m * self.cols + k];
        Complex64::new(z.re as f64, z.im as f64)
    }

    pub fn set(&mut self, m: usize, k: usize, z: Complex64) {
        self.data[m * self.cols + k] = Complex32::new(z.re as f32, z.im as f32);
    }

    pub fn as_slice(&self) -> &[Complex32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Sum of |h|^2 over all entries.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| (z.re as f64).powi(2) + (z.im as f64).powi(2)).sum()
    }

    pub fn mean_power(&self) -> f64 {
        self.energy() / self.data.len() as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.energy().sqrt()
    }

    /// Frobenius norm of `self - other`.
    pub fn distance(&self, other: &ChannelMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = Complex64::new(a.re as f64 - b.re as f64, a.im as f64 - b.im as f64);
                d.norm_sqr()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform-linear-array response: entry m is `exp(-i 2 pi spacing m sin(angle))`.
pub fn steering_vector(n_antennas: usize, angle_deg: f64, spacing_wavelengths: f64) -> Result<Vec<Complex64>> {
    if n_antennas < 1 {
        return Err(Error::arg("steering vector needs at least one antenna"));
    }
    if !angle_deg.is_finite() {
        return Err(Error::arg(format!("non-finite steering angle {angle_deg}")));
    }
    if !(spacing_wavelengths.is_finite() && spacing_wavelengths > 0.0) {
        return Err(Error::arg("antenna spacing must be > 0"));
    }
    let step = -2.0 * PI * spacing_wavelengths * angle_deg.to_radians().sin();
    Ok((0..n_antennas).map(|m| Complex64::from_polar(1.0, step * m as f64)).collect())
}

/// One channel realization; a pure function of `(config, sample_index)`.
pub fn synthesize_channel(config: &ScenarioConfig, sample_index: u64) -> Result<ChannelMatrix> {
    config.validate()?;
    Ok(synthesize_unchecked(config, sample_index))
}

fn synthesize_unchecked(config: &ScenarioConfig, sample_index: u64) -> ChannelMatrix {
    let n_ant = config.n_antennas;
    let n_sub = config.n_subcarriers;
    let mut rng = Stream::derived(config.seed, sample_index);

    let k_db = config.effective_k_db();
    let (los_amp, nlos_amp) = if k_db == f64::INFINITY {
        (1.0, 0.0)
    } else {
        let k = 10f64.powf(k_db / 10.0);
        ((k / (k + 1.0)).sqrt(), (1.0 / (k + 1.0)).sqrt())
    };

    let freqs: Vec<f64> = (0..n_sub).map(|k| config.subcarrier_freq(k)).collect();
    let mut acc = vec![Complex64::new(0.0, 0.0); n_ant * n_sub];

    // Draw order is fixed regardless of K so that changing the K-factor only
    // rescales the two components.
    let los_angle = rng.uniform_range(-SECTOR_DEG, SECTOR_DEG);
    let los_phase = rng.uniform_range(0.0, 2.0 * PI);
    let los_gain = Complex64::from_polar(los_amp, los_phase);
    add_path(&mut acc, n_sub, los_gain, los_angle, 0.0, &freqs);

    let ds = config.delay_spread;
    let n_clusters = config.effective_clusters();
    let mut clusters = Vec::with_capacity(n_clusters);
    for _ in 0..n_clusters {
        let tau = rng.exponential(ds).min(MAX_DELAY_SPREADS * ds);
        let centre = rng.uniform_range(-SECTOR_DEG, SECTOR_DEG);
        clusters.push((tau, centre, (-tau / ds).exp()));
    }
    let total_power: f64 = clusters.iter().map(|c| c.2).sum();
    let laplace_scale = config.angle_spread_deg / std::f64::consts::SQRT_2;
    let rays = config.rays_per_cluster;
    for &(tau_c, centre, p) in &clusters {
        let ray_power = p / total_power / rays as f64;
        for _ in 0..rays {
            let angle = centre + rng.laplace(laplace_scale);
            let tau = (tau_c + rng.exponential(INTRA_CLUSTER_DELAY * ds)).min(MAX_DELAY_SPREADS * ds);
            let gain = rng.complex_normal(ray_power) * nlos_amp;
            add_path(&mut acc, n_sub, gain, angle, tau, &freqs);
        }
    }

    let data = acc.into_iter().map(|z| Complex32::new(z.re as f32, z.im as f32)).collect();
    ChannelMatrix {
        rows: n_ant,
        cols: n_sub,
        data,
    }
}

fn add_path(acc: &mut [Complex64], n_sub: usize, gain: Complex64, angle_deg: f64, tau: f64, freqs: &[f64]) {
    if gain == Complex64::new(0.0, 0.0) {
        return;
    }
    let n_ant = acc.len() / n_sub;
    let steer = steering_vector(n_ant, angle_deg, ANTENNA_SPACING).expect("finite angle");
    let delay: Vec<Complex64> = freqs.iter().map(|f| Complex64::from_polar(1.0, -2.0 * PI * f * tau)).collect();
    for (m, a) in steer.iter().enumerate() {
        let row_gain = gain * a;
        let row = &mut acc[m * n_sub..(m + 1) * n_sub];
        for (h, d) in row.iter_mut().zip(&delay) {
            *h += row_gain * d;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub samples: Vec<ChannelMatrix>,
    pub config: ScenarioConfig,
    pub scenario_id: String,
}

impl ChannelDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.config.n_antennas, self.config.n_subcarriers)
    }

    /// Subset with the given sample indices, in order.
    pub fn select(&self, indices: impl IntoIterator<Item = usize>) -> ChannelDataset {
        ChannelDataset {
            samples: indices.into_iter().map(|i| self.samples[i].clone()).collect(),
            config: self.config.clone(),
            scenario_id: self.scenario_id.clone(),
        }
    }
}

pub fn synthesize_dataset(config: &ScenarioConfig, n_samples: usize) -> Result<ChannelDataset> {
    config.validate()?;
    if n_samples < 1 {
        return Err(Error::arg("n_samples must be >= 1"));
    }
    let samples = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| synthesize_unchecked(config, i))
        .collect();
    Ok(ChannelDataset {
        samples,
        config: config.clone(),
        scenario_id: default_scenario_id(config),
    })
}

/// Dataset whose samples draw their elevation from a weighted mixture.
///
/// Sample `i` picks its elevation with an independent stream, then is
/// synthesized exactly as `synthesize_channel(config_with_that_elevation, i)`.
pub fn synthesize_elevation_mixture(config: &ScenarioConfig, mixture: &[(f64, f64)], n_samples: usize) -> Result<ChannelDataset> {
    if mixture.is_empty() {
        return Err(Error::arg("elevation mixture is empty"));
    }
    if mixture.iter().any(|&(_, w)| !(w.is_finite() && w >= 0.0)) {
        return Err(Error::arg("mixture weights must be finite and non-negative"));
    }
    let total: f64 = mixture.iter().map(|m| m.1).sum();
    if total <= 0.0 {
        return Err(Error::arg("mixture weights sum to zero"));
    }
    let configs = mixture
        .iter()
        .map(|&(el, _)| {
            let c = ScenarioConfig {
                elevation_deg: el,
                ..config.clone()
            };
            c.validate().map(|_| c)
        })
        .collect::<Result<Vec<_>>>()?;
    if n_samples < 1 {
        return Err(Error::arg("n_samples must be >= 1"));
    }
    let samples = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let u = Stream::new(stream_seed(config.seed ^ 0x6d69_7874_7572_6500, i)).uniform() * total;
            let mut acc = 0.0;
            let mut pick = configs.len() - 1;
            for (j, &(_, w)) in mixture.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            synthesize_unchecked(&configs[pick], i)
        })
        .collect();
    let label = mixture.iter().map(|(e, w)| format!("{e}:{w}")).collect::<Vec<_>>().join(",");
    Ok(ChannelDataset {
        samples,
        config: config.clone(),
        scenario_id: format!("mix[{label}]"),
    })
}

fn default_scenario_id(c: &ScenarioConfig) -> String {
    format!("c{}r{}k{}e{}", c.n_clusters, c.rays_per_cluster, c.rician_k_db, c.elevation_deg)
}

/// Adds complex white Gaussian noise at `snr_db` relative to the mean
/// per-entry power of `h`.
pub fn add_awgn(h: &ChannelMatrix, snr_db: f64, noise_seed: u64) -> Result<ChannelMatrix> {
    if !snr_db.is_finite() {
        return Err(Error::arg(format!("snr_db must be finite, got {snr_db}")));
    }
    let variance = h.mean_power() / 10f64.powf(snr_db / 10.0);
    let mut rng = Stream::new(noise_seed);
    let mut out = h.clone();
    for z in out.data.iter_mut() {
        let n = rng.complex_normal(variance);
        *z = Complex32::new((z.re as f64 + n.re) as f32, (z.im as f64 + n.im) as f32);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// WCH1 on-disk format
// ---------------------------------------------------------------------------

pub const DATASET_MAGIC: [u8; 4] = *b"WCH1";
pub const DATASET_VERSION: u16 = 1;

pub fn save_dataset(ds: &ChannelDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ChannelDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

pub fn encode_dataset(ds: &ChannelDataset) -> Result<Vec<u8>> {
    let c = &ds.config;
    let n_samples =
        u32::try_from(ds.samples.len()).map_err(|_| Error::ShapeOverflow(format!("{} samples exceed u32", ds.samples.len())))?;
    let n_ant = u16::try_from(c.n_antennas).map_err(|_| Error::ShapeOverflow(format!("{} antennas exceed u16", c.n_antennas)))?;
    let n_sub = u16::try_from(c.n_subcarriers).map_err(|_| Error::ShapeOverflow(format!("{} subcarriers exceed u16", c.n_subcarriers)))?;
    let id = ds.scenario_id.as_bytes();
    let id_len = u8::try_from(id.len()).map_err(|_| Error::arg(format!("scenario_id is {} bytes, limit 255", id.len())))?;
    if let Some(i) = ds.samples.iter().position(|s| s.shape() != (c.n_antennas, c.n_subcarriers)) {
        return Err(Error::shape(
            "save_dataset",
            format!("sample {i} has shape {:?}, config says {:?}", ds.samples[i].shape(), ds.shape()),
        ));
    }

    let payload = ds.samples.len() * c.n_antennas * c.n_subcarriers * 8;
    let mut out = Vec::with_capacity(128 + payload);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&n_samples.to_le_bytes());
    out.extend_from_slice(&n_ant.to_le_bytes());
    out.extend_from_slice(&n_sub.to_le_bytes());
    out.push(id_len);
    out.extend_from_slice(id);
    for v in [c.n_antennas, c.n_subcarriers, c.n_clusters, c.rays_per_cluster] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in [
        c.rician_k_db,
        c.delay_spread,
        c.bandwidth,
        c.carrier_freq,
        c.angle_spread_deg,
        c.elevation_deg,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    for s in &ds.samples {
        for z in &s.data {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ChannelDataset> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.array("magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = cur.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let n_samples = cur.u32("header")? as usize;
    let n_ant = cur.u16("header")? as usize;
    let n_sub = cur.u16("header")? as usize;
    let id_len = cur.u8("scenario id")? as usize;
    let scenario_id = std::str::from_utf8(cur.take(id_len, "scenario id")?)
        .map_err(|e| Error::arg(format!("scenario id is not UTF-8: {e}")))?
        .to_owned();

    let to_usize = |v: u64| usize::try_from(v).map_err(|_| Error::ShapeOverflow(format!("config field {v} exceeds usize")));
    let config = ScenarioConfig {
        n_antennas: to_usize(cur.u64("config")?)?,
        n_subcarriers: to_usize(cur.u64("config")?)?,
        n_clusters: to_usize(cur.u64("config")?)?,
        rays_per_cluster: to_usize(cur.u64("config")?)?,
        rician_k_db: cur.f64("config")?,
        delay_spread: cur.f64("config")?,
        bandwidth: cur.f64("config")?,
        carrier_freq: cur.f64("config")?,
        angle_spread_deg: cur.f64("config")?,
        elevation_deg: cur.f64("config")?,
        seed: cur.u64("config")?,
    };
    if (config.n_antennas, config.n_subcarriers) != (n_ant, n_sub) {
        return Err(Error::arg(format!(
            "header shape {n_ant}x{n_sub} disagrees with config {}x{}",
            config.n_antennas, config.n_subcarriers
        )));
    }

    let per_sample = n_ant
        .checked_mul(n_sub)
        .ok_or_else(|| Error::ShapeOverflow(format!("{n_ant}x{n_sub}")))?;
    let payload = per_sample
        .checked_mul(n_samples)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::ShapeOverflow(format!("{n_samples} samples of {n_ant}x{n_sub}")))?;
    let body = cur.take(payload, "samples")?;
    if cur.pos != bytes.len() {
        return Err(Error::arg(format!("{} trailing bytes after samples", bytes.len() - cur.pos)));
    }

    let samples = body
        .chunks_exact(per_sample * 8)
        .map(|chunk| ChannelMatrix {
            rows: n_ant,
            cols: n_sub,
            data: chunk
                .chunks_exact(8)
                .map(|b| {
                    Complex32::new(
                        f32::from_le_bytes(b[0..4].try_into().unwrap()),
                        f32::from_le_bytes(b[4..8].try_into().unwrap()),
                    )
                })
                .collect(),
        })
        .collect::<Vec<_>>();
    Ok(ChannelDataset {
        samples,
        config,
        scenario_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_clusters: usize, k_db: f64) -> ScenarioConfig {
        ScenarioConfig {
            n_antennas: 16,
            n_subcarriers: 24,
            n_clusters,
            rays_per_cluster: 4,
            rician_k_db: k_db,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn steering_examples() {
        let v = steering_vector(4, 0.0, 0.5).unwrap();
        assert!(v.iter().all(|z| *z == Complex64::new(1.0, 0.0)));

        let v = steering_vector(2, 90.0, 0.5).unwrap();
        assert_eq!(v[0], Complex64::new(1.0, 0.0));
        assert!((v[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);

        let v = steering_vector(8, 30.0, 0.5).unwrap();
        for z in &v {
            assert!((z.norm() - 1.0).abs() < 1e-15);
        }
        // sin(30 deg) = 1/2, so the per-element phase step is -pi/2.
        assert!((v[1].arg() + PI / 2.0).abs() < 1e-12);
        for (m, z) in v.iter().enumerate() {
            let expect = Complex64::from_polar(1.0, -PI * m as f64 * 0.5);
            assert!((z - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn steering_rejects_bad_input() {
        assert!(matches!(steering_vector(4, f64::NAN, 0.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(steering_vector(4, f64::INFINITY, 0.5), Err(Error::InvalidArgument(_))));
        assert!(steering_vector(0, 0.0, 0.5).is_err());
        assert!(steering_vector(4, 0.0, 0.0).is_err());
    }

    fn max_row_ratio_deviation(h: &ChannelMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for m in 1..h.rows() {
            let r0 = h.get(m, 0) / h.get(0, 0);
            for k in 1..h.cols() {
                let r = h.get(m, k) / h.get(0, k);
                worst = worst.max((r - r0).norm() / r0.norm());
            }
        }
        worst
    }

    #[test]
    fn pure_los_is_rank_one() {
        let mut c = small(1, f64::INFINITY);
        c.rays_per_cluster = 1;
        let h = synthesize_channel(&c, 3).unwrap();
        assert!(max_row_ratio_deviation(&h) < 1e-6);
    }

    #[test]
    fn single_ray_nlos_is_rank_one() {
        let mut c = small(1, f64::NEG_INFINITY);
        c.rays_per_cluster = 1;
        for i in 0..5 {
            let h = synthesize_channel(&c, i).unwrap();
            assert!(max_row_ratio_deviation(&h) < 1e-5, "sample {i}");
        }
    }

    #[test]
    fn strong_k_factor_approaches_los() {
        let los = synthesize_channel(&small(6, f64::INFINITY), 9).unwrap();
        let strong = synthesize_channel(&small(6, 60.0), 9).unwrap();
        let rel = los.distance(&strong) / los.frobenius_norm();
        assert!(rel < 0.01, "{rel}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let c = ScenarioConfig::default();
        let a = synthesize_channel(&c, 7).unwrap();
        let b = synthesize_channel(&c, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (128, 76));
        assert!(a.is_finite());
    }

    #[test]
    fn dataset_shape_and_seed_sensitivity() {
        let c = ScenarioConfig::default();
        let ds = synthesize_dataset(&c, 10).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.samples.iter().all(|s| s.shape() == (128, 76)));
        assert_eq!(ds, synthesize_dataset(&c, 10).unwrap());

        let a = synthesize_dataset(&small(4, 0.0), 100).unwrap();
        let b = synthesize_dataset(&ScenarioConfig { seed: 1, ..small(4, 0.0) }, 100).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!(x.distance(y) > 0.0);
        }
    }

    #[test]
    fn power_is_normalized() {
        for (clusters, k_db) in [(1, f64::NEG_INFINITY), (8, 0.0), (4, 10.0)] {
            let ds = synthesize_dataset(&small(clusters, k_db), 2000).unwrap();
            let p = ds.samples.iter().map(|s| s.mean_power()).sum::<f64>() / ds.len() as f64;
            assert!((p - 1.0).abs() < 0.05, "clusters {clusters}, k {k_db}: power {p}");
        }
    }

    #[test]
    fn elevation_mapping() {
        let c = ScenarioConfig {
            n_clusters: 20,
            elevation_deg: 90.0,
            ..ScenarioConfig::default()
        };
        assert_eq!(c.effective_clusters(), 6);
        assert_eq!(c.effective_k_db(), 13.0);
        let one = ScenarioConfig {
            n_clusters: 1,
            elevation_deg: 90.0,
            ..ScenarioConfig::default()
        };
        assert_eq!(one.effective_clusters(), 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = small(2, 0.0);
        for c in [
            ScenarioConfig {
                n_antennas: 0,
                ..base.clone()
            },
            ScenarioConfig {
                n_subcarriers: 1,
                ..base.clone()
            },
            ScenarioConfig {
                n_clusters: 0,
                ..base.clone()
            },
            ScenarioConfig {
                delay_spread: 0.0,
                ..base.clone()
            },
            ScenarioConfig {
                bandwidth: -1.0,
                ..base.clone()
            },
            ScenarioConfig {
                angle_spread_deg: -1.0,
                ..base.clone()
            },
            ScenarioConfig {
                elevation_deg: 91.0,
                ..base.clone()
            },
        ] {
            assert!(matches!(synthesize_channel(&c, 0), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn awgn_vanishes_at_high_snr() {
        let h = synthesize_channel(&small(4, 0.0), 0).unwrap();
        let y = add_awgn(&h, 200.0, 1).unwrap();
        assert!(h.distance(&y) / h.frobenius_norm() < 1e-8);
        assert!(add_awgn(&h, f64::NAN, 1).is_err());
    }

    #[test]
    fn awgn_matches_requested_snr() {
        let ds = synthesize_dataset(&small(4, 0.0), 1000).unwrap();
        for snr in [0.0, 20.0] {
            let (mut err, mut sig) = (0.0, 0.0);
            for (i, h) in ds.samples.iter().enumerate() {
                let y = add_awgn(h, snr, 1000 + i as u64).unwrap();
                err += h.distance(&y).powi(2);
                sig += h.energy();
            }
            let nmse = 10.0 * (err / sig).log10();
            assert!((nmse + snr).abs() < 0.2, "snr {snr}: nmse {nmse}");
        }
    }

    #[test]
    fn mixture_is_reproducible() {
        let c = small(10, 0.0);
        let mix = [(30.0, 1.0), (90.0, 3.0)];
        let a = synthesize_elevation_mixture(&c, &mix, 20).unwrap();
        assert_eq!(a, synthesize_elevation_mixture(&c, &mix, 20).unwrap());
        assert!(synthesize_elevation_mixture(&c, &[(30.0, 0.0)], 5).is_err());
        assert!(synthesize_elevation_mixture(&c, &[(120.0, 1.0)], 5).is_err());
    }

    #[test]
    fn codec_roundtrip_and_errors() {
        let ds = synthesize_dataset(&small(3, f64::NEG_INFINITY), 10).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.config.rician_k_db, f64::NEG_INFINITY);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_dataset(&bad), Err(Error::VersionMismatch { found: 2, .. })));

        let cut = bytes.len() - 16 * 24 * 8 / 2;
        assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Truncated("samples"))));
        assert!(matches!(decode_dataset(&bytes[..9]), Err(Error::Truncated(_))));

        let mut ds_big = ds.clone();
        ds_big.config.n_antennas = 70_000;
        assert!(matches!(encode_dataset(&ds_big), Err(Error::ShapeOverflow(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wch");
        let ds = synthesize_dataset(&small(2, 5.0), 4).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }
}
