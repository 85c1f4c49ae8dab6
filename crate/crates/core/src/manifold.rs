//! Intrinsic-dimension estimation over flattened channel datasets.
//!
//! Nearest neighbours are exact. Candidate neighbours are ranked with an
//! `f32` Gram matrix, and every candidate that could belong to the true
//! k-nearest set (given a rigorous rounding bound on the Gram entries) is
//! re-measured in `f64` directly from coordinates. Results therefore do not
//! depend on the GEMM kernel, the block size or the number of threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelDataset;
use crate::error::{Error, Result};

/// Dense row-major real matrix; each row is one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::shape("points", format!("{} values for {n}x{dim}", data.len())));
        }
        Ok(Self { n, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("points", "rows of unequal length"));
        }
        Ok(Self {
            n: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, c: f64) -> Points {
        Points {
            n: self.n,
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

/// Flattens every sample to `[re(h) row-major; im(h) row-major]` and scales
/// it to unit Euclidean norm.
pub fn flatten_normalize(ds: &ChannelDataset) -> Result<Points> {
    if ds.is_empty() {
        return Err(Error::arg("cannot flatten an empty dataset"));
    }
    let (rows, cols) = ds.samples[0].shape();
    let half = rows * cols;
    let dim = 2 * half;
    let mut data = vec![0.0; ds.len() * dim];
    for (i, (s, out)) in ds.samples.iter().zip(data.chunks_exact_mut(dim)).enumerate() {
        if s.shape() != (rows, cols) {
            return Err(Error::shape("flatten_normalize", format!("sample {i} has shape {:?}", s.shape())));
        }
        for (j, z) in s.as_slice().iter().enumerate() {
            out[j] = z.re as f64;
            out[half + j] = z.im as f64;
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateSample { index: i });
        }
        out.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Points { n: ds.len(), dim, data })
}

/// k smallest positive distances per point, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    k: usize,
    distances: Vec<f64>,
    /// Number of (point, neighbour) pairs skipped because the neighbour is an
    /// exact duplicate of the point. Each duplicated pair counts twice.
    pub excluded_duplicates: usize,
}

impl Knn {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.distances.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

const GRAM_BLOCK: usize = 256;
/// Unit roundoff of f32.
const F32_EPS: f64 = 5.960_464_477_539_063e-8;

fn to_f32(points: &Points) -> Vec<f32> {
    points.data.iter().map(|&v| v as f32).collect()
}

/// `rows x n` block of the f32 Gram matrix, row-major.
fn gram_block(x32: &[f32], n: usize, dim: usize, start: usize, end: usize) -> Vec<f32> {
    let m = end - start;
    let mut out = vec![0f32; m * n];
    // SAFETY: dimensions and strides describe the slices exactly:
    // A is m x dim row-major, B = X^T is dim x n with column stride dim,
    // C is m x n row-major.
    unsafe {
        matrixmultiply::sgemm(
            m,
            dim,
            n,
            1.0,
            x32[start * dim..].as_ptr(),
            dim as isize,
            1,
            x32.as_ptr(),
            1,
            dim as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

fn exact_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact k-nearest-neighbour distances (self and exact duplicates excluded).
pub fn knn_distances(points: &Points, k: usize) -> Result<Knn> {
    knn_impl(points, k, None)
}

fn knn_impl(points: &Points, k: usize, full_gram: Option<&[f32]>) -> Result<Knn> {
    let n = points.n;
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    if k >= n {
        return Err(Error::arg(format!("k = {k} requires more than {n} points")));
    }
    let dim = points.dim;
    let norms_sq: Vec<f64> = (0..n).map(|i| points.row(i).iter().map(|v| v * v).sum()).collect();
    let norms: Vec<f64> = norms_sq.iter().map(|v| v.sqrt()).collect();
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    // |fl(<x,y>) - <x,y>| <= (dim + 2) u |x||y| for f32 inputs and
    // accumulation in any order; squared distance carries twice that.
    let bound_coeff = 2.0 * 1.01 * (dim as f64 + 2.0) * F32_EPS;
    let x32 = if full_gram.is_none() { to_f32(points) } else { Vec::new() };

    let blocks: Vec<(usize, usize)> = (0..n).step_by(GRAM_BLOCK).map(|s| (s, (s + GRAM_BLOCK).min(n))).collect();

    let rows: Vec<Result<(Vec<f64>, usize)>> = blocks
        .par_iter()
        .flat_map_iter(|&(start, end)| {
            let owned = match full_gram {
                Some(_) => Vec::new(),
                None => gram_block(&x32, n, dim, start, end),
            };
            let gram: &[f32] = match full_gram {
                Some(g) => &g[start * n..end * n],
                None => &owned,
            };
            (start..end)
                .map(|i| {
                    let g = &gram[(i - start) * n..(i - start + 1) * n];
                    knn_row(points, i, k, g, &norms_sq, norms[i] * max_norm * bound_coeff)
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut distances = Vec::with_capacity(n * k);
    let mut excluded = 0;
    for r in rows {
        let (d, dup) = r?;
        distances.extend(d);
        excluded += dup;
    }
    Ok(Knn {
        k,
        distances,
        excluded_duplicates: excluded,
    })
}

fn knn_row(points: &Points, i: usize, k: usize, gram: &[f32], norms_sq: &[f64], bound: f64) -> Result<(Vec<f64>, usize)> {
    let n = points.n;
    let approx: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| ((norms_sq[i] + norms_sq[j] - 2.0 * gram[j] as f64).max(0.0), j))
        .collect();
    let mut want = k;
    loop {
        // Threshold = want-th smallest approximate squared distance.
        let mut sel = approx.clone();
        let t = if want > sel.len() {
            f64::INFINITY
        } else {
            sel.select_nth_unstable_by(want - 1, |a, b| a.0.total_cmp(&b.0));
            sel[want - 1].0
        };
        let limit = t + 2.0 * bound;
        let mut exact: Vec<(f64, usize)> = approx
            .iter()
            .filter(|(a, _)| *a <= limit)
            .map(|&(_, j)| (exact_sq_dist(points.row(i), points.row(j)), j))
            .collect();
        // Duplicates have approximate distance <= bound <= limit, so all of
        // them are in the candidate set.
        let dups = exact.iter().filter(|e| e.0 == 0.0).count();
        // The `want` smallest approximate candidates must hold k
        // non-duplicates for `limit` to cover the true k-th neighbour.
        if want < approx.len() && want.saturating_sub(dups) < k {
            want = k + dups;
            continue;
        }
        exact.retain(|e| e.0 > 0.0);
        if exact.len() < k {
            return Err(Error::DegenerateDistances(format!(
                "point {i} has only {} non-duplicate neighbours, need {k}",
                exact.len()
            )));
        }
        exact.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let d = exact[..k].iter().map(|e| e.0.sqrt()).collect();
        return Ok((d, dups));
    }
}

/// Two-NN estimator with the default 10% discard of the largest ratios.
pub fn twonn_estimate(points: &Points) -> Result<f64> {
    twonn_estimate_with(points, DEFAULT_DISCARD)
}

pub const DEFAULT_DISCARD: f64 = 0.1;

pub fn twonn_estimate_with(points: &Points, discard_fraction: f64) -> Result<f64> {
    if points.n < 10 {
        return Err(Error::arg(format!("Two-NN needs at least 10 points, got {}", points.n)));
    }
    let knn = knn_distances(points, 2)?;
    twonn_from_knn(&knn, discard_fraction)
}

pub(crate) fn twonn_from_knn(knn: &Knn, discard_fraction: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&discard_fraction) {
        return Err(Error::arg(format!("discard fraction {discard_fraction} outside [0, 1)")));
    }
    let n = knn.len();
    if n < 10 {
        return Err(Error::arg(format!("Two-NN needs at least 10 points, got {n}")));
    }
    let mut mu: Vec<f64> = (0..n)
        .map(|i| {
            let r = knn.row(i);
            r[1] / r[0]
        })
        .collect();
    mu.sort_by(f64::total_cmp);
    // The last order statistic has F = 1 and is always dropped.
    let keep = (((n as f64) * (1.0 - discard_fraction)).floor() as usize).min(n - 1);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, m) in mu[..keep].iter().enumerate() {
        let x = m.ln();
        let y = -(1.0 - (i + 1) as f64 / n as f64).ln();
        sxy += x * y;
        sxx += x * x;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateDistances("all neighbour ratios equal 1".into()));
    }
    Ok(sxy / sxx)
}

/// Levina-Bickel maximum-likelihood estimate with the global
/// (averaged-then-inverted) correction.
pub fn mle_estimate(points: &Points, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::arg("MLE needs k >= 2"));
    }
    let knn = knn_distances(points, k)?;
    mle_from_knn(&knn, k)
}

pub(crate) fn mle_from_knn(knn: &Knn, k: usize) -> Result<f64> {
    if k < 2 || k > knn.k() {
        return Err(Error::arg(format!("MLE k = {k} not available (have {})", knn.k())));
    }
    let n = knn.len();
    let mut total = 0.0;
    for i in 0..n {
        let r = &knn.row(i)[..k];
        let tk = r[k - 1];
        for t in &r[..k - 1] {
            total += (tk / t).ln();
        }
    }
    if total <= 0.0 {
        return Err(Error::DegenerateDistances("all k neighbours equidistant".into()));
    }
    Ok((n * (k - 1)) as f64 / total)
}

/// Eigenvalues of the sample covariance, descending and clamped at zero.
pub fn pca_spectrum(points: &Points) -> Result<Vec<f64>> {
    let (n, dim) = (points.n, points.dim);
    if n < 2 {
        return Err(Error::arg("PCA needs at least 2 points"));
    }
    if (1..n).all(|i| points.row(i) == points.row(0)) {
        return Err(Error::DegenerateData("all points identical".into()));
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| points.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();

    // Nonzero spectra of X^T X and X X^T coincide; factor the smaller one.
    let side = dim.min(n);
    let mut cov = vec![0.0; side * side];
    let (rsa, csa) = if dim <= n { (1, dim as isize) } else { (dim as isize, 1) };
    let (rsb, csb) = if dim <= n { (dim as isize, 1) } else { (1, dim as isize) };
    let inner = if dim <= n { n } else { dim };
    // SAFETY: A (side x inner) and B (inner x side) are views of `centered`
    // (n x dim row-major) or its transpose; C is side x side row-major.
    unsafe {
        matrixmultiply::dgemm(
            side,
            inner,
            side,
            1.0 / (n - 1) as f64,
            centered.as_ptr(),
            rsa,
            csa,
            centered.as_ptr(),
            rsb,
            csb,
            0.0,
            cov.as_mut_ptr(),
            side as isize,
            1,
        );
    }
    symmetric_eigenvalues(&cov, side)
}

/// Above this size the eigenproblem is solved in f32.
const F64_EIGEN_LIMIT: usize = 2500;

fn symmetric_eigenvalues(a: &[f64], side: usize) -> Result<Vec<f64>> {
    let mut ev: Vec<f64> = if side <= F64_EIGEN_LIMIT {
        let m = faer::Mat::<f64>::from_fn(side, side, |i, j| a[i * side + j]);
        let e = m
            .self_adjoint_eigenvalues(faer::Side::Lower)
            .map_err(|e| Error::DegenerateData(format!("eigensolver failed: {e:?}")))?;
        e.into_iter().collect()
    } else {
        let m = faer::Mat::<f32>::from_fn(side, side, |i, j| a[i * side + j] as f32);
        let e = m
            .self_adjoint_eigenvalues(faer::Side::Lower)
            .map_err(|e| Error::DegenerateData(format!("eigensolver failed: {e:?}")))?;
        e.into_iter().map(|v| v as f64).collect()
    };
    ev.iter_mut().for_each(|v| *v = v.max(0.0));
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

/// Smallest m whose top-m eigenvalues hold `threshold` of the variance.
pub fn dimension_for_variance(spectrum: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg(format!("variance threshold {threshold} outside (0, 1)")));
    }
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateData("zero total variance".into()));
    }
    let mut acc = 0.0;
    for (m, v) in spectrum.iter().enumerate() {
        acc += v;
        if acc >= threshold * total {
            return Ok(m + 1);
        }
    }
    Ok(spectrum.len())
}

pub fn pca_dimension(points: &Points, variance_threshold: f64) -> Result<usize> {
    if !(variance_threshold > 0.0 && variance_threshold < 1.0) {
        return Err(Error::arg(format!("variance threshold {variance_threshold} outside (0, 1)")));
    }
    dimension_for_variance(&pca_spectrum(points)?, variance_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Collapse,
    Intermediate,
    Healthy,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Collapse => "collapse",
            Regime::Intermediate => "intermediate",
            Regime::Healthy => "healthy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseRisk {
    pub rho: f64,
    pub regime: Regime,
}

pub const COLLAPSE_BELOW: f64 = 1e-4;
pub const HEALTHY_ABOVE: f64 = 10.0;

/// `rho = n_samples / 2^d_nl`, labelled against the 1e-4 and 10 thresholds.
pub fn collapse_risk(n_samples: u64, d_nl: f64) -> Result<CollapseRisk> {
    if n_samples < 1 || !(d_nl > 0.0 && d_nl.is_finite()) {
        return Err(Error::arg(format!(
            "collapse risk needs n >= 1 and d > 0 (got {n_samples}, {d_nl})"
        )));
    }
    let rho = n_samples as f64 / d_nl.exp2();
    let regime = if rho < COLLAPSE_BELOW {
        Regime::Collapse
    } else if rho > HEALTHY_ABOVE {
        Regime::Healthy
    } else {
        Regime::Intermediate
    };
    Ok(CollapseRisk { rho, regime })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub d_twonn: f64,
    pub d_mle: f64,
    pub d_pca_90: usize,
    pub d_pca_95: usize,
    pub rho: f64,
    pub n_samples: usize,
    pub notes: String,
}

impl DimReport {
    pub fn summary(&self) -> String {
        let regime = collapse_risk(self.n_samples as u64, self.d_twonn)
            .map(|r| r.regime.to_string())
            .unwrap_or_else(|_| "unknown".into());
        format!(
            "N={} d_twonn={:.2} d_mle={:.2} pca90={} pca95={} rho={:.4e} ({})",
            self.n_samples, self.d_twonn, self.d_mle, self.d_pca_90, self.d_pca_95, self.rho, regime
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub k_mle: usize,
    pub pca_low: f64,
    pub pca_high: f64,
    pub discard_fraction: f64,
    /// Extra neighbour counts reported as an MLE stability band.
    pub mle_band: Vec<usize>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            k_mle: 10,
            pca_low: 0.90,
            pca_high: 0.95,
            discard_fraction: DEFAULT_DISCARD,
            mle_band: vec![5, 10, 15],
        }
    }
}

/// Above this many multiply-adds the profile shares one f32 Gram matrix
/// between neighbour search and PCA instead of forming both separately.
const SHARED_GRAM_WORK: f64 = 2e10;

pub fn profile(ds: &ChannelDataset, opts: &ProfileOptions) -> Result<DimReport> {
    let points = flatten_normalize(ds)?;
    profile_points(&points, opts)
}

pub fn profile_points(points: &Points, opts: &ProfileOptions) -> Result<DimReport> {
    if opts.pca_low > opts.pca_high {
        return Err(Error::arg("pca_low must not exceed pca_high"));
    }
    let n = points.n;
    let k_max = opts.mle_band.iter().copied().chain([opts.k_mle, 2]).max().unwrap_or(2);
    let k_max = k_max.min(n.saturating_sub(1)).max(2);
    let work = (n as f64).powi(2) * points.dim as f64;
    let (knn, spectrum) = if points.dim > n && work > SHARED_GRAM_WORK {
        let x32 = to_f32(points);
        let gram = gram_block(&x32, n, points.dim, 0, n);
        drop(x32);
        let knn = knn_impl(points, k_max, Some(&gram))?;
        let spectrum = centered_gram_spectrum(&gram, n)?;
        (knn, spectrum)
    } else {
        (knn_distances(points, k_max)?, pca_spectrum(points)?)
    };

    let d_twonn = twonn_from_knn(&knn, opts.discard_fraction)?;
    let d_mle = mle_from_knn(&knn, opts.k_mle)?;
    let d_pca_90 = dimension_for_variance(&spectrum, opts.pca_low)?;
    let d_pca_95 = dimension_for_variance(&spectrum, opts.pca_high)?;
    let risk = collapse_risk(n as u64, d_twonn)?;

    let mut notes = Vec::new();
    let band: Vec<String> = opts
        .mle_band
        .iter()
        .filter(|&&k| k >= 2 && k <= knn.k())
        .filter_map(|&k| mle_from_knn(&knn, k).ok().map(|d| format!("k={k}:{d:.3}")))
        .collect();
    if !band.is_empty() {
        notes.push(format!("mle band {}", band.join(" ")));
    }
    notes.push(format!("regime {}", risk.regime));
    notes.push(format!(
        "pca thresholds {}/{}; two-nn discard {}",
        opts.pca_low, opts.pca_high, opts.discard_fraction
    ));
    let pairs = (n * (n - 1)) as f64;
    if knn.excluded_duplicates as f64 > 0.01 * pairs {
        notes.push(format!(
            "unreliable: {} duplicate neighbour pairs excluded",
            knn.excluded_duplicates
        ));
    }
    Ok(DimReport {
        d_twonn,
        d_mle,
        d_pca_90,
        d_pca_95,
        rho: risk.rho,
        n_samples: n,
        notes: notes.join("; "),
    })
}

fn centered_gram_spectrum(gram: &[f32], n: usize) -> Result<Vec<f64>> {
    let row_mean: Vec<f64> = (0..n)
        .map(|i| gram[i * n..(i + 1) * n].iter().map(|&v| v as f64).sum::<f64>() / n as f64)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let scale = 1.0 / (n - 1) as f64;
    let centered: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            (gram[idx] as f64 - row_mean[i] - row_mean[j] + grand) * scale
        })
        .collect();
    let ev = symmetric_eigenvalues(&centered, n)?;
    if ev.iter().sum::<f64>() <= 0.0 {
        return Err(Error::DegenerateData("zero total variance".into()));
    }
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelMatrix, ScenarioConfig};
    use crate::rng::Stream;
    use num_complex::Complex64;

    fn line(xs: &[f64]) -> Points {
        Points::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn knn_on_a_line() {
        let knn = knn_distances(&line(&[0.0, 1.0, 3.0]), 2).unwrap();
        assert_eq!(knn.row(0), &[1.0, 3.0]);
        assert_eq!(knn.row(1), &[1.0, 2.0]);
        assert_eq!(knn.row(2), &[2.0, 3.0]);
        assert_eq!(knn.excluded_duplicates, 0);
    }

    fn brute_force(points: &Points, k: usize) -> Vec<Vec<f64>> {
        (0..points.len())
            .map(|i| {
                let mut d: Vec<f64> = (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| exact_sq_dist(points.row(i), points.row(j)).sqrt())
                    .filter(|&d| d > 0.0)
                    .collect();
                d.sort_by(f64::total_cmp);
                d.truncate(k);
                d
            })
            .collect()
    }

    fn random_points(n: usize, dim: usize, seed: u64) -> Points {
        let mut s = Stream::new(seed);
        Points::new(n, dim, (0..n * dim).map(|_| s.normal()).collect()).unwrap()
    }

    #[test]
    fn knn_matches_brute_force() {
        for (n, dim) in [(100, 3), (100, 40), (600, 7)] {
            let p = random_points(n, dim, n as u64 + dim as u64);
            let knn = knn_distances(&p, 5).unwrap();
            let oracle = brute_force(&p, 5);
            for i in 0..n {
                assert_eq!(knn.row(i), oracle[i].as_slice(), "row {i}");
                assert!(knn.row(i).windows(2).all(|w| w[0] < w[1]));
                assert!(knn.row(i)[0] > 0.0);
            }
        }
    }

    #[test]
    fn knn_excludes_duplicates() {
        let mut p = random_points(50, 4, 3);
        let first = p.row(0).to_vec();
        p.data[4..8].copy_from_slice(&first);
        let knn = knn_distances(&p, 1).unwrap();
        assert_eq!(knn.excluded_duplicates, 2);
        assert!(knn.row(0)[0] > 0.0);
        assert_eq!(knn.row(0), brute_force(&p, 1)[0].as_slice());
    }

    #[test]
    fn knn_errors() {
        assert!(matches!(knn_distances(&line(&[0.0, 1.0]), 2), Err(Error::InvalidArgument(_))));
        assert!(matches!(knn_distances(&line(&[2.0; 10]), 1), Err(Error::DegenerateDistances(_))));
    }

    #[test]
    fn flatten_examples() {
        let mut h = ChannelMatrix::zeros(2, 2);
        h.set(0, 0, Complex64::new(1.0, 0.0));
        let ds = ChannelDataset {
            samples: vec![h],
            config: ScenarioConfig {
                n_antennas: 2,
                n_subcarriers: 2,
                ..ScenarioConfig::default()
            },
            scenario_id: "t".into(),
        };
        let p = flatten_normalize(&ds).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let mut zero = ds.clone();
        zero.samples.push(ChannelMatrix::zeros(2, 2));
        assert!(matches!(flatten_normalize(&zero), Err(Error::DegenerateSample { index: 1 })));
    }

    #[test]
    fn flatten_rows_have_unit_norm() {
        let cfg = ScenarioConfig {
            n_antennas: 8,
            n_subcarriers: 8,
            ..ScenarioConfig::default()
        };
        let ds = crate::channel::synthesize_dataset(&cfg, 20).unwrap();
        let p = flatten_normalize(&ds).unwrap();
        for i in 0..p.len() {
            let norm = p.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn collapse_risk_examples() {
        let r = collapse_risk(224_000, 14.0).unwrap();
        assert!((r.rho - 224_000.0 / 16_384.0).abs() < 1e-12);
        assert!((r.rho - 13.67).abs() < 0.01);
        assert_eq!(r.regime, Regime::Healthy);

        let r = collapse_risk(1024, 10.0).unwrap();
        assert_eq!(r.rho, 1.0);
        assert_eq!(r.regime, Regime::Intermediate);

        let r = collapse_risk(100, 35.0).unwrap();
        assert!((r.rho - 100.0 / 2f64.powi(35)).abs() < 1e-20);
        assert!(r.rho < 1e-4);
        assert_eq!(r.regime, Regime::Collapse);

        assert!(collapse_risk(10, 0.0).is_err());
    }

    #[test]
    fn pca_on_subspace_and_degenerate() {
        // 3-D linear subspace of 50-D.
        let mut s = Stream::new(4);
        let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..50).map(|_| s.normal()).collect()).collect();
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let c: Vec<f64> = (0..3).map(|_| s.normal()).collect();
                (0..50).map(|d| (0..3).map(|b| c[b] * basis[b][d]).sum()).collect()
            })
            .collect();
        let p = Points::from_rows(&rows).unwrap();
        assert_eq!(pca_dimension(&p, 0.95).unwrap(), 3);
        assert!(matches!(pca_dimension(&line(&[1.0; 5]), 0.9), Err(Error::DegenerateData(_))));
        assert!(pca_dimension(&p, 1.0).is_err());
    }

    #[test]
    fn pca_gram_route_matches_covariance_route() {
        // dim > n forces the Gram side.
        let p = random_points(30, 80, 9);
        let spec = pca_spectrum(&p).unwrap();
        let q = Points::from_rows(&(0..30).map(|i| p.row(i)[..25].to_vec()).collect::<Vec<_>>()).unwrap();
        assert_eq!(spec.len(), 30);
        assert!(pca_spectrum(&q).unwrap().len() == 25);
        // Top eigenvalues of a 30x80 Gaussian cloud via an explicit covariance.
        let mut cov = vec![0.0; 80 * 80];
        let mean: Vec<f64> = (0..80).map(|d| (0..30).map(|i| p.row(i)[d]).sum::<f64>() / 30.0).collect();
        for i in 0..30 {
            for a in 0..80 {
                for b in 0..80 {
                    cov[a * 80 + b] += (p.row(i)[a] - mean[a]) * (p.row(i)[b] - mean[b]) / 29.0;
                }
            }
        }
        let direct = symmetric_eigenvalues(&cov, 80).unwrap();
        for (x, y) in spec.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-9 * direct[0]);
        }
    }

    #[test]
    fn twonn_needs_ten_points() {
        assert!(matches!(twonn_estimate(&line(&[0.0, 1.0, 2.5])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shared_gram_route_agrees() {
        let cfg = ScenarioConfig {
            n_antennas: 16,
            n_subcarriers: 16,
            n_clusters: 2,
            rays_per_cluster: 2,
            ..ScenarioConfig::default()
        };
        let ds = crate::channel::synthesize_dataset(&cfg, 300).unwrap();
        let p = flatten_normalize(&ds).unwrap();
        let x32 = to_f32(&p);
        let gram = gram_block(&x32, p.len(), p.dim(), 0, p.len());
        let a = knn_impl(&p, 3, Some(&gram)).unwrap();
        let b = knn_distances(&p, 3).unwrap();
        assert_eq!(a, b);
        let s1 = centered_gram_spectrum(&gram, p.len()).unwrap();
        let s2 = pca_spectrum(&p).unwrap();
        for t in [0.5, 0.9, 0.95] {
            assert_eq!(dimension_for_variance(&s1, t).unwrap(), dimension_for_variance(&s2, t).unwrap());
        }
    }
}
