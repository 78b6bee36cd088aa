//! K-means, Gaussian-mixture EM and KEG (K-means initialised EM) for
//! partitioning base stations into aerial cells.
//!
//! Points are plain `Vec<f64>` rows of equal dimension. For stations use
//! projected metres rather than raw degrees: KEG starts from identity
//! covariances, which only make sense when the coordinates are on a scale
//! where a unit variance is small compared to the cluster spread.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 500;
/// KEG restarts used by the command line and the planning pipeline.
pub const DEFAULT_RESTARTS: usize = 10;
/// Smallest allowed covariance eigenvalue, relative to the mean
/// per-dimension data variance.
pub const REGULARIZATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyClusters {
    /// Clusters that lose every point disappear and K shrinks.
    #[default]
    Drop,
    /// Move an empty centroid onto the point farthest from its own centroid.
    Reseed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

impl KmeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn dimension(points: &[Vec<f64>]) -> Result<usize> {
    let first = points.first().ok_or_else(|| Error::domain("no points to cluster"))?;
    let m = first.len();
    if m == 0 {
        return Err(Error::domain("points have dimension 0"));
    }
    for p in points {
        if p.len() != m {
            return Err(Error::domain("points have mixed dimensions"));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite coordinate in input points"));
        }
    }
    Ok(m)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KmeansResult> {
    kmeans_with(points, k, seed, max_iters, EmptyClusters::Drop)
}

pub fn kmeans_with(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    empty: EmptyClusters,
) -> Result<KmeansResult> {
    let m = dimension(points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::domain(format!("need 1 <= K <= N, got K = {k} with N = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, n, k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();

    let mut labels = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let (best, d) = nearest(p, &centroids);
            changed |= *l != best;
            *l = best;
            inertia += d;
        }
        trace.push(inertia);

        let mut sums = vec![vec![0.0; m]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let empties: Vec<usize> = (0..centroids.len()).filter(|&c| counts[c] == 0).collect();
        for (c, (s, &cnt)) in sums.iter().zip(&counts).enumerate() {
            if cnt > 0 {
                centroids[c] = s.iter().map(|v| v / cnt as f64).collect();
            }
        }
        if !empties.is_empty() {
            changed = true;
            match empty {
                EmptyClusters::Drop => {
                    let keep: Vec<usize> = (0..centroids.len()).filter(|&c| counts[c] > 0).collect();
                    let mut remap = vec![usize::MAX; centroids.len()];
                    for (new, &old) in keep.iter().enumerate() {
                        remap[old] = new;
                    }
                    centroids = keep.iter().map(|&c| centroids[c].clone()).collect();
                    for l in &mut labels {
                        *l = remap[*l];
                    }
                }
                EmptyClusters::Reseed => {
                    let mut taken = vec![false; n];
                    for &c in &empties {
                        let far = (0..n)
                            .filter(|&i| !taken[i])
                            .max_by(|&a, &b| {
                                let da = sq_dist(&points[a], &centroids[labels[a]]);
                                let db = sq_dist(&points[b], &centroids[labels[b]]);
                                da.total_cmp(&db).then(b.cmp(&a))
                            })
                            .expect("K <= N leaves a free point");
                        taken[far] = true;
                        centroids[c] = points[far].clone();
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    Ok(KmeansResult {
        centroids,
        labels,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `M x M` matrices.
    pub covariances: Vec<Vec<f64>>,
}

/// Per-component quantities for evaluating log densities.
struct Prepared {
    chol: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let model = GmmModel {
            weights,
            means,
            covariances,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::domain("mixture needs matching weights, means and covariances"));
        }
        let m = self.dim();
        if m == 0 || self.means.iter().any(|mu| mu.len() != m) || self.covariances.iter().any(|c| c.len() != m * m) {
            return Err(Error::domain("mixture component dimensions disagree"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::domain("mixture weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("mixture weights sum to {total}, not 1")));
        }
        self.prepare().map(|_| ())
    }

    fn cov_matrix(&self, k: usize) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_row_slice(m, m, &self.covariances[k])
    }

    fn prepare(&self) -> Result<Prepared> {
        let m = self.dim();
        let mut chol = Vec::with_capacity(self.k());
        let mut log_norm = Vec::with_capacity(self.k());
        for k in 0..self.k() {
            let c = self.cov_matrix(k);
            if (&c - c.transpose()).abs().max() > 1e-9 * c.abs().max().max(1.0) {
                return Err(Error::domain(format!("covariance {k} is not symmetric")));
            }
            let l = c
                .cholesky()
                .ok_or_else(|| Error::domain(format!("covariance {k} is not positive definite")))?
                .unpack();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            log_norm.push(-0.5 * (m as f64 * (2.0 * PI).ln() + log_det));
            chol.push(l);
        }
        Ok(Prepared { chol, log_norm })
    }

    /// `ln pi_k + ln N(x | mu_k, sigma_k)` for every component.
    fn log_joint(&self, prep: &Prepared, x: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let diff = DVector::from_iterator(x.len(), x.iter().zip(&self.means[k]).map(|(a, b)| a - b));
                let z = prep.chol[k]
                    .solve_lower_triangular(&diff)
                    .expect("cholesky factor has a positive diagonal");
                self.weights[k].ln() + prep.log_norm[k] - 0.5 * z.norm_squared()
            })
            .collect()
    }

    /// Responsibilities and total log-likelihood.
    pub fn e_step(&self, points: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, f64)> {
        let m = dimension(points)?;
        if m != self.dim() {
            return Err(Error::domain(format!("points have dimension {m}, model has {}", self.dim())));
        }
        let prep = self.prepare()?;
        let rows: Vec<(Vec<f64>, f64)> = points
            .par_iter()
            .map(|x| {
                let lj = self.log_joint(&prep, x);
                let top = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = top + lj.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
                (lj.iter().map(|v| (v - lse).exp()).collect(), lse)
            })
            .collect();
        // fixed-order reduction keeps the result independent of scheduling
        let ll = rows.iter().map(|r| r.1).sum();
        Ok((rows.into_iter().map(|r| r.0).collect(), ll))
    }

    pub fn log_likelihood(&self, points: &[Vec<f64>]) -> Result<f64> {
        Ok(self.e_step(points)?.1)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "skyplan-gmm v1");
        let _ = writeln!(out, "k {}", self.k());
        let _ = writeln!(out, "dim {}", self.dim());
        for k in 0..self.k() {
            let _ = writeln!(out, "weight {:?}", self.weights[k]);
            let _ = writeln!(out, "mean {}", join(&self.means[k]));
            let _ = writeln!(out, "cov {}", join(&self.covariances[k]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            path: "gmm model".into(),
            line: line as u64,
            message: msg.into(),
        };
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.first() != Some(&"skyplan-gmm v1") {
            return Err(bad(1, "missing gmm header"));
        }
        let field = |i: usize, key: &str| -> Result<&str> {
            lines
                .get(i)
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(' '))
                .ok_or_else(|| bad(i + 1, &format!("expected `{key}`")))
        };
        let floats = |i: usize, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(i + 1, "invalid number")))
                .collect()
        };
        let k: usize = field(1, "k")?.parse().map_err(|_| bad(2, "invalid k"))?;
        let dim: usize = field(2, "dim")?.parse().map_err(|_| bad(3, "invalid dim"))?;
        if lines.len() != 3 + 3 * k {
            return Err(bad(lines.len(), "component count does not match k"));
        }
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covariances = Vec::with_capacity(k);
        for c in 0..k {
            let base = 3 + 3 * c;
            weights.push(field(base, "weight")?.parse().map_err(|_| bad(base + 1, "invalid weight"))?);
            let mu = floats(base + 1, field(base + 1, "mean")?)?;
            let cov = floats(base + 2, field(base + 2, "cov")?)?;
            if mu.len() != dim || cov.len() != dim * dim {
                return Err(bad(base + 2, "component size does not match dim"));
            }
            means.push(mu);
            covariances.push(cov);
        }
        GmmModel::new(weights, means, covariances)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct KegResult {
    pub model: GmmModel,
    pub responsibilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Log-likelihood of the initial model, then after every M step.
    pub log_likelihood_trace: Vec<f64>,
    pub iterations: usize,
}

impl KegResult {
    pub fn log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().expect("trace is never empty")
    }
}

/// Argmax per row, ties to the lowest index.
fn argmax_rows(resp: &[Vec<f64>]) -> Vec<usize> {
    resp.iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn variance_scale(points: &[Vec<f64>], m: usize) -> f64 {
    let n = points.len() as f64;
    let mut total = 0.0;
    for j in 0..m {
        let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
        total += points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
    }
    let s = total / m as f64;
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

fn m_step(points: &[Vec<f64>], resp: &[Vec<f64>], prev: &GmmModel, floor: f64) -> GmmModel {
    let n = points.len();
    let m = prev.dim();
    let k = prev.k();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum();
        weights.push(nk / n as f64);
        if nk <= f64::MIN_POSITIVE {
            // a dead component keeps its shape and never wins again
            means.push(prev.means[c].clone());
            covariances.push(prev.covariances[c].clone());
            continue;
        }
        let mut mu = vec![0.0; m];
        for (p, r) in points.iter().zip(resp) {
            for (a, x) in mu.iter_mut().zip(p) {
                *a += r[c] * x;
            }
        }
        for a in &mut mu {
            *a /= nk;
        }
        let mut cov = vec![0.0; m * m];
        for (p, r) in points.iter().zip(resp) {
            for i in 0..m {
                let di = p[i] - mu[i];
                for j in i..m {
                    cov[i * m + j] += r[c] * di * (p[j] - mu[j]);
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                cov[i * m + j] /= nk;
                cov[j * m + i] = cov[i * m + j];
            }
        }
        // Lift the spectrum only when it dips below the floor. Adding the
        // floor unconditionally perturbs every M step away from the maximiser
        // and the likelihood can then decrease.
        let min_eig = DMatrix::from_row_slice(m, m, &cov).symmetric_eigenvalues().min();
        if min_eig < floor {
            for i in 0..m {
                cov[i * m + i] += floor - min_eig;
            }
        }
        means.push(mu);
        covariances.push(cov);
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    GmmModel {
        weights,
        means,
        covariances,
    }
}

/// EM from `init` until `|dLL| < tol` or `max_iters` M steps. The returned
/// responsibilities and labels come from a final E step under the returned
/// model.
pub fn em_fit(points: &[Vec<f64>], init: &GmmModel, tol: f64, max_iters: usize) -> Result<KegResult> {
    let m = dimension(points)?;
    init.validate()?;
    if init.dim() != m {
        return Err(Error::domain(format!("points have dimension {m}, model has {}", init.dim())));
    }
    let floor = REGULARIZATION * variance_scale(points, m);
    let mut model = init.clone();
    let (mut resp, mut ll) = model.e_step(points)?;
    let mut trace = vec![ll];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        model = m_step(points, &resp, &model, floor);
        let (r, next) = model.e_step(points)?;
        resp = r;
        trace.push(next);
        let delta = (next - ll).abs();
        ll = next;
        if delta < tol {
            break;
        }
    }
    let labels = argmax_rows(&resp);
    Ok(KegResult {
        model,
        responsibilities: resp,
        labels,
        log_likelihood_trace: trace,
        iterations,
    })
}

/// K-means for the initial means, identity covariances, equal weights,
/// then EM. If K-means drops empty clusters the mixture has fewer
/// components than requested.
pub fn keg(points: &[Vec<f64>], k: usize, seed: u64, tol: f64, max_iters: usize) -> Result<KegResult> {
    let km = kmeans(points, k, seed, max_iters)?;
    em_fit(points, &keg_init(&km), tol, max_iters)
}

/// Settings for [`keg_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct KegOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Independent K-means initialisations; the fit with the highest final
    /// log-likelihood wins (ties to the earliest).
    pub restarts: usize,
    pub empty: EmptyClusters,
}

impl Default for KegOptions {
    fn default() -> Self {
        KegOptions {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            restarts: DEFAULT_RESTARTS,
            empty: EmptyClusters::Drop,
        }
    }
}

/// [`keg`] with restarts and a choice of empty-cluster policy. Restart 0
/// uses `seed` itself, so a single restart with dropping is exactly
/// [`keg`]; later restarts draw their seeds from a generator seeded with
/// `seed`.
pub fn keg_with(points: &[Vec<f64>], k: usize, seed: u64, opts: &KegOptions) -> Result<KegResult> {
    if opts.restarts == 0 {
        return Err(Error::domain("need at least one restart"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = std::iter::once(seed)
        .chain((1..opts.restarts).map(|_| rand::Rng::random(&mut rng)))
        .collect();
    let fits: Vec<KegResult> = seeds
        .par_iter()
        .map(|&s| {
            let km = kmeans_with(points, k, s, opts.max_iters, opts.empty)?;
            em_fit(points, &keg_init(&km), opts.tol, opts.max_iters)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.log_likelihood() > fits[best].log_likelihood() {
            best = i;
        }
    }
    Ok(fits.into_iter().nth(best).expect("restarts >= 1"))
}

/// Mixture seeded from a K-means result.
pub fn keg_init(km: &KmeansResult) -> GmmModel {
    let k = km.k();
    let m = km.centroids[0].len();
    let identity: Vec<f64> = (0..m * m).map(|i| if i % (m + 1) == 0 { 1.0 } else { 0.0 }).collect();
    GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: km.centroids.clone(),
        covariances: vec![identity; k],
    }
}

/// Labels under a fixed model, without refitting.
pub fn assign_labels(model: &GmmModel, points: &[Vec<f64>]) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.e_step(points)?.0))
}

/// Appends a feature column, z-scored and then scaled so its spread is
/// `weight` times the root mean variance of the existing coordinates.
pub fn append_feature(points: &[Vec<f64>], feature: &[f64], weight: f64) -> Result<Vec<Vec<f64>>> {
    let m = dimension(points)?;
    if feature.len() != points.len() {
        return Err(Error::domain("feature column length differs from point count"));
    }
    let n = feature.len() as f64;
    let mean = feature.iter().sum::<f64>() / n;
    let sd = (feature.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = weight * variance_scale(points, m).sqrt();
    Ok(points
        .iter()
        .zip(feature)
        .map(|(p, &f)| {
            let z = if sd > 0.0 { (f - mean) / sd } else { 0.0 };
            let mut row = p.clone();
            row.push(z * scale);
            row
        })
        .collect())
}
