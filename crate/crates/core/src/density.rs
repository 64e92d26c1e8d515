//! Feature-space densities: a Gaussian mixture fitted by EM, the density
//! scaler ρ(z), the quantile-affine DAEDL scale λ(z), class-conditional
//! Gaussians for virtual-outlier sampling, and the robust energy scalar.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, GemError, Result};
use crate::rng::{substream, Rng};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DENSITY_GAMMA: f64 = 1.2;
pub const DAEDL_LAMBDA_MIN: f64 = 0.1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Component covariances: per-dimension variances, or full matrices
/// (row-major `d×d`) when the feature space has at most two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Diagonal(Vec<Vec<f64>>),
    Full(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub n_components: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariance: Covariance,
    pub fitted: bool,
    /// Mean log-likelihood after each E-step.
    #[serde(default)]
    pub trace: Vec<f64>,
    /// Components re-seeded because they lost all responsibility.
    #[serde(default)]
    pub reseeds: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GmmFitOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Forces diagonal covariances even for `d ≤ 2`.
    pub diagonal: Option<bool>,
}

impl Default for GmmFitOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            diagonal: None,
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lower Cholesky factor of a small SPD matrix; `None` if not positive definite.
fn cholesky(m: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Precomputed per-component quantities for fast log-density evaluation.
enum Factor {
    Diag { inv_var: Vec<f64>, log_norm: f64 },
    Chol { l: Vec<f64>, log_norm: f64 },
}

impl Factor {
    fn log_pdf(&self, x: &[f64], mean: &[f64]) -> f64 {
        match self {
            Factor::Diag { inv_var, log_norm } => {
                let q: f64 = x.iter().zip(mean).zip(inv_var).map(|((a, m), iv)| (a - m) * (a - m) * iv).sum();
                log_norm - 0.5 * q
            }
            Factor::Chol { l, log_norm } => {
                let d = mean.len();
                let mut y = vec![0.0; d];
                for i in 0..d {
                    let mut s = x[i] - mean[i];
                    for k in 0..i {
                        s -= l[i * d + k] * y[k];
                    }
                    y[i] = s / l[i * d + i];
                }
                log_norm - 0.5 * y.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }
}

impl GmmModel {
    pub fn unfitted(n_components: usize, dim: usize) -> Self {
        Self {
            n_components,
            dim,
            weights: vec![],
            means: vec![],
            covariance: Covariance::Diagonal(vec![]),
            fitted: false,
            trace: vec![],
            reseeds: 0,
        }
    }

    fn factors(&self) -> Vec<Factor> {
        let d = self.dim as f64;
        match &self.covariance {
            Covariance::Diagonal(vars) => vars
                .iter()
                .map(|v| Factor::Diag {
                    inv_var: v.iter().map(|x| 1.0 / x).collect(),
                    log_norm: -0.5 * (d * LN_2PI + v.iter().map(|x| x.ln()).sum::<f64>()),
                })
                .collect(),
            Covariance::Full(mats) => mats
                .iter()
                .map(|m| {
                    let l = cholesky(m, self.dim).expect("covariance kept positive definite during fitting");
                    let log_det: f64 = (0..self.dim).map(|i| 2.0 * l[i * self.dim + i].ln()).sum();
                    Factor::Chol {
                        l,
                        log_norm: -0.5 * (d * LN_2PI + log_det),
                    }
                })
                .collect(),
        }
    }

    fn component_log_joint(&self, factors: &[Factor], x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights[k].ln() + factors[k].log_pdf(x, &self.means[k]);
        }
    }

    /// `log p(z)` for every row.
    pub fn log_likelihood(&self, z: &Tensor) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(contract("density model queried before fitting"));
        }
        if z.cols() != self.dim {
            return Err(GemError::Shape {
                op: "gmm_log_likelihood",
                lhs: z.shape(),
                rhs: (self.dim, self.n_components),
            });
        }
        let factors = self.factors();
        let mut buf = vec![0.0; self.n_components];
        Ok(z.iter_rows()
            .map(|x| {
                self.component_log_joint(&factors, x, &mut buf);
                log_sum_exp(&buf)
            })
            .collect())
    }

    /// Expectation–maximization with k-means++ seeding.
    pub fn fit(features: &Tensor, n_components: usize, opts: GmmFitOptions) -> Result<Self> {
        let (n, d) = features.shape();
        if n_components == 0 || d == 0 {
            return Err(contract("GMM needs at least one component and one dimension"));
        }
        if n < 10 * n_components {
            return Err(contract(format!(
                "GMM with {n_components} components needs at least {} samples, got {n}",
                10 * n_components
            )));
        }
        if !features.all_finite() {
            return Err(GemError::NonFinite { op: "gmm_fit" });
        }
        let full = !opts.diagonal.unwrap_or(d > 2);
        let mut rng = substream(opts.seed, "gmm");

        let mut global_mean = vec![0.0; d];
        for x in features.iter_rows() {
            for (m, v) in global_mean.iter_mut().zip(x) {
                *m += v / n as f64;
            }
        }
        let global_var: Vec<f64> = (0..d)
            .map(|j| {
                let v = features.iter_rows().map(|x| (x[j] - global_mean[j]).powi(2)).sum::<f64>() / n as f64;
                v.max(VARIANCE_FLOOR)
            })
            .collect();
        let init_cov = |k: usize| -> Vec<Vec<f64>> {
            (0..k)
                .map(|_| {
                    if full {
                        let mut m = vec![0.0; d * d];
                        for j in 0..d {
                            m[j * d + j] = global_var[j];
                        }
                        m
                    } else {
                        global_var.clone()
                    }
                })
                .collect()
        };

        let means = kmeans_pp(features, n_components, &mut rng);
        let covs = init_cov(n_components);
        let mut model = Self {
            n_components,
            dim: d,
            weights: vec![1.0 / n_components as f64; n_components],
            means,
            covariance: if full { Covariance::Full(covs) } else { Covariance::Diagonal(covs) },
            fitted: true,
            trace: vec![],
            reseeds: 0,
        };

        let mut resp = vec![0.0; n * n_components];
        let mut buf = vec![0.0; n_components];
        for _ in 0..opts.max_iters {
            // E-step
            let factors = model.factors();
            let mut ll = 0.0;
            for (i, x) in features.iter_rows().enumerate() {
                model.component_log_joint(&factors, x, &mut buf);
                let lse = log_sum_exp(&buf);
                ll += lse;
                for k in 0..n_components {
                    resp[i * n_components + k] = (buf[k] - lse).exp();
                }
            }
            ll /= n as f64;
            let converged = model.trace.last().is_some_and(|prev| ll - prev < opts.tol);
            model.trace.push(ll);
            if converged {
                break;
            }
            // M-step
            let nk: Vec<f64> = (0..n_components).map(|k| (0..n).map(|i| resp[i * n_components + k]).sum()).collect();
            for k in 0..n_components {
                if nk[k] < 1e-8 * n as f64 {
                    let i = rng.random_range(0..n);
                    log::info!("GMM component {k} lost its support; re-seeded at datum {i}");
                    model.reseeds += 1;
                    model.means[k] = features.row(i).to_vec();
                    model.weights[k] = 1.0 / n as f64;
                    match &mut model.covariance {
                        Covariance::Diagonal(v) => v[k] = global_var.clone(),
                        Covariance::Full(m) => m[k] = init_cov(1).remove(0),
                    }
                    continue;
                }
                model.weights[k] = nk[k] / n as f64;
                let mut mean = vec![0.0; d];
                for (i, x) in features.iter_rows().enumerate() {
                    let r = resp[i * n_components + k];
                    for (m, v) in mean.iter_mut().zip(x) {
                        *m += r * v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nk[k]);
                match &mut model.covariance {
                    Covariance::Diagonal(vars) => {
                        let mut var = vec![0.0; d];
                        for (i, x) in features.iter_rows().enumerate() {
                            let r = resp[i * n_components + k];
                            for j in 0..d {
                                var[j] += r * (x[j] - mean[j]).powi(2);
                            }
                        }
                        vars[k] = var.iter().map(|v| (v / nk[k]).max(VARIANCE_FLOOR)).collect();
                    }
                    Covariance::Full(mats) => {
                        let mut m = vec![0.0; d * d];
                        for (i, x) in features.iter_rows().enumerate() {
                            let r = resp[i * n_components + k];
                            for a in 0..d {
                                for b in 0..d {
                                    m[a * d + b] += r * (x[a] - mean[a]) * (x[b] - mean[b]);
                                }
                            }
                        }
                        m.iter_mut().for_each(|v| *v /= nk[k]);
                        for a in 0..d {
                            m[a * d + a] = m[a * d + a].max(VARIANCE_FLOOR);
                        }
                        if cholesky(&m, d).is_none() {
                            // collinear support: fall back to the diagonal part
                            for a in 0..d {
                                for b in 0..d {
                                    if a != b {
                                        m[a * d + b] = 0.0;
                                    }
                                }
                            }
                        }
                        mats[k] = m;
                    }
                }
                model.means[k] = mean;
            }
            let total: f64 = model.weights.iter().sum();
            model.weights.iter_mut().for_each(|w| *w /= total);
        }
        Ok(model)
    }
}

fn kmeans_pp(x: &Tensor, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = x.iter_rows().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if t < *w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(idx).to_vec();
        for (di, r) in d2.iter_mut().zip(x.iter_rows()) {
            *di = di.min(sq_dist(r, &c));
        }
        centers.push(c);
    }
    centers
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// `ρ = σ(log p)^γ`, floored at the smallest positive normal so evidence
/// scaling stays well defined.
pub fn rho_from_log_likelihood(log_p: f64, gamma: f64) -> f64 {
    (gamma * log_sigmoid(log_p)).exp().max(f64::MIN_POSITIVE)
}

/// Density scaler ρ(z) per row.
pub fn rho_score(gmm: &GmmModel, z: &Tensor, gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(contract("density exponent must be positive"));
    }
    Ok(gmm.log_likelihood(z)?.into_iter().map(|lp| rho_from_log_likelihood(lp, gamma)).collect())
}

/// Linear-interpolated sample quantile, `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 1% / 99% quantiles of a score over the training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCalibration {
    pub q01: f64,
    pub q99: f64,
}

impl DensityCalibration {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
            return Err(contract("calibration needs a nonempty finite score set"));
        }
        let mut v = scores.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            q01: quantile_sorted(&v, 0.01),
            q99: quantile_sorted(&v, 0.99),
        })
    }

    pub fn span(&self) -> f64 {
        self.q99 - self.q01
    }

    /// `clip((s − q01)/(q99 − q01), 0, 1)`; `None` on a degenerate range.
    pub fn normalized(&self, s: f64) -> Option<f64> {
        let span = self.span();
        (span > 0.0).then(|| ((s - self.q01) / span).clamp(0.0, 1.0))
    }
}

/// `λ = λ_min + (1 − λ_min)·clip((log p − q01)/(q99 − q01), 0, 1)` from a log-likelihood.
pub fn daedl_lambda_from_log_likelihood(log_p: f64, calib: &DensityCalibration) -> f64 {
    match calib.normalized(log_p) {
        Some(t) => DAEDL_LAMBDA_MIN + (1.0 - DAEDL_LAMBDA_MIN) * t,
        None => {
            log::warn!("degenerate log-likelihood calibration range; DAEDL scale set to 1");
            1.0
        }
    }
}

/// DAEDL logit scale λ(z) per row.
pub fn daedl_lambda(gmm: &GmmModel, z: &Tensor, calib: &DensityCalibration) -> Result<Vec<f64>> {
    Ok(gmm
        .log_likelihood(z)?
        .into_iter()
        .map(|lp| daedl_lambda_from_log_likelihood(lp, calib))
        .collect())
}

/// Per-class diagonal Gaussians in feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussians {
    /// `None` for classes absent from the fitting data.
    pub means: Vec<Option<Vec<f64>>>,
    pub vars: Vec<Vec<f64>>,
}

/// Outcome of one virtual-outlier draw.
#[derive(Clone, Debug)]
pub struct VosSample {
    pub points: Tensor,
    /// Squared Mahalanobis threshold taken from the reference draw.
    pub threshold: f64,
    pub attempts: usize,
}

impl VosSample {
    pub fn acceptance_rate(&self) -> f64 {
        self.points.rows() as f64 / self.attempts.max(1) as f64
    }
}

impl ClassGaussians {
    pub fn fit(features: &Tensor, labels: &[usize], classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(contract("one label per feature row is required"));
        }
        let d = features.cols();
        let mut sums = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (x, &y) in features.iter_rows().zip(labels) {
            if y >= classes {
                return Err(contract(format!("label {y} out of range for {classes} classes")));
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(x) {
                *s += v;
            }
        }
        let means: Vec<Option<Vec<f64>>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        let mut vars = vec![vec![0.0; d]; classes];
        for (x, &y) in features.iter_rows().zip(labels) {
            let m = means[y].as_ref().expect("seen class");
            for j in 0..d {
                vars[y][j] += (x[j] - m[j]).powi(2);
            }
        }
        for (v, &c) in vars.iter_mut().zip(&counts) {
            for x in v.iter_mut() {
                *x = if c > 0 { *x / c as f64 } else { 0.0 }.max(VARIANCE_FLOOR);
            }
        }
        Ok(Self { means, vars })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    fn draw(&self, class: usize, rng: &mut Rng, out: &mut [f64]) -> f64 {
        let mean = self.means[class].as_ref().expect("checked by caller");
        let mut m2 = 0.0;
        for ((o, mu), var) in out.iter_mut().zip(mean).zip(&self.vars[class]) {
            let e: f64 = StandardNormal.sample(rng);
            *o = mu + var.sqrt() * e;
            m2 += e * e;
        }
        m2
    }

    /// Rejection-samples `n` points of class `c` whose squared Mahalanobis
    /// distance exceeds the `tail_quantile` of a reference draw.
    pub fn vos_sample(&self, class: usize, n: usize, tail_quantile: f64, rng: &mut Rng) -> Result<VosSample> {
        if n == 0 {
            return Err(contract("VOS needs n ≥ 1"));
        }
        if !(0.0..1.0).contains(&tail_quantile) {
            return Err(contract("tail quantile must lie in [0, 1)"));
        }
        if self.means.get(class).is_none_or(|m| m.is_none()) {
            return Err(contract(format!("class {class} was not seen when fitting class Gaussians")));
        }
        let d = self.vars[class].len();
        let mut buf = vec![0.0; d];
        let threshold = if tail_quantile > 0.0 {
            let reference: Vec<f64> = (0..(4 * n).max(10_000)).map(|_| self.draw(class, rng, &mut buf)).collect();
            quantile(&reference, tail_quantile)
        } else {
            f64::NEG_INFINITY
        };
        let mut data = Vec::with_capacity(n * d);
        let mut attempts = 0;
        while data.len() < n * d {
            attempts += 1;
            let m2 = self.draw(class, rng, &mut buf);
            if m2 >= threshold {
                data.extend_from_slice(&buf);
            }
        }
        Ok(VosSample {
            points: Tensor::new(n, d, data)?,
            threshold,
            attempts,
        })
    }

    /// Squared Mahalanobis distance of `x` to class `c`.
    pub fn mahalanobis_sq(&self, class: usize, x: &[f64]) -> f64 {
        let mean = self.means[class].as_ref().expect("seen class");
        x.iter().zip(mean).zip(&self.vars[class]).map(|((a, m), v)| (a - m).powi(2) / v).sum()
    }
}

/// Logit-space energy `−log Σ_c exp(u_c)`.
pub fn logit_energy(u: &[f64]) -> f64 {
    -log_sum_exp(u)
}

/// Quantile endpoints of learned and logit energies on training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyCalibration {
    pub learned: DensityCalibration,
    pub logit: DensityCalibration,
}

/// Confidence `clip(1 − (E − q01)/(q99 − q01), 0, 1)` from the learned
/// energy, or from the logit energy when the learned range is below 1e-6.
pub fn energy_scalar(learned: f64, logit: f64, calib: &EnergyCalibration) -> f64 {
    let (e, c) = if calib.learned.span() < 1e-6 {
        (logit, &calib.logit)
    } else {
        (learned, &calib.learned)
    };
    match c.normalized(e) {
        Some(t) => 1.0 - t,
        None => 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::Normal;

    fn gaussian_cloud(centers: &[(f64, f64)], n: usize, sd: f64, seed: u64) -> Tensor {
        let mut rng = substream(seed, "cloud");
        let nd = Normal::new(0.0, sd).unwrap();
        let mut rows = vec![];
        for &(cx, cy) in centers {
            for _ in 0..n {
                rows.push(vec![cx + nd.sample(&mut rng), cy + nd.sample(&mut rng)]);
            }
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_component_matches_moments() {
        let x = gaussian_cloud(&[(1.0, -2.0)], 500, 0.7, 1);
        for diagonal in [true, false] {
            let g = GmmModel::fit(&x, 1, GmmFitOptions { diagonal: Some(diagonal), ..Default::default() }).unwrap();
            for j in 0..2 {
                let col = x.column(j);
                let mean = col.iter().sum::<f64>() / 500.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
                assert!((g.means[0][j] - mean).abs() < 1e-10);
                let fitted_var = match &g.covariance {
                    Covariance::Diagonal(v) => v[0][j],
                    Covariance::Full(m) => m[0][j * 2 + j],
                };
                assert!((fitted_var - var).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn separated_clusters_recover_centroids() {
        let x = gaussian_cloud(&[(-5.0, 0.0), (5.0, 0.0)], 300, 0.5, 2);
        let g = GmmModel::fit(&x, 2, GmmFitOptions::default()).unwrap();
        for (lo, hi) in [(0, 300), (300, 600)] {
            let idx: Vec<usize> = (lo..hi).collect();
            let part = x.select_rows(&idx);
            let c = [part.column(0).iter().sum::<f64>() / 300.0, part.column(1).iter().sum::<f64>() / 300.0];
            let best = g.means.iter().map(|m| sq_dist(m, &c).sqrt()).fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "{best}");
        }
    }

    #[test]
    fn em_trace_is_monotone() {
        for seed in 0..5 {
            let mut rng = substream(seed, "em");
            let rows: Vec<Vec<f64>> = (0..400).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let x = Tensor::from_rows(&rows).unwrap();
            let g = GmmModel::fit(&x, 3, GmmFitOptions { seed, ..Default::default() }).unwrap();
            assert_eq!(g.reseeds, 0);
            for w in g.trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{:?}", w);
            }
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let x = Tensor::zeros(15, 2);
        assert!(GmmModel::fit(&x, 2, GmmFitOptions::default()).is_err());
        assert!(GmmModel::unfitted(2, 2).log_likelihood(&x).is_err());
    }

    #[test]
    fn rho_examples() {
        assert!((rho_from_log_likelihood(0.0, 1.2) - 0.5f64.powf(1.2)).abs() < 1e-15);
        assert!((rho_from_log_likelihood(0.0, 1.2) - 0.43528).abs() < 1e-5);
        assert!(rho_from_log_likelihood(-1e4, 1.2) <= f64::MIN_POSITIVE);
        let x = gaussian_cloud(&[(0.0, 0.0)], 200, 1.0, 3);
        let g = GmmModel::fit(&x, 1, GmmFitOptions::default()).unwrap();
        let probe = Tensor::from_rows(&[g.means[0].clone(), vec![8.0, 8.0]]).unwrap();
        let r = rho_score(&g, &probe, 1.2).unwrap();
        assert!(r[0] > r[1]);
    }

    #[test]
    fn daedl_lambda_endpoints() {
        let c = DensityCalibration { q01: -4.0, q99: 2.0 };
        assert_eq!(daedl_lambda_from_log_likelihood(2.0, &c), 1.0);
        assert!((daedl_lambda_from_log_likelihood(-4.0, &c) - 0.1).abs() < 1e-15);
        assert!((daedl_lambda_from_log_likelihood(-1.0, &c) - 0.55).abs() < 1e-15);
        let flat = DensityCalibration { q01: 1.0, q99: 1.0 };
        assert_eq!(daedl_lambda_from_log_likelihood(0.0, &flat), 1.0);
    }

    #[test]
    fn energy_scalar_endpoints() {
        let calib = EnergyCalibration {
            learned: DensityCalibration { q01: -2.0, q99: 3.0 },
            logit: DensityCalibration { q01: -5.0, q99: -1.0 },
        };
        assert_eq!(energy_scalar(-2.0, 0.0, &calib), 1.0);
        assert_eq!(energy_scalar(3.0, 0.0, &calib), 0.0);
        assert_eq!(energy_scalar(9.0, 0.0, &calib), 0.0);
        assert_eq!(energy_scalar(-9.0, 0.0, &calib), 1.0);
        let flat = EnergyCalibration {
            learned: DensityCalibration { q01: 0.3, q99: 0.3 + 1e-9 },
            ..calib
        };
        assert!((energy_scalar(0.3, -3.0, &flat) - 0.5).abs() < 1e-15);
        assert!((logit_energy(&[0.0, 0.0]) + 2f64.ln()).abs() < 1e-15);
    }

    fn class_fit() -> ClassGaussians {
        let x = gaussian_cloud(&[(0.0, 0.0), (3.0, 1.0)], 200, 0.5, 4);
        let labels: Vec<usize> = (0..400).map(|i| i / 200).collect();
        ClassGaussians::fit(&x, &labels, 3).unwrap()
    }

    #[test]
    fn vos_filter_and_determinism() {
        let cg = class_fit();
        let a = cg.vos_sample(1, 50, 0.95, &mut substream(9, "vos")).unwrap();
        let b = cg.vos_sample(1, 50, 0.95, &mut substream(9, "vos")).unwrap();
        assert_eq!(a.points, b.points);
        for x in a.points.iter_rows() {
            assert!(cg.mahalanobis_sq(1, x) >= a.threshold - 1e-9);
        }
        let plain = cg.vos_sample(0, 20, 0.0, &mut substream(9, "vos")).unwrap();
        assert_eq!(plain.attempts, 20);
        assert!(cg.vos_sample(2, 5, 0.95, &mut substream(9, "vos")).is_err());
    }

    #[test]
    fn vos_acceptance_rate() {
        let cg = class_fit();
        let s = cg.vos_sample(0, 10_000, 0.95, &mut substream(5, "vos")).unwrap();
        assert!((s.acceptance_rate() - 0.05).abs() <= 0.05 * 0.05, "{}", s.acceptance_rate());
    }

    proptest! {
        #[test]
        fn rho_strictly_increasing(a in -30.0f64..30.0, gap in 1e-3f64..10.0) {
            prop_assert!(rho_from_log_likelihood(a + gap, 1.2) > rho_from_log_likelihood(a, 1.2));
        }

        #[test]
        fn lambda_bounded_monotone(a in -20.0f64..20.0, gap in 0.0f64..5.0) {
            let c = DensityCalibration { q01: -3.0, q99: 4.0 };
            let l1 = daedl_lambda_from_log_likelihood(a, &c);
            let l2 = daedl_lambda_from_log_likelihood(a + gap, &c);
            prop_assert!((0.1..=1.0).contains(&l1));
            prop_assert!(l2 >= l1);
        }
    }
}
