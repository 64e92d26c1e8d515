//! Dirichlet evidence, predictive means, KL to the flat Dirichlet, entropy
//! and the mixture mutual-information decomposition.

pub mod special;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use special::{digamma_unchecked, lgamma_unchecked};

/// Additive evidence floor.
pub const EVIDENCE_EPS: f64 = 1e-8;

/// Concentration vector of a Dirichlet with its cached total.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    alpha0: f64,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(contract("Dirichlet needs at least one class"));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
            return Err(contract(format!("Dirichlet concentration must be positive and finite, got {a}")));
        }
        let alpha0 = alpha.iter().sum();
        Ok(Self { alpha, alpha0 })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }
}

/// Categorical distribution on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDist {
    p: Vec<f64>,
}

impl PredictiveDist {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let s: f64 = p.iter().sum();
        if p.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-10 {
            return Err(contract(format!("not a simplex vector (sum {s})")));
        }
        Ok(Self { p })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            p: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }
}

/// `α_c = ρ·exp(clip(u_c, −τ, τ)) + ε`.
pub fn alpha_from_logits(logits: &[f64], tau: f64, eps: f64, rho: f64) -> Result<DirichletParams> {
    if !(tau > 0.0 && eps > 0.0) {
        return Err(contract("tau and eps must be positive"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(contract(format!("density score must lie in (0, 1], got {rho}")));
    }
    DirichletParams::new(logits.iter().map(|u| rho * u.clamp(-tau, tau).exp() + eps).collect())
}

/// `p_c = α_c / α₀`.
pub fn predictive_mean(params: &DirichletParams) -> PredictiveDist {
    PredictiveDist {
        p: params.alpha.iter().map(|a| a / params.alpha0).collect(),
    }
}

/// `KL[Dir(α) ‖ Dir(1)]`, evaluated in log-gamma space.
pub fn kl_to_uniform(params: &DirichletParams) -> f64 {
    let c = params.classes() as f64;
    let a0 = params.alpha0;
    let psi0 = digamma_unchecked(a0);
    let mut kl = lgamma_unchecked(a0) - lgamma_unchecked(c);
    for &a in &params.alpha {
        kl += -lgamma_unchecked(a) + (a - 1.0) * (digamma_unchecked(a) - psi0);
    }
    // rounding can leave tiny negatives near α = 1
    kl.max(0.0)
}

/// Row-wise KL to the flat Dirichlet on the tape: `N×C → N×1`.
pub fn kl_to_uniform_rows(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let classes = tape.shape(alpha).1 as f64;
    let alpha0 = tape.sum_rows(alpha)?;
    let lg0 = tape.lgamma(alpha0)?;
    let lg = tape.lgamma(alpha)?;
    let lg_sum = tape.sum_rows(lg)?;
    let psi = tape.digamma(alpha)?;
    let psi0 = tape.digamma(alpha0)?;
    let dpsi = tape.sub(psi, psi0)?;
    let am1 = tape.add_scalar(alpha, -1.0)?;
    let cross = tape.mul(am1, dpsi)?;
    let cross_sum = tape.sum_rows(cross)?;
    let head = tape.sub(lg0, lg_sum)?;
    let kl = tape.add(head, cross_sum)?;
    tape.add_scalar(kl, -lgamma_unchecked(classes))
}

/// Shannon entropy with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `MI = H(Σ_k π_k p^(k)) − Σ_k π_k H(p^(k))`.
pub fn mutual_information(weights: &[f64], heads: &[&[f64]]) -> Result<f64> {
    if weights.len() != heads.len() || heads.is_empty() {
        return Err(contract("one mixture weight per head is required"));
    }
    let classes = heads[0].len();
    if heads.iter().any(|h| h.len() != classes) {
        return Err(contract("heads disagree on class count"));
    }
    let mut mix = vec![0.0; classes];
    let mut expected_h = 0.0;
    for (w, h) in weights.iter().zip(heads) {
        for (m, p) in mix.iter_mut().zip(h.iter()) {
            *m += w * p;
        }
        expected_h += w * entropy(h);
    }
    Ok(entropy(&mix) - expected_h)
}

/// Entropy on the tape, row-wise: `N×C → N×1`. Entries must be positive.
pub fn entropy_rows(tape: &mut Tape, p: Var) -> Result<Var> {
    let lp = tape.log(p)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum_rows(plp)?;
    tape.neg(s)
}
