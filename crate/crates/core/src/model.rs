//! GEM forward pass (backbone → energy → heads → router → FI modulation →
//! density scaling → mixture → gate) and every term of the training objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::density::{
    daedl_lambda_from_log_likelihood, rho_from_log_likelihood, ClassGaussians, DensityCalibration, EnergyCalibration,
    GmmFitOptions, GmmModel, DENSITY_GAMMA,
};
use crate::dirichlet::{entropy_rows, kl_to_uniform_rows, EVIDENCE_EPS};
use crate::error::{contract, GemError, Result};
use crate::networks::{ArchConfig, GemNetworks, Graph};

/// Floor inside the predictive log-likelihood.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(alias = "edl")]
    EdlBaseline,
    #[serde(alias = "daedl")]
    DaedlBaseline,
    #[serde(alias = "gem_core")]
    Core,
    #[serde(alias = "gem_mix")]
    Mix,
    #[serde(alias = "gem_fi")]
    Fi,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::EdlBaseline => "edl",
            Variant::DaedlBaseline => "daedl",
            Variant::Core => "gem_core",
            Variant::Mix => "gem_mix",
            Variant::Fi => "gem_fi",
        }
    }

    /// Single-head variants trained with the squared-error objective.
    pub fn single_head(self) -> bool {
        matches!(self, Variant::EdlBaseline | Variant::DaedlBaseline | Variant::Core)
    }
}

/// Component switches; every network is built regardless so that toggling a
/// switch never changes the parameter layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    pub sn: bool,
    pub gate: bool,
    pub density_scaling: bool,
    pub fi_reg: bool,
    pub fi_mod: bool,
    pub ebm: bool,
    pub unc: bool,
    pub vos: bool,
    pub tanh_energy: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VosConfig {
    pub weight: f64,
    pub warmup_epochs: usize,
    pub margin: f64,
    pub tail_quantile: f64,
}

impl Default for VosConfig {
    fn default() -> Self {
        Self {
            weight: 0.1,
            warmup_epochs: 10,
            margin: 1.0,
            tail_quantile: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GemConfig {
    pub variant: Variant,
    pub heads: usize,
    pub tau: f64,
    pub eps: f64,
    pub eps_prime: f64,
    pub gamma: f64,
    pub gate_bounds: (f64, f64),
    pub lambda_kl: f64,
    pub lambda_fi: f64,
    pub lambda_ebm: f64,
    pub lambda_unc: f64,
    pub beta_id: f64,
    pub beta_ood: f64,
    /// Weight of the expected-trace term added to the FI regularizer.
    pub fi_trace_beta: f64,
    pub temperature: f64,
    /// GMM components; defaults to the class count.
    pub gmm_components: Option<usize>,
    /// Apply the KL prior to density-scaled evidence rather than raw head evidence.
    pub kl_density_scaled: bool,
    pub flags: Flags,
    pub vos: VosConfig,
    pub arch: ArchConfig,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self::preset(Variant::Fi, ArchConfig::toy2d())
    }
}

impl GemConfig {
    pub fn preset(variant: Variant, arch: ArchConfig) -> Self {
        let on = |sn, gate, density| Flags {
            sn,
            gate,
            density_scaling: density,
            ..Flags::default()
        };
        let (heads, flags) = match variant {
            Variant::EdlBaseline | Variant::DaedlBaseline => (1, Flags::default()),
            Variant::Core => (1, on(true, true, true)),
            Variant::Mix => (3, on(true, true, true)),
            Variant::Fi => (
                3,
                Flags {
                    fi_reg: true,
                    fi_mod: true,
                    ebm: true,
                    unc: true,
                    vos: true,
                    ..on(true, true, true)
                },
            ),
        };
        Self {
            variant,
            heads,
            tau: 10.0,
            eps: EVIDENCE_EPS,
            eps_prime: 1e-4,
            gamma: DENSITY_GAMMA,
            gate_bounds: (0.1, 0.9),
            lambda_kl: 1e-3,
            lambda_fi: 0.3,
            lambda_ebm: 0.1,
            lambda_unc: 1.0,
            beta_id: 0.1,
            beta_ood: 0.1,
            fi_trace_beta: 0.01,
            temperature: 1.0,
            gmm_components: None,
            kl_density_scaled: false,
            flags,
            vos: VosConfig::default(),
            arch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GemError::Config(m));
        if self.heads == 0 {
            return err("heads must be at least 1".into());
        }
        if self.variant.single_head() && self.heads != 1 {
            return err(format!("variant {} requires heads = 1", self.variant.name()));
        }
        let (lo, hi) = self.gate_bounds;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return err(format!("gate_bounds must satisfy 0 < s_min < s_max < 1, got ({lo}, {hi})"));
        }
        for (name, v) in [
            ("lambda_kl", self.lambda_kl),
            ("lambda_fi", self.lambda_fi),
            ("lambda_ebm", self.lambda_ebm),
            ("lambda_unc", self.lambda_unc),
            ("beta_id", self.beta_id),
            ("beta_ood", self.beta_ood),
            ("fi_trace_beta", self.fi_trace_beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        for (name, v) in [("tau", self.tau), ("eps", self.eps), ("gamma", self.gamma), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.eps_prime >= 0.0) {
            return err("eps_prime must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.vos.tail_quantile) {
            return err("vos.tail_quantile must lie in [0, 1)".into());
        }
        if self.arch.classes < 2 {
            return err("arch.classes must be at least 2".into());
        }
        if !(self.arch.sn_coeff > 0.0 && self.arch.sn_coeff.is_finite()) {
            return err("arch.sn_coeff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.arch.dropout) || !(0.0..1.0).contains(&self.arch.internal_dropout) {
            return err("arch dropout rates must lie in [0, 1)".into());
        }
        if self.gmm_components == Some(0) {
            return err("gmm_components must be at least 1".into());
        }
        Ok(())
    }

    pub fn uses_nll(&self) -> bool {
        !self.variant.single_head()
    }

    /// Whether a fitted feature density is needed before any forward pass.
    pub fn needs_density(&self) -> bool {
        self.flags.density_scaling || self.variant == Variant::DaedlBaseline
    }

    pub fn needs_negatives(&self) -> bool {
        self.flags.vos && (self.flags.ebm || self.flags.unc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Detached per-sample inputs; fixing them makes a forward pass a pure
/// function of the parameters (used by gradient checks).
#[derive(Clone, Debug, Default)]
pub struct Frozen {
    pub rho: Option<Vec<f64>>,
    pub daedl_lambda: Option<Vec<f64>>,
    pub fi: Option<Tensor>,
}

/// Per-sample `ρ` and DAEDL `λ`, each `None` when unused.
pub type DensityTerms = (Option<Vec<f64>>, Option<Vec<f64>>);

/// Tape handles of one pass through the head pipeline.
#[derive(Clone, Debug)]
pub struct PassVars {
    pub z: Var,
    pub energy: Var,
    pub s_hat: Var,
    pub logits: Vec<Var>,
    pub pi_raw: Var,
    pub pi: Var,
    pub alpha_bar: Vec<Var>,
    /// Evidence entering the KL prior.
    pub alpha_kl: Vec<Var>,
    pub p_mix: Var,
    pub gate: Option<Var>,
    pub p_hat: Var,
    pub rho: Vec<f64>,
    pub daedl_lambda: Option<Vec<f64>>,
    pub fi: Option<Tensor>,
    pub fi_bar: Option<Tensor>,
}

/// Algorithm outputs for one batch, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardDiagnostics {
    pub energy: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub gate: Option<Tensor>,
    pub pi_raw: Tensor,
    pub pi: Tensor,
    pub logits: Vec<Tensor>,
    pub alpha_per_head: Vec<Tensor>,
    pub alpha0_mix: Vec<f64>,
    pub fi_per_head: Option<Tensor>,
    pub fi_bar: Option<Tensor>,
    pub rho: Vec<f64>,
    pub p_mix: Tensor,
    pub p_hat: Tensor,
}

impl ForwardDiagnostics {
    pub fn len(&self) -> usize {
        self.p_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn heads(&self) -> usize {
        self.alpha_per_head.len()
    }

    /// Row-wise concatenation of two diagnostics of the same model.
    fn append(&mut self, other: ForwardDiagnostics) -> Result<()> {
        fn cat(a: &mut Tensor, b: Tensor) -> Result<()> {
            let mut data = std::mem::replace(a, Tensor::zeros(0, 0)).into_data();
            let cols = b.cols();
            data.extend(b.into_data());
            *a = Tensor::new(data.len() / cols.max(1), cols, data)?;
            Ok(())
        }
        fn cat_opt(a: &mut Option<Tensor>, b: Option<Tensor>) -> Result<()> {
            if let (Some(a), Some(b)) = (a.as_mut(), b) {
                cat(a, b)?;
            }
            Ok(())
        }
        self.energy.extend(other.energy);
        self.s_hat.extend(other.s_hat);
        cat_opt(&mut self.gate, other.gate)?;
        cat(&mut self.pi_raw, other.pi_raw)?;
        cat(&mut self.pi, other.pi)?;
        for (a, b) in self.logits.iter_mut().zip(other.logits) {
            cat(a, b)?;
        }
        for (a, b) in self.alpha_per_head.iter_mut().zip(other.alpha_per_head) {
            cat(a, b)?;
        }
        self.alpha0_mix.extend(other.alpha0_mix);
        cat_opt(&mut self.fi_per_head, other.fi_per_head)?;
        cat_opt(&mut self.fi_bar, other.fi_bar)?;
        self.rho.extend(other.rho);
        cat(&mut self.p_mix, other.p_mix)?;
        cat(&mut self.p_hat, other.p_hat)
    }

    /// `log p_mix`, the pre-gating log-probabilities used for temperature scaling.
    pub fn log_p_mix(&self) -> Tensor {
        self.p_mix.map(|p| p.max(f64::MIN_POSITIVE).ln())
    }

    /// Head-averaged logits.
    pub fn mean_logits(&self) -> Tensor {
        let k = self.logits.len() as f64;
        let mut out = Tensor::zeros(self.p_hat.rows(), self.p_hat.cols());
        for u in &self.logits {
            for (o, v) in out.data_mut().iter_mut().zip(u.data()) {
                *o += v / k;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pred: f64,
    pub kl: f64,
    pub fi: f64,
    pub ebm: f64,
    pub unc: f64,
    pub total: f64,
    /// Set when the uncertainty loss ran without an OOD batch.
    pub unc_ood_missing: bool,
}

/// Fitted feature-space density state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityState {
    pub gmm: GmmModel,
    pub log_p_calib: DensityCalibration,
    pub classes: ClassGaussians,
}

/// A GEM model: networks, configuration and fitted densities.
#[derive(Clone, Debug, PartialEq)]
pub struct GemModel {
    pub config: GemConfig,
    pub nets: GemNetworks,
    pub density: Option<DensityState>,
    pub energy_calib: Option<EnergyCalibration>,
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(contract(format!("label {y} out of range for {classes} classes")));
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

/// `ŷ = argmax_c (1/K) Σ_k u_{k,c}`, ties to the lowest class.
pub fn pseudo_label(logits: &[Tensor]) -> Vec<usize> {
    let Some(first) = logits.first() else {
        return vec![];
    };
    let (n, c) = first.shape();
    let mut avg = vec![0.0; c];
    (0..n)
        .map(|i| {
            avg.iter_mut().for_each(|a| *a = 0.0);
            for u in logits {
                for (a, v) in avg.iter_mut().zip(u.row(i)) {
                    *a += v;
                }
            }
            let k = logits.len() as f64;
            avg.iter_mut().for_each(|a| *a /= k);
            argmax(&avg)
        })
        .collect()
}

/// `ᾱ = ρ·(exp(clip(u, −τ, τ)) + ε) + ε` on the tape.
fn evidence_on_tape(tape: &mut Tape, u: Var, rho: &[f64], tau: f64, eps: f64, lambda: Option<&[f64]>) -> Result<Var> {
    let mut t = tape.clip(u, -tau, tau)?;
    if let Some(l) = lambda {
        let lc = tape.constant(Tensor::col_vector(l));
        t = tape.mul(t, lc)?;
    }
    let e = tape.exp(t)?;
    let a = tape.add_scalar(e, eps)?;
    if rho.iter().all(|r| *r == 1.0) {
        return tape.add_scalar(a, eps);
    }
    let rc = tape.constant(Tensor::col_vector(rho));
    let scaled = tape.mul(a, rc)?;
    tape.add_scalar(scaled, eps)
}

/// Per-sample FI proxy `Σ_c (∂ log p_y / ∂u_c)²` of one head, by reverse
/// differentiation of the density-scaled predictive mean on a private tape.
pub fn fi_proxy(logits: &Tensor, labels: &[usize], rho: &[f64], tau: f64, eps: f64) -> Result<Vec<f64>> {
    if labels.len() != logits.rows() || rho.len() != logits.rows() {
        return Err(contract("fi_proxy needs one label and one density score per row"));
    }
    let mut tape = Tape::new();
    let u = tape.leaf(logits.clone());
    let alpha = evidence_on_tape(&mut tape, u, rho, tau, eps, None)?;
    let p = tape.normalize_rows(alpha)?;
    let lp = tape.log(p)?;
    let mask = tape.constant(one_hot(labels, logits.cols())?);
    let picked = tape.mul(lp, mask)?;
    let total = tape.sum(picked)?;
    tape.backward(total)?;
    let g = tape.grad(u).expect("leaf reached");
    Ok(g.iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect())
}

/// Chain-rule closed form of [`fi_proxy`]: with `ε″ = (1 + ρ)ε`,
/// `g_y = (ᾱ_y − ε″)(1/ᾱ_y − 1/ᾱ₀)` and `g_c = −(ᾱ_c − ε″)/ᾱ₀`;
/// coordinates outside the clip range contribute nothing.
pub fn fi_closed_form(logits: &Tensor, labels: &[usize], rho: &[f64], tau: f64, eps: f64) -> Vec<f64> {
    logits
        .iter_rows()
        .zip(labels)
        .zip(rho)
        .map(|((u, &y), &r)| {
            let alpha: Vec<f64> = u.iter().map(|v| r * (v.clamp(-tau, tau).exp() + eps) + eps).collect();
            let a0: f64 = alpha.iter().sum();
            let e2 = (1.0 + r) * eps;
            alpha
                .iter()
                .zip(u)
                .enumerate()
                .map(|(c, (a, v))| {
                    if *v < -tau || *v > tau {
                        return 0.0;
                    }
                    let g = if c == y { (a - e2) * (1.0 / a - 1.0 / a0) } else { -(a - e2) / a0 };
                    g * g
                })
                .sum()
        })
        .collect()
}

/// Normalized FI `FI̅_k = FI_k / (Σ_j FI_j + ε)` per row.
pub fn fi_normalize(fi: &Tensor, eps: f64) -> Tensor {
    let mut out = fi.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let s: f64 = row.iter().sum::<f64>() + eps;
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Router reweighting `π_k ∝ π̃_k·exp(λ(1 − FI̅_k)) + ε′`; returns `(π, FI̅)`.
pub fn fi_modulate(pi_raw: &Tensor, fi: &Tensor, lambda_fi: f64, eps: f64, eps_prime: f64) -> (Tensor, Tensor) {
    let fi_bar = fi_normalize(fi, eps);
    let mut pi = pi_raw.clone();
    for r in 0..pi.rows() {
        let row = pi.row_mut(r);
        for (p, f) in row.iter_mut().zip(fi_bar.row(r)) {
            *p = *p * (lambda_fi * (1.0 - f)).exp() + eps_prime;
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    (pi, fi_bar)
}

/// Batch mean of `‖e_y − p‖²`.
pub fn squared_error(tape: &mut Tape, p: Var, labels: &[usize]) -> Result<Var> {
    let y = tape.constant(one_hot(labels, tape.shape(p).1)?);
    let d = tape.sub(p, y)?;
    let sq = tape.square(d)?;
    let rows = tape.sum_rows(sq)?;
    tape.mean(rows)
}

/// Batch mean of `−log(p_y + 1e-12)`.
pub fn nll(tape: &mut Tape, p: Var, labels: &[usize]) -> Result<Var> {
    let mask = tape.constant(one_hot(labels, tape.shape(p).1)?);
    let shifted = tape.add_scalar(p, NLL_FLOOR)?;
    let lp = tape.log(shifted)?;
    let picked = tape.mul(lp, mask)?;
    let rows = tape.sum_rows(picked)?;
    let m = tape.mean(rows)?;
    tape.neg(m)
}

/// Batch mean of `Σ_k π_k KL[Dir(α_k) ‖ Dir(1)]`.
pub fn mixture_kl(tape: &mut Tape, alphas: &[Var], pi: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, a) in alphas.iter().enumerate() {
        let kl = kl_to_uniform_rows(tape, *a)?;
        let w = tape.select_col(pi, k)?;
        let term = tape.mul(kl, w)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| contract("mixture_kl needs at least one head"))?;
    tape.mean(acc)
}

/// Squared error on the gated mean plus `λ_KL`·KL of the (ungated) evidence.
pub fn loss_core(tape: &mut Tape, p_hat: Var, labels: &[usize], alpha: Var, lambda_kl: f64) -> Result<Var> {
    let se = squared_error(tape, p_hat, labels)?;
    let kl = kl_to_uniform_rows(tape, alpha)?;
    let kl = tape.mean(kl)?;
    let kl = tape.scale(kl, lambda_kl)?;
    tape.add(se, kl)
}

/// NLL of the gated mixture plus `λ_KL`·mixture-weighted per-head KL.
pub fn loss_mix(tape: &mut Tape, p_hat: Var, labels: &[usize], alphas: &[Var], pi: Var, lambda_kl: f64) -> Result<Var> {
    let n = nll(tape, p_hat, labels)?;
    let kl = mixture_kl(tape, alphas, pi)?;
    let kl = tape.scale(kl, lambda_kl)?;
    tape.add(n, kl)
}

/// `mean Σ_k π_k FI_k + β·mean(FI)` with FI held constant.
pub fn loss_fi(tape: &mut Tape, pi: Var, fi: &Tensor, trace_beta: f64) -> Result<Var> {
    let f = tape.constant(fi.clone());
    let w = tape.mul(pi, f)?;
    let rows = tape.sum_rows(w)?;
    let m = tape.mean(rows)?;
    let trace = if fi.is_empty() { 0.0 } else { fi.sum() / fi.len() as f64 };
    tape.add_scalar(m, trace_beta * trace)
}

/// `mean softplus(clip(E_id, −τ, τ)) + w·mean softplus(m − E_neg)`.
pub fn loss_ebm(tape: &mut Tape, e_id: Var, e_neg: Option<Var>, tau: f64, margin: f64, weight: f64) -> Result<Var> {
    let c = tape.clip(e_id, -tau, tau)?;
    let sp = tape.softplus(c)?;
    let id = tape.mean(sp)?;
    let Some(neg) = e_neg else {
        return Ok(id);
    };
    let d = tape.neg(neg)?;
    let d = tape.add_scalar(d, margin)?;
    let sp = tape.softplus(d)?;
    let m = tape.mean(sp)?;
    let m = tape.scale(m, weight)?;
    tape.add(id, m)
}

/// `β_id·mean H(p̂_id) − β_ood·mean H(p̂_ood)`; the flag reports a missing OOD batch.
pub fn loss_unc(tape: &mut Tape, p_id: Var, p_ood: Option<Var>, beta_id: f64, beta_ood: f64) -> Result<(Var, bool)> {
    let h = entropy_rows(tape, p_id)?;
    let h = tape.mean(h)?;
    let id = tape.scale(h, beta_id)?;
    let Some(ood) = p_ood else {
        return Ok((id, true));
    };
    let h = entropy_rows(tape, ood)?;
    let h = tape.mean(h)?;
    let o = tape.scale(h, beta_ood)?;
    Ok((tape.sub(id, o)?, false))
}

impl GemModel {
    pub fn new(config: GemConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let nets = GemNetworks::new(&config.arch, config.heads, config.flags.sn, seed)?;
        Ok(Self {
            config,
            nets,
            density: None,
            energy_calib: None,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.arch.classes
    }

    fn density_state(&self) -> Result<&DensityState> {
        self.density
            .as_ref()
            .ok_or_else(|| contract("density model must be fitted before a density-scaled forward pass"))
    }

    /// Head pipeline on features `z`. FI is computed only in training mode
    /// when FI regularization or modulation is on and `fi_labels` allows it.
    pub fn pipeline(
        &self,
        g: &mut Graph<'_>,
        z: Var,
        mode: Mode,
        fi_labels: Option<Option<&[usize]>>,
        frozen: &Frozen,
    ) -> Result<PassVars> {
        let cfg = &self.config;
        let n = g.tape.shape(z).0;
        let desaturate = cfg.flags.tanh_energy && mode == Mode::Eval;
        let energy = self.nets.energy_forward(g, z, cfg.flags.tanh_energy, desaturate)?;
        let s_hat = g.tape.sigmoid(energy)?;
        let logits = (0..cfg.heads)
            .map(|k| self.nets.head_logits(g, z, k, cfg.temperature))
            .collect::<Result<Vec<_>>>()?;
        let pi_raw = self.nets.router_forward(g, z, s_hat)?;

        let needs_log_p = frozen.rho.is_none() && cfg.flags.density_scaling
            || frozen.daedl_lambda.is_none() && cfg.variant == Variant::DaedlBaseline;
        let log_p = if needs_log_p {
            Some(self.density_state()?.gmm.log_likelihood(g.tape.value(z))?)
        } else {
            None
        };
        let rho = match (&frozen.rho, cfg.flags.density_scaling) {
            (Some(r), _) => r.clone(),
            (None, true) => log_p.as_ref().expect("computed").iter().map(|lp| rho_from_log_likelihood(*lp, cfg.gamma)).collect(),
            (None, false) => vec![1.0; n],
        };
        let daedl_lambda = match (&frozen.daedl_lambda, cfg.variant) {
            (Some(l), _) => Some(l.clone()),
            (None, Variant::DaedlBaseline) => {
                let calib = self.density_state()?.log_p_calib;
                Some(log_p.as_ref().expect("computed").iter().map(|lp| daedl_lambda_from_log_likelihood(*lp, &calib)).collect())
            }
            _ => None,
        };

        let wants_fi = mode == Mode::Train && (cfg.flags.fi_reg || cfg.flags.fi_mod);
        let fi = match (&frozen.fi, wants_fi, fi_labels) {
            (Some(f), true, _) => Some(f.clone()),
            (None, true, Some(labels)) => {
                let values: Vec<Tensor> = logits.iter().map(|u| g.tape.value(*u).clone()).collect();
                let y = match labels {
                    Some(y) => y.to_vec(),
                    None => pseudo_label(&values),
                };
                let mut fi = Tensor::zeros(n, cfg.heads);
                for (k, u) in values.iter().enumerate() {
                    for (i, v) in fi_proxy(u, &y, &rho, cfg.tau, cfg.eps)?.into_iter().enumerate() {
                        fi.set(i, k, v);
                    }
                }
                Some(fi)
            }
            _ => None,
        };

        let (pi, fi_bar) = match (&fi, mode == Mode::Train && cfg.flags.fi_mod) {
            (Some(f), true) => {
                let fi_bar = fi_normalize(f, cfg.eps);
                let m = fi_bar.map(|v| (cfg.lambda_fi * (1.0 - v)).exp());
                let mc = g.tape.constant(m);
                let w = g.tape.mul(pi_raw, mc)?;
                let w = g.tape.add_scalar(w, cfg.eps_prime)?;
                (g.tape.normalize_rows(w)?, Some(fi_bar))
            }
            (Some(f), false) => (pi_raw, Some(fi_normalize(f, cfg.eps))),
            (None, _) => (pi_raw, None),
        };

        let alpha_bar = logits
            .iter()
            .map(|u| evidence_on_tape(g.tape, *u, &rho, cfg.tau, cfg.eps, daedl_lambda.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let alpha_kl = if cfg.kl_density_scaled || rho.iter().all(|r| *r == 1.0) {
            alpha_bar.clone()
        } else {
            let ones = vec![1.0; n];
            logits
                .iter()
                .map(|u| evidence_on_tape(g.tape, *u, &ones, cfg.tau, cfg.eps, daedl_lambda.as_deref()))
                .collect::<Result<Vec<_>>>()?
        };
        let mut p_mix: Option<Var> = None;
        for (k, a) in alpha_bar.iter().enumerate() {
            let mean = g.tape.normalize_rows(*a)?;
            let term = if cfg.heads == 1 {
                mean
            } else {
                let w = g.tape.select_col(pi, k)?;
                g.tape.mul(mean, w)?
            };
            p_mix = Some(match p_mix {
                Some(prev) => g.tape.add(prev, term)?,
                None => term,
            });
        }
        let p_mix = p_mix.expect("at least one head");
        let (gate, p_hat) = if cfg.flags.gate {
            let s = self.nets.gate_forward(g, z, s_hat, cfg.gate_bounds)?;
            let gated = g.tape.mul(p_mix, s)?;
            (Some(s), g.tape.normalize_rows(gated)?)
        } else {
            (None, p_mix)
        };
        Ok(PassVars {
            z,
            energy,
            s_hat,
            logits,
            pi_raw,
            pi,
            alpha_bar,
            alpha_kl,
            p_mix,
            gate,
            p_hat,
            rho,
            daedl_lambda,
            fi,
            fi_bar,
        })
    }

    /// Full forward: backbone then the head pipeline on `x`, plus an
    /// optional pipeline pass on feature-space negatives.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: &Tensor,
        labels: Option<&[usize]>,
        negatives: Option<&Tensor>,
        mode: Mode,
        frozen: &Frozen,
    ) -> Result<(PassVars, Option<PassVars>)> {
        // Under dropout the density terms come from clean features.
        let clean;
        let frozen = if g.training() && self.config.needs_density() && (frozen.rho.is_none() || frozen.daedl_lambda.is_none()) {
            let (rho, lambda) = self.density_terms(&self.features(x)?)?;
            clean = Frozen {
                rho: frozen.rho.clone().or(rho),
                daedl_lambda: frozen.daedl_lambda.clone().or(lambda),
                fi: frozen.fi.clone(),
            };
            &clean
        } else {
            frozen
        };
        let xv = g.tape.constant(x.clone());
        let z = self.nets.backbone_forward(g, xv)?;
        let id = self.pipeline(g, z, mode, Some(labels), frozen)?;
        let neg = match negatives {
            Some(nz) if nz.rows() > 0 => {
                let zn = g.tape.constant(nz.clone());
                Some(self.pipeline(g, zn, mode, None, &Frozen::default())?)
            }
            _ => None,
        };
        Ok((id, neg))
    }

    /// Weighted objective; switched-off components contribute exactly zero.
    pub fn total_objective(
        &self,
        tape: &mut Tape,
        id: &PassVars,
        neg: Option<&PassVars>,
        labels: &[usize],
    ) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.config;
        let mut b = LossBreakdown::default();
        let pred = if cfg.uses_nll() {
            nll(tape, id.p_hat, labels)?
        } else {
            squared_error(tape, id.p_hat, labels)?
        };
        let kl = mixture_kl(tape, &id.alpha_kl, id.pi)?;
        b.pred = tape.value(pred).get(0, 0);
        b.kl = tape.value(kl).get(0, 0);
        let mut total = tape.scale(kl, cfg.lambda_kl)?;
        total = tape.add(pred, total)?;
        if cfg.flags.fi_reg {
            if let Some(fi) = &id.fi {
                let f = loss_fi(tape, id.pi, fi, cfg.fi_trace_beta)?;
                b.fi = tape.value(f).get(0, 0);
                let w = tape.scale(f, cfg.lambda_fi)?;
                total = tape.add(total, w)?;
            }
        }
        if cfg.flags.ebm {
            let e = loss_ebm(tape, id.energy, neg.map(|n| n.energy), cfg.tau, cfg.vos.margin, cfg.vos.weight)?;
            b.ebm = tape.value(e).get(0, 0);
            let w = tape.scale(e, cfg.lambda_ebm)?;
            total = tape.add(total, w)?;
        }
        if cfg.flags.unc {
            let (u, missing) = loss_unc(tape, id.p_hat, neg.map(|n| n.p_hat), cfg.beta_id, cfg.beta_ood)?;
            b.unc = tape.value(u).get(0, 0);
            b.unc_ood_missing = missing;
            let w = tape.scale(u, cfg.lambda_unc)?;
            total = tape.add(total, w)?;
        }
        b.total = tape.value(total).get(0, 0);
        Ok((total, b))
    }

    pub fn diagnostics(&self, tape: &Tape, pass: &PassVars) -> ForwardDiagnostics {
        let v = |x: Var| tape.value(x).clone();
        let pi = v(pass.pi);
        let alpha_per_head: Vec<Tensor> = pass.alpha_bar.iter().map(|a| v(*a)).collect();
        let n = pi.rows();
        let alpha0_mix = (0..n)
            .map(|i| {
                alpha_per_head
                    .iter()
                    .enumerate()
                    .map(|(k, a)| pi.get(i, k) * a.row(i).iter().sum::<f64>())
                    .sum()
            })
            .collect();
        ForwardDiagnostics {
            energy: v(pass.energy).into_data(),
            s_hat: v(pass.s_hat).into_data(),
            gate: pass.gate.map(v),
            pi_raw: v(pass.pi_raw),
            pi,
            logits: pass.logits.iter().map(|u| v(*u)).collect(),
            alpha_per_head,
            alpha0_mix,
            fi_per_head: pass.fi.clone(),
            fi_bar: pass.fi_bar.clone(),
            rho: pass.rho.clone(),
            p_mix: v(pass.p_mix),
            p_hat: v(pass.p_hat),
        }
    }

    /// Eval-mode forward on frozen parameters, in chunks.
    pub fn predict(&self, x: &Tensor) -> Result<ForwardDiagnostics> {
        self.predict_mode(x, None, Mode::Eval)
    }

    /// Dropout-free forward in the given mode; `labels` feed the FI proxy in
    /// training mode.
    pub fn predict_mode(&self, x: &Tensor, labels: Option<&[usize]>, mode: Mode) -> Result<ForwardDiagnostics> {
        const CHUNK: usize = 1024;
        let mut out: Option<ForwardDiagnostics> = None;
        let mut start = 0;
        while start < x.rows() || out.is_none() {
            let end = (start + CHUNK).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            let chunk = x.select_rows(&idx);
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, &self.nets.store, false, None);
            let y = labels.map(|l| &l[start..end]);
            let (pass, _) = self.forward(&mut g, &chunk, y, None, mode, &Frozen::default())?;
            let d = self.diagnostics(&tape, &pass);
            match out.as_mut() {
                Some(o) => o.append(d)?,
                None => out = Some(d),
            }
            start = end;
            if start >= x.rows() {
                break;
            }
        }
        Ok(out.expect("at least one chunk"))
    }

    /// Density scale `ρ` and DAEDL `λ` for features `z`, each `None` when unused.
    pub fn density_terms(&self, z: &Tensor) -> Result<DensityTerms> {
        let cfg = &self.config;
        if !cfg.needs_density() {
            return Ok((None, None));
        }
        let state = self.density_state()?;
        let log_p = state.gmm.log_likelihood(z)?;
        let rho = cfg
            .flags
            .density_scaling
            .then(|| log_p.iter().map(|lp| rho_from_log_likelihood(*lp, cfg.gamma)).collect());
        let lambda = (cfg.variant == Variant::DaedlBaseline)
            .then(|| log_p.iter().map(|lp| daedl_lambda_from_log_likelihood(*lp, &state.log_p_calib)).collect());
        Ok((rho, lambda))
    }

    /// Eval-mode features `z`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.nets.store, false, None);
        let xv = g.tape.constant(x.clone());
        let z = self.nets.backbone_forward(&mut g, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Fits the GMM, its log-likelihood calibration and the class Gaussians
    /// on eval-mode training features.
    pub fn fit_density(&mut self, x: &Tensor, labels: &[usize], seed: u64) -> Result<()> {
        let z = self.features(x)?;
        let components = self.config.gmm_components.unwrap_or(self.classes());
        let gmm = GmmModel::fit(
            &z,
            components,
            GmmFitOptions {
                seed,
                ..GmmFitOptions::default()
            },
        )?;
        let log_p = gmm.log_likelihood(&z)?;
        let log_p_calib = DensityCalibration::fit(&log_p)?;
        let classes = ClassGaussians::fit(&z, labels, self.classes())?;
        self.density = Some(DensityState {
            gmm,
            log_p_calib,
            classes,
        });
        Ok(())
    }

    /// Quantile endpoints of learned and logit energies on `x`.
    pub fn fit_energy_calibration(&mut self, x: &Tensor) -> Result<()> {
        let d = self.predict(x)?;
        let logit_e: Vec<f64> = d.mean_logits().iter_rows().map(crate::density::logit_energy).collect();
        self.energy_calib = Some(EnergyCalibration {
            learned: DensityCalibration::fit(&d.energy)?,
            logit: DensityCalibration::fit(&logit_e)?,
        });
        Ok(())
    }
}
