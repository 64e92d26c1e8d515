//! Detection and calibration metrics, uncertainty scores and temperature scaling.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tensor};
use crate::density::{energy_scalar, logit_energy, EnergyCalibration};
use crate::dirichlet::{entropy, mutual_information};
use crate::error::{contract, Result};
use crate::model::ForwardDiagnostics;

pub const ECE_BINS: usize = 15;
const PROB_FLOOR: f64 = 1e-12;

/// Scores with binary ground truth; higher scores should indicate positives.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEvalSet {
    pub scores: Vec<f64>,
    pub positives: Vec<bool>,
}

impl ScoredEvalSet {
    pub fn new(scores: Vec<f64>, positives: Vec<bool>) -> Result<Self> {
        if scores.len() != positives.len() {
            return Err(contract("one label per score is required"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(contract("scores must not be NaN"));
        }
        Ok(Self { scores, positives })
    }

    /// Negatives first, then positives.
    pub fn from_groups(negatives: &[f64], positives: &[f64]) -> Result<Self> {
        let scores = negatives.iter().chain(positives).copied().collect();
        let labels = std::iter::repeat_n(false, negatives.len())
            .chain(std::iter::repeat_n(true, positives.len()))
            .collect();
        Self::new(scores, labels)
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let p = self.positives.iter().filter(|b| **b).count();
        let n = self.positives.len() - p;
        if p == 0 || n == 0 {
            return Err(contract("AUROC/AUPR need at least one positive and one negative"));
        }
        Ok((p, n))
    }

    /// Index order by descending score.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }
}

/// Mann–Whitney AUROC with tie-averaged ranks.
pub fn auroc(set: &ScoredEvalSet) -> Result<f64> {
    let (p, n) = set.counts()?;
    let mut idx: Vec<usize> = (0..set.scores.len()).collect();
    idx.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && set.scores[idx[j + 1]] == set.scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| set.positives[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Step-wise average precision over descending thresholds; tied scores
/// form a single threshold.
pub fn aupr(set: &ScoredEvalSet) -> Result<f64> {
    let (p, _) = set.counts()?;
    let idx = set.descending();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = set.scores[idx[i]];
        while i < idx.len() && set.scores[idx[i]] == s {
            if set.positives[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

/// Bin of a confidence in `bins` right-closed equal-width bins; 0 joins the first.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    (0..bins).find(|&b| confidence <= (b + 1) as f64 / bins as f64).unwrap_or(bins - 1)
}

pub fn reliability_bins(confidences: &[f64], correct: &[bool], bins: usize) -> Vec<BinStat> {
    let mut sums = vec![(0usize, 0.0, 0.0); bins];
    for (c, ok) in confidences.iter().zip(correct) {
        let b = &mut sums[bin_index(*c, bins)];
        b.0 += 1;
        b.1 += c;
        b.2 += if *ok { 1.0 } else { 0.0 };
    }
    sums.into_iter()
        .enumerate()
        .map(|(b, (n, c, a))| BinStat {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count: n,
            confidence: if n > 0 { c / n as f64 } else { 0.0 },
            accuracy: if n > 0 { a / n as f64 } else { 0.0 },
        })
        .collect()
}

/// `Σ_b (n_b/N)·|acc_b − conf_b|`.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() || confidences.is_empty() {
        return Err(contract("ECE needs one correctness flag per confidence"));
    }
    if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(contract("confidences must lie in [0, 1]"));
    }
    let n = confidences.len() as f64;
    Ok(reliability_bins(confidences, correct, bins)
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

fn check_probs(p: &Tensor, labels: &[usize]) -> Result<()> {
    if p.rows() != labels.len() || p.rows() == 0 {
        return Err(contract("one label per probability row is required"));
    }
    if let Some(y) = labels.iter().find(|y| **y >= p.cols()) {
        return Err(contract(format!("label {y} out of range")));
    }
    Ok(())
}

/// Mean over samples of `Σ_c (p_c − 1[c = y])²`.
pub fn brier(p: &Tensor, labels: &[usize]) -> Result<f64> {
    check_probs(p, labels)?;
    let total: f64 = p
        .iter_rows()
        .zip(labels)
        .map(|(r, &y)| r.iter().enumerate().map(|(c, v)| (v - if c == y { 1.0 } else { 0.0 }).powi(2)).sum::<f64>())
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn nll(p: &Tensor, labels: &[usize]) -> Result<f64> {
    check_probs(p, labels)?;
    Ok(p.iter_rows().zip(labels).map(|(r, &y)| -r[y].max(PROB_FLOOR).ln()).sum::<f64>() / labels.len() as f64)
}

pub fn accuracy(p: &Tensor, labels: &[usize]) -> f64 {
    let hits = p.iter_rows().zip(labels).filter(|(r, y)| argmax(r) == **y).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub brier: f64,
    pub brier_x100: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub bins: Vec<BinStat>,
}

pub fn calibration_report(p: &Tensor, labels: &[usize]) -> Result<CalibrationReport> {
    check_probs(p, labels)?;
    let conf: Vec<f64> = p.iter_rows().map(|r| r[argmax(r)]).collect();
    let correct: Vec<bool> = p.iter_rows().zip(labels).map(|(r, &y)| argmax(r) == y).collect();
    let b = brier(p, labels)?;
    Ok(CalibrationReport {
        ece: ece(&conf, &correct, ECE_BINS)?,
        brier: b,
        brier_x100: 100.0 * b,
        nll: nll(p, labels)?,
        accuracy: accuracy(p, labels),
        bins: reliability_bins(&conf, &correct, ECE_BINS),
    })
}

/// Misclassification detection: correct predictions are positives, scored by max probability.
pub fn misclassification_set(p: &Tensor, labels: &[usize]) -> Result<ScoredEvalSet> {
    check_probs(p, labels)?;
    let scores = p.iter_rows().map(|r| r[argmax(r)]).collect();
    let correct = p.iter_rows().zip(labels).map(|(r, &y)| argmax(r) == y).collect();
    ScoredEvalSet::new(scores, correct)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Maxp,
    Entropy,
    Alpha0,
    Mi,
    Energy,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [ScoreKind::Maxp, ScoreKind::Entropy, ScoreKind::Alpha0, ScoreKind::Mi, ScoreKind::Energy];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Maxp => "maxp",
            ScoreKind::Entropy => "entropy",
            ScoreKind::Alpha0 => "alpha0",
            ScoreKind::Mi => "mi",
            ScoreKind::Energy => "energy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Per-sample uncertainty scores, oriented so that higher means more OOD.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyScores {
    /// `−max_c p̂_c`.
    pub maxp: Vec<f64>,
    pub entropy: Vec<f64>,
    /// `−α₀` of the mixture.
    pub alpha0: Vec<f64>,
    pub mi: Vec<f64>,
    /// `1 −` energy confidence.
    pub energy: Vec<f64>,
    /// Set when MI is identically zero because the model has a single head.
    pub mi_single_head: bool,
}

impl UncertaintyScores {
    pub fn get(&self, kind: ScoreKind) -> &[f64] {
        match kind {
            ScoreKind::Maxp => &self.maxp,
            ScoreKind::Entropy => &self.entropy,
            ScoreKind::Alpha0 => &self.alpha0,
            ScoreKind::Mi => &self.mi,
            ScoreKind::Energy => &self.energy,
        }
    }

    /// Aleatoric score: negated max probability.
    pub fn aleatoric(&self) -> &[f64] {
        &self.maxp
    }

    /// Epistemic score: negated total evidence `α₀` of the mixture.
    pub fn epistemic(&self) -> &[f64] {
        &self.alpha0
    }
}

pub fn uncertainty_scores(d: &ForwardDiagnostics, energy_calib: Option<&EnergyCalibration>) -> UncertaintyScores {
    let n = d.len();
    let k = d.heads();
    let maxp = d.p_hat.iter_rows().map(|r| -r[argmax(r)]).collect();
    let ent = d.p_hat.iter_rows().map(entropy).collect();
    let alpha0 = d.alpha0_mix.iter().map(|a| -a).collect();
    let mi = if k == 1 {
        vec![0.0; n]
    } else {
        let means: Vec<Tensor> = d
            .alpha_per_head
            .iter()
            .map(|a| {
                let mut m = a.clone();
                for r in 0..m.rows() {
                    let row = m.row_mut(r);
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                m
            })
            .collect();
        (0..n)
            .map(|i| {
                let heads: Vec<&[f64]> = means.iter().map(|m| m.row(i)).collect();
                mutual_information(d.pi.row(i), &heads).expect("consistent head shapes").max(0.0)
            })
            .collect()
    };
    let energy = match energy_calib {
        Some(c) => {
            let mean_u = d.mean_logits();
            d.energy
                .iter()
                .zip(mean_u.iter_rows())
                .map(|(e, u)| 1.0 - energy_scalar(*e, logit_energy(u), c))
                .collect()
        }
        None => d.energy.clone(),
    };
    UncertaintyScores {
        maxp,
        entropy: ent,
        alpha0,
        mi,
        energy,
        mi_single_head: k == 1,
    }
}

/// Mean NLL of `softmax(logits / t)`.
pub fn temperature_nll(logits: &Tensor, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (r, &y) in logits.iter_rows().zip(labels) {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
        let lse = m + r.iter().map(|v| (v / t - m).exp()).sum::<f64>().ln();
        total += lse - r[y] / t;
    }
    total / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
}

/// Golden-section search on `log T ∈ [ln 0.1, ln 10]` (tolerance 1e-4)
/// minimizing validation NLL; falls back to `T = 1` if that is no worse.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<TemperatureFit> {
    if logits.rows() == 0 || logits.rows() != labels.len() {
        return Err(contract("temperature fitting needs a nonempty labelled validation set"));
    }
    if labels.iter().any(|y| *y >= logits.cols()) || !logits.all_finite() {
        return Err(contract("invalid validation logits or labels"));
    }
    let f = |lt: f64| temperature_nll(logits, labels, lt.exp());
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.1f64.ln(), 10f64.ln());
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-4 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let t = ((a + b) / 2.0).exp();
    let before = temperature_nll(logits, labels, 1.0);
    let after = temperature_nll(logits, labels, t);
    Ok(if after <= before {
        TemperatureFit {
            temperature: t,
            nll_before: before,
            nll_after: after,
        }
    } else {
        TemperatureFit {
            temperature: 1.0,
            nll_before: before,
            nll_after: before,
        }
    })
}

/// `softmax(logits / t)` row-wise.
pub fn softmax_t(logits: &Tensor, t: f64) -> Tensor {
    let mut out = logits.map(|v| v / t);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// One line of the metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub const METRIC_HEADER: &str = "dataset,variant,seed,metric,value";

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRIC_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.dataset, r.variant, r.seed, r.metric, r.value)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let s = ScoredEvalSet::from_groups(&[0.1, 0.2], &[0.8, 0.9]).unwrap();
        assert_eq!(auroc(&s).unwrap(), 1.0);
        assert_eq!(aupr(&s).unwrap(), 1.0);
        let s = ScoredEvalSet::from_groups(&[0.5; 4], &[0.5; 3]).unwrap();
        assert_eq!(auroc(&s).unwrap(), 0.5);
        assert!((aupr(&s).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        assert!(auroc(&ScoredEvalSet::from_groups(&[0.1], &[]).unwrap()).is_err());
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[1.0, 1.0], &[true, true], 15).unwrap(), 0.0);
        assert_eq!(ece(&[0.5; 4], &[true, false, true, false], 15).unwrap(), 0.0);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0 / 15.0, 15), 0);
    }

    #[test]
    fn brier_examples() {
        let p = Tensor::full(1, 10, 0.1);
        assert!((brier(&p, &[3]).unwrap() - 0.9).abs() < 1e-12);
        let exact = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(brier(&exact, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn temperature_recovers_identity_on_calibrated_logits() {
        // labels drawn so that softmax(logits) is the true conditional
        let logits = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        // replicate rows in the calibrated proportion p1 : 1 − p1
        let n = 10_000;
        let hits = (p1 * n as f64).round() as usize;
        let mut rows = vec![];
        let mut y = vec![];
        for i in 0..n {
            rows.push(logits.row(0).to_vec());
            y.push(if i < hits { 0 } else { 1 });
        }
        let fit = fit_temperature(&Tensor::from_rows(&rows).unwrap(), &y).unwrap();
        assert!((fit.temperature - 1.0).abs() < 1e-2, "{}", fit.temperature);
        assert!(fit.nll_after <= fit.nll_before + 1e-9);
    }
}
