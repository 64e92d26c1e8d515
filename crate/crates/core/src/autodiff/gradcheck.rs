//! Central finite-difference gradient verification.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckStatus {
    Pass,
    Fail,
    /// A clip/relu input sat within the kink radius; the comparison is skipped.
    Excluded,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub kinks: usize,
    pub status: GradCheckStatus,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.status == GradCheckStatus::Pass
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Finite-difference checker. `h` is the central-difference step and `tol`
/// the pass threshold on relative error.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    /// Inputs to clip/relu closer than this to a kink exclude the check.
    pub kink_radius: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Checks only every `stride`-th coordinate of each input when set.
    pub stride: Option<usize>,
}

impl GradCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            kink_radius: 100.0 * h,
            floor: 1e-3,
            stride: None,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride.max(1));
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        assert!(self.h > 0.0, "finite-difference step must be positive");
        let mut tape = Tape::new();
        tape.track_kinks(self.kink_radius);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.backward(root)?;
        let kinks = tape.kinks();
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect();
        if kinks > 0 {
            return Ok(GradCheckReport {
                per_input: vec![f64::NAN; inputs.len()],
                max_rel_err: f64::NAN,
                kinks,
                status: GradCheckStatus::Excluded,
            });
        }

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
            let r = f(&mut t, &vs)?;
            Ok(t.value(r).get(0, 0))
        };

        let stride = self.stride.unwrap_or(1);
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut per_input = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let mut worst: f64 = 0.0;
            for j in (0..inputs[i].len()).step_by(stride) {
                let x0 = inputs[i].data()[j];
                work[i].data_mut()[j] = x0 + self.h;
                let fp = eval(&work)?;
                work[i].data_mut()[j] = x0 - self.h;
                let fm = eval(&work)?;
                work[i].data_mut()[j] = x0;
                let numeric = (fp - fm) / (2.0 * self.h);
                worst = worst.max(relative_error(analytic[i].data()[j], numeric, self.floor));
            }
            per_input.push(worst);
        }
        let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
        let status = if max_rel_err < self.tol {
            GradCheckStatus::Pass
        } else {
            GradCheckStatus::Fail
        };
        Ok(GradCheckReport {
            per_input,
            max_rel_err,
            kinks,
            status,
        })
    }
}

/// Compares tape gradients of the scalar `f` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(h, tol).run(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form() {
        // xᵀ A x with A symmetric positive definite
        let a = Tensor::new(3, 3, vec![2.0, 0.5, 0.1, 0.5, 3.0, -0.4, 0.1, -0.4, 1.5]).unwrap();
        let x = Tensor::new(3, 1, vec![0.3, -1.2, 0.8]).unwrap();
        let report = grad_check(
            |t, v| {
                let a = t.constant(a.clone());
                let ax = t.matmul(a, v[0])?;
                let prod = t.mul(ax, v[0])?;
                t.sum(prod)
            },
            &[x],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn softmax_nll() {
        let logits = Tensor::new(2, 3, vec![0.2, -1.0, 2.0, 1.5, 0.3, -0.7]).unwrap();
        let onehot = Tensor::new(2, 3, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let report = grad_check(
            |t, v| {
                let p = t.softmax_rows(v[0])?;
                let lp = t.log(p)?;
                let y = t.constant(onehot.clone());
                let picked = t.mul(lp, y)?;
                let s = t.sum(picked)?;
                t.neg(s)
            },
            &[logits],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn clip_boundary_is_excluded() {
        let x = Tensor::scalar(10.0);
        let report = grad_check(
            |t, v| {
                let c = t.clip(v[0], -10.0, 10.0)?;
                t.sum(c)
            },
            &[x],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.status, GradCheckStatus::Excluded);
    }
}
