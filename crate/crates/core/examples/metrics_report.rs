//! Detection and calibration metrics on hand-made scores.

use gemfi::autodiff::Tensor;
use gemfi::metrics::{aupr, auroc, calibration_report, ScoredEvalSet};

fn main() -> gemfi::Result<()> {
    let id = [0.1, 0.2, 0.2, 0.4, 0.3];
    let ood = [0.9, 0.4, 0.8];
    let set = ScoredEvalSet::from_groups(&id, &ood)?;
    println!("AUROC {:.4}  AUPR {:.4}", auroc(&set)?, aupr(&set)?);

    let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.3, 0.7], vec![0.55, 0.45]])?;
    let labels = [0, 1, 1, 0];
    let r = calibration_report(&p, &labels)?;
    println!("accuracy {:.3}  ECE {:.4}  NLL {:.4}  Brier {:.4}", r.accuracy, r.ece, r.nll, r.brier);
    for b in r.bins.iter().filter(|b| b.count > 0) {
        println!("  bin ({:.3}, {:.3}]: n = {}, confidence {:.3}, accuracy {:.3}", b.lo, b.hi, b.count, b.confidence, b.accuracy);
    }
    Ok(())
}
