//! Density scaling drives total evidence to its floor away from the data.

use gemfi::dirichlet::{alpha_from_logits, EVIDENCE_EPS};
use gemfi::density::rho_from_log_likelihood;

fn main() -> gemfi::Result<()> {
    let logits = [2.0, -1.0, 0.5];
    let floor = logits.len() as f64 * EVIDENCE_EPS;
    println!("{:>10} {:>12} {:>12} {:>10}", "log p(z)", "rho", "alpha0", "alpha0/Cε");
    for log_p in [10.0, 2.0, 0.0, -5.0, -15.0, -30.0, -60.0] {
        let rho = rho_from_log_likelihood(log_p, 1.2);
        let a0 = alpha_from_logits(&logits, 10.0, EVIDENCE_EPS, rho)?.alpha0();
        println!("{log_p:>10.1} {rho:>12.3e} {a0:>12.4e} {:>10.2}", a0 / floor);
    }
    Ok(())
}
