//! Reverse-mode gradients of a composite expression checked against central
//! finite differences.

use gemfi::autodiff::{grad_check, Tape, Tensor, Var};

fn main() -> gemfi::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.4, -0.5]])?;
    let w = Tensor::from_rows(&[vec![0.2, -0.4], vec![0.9, 0.1], vec![-0.3, 0.6]])?;

    // mean over rows of the entropy of softmax(tanh(x·w)) plus a log-gamma term
    let f = |t: &mut Tape, v: &[Var]| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.tanh(h)?;
        let p = t.softmax_rows(h)?;
        let ent = gemfi::dirichlet::entropy_rows(t, p)?;
        let sp = t.softplus(h)?;
        let shifted = t.add_scalar(sp, 1.0)?;
        let lg = t.lgamma(shifted)?;
        let a = t.mean(ent)?;
        let b = t.mean(lg)?;
        t.add(a, b)
    };

    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
    let out = f(&mut tape, &[xv, wv])?;
    tape.backward(out)?;
    println!("f = {:.6}", tape.value(out).get(0, 0));
    println!("df/dw = {:?}", tape.grad(wv).expect("leaf").data());

    let report = grad_check(f, &[x, w], 1e-5, 1e-6)?;
    println!("max relative error {:.2e} -> {:?}", report.max_rel_err, report.status);
    Ok(())
}
