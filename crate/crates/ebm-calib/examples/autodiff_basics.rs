//! Reverse-mode autodiff on the tape: build a small expression, run the
//! backward pass, and confirm the analytic gradients against central finite
//! differences.

use ebm_calib::autodiff::gradcheck::check_gradients;
use ebm_calib::autodiff::Tape;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // f(w, b) = mean(softplus(x w + b)) for a fixed 2x3 input.
    let x = vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5];
    let w0 = vec![0.3, -0.2, 0.1, 0.4, -0.6, 0.2];
    let b0 = vec![0.05, -0.05];

    let mut tape = Tape::new();
    let xs = tape.leaf(x.clone(), &[2, 3], false)?;
    let w = tape.leaf(w0.clone(), &[3, 2], true)?;
    let b = tape.leaf(b0.clone(), &[2], true)?;
    let z = tape.matmul(xs, w)?;
    let z = tape.add_bias(z, b)?;
    let s = tape.softplus(z)?;
    let loss = tape.mean_all(s)?;
    tape.backward(loss)?;

    println!("loss   = {:.6}", tape.value(loss));
    println!("dL/dw  = {:?}", tape.grad(w).unwrap());
    println!("dL/db  = {:?}", tape.grad(b).unwrap());

    // Probe every coordinate of w and b with central differences.
    let inputs = vec![(w0, vec![3, 2]), (b0, vec![2])];
    let failures = check_gradients(&inputs, 1e-6, |t, ids| {
        let xs = t.leaf(x.clone(), &[2, 3], false).unwrap();
        let z = t.matmul(xs, ids[0]).unwrap();
        let z = t.add_bias(z, ids[1]).unwrap();
        let s = t.softplus(z).unwrap();
        t.mean_all(s).unwrap()
    });
    println!("finite-difference failures at tol 1e-6: {}", failures.len());
    assert!(failures.is_empty(), "gradient check failed: {failures:?}");
    Ok(())
}
