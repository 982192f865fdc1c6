//! Finite-difference validation of every tape operation, including the
//! recorded-backward path that differentiates through a gradient.

use pixelfold::gradcheck::{max_rel_err, standard_cases};
use pixelfold::tape::Tape;
use pixelfold::tensor::Tensor;

#[test]
fn standard_cases_match_finite_differences() {
    for case in standard_cases() {
        let err = max_rel_err(&case, 11, 1e-5, false).unwrap();
        assert!(err < 1e-6, "case {} worst relative error {:.3e}", case.name, err);
    }
}

#[test]
fn fault_injection_is_detected() {
    let cases = standard_cases();
    let err = max_rel_err(&cases[0], 11, 1e-5, true).unwrap();
    assert!(err > 1e-3, "injected fault went unnoticed, error {:.3e}", err);
}

#[test]
fn gradient_of_gradient_matches_closed_form() {
    // y = (w . x)^2, p = |grad_x y|^2 = 4 (w . x)^2 |w|^2
    // dp/dw_j = 8 (w . x) x_j |w|^2 + 8 (w . x)^2 w_j
    let x = Tensor::from_vec(&[3], vec![0.7, -1.2, 0.4]).unwrap();
    let w = Tensor::from_vec(&[3], vec![0.3, 0.9, -0.5]).unwrap();

    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let wv = tape.leaf(w.clone(), true);
    let prod = tape.mul(wv, xv).unwrap();
    let wx = tape.sum_all(prod);
    let y = tape.mul(wx, wx).unwrap();
    let gx = tape.grad(y, &[xv]).unwrap()[0].unwrap();
    let g2 = tape.mul(gx, gx).unwrap();
    let penalty = tape.sum_all(g2);
    let gw = tape.grad(penalty, &[wv]).unwrap()[0].unwrap();

    let dot: f64 = x.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let wn2: f64 = w.data().iter().map(|v| v * v).sum();
    assert!((tape.value(penalty).item() - 4.0 * dot * dot * wn2).abs() < 1e-12);
    for j in 0..3 {
        let expect = 8.0 * dot * x.data()[j] * wn2 + 8.0 * dot * dot * w.data()[j];
        let got = tape.value(gw).data()[j];
        assert!(
            (got - expect).abs() < 1e-10,
            "component {}: got {}, expected {}",
            j,
            got,
            expect
        );
    }
}

#[test]
fn disconnected_and_frozen_leaves_get_no_gradient() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.leaf(Tensor::filled(&[2], 1.0), true);
    let b = tape.leaf(Tensor::filled(&[2], 2.0), true);
    let frozen = tape.leaf(Tensor::filled(&[2], 3.0), false);
    let s = tape.add(a, frozen).unwrap();
    let s2 = tape.mul(s, s).unwrap();
    let loss = tape.sum_all(s2);
    let grads = tape.grad(loss, &[a, b, frozen]).unwrap();
    assert!(grads[0].is_some());
    assert!(grads[1].is_none());
    assert!(grads[2].is_none());
}

#[test]
fn detach_blocks_gradient_flow() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.leaf(Tensor::filled(&[2], 2.0), true);
    let d = tape.detach(a);
    let p = tape.mul(a, d).unwrap();
    let loss = tape.sum_all(p);
    let g = tape.grad(loss, &[a]).unwrap()[0].unwrap();
    // With the second factor detached the gradient is its value, not 2a.
    assert_eq!(tape.value(g).data(), &[2.0, 2.0]);
}

#[test]
fn grad_requires_scalar_loss() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.leaf(Tensor::filled(&[2], 1.0), true);
    let err = tape.grad(a, &[a]).unwrap_err();
    assert!(err.to_string().contains("scalar"));
}
