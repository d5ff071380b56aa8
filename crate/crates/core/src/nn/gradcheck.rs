//! Central-difference gradient verification.

use super::tape::{NodeId, Tape};
use super::tensor::{NnError, Tensor};

/// Checks the reverse-mode gradient of a scalar-valued function against
/// central differences, coordinate by coordinate. Returns the maximum of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` receives a fresh tape and the node holding the input; it must
/// build the same computation on every call.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, NnError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |input: &Tensor, with_grad: bool| -> Result<(f64, Option<Vec<f64>>), NnError> {
        let mut tape = Tape::new();
        let xid = tape.leaf(input.clone(), with_grad);
        let out = f(&mut tape, xid)?;
        let y = tape.value(out);
        if !y.is_scalar() {
            return Err(NnError::Invalid(format!(
                "grad_check target must be scalar, got {:?}",
                y.shape
            )));
        }
        let v = y.item();
        if !v.is_finite() {
            return Err(NnError::NonFinite("grad_check evaluation"));
        }
        if with_grad {
            let grads = tape.backward(out)?;
            let g = grads
                .get(xid)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; input.numel()]);
            Ok((v, Some(g)))
        } else {
            Ok((v, None))
        }
    };

    let (_, analytic) = eval(x, true)?;
    let analytic = analytic.unwrap();
    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let (fp, _) = eval(&probe, false)?;
        probe.data[i] = orig - eps;
        let (fm, _) = eval(&probe, false)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
