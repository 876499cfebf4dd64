use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative discrepancy,
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`, over every coordinate.
///
/// `f` is evaluated on a fresh tape each time, so it must be deterministic;
/// two disagreeing evaluations at the same point are reported as an
/// [`Error::Oracle`].
pub fn gradient_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(Error::domain(format!("gradient_check eps must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone().with_grad())).collect();
    let loss = f(&tape, &vars)?;
    let base = loss.item();
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.wrt(*v).cloned().expect("tracked leaf"))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, g_ad) in analytic.iter().enumerate() {
        for c in 0..work[pi].numel() {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let g_fd = (up - down) / (2.0 * eps);
            let a = g_ad.data()[c];
            let rel = (a - g_fd).abs() / (a.abs() + g_fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
