use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f64>,
    /// Coordinates left out of `max_rel_error` because the `±eps` stencil
    /// crossed a relu or max-pool kink.
    pub kinks: Vec<usize>,
}

/// Compares the tape gradient of a scalar function at `x` against central
/// differences, coordinate by coordinate.
///
/// `f` records its computation on the supplied graph, starting from the
/// leaf holding `x`, and returns the scalar output. The relative error per
/// coordinate uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
/// A coordinate whose perturbed evaluations select a different relu or
/// max-pool branch than the base point is recorded in `kinks` instead of
/// being scored, since the function is not differentiable across it.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Contract(format!("finite difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, output shape is {:?}",
            g.shape(y)
        )));
    }
    g.backward(y)?;
    let base_sig = g.kink_signature();
    let analytic = g
        .grad(xv)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let y = f(&mut g, v)?;
        Ok((g.value(y).item()? as f64, g.kink_signature()))
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    let mut kinks = Vec::new();
    for (i, &xi) in x.data().iter().enumerate() {
        let (up, down) = (xi + eps, xi - eps);
        let mut xp = x.clone();
        xp.data_mut()[i] = up;
        let mut xm = x.clone();
        xm.data_mut()[i] = down;
        // divide by the step actually representable in f32
        let span = up as f64 - down as f64;
        let ((fp, sp), (fm, sm)) = (eval(xp)?, eval(xm)?);
        let n = (fp - fm) / span;
        numeric.push(n);
        if sp != base_sig || sm != base_sig {
            kinks.push(i);
            continue;
        }
        let a = analytic[i] as f64;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        kinks,
    })
}
