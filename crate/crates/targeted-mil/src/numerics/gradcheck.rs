//! Gradient verification against central finite differences.

use super::{Graph, NumericsError, Tensor, VarId};

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// (parameter index, flat coordinate, analytic, numeric) of the worst
    /// coordinate — diagnostic only.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Rebuilds the op nodes above the leaf checkpoint and reads the loss.
fn eval_scalar<F>(
    f: &F,
    g: &mut Graph,
    ids: &[VarId],
    base: super::GraphMark,
) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, &[VarId]) -> Result<VarId, NumericsError>,
{
    g.truncate_to(base);
    let loss = f(g, ids)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(NumericsError::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check probe" });
    }
    Ok(x)
}

/// Compares the analytic gradient of the scalar function built by `f`
/// against central finite differences `(f(p+h) − f(p−h)) / 2h`, coordinate
/// by coordinate over every parameter. Relative error uses the larger of
/// the two magnitudes, floored at 1e-6.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[VarId]) -> Result<VarId, NumericsError>,
{
    if !(h > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "grad_check step must be positive, got {h}"
        )));
    }
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<VarId> = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect::<Result<_, _>>()?;
    let loss = f(&mut g, &ids)?;
    if !g.value(loss).is_scalar() {
        return Err(NumericsError::NonScalarLoss {
            shape: g.value(loss).shape().to_vec(),
        });
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();

    // Numeric pass. Leaves are registered once; each probe nudges one
    // coordinate in place and rebuilds only the op nodes above the mark.
    let mut ng = Graph::new();
    let nids: Vec<VarId> = params
        .iter()
        .map(|p| ng.constant(p.clone()))
        .collect::<Result<_, _>>()?;
    let base = ng.mark();
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    for (pi, a) in analytic.iter().enumerate() {
        for ci in 0..a.len() {
            let orig = params[pi].data()[ci];
            ng.set_leaf_coord(nids[pi], ci, orig + h)?;
            let fp = eval_scalar(&f, &mut ng, &nids, base)?;
            ng.set_leaf_coord(nids[pi], ci, orig - h)?;
            let fm = eval_scalar(&f, &mut ng, &nids, base)?;
            ng.set_leaf_coord(nids[pi], ci, orig)?;
            let numeric = (fp - fm) / (2.0 * h);
            let an = a.data()[ci];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((pi, ci, an, numeric));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= tol,
        worst,
    })
}
