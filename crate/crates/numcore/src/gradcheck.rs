//! Central finite differences against the tape's analytic gradients.

use crate::error::NumError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter position, flat coordinate) of the worst mismatch.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F, E>(f: &mut F, params: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var), E>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<NumError>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            if track {
                graph.param(p)
            } else {
                graph.constant(p.clone())
            }
        })
        .collect();
    let out = f(&mut graph, &vars)?;
    Ok((graph, vars, out))
}

/// Compares the backward pass of `f` with central differences over every
/// coordinate of every tensor in `params` and returns the worst relative
/// error.
///
/// `f` records a scalar onto the graph it is handed, reading the parameters
/// through the supplied vars. It must be deterministic.
pub fn finite_diff_check<F, E>(mut f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<NumError>,
{
    let (graph, vars, loss) = evaluate(&mut f, params, true)?;
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get_raw(*var)
            .map_or_else(|| vec![0.0; params[pi].len()], <[f64]>::to_vec);
        for (ci, &a) in analytic.iter().enumerate() {
            let base = params[pi].data()[ci];
            probe[pi].data_mut()[ci] = base + eps;
            let (g, _, up) = evaluate(&mut f, &probe, false)?;
            let f_up = g.scalar_value(up);
            probe[pi].data_mut()[ci] = base - eps;
            let (g, _, down) = evaluate(&mut f, &probe, false)?;
            let f_down = g.scalar_value(down);
            probe[pi].data_mut()[ci] = base;

            let numeric = (f_up - f_down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
