use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Smallest step tried when the default step straddles a ReLU kink.
pub const FD_MIN_STEP: f64 = 1e-8;
/// Step of the seven-point stencil used for gradients below the rounding floor.
pub const FD_WIDE_STEP: f64 = 3e-3;
/// Fallback five-point step when the seven-point stencil crosses a kink.
pub const FD_MID_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over scalar parameters of |analytic − numeric| / max(1e-8, |numeric|)
    pub max_rel_error: f64,
    /// (parameter slot, flat index) where the maximum occurred
    pub worst: (usize, usize),
    pub checked: usize,
    /// Coordinates where the default step crossed a ReLU kink and a smaller
    /// step was used instead.
    pub refined: usize,
    /// Coordinates whose gradient was too small to resolve with the default
    /// step against loss rounding; a wider higher-order stencil was used.
    pub widened: usize,
    /// Coordinates where every step down to [`FD_MIN_STEP`] crossed a kink;
    /// central differences are undefined there and they are excluded.
    pub skipped: usize,
}

/// Compare the graph's analytic gradients with central differences.
///
/// `build` must construct the same scalar loss from the parameter leaves it
/// is given every time it is called; it is invoked at least `2·P + 1` times.
///
/// A central difference is only meaningful if the perturbation does not move
/// any ReLU input across zero. When the ± evaluations change the activation
/// pattern, the step is divided by 10 until they agree. When the difference
/// quotient at the default step is dominated by rounding of the loss value
/// (tiny gradients), the sixth-order central stencil
/// `(f(x+3h) − 9f(x+2h) + 45f(x+h) − 45f(x−h) + 9f(x−2h) − f(x−3h)) / 60h`
/// at [`FD_WIDE_STEP`] is used instead, falling back to the fourth-order
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` at [`FD_MID_STEP`] when
/// the wide points cross a kink.
pub fn grad_check<F>(params: &[Tensor], mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(params, Graph::new, &mut build)
}

#[doc(hidden)]
pub fn grad_check_with<F>(params: &[Tensor], graph: impl Fn() -> Graph, build: &mut F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor], build: &mut F, g: &mut Graph| -> Result<Var> {
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect();
        build(g, &vars)
    };
    let probe = |params: &[Tensor], build: &mut F| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let l = eval(params, build, &mut g)?;
        Ok((g.value(l).item(), g.relu_pattern()))
    };

    let mut g = graph();
    let loss = eval(params, build, &mut g)?;
    let base_pattern = g.relu_pattern();
    let base_loss = g.value(loss).item();
    let grads = g.backward(loss)?;
    let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
    let analytic = grads.params_dense(&shapes);
    drop(g);

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        refined: 0,
        widened: 0,
        skipped: 0,
    };
    for p in 0..work.len() {
        for j in 0..work[p].len() {
            let orig = work[p].data()[j];
            // Evaluate the loss at orig + c·step for each c; None if any point
            // changes the activation pattern.
            let mut stencil = |step: f64, offsets: &[f64], work: &mut Vec<Tensor>| -> Result<Option<Vec<f64>>> {
                let mut out = Vec::with_capacity(offsets.len());
                let mut ok = true;
                for &c in offsets {
                    work[p].data_mut()[j] = orig + c * step;
                    let (l, pat) = probe(work, build)?;
                    ok &= pat == base_pattern;
                    out.push(l);
                }
                work[p].data_mut()[j] = orig;
                Ok(ok.then_some(out))
            };

            let mut step = FD_STEP;
            let mut numeric = None;
            while step >= FD_MIN_STEP * 0.5 {
                if let Some(v) = stencil(step, &[1.0, -1.0], &mut work)? {
                    numeric = Some((v[0] - v[1]) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let Some(mut numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            if step != FD_STEP {
                report.refined += 1;
            } else {
                let rounding = 8.0 * base_loss.abs() * f64::EPSILON / (2.0 * step);
                if numeric != 0.0 && rounding > 1e-5 * numeric.abs() {
                    if let Some(v) = stencil(FD_WIDE_STEP, &[3.0, 2.0, 1.0, -1.0, -2.0, -3.0], &mut work)? {
                        numeric = (v[0] - 9.0 * v[1] + 45.0 * v[2] - 45.0 * v[3] + 9.0 * v[4] - v[5]) / (60.0 * FD_WIDE_STEP);
                        report.widened += 1;
                    } else if let Some(v) = stencil(FD_MID_STEP, &[2.0, 1.0, -1.0, -2.0], &mut work)? {
                        numeric = (-v[0] + 8.0 * v[1] - 8.0 * v[2] + v[3]) / (12.0 * FD_MID_STEP);
                        report.widened += 1;
                    }
                }
            }
            let err = (analytic[p].data()[j] - numeric).abs() / numeric.abs().max(1e-8);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst = (p, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
