use super::{Tape, Tensor, Var};
use crate::{Error, Result};

const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (parameter position, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of a scalar function against central differences
/// `(f(x + h) - f(x - h)) / 2h` at every coordinate of every parameter.
///
/// `f` receives a fresh tape and one leaf per parameter (in order) and
/// returns the scalar loss. It must be deterministic. The relative error of
/// a coordinate is `|a - b| / max(|a|, |b|, 1e-6)`; the floor keeps
/// round-off on vanishing gradients from counting as disagreement.
pub fn finite_difference_gradcheck<F>(
    mut f: F,
    params: &mut [Tensor<f64>],
    h: f64,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |params: &[Tensor<f64>], backward: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.set_requires_grad(true);
                tape.leaf(&p)
            })
            .collect();
        let loss = f(&mut tape, &leaves)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck objective evaluated to {value}")));
        }
        let mut grads = Vec::new();
        if backward {
            tape.backward(loss)?;
            for (leaf, p) in leaves.iter().zip(params) {
                grads.push(tape.grad(*leaf).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for pi in 0..params.len() {
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + h;
            let plus = eval(params, false).map(|r| r.0);
            params[pi].data_mut()[ci] = orig - h;
            let minus = eval(params, false).map(|r| r.0);
            params[pi].data_mut()[ci] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
