use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for relative errors so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, flat element)` where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares the tape's gradients of `f` with respect to every entry of
/// `inputs` against central finite differences with step `h`.
///
/// `skip(input, element, value)` excludes entries, e.g. ReLU inputs near a kink.
pub fn check_gradients<F, S>(inputs: &[Matrix], h: f64, f: F, skip: S) -> Result<GradCheck>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
    S: Fn(usize, usize, &Matrix) -> bool,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, m)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
        })
        .collect();

    let eval = |probe: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|m| t.constant(m.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            if skip(k, e, input) {
                continue;
            }
            let x = input.as_slice()[e];
            probe[k].as_mut_slice()[e] = x + h;
            let up = eval(&probe)?;
            probe[k].as_mut_slice()[e] = x - h;
            let down = eval(&probe)?;
            probe[k].as_mut_slice()[e] = x;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[k].as_slice()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((k, e));
            }
        }
    }
    Ok(report)
}
