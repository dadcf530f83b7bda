use super::{NumError, Tape, Tensor, Var};

/// Worst element of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
    pub eps: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tol)
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per parameter, and must return a
/// one-element value.
pub fn gradcheck<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradReport, NumError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, NumError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, NumError> {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.with_value(out, |t| if t.len() == 1 { Ok(t.item()) } else { Err(t.shape().to_vec()) });
        let v = v.map_err(NumError::NotScalar)?;
        if !v.is_finite() {
            return Err(NumError::NonFiniteValue("function value".into()));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("backward ran")).collect();
    if let Some(k) = analytic.iter().position(|g| !g.all_finite()) {
        return Err(NumError::NonFiniteValue(format!("gradient of parameter {k}")));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut report = ParamReport {
            index: k,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params[k].len() {
            let orig = params[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || i == 0 {
                report = ParamReport { index: k, max_rel_error: err, worst_element: i, analytic: a, numeric };
            }
        }
        reports.push(report);
    }
    Ok(GradReport { params: reports, tol, eps })
}
