use super::{Fault, Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over
    /// the tensor's elements.
    pub rel_error: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// A scalar function of a parameter list, evaluated on a fresh tape.
pub trait Objective<S: Scalar> {
    fn eval<'t>(&self, tape: &'t Tape<S>, params: &[Var<'t, S>]) -> Result<Var<'t, S>>;
}

impl<S, F> Objective<S> for F
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    fn eval<'t>(&self, tape: &'t Tape<S>, params: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        self(tape, params)
    }
}

/// Below this gradient scale a tensor's error is judged in absolute terms.
const SCALE_FLOOR: f64 = 1e-10;

/// Compares reverse-mode gradients of `f` against central finite differences
/// `(f(θ+h) - f(θ-h)) / 2h`, perturbing every element of every parameter.
pub fn grad_check<S: Scalar>(
    params: &[(String, Tensor<S>)],
    step: S,
    tol: f64,
    fault: Option<Fault>,
    f: &impl Objective<S>,
) -> Result<GradCheckReport> {
    assert!(step > S::zero(), "finite-difference step must be positive");
    let analytic: Vec<Tensor<S>> = {
        let tape = match fault {
            Some(fault) => Tape::with_fault(fault),
            None => Tape::new(),
        };
        let vars: Vec<Var<'_, S>> = params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect();
        let loss = f.eval(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, (_, t))| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |values: &[Tensor<S>]| -> Result<S> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, S>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f.eval(&tape, &vars)?;
        let v = loss.value_ref().data()[0];
        Ok(v)
    };

    let mut values: Vec<Tensor<S>> = params.iter().map(|(_, t)| t.clone()).collect();
    let two_h = step + step;
    let mut report = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..values[p].len() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[p].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[p].data_mut()[i] = orig;
            let numeric = ((plus - minus) / two_h).as_f64();
            let a = analytic[p].data()[i].as_f64();
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let rel = if scale > SCALE_FLOOR { max_diff / scale } else { max_diff };
        report.push(ParamError {
            name: name.clone(),
            rel_error: rel,
            abs_error: max_diff,
        });
    }
    let passed = report.iter().all(|e| e.rel_error < tol);
    Ok(GradCheckReport {
        params: report,
        tol,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_loss<'t>(tape: &'t Tape<f64>, p: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        let x = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).cos()));
        let y = x.matmul(&p[0])?;
        let b = p[1].expand_leading(&[3]);
        let y = y.add(&b)?;
        y.mul(&y)?.mean()
    }

    fn linear_params() -> Vec<(String, Tensor<f64>)> {
        vec![
            ("w".into(), Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.9).sin())),
            ("b".into(), Tensor::from_fn(&[2], |i| 0.1 * i as f64 - 0.05)),
        ]
    }

    #[test]
    fn linear_layer_passes_tight_tolerance() {
        let r = grad_check(&linear_params(), 1e-5, 1e-6, None, &linear_loss).unwrap();
        assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        fn f<'t>(tape: &'t Tape<f64>, p: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
            let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.6));
            x.matmul(&p[0])?.gelu().sum().mean()
        }
        let params = vec![("w".to_string(), Tensor::from_fn(&[3, 2], |i| 0.2 * i as f64 - 0.4))];
        let ok = grad_check(&params, 1e-5, 1e-6, None, &f).unwrap();
        assert!(ok.passed);
        let bad = grad_check(&params, 1e-5, 1e-6, Some(Fault::FlipGeluAdjoint), &f).unwrap();
        assert!(!bad.passed);
        assert_eq!(bad.worst().unwrap().name, "w");
    }
}
