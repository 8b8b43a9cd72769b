use super::{DenseArray, NumericsError, Tape, Var};

const STEP: f64 = 1e-5;
/// Magnitude below which relative error is measured against this floor
/// instead of the gradient itself.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub passed: bool,
    pub max_relative_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of `build` with respect to `param`
/// against central finite differences.
///
/// `build` records a graph on the supplied tape, starting from the leaf
/// holding the parameter, and returns the scalar root.
pub fn check_gradient<F>(
    build: F,
    param: &DenseArray,
    tolerance: f64,
) -> Result<GradCheck, NumericsError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, NumericsError>,
{
    let analytic = {
        let tape = Tape::new();
        let p = tape.leaf(param.clone());
        let root = build(&tape, p)?;
        let grads = tape.backward(root)?;
        match grads.get(p) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; param.len()],
        }
    };

    let eval = |value: DenseArray| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let p = tape.leaf(value);
        let root = build(&tape, p)?;
        let v = root.value();
        if !v.is_scalar() {
            return Err(NumericsError::Contract(format!(
                "gradient check root must be scalar, got {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let mut numeric = Vec::with_capacity(param.len());
    let mut max_rel: f64 = 0.0;
    for i in 0..param.len() {
        let mut plus = param.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = param.clone();
        minus.data_mut()[i] -= STEP;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * STEP);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
        max_rel = max_rel.max(rel);
        numeric.push(fd);
    }

    Ok(GradCheck {
        passed: max_rel <= tolerance,
        max_relative_error: max_rel,
        analytic,
        numeric,
    })
}
