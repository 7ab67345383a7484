//! Central finite-difference gradient checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn eval_scalar<F>(f: &F, shape: &[usize], data: Vec<f64>, coord: usize) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let x = tape.leaf(shape, data, false)?;
    let y = f(&mut tape, x).map_err(|e| Error::NonFinite(format!("probe at coordinate {coord}: {e}")))?;
    let v = tape.item(y);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("probe at coordinate {coord}")));
    }
    Ok(v)
}

/// Compares the tape gradient of a scalar function at `point` against central
/// differences and returns the worst relative error over coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.shape(), point.data().to_vec(), true)?;
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let zeros = vec![0.0; point.len()];
    let analytic = grads.get(x).unwrap_or(&zeros).to_vec();

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += epsilon;
        minus[i] -= epsilon;
        let fp = eval_scalar(&f, point.shape(), plus, i)?;
        let fm = eval_scalar(&f, point.shape(), minus, i)?;
        let numeric = (fp - fm) / (2.0 * epsilon);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to model parameters: `f` builds the graph from
/// the current tensor values, which are perturbed in place one coordinate at
/// a time and restored afterwards.
pub fn grad_check_params<F>(f: F, params: &mut [&mut Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[&Tensor]) -> Result<Var>,
{
    for p in params.iter_mut() {
        p.zero_grad();
    }
    {
        let mut tape = Tape::new();
        let view: Vec<&Tensor> = params.iter().map(|p| &**p).collect();
        let y = f(&mut tape, &view)?;
        let grads = tape.backward(y)?;
        grads.accumulate_into(params.iter_mut().map(|p| &mut **p))?;
    }
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let probe = |params: &[&mut Tensor], which: usize, coord: usize| -> Result<f64> {
        let mut tape = Tape::inference();
        let view: Vec<&Tensor> = params.iter().map(|p| &**p).collect();
        let y = f(&mut tape, &view)
            .map_err(|e| Error::NonFinite(format!("probe at {}[{coord}]: {e}", params[which].name())))?;
        let v = tape.item(y);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("probe at {}[{coord}]", params[which].name())));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        for i in 0..params[pi].len() {
            let orig = params[pi].data()[i];
            params[pi].data_mut()[i] = orig + epsilon;
            let fp = probe(params, pi, i)?;
            params[pi].data_mut()[i] = orig - epsilon;
            let fm = probe(params, pi, i)?;
            params[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            worst = worst.max(rel_err(analytic[pi][i], numeric));
        }
    }
    for p in params.iter_mut() {
        p.clear_grad();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let point = Tensor::new(&[3], vec![0.1, -0.4, 2.0]).unwrap();
        let err = grad_check(|t, _x| t.constant(&[1], vec![4.2]), &point, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_matches() {
        let point = Tensor::new(&[3], vec![0.3, -1.2, 0.7]).unwrap();
        let err = grad_check(
            |t, x| {
                let z = t.constant(&[3], vec![0.0; 3])?;
                t.mse(x, z)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn probe_failure_names_coordinate() {
        // ln-like blowup: exp overflows once the probe moves the input
        let point = Tensor::new(&[2], vec![0.0, 709.7]).unwrap();
        let err = grad_check(|t, x| {
            let e = t.exp(x)?;
            t.sum(e)
        }, &point, 1.0)
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }
}
