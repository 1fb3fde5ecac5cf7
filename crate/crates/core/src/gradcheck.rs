//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward passes; it never consults the
//! backward rules it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks the gradient of `sum(w * f(inputs))` with respect to every element
/// of every input, where `w` is a fixed random projection.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64, seed: u64) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let projection: std::cell::RefCell<Option<Tensor<f64>>> = Default::default();
    let mut eval = |vals: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let g = Graph::new();
        let vars: Vec<_> = vals.iter().map(|t| g.leaf(t.clone(), grads)).collect();
        let out = f(&g, &vars)?;
        let shape = out.shape();
        let w = projection
            .borrow_mut()
            .get_or_insert_with(|| Tensor::from_fn(shape.clone(), |_| rng.random_range(-1.0..1.0)))
            .clone();
        let w = g.constant(w);
        let loss = out.mul(w)?.sum();
        let value = loss.item();
        if !grads {
            return Ok((value, vec![]));
        }
        g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheck { max_rel_err: 0.0, worst_input: 0, worst_index: 0, checked: 0 };
    let mut vals = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + h;
            let (up, _) = eval(&vals, false)?;
            vals[i].data_mut()[j] = orig - h;
            let (down, _) = eval(&vals, false)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g.data()[j]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_input = i;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

/// Uniform `[-1, 1]` tensor for test inputs.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}
