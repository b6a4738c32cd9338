//! Finite-difference verification of tape gradients.

use crate::{Tape, Tensor, Var};

/// Worst disagreement found by [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `h`, for every element of every input.
/// Relative errors use `floor` as the smallest denominator so that
/// near-zero gradients are compared absolutely.
pub fn gradient_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, h: f64, floor: f64) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);
    let eval = |inputs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs);
        t.scalar(o)
    };
    let mut res = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.len() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval(&work);
            work[i].data_mut()[j] = x - h;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if err > res.max_rel_err || res.checked == 0 {
                res.max_rel_err = err;
                res.worst = (i, j, a, fd);
            }
            res.checked += 1;
        }
    }
    res
}
