//! Small helpers for building conv nets on the tape.

use rand::Rng;
use repose_tensor::{BoundParams, Conv2dCfg, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::Result;

/// He-normal weights scaled by `gain`, zero bias. Registers `{name}.w` and `{name}.b`.
pub(crate) fn init_conv<R: Rng>(store: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize, gain: f64, rng: &mut R) {
    let std = gain * (2.0 / (in_c * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[out_c, in_c, k, k], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out_c]));
}

pub(crate) fn init_zero_conv(store: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize) {
    store.insert(format!("{name}.w"), Tensor::zeros(&[out_c, in_c, k, k]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out_c]));
}

pub(crate) fn conv<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var, cfg: Conv2dCfg) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, Some(b), cfg)?)
}

pub(crate) const SLOPE: f64 = 0.1;

/// 3×3 conv (stride `stride`) followed by leaky ReLU.
pub(crate) fn conv_act<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(tape, p, name, x, Conv2dCfg { stride, pad: 1 })?;
    Ok(tape.leaky_relu(y, T::lit(SLOPE)))
}
