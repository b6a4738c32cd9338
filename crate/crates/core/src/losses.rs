//! Training objectives, recorded on the tape so they can be differentiated.

use repose_tensor::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

pub use crate::descriptor::FeatureExtractor;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Warp terms: L1, perceptual, style, flow supervision, total variation.
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub beta5: f64,
    pub alpha_l1: f64,
    pub alpha_per: f64,
    pub alpha_sty: f64,
    pub alpha_adv: f64,
    /// Mix of warp and generator objectives in end-to-end training.
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 0.2,
            beta3: 100.0,
            beta4: 1.0,
            beta5: 0.1,
            alpha_l1: 1.0,
            alpha_per: 0.2,
            alpha_sty: 100.0,
            alpha_adv: 0.05,
            alpha1: 1.0,
            alpha2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta1,
            self.beta2,
            self.beta3,
            self.beta4,
            self.beta5,
            self.alpha_l1,
            self.alpha_per,
            self.alpha_sty,
            self.alpha_adv,
            self.alpha1,
            self.alpha2,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(CoreError::invalid("loss weights must be finite and nonnegative"))
        }
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(CoreError::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "l1")?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

fn mse<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

fn sum_all<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let weighted: Vec<(T, Var)> = terms.iter().map(|&v| (T::one(), v)).collect();
    Ok(tape.weighted_sum(&weighted)?)
}

/// Sum over extractor stages of the mean squared feature difference.
pub fn perceptual<T: Scalar>(tape: &mut Tape<T>, fx: &FeatureExtractor, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "perceptual")?;
    let fa = fx.features(tape, a)?;
    let fb = fx.features(tape, b)?;
    let terms = fa.iter().zip(&fb).map(|(&x, &y)| mse(tape, x, y)).collect::<Result<Vec<_>>>()?;
    sum_all(tape, &terms)
}

/// Sum over stages of the mean squared difference of Gram matrices, each
/// normalised by the feature map's element count.
pub fn style<T: Scalar>(tape: &mut Tape<T>, fx: &FeatureExtractor, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "style")?;
    let fa = fx.features(tape, a)?;
    let fb = fx.features(tape, b)?;
    let mut terms = Vec::with_capacity(fa.len());
    for (&x, &y) in fa.iter().zip(&fb) {
        let gx = tape.gram(x);
        let gy = tape.gram(y);
        terms.push(mse(tape, gx, gy)?);
    }
    sum_all(tape, &terms)
}

/// `mean |∂x f| + mean |∂y f|` over all channels.
pub fn total_variation<T: Scalar>(tape: &mut Tape<T>, flow: Var) -> Result<Var> {
    let s = tape.shape(flow);
    if s.len() != 3 || s[1] < 2 || s[2] < 2 {
        return Err(CoreError::invalid(format!("total variation needs C×H×W with H, W ≥ 2, got {s:?}")));
    }
    let dx = tape.diff_x(flow);
    let dx = tape.abs(dx);
    let dx = tape.mean(dx);
    let dy = tape.diff_y(flow);
    let dy = tape.abs(dy);
    let dy = tape.mean(dy);
    Ok(tape.add(dx, dy)?)
}

/// Mean squared endpoint error between two `2×H×W` flows.
pub fn flow_supervision<T: Scalar>(tape: &mut Tape<T>, f: Var, target: Var) -> Result<Var> {
    same_shape(tape, f, target, "flow supervision")?;
    let s = tape.shape(f).to_vec();
    if s.len() != 3 || s[0] != 2 {
        return Err(CoreError::invalid(format!("flow must be 2×H×W, got {s:?}")));
    }
    let d = tape.sub(f, target)?;
    let d = tape.square(d);
    let total = tape.sum(d);
    Ok(tape.scale(total, T::lit(1.0 / (s[1] * s[2]) as f64)))
}

/// `½ mean((real − 1)²) + ½ mean(fake²)`.
pub fn lsgan_d<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = tape.offset(real, -T::one());
    let r = tape.square(r);
    let r = tape.mean(r);
    let f = tape.square(fake);
    let f = tape.mean(f);
    Ok(tape.weighted_sum(&[(T::lit(0.5), r), (T::lit(0.5), f)])?)
}

/// `mean((fake − 1)²)`.
pub fn lsgan_g<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    let f = tape.offset(fake, -T::one());
    let f = tape.square(f);
    Ok(tape.mean(f))
}

/// A weighted sum with its named, unweighted components.
#[derive(Clone, Debug)]
pub struct Composite {
    pub total: Var,
    pub terms: Vec<(String, Var)>,
}

impl Composite {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> Vec<(String, f64)> {
        self.terms.iter().map(|(n, v)| (n.clone(), tape.scalar(*v).as_f64())).collect()
    }
}

/// One pyramid level of the warping objective.
#[derive(Clone, Copy, Debug)]
pub struct WarpLevel {
    /// Warped appearance brought to this level's resolution.
    pub warped: Var,
    /// Ground truth at the same resolution.
    pub target: Var,
    /// The level's flow upsampled to full resolution.
    pub flow: Var,
}

/// `Σ_l β1·L1 + β2·L_per + β3·L_sty + β4·L_flow + β5·L_tv`. `flow_decay`
/// scales `β4`; the TPS flow is the supervision target.
pub fn warp_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fx: &FeatureExtractor,
    levels: &[WarpLevel],
    tps_flow: Var,
    w: &LossWeights,
    flow_decay: f64,
) -> Result<Composite> {
    if levels.is_empty() {
        return Err(CoreError::invalid("warp loss needs at least one level"));
    }
    let mut sums: [Vec<Var>; 5] = Default::default();
    for lv in levels {
        sums[0].push(l1(tape, lv.warped, lv.target)?);
        sums[1].push(perceptual(tape, fx, lv.warped, lv.target)?);
        sums[2].push(style(tape, fx, lv.warped, lv.target)?);
        sums[3].push(flow_supervision(tape, lv.flow, tps_flow)?);
        sums[4].push(total_variation(tape, lv.flow)?);
    }
    let names = ["wrp_l1", "wrp_per", "wrp_sty", "wrp_flow", "wrp_tv"];
    let weights = [w.beta1, w.beta2, w.beta3, w.beta4 * flow_decay, w.beta5];
    let mut terms = Vec::with_capacity(5);
    let mut weighted = Vec::with_capacity(5);
    for i in 0..5 {
        let s = sum_all(tape, &sums[i])?;
        terms.push((names[i].to_string(), s));
        weighted.push((T::lit(weights[i]), s));
    }
    let total = tape.weighted_sum(&weighted)?;
    Ok(Composite { total, terms })
}

/// `α_l1·L1 + α_per·L_per + α_sty·L_sty + α_adv·L_adv`; the adversarial term
/// is skipped when no scores are given.
pub fn gen_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fx: &FeatureExtractor,
    out: Var,
    gt: Var,
    fake_scores: Option<Var>,
    w: &LossWeights,
) -> Result<Composite> {
    let a = l1(tape, out, gt)?;
    let p = perceptual(tape, fx, out, gt)?;
    let s = style(tape, fx, out, gt)?;
    let mut terms = vec![("gen_l1".to_string(), a), ("gen_per".to_string(), p), ("gen_sty".to_string(), s)];
    let mut weighted = vec![(T::lit(w.alpha_l1), a), (T::lit(w.alpha_per), p), (T::lit(w.alpha_sty), s)];
    if let Some(f) = fake_scores {
        let adv = lsgan_g(tape, f)?;
        terms.push(("gen_adv".to_string(), adv));
        weighted.push((T::lit(w.alpha_adv), adv));
    }
    let total = tape.weighted_sum(&weighted)?;
    Ok(Composite { total, terms })
}

/// `α1·L_wrp + α2·L_gen`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, l_wrp: Var, l_gen: Var, alpha1: f64, alpha2: f64) -> Result<Var> {
    Ok(tape.weighted_sum(&[(T::lit(alpha1), l_wrp), (T::lit(alpha2), l_gen)])?)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l_wrp: f64, l_gen: f64, alpha1: f64, alpha2: f64) -> f64 {
    alpha1 * l_wrp + alpha2 * l_gen
}
