//! Re-rendering network: pose encoder, texture encoder, style injection with
//! noise, coarse-to-fine RGB heads, and a conditional patch discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repose_tensor::{BoundParams, Conv2dCfg, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::image::ImageTensor;
use crate::nn::{conv, conv_act, init_conv};

pub const SCALES: usize = 4;
pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "disc.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Generator {
    pub k: usize,
    pub width: usize,
}

fn g(name: &str) -> String {
    format!("{GEN_PREFIX}{name}")
}

impl Generator {
    pub fn new(k: usize, width: usize) -> Self {
        Self { k, width }
    }

    /// Channel count of scale `i` (coarsest first).
    pub fn scale_channels(&self) -> [usize; SCALES] {
        let c = self.width;
        [2 * c, 2 * c, c, c]
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.width;
        let [c0, c1, c2, c3] = self.scale_channels();
        // Pose encoder.
        for (n, i, o) in [
            ("pose.c0", 2 * self.k, c),
            ("pose.c1", c, 2 * c),
            ("pose.c2", 2 * c, 2 * c),
            ("pose.c3", 2 * c, 2 * c),
        ] {
            init_conv(store, &g(n), o, i, 3, 1.0, rng);
        }
        init_conv(store, &g("pose.res.a"), 2 * c, 2 * c, 3, 1.0, rng);
        init_conv(store, &g("pose.res.b"), 2 * c, 2 * c, 3, 0.5, rng);
        for (n, i, o) in [("pose.u1", 4 * c, c1), ("pose.u2", c1 + 2 * c, c2), ("pose.u3", c2 + c, c3)] {
            init_conv(store, &g(n), o, i, 3, 1.0, rng);
        }
        // Texture encoder.
        for (n, i, o) in [("tex.c0", 3, c), ("tex.c1", c, 2 * c), ("tex.c2", 2 * c, 2 * c), ("tex.c3", 2 * c, 2 * c)] {
            init_conv(store, &g(n), o, i, 3, 1.0, rng);
        }
        for (n, i, o) in [("tex.u1", 4 * c, c1), ("tex.u2", c1 + 2 * c, c2), ("tex.u3", c2 + c, c3)] {
            init_conv(store, &g(n), o, i, 3, 1.0, rng);
        }
        // Injection: α starts at 1, β at 0, noise weight at 0.
        for (i, ch) in [c0, c1, c2, c3].into_iter().enumerate() {
            for which in ["alpha", "beta"] {
                init_conv(store, &g(&format!("inj{i}.{which}.a")), ch, ch, 1, 1.0, rng);
                init_conv(store, &g(&format!("inj{i}.{which}.b")), ch, ch, 1, 0.1, rng);
            }
            store.insert(g(&format!("inj{i}.alpha.b.b")), Tensor::full(&[ch], 1.0));
            store.insert(g(&format!("inj{i}.noise")), Tensor::zeros(&[ch]));
            init_conv(store, &g(&format!("rgb{i}")), 3, ch, 1, 0.5, rng);
        }
    }

    /// Pose features at `H/8, H/4, H/2, H` from `[heat(P_p), heat(P_a)]`.
    pub fn pose_encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, heat_p: Var, heat_a: Var) -> Result<Vec<Var>> {
        if tape.shape(heat_p) != tape.shape(heat_a) || tape.shape(heat_p).first() != Some(&self.k) {
            return Err(CoreError::invalid(format!(
                "pose heatmaps {:?} / {:?}, expected {} channels each",
                tape.shape(heat_p),
                tape.shape(heat_a),
                self.k
            )));
        }
        check_spatial(tape.shape(heat_p))?;
        let x = tape.concat(&[heat_p, heat_a])?;
        let c0 = conv_act(tape, p, &g("pose.c0"), x, 1)?;
        let c1 = conv_act(tape, p, &g("pose.c1"), c0, 2)?;
        let c2 = conv_act(tape, p, &g("pose.c2"), c1, 2)?;
        let c3 = conv_act(tape, p, &g("pose.c3"), c2, 2)?;
        let r = conv_act(tape, p, &g("pose.res.a"), c3, 1)?;
        let r = conv(tape, p, &g("pose.res.b"), r, Conv2dCfg::SAME3)?;
        let s0 = tape.add(c3, r)?;
        self.top_down(tape, p, "pose", s0, [c2, c1, c0])
    }

    /// Texture features of the warped image, aligned with the pose scales.
    pub fn texture_encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, warped: Var) -> Result<Vec<Var>> {
        if tape.shape(warped).first() != Some(&3) {
            return Err(CoreError::invalid(format!("texture input {:?} is not 3×H×W", tape.shape(warped))));
        }
        check_spatial(tape.shape(warped))?;
        let c0 = conv_act(tape, p, &g("tex.c0"), warped, 1)?;
        let c1 = conv_act(tape, p, &g("tex.c1"), c0, 2)?;
        let c2 = conv_act(tape, p, &g("tex.c2"), c1, 2)?;
        let c3 = conv_act(tape, p, &g("tex.c3"), c2, 2)?;
        self.top_down(tape, p, "tex", c3, [c2, c1, c0])
    }

    fn top_down<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, branch: &str, top: Var, skips: [Var; 3]) -> Result<Vec<Var>> {
        let mut out = vec![top];
        let mut cur = top;
        for (i, skip) in skips.into_iter().enumerate() {
            let u = tape.upsample2x(cur);
            let x = tape.concat(&[u, skip])?;
            cur = conv_act(tape, p, &g(&format!("{branch}.u{}", i + 1)), x, 1)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// `α ⊙ e_p + β + w ⊙ n` at scale `i`; `noise` is unit-normal when given.
    pub fn inject<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, i: usize, e_p: Var, e_t: Var, noise: Option<Var>) -> Result<Var> {
        texture_inject(tape, p, &g(&format!("inj{i}")), e_p, e_t, noise)
    }

    /// Sum of per-scale RGB heads, upsampled coarse to fine, squashed to `[0, 1]`.
    pub fn trgb<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, feats: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (i, &f) in feats.iter().enumerate() {
            let rgb = conv(tape, p, &g(&format!("rgb{i}")), f, Conv2dCfg::POINTWISE)?;
            acc = Some(match acc {
                None => rgb,
                Some(a) => {
                    let u = tape.upsample2x(a);
                    tape.add(u, rgb)?
                }
            });
        }
        let acc = acc.ok_or_else(|| CoreError::invalid("no features to compose"))?;
        Ok(tape.sigmoid(acc))
    }

    /// Full re-rendering pass. Noise tensors are drawn from `noise_seed`;
    /// without a seed no noise is added.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        warped: Var,
        heat_a: Var,
        heat_p: Var,
        noise_seed: Option<u64>,
    ) -> Result<Var> {
        if tape.shape(warped)[1..] != tape.shape(heat_p)[1..] {
            return Err(CoreError::invalid("warped image and heatmaps differ in size"));
        }
        let ep = self.pose_encode(tape, p, heat_p, heat_a)?;
        let et = self.texture_encode(tape, p, warped)?;
        let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
        let mut outs = Vec::with_capacity(SCALES);
        for i in 0..SCALES {
            let noise = rng.as_mut().map(|r| tape.constant(Tensor::randn(tape.shape(ep[i]), 1.0, r)));
            outs.push(self.inject(tape, p, i, ep[i], et[i], noise)?);
        }
        self.trgb(tape, p, &outs)
    }

    pub fn generate(
        &self,
        store: &ParamStore,
        warped: &ImageTensor,
        heat_a: &Tensor<f32>,
        heat_p: &Tensor<f32>,
        noise_seed: Option<u64>,
    ) -> Result<ImageTensor> {
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape, GEN_PREFIX, false);
        let w = tape.constant(warped.clone());
        let ha = tape.constant(heat_a.clone());
        let hp = tape.constant(heat_p.clone());
        let out = self.forward(&mut tape, &p, w, ha, hp, noise_seed)?;
        Ok(tape.value(out).clone())
    }
}

fn check_spatial(shape: &[usize]) -> Result<()> {
    match shape {
        [_, h, w] if h % 8 == 0 && w % 8 == 0 && *h > 0 && *w > 0 => Ok(()),
        _ => Err(CoreError::invalid(format!(
            "generator input {shape:?} must be C×H×W with H, W multiples of 8"
        ))),
    }
}

/// Style injection with parameters under `prefix`: `{prefix}.alpha.{a,b}`,
/// `{prefix}.beta.{a,b}` (1×1 conv, ReLU, 1×1 conv) and `{prefix}.noise`.
pub fn texture_inject<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, prefix: &str, e_p: Var, e_t: Var, noise: Option<Var>) -> Result<Var> {
    if tape.shape(e_p) != tape.shape(e_t) {
        return Err(CoreError::invalid(format!(
            "pose features {:?} and texture features {:?} differ",
            tape.shape(e_p),
            tape.shape(e_t)
        )));
    }
    let mut maps = [e_t; 2];
    for (m, which) in maps.iter_mut().zip(["alpha", "beta"]) {
        let a = conv(tape, p, &format!("{prefix}.{which}.a"), e_t, Conv2dCfg::POINTWISE)?;
        let a = tape.relu(a);
        *m = conv(tape, p, &format!("{prefix}.{which}.b"), a, Conv2dCfg::POINTWISE)?;
    }
    let [alpha, beta] = maps;
    let scaled = tape.mul(alpha, e_p)?;
    let infused = tape.add(scaled, beta)?;
    match noise {
        None => Ok(infused),
        Some(n) => {
            if tape.shape(n) != tape.shape(e_p) {
                return Err(CoreError::invalid("noise shape differs from features"));
            }
            let w = p.get(&format!("{prefix}.noise"))?;
            let wn = tape.scale_channels(n, w)?;
            Ok(tape.add(infused, wn)?)
        }
    }
}

/// Four stride-2 4×4 convs over `[image, heat(P_p)]`; raw scores at `H/16`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Discriminator {
    pub k: usize,
    pub width: usize,
}

impl Discriminator {
    pub fn new(k: usize, width: usize) -> Self {
        Self { k, width }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.width;
        let layers = [(3 + self.k, c), (c, 2 * c), (2 * c, 4 * c), (4 * c, 1)];
        for (i, (inp, out)) in layers.into_iter().enumerate() {
            init_conv(store, &format!("{DISC_PREFIX}c{i}"), out, inp, 4, 1.0, rng);
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, image: Var, heat_p: Var) -> Result<Var> {
        let (is, hs) = (tape.shape(image), tape.shape(heat_p));
        if is.len() != 3 || is[0] != 3 || hs.len() != 3 || hs[0] != self.k || is[1..] != hs[1..] || is[1] % 16 != 0 || is[2] % 16 != 0 {
            return Err(CoreError::invalid(format!("discriminator inputs {is:?} / {hs:?}")));
        }
        let mut x = tape.concat(&[image, heat_p])?;
        for i in 0..4 {
            x = conv(tape, p, &format!("{DISC_PREFIX}c{i}"), x, Conv2dCfg { stride: 2, pad: 1 })?;
            if i < 3 {
                x = tape.leaky_relu(x, T::lit(0.2));
            }
        }
        Ok(x)
    }

    pub fn score(&self, store: &ParamStore, image: &ImageTensor, heat_p: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape, DISC_PREFIX, false);
        let i = tape.constant(image.clone());
        let h = tape.constant(heat_p.clone());
        let s = self.forward(&mut tape, &p, i, h)?;
        Ok(tape.value(s).clone())
    }
}
