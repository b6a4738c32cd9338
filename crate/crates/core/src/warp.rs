//! Appearance-flow estimation and warping, plus the thin-plate-spline warp
//! used as baseline and flow teacher.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use repose_tensor::{kernels, BoundParams, Conv2dCfg, ParamStore, Scalar, Tape, Tensor, Var};

use crate::correspondence::{encode_heatmaps, Correspondences};
use crate::error::{CoreError, Result};
use crate::image::ImageTensor;
use crate::nn::{conv, conv_act, init_conv, init_zero_conv};

pub const LEVELS: usize = 4;
pub const UPSAMPLE_FACTOR: usize = 2;

/// Conditioning stack `[I_a, heat(P_a), I_p, heat(P_p)]`.
pub fn build_warp_input(
    appearance: &ImageTensor,
    points_a: &[[f64; 2]],
    pose: &ImageTensor,
    points_p: &[[f64; 2]],
    sigma: f64,
) -> Result<Tensor<f32>> {
    let (ca, h, w) = appearance.chw()?;
    if ca != 3 || pose.shape() != appearance.shape() {
        return Err(CoreError::invalid(format!(
            "appearance {:?} and pose {:?} must both be 3×H×W",
            appearance.shape(),
            pose.shape()
        )));
    }
    if points_a.len() != points_p.len() {
        return Err(CoreError::invalid("keypoint sets differ in length"));
    }
    let ha = encode_heatmaps(points_a, h, w, sigma)?;
    let hp = encode_heatmaps(points_p, h, w, sigma)?;
    Ok(Tensor::concat_channels(&[appearance, &ha, pose, &hp])?)
}

pub fn warp_input_for(appearance: &ImageTensor, pose: &ImageTensor, c: &Correspondences, sigma: f64) -> Result<Tensor<f32>> {
    build_warp_input(appearance, &c.a.points, pose, &c.p.points, sigma)
}

/// Zeroes the pose-image channels while keeping the stack layout.
pub fn drop_pose_image(input: &mut Tensor<f32>, k: usize) -> Result<()> {
    let (c, h, w) = input.chw()?;
    if c != 6 + 2 * k {
        return Err(CoreError::invalid(format!("warp input has {c} channels, expected {}", 6 + 2 * k)));
    }
    let plane = h * w;
    let start = (3 + k) * plane;
    input.data_mut()[start..start + 3 * plane].fill(0.0);
    Ok(())
}

/// Skip-UNet predicting `LEVELS` flows at doubling resolutions.
///
/// Encoder `e1..e6` (three stride-2 stages), decoder `d1..d6` with skips from
/// `e4, e3, e2, e1`. Flow heads sit on `d1, d2, d3, d6`; mask heads on
/// `d1, d2, d3` give the convex-upsampling logits for their resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowNet {
    pub in_channels: usize,
    pub width: usize,
}

pub const WARP_PREFIX: &str = "warp.";

/// Per-level flows before and after upsampling, all on the tape.
#[derive(Clone, Debug)]
pub struct FlowPyramid {
    /// `levels[l]` is `2 × H/2^(LEVELS-1-l) × W/2^(LEVELS-1-l)`.
    pub levels: Vec<Var>,
    /// Convex-upsampling logits at `H/8, H/4, H/2`.
    pub masks: Vec<Var>,
    /// Every level brought to `2 × H × W`.
    pub upsampled: Vec<Var>,
}

impl FlowNet {
    pub fn new(k: usize, width: usize) -> Self {
        Self {
            in_channels: 6 + 2 * k,
            width,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.width;
        let p = |n: &str| format!("{WARP_PREFIX}{n}");
        let enc = [
            ("e1", self.in_channels, c),
            ("e2", c, 2 * c),
            ("e3", 2 * c, 4 * c),
            ("e4", 4 * c, 4 * c),
            ("e5", 4 * c, 4 * c),
            ("e6", 4 * c, 4 * c),
        ];
        for (n, i, o) in enc {
            init_conv(store, &p(n), o, i, 3, 1.0, rng);
        }
        let dec = [
            ("d1", 8 * c, 4 * c),
            ("d2", 8 * c, 2 * c),
            ("d3", 4 * c, c),
            ("d4", 2 * c, c),
            ("d5", c, c),
            ("d6", c, c),
        ];
        for (n, i, o) in dec {
            init_conv(store, &p(n), o, i, 3, 1.0, rng);
        }
        for (l, ch) in [4 * c, 2 * c, c, c].into_iter().enumerate() {
            init_zero_conv(store, &p(&format!("flow{l}")), 2, ch, 3);
        }
        let mc = kernels::convex_mask_channels(UPSAMPLE_FACTOR);
        for (l, ch) in [4 * c, 2 * c, c].into_iter().enumerate() {
            init_conv(store, &p(&format!("mask{l}")), mc, ch, 1, 0.1, rng);
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &BoundParams, input: Var) -> Result<FlowPyramid> {
        let (c, h, w) = chw(tape.shape(input));
        if c != self.in_channels {
            return Err(CoreError::invalid(format!("flow net expects {} channels, got {c}", self.in_channels)));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(CoreError::invalid(format!("flow net input {h}×{w} is not a multiple of 8")));
        }
        let n = |s: &str| format!("{WARP_PREFIX}{s}");
        let e1 = conv_act(tape, p, &n("e1"), input, 1)?;
        let e2 = conv_act(tape, p, &n("e2"), e1, 2)?;
        let e3 = conv_act(tape, p, &n("e3"), e2, 2)?;
        let e4 = conv_act(tape, p, &n("e4"), e3, 2)?;
        let e5 = conv_act(tape, p, &n("e5"), e4, 1)?;
        let e6 = conv_act(tape, p, &n("e6"), e5, 1)?;

        let x = tape.concat(&[e6, e4])?;
        let d1 = conv_act(tape, p, &n("d1"), x, 1)?;
        let u = tape.upsample2x(d1);
        let x = tape.concat(&[u, e3])?;
        let d2 = conv_act(tape, p, &n("d2"), x, 1)?;
        let u = tape.upsample2x(d2);
        let x = tape.concat(&[u, e2])?;
        let d3 = conv_act(tape, p, &n("d3"), x, 1)?;
        let u = tape.upsample2x(d3);
        let x = tape.concat(&[u, e1])?;
        let d4 = conv_act(tape, p, &n("d4"), x, 1)?;
        let d5 = conv_act(tape, p, &n("d5"), d4, 1)?;
        let d6 = conv_act(tape, p, &n("d6"), d5, 1)?;

        let mut levels = Vec::with_capacity(LEVELS);
        for (l, feat) in [d1, d2, d3, d6].into_iter().enumerate() {
            levels.push(conv(tape, p, &n(&format!("flow{l}")), feat, Conv2dCfg::SAME3)?);
        }
        let mut masks = Vec::with_capacity(LEVELS - 1);
        for (l, feat) in [d1, d2, d3].into_iter().enumerate() {
            masks.push(conv(tape, p, &n(&format!("mask{l}")), feat, Conv2dCfg::POINTWISE)?);
        }
        let mut upsampled = Vec::with_capacity(LEVELS);
        for (l, &f) in levels.iter().enumerate() {
            let mut cur = f;
            for m in &masks[l..] {
                cur = tape.convex_upsample(cur, *m, UPSAMPLE_FACTOR)?;
            }
            upsampled.push(cur);
        }
        Ok(FlowPyramid { levels, masks, upsampled })
    }

    /// Final full-resolution flow for one input, without gradients.
    pub fn predict(&self, store: &ParamStore, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let p = store.bind(&mut tape, WARP_PREFIX, false);
        let x = tape.constant(input.clone());
        let pyr = self.forward(&mut tape, &p, x)?;
        let flow = tape.value(pyr.upsampled[LEVELS - 1]).clone();
        if !flow.all_finite() {
            return Err(CoreError::invalid("flow network produced non-finite values"));
        }
        Ok(flow)
    }
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c, h, w] => (*c, *h, *w),
        _ => (0, 0, 0),
    }
}

/// Convex upsampling of a `C×h×w` field by `factor` with `(9·factor²)×h×w` logits.
pub fn convex_upsample(flow: &Tensor<f32>, logits: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = flow.chw()?;
    if factor == 0 || logits.shape() != [kernels::convex_mask_channels(factor), h, w] {
        return Err(CoreError::invalid(format!(
            "mask logits {:?} do not align with flow {:?} at factor {factor}",
            logits.shape(),
            flow.shape()
        )));
    }
    let data = kernels::convex_upsample_forward(c, h, w, factor, flow.data(), logits.data());
    Ok(Tensor::from_vec(&[c, h * factor, w * factor], data)?)
}

/// Softmax weights over the 3×3 coarse neighbourhood (row-major, centre at 4)
/// used for sub-pixel `(sy, sx)` of coarse pixel `(y, x)`.
pub fn convex_weights(logits: &Tensor<f32>, factor: usize, y: usize, x: usize, sy: usize, sx: usize) -> Result<[f32; 9]> {
    let (c, h, w) = logits.chw()?;
    if factor == 0 || c != kernels::convex_mask_channels(factor) || y >= h || x >= w || sy >= factor || sx >= factor {
        return Err(CoreError::invalid("convex weight query out of range"));
    }
    Ok(kernels::convex_weights(
        logits.data(),
        h * w,
        factor * factor,
        sy * factor + sx,
        y * w + x,
    ))
}

/// Backward warp: output at `q` samples `image` bilinearly at `q + flow(q)`,
/// clamped to the border.
pub fn warp_image<T: Scalar>(image: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    if flow.shape() != [2, h, w] {
        return Err(CoreError::invalid(format!(
            "flow {:?} does not fit image {:?}",
            flow.shape(),
            image.shape()
        )));
    }
    let data = kernels::warp_forward(c, h, w, image.data(), flow.data());
    Ok(Tensor::from_vec(&[c, h, w], data)?)
}

/// Thin-plate spline mapping target-pose points to appearance points.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsWarp {
    pub control_dst: Vec<[f64; 2]>,
    pub control_src: Vec<[f64; 2]>,
    /// Rows `[a0, ax, ay]` for x and y.
    pub affine: [[f64; 3]; 2],
    pub weights: Vec<[f64; 2]>,
    pub lambda: f64,
    /// The system was degenerate and solved with a ridge term.
    pub regularized: bool,
}

pub const TPS_MIN_RIDGE: f64 = 1e-6;

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

fn degenerate(points: &[[f64; 2]]) -> bool {
    let n = points.len();
    if n < 3 {
        return true;
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = (points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]);
            if d < 1e-9 {
                return true;
            }
        }
    }
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let smallest = tr / 2.0 - disc;
    smallest <= 1e-9 * tr.max(1e-300)
}

/// Solves the thin-plate system mapping `dst[i]` to `src[i]`.
pub fn fit_tps(dst: &[[f64; 2]], src: &[[f64; 2]], lambda: f64) -> Result<TpsWarp> {
    let n = dst.len();
    if n != src.len() || n == 0 {
        return Err(CoreError::invalid("TPS needs equally many nonzero control points"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) || dst.iter().chain(src).flatten().any(|v| !v.is_finite()) {
        return Err(CoreError::invalid("TPS inputs must be finite and lambda nonnegative"));
    }
    let regularized = degenerate(dst);
    let lambda = if regularized { lambda.max(TPS_MIN_RIDGE) } else { lambda };
    let m = n + 3;
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            let dx = dst[i][0] - dst[j][0];
            let dy = dst[i][1] - dst[j][1];
            a[(i, j)] = tps_kernel(dx * dx + dy * dy);
        }
        a[(i, i)] += lambda;
        let row = [1.0, dst[i][0], dst[i][1]];
        for (c, v) in row.into_iter().enumerate() {
            a[(i, n + c)] = v;
            a[(n + c, i)] = v;
        }
    }
    let mut b = DMatrix::<f64>::zeros(m, 2);
    for i in 0..n {
        b[(i, 0)] = src[i][0];
        b[(i, 1)] = src[i][1];
    }
    let sol = if regularized {
        let svd = a.svd(true, true);
        svd.solve(&b, 1e-10)
            .map_err(|e| CoreError::invalid(format!("TPS least squares failed: {e}")))?
    } else {
        a.clone().lu().solve(&b).ok_or_else(|| CoreError::invalid("TPS system is singular"))?
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::invalid("TPS solve produced non-finite coefficients"));
    }
    let weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
        [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
    ];
    Ok(TpsWarp {
        control_dst: dst.to_vec(),
        control_src: src.to_vec(),
        affine,
        weights,
        lambda,
        regularized,
    })
}

impl TpsWarp {
    /// Maps a target-frame point into the appearance frame.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [
            self.affine[0][0] + self.affine[0][1] * p[0] + self.affine[0][2] * p[1],
            self.affine[1][0] + self.affine[1][1] * p[0] + self.affine[1][2] * p[1],
        ];
        for (c, wt) in self.control_dst.iter().zip(&self.weights) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let u = tps_kernel(dx * dx + dy * dy);
            out[0] += wt[0] * u;
            out[1] += wt[1] * u;
        }
        out
    }

    /// Largest control-point residual in pixels.
    pub fn max_residual(&self) -> f64 {
        self.control_dst
            .iter()
            .zip(&self.control_src)
            .map(|(d, s)| {
                let m = self.apply(*d);
                (m[0] - s[0]).hypot(m[1] - s[1])
            })
            .fold(0.0, f64::max)
    }
}

/// Dense backward flow `apply(q) - q` on the pixel grid.
pub fn tps_flow(tps: &TpsWarp, h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0.0f32; 2 * plane];
    for y in 0..h {
        for x in 0..w {
            let m = tps.apply([x as f64, y as f64]);
            data[y * w + x] = (m[0] - x as f64) as f32;
            data[plane + y * w + x] = (m[1] - y as f64) as f32;
        }
    }
    Tensor::from_vec(&[2, h, w], data).expect("flow shape")
}

pub fn tps_flow_for(c: &Correspondences, h: usize, w: usize) -> Result<Tensor<f32>> {
    Ok(tps_flow(&fit_tps(&c.p.points, &c.a.points, 0.0)?, h, w))
}

/// The TPS baseline: warp `I_a` so that `P_a` lands on `P_p`.
pub fn tps_warp_image(appearance: &ImageTensor, points_a: &[[f64; 2]], points_p: &[[f64; 2]]) -> Result<ImageTensor> {
    let (_, h, w) = appearance.chw()?;
    let tps = fit_tps(points_p, points_a, 0.0)?;
    warp_image(appearance, &tps_flow(&tps, h, w))
}

const FLOW_MAGIC: &[u8; 4] = b"RPFL";

pub fn encode_flow(flow: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = flow.chw()?;
    if c != 2 {
        return Err(CoreError::invalid(format!("flow must have 2 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(12 + 4 * flow.len());
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(CoreError::invalid("not a flow dump"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = h.checked_mul(w).and_then(|p| p.checked_mul(8));
    if expected != Some(bytes.len() - 12) {
        return Err(CoreError::invalid(format!("flow dump header {h}×{w} does not match payload")));
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::from_vec(&[2, h, w], data)?)
}

pub fn save_flow(flow: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_flow(flow)?).map_err(|e| CoreError::io(path, e))
}

pub fn load_flow(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_flow(&bytes).map_err(|e| CoreError::format(path, e.to_string()))
}
