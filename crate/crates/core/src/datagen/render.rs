//! Orthographic z-buffer rasteriser with flat shading and solid textures.

use serde::{Deserialize, Serialize};

use super::mesh::{Mesh, Vec3};
use crate::image::{background_value, quantize, ImageTensor, Mask};
use repose_tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Stripes { axis: usize, freq: f64 },
    Checker { freq: f64 },
    Rings { freq: f64 },
}

/// Solid texture evaluated in object space, so it moves with the object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub pattern: Pattern,
    /// Mix weight of the accent colour where the pattern is "on".
    pub contrast: f64,
    pub logo_center: Vec3,
    pub logo_radius: f64,
    pub logo_color: [f64; 3],
}

impl TextureSpec {
    pub fn color_at(&self, p: Vec3) -> [f64; 3] {
        let d = [p[0] - self.logo_center[0], p[1] - self.logo_center[1], p[2] - self.logo_center[2]];
        if (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() < self.logo_radius {
            return self.logo_color;
        }
        let on = match self.pattern {
            Pattern::Stripes { axis, freq } => (p[axis] * freq).rem_euclid(1.0) < 0.5,
            Pattern::Checker { freq } => {
                let s: i64 = p.iter().map(|&v| (v * freq).floor() as i64).sum();
                s.rem_euclid(2) == 0
            }
            Pattern::Rings { freq } => ((p[0] * p[0] + p[2] * p[2]).sqrt() * freq + p[1] * freq).rem_euclid(1.0) < 0.5,
        };
        if on {
            let t = self.contrast;
            [
                self.base[0] * (1.0 - t) + self.accent[0] * t,
                self.base[1] * (1.0 - t) + self.accent[1] * t,
                self.base[2] * (1.0 - t) + self.accent[2] * t,
            ]
        } else {
            self.base
        }
    }
}

/// Rotation `Rz · Ry · Rx` for Euler angles in degrees.
pub fn rotation(euler_deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = euler_deg.map(f64::to_radians);
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

const LIGHT: Vec3 = [-0.32, 0.55, 0.77];
const AMBIENT: f64 = 0.35;

/// Renders `mesh` rotated by `euler_deg` into an `h × w` image on the
/// background gray. The view volume is `[-1, 1]²`, looking down −z.
pub fn rasterize(mesh: &Mesh, texture: &TextureSpec, euler_deg: [f64; 3], h: usize, w: usize) -> (ImageTensor, Mask) {
    let rot = rotation(euler_deg);
    let verts: Vec<Vec3> = mesh.vertices.iter().map(|&v| apply(&rot, v)).collect();
    let to_px = |v: Vec3| [(v[0] + 1.0) * 0.5 * w as f64, (1.0 - v[1]) * 0.5 * h as f64];
    let screen: Vec<[f64; 2]> = verts.iter().map(|&v| to_px(v)).collect();

    let mut depth = vec![f64::NEG_INFINITY; h * w];
    let mut hit: Vec<Option<(usize, [f64; 3])>> = vec![None; h * w];
    for (ti, t) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = t.map(|i| i as usize);
        let (pa, pb, pc) = (screen[a], screen[b], screen[c]);
        let area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]);
        if area.abs() < 1e-12 {
            continue;
        }
        let x0 = pa[0].min(pb[0]).min(pc[0]).floor().max(0.0) as usize;
        let x1 = (pa[0].max(pb[0]).max(pc[0]).ceil() as usize).min(w);
        let y0 = pa[1].min(pb[1]).min(pc[1]).floor().max(0.0) as usize;
        let y1 = (pa[1].max(pb[1]).max(pc[1]).ceil() as usize).min(h);
        for py in y0..y1 {
            for px in x0..x1 {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let w0 = ((pb[0] - p[0]) * (pc[1] - p[1]) - (pb[1] - p[1]) * (pc[0] - p[0])) / area;
                let w1 = ((pc[0] - p[0]) * (pa[1] - p[1]) - (pc[1] - p[1]) * (pa[0] - p[0])) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = w0 * verts[a][2] + w1 * verts[b][2] + w2 * verts[c][2];
                let idx = py * w + px;
                if z > depth[idx] {
                    depth[idx] = z;
                    hit[idx] = Some((ti, [w0, w1, w2]));
                }
            }
        }
    }

    let light_norm = (LIGHT[0] * LIGHT[0] + LIGHT[1] * LIGHT[1] + LIGHT[2] * LIGHT[2]).sqrt();
    let light = LIGHT.map(|v| v / light_norm);
    let plane = h * w;
    let bg = background_value();
    let mut data = vec![bg; 3 * plane];
    let mut mask = Mask::new(h, w);
    for (idx, entry) in hit.iter().enumerate() {
        let Some((ti, bary)) = *entry else { continue };
        let [a, b, c] = mesh.triangles[ti].map(|i| i as usize);
        let e1 = sub(verts[b], verts[a]);
        let e2 = sub(verts[c], verts[a]);
        let n = cross(e1, e2);
        let nl = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-12);
        let lambert = ((n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / nl).abs();
        let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
        let (va, vb, vc) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
        let obj = [0, 1, 2].map(|k| bary[0] * va[k] + bary[1] * vb[k] + bary[2] * vc[k]);
        let col = texture.color_at(obj);
        for ch in 0..3 {
            data[ch * plane + idx] = (col[ch] * shade).clamp(0.0, 1.0) as f32;
        }
        mask.data[idx] = true;
    }
    let image = Tensor::from_vec(&[3, h, w], data).expect("render buffer shape");
    (quantize(&image), mask)
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation([37.0, 121.0, 88.0]);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
