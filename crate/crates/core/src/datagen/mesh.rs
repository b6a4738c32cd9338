//! Procedural watertight meshes: extruded outlines and surfaces of revolution.

use std::f64::consts::PI;

use rand::Rng;

pub type Vec3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    /// Number of connected components under shared-vertex adjacency.
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for t in &self.triangles {
            for e in 0..2 {
                let a = find(&mut parent, t[e] as usize);
                let b = find(&mut parent, t[e + 1] as usize);
                parent[a] = b;
            }
        }
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        let mut roots: Vec<usize> = (0..self.vertices.len()).filter(|&i| used[i]).map(|i| find(&mut parent, i)).collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    /// Every undirected edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut edges = std::collections::BTreeMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0u32) += 1;
            }
        }
        edges.values().all(|&n| n == 2)
    }

    /// Centres the bounding box on the origin and scales so every vertex lies
    /// within `radius`.
    pub fn normalize(&mut self, radius: f64) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
        let mut max_r: f64 = 0.0;
        for v in &mut self.vertices {
            for a in 0..3 {
                v[a] -= centre[a];
            }
            max_r = max_r.max((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
        }
        if max_r > 0.0 {
            let s = radius / max_r;
            for v in &mut self.vertices {
                for c in v.iter_mut() {
                    *c *= s;
                }
            }
        }
    }
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0
}

/// Ear-clipping triangulation of a simple counter-clockwise polygon.
pub fn triangulate(poly: &[[f64; 2]]) -> Vec<[usize; 3]> {
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut out = Vec::new();
    let mut guard = 0;
    while idx.len() > 3 && guard < 10 * poly.len() * poly.len() {
        guard += 1;
        let n = idx.len();
        let mut clipped = false;
        for i in 0..n {
            let (ia, ib, ic) = (idx[(i + n - 1) % n], idx[i], idx[(i + 1) % n]);
            let (a, b, c) = (poly[ia], poly[ib], poly[ic]);
            if cross(a, b, c) <= 1e-12 {
                continue;
            }
            let blocked = idx
                .iter()
                .filter(|&&j| j != ia && j != ib && j != ic)
                .any(|&j| in_triangle(poly[j], a, b, c));
            if !blocked {
                out.push([ia, ib, ic]);
                idx.remove(i);
                clipped = true;
                break;
            }
        }
        if !clipped {
            break;
        }
    }
    if idx.len() == 3 {
        out.push([idx[0], idx[1], idx[2]]);
    }
    out
}

/// Extrudes an outline in the x–y plane along z over `[-depth/2, depth/2]`.
pub fn extrude(outline: &[[f64; 2]], depth: f64) -> Mesh {
    let mut poly = outline.to_vec();
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    let n = poly.len();
    let half = depth / 2.0;
    let mut vertices = Vec::with_capacity(2 * n);
    for p in &poly {
        vertices.push([p[0], p[1], half]);
    }
    for p in &poly {
        vertices.push([p[0], p[1], -half]);
    }
    let mut triangles = Vec::new();
    for t in triangulate(&poly) {
        triangles.push([t[0] as u32, t[1] as u32, t[2] as u32]);
        triangles.push([(t[0] + n) as u32, (t[2] + n) as u32, (t[1] + n) as u32]);
    }
    for i in 0..n {
        let j = (i + 1) % n;
        let (fi, fj, bi, bj) = (i as u32, j as u32, (i + n) as u32, (j + n) as u32);
        triangles.push([fi, bi, bj]);
        triangles.push([fi, bj, fj]);
    }
    Mesh { vertices, triangles }
}

/// Surface of revolution about the y axis for a radius profile sampled
/// bottom to top, closed by two cap vertices.
pub fn lathe(profile: &[(f64, f64)], slices: usize) -> Mesh {
    let rings = profile.len();
    let mut vertices = Vec::with_capacity(rings * slices + 2);
    for &(y, r) in profile {
        for s in 0..slices {
            let a = 2.0 * PI * s as f64 / slices as f64;
            vertices.push([r * a.cos(), y, r * a.sin()]);
        }
    }
    let bottom = vertices.len() as u32;
    vertices.push([0.0, profile[0].0, 0.0]);
    let top = vertices.len() as u32;
    vertices.push([0.0, profile[rings - 1].0, 0.0]);
    let at = |ring: usize, s: usize| (ring * slices + s % slices) as u32;
    let mut triangles = Vec::new();
    for ring in 0..rings - 1 {
        for s in 0..slices {
            triangles.push([at(ring, s), at(ring + 1, s), at(ring + 1, s + 1)]);
            triangles.push([at(ring, s), at(ring + 1, s + 1), at(ring, s + 1)]);
        }
    }
    for s in 0..slices {
        triangles.push([bottom, at(0, s), at(0, s + 1)]);
        triangles.push([top, at(rings - 1, s + 1), at(rings - 1, s)]);
    }
    Mesh { vertices, triangles }
}

fn jitter<R: Rng>(rng: &mut R, base: f64, spread: f64) -> f64 {
    base * (1.0 + rng.random_range(-spread..spread))
}

/// Sole, toe cap and raised heel collar seen from the side; toe points +x.
pub fn shoe<R: Rng>(rng: &mut R) -> Mesh {
    let len = jitter(rng, 1.8, 0.1);
    let sole = jitter(rng, 0.18, 0.2);
    let collar = jitter(rng, 0.75, 0.15);
    let toe_h = jitter(rng, 0.35, 0.2);
    let heel_x = -len / 2.0;
    let toe_x = len / 2.0;
    let outline = [
        [heel_x, 0.0],
        [toe_x - 0.1, 0.0],
        [toe_x, sole],
        [toe_x - 0.05, toe_h],
        [toe_x - 0.45 * len, toe_h + 0.08],
        [heel_x + 0.35 * len, collar * 0.8],
        [heel_x + 0.12 * len, collar],
        [heel_x, collar * 0.95],
    ];
    extrude(&outline, jitter(rng, 0.6, 0.15))
}

/// Flat case with an off-centre handle on top.
pub fn briefcase<R: Rng>(rng: &mut R) -> Mesh {
    let w = jitter(rng, 1.6, 0.1);
    let h = jitter(rng, 1.1, 0.1);
    let hw = jitter(rng, 0.45, 0.15);
    let hh = jitter(rng, 0.25, 0.2);
    let off = w * rng.random_range(0.05..0.15);
    let (l, r) = (-w / 2.0, w / 2.0);
    let outline = [
        [l, 0.0],
        [r, 0.0],
        [r, h],
        [off + hw / 2.0, h],
        [off + hw / 2.0 - 0.04, h + hh],
        [off - hw / 2.0 + 0.04, h + hh],
        [off - hw / 2.0, h],
        [l, h],
    ];
    extrude(&outline, jitter(rng, 0.4, 0.2))
}

/// Tall cabinet with an overhanging top and a recessed plinth.
pub fn cabinet<R: Rng>(rng: &mut R) -> Mesh {
    let w = jitter(rng, 0.9, 0.1);
    let h = jitter(rng, 1.8, 0.1);
    let lip = jitter(rng, 0.06, 0.3);
    let plinth = jitter(rng, 0.1, 0.3);
    let inset = jitter(rng, 0.05, 0.3);
    let (l, r) = (-w / 2.0, w / 2.0);
    let outline = [
        [l + inset, 0.0],
        [r - inset, 0.0],
        [r - inset, plinth],
        [r, plinth],
        [r, h - lip],
        [r + lip, h - lip],
        [r + lip, h],
        [l - lip, h],
        [l - lip, h - lip],
        [l, h - lip],
        [l, plinth],
        [l + inset, plinth],
    ];
    extrude(&outline, jitter(rng, 0.8, 0.15))
}

/// Bulbous body, narrow neck and flared lip.
pub fn vase<R: Rng>(rng: &mut R) -> Mesh {
    let height = jitter(rng, 1.8, 0.1);
    let belly = jitter(rng, 0.55, 0.15);
    let neck = jitter(rng, 0.2, 0.2);
    let lip = jitter(rng, 0.32, 0.2);
    let belly_at = rng.random_range(0.25..0.45);
    let foot = jitter(rng, 0.3, 0.2);
    let rings = 14;
    let profile: Vec<(f64, f64)> = (0..rings)
        .map(|i| {
            let t = i as f64 / (rings - 1) as f64;
            let r = if t < belly_at {
                foot + (belly - foot) * (t / belly_at * PI / 2.0).sin()
            } else if t < 0.85 {
                let u = (t - belly_at) / (0.85 - belly_at);
                neck + (belly - neck) * 0.5 * (1.0 + (u * PI).cos())
            } else {
                let u = (t - 0.85) / 0.15;
                neck + (lip - neck) * u * u
            };
            (t * height, r)
        })
        .collect();
    lathe(&profile, 18)
}
