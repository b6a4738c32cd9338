//! Patch descriptors with salience, plus the fixed convolutional feature
//! pyramid shared by the perceptual losses and the metrics.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repose_tensor::{Conv2dCfg, Scalar, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::image::{background_value, ImageTensor, Mask};

pub const PATCH: usize = 8;

/// `rows × cols` grid of `dim`-dimensional descriptors with per-cell salience.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    grid: Vec<f32>,
    salience: Vec<f32>,
}

impl DescriptorGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, grid: Vec<f32>, salience: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(CoreError::invalid("descriptor grid dimensions must be positive"));
        }
        if grid.len() != rows * cols * dim || salience.len() != rows * cols {
            return Err(CoreError::invalid(format!("descriptor payload does not match {rows}×{cols}×{dim}")));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("non-finite descriptor value"));
        }
        if salience.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(CoreError::invalid("salience outside [0, 1]"));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            grid,
            salience,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Descriptor of flat cell index `rows-major`.
    pub fn descriptor(&self, cell: usize) -> &[f32] {
        &self.grid[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn salience(&self, cell: usize) -> f32 {
        self.salience[cell]
    }

    pub fn salience_map(&self) -> &[f32] {
        &self.salience
    }

    pub fn is_all_background(&self) -> bool {
        self.salience.iter().all(|&s| s == 0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.grid.len() + self.salience.len()));
        out.extend_from_slice(GRID_MAGIC);
        for v in [self.dim, self.rows, self.cols] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
        for v in self.grid.iter().chain(&self.salience) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != GRID_MAGIC {
            return Err(CoreError::invalid("not a descriptor grid file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (dim, rows, cols, dtype) = (word(0), word(1), word(2), word(3) as u32);
        if dtype != DTYPE_F32_LE {
            return Err(CoreError::invalid(format!("unsupported descriptor dtype {dtype}")));
        }
        let cells = rows.checked_mul(cols).ok_or_else(|| CoreError::invalid("grid size overflow"))?;
        let floats = cells
            .checked_mul(dim)
            .and_then(|g| g.checked_add(cells))
            .ok_or_else(|| CoreError::invalid("grid size overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if floats.checked_mul(4) != Some(payload.len()) {
            return Err(CoreError::invalid(format!(
                "header declares D={dim}, {rows}×{cols} but payload holds {} bytes",
                payload.len()
            )));
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let (grid, salience) = values.split_at(cells * dim);
        Self::new(rows, cols, dim, grid.to_vec(), salience.to_vec())
    }
}

const GRID_MAGIC: &[u8; 4] = b"RPDG";
const DTYPE_F32_LE: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn save_precomputed(grid: &DescriptorGrid, path: &Path) -> Result<()> {
    fs::write(path, grid.to_bytes()).map_err(|e| CoreError::io(path, e))
}

pub fn load_precomputed(path: &Path) -> Result<DescriptorGrid> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    DescriptorGrid::from_bytes(&bytes).map_err(|e| CoreError::format(path, e.to_string()))
}

pub trait DescriptorBackend {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, image: &ImageTensor, mask: Option<&Mask>) -> Result<DescriptorGrid>;
}

/// Seeded random 3×3 filter bank applied inside each 8×8 patch, rectified and
/// mean-pooled per patch. Pixels never cross patch borders, so an 8-pixel
/// image shift moves the grid by exactly one cell.
#[derive(Clone, Debug)]
pub struct ToyBackend {
    seed: u64,
    dim: usize,
    filters: Vec<f32>,
}

impl ToyBackend {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, Self::DEFAULT_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = Tensor::<f32>::randn(&[dim, 27], (1.0f64 / 27.0).sqrt(), &mut rng).into_data();
        Self { seed, dim, filters }
    }
}

impl DescriptorBackend for ToyBackend {
    fn name(&self) -> String {
        format!("toy-d{}-s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &ImageTensor, mask: Option<&Mask>) -> Result<DescriptorGrid> {
        let (_, h, w) = check_input(image)?;
        let mask = resolve_mask(image, mask)?;
        let (rows, cols) = (h / PATCH, w / PATCH);
        let bg = background_value();
        let px = |ch: usize, y: usize, x: usize| image.data()[(ch * h + y) * w + x] - bg;
        let inner = PATCH - 2;
        let mut grid = Vec::with_capacity(rows * cols * self.dim);
        let mut salience = Vec::with_capacity(rows * cols);
        let mut window = [0.0f32; 27];
        for r in 0..rows {
            for cc in 0..cols {
                let (y0, x0) = (r * PATCH, cc * PATCH);
                let mut acc = vec![0.0f32; self.dim];
                for oy in 0..inner {
                    for ox in 0..inner {
                        for ch in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    window[(ch * 3 + ky) * 3 + kx] = px(ch, y0 + oy + ky, x0 + ox + kx);
                                }
                            }
                        }
                        for (f, a) in acc.iter_mut().enumerate() {
                            let k = &self.filters[f * 27..(f + 1) * 27];
                            let v: f32 = k.iter().zip(&window).map(|(a, b)| a * b).sum();
                            *a += v.max(0.0);
                        }
                    }
                }
                let n = (inner * inner) as f32;
                grid.extend(acc.into_iter().map(|v| v / n));
                salience.push(coverage(&mask, r, cc));
            }
        }
        DescriptorGrid::new(rows, cols, self.dim, grid, salience)
    }
}

fn check_input(image: &ImageTensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(CoreError::invalid(format!("descriptor input needs 3 channels, got {c}")));
    }
    if h % PATCH != 0 || w % PATCH != 0 || h == 0 || w == 0 {
        return Err(CoreError::invalid(format!("image {h}×{w} is not a multiple of {PATCH}")));
    }
    Ok((c, h, w))
}

fn resolve_mask(image: &ImageTensor, mask: Option<&Mask>) -> Result<Mask> {
    let (_, h, w) = image.chw()?;
    match mask {
        Some(m) if m.height != h || m.width != w => Err(CoreError::invalid("mask size differs from image")),
        Some(m) => Ok(m.clone()),
        None => Mask::from_background(image),
    }
}

/// Fraction of foreground pixels in cell `(r, c)`.
fn coverage(mask: &Mask, r: usize, c: usize) -> f32 {
    let fg = (0..PATCH * PATCH)
        .filter(|i| mask.get(r * PATCH + i / PATCH, c * PATCH + i % PATCH))
        .count();
    fg as f32 / (PATCH * PATCH) as f32
}

/// Colour-blind variant of [`ToyBackend`]: random filters see only the
/// silhouette and the shading (luma relative to the object's mean luma), and
/// a second random bank mixes the coverage and shading of the surrounding
/// `(2r+1)²` cells. Different objects of one class share shape and lighting
/// far more than colour, so this matches across instances.
#[derive(Clone, Debug)]
pub struct ShapeBackend {
    seed: u64,
    local: Vec<f32>,
    context: Vec<f32>,
    radius: usize,
}

impl ShapeBackend {
    pub const LOCAL_DIM: usize = 32;
    pub const CONTEXT_DIM: usize = 32;
    pub const RADIUS: usize = 2;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Self::RADIUS;
        let n = 2 * (2 * r + 1) * (2 * r + 1);
        let local = Tensor::<f32>::randn(&[Self::LOCAL_DIM, 18], (1.0f64 / 18.0).sqrt(), &mut rng).into_data();
        let context = Tensor::<f32>::randn(&[Self::CONTEXT_DIM, n], (1.0 / n as f64).sqrt(), &mut rng).into_data();
        Self {
            seed,
            local,
            context,
            radius: r,
        }
    }
}

impl DescriptorBackend for ShapeBackend {
    fn name(&self) -> String {
        format!("shape-d{}-s{}", self.dim(), self.seed)
    }

    fn dim(&self) -> usize {
        Self::LOCAL_DIM + Self::CONTEXT_DIM
    }

    fn extract(&self, image: &ImageTensor, mask: Option<&Mask>) -> Result<DescriptorGrid> {
        let (_, h, w) = check_input(image)?;
        let mask = resolve_mask(image, mask)?;
        let plane = h * w;
        let luma: Vec<f32> = (0..plane)
            .map(|p| 0.299 * image.data()[p] + 0.587 * image.data()[plane + p] + 0.114 * image.data()[2 * plane + p])
            .collect();
        let fg = mask.count();
        let mean = if fg == 0 {
            0.0
        } else {
            (0..plane).filter(|&p| mask.data[p]).map(|p| luma[p]).sum::<f32>() / fg as f32
        };
        // channel 0: silhouette, channel 1: shading
        let maps = [
            mask.data.iter().map(|&m| m as u8 as f32).collect::<Vec<f32>>(),
            (0..plane).map(|p| if mask.data[p] { luma[p] - mean } else { 0.0 }).collect(),
        ];
        let (rows, cols) = (h / PATCH, w / PATCH);
        let mut cell_cov = vec![0.0f32; rows * cols];
        let mut cell_shade = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                cell_cov[r * cols + c] = coverage(&mask, r, c);
                let mut acc = 0.0;
                for i in 0..PATCH * PATCH {
                    acc += maps[1][(r * PATCH + i / PATCH) * w + c * PATCH + i % PATCH];
                }
                cell_shade[r * cols + c] = acc / (PATCH * PATCH) as f32;
            }
        }
        let inner = PATCH - 2;
        let side = 2 * self.radius + 1;
        let mut grid = Vec::with_capacity(rows * cols * self.dim());
        let mut window = [0.0f32; 18];
        let mut neigh = vec![0.0f32; 2 * side * side];
        for r in 0..rows {
            for c in 0..cols {
                let (y0, x0) = (r * PATCH, c * PATCH);
                let mut acc = [0.0f32; Self::LOCAL_DIM];
                for oy in 0..inner {
                    for ox in 0..inner {
                        for (ch, m) in maps.iter().enumerate() {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    window[(ch * 3 + ky) * 3 + kx] = m[(y0 + oy + ky) * w + x0 + ox + kx];
                                }
                            }
                        }
                        for (f, a) in acc.iter_mut().enumerate() {
                            let k = &self.local[f * 18..(f + 1) * 18];
                            *a += k.iter().zip(&window).map(|(p, q)| p * q).sum::<f32>().max(0.0);
                        }
                    }
                }
                grid.extend(acc.iter().map(|v| v / (inner * inner) as f32));
                for dy in 0..side {
                    for dx in 0..side {
                        let (rr, cc) = ((r + dy) as isize - self.radius as isize, (c + dx) as isize - self.radius as isize);
                        let inside = rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols;
                        let idx = if inside { rr as usize * cols + cc as usize } else { 0 };
                        neigh[dy * side + dx] = if inside { cell_cov[idx] } else { 0.0 };
                        neigh[side * side + dy * side + dx] = if inside { cell_shade[idx] } else { 0.0 };
                    }
                }
                let n = neigh.len();
                for f in 0..Self::CONTEXT_DIM {
                    let k = &self.context[f * n..(f + 1) * n];
                    grid.push(k.iter().zip(&neigh).map(|(p, q)| p * q).sum());
                }
            }
        }
        let salience = cell_cov;
        DescriptorGrid::new(rows, cols, self.dim(), grid, salience)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Frozen random conv pyramid. Each stage is conv → leaky ReLU and feeds the
/// next; every stage output is a feature map.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    id: String,
    stages: Vec<StageSpec>,
    weights: Vec<Tensor<f32>>,
    biases: Vec<Tensor<f32>>,
}

impl FeatureExtractor {
    pub const DEFAULT_SEED: u64 = 0xFEA7;

    /// Three stages, 3→8→16→32 channels at strides 1, 2, 2.
    pub fn standard(seed: u64) -> Self {
        let stages = [(8, 1), (16, 2), (32, 2)].map(|(out_channels, stride)| StageSpec {
            out_channels,
            kernel: 3,
            stride,
        });
        Self::new(seed, &stages)
    }

    pub fn new(seed: u64, stages: &[StageSpec]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for s in stages {
            let fan_in = (in_c * s.kernel * s.kernel) as f64;
            weights.push(Tensor::randn(
                &[s.out_channels, in_c, s.kernel, s.kernel],
                (2.0 / fan_in).sqrt(),
                &mut rng,
            ));
            biases.push(Tensor::randn(&[s.out_channels], 0.05, &mut rng));
            in_c = s.out_channels;
        }
        let desc: Vec<String> = stages.iter().map(|s| format!("{}k{}s{}", s.out_channels, s.kernel, s.stride)).collect();
        Self {
            id: format!("fixed-conv[{}]-seed{seed}", desc.join(",")),
            stages: stages.to_vec(),
            weights,
            biases,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    /// Records the pyramid on `tape`; the extractor's own weights are constants.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (i, s) in self.stages.iter().enumerate() {
            let w = tape.constant(self.weights[i].cast());
            let b = tape.constant(self.biases[i].cast());
            let cfg = Conv2dCfg {
                stride: s.stride,
                pad: s.kernel / 2,
            };
            let y = tape.conv2d(cur, w, Some(b), cfg)?;
            cur = tape.leaky_relu(y, T::lit(0.2));
            out.push(cur);
        }
        Ok(out)
    }

    /// Plain evaluation without keeping a graph around.
    pub fn eval(&self, image: &ImageTensor) -> Result<Vec<Tensor<f32>>> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.clone());
        let feats = self.features(&mut tape, x)?;
        Ok(feats.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Spatially averaged last-stage features.
    pub fn pooled(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let last = self.eval(image)?.pop().ok_or_else(|| CoreError::invalid("empty extractor"))?;
        let (c, h, w) = last.chw()?;
        Ok((0..c)
            .map(|ch| last.data()[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
            .collect())
    }
}
