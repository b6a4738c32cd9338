//! Image tensors and PNG I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Seek};
use std::path::Path;

use repose_tensor::Tensor;

use crate::error::{CoreError, Result};

/// `3 × H × W` raster with values in `[0, 1]`.
pub type ImageTensor = Tensor<f32>;

/// Solid mid-gray used behind every rendered object.
pub const BACKGROUND: u8 = 128;

pub fn background_value() -> f32 {
    BACKGROUND as f32 / 255.0
}

/// Binary foreground mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Pixels whose colour differs from the background gray.
    pub fn from_background(image: &ImageTensor) -> Result<Self> {
        let (c, h, w) = image.chw()?;
        let bg = background_value();
        let plane = h * w;
        let data = (0..plane)
            .map(|p| (0..c).any(|ch| (image.data()[ch * plane + p] - bg).abs() > 0.5 / 255.0))
            .collect();
        Ok(Self { height: h, width: w, data })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantises to 8 bits and back, matching what a PNG round trip stores.
pub fn quantize(image: &ImageTensor) -> ImageTensor {
    image.map(|v| to_u8(v) as f32 / 255.0)
}

pub fn image_from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<ImageTensor> {
    if rgb.len() != height * width * 3 {
        return Err(CoreError::invalid("rgb buffer size mismatch"));
    }
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, height, width], data)?)
}

pub fn image_to_rgb8(image: &ImageTensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(CoreError::invalid(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = vec![0u8; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            out[p * 3 + ch] = to_u8(image.data()[ch * plane + p]);
        }
    }
    Ok(out)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| CoreError::format(path, e.to_string()))?;
    writer.write_image_data(data).map_err(|e| CoreError::format(path, e.to_string()))?;
    writer.finish().map_err(|e| CoreError::format(path, e.to_string()))
}

pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (_, h, w) = image.chw()?;
    write_png(path, w, h, png::ColorType::Rgb, &image_to_rgb8(image)?)
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path, mask.width, mask.height, png::ColorType::Grayscale, &data)
}

/// Decodes any 8-bit-representable PNG into `(height, width, channels, bytes)`.
/// `path` only labels errors.
fn read_png<R: BufRead + Seek>(input: R, path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(input);
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| CoreError::format(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| CoreError::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| CoreError::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.height as usize, info.width as usize, channels, buf))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CoreError::io(path, e))
}

fn to_image(path: &Path, (h, w, channels, buf): (usize, usize, usize, Vec<u8>)) -> Result<ImageTensor> {
    let rgb: Vec<u8> = match channels {
        1 | 2 => buf.chunks(channels).flat_map(|p| [p[0]; 3]).collect(),
        3 | 4 => buf.chunks(channels).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        n => return Err(CoreError::format(path, format!("unsupported channel count {n}"))),
    };
    image_from_rgb8(h, w, &rgb)
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    to_image(path, read_png(open(path)?, path)?)
}

/// Decodes PNG bytes held in memory.
pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let label = Path::new("<memory>");
    to_image(label, read_png(Cursor::new(bytes), label)?)
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let (h, w, channels, buf) = read_png(open(path)?, path)?;
    Ok(Mask {
        height: h,
        width: w,
        data: buf.chunks(channels).map(|p| p[0] >= 128).collect(),
    })
}

/// Places equally sized images side by side.
pub fn hstack(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let first = images.first().ok_or_else(|| CoreError::invalid("no images to stack"))?;
    let (_, h, w) = first.chw()?;
    let total_w = w * images.len();
    let mut out = Tensor::zeros(&[3, h, total_w]);
    for (i, img) in images.iter().enumerate() {
        if img.chw()? != (3, h, w) {
            return Err(CoreError::invalid("hstack images differ in size"));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(c * h + y) * total_w + i * w + x] = img.at3(c, y, x);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 5, 7], |i| ((i[0] * 31 + i[1] * 7 + i[2] * 3) % 256) as f32 / 255.0);
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);

        let mut mask = Mask::new(4, 3);
        mask.data[5] = true;
        let mpath = dir.path().join("m.png");
        save_mask_png(&mask, &mpath).unwrap();
        assert_eq!(load_mask_png(&mpath).unwrap(), mask);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
