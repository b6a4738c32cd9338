//! Raster helpers for previews: correspondence lines and comparison strips.

use repose_core::correspondence::Correspondences;
use repose_core::image::{hstack, ImageTensor};
use repose_core::Result;

/// Fully saturated colour for `i` of `n`, spread around the hue circle.
pub fn palette(i: usize, n: usize) -> [f32; 3] {
    let h = 6.0 * i as f32 / n.max(1) as f32;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn put(img: &mut ImageTensor, x: i64, y: i64, rgb: [f32; 3]) {
    let (h, w) = (img.shape()[1] as i64, img.shape()[2] as i64);
    if x < 0 || y < 0 || x >= w || y >= h {
        return;
    }
    let plane = (h * w) as usize;
    let at = (y * w + x) as usize;
    for (c, v) in rgb.into_iter().enumerate() {
        img.data_mut()[c * plane + at] = v;
    }
}

/// Bresenham line between two pixel positions, clipped to the image.
pub fn draw_line(img: &mut ImageTensor, from: [f64; 2], to: [f64; 2], rgb: [f32; 3]) {
    let (mut x0, mut y0) = (from[0].round() as i64, from[1].round() as i64);
    let (x1, y1) = (to[0].round() as i64, to[1].round() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, rgb);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// 3×3 square marker.
pub fn draw_dot(img: &mut ImageTensor, at: [f64; 2], rgb: [f32; 3]) {
    let (x, y) = (at[0].round() as i64, at[1].round() as i64);
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, x + dx, y + dy, rgb);
        }
    }
}

/// Appearance and pose side by side, each matched pair joined by a line.
pub fn correspondence_canvas(appearance: &ImageTensor, pose: &ImageTensor, c: &Correspondences) -> Result<ImageTensor> {
    let mut canvas = hstack(&[appearance, pose])?;
    let w = appearance.chw()?.2 as f64;
    let k = c.k();
    for (i, (a, p)) in c.a.points.iter().zip(&c.p.points).enumerate() {
        let rgb = palette(i, k);
        let p = [p[0] + w, p[1]];
        draw_line(&mut canvas, *a, p, rgb);
        draw_dot(&mut canvas, *a, rgb);
        draw_dot(&mut canvas, p, rgb);
    }
    Ok(canvas)
}

/// Stacks equally wide rows vertically.
pub fn vstack(rows: &[ImageTensor]) -> Result<ImageTensor> {
    let first = rows.first().ok_or_else(|| repose_core::CoreError::invalid("no rows to stack"))?;
    let (_, _, w) = first.chw()?;
    let mut planes: [Vec<f32>; 3] = Default::default();
    let mut height = 0;
    for r in rows {
        let (_, h, rw) = r.chw()?;
        if rw != w {
            return Err(repose_core::CoreError::invalid("rows differ in width"));
        }
        for (c, plane) in planes.iter_mut().enumerate() {
            plane.extend_from_slice(&r.data()[c * h * w..(c + 1) * h * w]);
        }
        height += h;
    }
    Ok(ImageTensor::from_vec(&[3, height, w], planes.concat())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_hits_both_endpoints() {
        let mut img = ImageTensor::zeros(&[3, 10, 10]);
        draw_line(&mut img, [1.0, 8.0], [7.0, 2.0], [1.0, 0.5, 0.25]);
        assert_eq!(img.at3(0, 8, 1), 1.0);
        assert_eq!(img.at3(1, 2, 7), 0.5);
        assert_eq!(img.data().iter().filter(|&&v| v == 0.25).count(), 7);
        // clipped, not panicking
        draw_line(&mut img, [-5.0, -5.0], [20.0, 3.0], [1.0; 3]);
    }

    #[test]
    fn vstack_concatenates_rows() {
        let a = ImageTensor::full(&[3, 2, 4], 0.1);
        let b = ImageTensor::full(&[3, 3, 4], 0.9);
        let s = vstack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[3, 5, 4]);
        assert_eq!(s.at3(2, 1, 3), 0.1);
        assert_eq!(s.at3(2, 2, 0), 0.9);
        assert!(vstack(&[ImageTensor::zeros(&[3, 1, 2]), ImageTensor::zeros(&[3, 1, 3])]).is_err());
    }

    #[test]
    fn palette_colours_are_distinct() {
        let n = 35;
        let cols: Vec<_> = (0..n).map(|i| palette(i, n)).collect();
        for i in 0..n {
            for j in 0..i {
                assert_ne!(cols[i], cols[j]);
            }
        }
    }
}
