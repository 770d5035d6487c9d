//! Histogram-of-oriented-gradients descriptors and nearest-view retrieval.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::math::Camera;

pub const HOG_SIZE: usize = 64;
pub const HOG_CELL: usize = 8;
pub const HOG_BINS: usize = 9;
const HOG_EPS: f64 = 1e-6;

/// Descriptor length for the default layout: 7x7 blocks of 2x2 cells, 9 bins.
pub const HOG_LEN: usize = (HOG_SIZE / HOG_CELL - 1) * (HOG_SIZE / HOG_CELL - 1) * 4 * HOG_BINS;

/// Luma, resized to 64x64, central-difference gradients, 9 unsigned bins
/// (linearly split between neighbours) per 8x8 cell, L2-normalized 2x2 blocks.
pub fn hog_features(image: &Image) -> Vec<f64> {
    let gray = Image {
        width: image.width,
        height: image.height,
        channels: 1,
        data: image.luma(),
    };
    let g = gray.resize(HOG_SIZE, HOG_SIZE).data;
    let n = HOG_SIZE;
    let cells = n / HOG_CELL;
    let mut hist = vec![0.0; cells * cells * HOG_BINS];
    let at = |x: usize, y: usize| g[y * n + x];
    for y in 0..n {
        for x in 0..n {
            let gx = at((x + 1).min(n - 1), y) - at(x.saturating_sub(1), y);
            let gy = at(x, (y + 1).min(n - 1)) - at(x, y.saturating_sub(1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(PI);
            let pos = angle / (PI / HOG_BINS as f64) - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as i64).rem_euclid(HOG_BINS as i64) as usize;
            let b1 = (b0 + 1) % HOG_BINS;
            let cell = ((y / HOG_CELL) * cells + x / HOG_CELL) * HOG_BINS;
            hist[cell + b0] += mag * (1.0 - frac);
            hist[cell + b1] += mag * frac;
        }
    }
    let mut out = Vec::with_capacity(HOG_LEN);
    for by in 0..cells - 1 {
        for bx in 0..cells - 1 {
            let mut block = Vec::with_capacity(4 * HOG_BINS);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let c = ((by + dy) * cells + bx + dx) * HOG_BINS;
                block.extend_from_slice(&hist[c..c + HOG_BINS]);
            }
            let norm = (block.iter().map(|v| v * v).sum::<f64>() + HOG_EPS * HOG_EPS).sqrt();
            out.extend(block.into_iter().map(|v| v / norm));
        }
    }
    out
}

pub fn hog_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Camera of the gallery image with the closest descriptor; ties go to the
/// lowest index.
pub fn retrieve_camera(image: &Image, gallery: &[(Image, Camera)]) -> Result<Camera> {
    if gallery.is_empty() {
        return invalid("camera retrieval needs a non-empty gallery");
    }
    let q = hog_features(image);
    let mut best = (f64::INFINITY, 0);
    for (i, (img, _)) in gallery.iter().enumerate() {
        let d = hog_distance(&q, &hog_features(img));
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(gallery[best.1].1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    fn pattern(shift: usize) -> Image {
        let data = (0..32 * 32)
            .map(|i| if ((i % 32) + shift) / 8 % 2 == 0 { 0.9 } else { 0.1 })
            .collect();
        Image::new(32, 32, 1, data).unwrap()
    }

    #[test]
    fn descriptor_examples() {
        let c = hog_features(&Image::filled(20, 20, &[0.4, 0.4, 0.4]));
        assert_eq!(c.len(), HOG_LEN);
        assert!(c.iter().all(|v| *v == 0.0));
        let p = hog_features(&pattern(0));
        assert_eq!(p.len(), 1764);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert_eq!(p, hog_features(&pattern(0)));
    }

    #[test]
    fn retrieval_examples() {
        let cams: Vec<Camera> = (0..3)
            .map(|i| Camera::look_at(Vec3::new(i as f64, 0.0, -2.0), Vec3::ZERO, 45.0, 32, 32))
            .collect();
        let gallery: Vec<(Image, Camera)> = (0..3).map(|i| (pattern(i * 3), cams[i])).collect();
        assert_eq!(retrieve_camera(&pattern(3), &gallery).unwrap(), cams[1]);
        assert_eq!(retrieve_camera(&pattern(5), &gallery[..1]).unwrap(), cams[0]);
        assert!(retrieve_camera(&pattern(0), &[]).is_err());
    }
}
