//! Image fidelity metrics and report emission.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return shape_err(format!(
            "image dims differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        ));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` over all channels and pixels, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filter of a `w x h` plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM on luma with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return shape_err("image dims differ");
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return invalid(format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM"));
    }
    let (w, h) = (a.width, a.height);
    let (x, y) = (a.luma(), b.luma());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mx, ..) = filter(&x, w, h, &k);
    let (my, ..) = filter(&y, w, h, &k);
    let (sxx, ..) = filter(&prod(&x, &x), w, h, &k);
    let (syy, ..) = filter(&prod(&y, &y), w, h, &k);
    let (sxy, ..) = filter(&prod(&x, &y), w, h, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxel_iou: Option<f64>,
}

impl MetricsReport {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (String, &'a Image, &'a Image)>) -> Result<Self> {
        let views = pairs
            .into_iter()
            .map(|(name, a, b)| {
                Ok(ViewMetrics {
                    name,
                    psnr: psnr(a, b)?,
                    ssim: ssim(a, b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = views.len().max(1) as f64;
        Ok(Self {
            mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            views,
            voxel_iou: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let width = self.views.iter().map(|v| v.name.len()).chain([4]).max().unwrap_or(4);
        let mut out = format!("{:<width$}  {:>8}  {:>7}\n", "view", "psnr", "ssim");
        for v in &self.views {
            out += &format!("{:<width$}  {:>8.3}  {:>7.4}\n", v.name, v.psnr, v.ssim);
        }
        out += &format!("{:<width$}  {:>8.3}  {:>7.4}\n", "mean", self.mean_psnr, self.mean_ssim);
        if let Some(iou) = self.voxel_iou {
            out += &format!("{:<width$}  {:>8.4}\n", "iou", iou);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, &[0.3, 0.3, 0.3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, &[0.4, 0.4, 0.4]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(3, 4, &[0.3; 3])).is_err());
    }

    #[test]
    fn ssim_examples() {
        let x = Image::new(16, 16, 1, (0..256).map(|i| ((i * 37 % 101) as f64) / 100.0).collect()).unwrap();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = x.map(|v| 0.5 * v + 0.2);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        let (l1, l2) = (0.3, 0.7);
        let c1 = Image::filled(16, 16, &[l1]);
        let c2 = Image::filled(16, 16, &[l2]);
        let expect = (2.0 * l1 * l2 + SSIM_C1) / (l1 * l1 + l2 * l2 + SSIM_C1);
        assert!((ssim(&c1, &c2).unwrap() - expect).abs() < 1e-12);
        assert!(ssim(&Image::filled(8, 8, &[0.0]), &Image::filled(8, 8, &[0.0])).is_err());
    }

    #[test]
    fn report_table_lists_every_view() {
        let a = Image::filled(12, 12, &[0.5]);
        let r = MetricsReport::from_pairs([("v0".to_string(), &a, &a)]).unwrap();
        assert_eq!(r.mean_psnr, PSNR_CAP);
        let t = r.to_table();
        assert!(t.contains("v0") && t.contains("mean"));
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
