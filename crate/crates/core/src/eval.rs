//! Image and depth metrics: PSNR, multi-scale SSIM and the scale-invariant
//! log / relative depth errors, plus a small report type.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::raster::{ColorImage, DepthMap, PixelMask};

/// Reported in place of `+∞` for identical images.
pub const PSNR_CAP: f64 = 99.0;

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_size(a: &ColorImage, b: &ColorImage) -> Result<()> {
    ensure!(
        a.width == b.width && a.height == b.height && a.width > 0 && a.height > 0,
        Validation,
        "image sizes differ or are empty: {}x{} vs {}x{}",
        a.width,
        a.height,
        b.width,
        b.height
    );
    Ok(())
}

pub fn mse(pred: &ColorImage, gt: &ColorImage) -> Result<f64> {
    same_size(pred, gt)?;
    let sum: f64 = pred.data.iter().zip(&gt.data).map(|(p, g)| (p - g).powi(2)).sum();
    Ok(sum / pred.data.len() as f64)
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(pred: &ColorImage, gt: &ColorImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

/// One channel as a dense plane.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &ColorImage, c: usize) -> Self {
        Self {
            w: img.width,
            h: img.height,
            v: img.data.chunks_exact(3).map(|px| px[c]).collect(),
        }
    }

    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// 2×2 box average (odd trailing row/column dropped).
    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push(0.25 * (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)));
            }
        }
        Plane { w, h, v }
    }

    /// Separable Gaussian filter, "valid" region only.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (w, h) = (self.w + 1 - n, self.h + 1 - n);
        let mut tmp = vec![0.0; w * self.h];
        for y in 0..self.h {
            for x in 0..w {
                tmp[y * w + x] = (0..n).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = (0..n).map(|i| k[i] * tmp[(y + i) * w + x]).sum();
            }
        }
        Plane { w, h, v }
    }
}

fn gaussian_window() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let k: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64) {
    let mu_a = a.filter(k);
    let mu_b = b.filter(k);
    let aa = a.map2(a, |x, y| x * y).filter(k);
    let bb = b.map2(b, |x, y| x * y).filter(k);
    let ab = a.map2(b, |x, y| x * y).filter(k);
    let n = mu_a.v.len() as f64;
    let (mut l_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        l_sum += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs_sum += (2.0 * cov + C2) / (va + vb + C2);
    }
    (l_sum / n, cs_sum / n)
}

/// Number of scales that fit: the coarsest level must still hold a window.
pub fn mssim_scales(width: usize, height: usize) -> usize {
    let mut side = width.min(height);
    let mut scales = 0;
    while scales < MS_SSIM_WEIGHTS.len() && side >= WINDOW {
        scales += 1;
        side /= 2;
    }
    scales
}

/// `sign(x)·|x|^w`, keeping negative structure terms meaningful.
fn signed_pow(x: f64, w: f64) -> f64 {
    x.signum() * x.abs().powf(w)
}

/// Multi-scale SSIM averaged over the three channels. Images too small for
/// five scales use fewer (weights renormalized) and log a warning.
pub fn mssim(pred: &ColorImage, gt: &ColorImage) -> Result<f64> {
    same_size(pred, gt)?;
    let scales = mssim_scales(pred.width, pred.height);
    ensure!(
        scales >= 1,
        Validation,
        "image {}x{} is smaller than the {WINDOW}x{WINDOW} window",
        pred.width,
        pred.height
    );
    if scales < MS_SSIM_WEIGHTS.len() {
        warn!(
            "{}x{} image supports only {scales} of {} MS-SSIM scales",
            pred.width,
            pred.height,
            MS_SSIM_WEIGHTS.len()
        );
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    // The standard weights are used as published (they sum to 1.0001); only a
    // reduced set is renormalized.
    let wsum: f64 = if scales == MS_SSIM_WEIGHTS.len() {
        1.0
    } else {
        weights.iter().sum()
    };
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let mut a = Plane::channel(pred, c);
        let mut b = Plane::channel(gt, c);
        let mut value = 1.0;
        for (s, &w) in weights.iter().enumerate() {
            let (l, cs) = ssim_terms(&a, &b, &k);
            let w = w / wsum;
            value *= if s + 1 == scales {
                signed_pow(l * cs, w)
            } else {
                signed_pow(cs, w)
            };
            if s + 1 < scales {
                a = a.downsample();
                b = b.downsample();
            }
        }
        total += value;
    }
    Ok(total / 3.0)
}

/// Which depth pixels take part in evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEvalMask {
    pub width: usize,
    pub height: usize,
    pub valid: Vec<bool>,
}

impl DepthEvalMask {
    /// Valid where ground truth exists (`gt > 0`, optionally `gt <= max_depth`)
    /// and below the cropped top fraction of the image.
    pub fn from_ground_truth(gt: &DepthMap, top_crop: f64, max_depth: Option<f64>) -> Result<Self> {
        ensure!(
            (0.0..1.0).contains(&top_crop),
            Validation,
            "top crop fraction must be in [0, 1), got {top_crop}"
        );
        let first_row = (top_crop * gt.height as f64).round() as usize;
        let valid = (0..gt.height)
            .flat_map(|y| (0..gt.width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let g = gt.get(x, y) as f64;
                y >= first_row && g > 0.0 && max_depth.is_none_or(|m| g <= m)
            })
            .collect();
        Ok(Self {
            width: gt.width,
            height: gt.height,
            valid,
        })
    }

    /// Keeps only pixels that are also set in `keep`.
    pub fn restrict(mut self, keep: &PixelMask) -> Result<Self> {
        ensure!(
            keep.width == self.width && keep.height == self.height,
            Validation,
            "restriction mask is {}x{}, depth is {}x{}",
            keep.width,
            keep.height,
            self.width,
            self.height
        );
        self.valid.iter_mut().zip(&keep.data).for_each(|(v, &k)| *v &= k);
        Ok(self)
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub silog: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    /// Pixels that entered the averages.
    pub valid: usize,
    /// Masked pixels dropped because the prediction was not positive.
    pub excluded: usize,
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &DepthEvalMask) -> Result<DepthMetrics> {
    ensure!(
        pred.width == gt.width
            && pred.height == gt.height
            && mask.width == gt.width
            && mask.height == gt.height,
        Validation,
        "depth map / mask sizes differ"
    );
    let (mut n, mut excluded) = (0usize, 0usize);
    let (mut d_sum, mut d2_sum, mut abs_sum, mut sq_sum) = (0.0, 0.0, 0.0, 0.0);
    for (i, &ok) in mask.valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let (p, g) = (pred.data[i] as f64, gt.data[i] as f64);
        if g <= 0.0 {
            continue;
        }
        if p <= 0.0 || !p.is_finite() {
            excluded += 1;
            continue;
        }
        let d = p.ln() - g.ln();
        d_sum += d;
        d2_sum += d * d;
        abs_sum += (p - g).abs() / g;
        sq_sum += (p - g).powi(2) / g;
        n += 1;
    }
    ensure!(n > 0, Validation, "depth mask selects no valid pixel");
    let nf = n as f64;
    let mean = d_sum / nf;
    Ok(DepthMetrics {
        silog: (d2_sum / nf - mean * mean).max(0.0).sqrt(),
        abs_rel: abs_sum / nf,
        sq_rel: sq_sum / nf,
        valid: n,
        excluded,
    })
}

/// Metrics of one evaluated view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub mssim: f64,
    pub depth: Option<DepthMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub psnr: f64,
    pub mssim: f64,
    pub silog: Option<f64>,
    pub abs_rel: Option<f64>,
    pub sq_rel: Option<f64>,
}

impl EvalReport {
    /// Per-image metrics averaged with equal image weight.
    pub fn mean(&self) -> Result<MeanMetrics> {
        ensure!(!self.images.is_empty(), Validation, "report has no images");
        let n = self.images.len() as f64;
        let avg = |f: &dyn Fn(&ImageMetrics) -> f64| self.images.iter().map(f).sum::<f64>() / n;
        let depths: Vec<&DepthMetrics> = self.images.iter().filter_map(|m| m.depth.as_ref()).collect();
        let davg = |f: &dyn Fn(&DepthMetrics) -> f64| {
            (!depths.is_empty()).then(|| depths.iter().map(|d| f(d)).sum::<f64>() / depths.len() as f64)
        };
        Ok(MeanMetrics {
            psnr: avg(&|m| m.psnr),
            mssim: avg(&|m| m.mssim),
            silog: davg(&|d| d.silog),
            abs_rel: davg(&|d| d.abs_rel),
            sq_rel: davg(&|d| d.sq_rel),
        })
    }

    /// `key = value` lines, one block per image followed by the means.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        for m in &self.images {
            let _ = writeln!(s, "[{}]", m.name);
            let _ = writeln!(s, "psnr = {:.6}", m.psnr);
            let _ = writeln!(s, "mssim = {:.6}", m.mssim);
            if let Some(d) = &m.depth {
                let _ = writeln!(s, "silog = {:.6}", d.silog);
                let _ = writeln!(s, "abs_err_rel = {:.6}", d.abs_rel);
                let _ = writeln!(s, "sq_err_rel = {:.6}", d.sq_rel);
                let _ = writeln!(s, "depth_pixels = {}", d.valid);
                let _ = writeln!(s, "depth_excluded = {}", d.excluded);
            }
            s.push('\n');
        }
        let mean = self.mean()?;
        let _ = writeln!(s, "[mean]");
        let _ = writeln!(s, "images = {}", self.images.len());
        let _ = writeln!(s, "psnr = {:.6}", mean.psnr);
        let _ = writeln!(s, "mssim = {:.6}", mean.mssim);
        for (k, v) in [
            ("silog", mean.silog),
            ("abs_err_rel", mean.abs_rel),
            ("sq_err_rel", mean.sq_rel),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v:.6}");
            }
        }
        Ok(s)
    }

    /// Machine-readable table: one row per image plus a `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut s = String::from("image,psnr,mssim,silog,abs_err_rel,sq_err_rel\n");
        for m in &self.images {
            let d = m.depth.as_ref();
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{},{},{}",
                m.name,
                m.psnr,
                m.mssim,
                opt(d.map(|d| d.silog)),
                opt(d.map(|d| d.abs_rel)),
                opt(d.map(|d| d.sq_rel))
            );
        }
        let mean = self.mean()?;
        let _ = writeln!(
            s,
            "mean,{:.6},{:.6},{},{},{}",
            mean.psnr,
            mean.mssim,
            opt(mean.silog),
            opt(mean.abs_rel),
            opt(mean.sq_rel)
        );
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn gradient_image(w: usize, h: usize) -> ColorImage {
        let mut img = ColorImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 13) % 29) as f64 / 28.0;
                img.set(x, y, [v, 1.0 - v, (x as f64 / w as f64)]);
            }
        }
        img
    }

    fn depth(values: &[f32]) -> DepthMap {
        let mut d = DepthMap::new(values.len(), 1);
        d.data.copy_from_slice(values);
        d
    }

    #[test]
    fn psnr_values() {
        let a = gradient_image(8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let black = ColorImage::filled(4, 4, [0.0; 3]);
        let white = ColorImage::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        assert!(psnr(&black, &gradient_image(5, 4)).is_err());
    }

    #[test]
    fn mssim_identity_and_symmetry() {
        let a = gradient_image(180, 180);
        assert!((mssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        for (i, v) in b.data.iter_mut().enumerate() {
            *v = (*v + 0.1 * ((i % 5) as f64 - 2.0) / 2.0).clamp(0.0, 1.0);
        }
        let ab = mssim(&a, &b).unwrap();
        assert_eq!(ab, mssim(&b, &a).unwrap());
        assert!(ab < 1.0 && ab > 0.0);
    }

    fn block_pattern(n: usize) -> ColorImage {
        let mut a = ColorImage::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let on = ((x / 8) * 7 + (y / 8) * 13) % 3 == 0;
                a.set(x, y, if on { [1.0; 3] } else { [0.0; 3] });
            }
        }
        a
    }

    // Reference values from an independent NumPy/SciPy evaluation of the
    // same definition (valid-mode separable Gaussian, 2x2 mean pooling).
    #[test]
    fn inverted_binary_image_matches_reference() {
        let a = block_pattern(176);
        let mut inv = a.clone();
        inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let m = mssim(&a, &inv).unwrap();
        assert!(m < 0.1);
        assert!((m - -0.956_524_022_774_473_5).abs() < 1e-9, "{m}");
    }

    #[test]
    fn perturbed_image_matches_reference() {
        let a = block_pattern(176);
        let mut b = a.clone();
        for y in 0..176 {
            for x in 0..176 {
                let v = a.get(x, y)[0] * 0.7 + 0.1 + 0.05 * (x as f64 / 5.0).sin() * (y as f64 / 7.0).cos();
                b.set(x, y, [v.clamp(0.0, 1.0); 3]);
            }
        }
        let m = mssim(&a, &b).unwrap();
        assert!((m - 0.934_705_632_452_555).abs() < 1e-9, "{m}");
    }

    #[test]
    fn small_images_use_fewer_scales() {
        assert_eq!(mssim_scales(320, 176), 5);
        assert_eq!(mssim_scales(160, 160), 4);
        assert_eq!(mssim_scales(11, 40), 1);
        assert_eq!(mssim_scales(10, 40), 0);
        let a = gradient_image(40, 30);
        assert!((mssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(mssim(&gradient_image(8, 8), &gradient_image(8, 8)).is_err());
    }

    #[test]
    fn depth_identity_and_scale() {
        let gt = depth(&[1.0, 2.0, 4.0, 8.0]);
        let mask = DepthEvalMask::from_ground_truth(&gt, 0.0, None).unwrap();
        let m = depth_metrics(&gt, &gt, &mask).unwrap();
        assert_eq!((m.silog, m.abs_rel, m.sq_rel), (0.0, 0.0, 0.0));
        let twice = depth(&[2.0, 4.0, 8.0, 16.0]);
        let m = depth_metrics(&twice, &gt, &mask).unwrap();
        assert!(m.silog < 1e-7);
        assert!((m.abs_rel - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depth_two_pixel_hand_case() {
        let gt = depth(&[1.0, 1.0]);
        let pred = depth(&[1.0, E as f32]);
        let mask = DepthEvalMask::from_ground_truth(&gt, 0.0, None).unwrap();
        let m = depth_metrics(&pred, &gt, &mask).unwrap();
        let e = E as f32 as f64;
        assert!((m.silog - 0.5).abs() < 1e-6);
        assert!((m.abs_rel - (e - 1.0) / 2.0).abs() < 1e-12);
        assert!((m.sq_rel - (e - 1.0).powi(2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn restrict_intersects_masks() {
        let gt = depth(&[1.0, 0.0, 3.0, 4.0]);
        let mask = DepthEvalMask::from_ground_truth(&gt, 0.0, None).unwrap();
        let keep = PixelMask {
            width: 4,
            height: 1,
            data: vec![true, true, false, true],
        };
        assert_eq!(mask.clone().restrict(&keep).unwrap().valid, vec![true, false, false, true]);
        assert!(mask.restrict(&PixelMask::new(2, 2)).is_err());
    }

    #[test]
    fn mask_handles_crop_sentinel_and_bad_predictions() {
        let mut gt = DepthMap::new(2, 3);
        gt.data.copy_from_slice(&[1.0, 1.0, 0.0, 2.0, 3.0, 50.0]);
        let mask = DepthEvalMask::from_ground_truth(&gt, 1.0 / 3.0, Some(10.0)).unwrap();
        assert_eq!(mask.valid, vec![false, false, false, true, true, false]);
        let mut pred = gt.clone();
        pred.data[3] = 0.0;
        let m = depth_metrics(&pred, &gt, &mask).unwrap();
        assert_eq!((m.valid, m.excluded), (1, 1));
        let none = DepthEvalMask {
            width: 2,
            height: 3,
            valid: vec![false; 6],
        };
        assert!(depth_metrics(&gt, &gt, &none).is_err());
    }

    #[test]
    fn report_formats() {
        let r = EvalReport {
            images: vec![
                ImageMetrics {
                    name: "a".into(),
                    psnr: 20.0,
                    mssim: 0.8,
                    depth: Some(DepthMetrics {
                        silog: 0.1,
                        abs_rel: 0.05,
                        sq_rel: 0.01,
                        valid: 10,
                        excluded: 0,
                    }),
                },
                ImageMetrics {
                    name: "b".into(),
                    psnr: 30.0,
                    mssim: 0.9,
                    depth: None,
                },
            ],
        };
        let m = r.mean().unwrap();
        assert!((m.psnr - 25.0).abs() < 1e-12);
        assert_eq!(m.silog, Some(0.1));
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("b,30.000000,0.900000,,,"));
        assert!(r.to_text().unwrap().contains("[mean]\nimages = 2\npsnr = 25.000000"));
        assert!(EvalReport { images: vec![] }.mean().is_err());
    }

    proptest! {
        #[test]
        fn silog_is_scale_invariant(
            gt in proptest::collection::vec(0.5f32..50.0, 2..20),
            noise in proptest::collection::vec(0.8f32..1.25, 20),
            scale in 0.2f32..5.0,
        ) {
            let g = depth(&gt);
            let p = depth(&gt.iter().zip(&noise).map(|(a, b)| a * b).collect::<Vec<_>>());
            let ps = depth(&p.data.iter().map(|v| v * scale).collect::<Vec<_>>());
            let mask = DepthEvalMask::from_ground_truth(&g, 0.0, None).unwrap();
            let a = depth_metrics(&p, &g, &mask).unwrap();
            let b = depth_metrics(&ps, &g, &mask).unwrap();
            prop_assert!((a.silog - b.silog).abs() < 1e-5);
            prop_assert!(a.silog >= 0.0 && a.abs_rel >= 0.0 && a.sq_rel >= 0.0);
        }

        #[test]
        fn psnr_decreases_with_mse(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a) >= psnr_from_mse(b));
        }
    }
}
