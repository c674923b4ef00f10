//! Post-processing robustness: JPEG re-compression and Gaussian blur applied
//! to evaluation images (never to ground-truth masks or files on disk), with
//! a sweep that reports refined-stage metrics per distortion level.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{evaluate, Model};
use crate::scalar::Scalar;
use crate::synth::ForgeryRecord;

/// Distortion family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Jpeg,
    GaussianBlur,
    None,
}

impl PerturbKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbKind::Jpeg => "jpeg",
            PerturbKind::GaussianBlur => "gaussian_blur",
            PerturbKind::None => "none",
        }
    }
}

/// A sweep axis: one kind plus its levels (JPEG qualities or blur levels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub levels: Vec<u32>,
}

impl PerturbSpec {
    pub fn jpeg_default() -> Self {
        PerturbSpec {
            kind: PerturbKind::Jpeg,
            levels: vec![100, 90, 80, 70, 60, 50],
        }
    }

    pub fn blur_default() -> Self {
        PerturbSpec {
            kind: PerturbKind::GaussianBlur,
            levels: vec![0, 3, 7, 11, 15, 19],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PerturbKind::Jpeg => {
                if self.levels.iter().any(|&q| !(1..=100).contains(&q)) {
                    return Err(Error::config("jpeg quality must be in [1, 100]"));
                }
            }
            PerturbKind::GaussianBlur | PerturbKind::None => {}
        }
        Ok(())
    }
}

/// Blur levels map to sigma as level/4.
pub fn blur_sigma(level: u32) -> f32 {
    level as f32 / 4.0
}

/// Normalized 1-D Gaussian taps, radius `ceil(3*sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i32;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-0.5 * (i as f32 / sigma).powi(2)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn reflect(i: isize, n: isize) -> usize {
    // Reflect-101-style indexing without repeating the edge sample would be
    // `2n - i - 2`; plain mirror (repeat edge) keeps kernels mass-preserving
    // on constant images either way. Mirror with edge repeat:
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
    }
    i as usize
}

/// Separable Gaussian blur with reflect padding; level 0 is the identity.
pub fn gaussian_blur(image: &Array3<f32>, sigma: f32) -> Array3<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = image.dim();
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + j as isize - r, w as isize);
                    acc += kv * image[[ci, y, xx]];
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + j as isize - r, h as isize);
                    acc += kv * tmp[[ci, yy, x]];
                }
                out[[ci, y, x]] = acc;
            }
        }
    }
    out
}

/// JPEG encode/decode round trip at the given quality.
pub fn jpeg_roundtrip(image: &Array3<f32>, quality: u32) -> Result<Array3<f32>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("jpeg quality {quality} out of range")));
    }
    let (_, h, w) = image.dim();
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                raw.push((image[[ci, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::config("jpeg buffer size mismatch"))?;
    let mut bytes = Vec::new();
    let mut encoder =
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, quality as u8);
    encoder.encode_image(&rgb)?;
    let decoded = image::load_from_memory(&bytes)?.to_rgb8();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in decoded.enumerate_pixels() {
        for ci in 0..3 {
            out[[ci, y as usize, x as usize]] = px.0[ci] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Apply one distortion level to an image. Masks are untouched by design.
pub fn perturb(image: &Array3<f32>, kind: PerturbKind, level: u32) -> Result<Array3<f32>> {
    match kind {
        PerturbKind::None => Ok(image.clone()),
        PerturbKind::GaussianBlur => Ok(gaussian_blur(image, blur_sigma(level))),
        PerturbKind::Jpeg => jpeg_roundtrip(image, level),
    }
}

fn perturb_records(
    records: &[ForgeryRecord],
    kind: PerturbKind,
    level: u32,
) -> Result<Vec<ForgeryRecord>> {
    records
        .par_iter()
        .map(|r| {
            Ok(ForgeryRecord {
                id: r.id.clone(),
                image: perturb(&r.image, kind, level)?,
                mask: r.mask.clone(),
                forgery_kind: r.forgery_kind,
                source_seed: r.source_seed,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: PerturbKind,
    pub level: u32,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn rows_for(&self, kind: PerturbKind) -> Vec<&RobustnessRow> {
        self.rows.iter().filter(|r| r.kind == kind).collect()
    }
}

/// Evaluate refined-stage metrics at every level of every spec.
pub fn robustness_sweep<T: Scalar>(
    model: &Model<T>,
    records: &[ForgeryRecord],
    specs: &[PerturbSpec],
    batch_size: usize,
) -> Result<RobustnessReport> {
    let mut report = RobustnessReport::default();
    for spec in specs {
        spec.validate()?;
        for &level in &spec.levels {
            let perturbed = perturb_records(records, spec.kind, level)?;
            let (_, refined) = evaluate(model, &perturbed, batch_size)?;
            report.rows.push(RobustnessRow {
                kind: spec.kind,
                level,
                mean_iou: refined.iou,
                mean_f1: refined.f1,
                n_images: refined.len(),
            });
        }
    }
    Ok(report)
}
