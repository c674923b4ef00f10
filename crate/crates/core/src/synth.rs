//! Procedural scene generation, forgery injection and dataset persistence.
//!
//! Scenes are weighted blends of four texture families (smoothed random
//! fields, affine ramps, sinusoidal checkers, Gaussian blobs), quantized to
//! the 8-bit lattice so that PNG round trips are bit-exact. Forgeries modify
//! pixels only inside their mask, with a feathered boundary so tampered
//! regions are not trivially edge-detectable.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bumped whenever generated content would change for the same seeds.
pub const GENERATOR_VERSION: &str = "1";

/// Deterministic seed derivation: fold components through splitmix64.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        state ^= state >> 31;
        state = state.wrapping_mul(0x94D0_49BB_1331_11EB);
        state ^= state >> 27;
    }
    state
}

fn rng_for(parts: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix_seed(parts))
}

/// Relative weights of the four texture families, summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureMix {
    pub random_field: f32,
    pub gradient: f32,
    pub checker: f32,
    pub blob: f32,
}

impl Default for TextureMix {
    fn default() -> Self {
        TextureMix {
            random_field: 0.3,
            gradient: 0.25,
            checker: 0.25,
            blob: 0.2,
        }
    }
}

impl TextureMix {
    pub fn validate(&self) -> Result<()> {
        let w = [self.random_field, self.gradient, self.checker, self.blob];
        if w.iter().any(|&x| x < 0.0) {
            return Err(Error::config("texture mix weights must be non-negative"));
        }
        let sum: f32 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::config(format!(
                "texture mix weights must sum to 1 (got {sum})"
            )));
        }
        Ok(())
    }
}

/// Everything needed to regenerate one authentic scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub resolution: usize,
    pub texture_mix: TextureMix,
}

impl SceneSpec {
    pub fn new(seed: u64, resolution: usize) -> Self {
        SceneSpec {
            seed,
            resolution,
            texture_mix: TextureMix::default(),
        }
    }
}

/// What was done to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryKind {
    Splice,
    CopyMove,
    NoiseFill,
    None,
}

impl ForgeryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ForgeryKind::Splice => "splice",
            ForgeryKind::CopyMove => "copy_move",
            ForgeryKind::NoiseFill => "noise_fill",
            ForgeryKind::None => "none",
        }
    }
}

/// One image with its ground-truth tamper mask.
#[derive(Debug, Clone)]
pub struct ForgeryRecord {
    pub id: String,
    /// `[3, H, W]`, values on the 8-bit lattice in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[H, W]`, exactly the set of pixels that differ from the source scene.
    pub mask: Array2<u8>,
    pub forgery_kind: ForgeryKind,
    pub source_seed: u64,
}

impl ForgeryRecord {
    pub fn mask_fraction(&self) -> f64 {
        let ones: usize = self.mask.iter().filter(|&&m| m != 0).count();
        ones as f64 / self.mask.len() as f64
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generate one authentic scene. Pure function of the spec.
pub fn generate_real(spec: &SceneSpec, patch_size: usize) -> Result<Array3<f32>> {
    let res = spec.resolution;
    if res < 32 {
        return Err(Error::config(format!("resolution {res} < 32")));
    }
    if patch_size == 0 || res % patch_size != 0 {
        return Err(Error::config(format!(
            "resolution {res} not divisible by patch size {patch_size}"
        )));
    }
    spec.texture_mix.validate()?;

    let mix = spec.texture_mix;
    let mut out = Array3::<f32>::zeros((3, res, res));
    let layers: [(f32, fn(&mut ChaCha12Rng, usize) -> Array3<f32>, u64); 4] = [
        (mix.random_field, tex_random_field, 1),
        (mix.gradient, tex_gradient, 2),
        (mix.checker, tex_checker, 3),
        (mix.blob, tex_blob, 4),
    ];
    for (w, tex, tag) in layers {
        if w == 0.0 {
            continue;
        }
        let mut rng = rng_for(&[spec.seed, tag]);
        let t = tex(&mut rng, res);
        out.zip_mut_with(&t, |o, &v| *o += w * v);
    }
    out.mapv_inplace(quantize);
    Ok(out)
}

fn normalize_channel(c: &mut Array2<f32>) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in c.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-6 {
        c.fill(0.5);
        return;
    }
    let inv = 1.0 / (hi - lo);
    c.mapv_inplace(|v| (v - lo) * inv);
}

/// Small separable Gaussian; clamped edges are fine for texture synthesis.
fn blur_channel(c: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    for i in -r..=r {
        kernel.push((-0.5 * (i as f32 / sigma).powi(2)).exp());
    }
    let ksum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);

    let (h, w) = c.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let xx = (x as isize + ki as isize - r).clamp(0, w as isize - 1) as usize;
                acc += k * c[[y, xx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let yy = (y as isize + ki as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[[yy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn tex_random_field(rng: &mut ChaCha12Rng, res: usize) -> Array3<f32> {
    let sigma: f32 = rng.gen_range(2.5..5.0);
    let base = Array2::from_shape_fn((res, res), |_| rng.gen_range(0.0f32..1.0));
    let mut out = Array3::zeros((3, res, res));
    for c in 0..3 {
        let own = Array2::from_shape_fn((res, res), |_| rng.gen_range(0.0f32..1.0));
        let mut ch = &base * 0.7f32 + &own * 0.3f32;
        ch = blur_channel(&ch, sigma);
        normalize_channel(&mut ch);
        out.index_axis_mut(ndarray::Axis(0), c).assign(&ch);
    }
    out
}

fn tex_gradient(rng: &mut ChaCha12Rng, res: usize) -> Array3<f32> {
    let mut out = Array3::zeros((3, res, res));
    for c in 0..3 {
        let (mut bx, mut by) = (rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0));
        while bx.abs() + by.abs() < 0.1 {
            bx = rng.gen_range(-1.0..1.0);
            by = rng.gen_range(-1.0..1.0);
        }
        let mut ch = Array2::from_shape_fn((res, res), |(y, x)| {
            bx * (x as f32 / res as f32) + by * (y as f32 / res as f32)
        });
        normalize_channel(&mut ch);
        out.index_axis_mut(ndarray::Axis(0), c).assign(&ch);
    }
    out
}

fn tex_checker(rng: &mut ChaCha12Rng, res: usize) -> Array3<f32> {
    let fx: f32 = rng.gen_range(2.0..6.0);
    let fy: f32 = rng.gen_range(2.0..6.0);
    let px: f32 = rng.gen_range(0.0..1.0);
    let py: f32 = rng.gen_range(0.0..1.0);
    let tau = std::f32::consts::TAU;
    let mut out = Array3::zeros((3, res, res));
    for c in 0..3 {
        let shift = 0.07 * c as f32;
        let ch = Array2::from_shape_fn((res, res), |(y, x)| {
            let sx = (tau * (fx * (x as f32 / res as f32 + px + shift))).sin();
            let sy = (tau * (fy * (y as f32 / res as f32 + py))).sin();
            0.5 + 0.5 * sx * sy
        });
        out.index_axis_mut(ndarray::Axis(0), c).assign(&ch);
    }
    out
}

fn tex_blob(rng: &mut ChaCha12Rng, res: usize) -> Array3<f32> {
    let n = rng.gen_range(3..7);
    let bumps: Vec<(f32, f32, f32, [f32; 3])> = (0..n)
        .map(|_| {
            (
                rng.gen_range(0.0..res as f32),
                rng.gen_range(0.0..res as f32),
                rng.gen_range(res as f32 / 12.0..res as f32 / 4.0),
                [
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                ],
            )
        })
        .collect();
    let mut out = Array3::zeros((3, res, res));
    for c in 0..3 {
        let mut ch = Array2::from_shape_fn((res, res), |(y, x)| {
            bumps
                .iter()
                .map(|&(cx, cy, s, amp)| {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    amp[c] * (-d2 / (2.0 * s * s)).exp()
                })
                .sum::<f32>()
        });
        normalize_channel(&mut ch);
        out.index_axis_mut(ndarray::Axis(0), c).assign(&ch);
    }
    out
}

/// Knobs for forgery injection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForgeParams {
    /// Target mask area as a fraction of the image; sampled per record.
    pub area_range: (f32, f32),
    /// Width of the alpha feather band along the region boundary, pixels.
    pub feather_px: f32,
}

impl Default for ForgeParams {
    fn default() -> Self {
        ForgeParams {
            area_range: (0.05, 0.35),
            feather_px: 2.0,
        }
    }
}

/// Hard bounds demanded of every forged record.
pub const MASK_FRACTION_BOUNDS: (f64, f64) = (0.02, 0.5);

/// Apply a forgery of `kind` to an authentic scene. Deterministic in
/// `(image, kind, rng_seed)`.
pub fn forge(
    real: &Array3<f32>,
    kind: ForgeryKind,
    rng_seed: u64,
    params: &ForgeParams,
) -> Result<ForgeryRecord> {
    if kind == ForgeryKind::None {
        let (_, h, w) = real.dim();
        return Ok(ForgeryRecord {
            id: String::new(),
            image: real.clone(),
            mask: Array2::zeros((h, w)),
            forgery_kind: kind,
            source_seed: rng_seed,
        });
    }
    // A clipped region can land outside the required area bounds; retry with
    // derived seeds.
    for attempt in 0..16u64 {
        let rec = forge_once(real, kind, mix_seed(&[rng_seed, attempt]), params)?;
        let frac = rec.mask_fraction();
        if frac >= MASK_FRACTION_BOUNDS.0 && frac <= MASK_FRACTION_BOUNDS.1 {
            return Ok(ForgeryRecord {
                source_seed: rng_seed,
                ..rec
            });
        }
    }
    Err(Error::config(format!(
        "could not place a {} region within area bounds",
        kind.as_str()
    )))
}

fn forge_once(
    real: &Array3<f32>,
    kind: ForgeryKind,
    seed: u64,
    params: &ForgeParams,
) -> Result<ForgeryRecord> {
    let (_, h, w) = real.dim();
    let mut rng = rng_for(&[seed, 10]);
    let area = rng.gen_range(params.area_range.0..params.area_range.1) as f64;
    let region = sample_region(&mut rng, h, w, area);
    let alpha = feather_alpha(&region, params.feather_px);

    let mut forged = real.clone();
    match kind {
        ForgeryKind::Splice => {
            let mut donor_rng = rng_for(&[seed, 21]);
            let donor_spec = SceneSpec {
                seed: mix_seed(&[seed, 20]),
                resolution: h,
                texture_mix: random_mix(&mut donor_rng),
            };
            let donor = generate_real(&donor_spec, 1)?;
            blend(&mut forged, &donor, &alpha);
        }
        ForgeryKind::CopyMove => {
            let (dy, dx) = sample_shift(&mut rng, &region, h, w);
            let mut shifted = real.clone();
            for y in 0..h {
                for x in 0..w {
                    if region[[y, x]] {
                        let sy = (y as isize - dy) as usize;
                        let sx = (x as isize - dx) as usize;
                        for c in 0..3 {
                            shifted[[c, y, x]] = real[[c, sy, sx]];
                        }
                    }
                }
            }
            blend(&mut forged, &shifted, &alpha);
        }
        ForgeryKind::NoiseFill => {
            let noise = region_noise(&mut rng, real, &region);
            blend(&mut forged, &noise, &alpha);
        }
        ForgeryKind::None => unreachable!(),
    }

    forged.mapv_inplace(quantize);

    // The mask must be exactly the set of changed pixels. Blended values can
    // quantize back onto the original lattice point; nudge those by one level.
    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if alpha[[y, x]] <= 0.0 {
                for c in 0..3 {
                    forged[[c, y, x]] = real[[c, y, x]];
                }
                continue;
            }
            mask[[y, x]] = 1;
            let same = (0..3).all(|c| forged[[c, y, x]] == real[[c, y, x]]);
            if same {
                let v = forged[[0, y, x]];
                forged[[0, y, x]] = if v >= 1.0 {
                    quantize(v - 1.5 / 255.0)
                } else {
                    quantize(v + 1.5 / 255.0)
                };
            }
        }
    }

    Ok(ForgeryRecord {
        id: String::new(),
        image: forged,
        mask,
        forgery_kind: kind,
        source_seed: seed,
    })
}

/// Uniformly random texture weights (normalized), used for splice donors.
fn random_mix(rng: &mut ChaCha12Rng) -> TextureMix {
    let w: [f32; 4] = std::array::from_fn(|_| rng.gen_range(0.05f32..1.0));
    let sum: f32 = w.iter().sum();
    TextureMix {
        random_field: w[0] / sum,
        gradient: w[1] / sum,
        checker: w[2] / sum,
        blob: w[3] / sum,
    }
}

fn blend(dst: &mut Array3<f32>, src: &Array3<f32>, alpha: &Array2<f32>) {
    let (_, h, w) = dst.dim();
    for y in 0..h {
        for x in 0..w {
            let a = alpha[[y, x]];
            if a <= 0.0 {
                continue;
            }
            for c in 0..3 {
                dst[[c, y, x]] = (1.0 - a) * dst[[c, y, x]] + a * src[[c, y, x]];
            }
        }
    }
}

fn sample_region(rng: &mut ChaCha12Rng, h: usize, w: usize, area: f64) -> Array2<bool> {
    let shape = rng.gen_range(0..3u32);
    let target = area * (h * w) as f64;
    let aspect: f64 = rng.gen_range(0.6..1.7);
    let rh = (target * aspect).sqrt().max(3.0);
    let rw = (target / aspect).sqrt().max(3.0);
    let cy = rng.gen_range(0.0..h as f64);
    let cx = rng.gen_range(0.0..w as f64);
    let mut region = Array2::from_elem((h, w), false);
    match shape {
        0 => {
            // rectangle
            let y0 = (cy - rh / 2.0).max(0.0) as usize;
            let y1 = ((cy + rh / 2.0) as usize).min(h - 1);
            let x0 = (cx - rw / 2.0).max(0.0) as usize;
            let x1 = ((cx + rw / 2.0) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    region[[y, x]] = true;
                }
            }
        }
        1 => {
            // ellipse with the same area as the target rectangle
            let a = rh / 2.0 * (4.0 / std::f64::consts::PI).sqrt();
            let b = rw / 2.0 * (4.0 / std::f64::consts::PI).sqrt();
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 - cy) / a;
                    let dx = (x as f64 - cx) / b;
                    if dy * dy + dx * dx <= 1.0 {
                        region[[y, x]] = true;
                    }
                }
            }
        }
        _ => {
            // blob: union of overlapping ellipses around the center
            let lobes = rng.gen_range(3..6);
            let base = rh.min(rw) / 2.0;
            for _ in 0..lobes {
                let ly = cy + rng.gen_range(-base..base) * 0.7;
                let lx = cx + rng.gen_range(-base..base) * 0.7;
                let la = base * rng.gen_range(0.5..1.0);
                let lb = base * rng.gen_range(0.5..1.0);
                for y in 0..h {
                    for x in 0..w {
                        let dy = (y as f64 - ly) / la;
                        let dx = (x as f64 - lx) / lb;
                        if dy * dy + dx * dx <= 1.0 {
                            region[[y, x]] = true;
                        }
                    }
                }
            }
        }
    }
    region
}

/// City-block distance to the region boundary, mapped to `[0, 1]` alpha over
/// `feather` pixels. Outside the region alpha is zero.
fn feather_alpha(region: &Array2<bool>, feather: f32) -> Array2<f32> {
    let (h, w) = region.dim();
    let big = (h + w) as i32;
    let mut dist = Array2::<i32>::from_elem((h, w), big);
    for y in 0..h {
        for x in 0..w {
            if !region[[y, x]] {
                dist[[y, x]] = 0;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut d = dist[[y, x]];
            if y > 0 {
                d = d.min(dist[[y - 1, x]] + 1);
            }
            if x > 0 {
                d = d.min(dist[[y, x - 1]] + 1);
            }
            dist[[y, x]] = d;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let mut d = dist[[y, x]];
            if y + 1 < h {
                d = d.min(dist[[y + 1, x]] + 1);
            }
            if x + 1 < w {
                d = d.min(dist[[y, x + 1]] + 1);
            }
            dist[[y, x]] = d;
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        if region[[y, x]] {
            (dist[[y, x]] as f32 / feather).min(1.0)
        } else {
            0.0
        }
    })
}

fn sample_shift(
    rng: &mut ChaCha12Rng,
    region: &Array2<bool>,
    h: usize,
    w: usize,
) -> (isize, isize) {
    // Bounding box of the region constrains valid translations.
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            if region[[y, x]] {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    // Source pixel is (y - dy, x - dx); keeping it in bounds for the whole
    // bounding box needs dy in [y1 - (h-1), y0] and dx in [x1 - (w-1), x0].
    let (dy_lo, dy_hi) = (y1 as isize - (h as isize - 1), y0 as isize);
    let (dx_lo, dx_hi) = (x1 as isize - (w as isize - 1), x0 as isize);
    let min_mag = 16isize;
    for _ in 0..64 {
        let dy = rng.gen_range(dy_lo..=dy_hi);
        let dx = rng.gen_range(dx_lo..=dx_hi);
        if dy.abs() + dx.abs() >= min_mag {
            return (dy, dx);
        }
    }
    // Fall back to the largest in-bounds vertical shift.
    let dy = if dy_hi >= -dy_lo { dy_hi } else { dy_lo };
    (dy, 0)
}

fn region_noise(rng: &mut ChaCha12Rng, real: &Array3<f32>, region: &Array2<bool>) -> Array3<f32> {
    let (_, h, w) = real.dim();
    let count = region.iter().filter(|&&r| r).count().max(1) as f32;
    let mut noise = Array3::<f32>::zeros((3, h, w));
    for c in 0..3 {
        let raw = Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0f32..1.0));
        let smooth = blur_channel(&raw, 0.8);
        // Match local mean and a damped local std inside the region.
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                if region[[y, x]] {
                    mean += real[[c, y, x]];
                }
            }
        }
        mean /= count;
        let mut var = 0.0;
        for y in 0..h {
            for x in 0..w {
                if region[[y, x]] {
                    var += (real[[c, y, x]] - mean).powi(2);
                }
            }
        }
        let std = (var / count).sqrt();
        let mut nm = 0.0;
        for &v in smooth.iter() {
            nm += v;
        }
        nm /= (h * w) as f32;
        let mut nv = 0.0;
        for &v in smooth.iter() {
            nv += (v - nm).powi(2);
        }
        let nstd = (nv / (h * w) as f32).sqrt().max(1e-6);
        let scale = (0.6 * std + 0.04) / nstd;
        for y in 0..h {
            for x in 0..w {
                noise[[c, y, x]] = (mean + (smooth[[y, x]] - nm) * scale).clamp(0.0, 1.0);
            }
        }
    }
    noise
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub forgery_kind: ForgeryKind,
    pub seed: u64,
    pub image_sha256: String,
    pub mask_sha256: String,
}

/// One split's worth of records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub generator_version: String,
    pub records: Vec<ManifestRecord>,
}

/// The `manifest.json` at the dataset root.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRoot {
    pub generator_version: String,
    pub resolution: usize,
    pub manifests: Vec<DatasetManifest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn image_to_png_bytes(img: &Array3<f32>) -> Result<Vec<u8>> {
    let (_, h, w) = img.dim();
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw.push((img[[c, y, x]] * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::config("image buffer size mismatch"))?;
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

fn mask_to_png_bytes(mask: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::config("mask buffer size mismatch"))?;
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

pub fn png_bytes_to_image(bytes: &[u8]) -> Result<Array3<f32>> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn png_bytes_to_mask(bytes: &[u8]) -> Result<Array2<u8>> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = if px.0[0] >= 128 { 1 } else { 0 };
    }
    Ok(out)
}

/// Write records under `dir` (`images/*.png`, `masks/*.png`, `manifest.json`).
/// Fails if any path would land in two splits.
pub fn write_dataset(
    dir: &Path,
    resolution: usize,
    per_split: Vec<(Split, Vec<ForgeryRecord>)>,
) -> Result<Vec<DatasetManifest>> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;

    let mut seen_paths: HashSet<String> = HashSet::new();
    let mut manifests = Vec::new();
    for (split, records) in per_split {
        let mut entries = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let id = if rec.id.is_empty() {
                format!("{}_{:05}", split.as_str(), i)
            } else {
                rec.id.clone()
            };
            let image_rel = format!("images/{id}.png");
            let mask_rel = format!("masks/{id}.png");
            for p in [&image_rel, &mask_rel] {
                if !seen_paths.insert(p.clone()) {
                    return Err(Error::ingest(
                        dir.join(p),
                        "path assigned to more than one split",
                    ));
                }
            }
            let img_bytes = image_to_png_bytes(&rec.image)?;
            let mask_bytes = mask_to_png_bytes(&rec.mask)?;
            std::fs::write(dir.join(&image_rel), &img_bytes)?;
            std::fs::write(dir.join(&mask_rel), &mask_bytes)?;
            entries.push(ManifestRecord {
                id,
                image: image_rel.clone(),
                mask: mask_rel.clone(),
                forgery_kind: rec.forgery_kind,
                seed: rec.source_seed,
                image_sha256: sha256_hex(&img_bytes),
                mask_sha256: sha256_hex(&mask_bytes),
            });
        }
        manifests.push(DatasetManifest {
            split,
            generator_version: GENERATOR_VERSION.to_string(),
            records: entries,
        });
    }
    let root = DatasetRoot {
        generator_version: GENERATOR_VERSION.to_string(),
        resolution,
        manifests: manifests.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&root)?)?;
    Ok(manifests)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetRoot> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::ingest(path.clone(), format!("cannot read manifest: {e}")))?;
    let root: DatasetRoot = serde_json::from_slice(&bytes)?;
    let mut seen: HashSet<&str> = HashSet::new();
    for m in &root.manifests {
        for r in &m.records {
            if !seen.insert(r.image.as_str()) || !seen.insert(r.mask.as_str()) {
                return Err(Error::ingest(
                    dir.join(&r.image),
                    "path appears in more than one split",
                ));
            }
        }
    }
    Ok(root)
}

/// Load one split, verifying checksums. Records come back in manifest order.
pub fn load_dataset(dir: &Path, split: Split) -> Result<Vec<ForgeryRecord>> {
    let root = load_manifest(dir)?;
    let manifest = root
        .manifests
        .iter()
        .find(|m| m.split == split)
        .cloned()
        .unwrap_or(DatasetManifest {
            split,
            generator_version: root.generator_version.clone(),
            records: Vec::new(),
        });

    // Records are independent; decode in parallel, keep manifest order.
    manifest
        .records
        .par_iter()
        .map(|r| {
            let read_checked = |rel: &str, want: &str| -> Result<Vec<u8>> {
                let path = dir.join(rel);
                let bytes = std::fs::read(&path)
                    .map_err(|e| Error::ingest(path.clone(), format!("missing file: {e}")))?;
                let got = sha256_hex(&bytes);
                if got != want {
                    return Err(Error::ingest(path, "checksum mismatch"));
                }
                Ok(bytes)
            };
            let img = png_bytes_to_image(&read_checked(&r.image, &r.image_sha256)?)?;
            let mask = png_bytes_to_mask(&read_checked(&r.mask, &r.mask_sha256)?)?;
            Ok(ForgeryRecord {
                id: r.id.clone(),
                image: img,
                mask,
                forgery_kind: r.forgery_kind,
                source_seed: r.seed,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Whole-dataset generation
// ---------------------------------------------------------------------------

/// Parameters for `gen-data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSpec {
    pub seed: u64,
    pub resolution: usize,
    pub patch_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of each split left authentic (kind = none).
    pub authentic_frac: f32,
    pub texture_mix: TextureMix,
    pub forge: ForgeParams,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            resolution: 64,
            patch_size: 8,
            n_train: 200,
            n_val: 50,
            n_test: 50,
            authentic_frac: 0.0,
            texture_mix: TextureMix::default(),
            forge: ForgeParams::default(),
        }
    }
}

const FORGED_KINDS: [ForgeryKind; 3] = [
    ForgeryKind::Splice,
    ForgeryKind::CopyMove,
    ForgeryKind::NoiseFill,
];

/// Generate and persist a dataset. Scene seeds are consecutive integers from
/// `seed`, partitioned across splits, so splits never share a scene.
pub fn generate_dataset(dir: &Path, spec: &GenSpec) -> Result<Vec<DatasetManifest>> {
    let splits = [
        (Split::Train, spec.n_train, 0usize),
        (Split::Val, spec.n_val, spec.n_train),
        (Split::Test, spec.n_test, spec.n_train + spec.n_val),
    ];
    let mut per_split = Vec::new();
    for (split, n, offset) in splits {
        let n_auth = (spec.authentic_frac * n as f32).round() as usize;
        let records: Vec<ForgeryRecord> = (0..n)
            .into_par_iter()
            .map(|i| {
                let scene_seed = spec.seed.wrapping_add((offset + i) as u64);
                let scene = SceneSpec {
                    seed: scene_seed,
                    resolution: spec.resolution,
                    texture_mix: spec.texture_mix,
                };
                let real = generate_real(&scene, spec.patch_size)?;
                let kind = if i < n_auth {
                    ForgeryKind::None
                } else {
                    FORGED_KINDS[(i - n_auth) % FORGED_KINDS.len()]
                };
                let mut rec = forge(&real, kind, mix_seed(&[scene_seed, 77]), &spec.forge)?;
                rec.source_seed = scene_seed;
                Ok(rec)
            })
            .collect::<Result<_>>()?;
        per_split.push((split, records));
    }
    write_dataset(dir, spec.resolution, per_split)
}

// ---------------------------------------------------------------------------
// Batching helpers
// ---------------------------------------------------------------------------

/// Stack records into a `[B, 3, H, W]` batch at any precision.
pub fn image_batch<T: Scalar>(records: &[&ForgeryRecord]) -> Array4<T> {
    let (c, h, w) = records[0].image.dim();
    let mut out = Array4::<T>::zeros((records.len(), c, h, w));
    for (b, rec) in records.iter().enumerate() {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[b, ci, y, x]] = T::from_f64(rec.image[[ci, y, x]] as f64);
                }
            }
        }
    }
    out
}

/// Stack ground-truth masks into `[B, 1, H, W]`.
pub fn mask_batch<T: Scalar>(records: &[&ForgeryRecord]) -> Array4<T> {
    let (h, w) = records[0].mask.dim();
    let mut out = Array4::<T>::zeros((records.len(), 1, h, w));
    for (b, rec) in records.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[b, 0, y, x]] = T::from_f64(rec.mask[[y, x]] as f64);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::new(7, 64);
        let a = generate_real(&spec, 8).unwrap();
        let b = generate_real(&spec, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_real(&SceneSpec::new(7, 64), 8).unwrap();
        let b = generate_real(&SceneSpec::new(8, 64), 8).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn gradient_only_mix_gives_nonconstant_ramps() {
        let spec = SceneSpec {
            seed: 3,
            resolution: 64,
            texture_mix: TextureMix {
                random_field: 0.0,
                gradient: 1.0,
                checker: 0.0,
                blob: 0.0,
            },
        };
        let img = generate_real(&spec, 8).unwrap();
        for c in 0..3 {
            let ch = img.index_axis(ndarray::Axis(0), c);
            let lo = ch.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(hi - lo > 0.0, "channel {c} is constant");
        }
    }

    #[test]
    fn invalid_resolution_rejected() {
        assert!(generate_real(&SceneSpec::new(1, 16), 8).is_err());
        assert!(generate_real(&SceneSpec::new(1, 60), 8).is_err());
    }

    #[test]
    fn values_live_on_8bit_lattice() {
        let img = generate_real(&SceneSpec::new(11, 32), 8).unwrap();
        for &v in img.iter() {
            assert!((0.0..=1.0).contains(&v));
            let k = v * 255.0;
            assert!((k - k.round()).abs() < 1e-4);
        }
    }

    #[test]
    fn forge_none_is_identity() {
        let real = generate_real(&SceneSpec::new(5, 64), 8).unwrap();
        let rec = forge(&real, ForgeryKind::None, 9, &ForgeParams::default()).unwrap();
        assert_eq!(rec.image, real);
        assert!(rec.mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn forged_pixels_match_mask_exactly() {
        let real = generate_real(&SceneSpec::new(5, 64), 8).unwrap();
        for kind in FORGED_KINDS {
            let rec = forge(&real, kind, 123, &ForgeParams::default()).unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    let differs = (0..3).any(|c| rec.image[[c, y, x]] != real[[c, y, x]]);
                    assert_eq!(differs, rec.mask[[y, x]] == 1, "kind {kind:?} at ({y},{x})");
                }
            }
            let frac = rec.mask_fraction();
            assert!(frac >= MASK_FRACTION_BOUNDS.0 && frac <= MASK_FRACTION_BOUNDS.1);
        }
    }

    #[test]
    fn splice_hits_area_target_band() {
        let real = generate_real(&SceneSpec::new(6, 64), 8).unwrap();
        let params = ForgeParams {
            area_range: (0.099, 0.101),
            feather_px: 2.0,
        };
        let rec = forge(&real, ForgeryKind::Splice, 42, &params).unwrap();
        let frac = rec.mask_fraction();
        assert!((0.05..=0.2).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn forge_is_deterministic() {
        let real = generate_real(&SceneSpec::new(5, 64), 8).unwrap();
        let a = forge(&real, ForgeryKind::CopyMove, 50, &ForgeParams::default()).unwrap();
        let b = forge(&real, ForgeryKind::CopyMove, 50, &ForgeParams::default()).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            n_train: 6,
            n_val: 3,
            n_test: 2,
            authentic_frac: 0.34,
            resolution: 32,
            ..Default::default()
        };
        generate_dataset(dir.path(), &spec).unwrap();
        let train = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(train.len(), 6);

        // Regenerate record 3 from its manifest seed; must match bit-exactly.
        let root = load_manifest(dir.path()).unwrap();
        let entry = &root.manifests[0].records[3];
        let scene = SceneSpec {
            seed: entry.seed,
            resolution: 32,
            texture_mix: spec.texture_mix,
        };
        let real = generate_real(&scene, spec.patch_size).unwrap();
        let rec = forge(
            &real,
            entry.forgery_kind,
            mix_seed(&[entry.seed, 77]),
            &spec.forge,
        )
        .unwrap();
        assert_eq!(rec.image, train[3].image);
        assert_eq!(rec.mask, train[3].mask);
    }

    #[test]
    fn empty_split_loads_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            n_train: 2,
            n_val: 0,
            n_test: 0,
            resolution: 32,
            ..Default::default()
        };
        generate_dataset(dir.path(), &spec).unwrap();
        let val = load_dataset(dir.path(), Split::Val).unwrap();
        assert!(val.is_empty());
    }

    #[test]
    fn checksum_mismatch_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            n_train: 2,
            n_val: 0,
            n_test: 0,
            resolution: 32,
            ..Default::default()
        };
        generate_dataset(dir.path(), &spec).unwrap();
        let victim = dir.path().join("images/train_00001.png");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        std::fs::write(&victim, bytes).unwrap();
        let err = load_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("train_00001"), "{err}");
    }

    #[test]
    fn duplicate_path_across_splits_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            n_train: 2,
            n_val: 1,
            n_test: 0,
            resolution: 32,
            ..Default::default()
        };
        generate_dataset(dir.path(), &spec).unwrap();
        let mut root = load_manifest(dir.path()).unwrap();
        let stolen = root.manifests[0].records[0].clone();
        root.manifests[1].records.push(stolen);
        std::fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_vec(&root).unwrap(),
        )
        .unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn split_scene_seeds_are_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            n_train: 4,
            n_val: 4,
            n_test: 4,
            resolution: 32,
            ..Default::default()
        };
        let manifests = generate_dataset(dir.path(), &spec).unwrap();
        let mut seen = HashSet::new();
        for m in &manifests {
            for r in &m.records {
                assert!(seen.insert(r.seed), "seed {} reused across splits", r.seed);
            }
        }
    }

    #[test]
    fn u8_quantization_round_trip_is_exact_for_all_levels() {
        for k in 0u16..=255 {
            let v = k as f32 / 255.0;
            let back = (v * 255.0).round() as u16;
            assert_eq!(back, k);
        }
    }
}
