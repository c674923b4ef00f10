//! The realness prior: a small masked autoencoder pretrained on authentic
//! scenes only, then frozen. Full-visibility reconstruction of a tampered
//! image fails hardest where content leaves the training manifold, and the
//! per-pixel absolute residual carries that signal downstream.

use std::sync::Arc;

use ndarray::{Array3, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{init, AdamW, Block, Fwd, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{image_batch, ForgeryKind, ForgeryRecord};

pub const ENCODER_GROUP: &str = "mae.encoder";
pub const DECODER_GROUP: &str = "mae.decoder";

/// Fixed affine pixel normalization used inside the prior: tokens and decoder
/// targets live in `(x - PIXEL_MEAN) / PIXEL_STD` space so patch content and
/// position embeddings start at comparable magnitudes. Reconstructions and
/// residuals are always mapped back to pixel space.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MAEConfig {
    pub resolution: usize,
    pub patch_size: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Encoder token width (the dimension FiLM modulates).
    pub dim: usize,
    pub decoder_dim: usize,
    pub heads: usize,
    /// Fraction of patches hidden during pretraining only.
    pub mask_ratio: f64,
}

impl Default for MAEConfig {
    fn default() -> Self {
        MAEConfig {
            resolution: 64,
            patch_size: 8,
            encoder_depth: 4,
            decoder_depth: 2,
            dim: 128,
            decoder_dim: 64,
            heads: 4,
            mask_ratio: 0.75,
        }
    }
}

impl MAEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.resolution % self.patch_size != 0 {
            return Err(Error::config(format!(
                "resolution {} not divisible by patch size {}",
                self.resolution, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 || self.decoder_dim % self.heads != 0 {
            return Err(Error::config("token dims must be divisible by head count"));
        }
        if self.dim % 4 != 0 || self.decoder_dim % 4 != 0 {
            return Err(Error::config("token dims must be divisible by 4"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio must be in [0, 1)"));
        }
        Ok(())
    }

    /// Tokens per image.
    pub fn num_patches(&self) -> usize {
        let g = self.resolution / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// `(x - mean) / std` on the tape.
fn normalize_pixels<T: Scalar>(f: &mut Fwd<T>, x: Var) -> Var {
    let c = f.tape.add_scalar(x, -T::from_f64(PIXEL_MEAN));
    f.tape.scale(c, T::from_f64(1.0 / PIXEL_STD))
}

/// Inverse of [`normalize_pixels`].
fn denormalize_pixels<T: Scalar>(f: &mut Fwd<T>, x: Var) -> Var {
    let c = f.tape.scale(x, T::from_f64(PIXEL_STD));
    f.tape.add_scalar(c, T::from_f64(PIXEL_MEAN))
}

#[derive(Debug, Clone)]
pub struct MaeEncoder {
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl MaeEncoder {
    fn new<T: Scalar>(init_cx: &mut Init<T>, cfg: &MAEConfig) -> Self {
        let g = cfg.resolution / cfg.patch_size;
        MaeEncoder {
            patch_embed: Linear::new(init_cx, "patch_embed", cfg.patch_dim(), cfg.dim),
            pos: init_cx.param("pos", init::sincos_2d(g, g, cfg.dim)),
            blocks: (0..cfg.encoder_depth)
                .map(|i| Block::new(init_cx, &format!("block{i}"), cfg.dim, cfg.heads, 4, 1))
                .collect(),
            norm: LayerNorm::new(init_cx, "norm", cfg.dim),
        }
    }

    /// Embed patches, add positions, optionally keep only `visible` tokens,
    /// then run the transformer. Input is the raw image `[B, 3, H, W]`.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        image: Var,
        patch_size: usize,
        visible: Option<&Arc<Vec<Vec<usize>>>>,
    ) -> Var {
        let patches = f.tape.patchify(image, patch_size);
        let patches = normalize_pixels(f, patches);
        let mut x = self.patch_embed.forward(f, patches);
        let pos = f.p(self.pos);
        x = f.tape.add_bcast0(x, pos);
        if let Some(idx) = visible {
            x = f.tape.gather_tokens(x, Arc::clone(idx));
        }
        for b in &self.blocks {
            x = b.forward(f, x, None);
        }
        self.norm.forward(f, x)
    }
}

#[derive(Debug, Clone)]
pub struct MaeDecoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pred: Linear,
}

impl MaeDecoder {
    pub fn new<T: Scalar>(init_cx: &mut Init<T>, cfg: &MAEConfig) -> Self {
        let g = cfg.resolution / cfg.patch_size;
        MaeDecoder {
            embed: Linear::new(init_cx, "embed", cfg.dim, cfg.decoder_dim),
            mask_token: init_cx.trunc_normal("mask_token", &[cfg.decoder_dim], 0.02),
            pos: init_cx.param("pos", init::sincos_2d(g, g, cfg.decoder_dim)),
            blocks: (0..cfg.decoder_depth)
                .map(|i| {
                    Block::new(
                        init_cx,
                        &format!("block{i}"),
                        cfg.decoder_dim,
                        cfg.heads,
                        4,
                        1,
                    )
                })
                .collect(),
            norm: LayerNorm::new(init_cx, "norm", cfg.decoder_dim),
            pred: Linear::new(init_cx, "pred", cfg.decoder_dim, cfg.patch_dim()),
        }
    }

    /// Decode encoder tokens to per-patch pixel predictions `[B, N, 3*ps*ps]`.
    /// When `visible` is given, the missing positions are filled with the
    /// learned mask token before decoding.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        tokens: Var,
        visible: Option<&Arc<Vec<Vec<usize>>>>,
        n_total: usize,
    ) -> Var {
        let mut x = self.embed.forward(f, tokens);
        if let Some(idx) = visible {
            let fill = f.p(self.mask_token);
            x = f.tape.scatter_tokens(x, Arc::clone(idx), n_total, fill);
        }
        let pos = f.p(self.pos);
        x = f.tape.add_bcast0(x, pos);
        for b in &self.blocks {
            x = b.forward(f, x, None);
        }
        let x = self.norm.forward(f, x);
        self.pred.forward(f, x)
    }
}

/// Encoder + stage-1 decoder, plus the config they were built for.
#[derive(Debug, Clone)]
pub struct Mae {
    pub cfg: MAEConfig,
    pub encoder: MaeEncoder,
    pub decoder: MaeDecoder,
}

impl Mae {
    /// Build with a self-contained ChaCha stream derived from `seed`.
    pub fn build_seeded<T: Scalar>(
        store: &mut ParamStore<T>,
        seed: u64,
        cfg: MAEConfig,
    ) -> Result<Self> {
        let mut rng =
            ChaCha12Rng::seed_from_u64(crate::synth::mix_seed(&[seed, 0x3AE]));
        Self::build(store, &mut rng, cfg)
    }

    /// Build fresh weights under the `mae.encoder` / `mae.decoder` groups.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        cfg: MAEConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut init_cx = Init::new(store, rng);
        let (encoder, decoder) = init_cx.scoped("mae", |b| {
            let e = b.scoped("encoder", |b| MaeEncoder::new(b, &cfg));
            let d = b.scoped("decoder", |b| MaeDecoder::new(b, &cfg));
            (e, d)
        });
        Ok(Mae {
            cfg,
            encoder,
            decoder,
        })
    }

    /// Full-visibility reconstruction on the tape. Returns
    /// `(x_rec, residual, tokens)`; deterministic, no masking involved.
    pub fn reconstruct_vars<T: Scalar>(&self, f: &mut Fwd<T>, image: Var) -> (Var, Var, Var) {
        let (c, h, w) = (3, self.cfg.resolution, self.cfg.resolution);
        let tokens = self
            .encoder
            .forward(f, image, self.cfg.patch_size, None);
        let pred = self
            .decoder
            .forward(f, tokens, None, self.cfg.num_patches());
        let pred = denormalize_pixels(f, pred);
        let x_rec = f.tape.unpatchify(pred, self.cfg.patch_size, c, h, w);
        let diff = f.tape.sub(image, x_rec);
        let residual = f.tape.abs_val(diff);
        (x_rec, residual, tokens)
    }
}

/// Plain-array reconstruction output.
#[derive(Debug, Clone)]
pub struct ReconResult<T: Scalar> {
    pub x_rec: Array4<T>,
    pub residual: Array4<T>,
    pub tokens: Array3<T>,
}

fn to4<T: Scalar>(a: &ArrayD<T>) -> Array4<T> {
    a.clone().into_dimensionality().unwrap()
}

fn to3<T: Scalar>(a: &ArrayD<T>) -> Array3<T> {
    a.clone().into_dimensionality().unwrap()
}

/// Evaluate the frozen reconstructor on a batch (no gradients).
pub fn reconstruct_batch<T: Scalar>(
    store: &ParamStore<T>,
    mae: &Mae,
    images: &Array4<T>,
) -> Result<ReconResult<T>> {
    if images.dim().2 != mae.cfg.resolution || images.dim().3 != mae.cfg.resolution {
        return Err(Error::shape(format!(
            "image {}x{} does not match config resolution {}",
            images.dim().2,
            images.dim().3,
            mae.cfg.resolution
        )));
    }
    let mut f = Fwd::eval(store);
    let x = f.tape.constant(images.clone().into_dyn());
    let (x_rec, residual, tokens) = mae.reconstruct_vars(&mut f, x);
    Ok(ReconResult {
        x_rec: to4(f.tape.val(x_rec)),
        residual: to4(f.tape.val(residual)),
        tokens: to3(f.tape.val(tokens)),
    })
}

/// Pretraining hyperparameters (the masked-reconstruction stage).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 40,
            batch_size: 16,
            lr: 2e-4,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainStats {
    pub epoch_losses: Vec<f64>,
    pub final_train_loss: f64,
}

/// Sample, per image, the sorted visible-token index set for one step.
fn sample_visible(
    rng: &mut ChaCha12Rng,
    batch: usize,
    n: usize,
    mask_ratio: f64,
) -> Arc<Vec<Vec<usize>>> {
    let n_masked = ((n as f64) * mask_ratio).floor() as usize;
    let n_vis = n - n_masked;
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let mut vis: Vec<usize> = idx[..n_vis].to_vec();
        vis.sort_unstable();
        out.push(vis);
    }
    Arc::new(out)
}

fn masked_complement(visible: &[Vec<usize>], n: usize) -> Arc<Vec<Vec<usize>>> {
    let out = visible
        .iter()
        .map(|vis| {
            let set: std::collections::HashSet<usize> = vis.iter().copied().collect();
            (0..n).filter(|i| !set.contains(i)).collect()
        })
        .collect();
    Arc::new(out)
}

/// Masked-reconstruction loss for one batch: MSE over the hidden patches.
fn masked_step_loss<T: Scalar>(
    f: &mut Fwd<T>,
    mae: &Mae,
    images: &Array4<T>,
    visible: &Arc<Vec<Vec<usize>>>,
    masked: &Arc<Vec<Vec<usize>>>,
) -> Var {
    let n = mae.cfg.num_patches();
    let x = f.tape.constant(images.clone().into_dyn());
    let tokens = mae
        .encoder
        .forward(f, x, mae.cfg.patch_size, Some(visible));
    let pred = mae.decoder.forward(f, tokens, Some(visible), n);
    let target = f.tape.patchify(x, mae.cfg.patch_size);
    let target = normalize_pixels(f, target);
    let pred_masked = f.tape.gather_tokens(pred, Arc::clone(masked));
    let target_masked = f.tape.gather_tokens(target, Arc::clone(masked));
    let diff = f.tape.sub(pred_masked, target_masked);
    let sq = f.tape.mul(diff, diff);
    f.tape.mean_all(sq)
}

/// Pretrain on authentic images, then freeze both encoder and decoder.
/// Refuses any record whose kind is not `none`.
pub fn pretrain<T: Scalar>(
    store: &mut ParamStore<T>,
    mae: &Mae,
    records: &[ForgeryRecord],
    cfg: &PretrainConfig,
) -> Result<PretrainStats> {
    if let Some(bad) = records.iter().find(|r| r.forgery_kind != ForgeryKind::None) {
        return Err(Error::config(format!(
            "pretraining dataset must contain only authentic images (found {} record {})",
            bad.forgery_kind.as_str(),
            bad.id
        )));
    }
    if records.is_empty() && cfg.epochs > 0 {
        return Err(Error::config("pretraining dataset is empty"));
    }

    let n = mae.cfg.num_patches();
    let mut opt = AdamW::new(
        T::from_f64(cfg.lr),
        T::from_f64(cfg.weight_decay),
        store.len(),
    );
    let mut stats = PretrainStats {
        epoch_losses: Vec::new(),
        final_train_loss: f64::NAN,
    };
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(crate::synth::mix_seed(&[
            cfg.seed, 0xA11, epoch as u64,
        ]));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&ForgeryRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let images = image_batch::<T>(&refs);
            let mut mask_rng = ChaCha12Rng::seed_from_u64(crate::synth::mix_seed(&[
                cfg.seed,
                0xB22,
                epoch as u64,
                step as u64,
            ]));
            let visible = sample_visible(&mut mask_rng, refs.len(), n, mae.cfg.mask_ratio);
            let masked = masked_complement(&visible, n);

            let mut f = Fwd::train(store);
            let loss = masked_step_loss(&mut f, mae, &images, &visible, &masked);
            let loss_val = f.tape.val(loss)[[]].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: step,
                    records: refs.iter().map(|r| r.id.clone()).collect(),
                });
            }
            let mut grads = f.backward_params(loss);
            drop(f);
            opt.step(store, &mut grads, Some(1.0));
            epoch_loss += loss_val;
            batches += 1;
        }
        stats.epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    stats.final_train_loss = stats.epoch_losses.last().copied().unwrap_or(f64::NAN);

    store.set_frozen_prefix(ENCODER_GROUP, true);
    store.set_frozen_prefix(DECODER_GROUP, true);
    Ok(stats)
}

/// Masked-reconstruction MSE of the current weights on a record set, with
/// masking drawn from `seed`. Used to compare against the mean-patch baseline.
pub fn masked_eval_mse<T: Scalar>(
    store: &ParamStore<T>,
    mae: &Mae,
    records: &[ForgeryRecord],
    seed: u64,
) -> Result<f64> {
    let n = mae.cfg.num_patches();
    let refs: Vec<&ForgeryRecord> = records.iter().collect();
    let images = image_batch::<T>(&refs);
    let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::mix_seed(&[seed, 0xC33]));
    let visible = sample_visible(&mut rng, refs.len(), n, mae.cfg.mask_ratio);
    let masked = masked_complement(&visible, n);
    let mut f = Fwd::eval(store);
    let loss = masked_step_loss(&mut f, mae, &images, &visible, &masked);
    // The training objective lives in normalized space; report pixel-space
    // MSE so the mean-patch baseline comparison is apples to apples.
    Ok(f.tape.val(loss)[[]].to_f64() * PIXEL_STD * PIXEL_STD)
}

/// MSE of predicting the training-set mean patch for every masked patch,
/// evaluated with the same masking stream as [`masked_eval_mse`].
pub fn mean_patch_baseline_mse(
    mae: &Mae,
    train: &[ForgeryRecord],
    eval: &[ForgeryRecord],
    seed: u64,
) -> f64 {
    let ps = mae.cfg.patch_size;
    let n = mae.cfg.num_patches();
    let pd = mae.cfg.patch_dim();

    let patchify_plain = |rec: &ForgeryRecord| -> Vec<f64> {
        let g = mae.cfg.resolution / ps;
        let mut out = vec![0.0; n * pd];
        for gy in 0..g {
            for gx in 0..g {
                let tok = gy * g + gx;
                for c in 0..3 {
                    for py in 0..ps {
                        for px in 0..ps {
                            out[tok * pd + (c * ps + py) * ps + px] =
                                rec.image[[c, gy * ps + py, gx * ps + px]] as f64;
                        }
                    }
                }
            }
        }
        out
    };

    let mut mean = vec![0.0f64; pd];
    let mut count = 0usize;
    for rec in train {
        let p = patchify_plain(rec);
        for tok in 0..n {
            for j in 0..pd {
                mean[j] += p[tok * pd + j];
            }
        }
        count += n;
    }
    mean.iter_mut().for_each(|m| *m /= count.max(1) as f64);

    let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::mix_seed(&[seed, 0xC33]));
    let visible = sample_visible(&mut rng, eval.len(), n, mae.cfg.mask_ratio);
    let masked = masked_complement(&visible, n);
    let mut acc = 0.0;
    let mut elems = 0usize;
    for (b, rec) in eval.iter().enumerate() {
        let p = patchify_plain(rec);
        for &tok in &masked[b] {
            for j in 0..pd {
                let d = p[tok * pd + j] - mean[j];
                acc += d * d;
                elems += 1;
            }
        }
    }
    acc / elems.max(1) as f64
}

/// Absolute per-pixel difference of two equally-shaped stacks.
pub fn residual_of<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let mut out = a.clone();
    out.zip_mut_with(b, |o, &v| *o = (*o - v).abs());
    out
}

/// Mean residual inside and outside a ground-truth mask (mask is `[H, W]`).
pub fn residual_split_means<T: Scalar>(
    residual: &Array4<T>,
    mask: &ndarray::Array2<u8>,
    batch_idx: usize,
) -> (f64, f64) {
    let (_, c, h, w) = residual.dim();
    let mut in_sum = 0.0;
    let mut in_n = 0usize;
    let mut out_sum = 0.0;
    let mut out_n = 0usize;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = residual[[batch_idx, ci, y, x]].to_f64();
                if mask[[y, x]] != 0 {
                    in_sum += v;
                    in_n += 1;
                } else {
                    out_sum += v;
                    out_n += 1;
                }
            }
        }
    }
    (
        in_sum / in_n.max(1) as f64,
        out_sum / out_n.max(1) as f64,
    )
}
