//! Two-stage closed-loop orchestration: reconstruct, segment coarsely, encode
//! the coarse mask into prompts, amplify the residual through a guided
//! decoder, segment again with the same weights, train the whole thing
//! jointly with early stopping, and evaluate both stages.

use base64::Engine as _;
use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::{self, Checkpoint, RngState};
use crate::dssn::{Dssn, DSSNConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, MetricReport};
use crate::mae::{Mae, MaeDecoder, MAEConfig, DECODER_GROUP, ENCODER_GROUP};
use crate::nn::{AdamW, Fwd, Init, ParamGrads, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{image_batch, mask_batch, ForgeryRecord};
use crate::tapi::{PromptEncoderConfig, Tapi, DECODER2_GROUP};

pub const METRIC_THRESHOLD: f64 = 0.5;

/// Component toggles matching the four ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Dual-stream segmenter with cross-attention fusion; otherwise a single
    /// stream over the channel-stacked `[image, residual]`.
    pub use_dssn_dual: bool,
    /// Run the prompt/FiLM second stage at all.
    pub use_tapi: bool,
    /// Fine-tune a second-stage decoder copy; otherwise the frozen decoder
    /// serves both stages (FiLM only).
    pub use_adaptive_decoder: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_dssn_dual: true,
            use_tapi: true,
            use_adaptive_decoder: true,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.use_adaptive_decoder && !self.use_tapi {
            return Err(Error::config(
                "use_adaptive_decoder requires use_tapi".to_string(),
            ));
        }
        Ok(())
    }

    /// The standard four-row sweep, weakest configuration first.
    pub fn ablation_table() -> [(&'static str, AblationFlags); 4] {
        [
            (
                "I",
                AblationFlags {
                    use_dssn_dual: false,
                    use_tapi: false,
                    use_adaptive_decoder: false,
                },
            ),
            (
                "II",
                AblationFlags {
                    use_dssn_dual: true,
                    use_tapi: false,
                    use_adaptive_decoder: false,
                },
            ),
            (
                "III",
                AblationFlags {
                    use_dssn_dual: true,
                    use_tapi: true,
                    use_adaptive_decoder: false,
                },
            ),
            (
                "IV",
                AblationFlags {
                    use_dssn_dual: true,
                    use_tapi: true,
                    use_adaptive_decoder: true,
                },
            ),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping: stop once validation refined IoU has not improved for
    /// this many epochs.
    pub patience: usize,
    pub alpha: f64,
    pub seed: u64,
    pub grad_clip: f64,
    /// Keep the second stage disabled until this epoch.
    pub stage2_start_epoch: usize,
    /// Stop refinement-loss gradients at the coarse mask.
    pub detach_prompt: bool,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            weight_decay: 1e-5,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            alpha: losses::DEFAULT_ALPHA,
            seed: 0,
            grad_clip: 1.0,
            stage2_start_epoch: 0,
            detach_prompt: false,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.patience >= self.max_epochs.max(1) {
            return Err(Error::config(format!(
                "patience {} must be smaller than max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// The assembled two-stage model.
pub struct Model<T: Scalar> {
    pub store: ParamStore<T>,
    pub mae: Mae,
    pub dssn: Dssn,
    pub tapi: Option<Tapi>,
    pub decoder2: Option<MaeDecoder>,
    pub flags: AblationFlags,
    pub prompt_cfg: PromptEncoderConfig,
}

impl<T: Scalar> Model<T> {
    /// Build all parameter groups in a fixed order (checkpoint compatibility
    /// depends on it): mae.encoder, mae.decoder, dssn, tapi.prompt,
    /// tapi.film, mae.decoder_stage2.
    pub fn build(
        mae_cfg: MAEConfig,
        dssn_cfg: DSSNConfig,
        prompt_cfg: PromptEncoderConfig,
        flags: AblationFlags,
        detach_prompt: bool,
        seed: u64,
    ) -> Result<Model<T>> {
        flags.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::mix_seed(&[seed, 0x0DE1]));
        let resolution = mae_cfg.resolution;
        let mae = Mae::build(&mut store, &mut rng, mae_cfg)?;
        let dssn_cfg = DSSNConfig {
            dual_stream: flags.use_dssn_dual,
            ..dssn_cfg
        };
        let dssn = Dssn::build(&mut store, &mut rng, dssn_cfg, resolution)?;
        let tapi = if flags.use_tapi {
            Some(Tapi::build(
                &mut store,
                &mut rng,
                prompt_cfg.clone(),
                resolution,
                mae.cfg.dim,
                detach_prompt,
            )?)
        } else {
            None
        };
        let decoder2 = if flags.use_adaptive_decoder {
            let mut init = Init::new(&mut store, &mut rng);
            Some(init.scoped(DECODER2_GROUP, |i| MaeDecoder::new(i, &mae.cfg)))
        } else {
            None
        };
        Ok(Model {
            store,
            mae,
            dssn,
            tapi,
            decoder2,
            flags,
            prompt_cfg,
        })
    }

    /// Copy the pretrained stage-1 decoder weights onto the trainable
    /// second-stage decoder. Must run after MAE weights are final.
    pub fn sync_stage2_decoder(&mut self) {
        if self.decoder2.is_some() {
            self.store
                .copy_group_values(&format!("{DECODER_GROUP}."), &format!("{DECODER2_GROUP}."));
        }
    }

    /// Freeze the realness prior (encoder and stage-1 decoder).
    pub fn freeze_prior(&mut self) {
        self.store.set_frozen_prefix(ENCODER_GROUP, true);
        self.store.set_frozen_prefix(DECODER_GROUP, true);
    }

    pub fn resolution(&self) -> usize {
        self.mae.cfg.resolution
    }
}

/// Per-record frozen stage-1 results. The prior never changes during
/// training, so reconstruction is computed once per image and reused.
#[derive(Debug, Clone)]
pub struct Stage1Cache<T: Scalar> {
    pub recon: Array4<T>,
    pub residual: Array4<T>,
    pub tokens: Array3<T>,
}

/// Precompute stage-1 reconstructions for a record list.
pub fn precompute_stage1<T: Scalar>(
    model: &Model<T>,
    records: &[&ForgeryRecord],
    batch_size: usize,
) -> Result<Vec<Stage1Cache<T>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let images = image_batch::<T>(chunk);
        let rec = crate::mae::reconstruct_batch(&model.store, &model.mae, &images)?;
        for (i, _) in chunk.iter().enumerate() {
            out.push(Stage1Cache {
                recon: rec
                    .x_rec
                    .slice(ndarray::s![i..i + 1, .., .., ..])
                    .to_owned(),
                residual: rec
                    .residual
                    .slice(ndarray::s![i..i + 1, .., .., ..])
                    .to_owned(),
                tokens: rec.tokens.slice(ndarray::s![i..i + 1, .., ..]).to_owned(),
            });
        }
    }
    Ok(out)
}

fn stack_caches<T: Scalar>(caches: &[&Stage1Cache<T>]) -> (Array4<T>, Array4<T>, Array3<T>) {
    let recon = ndarray::concatenate(
        ndarray::Axis(0),
        &caches.iter().map(|c| c.recon.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    let residual = ndarray::concatenate(
        ndarray::Axis(0),
        &caches.iter().map(|c| c.residual.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    let tokens = ndarray::concatenate(
        ndarray::Axis(0),
        &caches.iter().map(|c| c.tokens.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    (recon, residual, tokens)
}

/// Tape handles for one forward pass.
pub struct TraceVars {
    pub image: Var,
    pub recon_s1: Var,
    pub residual_s1: Var,
    pub coarse_mask: Var,
    pub prompts: Option<Var>,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
    pub recon_s2: Option<Var>,
    pub residual_s2: Option<Var>,
    pub refined_mask: Var,
}

/// Run the closed loop on the tape. `stage1` short-circuits the frozen prior
/// with precomputed values (bitwise identical to recomputing them).
/// `enable_stage2` is the warm-up override; pass `true` normally.
pub fn forward_vars<T: Scalar>(
    f: &mut Fwd<T>,
    model: &Model<T>,
    images: &Array4<T>,
    stage1: Option<(&Array4<T>, &Array4<T>, &Array3<T>)>,
    enable_stage2: bool,
) -> Result<TraceVars> {
    let x = f.tape.constant(images.clone().into_dyn());
    let (recon_s1, residual_s1, tokens) = match stage1 {
        Some((recon, residual, tokens)) => {
            let r = f.tape.constant(recon.clone().into_dyn());
            let d = f.tape.constant(residual.clone().into_dyn());
            let t = f.tape.constant(tokens.clone().into_dyn());
            (r, d, t)
        }
        None => model.mae.reconstruct_vars(f, x),
    };
    let (coarse_mask, _) = model.dssn.forward(f, x, residual_s1)?;

    let run_stage2 = model.flags.use_tapi && enable_stage2;
    if !run_stage2 {
        return Ok(TraceVars {
            image: x,
            recon_s1,
            residual_s1,
            coarse_mask,
            prompts: None,
            gamma: None,
            beta: None,
            recon_s2: None,
            residual_s2: None,
            refined_mask: coarse_mask,
        });
    }

    let tapi = model.tapi.as_ref().expect("use_tapi implies tapi module");
    let decoder = model
        .decoder2
        .as_ref()
        .unwrap_or(&model.mae.decoder);
    let (recon_s2, residual_s2, prompts, gamma, beta) = tapi.guided_reconstruct(
        f,
        x,
        tokens,
        coarse_mask,
        decoder,
        model.mae.cfg.patch_size,
    );
    let (refined_mask, _) = model.dssn.forward(f, x, residual_s2)?;
    Ok(TraceVars {
        image: x,
        recon_s1,
        residual_s1,
        coarse_mask,
        prompts: Some(prompts),
        gamma: Some(gamma),
        beta: Some(beta),
        recon_s2: Some(recon_s2),
        residual_s2: Some(residual_s2),
        refined_mask,
    })
}

/// Plain-array snapshot of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Scalar> {
    pub image: Array4<T>,
    pub recon_s1: Array4<T>,
    pub residual_s1: Array4<T>,
    pub coarse_mask: Array4<T>,
    pub prompts: Option<Array3<T>>,
    pub film_gamma: Option<Array2<T>>,
    pub film_beta: Option<Array2<T>>,
    pub recon_s2: Option<Array4<T>>,
    pub residual_s2: Option<Array4<T>>,
    pub refined_mask: Array4<T>,
}

fn to4<T: Scalar>(a: &ArrayD<T>) -> Array4<T> {
    a.clone().into_dimensionality().unwrap()
}

/// Evaluate the full closed loop on a batch of images (no gradients, no
/// ground truth anywhere in the signature).
pub fn forward_two_stage<T: Scalar>(
    model: &Model<T>,
    images: &Array4<T>,
) -> Result<ForwardTrace<T>> {
    let mut f = Fwd::eval(&model.store);
    let tv = forward_vars(&mut f, model, images, None, true)?;
    let take4 = |v: Option<Var>| v.map(|v| to4(f.tape.val(v)));
    Ok(ForwardTrace {
        image: to4(f.tape.val(tv.image)),
        recon_s1: to4(f.tape.val(tv.recon_s1)),
        residual_s1: to4(f.tape.val(tv.residual_s1)),
        coarse_mask: to4(f.tape.val(tv.coarse_mask)),
        prompts: tv
            .prompts
            .map(|v| f.tape.val(v).clone().into_dimensionality().unwrap()),
        film_gamma: tv
            .gamma
            .map(|v| f.tape.val(v).clone().into_dimensionality().unwrap()),
        film_beta: tv
            .beta
            .map(|v| f.tape.val(v).clone().into_dimensionality().unwrap()),
        recon_s2: take4(tv.recon_s2),
        residual_s2: take4(tv.residual_s2),
        refined_mask: to4(f.tape.val(tv.refined_mask)),
    })
}

/// One epoch row of the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_crs: f64,
    pub l_ref: f64,
    pub l_total: f64,
    pub val_iou_crs: f64,
    pub val_iou_ref: f64,
    pub val_f1_ref: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub epochs_run: usize,
}

struct ChunkResult<T: Scalar> {
    grads: ParamGrads<T>,
    l_crs: f64,
    l_ref: f64,
    l_total: f64,
    n: usize,
}

fn run_chunk<T: Scalar>(
    model: &Model<T>,
    records: &[&ForgeryRecord],
    caches: &[&Stage1Cache<T>],
    alpha: f64,
    enable_stage2: bool,
) -> Result<ChunkResult<T>> {
    let images = image_batch::<T>(records);
    let targets = mask_batch::<T>(records);
    let (recon, residual, tokens) = stack_caches(caches);
    let mut f = Fwd::train(&model.store);
    let tv = forward_vars(
        &mut f,
        model,
        &images,
        Some((&recon, &residual, &tokens)),
        enable_stage2,
    )?;
    let target = f.tape.constant(targets.into_dyn());
    let l_crs = losses::stage_loss(&mut f, tv.coarse_mask, target);
    let l_ref = if tv.refined_mask == tv.coarse_mask {
        l_crs
    } else {
        losses::stage_loss(&mut f, tv.refined_mask, target)
    };
    let l_total = losses::total_loss(&mut f, l_ref, l_crs, T::from_f64(alpha));
    let result = ChunkResult {
        l_crs: f.tape.val(l_crs)[[]].to_f64(),
        l_ref: f.tape.val(l_ref)[[]].to_f64(),
        l_total: f.tape.val(l_total)[[]].to_f64(),
        n: records.len(),
        grads: f.backward_params(l_total),
    };
    Ok(result)
}

/// Joint training with early stopping on validation refined IoU.
/// The model must hold a pretrained, frozen prior (see
/// [`Model::freeze_prior`] / [`Model::sync_stage2_decoder`]).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_records: &[ForgeryRecord],
    val_records: &[ForgeryRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.flags != model.flags {
        return Err(Error::config(
            "TrainConfig flags differ from the flags the model was built with",
        ));
    }
    if train_records.is_empty() {
        return Err(Error::config("empty training set"));
    }

    let train_refs: Vec<&ForgeryRecord> = train_records.iter().collect();
    let val_refs: Vec<&ForgeryRecord> = val_records.iter().collect();
    let train_cache = precompute_stage1(model, &train_refs, cfg.batch_size.max(8))?;
    let val_cache = precompute_stage1(model, &val_refs, cfg.batch_size.max(8))?;

    let mut opt = AdamW::new(
        T::from_f64(cfg.lr),
        T::from_f64(cfg.weight_decay),
        model.store.len(),
    );

    let mut log = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_iou = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<ArrayD<T>>> = None;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let enable_stage2 = epoch >= cfg.stage2_start_epoch;
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(crate::synth::mix_seed(&[
            cfg.seed,
            0x0D0E,
            epoch as u64,
        ]));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let recs: Vec<&ForgeryRecord> = batch.iter().map(|&i| train_refs[i]).collect();
            let caches: Vec<&Stage1Cache<T>> = batch.iter().map(|&i| &train_cache[i]).collect();
            // Two fixed micro-chunks run in parallel; results are combined in
            // a fixed order so the step is deterministic.
            let split = recs.len().div_ceil(2);
            let (ra, rb) = if recs.len() > 1 {
                let (recs_a, recs_b) = recs.split_at(split);
                let (cache_a, cache_b) = caches.split_at(split);
                rayon::join(
                    || run_chunk(model, recs_a, cache_a, cfg.alpha, enable_stage2),
                    || run_chunk(model, recs_b, cache_b, cfg.alpha, enable_stage2),
                )
            } else {
                (
                    run_chunk(model, &recs, &caches, cfg.alpha, enable_stage2),
                    Ok(ChunkResult {
                        grads: ParamGrads::zeros(model.store.len()),
                        l_crs: 0.0,
                        l_ref: 0.0,
                        l_total: 0.0,
                        n: 0,
                    }),
                )
            };
            let ra = ra?;
            let rb = rb?;
            let n = (ra.n + rb.n) as f64;
            let (wa, wb) = (ra.n as f64 / n, rb.n as f64 / n);
            let l_crs = ra.l_crs * wa + rb.l_crs * wb;
            let l_ref = ra.l_ref * wa + rb.l_ref * wb;
            let l_total = ra.l_total * wa + rb.l_total * wb;
            if !(l_total.is_finite() && ra.grads.all_finite() && rb.grads.all_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    records: recs.iter().map(|r| r.id.clone()).collect(),
                });
            }
            let mut grads = ParamGrads::zeros(model.store.len());
            grads.axpy(T::from_f64(wa), &ra.grads);
            grads.axpy(T::from_f64(wb), &rb.grads);
            opt.step(&mut model.store, &mut grads, Some(cfg.grad_clip));

            sums.0 += l_crs * n;
            sums.1 += l_ref * n;
            sums.2 += l_total * n;
            seen += ra.n + rb.n;
        }

        let (val_coarse, val_refined) =
            evaluate_with_cache(model, &val_refs, &val_cache, cfg.batch_size)?;
        let row = EpochLog {
            epoch,
            l_crs: sums.0 / seen as f64,
            l_ref: sums.1 / seen as f64,
            l_total: sums.2 / seen as f64,
            val_iou_crs: val_coarse.iou,
            val_iou_ref: val_refined.iou,
            val_f1_ref: val_refined.f1,
        };
        log.push(row);

        let score = if val_refs.is_empty() {
            // No validation set: keep the last epoch.
            epoch as f64
        } else {
            row.val_iou_ref
        };
        if score > best_iou {
            best_iou = score;
            best_epoch = epoch;
            best_params = Some(
                model
                    .store
                    .iter()
                    .map(|(_, e)| e.value.clone())
                    .collect(),
            );
        }
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    if let Some(best) = best_params {
        for (i, v) in best.into_iter().enumerate() {
            *model.store.value_mut(crate::nn::ParamId(i)) = v;
        }
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_iou: best_iou,
        epochs_run,
    })
}

/// Loss breakdown of one batch under the current weights (no update).
pub fn loss_on_batch<T: Scalar>(
    model: &Model<T>,
    records: &[&ForgeryRecord],
    alpha: f64,
) -> Result<LossBreakdown> {
    let images = image_batch::<T>(records);
    let targets = mask_batch::<T>(records);
    let mut f = Fwd::eval(&model.store);
    let tv = forward_vars(&mut f, model, &images, None, true)?;
    let target = f.tape.constant(targets.into_dyn());
    let l_crs = losses::stage_loss(&mut f, tv.coarse_mask, target);
    let l_ref = if tv.refined_mask == tv.coarse_mask {
        l_crs
    } else {
        losses::stage_loss(&mut f, tv.refined_mask, target)
    };
    Ok(LossBreakdown::new(
        f.tape.val(l_crs)[[]].to_f64(),
        f.tape.val(l_ref)[[]].to_f64(),
        alpha,
    ))
}

fn evaluate_with_cache<T: Scalar>(
    model: &Model<T>,
    records: &[&ForgeryRecord],
    caches: &[Stage1Cache<T>],
    batch_size: usize,
) -> Result<(MetricReport, MetricReport)> {
    let mut coarse = MetricReport::empty(METRIC_THRESHOLD);
    let mut refined = MetricReport::empty(METRIC_THRESHOLD);
    let bs = batch_size.max(1);
    for (chunk, cache_chunk) in records.chunks(bs).zip(caches.chunks(bs)) {
        let images = image_batch::<T>(chunk);
        let targets = mask_batch::<T>(chunk);
        let cache_refs: Vec<&Stage1Cache<T>> = cache_chunk.iter().collect();
        let (recon, residual, tokens) = stack_caches(&cache_refs);
        let mut f = Fwd::eval(&model.store);
        let tv = forward_vars(&mut f, model, &images, Some((&recon, &residual, &tokens)), true)?;
        let ids: Vec<String> = chunk.iter().map(|r| r.id.clone()).collect();
        let m_crs = to4(f.tape.val(tv.coarse_mask));
        let m_ref = to4(f.tape.val(tv.refined_mask));
        let rc = losses::iou_f1(&m_crs, &targets, METRIC_THRESHOLD, Some(&ids));
        let rr = losses::iou_f1(&m_ref, &targets, METRIC_THRESHOLD, Some(&ids));
        coarse.per_image.extend(rc.per_image);
        refined.per_image.extend(rr.per_image);
    }
    finalize_means(&mut coarse);
    finalize_means(&mut refined);
    Ok((coarse, refined))
}

fn finalize_means(r: &mut MetricReport) {
    let n = r.per_image.len();
    if n > 0 {
        r.iou = r.per_image.iter().map(|m| m.iou).sum::<f64>() / n as f64;
        r.f1 = r.per_image.iter().map(|m| m.f1).sum::<f64>() / n as f64;
    }
}

/// Deterministic evaluation of both stages. Empty input gives empty reports.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    records: &[ForgeryRecord],
    batch_size: usize,
) -> Result<(MetricReport, MetricReport)> {
    let refs: Vec<&ForgeryRecord> = records.iter().collect();
    if refs.is_empty() {
        return Ok((
            MetricReport::empty(METRIC_THRESHOLD),
            MetricReport::empty(METRIC_THRESHOLD),
        ));
    }
    let caches = precompute_stage1(model, &refs, batch_size.max(8))?;
    evaluate_with_cache(model, &refs, &caches, batch_size)
}

// ---------------------------------------------------------------------------
// Checkpoint glue
// ---------------------------------------------------------------------------

/// Persist the full model plus configs.
pub fn save_model_checkpoint<T: Scalar>(
    path: &std::path::Path,
    model: &Model<T>,
    train_cfg: Option<&TrainConfig>,
    rng: RngState,
) -> Result<()> {
    let ckpt = Checkpoint {
        format_version: checkpoint::FORMAT_VERSION,
        mae: model.mae.cfg,
        dssn: Some(model.dssn.cfg.clone()),
        prompt: Some(model.prompt_cfg.clone()),
        train: train_cfg.cloned(),
        rng,
        params: checkpoint::params_from_store(&model.store),
    };
    ckpt.save(path)
}

/// Rebuild a model from a full checkpoint.
pub fn load_model_checkpoint<T: Scalar>(path: &std::path::Path) -> Result<(Model<T>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let dssn_cfg = ckpt
        .dssn
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks a segmenter config".into()))?;
    let prompt_cfg = ckpt.prompt.clone().unwrap_or_default();
    let train_cfg = ckpt.train.clone().unwrap_or_default();
    let mut model = Model::build(
        ckpt.mae,
        dssn_cfg,
        prompt_cfg,
        train_cfg.flags,
        train_cfg.detach_prompt,
        0,
    )?;
    checkpoint::apply_params(&mut model.store, &ckpt.params)?;
    Ok((model, ckpt))
}

/// Persist a pretrained prior only (encoder + decoder groups).
pub fn save_mae_checkpoint<T: Scalar>(
    path: &std::path::Path,
    store: &ParamStore<T>,
    cfg: MAEConfig,
    rng: RngState,
) -> Result<()> {
    let params = checkpoint::params_from_store(store)
        .into_iter()
        .filter(|p| p.name.starts_with("mae."))
        .collect();
    let ckpt = Checkpoint {
        format_version: checkpoint::FORMAT_VERSION,
        mae: cfg,
        dssn: None,
        prompt: None,
        train: None,
        rng,
        params,
    };
    ckpt.save(path)
}

/// Load a prior-only checkpoint into a fresh store.
pub fn load_mae_checkpoint<T: Scalar>(
    path: &std::path::Path,
) -> Result<(ParamStore<T>, Mae, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mae = Mae::build(&mut store, &mut rng, ckpt.mae)?;
    checkpoint::apply_params(&mut store, &ckpt.params)?;
    Ok((store, mae, ckpt))
}

/// Load pretrained MAE weights from a prior-only checkpoint into a full
/// model: copies every `mae.encoder.*` / `mae.decoder.*` tensor, freezes the
/// prior and seeds the stage-2 decoder from the stage-1 weights.
pub fn adopt_pretrained_prior<T: Scalar>(
    model: &mut Model<T>,
    mae_ckpt: &Checkpoint,
) -> Result<()> {
    if mae_ckpt.mae.resolution != model.mae.cfg.resolution
        || mae_ckpt.mae.patch_size != model.mae.cfg.patch_size
        || mae_ckpt.mae.dim != model.mae.cfg.dim
        || mae_ckpt.mae.decoder_dim != model.mae.cfg.decoder_dim
    {
        return Err(Error::Checkpoint(
            "prior checkpoint config does not match the model".into(),
        ));
    }
    for p in &mae_ckpt.params {
        let id = model
            .store
            .id_of(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("prior tensor {} not in model", p.name)))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&p.data)
            .map_err(|e| Error::Checkpoint(format!("bad base64 for {}: {e}", p.name)))?;
        let mut vals = Vec::with_capacity(bytes.len() / 4);
        for chunk in bytes.chunks_exact(4) {
            let f = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            vals.push(T::from_f64(f as f64));
        }
        *model.store.value_mut(id) = ArrayD::from_shape_vec(IxDyn(&p.shape), vals)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", p.name)))?;
    }
    model.freeze_prior();
    model.sync_stage2_decoder();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{forge, generate_real, ForgeParams, ForgeryKind, SceneSpec};

    fn tiny_mae_cfg() -> MAEConfig {
        MAEConfig {
            resolution: 32,
            patch_size: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            dim: 16,
            decoder_dim: 8,
            heads: 2,
            mask_ratio: 0.75,
        }
    }

    fn tiny_dssn_cfg() -> DSSNConfig {
        DSSNConfig {
            stage_dims: vec![8, 16],
            stage_downsample: vec![4, 2],
            stage_heads: vec![1, 2],
            sr_ratios: vec![2, 1],
            decoder_dim: 16,
            fusion_feedforward: true,
            dual_stream: true,
        }
    }

    fn tiny_prompt_cfg() -> PromptEncoderConfig {
        PromptEncoderConfig {
            channels: vec![4, 8],
            token_dim: 8,
        }
    }

    fn tiny_model(flags: AblationFlags, seed: u64) -> Model<f32> {
        let mut m = Model::build(
            tiny_mae_cfg(),
            tiny_dssn_cfg(),
            tiny_prompt_cfg(),
            flags,
            false,
            seed,
        )
        .unwrap();
        m.freeze_prior();
        m.sync_stage2_decoder();
        m
    }

    fn tiny_records(n: usize, start_seed: u64) -> Vec<ForgeryRecord> {
        (0..n)
            .map(|i| {
                let seed = start_seed + i as u64;
                let real = generate_real(&SceneSpec::new(seed, 32), 8).unwrap();
                let kind = [
                    ForgeryKind::Splice,
                    ForgeryKind::CopyMove,
                    ForgeryKind::NoiseFill,
                ][i % 3];
                let mut r = forge(&real, kind, seed * 31 + 7, &ForgeParams::default()).unwrap();
                r.id = format!("t{i}");
                r
            })
            .collect()
    }

    #[test]
    fn identity_at_init_cascade() {
        let model = tiny_model(AblationFlags::default(), 3);
        let recs = tiny_records(2, 40);
        let refs: Vec<&ForgeryRecord> = recs.iter().collect();
        let images = image_batch::<f32>(&refs);
        let trace = forward_two_stage(&model, &images).unwrap();
        let r2 = trace.residual_s2.as_ref().unwrap();
        let mut max_diff = 0f32;
        for (a, b) in trace.residual_s1.iter().zip(r2.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
        assert_eq!(max_diff, 0.0, "residuals must match at init");
        let mut mask_diff = 0f32;
        for (a, b) in trace.coarse_mask.iter().zip(trace.refined_mask.iter()) {
            mask_diff = mask_diff.max((a - b).abs());
        }
        assert_eq!(mask_diff, 0.0, "masks must match at init");
        assert!(trace.film_gamma.unwrap().iter().all(|&g| g == 1.0));
        assert!(trace.film_beta.unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn tapi_off_skips_stage_two() {
        let flags = AblationFlags {
            use_dssn_dual: true,
            use_tapi: false,
            use_adaptive_decoder: false,
        };
        let model = tiny_model(flags, 4);
        let recs = tiny_records(1, 60);
        let refs: Vec<&ForgeryRecord> = recs.iter().collect();
        let trace = forward_two_stage(&model, &image_batch::<f32>(&refs)).unwrap();
        assert!(trace.prompts.is_none());
        assert!(trace.film_gamma.is_none());
        assert!(trace.recon_s2.is_none());
        assert_eq!(trace.coarse_mask, trace.refined_mask);
        assert_eq!(trace.coarse_mask.dim(), (1, 1, 32, 32));
    }

    #[test]
    fn flag_contradiction_rejected() {
        let flags = AblationFlags {
            use_dssn_dual: true,
            use_tapi: false,
            use_adaptive_decoder: true,
        };
        assert!(flags.validate().is_err());
        assert!(Model::<f32>::build(
            tiny_mae_cfg(),
            tiny_dssn_cfg(),
            tiny_prompt_cfg(),
            flags,
            false,
            0
        )
        .is_err());
    }

    #[test]
    fn seeded_runs_reproduce_epoch0_losses() {
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 2,
            patience: 1,
            seed: 9,
            ..Default::default()
        };
        let train_recs = tiny_records(6, 80);
        let val_recs = tiny_records(2, 200);
        let run = || {
            let mut model = tiny_model(AblationFlags::default(), 5);
            train(&mut model, &train_recs, &val_recs, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log[0].l_total, b.log[0].l_total);
        assert_eq!(a.log[0].l_crs, b.log[0].l_crs);
        assert_eq!(a.log[0].val_iou_ref, b.log[0].val_iou_ref);
    }

    #[test]
    fn early_stop_respects_patience() {
        let cfg = TrainConfig {
            lr: 0.0, // nothing improves, so the stop fires as soon as allowed
            batch_size: 4,
            max_epochs: 30,
            patience: 3,
            seed: 1,
            ..Default::default()
        };
        let train_recs = tiny_records(4, 300);
        let val_recs = tiny_records(2, 320);
        let mut model = tiny_model(AblationFlags::default(), 6);
        let out = train(&mut model, &train_recs, &val_recs, &cfg).unwrap();
        assert!(out.epochs_run <= out.best_epoch + cfg.patience + 1);
    }

    #[test]
    fn frozen_prior_unchanged_by_training() {
        let mut model = tiny_model(AblationFlags::default(), 7);
        let enc = model.store.group_checksum(ENCODER_GROUP);
        let dec = model.store.group_checksum(&format!("{DECODER_GROUP}."));
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 3,
            patience: 2,
            seed: 2,
            ..Default::default()
        };
        let train_recs = tiny_records(4, 400);
        let val_recs = tiny_records(2, 420);
        train(&mut model, &train_recs, &val_recs, &cfg).unwrap();
        assert_eq!(model.store.group_checksum(ENCODER_GROUP), enc);
        assert_eq!(
            model.store.group_checksum(&format!("{DECODER_GROUP}.")),
            dec
        );
    }

    #[test]
    fn checkpoint_round_trip_reproduces_masks_bitwise() {
        let mut model = tiny_model(AblationFlags::default(), 8);
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 2,
            patience: 1,
            seed: 3,
            ..Default::default()
        };
        let train_recs = tiny_records(4, 500);
        let val_recs = tiny_records(2, 520);
        train(&mut model, &train_recs, &val_recs, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save_model_checkpoint(
            &path,
            &model,
            Some(&cfg),
            RngState {
                seed: 3,
                next_epoch: 2,
            },
        )
        .unwrap();
        let (loaded, _) = load_model_checkpoint::<f32>(&path).unwrap();

        let refs: Vec<&ForgeryRecord> = val_recs.iter().collect();
        let images = image_batch::<f32>(&refs);
        let a = forward_two_stage(&model, &images).unwrap();
        let b = forward_two_stage(&loaded, &images).unwrap();
        assert_eq!(a.refined_mask, b.refined_mask);
        assert_eq!(a.coarse_mask, b.coarse_mask);

        let (ea, ra) = evaluate(&model, &val_recs, 4).unwrap();
        let (eb, rb) = evaluate(&loaded, &val_recs, 4).unwrap();
        assert_eq!(ea.iou.to_bits(), eb.iou.to_bits());
        assert_eq!(ra.f1.to_bits(), rb.f1.to_bits());
    }

    #[test]
    fn empty_manifest_evaluates_to_empty_report() {
        let model = tiny_model(AblationFlags::default(), 9);
        let (c, r) = evaluate(&model, &[], 4).unwrap();
        assert!(c.is_empty() && r.is_empty());
    }

    #[test]
    fn single_stream_flag_builds_and_trains_a_step() {
        let flags = AblationFlags {
            use_dssn_dual: false,
            use_tapi: false,
            use_adaptive_decoder: false,
        };
        let mut model = tiny_model(flags, 10);
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            max_epochs: 1,
            patience: 0,
            seed: 4,
            flags,
            ..Default::default()
        };
        // patience must be < max_epochs;  0 < 1 holds
        let train_recs = tiny_records(2, 600);
        let out = train(&mut model, &train_recs, &[], &cfg).unwrap();
        assert_eq!(out.epochs_run, 1);
    }
}
