//! Dual-Stream Segmentation Network: hierarchical transformer encoders over
//! the image (content stream) and the reconstruction residual (artifact
//! stream), fused per stage by cross-attention where content tokens query
//! artifact tokens. A multi-scale decoder projects every stage to a common
//! width, upsamples, concatenates and reads out a single-channel probability
//! mask.
//!
//! The same weights serve both pipeline stages; callers simply run the
//! forward twice with different residual inputs.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{
    grid_to_tokens, tokens_to_grid, Block, Conv2d, Fwd, Init, LayerNorm, Linear,
    MultiHeadAttention, ParamStore,
};
use crate::scalar::Scalar;

pub const DSSN_GROUP: &str = "dssn";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DSSNConfig {
    pub stage_dims: Vec<usize>,
    pub stage_downsample: Vec<usize>,
    pub stage_heads: Vec<usize>,
    /// Key/value spatial-reduction ratio per stage.
    pub sr_ratios: Vec<usize>,
    pub decoder_dim: usize,
    /// Fused features feed the next content stage (instead of only the decoder).
    pub fusion_feedforward: bool,
    /// When false, a single stream consumes `[image, residual]` stacked along
    /// channels and no fusion happens.
    pub dual_stream: bool,
}

impl Default for DSSNConfig {
    fn default() -> Self {
        DSSNConfig {
            stage_dims: vec![32, 64, 128, 192],
            stage_downsample: vec![4, 2, 2, 2],
            stage_heads: vec![1, 2, 4, 6],
            sr_ratios: vec![8, 4, 2, 1],
            decoder_dim: 128,
            fusion_feedforward: true,
            dual_stream: true,
        }
    }
}

impl DSSNConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        let n = self.stage_dims.len();
        if n == 0 {
            return Err(Error::config("need at least one stage"));
        }
        if self.stage_downsample.len() != n
            || self.stage_heads.len() != n
            || self.sr_ratios.len() != n
        {
            return Err(Error::config(
                "stage_dims / stage_downsample / stage_heads / sr_ratios lengths differ",
            ));
        }
        let mut side = resolution;
        for (i, &d) in self.stage_downsample.iter().enumerate() {
            if d == 0 || side % d != 0 {
                return Err(Error::config(format!(
                    "stage {i}: side {side} not divisible by downsample {d}"
                )));
            }
            side /= d;
            if side == 0 {
                return Err(Error::config("downsampling exhausted the image"));
            }
            if self.stage_dims[i] % self.stage_heads[i] != 0 {
                return Err(Error::config(format!(
                    "stage {i}: dim {} not divisible by heads {}",
                    self.stage_dims[i], self.stage_heads[i]
                )));
            }
            if self.sr_ratios[i] > 1 && side % self.sr_ratios[i] != 0 {
                return Err(Error::config(format!(
                    "stage {i}: grid {side} not divisible by sr ratio {}",
                    self.sr_ratios[i]
                )));
            }
        }
        Ok(())
    }

    /// Token-grid side length per stage for a given input resolution.
    pub fn stage_grids(&self, resolution: usize) -> Vec<usize> {
        let mut side = resolution;
        self.stage_downsample
            .iter()
            .map(|&d| {
                side /= d;
                side
            })
            .collect()
    }
}

/// Overlapped patch embedding: strided convolution + token layer norm.
#[derive(Debug, Clone)]
struct PatchEmbed {
    conv: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        init.scoped(name, |i| PatchEmbed {
            conv: Conv2d::new(i, "proj", cin, cout, k, stride, k / 2),
            norm: LayerNorm::new(i, "norm", cout),
        })
    }

    /// Grid in, tokens out.
    fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let g = self.conv.forward(f, x);
        let t = grid_to_tokens(f, g);
        self.norm.forward(f, t)
    }
}

#[derive(Debug, Clone)]
struct Stream {
    embeds: Vec<PatchEmbed>,
    blocks: Vec<Block>,
}

impl Stream {
    fn new<T: Scalar>(init: &mut Init<T>, name: &str, in_chans: usize, cfg: &DSSNConfig) -> Self {
        init.scoped(name, |i| {
            let mut embeds = Vec::new();
            let mut blocks = Vec::new();
            for s in 0..cfg.num_stages() {
                let cin = if s == 0 { in_chans } else { cfg.stage_dims[s - 1] };
                let (k, stride) = if s == 0 {
                    (7, cfg.stage_downsample[0])
                } else {
                    (3, cfg.stage_downsample[s])
                };
                embeds.push(PatchEmbed::new(
                    i,
                    &format!("stage{s}.embed"),
                    cin,
                    cfg.stage_dims[s],
                    k,
                    stride,
                ));
                blocks.push(Block::new(
                    i,
                    &format!("stage{s}.block"),
                    cfg.stage_dims[s],
                    cfg.stage_heads[s],
                    4,
                    cfg.sr_ratios[s],
                ));
            }
            Stream { embeds, blocks }
        })
    }
}

/// Per-stage features produced by [`Dssn::encode_streams`].
pub struct StageFeatures {
    /// Content tokens `[B, N, D]`.
    pub f_con: Var,
    /// Artifact tokens, same shape. Equal to `f_con` in single-stream mode.
    pub f_art: Var,
    /// Fusion output, same shape.
    pub f_fused: Var,
    /// Token grid side lengths (h, w).
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Dssn {
    pub cfg: DSSNConfig,
    content: Stream,
    artifact: Option<Stream>,
    fusion: Vec<MultiHeadAttention>,
    dec_proj: Vec<Linear>,
    dec_fuse: Linear,
    dec_pred: Linear,
}

impl Dssn {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        cfg: DSSNConfig,
        resolution: usize,
    ) -> Result<Self> {
        cfg.validate(resolution)?;
        let mut init = Init::new(store, rng);
        Ok(init.scoped(DSSN_GROUP, |i| {
            let in_chans = if cfg.dual_stream { 3 } else { 6 };
            let content = Stream::new(i, "content", in_chans, &cfg);
            let artifact = cfg
                .dual_stream
                .then(|| Stream::new(i, "artifact", 3, &cfg));
            let fusion = if cfg.dual_stream {
                (0..cfg.num_stages())
                    .map(|s| {
                        MultiHeadAttention::new(
                            i,
                            &format!("fusion.stage{s}"),
                            cfg.stage_dims[s],
                            cfg.stage_heads[s],
                            1,
                            true, // zero-init output projection: fused == content at init
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let dec_proj = (0..cfg.num_stages())
                .map(|s| Linear::new(i, &format!("decoder.proj{s}"), cfg.stage_dims[s], cfg.decoder_dim))
                .collect();
            let dec_fuse = Linear::new(
                i,
                "decoder.fuse",
                cfg.decoder_dim * cfg.num_stages(),
                cfg.decoder_dim,
            );
            let dec_pred = Linear::new(i, "decoder.pred", cfg.decoder_dim, 1);
            Dssn {
                cfg,
                content,
                artifact,
                fusion,
                dec_proj,
                dec_fuse,
                dec_pred,
            }
        }))
    }

    /// Run both streams over the image and residual. The content stream never
    /// sees the residual before fusion, and the artifact stream is never
    /// updated by fusion.
    pub fn encode_streams<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        image: Var,
        residual: Var,
    ) -> Result<Vec<StageFeatures>> {
        let shape = f.tape.val(image).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        if f.tape.val(residual).shape() != f.tape.val(image).shape() {
            return Err(Error::shape(
                "image and residual must share shape".to_string(),
            ));
        }

        let mut stages = Vec::with_capacity(self.cfg.num_stages());
        if self.cfg.dual_stream {
            let artifact = self.artifact.as_ref().unwrap();
            let mut con_grid = image;
            let mut art_grid = residual;
            let (mut gh, mut gw) = (h, w);
            for s in 0..self.cfg.num_stages() {
                gh /= self.cfg.stage_downsample[s];
                gw /= self.cfg.stage_downsample[s];
                let tc = self.content.embeds[s].forward(f, con_grid);
                let tc = self.content.blocks[s].forward(f, tc, Some((gh, gw)));
                let ta = artifact.embeds[s].forward(f, art_grid);
                let ta = artifact.blocks[s].forward(f, ta, Some((gh, gw)));
                let cross = self.fusion[s].forward(f, tc, ta, None);
                let fused = f.tape.add(tc, cross);
                let next_con = if self.cfg.fusion_feedforward { fused } else { tc };
                con_grid = tokens_to_grid(f, next_con, gh, gw);
                art_grid = tokens_to_grid(f, ta, gh, gw);
                stages.push(StageFeatures {
                    f_con: tc,
                    f_art: ta,
                    f_fused: fused,
                    grid: (gh, gw),
                });
            }
        } else {
            let mut grid = f.tape.concat(1, &[image, residual]);
            let (mut gh, mut gw) = (h, w);
            for s in 0..self.cfg.num_stages() {
                gh /= self.cfg.stage_downsample[s];
                gw /= self.cfg.stage_downsample[s];
                let t = self.content.embeds[s].forward(f, grid);
                let t = self.content.blocks[s].forward(f, t, Some((gh, gw)));
                grid = tokens_to_grid(f, t, gh, gw);
                stages.push(StageFeatures {
                    f_con: t,
                    f_art: t,
                    f_fused: t,
                    grid: (gh, gw),
                });
            }
        }
        Ok(stages)
    }

    /// Cross-attention fusion for one stage: `f_con + CrossAttn(f_con, f_art,
    /// f_art)`. Exposed for probing; [`Self::encode_streams`] applies it
    /// internally.
    pub fn fuse_cross_attention<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        stage: usize,
        f_con: Var,
        f_art: Var,
    ) -> Var {
        let cross = self.fusion[stage].forward(f, f_con, f_art, None);
        f.tape.add(f_con, cross)
    }

    /// Attention weights of one fusion stage, `[B*heads, Nq, Nk]`.
    pub fn fusion_attention_probe<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        stage: usize,
        f_con: Var,
        f_art: Var,
    ) -> Var {
        let (_, attn) = self.fusion[stage].forward_capture(f, f_con, f_art, None);
        attn
    }

    /// Multi-scale decode to pre-sigmoid logits `[B, 1, H, W]`.
    pub fn decode_logits<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        stages: &[StageFeatures],
        out_hw: (usize, usize),
    ) -> Result<Var> {
        if stages.is_empty() {
            return Err(Error::config("decode_mask requires at least one stage"));
        }
        let (g0h, g0w) = stages[0].grid;
        let mut maps = Vec::with_capacity(stages.len());
        for (s, feat) in stages.iter().enumerate() {
            let p = self.dec_proj[s].forward(f, feat.f_fused);
            let grid = tokens_to_grid(f, p, feat.grid.0, feat.grid.1);
            let up = if feat.grid == (g0h, g0w) {
                grid
            } else {
                f.tape.bilinear_upsample(grid, g0h, g0w)
            };
            maps.push(up);
        }
        let cat = f.tape.concat(1, &maps);
        let tokens = grid_to_tokens(f, cat);
        let fused = self.dec_fuse.forward(f, tokens);
        let grid = tokens_to_grid(f, fused, g0h, g0w);
        let up = f.tape.bilinear_upsample(grid, out_hw.0, out_hw.1);
        let tokens = grid_to_tokens(f, up);
        let logit_tokens = self.dec_pred.forward(f, tokens);
        Ok(tokens_to_grid(f, logit_tokens, out_hw.0, out_hw.1))
    }

    /// Probability mask in `(0, 1)`.
    pub fn decode_mask<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        stages: &[StageFeatures],
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let logits = self.decode_logits(f, stages, out_hw)?;
        Ok(f.tape.sigmoid(logits))
    }

    /// Full pass: `(mask, logits)`.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        image: Var,
        residual: Var,
    ) -> Result<(Var, Var)> {
        let shape = f.tape.val(image).shape().to_vec();
        let stages = self.encode_streams(f, image, residual)?;
        let logits = self.decode_logits(f, &stages, (shape[2], shape[3]))?;
        let mask = f.tape.sigmoid(logits);
        Ok((mask, logits))
    }
}

/// Owned `[B, 1, H, W]` copy of a mask value on the tape.
pub fn mask_value<T: Scalar>(f: &Fwd<T>, mask: Var) -> ndarray::Array4<T> {
    f.tape.val(mask).clone().into_dimensionality().unwrap()
}
