//! Task-adaptive prior injection: the coarse mask becomes prompt tokens, the
//! prompt tokens become per-channel FiLM coefficients, and those modulate the
//! frozen encoder tokens before the trainable second-stage decoder runs.
//!
//! Both FiLM maps start at exactly zero, so at initialization `gamma == 1`,
//! `beta == 0` and the second stage reproduces the first bit for bit.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::mae::MaeDecoder;
use crate::nn::{grid_to_tokens, Conv2d, Fwd, Init, Linear, ParamStore};
use crate::scalar::Scalar;

pub const PROMPT_GROUP: &str = "tapi.prompt";
pub const FILM_GROUP: &str = "tapi.film";
pub const DECODER2_GROUP: &str = "mae.decoder_stage2";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptEncoderConfig {
    /// Channel widths of the strided conv stack; each halves the grid.
    pub channels: Vec<usize>,
    /// Prompt token dimension after the linear projection.
    pub token_dim: usize,
}

impl Default for PromptEncoderConfig {
    fn default() -> Self {
        PromptEncoderConfig {
            channels: vec![8, 16, 32, 32],
            token_dim: 32,
        }
    }
}

impl PromptEncoderConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("prompt encoder needs at least one conv"));
        }
        let f = self.downsample_factor();
        if resolution % f != 0 || resolution / f == 0 {
            return Err(Error::config(format!(
                "resolution {resolution} not divisible by prompt downsample {f}"
            )));
        }
        Ok(())
    }

    /// Prompt token count for a given mask resolution.
    pub fn num_tokens(&self, resolution: usize) -> usize {
        let side = resolution / self.downsample_factor();
        side * side
    }
}

/// Conv stack + projection from a `[B, 1, H, W]` mask to `[B, N_p, D_p]`.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub cfg: PromptEncoderConfig,
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl PromptEncoder {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        cfg: PromptEncoderConfig,
        resolution: usize,
    ) -> Result<Self> {
        cfg.validate(resolution)?;
        let mut init = Init::new(store, rng);
        Ok(init.scoped(PROMPT_GROUP, |i| {
            let mut convs = Vec::new();
            let mut cin = 1;
            for (k, &cout) in cfg.channels.iter().enumerate() {
                convs.push(Conv2d::new(i, &format!("conv{k}"), cin, cout, 3, 2, 1));
                cin = cout;
            }
            let proj = Linear::new(i, "proj", cin, cfg.token_dim);
            PromptEncoder { cfg, convs, proj }
        }))
    }

    /// Encode a coarse mask into prompt tokens. Gradients flow back into the
    /// mask unless the caller detaches it first.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, coarse_mask: Var) -> Var {
        let mut x = coarse_mask;
        for conv in &self.convs {
            x = conv.forward(f, x);
            x = f.tape.gelu(x);
        }
        let tokens = grid_to_tokens(f, x);
        self.proj.forward(f, tokens)
    }
}

/// Per-sample FiLM coefficients.
#[derive(Debug, Clone)]
pub struct FilmParams<T: Scalar> {
    /// `[B, D]` multiplicative scale; exactly one at initialization.
    pub gamma: Array2<T>,
    /// `[B, D]` additive shift; exactly zero at initialization.
    pub beta: Array2<T>,
}

/// Pooled-prompt to FiLM-coefficient maps, zero-initialized.
#[derive(Debug, Clone)]
pub struct FilmHead {
    scale: Linear,
    shift: Linear,
}

impl FilmHead {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prompt_dim: usize,
        token_dim: usize,
    ) -> Self {
        let mut init = Init::new(store, rng);
        init.scoped(FILM_GROUP, |i| FilmHead {
            scale: Linear::zeros(i, "scale", prompt_dim, token_dim),
            shift: Linear::zeros(i, "shift", prompt_dim, token_dim),
        })
    }

    /// Mean-pool prompt tokens and map to `(gamma, beta)`, each `[B, D]`,
    /// with `gamma = 1 + scale(pool)`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, prompts: Var) -> (Var, Var) {
        let pooled = f.tape.mean_tokens(prompts);
        let g = self.scale.forward(f, pooled);
        let gamma = f.tape.add_scalar(g, T::one());
        let beta = self.shift.forward(f, pooled);
        (gamma, beta)
    }
}

/// `z[b,n,d] * gamma[b,d] + beta[b,d]`, broadcast over the token axis.
pub fn modulate<T: Scalar>(f: &mut Fwd<T>, tokens: Var, gamma: Var, beta: Var) -> Var {
    f.tape.film(tokens, gamma, beta)
}

/// The full injection module: prompt encoder + FiLM head.
#[derive(Debug, Clone)]
pub struct Tapi {
    pub prompt: PromptEncoder,
    pub film: FilmHead,
    /// Stop gradients from the refinement loss flowing into the coarse mask.
    pub detach_prompt: bool,
}

impl Tapi {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        cfg: PromptEncoderConfig,
        resolution: usize,
        encoder_token_dim: usize,
        detach_prompt: bool,
    ) -> Result<Self> {
        let token_dim = cfg.token_dim;
        let prompt = PromptEncoder::build(store, rng, cfg, resolution)?;
        let film = FilmHead::build(store, rng, token_dim, encoder_token_dim);
        Ok(Tapi {
            prompt,
            film,
            detach_prompt,
        })
    }

    /// Guided reconstruction: modulate the (frozen) encoder tokens with the
    /// coarse mask's FiLM coefficients and decode with `decoder`. Returns
    /// `(x_rec, residual, prompts, gamma, beta)`.
    pub fn guided_reconstruct<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        image: Var,
        tokens: Var,
        coarse_mask: Var,
        decoder: &MaeDecoder,
        patch_size: usize,
    ) -> (Var, Var, Var, Var, Var) {
        let shape = f.tape.val(image).shape().to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let n = (h / patch_size) * (w / patch_size);

        let mask_in = if self.detach_prompt {
            let detached = f.tape.val(coarse_mask).clone();
            f.tape.constant(detached)
        } else {
            coarse_mask
        };
        let prompts = self.prompt.forward(f, mask_in);
        let (gamma, beta) = self.film.forward(f, prompts);
        let modulated = modulate(f, tokens, gamma, beta);
        let pred = decoder.forward(f, modulated, None, n);
        let x_rec = f.tape.unpatchify(pred, patch_size, c, h, w);
        let diff = f.tape.sub(image, x_rec);
        let residual = f.tape.abs_val(diff);
        (x_rec, residual, prompts, gamma, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_arr(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn prompt_token_count() {
        let cfg = PromptEncoderConfig::default();
        assert_eq!(cfg.downsample_factor(), 16);
        assert_eq!(cfg.num_tokens(64), 16);
        assert!(cfg.validate(64).is_ok());
        assert!(cfg.validate(40).is_err());
    }

    #[test]
    fn prompt_rows_identical_for_identical_masks() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let pe = PromptEncoder::build(&mut store, &mut rng, PromptEncoderConfig::default(), 64)
            .unwrap();
        let mut mrng = ChaCha12Rng::seed_from_u64(1);
        let one = rand_arr(&mut mrng, &[1, 1, 64, 64]);
        let batch = ndarray::concatenate(
            ndarray::Axis(0),
            &[one.view(), one.view(), one.view()],
        )
        .unwrap()
        .into_dyn();
        let mut f = Fwd::eval(&store);
        let m = f.tape.constant(batch);
        let t = pe.forward(&mut f, m);
        let tv = f.tape.val(t);
        let row0 = tv.index_axis(ndarray::Axis(0), 0);
        for b in 1..3 {
            assert_eq!(row0, tv.index_axis(ndarray::Axis(0), b));
        }
    }

    #[test]
    fn distinct_masks_give_distinct_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let pe = PromptEncoder::build(&mut store, &mut rng, PromptEncoderConfig::default(), 64)
            .unwrap();
        let zeros = ArrayD::zeros(IxDyn(&[1, 1, 64, 64]));
        let ones = ArrayD::from_elem(IxDyn(&[1, 1, 64, 64]), 1.0);
        let mut f = Fwd::eval(&store);
        let a = f.tape.constant(zeros);
        let b = f.tape.constant(ones);
        let ta = pe.forward(&mut f, a);
        let tb = pe.forward(&mut f, b);
        assert_ne!(f.tape.val(ta), f.tape.val(tb));
    }

    #[test]
    fn film_identity_at_init_and_pool_permutation_invariance() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let head = FilmHead::build(&mut store, &mut rng, 8, 16);
        let mut prng = ChaCha12Rng::seed_from_u64(4);
        let prompts = rand_arr(&mut prng, &[2, 5, 8]);

        let mut f = Fwd::eval(&store);
        let p = f.tape.constant(prompts.clone());
        let (gamma, beta) = head.forward(&mut f, p);
        assert!(f.tape.val(gamma).iter().all(|&g| g == 1.0));
        assert!(f.tape.val(beta).iter().all(|&b| b == 0.0));
        assert_eq!(f.tape.val(gamma).shape(), &[2, 16]);

        // Permuting prompt tokens leaves the pooled coefficients unchanged,
        // also away from the zero-init point.
        *store.value_mut(store.id_of("tapi.film.scale.weight").unwrap()) =
            rand_arr(&mut prng, &[8, 16]);
        let mut perm = prompts.clone();
        for b in 0..2 {
            for d in 0..8 {
                perm[[b, 0, d]] = prompts[[b, 4, d]];
                perm[[b, 4, d]] = prompts[[b, 0, d]];
            }
        }
        let run = |arr: &ArrayD<f64>| {
            let mut f = Fwd::eval(&store);
            let p = f.tape.constant(arr.clone());
            let (g, _) = head.forward(&mut f, p);
            f.tape.val(g).clone()
        };
        let ga = run(&prompts);
        let gb = run(&perm);
        for (x, y) in ga.iter().zip(gb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn modulate_matches_per_token_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let z = rand_arr(&mut rng, &[2, 4, 6]);
        let gamma = rand_arr(&mut rng, &[2, 6]);
        let beta = rand_arr(&mut rng, &[2, 6]);
        let store = ParamStore::<f64>::new();
        let mut f = Fwd::eval(&store);
        let zv = f.tape.constant(z.clone());
        let gv = f.tape.constant(gamma.clone());
        let bv = f.tape.constant(beta.clone());
        let out = modulate(&mut f, zv, gv, bv);
        let ov = f.tape.val(out);
        for b in 0..2 {
            for n in 0..4 {
                for d in 0..6 {
                    let want = gamma[[b, d]] * z[[b, n, d]] + beta[[b, d]];
                    assert_eq!(ov[[b, n, d]], want);
                }
            }
        }
    }

    #[test]
    fn modulate_identity_and_degenerate_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let z = rand_arr(&mut rng, &[1, 3, 4]);
        let store = ParamStore::<f64>::new();
        let mut f = Fwd::eval(&store);
        let zv = f.tape.constant(z.clone());

        let ones = f.tape.constant(ArrayD::ones(IxDyn(&[1, 4])));
        let zeros = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 4])));
        let same = modulate(&mut f, zv, ones, zeros);
        assert_eq!(f.tape.val(same), &z);

        let zero_g = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 4])));
        let c = f.tape.constant(ArrayD::from_elem(IxDyn(&[1, 4]), 0.7));
        let collapsed = modulate(&mut f, zv, zero_g, c);
        assert!(f.tape.val(collapsed).iter().all(|&v| v == 0.7));

        let two = f.tape.constant(ArrayD::from_elem(IxDyn(&[1, 4]), 2.0));
        let zb = f.tape.constant(ArrayD::zeros(IxDyn(&[1, 4])));
        let zl = f.tape.constant(ArrayD::ones(IxDyn(&[1, 3, 4])));
        let doubled = modulate(&mut f, zl, two, zb);
        assert!(f.tape.val(doubled).iter().all(|&v| v == 2.0));
    }
}
