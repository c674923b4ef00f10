//! Building blocks: linear / layer-norm / MLP / convolution / multi-head
//! attention / pre-norm transformer block.

use crate::autograd::Var;
use crate::scalar::Scalar;

use super::params::{Fwd, Init, ParamId};

pub const LN_EPS: f64 = 1e-5;

/// Affine map on the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, din: usize, dout: usize) -> Self {
        init.scoped(name, |i| Linear {
            w: i.trunc_normal("weight", &[din, dout], 0.02),
            b: Some(i.zeros("bias", &[dout])),
        })
    }

    /// Weight and bias start at exactly zero (identity-at-init contracts).
    pub fn zeros<T: Scalar>(init: &mut Init<T>, name: &str, din: usize, dout: usize) -> Self {
        init.scoped(name, |i| Linear {
            w: i.zeros("weight", &[din, dout]),
            b: Some(i.zeros("bias", &[dout])),
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize) -> Self {
        init.scoped(name, |i| LayerNorm {
            gamma: i.ones("gamma", &[dim]),
            beta: i.zeros("beta", &[dim]),
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let g = f.p(self.gamma);
        let b = f.p(self.beta);
        f.tape.layer_norm(x, g, b, T::from_f64(LN_EPS))
    }
}

/// Two-layer feed-forward with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize, hidden: usize) -> Self {
        init.scoped(name, |i| Mlp {
            fc1: Linear::new(i, "fc1", dim, hidden),
            fc2: Linear::new(i, "fc2", hidden, dim),
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let h = self.fc1.forward(f, x);
        let h = f.tape.gelu(h);
        self.fc2.forward(f, h)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        init.scoped(name, |i| {
            let w = super::init::conv_kaiming::<T>(i.rng, cout, cin, k);
            Conv2d {
                w: i.param("weight", w),
                b: Some(i.zeros("bias", &[cout])),
                stride,
                pad,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let w = f.p(self.w);
        let b = self.b.map(|b| f.p(b));
        f.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// `[B, N, D] -> [B, D, h, w]` for token grids stored row-major.
pub fn tokens_to_grid<T: Scalar>(f: &mut Fwd<T>, x: Var, h: usize, w: usize) -> Var {
    let shape = f.tape.val(x).shape().to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    debug_assert_eq!(n, h * w);
    let x4 = f.tape.reshape(x, &[b, n, d, 1]);
    let xp = f.tape.permute_0213(x4); // [B, D, N, 1]
    f.tape.reshape(xp, &[b, d, h, w])
}

/// `[B, C, h, w] -> [B, h*w, C]`.
pub fn grid_to_tokens<T: Scalar>(f: &mut Fwd<T>, x: Var) -> Var {
    let shape = f.tape.val(x).shape().to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let x4 = f.tape.reshape(x, &[b, c, h * w, 1]);
    let xp = f.tape.permute_0213(x4); // [B, N, C, 1]
    f.tape.reshape(xp, &[b, h * w, c])
}

/// Multi-head attention over token sequences, optionally reducing the
/// key/value sequence with a strided convolution first (hierarchical stages
/// keep their early layers affordable this way).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub sr: Option<(Conv2d, LayerNorm)>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        zero_out_proj: bool,
    ) -> Self {
        assert!(dim % heads == 0, "attention dim not divisible by heads");
        init.scoped(name, |i| MultiHeadAttention {
            q: Linear::new(i, "q", dim, dim),
            k: Linear::new(i, "k", dim, dim),
            v: Linear::new(i, "v", dim, dim),
            out: if zero_out_proj {
                Linear::zeros(i, "out", dim, dim)
            } else {
                Linear::new(i, "out", dim, dim)
            },
            heads,
            sr: (sr_ratio > 1).then(|| {
                (
                    Conv2d::new(i, "sr", dim, dim, sr_ratio, sr_ratio, 0),
                    LayerNorm::new(i, "sr_norm", dim),
                )
            }),
        })
    }

    /// `query`: `[B, Nq, D]`; `kv`: `[B, Nk, D]`. `kv_hw` gives the grid shape
    /// of the kv tokens and is required when spatial reduction is configured.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        query: Var,
        kv: Var,
        kv_hw: Option<(usize, usize)>,
    ) -> Var {
        self.forward_inner(f, query, kv, kv_hw, false).0
    }

    /// Same as [`Self::forward`] but also returns the post-softmax attention
    /// map `[B*heads, Nq, Nk]` for probing.
    pub fn forward_capture<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        query: Var,
        kv: Var,
        kv_hw: Option<(usize, usize)>,
    ) -> (Var, Var) {
        let (out, attn) = self.forward_inner(f, query, kv, kv_hw, true);
        (out, attn.expect("capture requested"))
    }

    fn forward_inner<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        query: Var,
        kv: Var,
        kv_hw: Option<(usize, usize)>,
        capture: bool,
    ) -> (Var, Option<Var>) {
        let qshape = f.tape.val(query).shape().to_vec();
        let (b, nq, d) = (qshape[0], qshape[1], qshape[2]);
        let heads = self.heads;
        let hd = d / heads;

        let kv = match &self.sr {
            None => kv,
            Some((conv, norm)) => {
                let (h, w) = kv_hw.expect("kv grid shape required for spatial reduction");
                let grid = tokens_to_grid(f, kv, h, w);
                let red = conv.forward(f, grid);
                let toks = grid_to_tokens(f, red);
                norm.forward(f, toks)
            }
        };
        let nk = f.tape.val(kv).shape()[1];

        let split = |f: &mut Fwd<T>, x: Var, n: usize| {
            let x = f.tape.reshape(x, &[b, n, heads, hd]);
            let x = f.tape.permute_0213(x); // [B, H, N, hd]
            f.tape.reshape(x, &[b * heads, n, hd])
        };

        let q = self.q.forward(f, query);
        let q = split(f, q, nq);
        let k = self.k.forward(f, kv);
        let k = split(f, k, nk);
        let v = self.v.forward(f, kv);
        let v = split(f, v, nk);

        let scores = f.tape.bmm_nt(q, k); // [B*H, Nq, Nk]
        let scores = f.tape.scale(scores, T::from_f64(1.0 / (hd as f64).sqrt()));
        let attn = f.tape.softmax_last(scores);

        let ctx = f.tape.bmm(attn, v); // [B*H, Nq, hd]
        let ctx = f.tape.reshape(ctx, &[b, heads, nq, hd]);
        let ctx = f.tape.permute_0213(ctx); // [B, Nq, H, hd]
        let ctx = f.tape.reshape(ctx, &[b, nq, d]);
        let out = self.out.forward(f, ctx);
        (out, capture.then_some(attn))
    }
}

/// Pre-norm transformer block with self-attention.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        sr_ratio: usize,
    ) -> Self {
        init.scoped(name, |i| Block {
            norm1: LayerNorm::new(i, "norm1", dim),
            attn: MultiHeadAttention::new(i, "attn", dim, heads, sr_ratio, false),
            norm2: LayerNorm::new(i, "norm2", dim),
            mlp: Mlp::new(i, "mlp", dim, dim * mlp_ratio),
        })
    }

    /// `hw` is the token grid shape, needed when the block reduces its kv set.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, hw: Option<(usize, usize)>) -> Var {
        let xn = self.norm1.forward(f, x);
        let a = self.attn.forward(f, xn, xn, hw);
        let x = f.tape.add(x, a);
        let xn = self.norm2.forward(f, x);
        let m = self.mlp.forward(f, xn);
        f.tape.add(x, m)
    }
}
