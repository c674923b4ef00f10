//! Deterministic weight initialization. Everything samples from a caller-owned
//! ChaCha stream so model construction is a pure function of the seed.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;

/// Standard normal via Box-Muller; avoids a distribution-crate dependency and
/// keeps the sampled stream identical across scalar types.
pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Normal(0, std) truncated at two standard deviations.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let mut z = standard_normal(rng);
        while z.abs() > 2.0 {
            z = standard_normal(rng);
        }
        T::from_f64(z * std)
    })
}

/// Kaiming-style normal for convolutions: std = sqrt(2 / fan_in).
pub fn conv_kaiming<T: Scalar>(
    rng: &mut ChaCha12Rng,
    cout: usize,
    cin: usize,
    k: usize,
) -> ArrayD<T> {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    trunc_normal(rng, &[cout, cin, k, k], std)
}

/// Fixed 2-D sine/cosine position table for a `gh x gw` token grid, dim `d`.
/// Half the channels encode the row coordinate, half the column.
pub fn sincos_2d<T: Scalar>(gh: usize, gw: usize, d: usize) -> ArrayD<T> {
    assert!(d % 4 == 0, "position embedding dim must be divisible by 4");
    let quarter = d / 4;
    let mut out = ArrayD::zeros(IxDyn(&[gh * gw, d]));
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            for i in 0..quarter {
                let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                let (sy, cy) = (gy as f64 * omega).sin_cos();
                let (sx, cx) = (gx as f64 * omega).sin_cos();
                out[[tok, i]] = T::from_f64(sy);
                out[[tok, quarter + i]] = T::from_f64(cy);
                out[[tok, 2 * quarter + i]] = T::from_f64(sx);
                out[[tok, 3 * quarter + i]] = T::from_f64(cx);
            }
        }
    }
    out
}
