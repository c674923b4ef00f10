//! Differentiable operations on [`Tape`].
//!
//! Backward closures read parent values straight from the tape, so nothing is
//! cloned at forward time beyond the op outputs themselves. Every op here has
//! a finite-difference test at the bottom of the file.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use super::{Tape, Var};
use crate::scalar::Scalar;

fn view2<T: Scalar>(a: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("standard layout reshape")
}

fn mm<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut c);
    c
}

fn mm_into<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, beta: T, c: &mut ArrayViewMut2<T>) {
    general_mat_mul(T::one(), &a, &b, beta, c);
}

fn into_dyn<T: Scalar, D: ndarray::Dimension>(a: ndarray::Array<T, D>) -> ArrayD<T> {
    a.into_dyn()
}

fn reshaped<T: Scalar>(a: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    a.into_shape_with_order(IxDyn(shape))
        .expect("standard layout reshape")
}

/// Elementwise binary ops, same-shape only.
impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) + self.val(b);
        self.push_with(v, &[a, b], || {
            Box::new(move |_t, _o, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) - self.val(b);
        self.push_with(v, &[a, b], || {
            Box::new(move |_t, _o, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, -g.clone());
            })
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) * self.val(b);
        self.push_with(v, &[a, b], || {
            Box::new(move |t, _o, g, sink| {
                sink(a.0, g * t.val(b));
                sink(b.0, g * t.val(a));
            })
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a) / self.val(b);
        self.push_with(v, &[a, b], || {
            Box::new(move |t, o, g, sink| {
                let bv = t.val(b);
                sink(a.0, g / bv);
                // d/db (a/b) = -(a/b)/b
                sink(b.0, -(g * t.val(o)) / bv);
            })
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.val(a).clone();
        self.push_with(v, &[a], || Box::new(move |_t, _o, g, sink| sink(a.0, -g.clone())))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.val(a) * c;
        self.push_with(v, &[a], || Box::new(move |_t, _o, g, sink| sink(a.0, g * c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.val(a) + c;
        self.push_with(v, &[a], || Box::new(move |_t, _o, g, sink| sink(a.0, g.clone())))
    }

    /// `1 - x`, used by complement probabilities.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, T::one())
    }
}

/// Elementwise unary nonlinearities.
impl<T: Scalar> Tape<T> {
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| T::one() / (T::one() + (-x).exp()));
        self.push_with(v, &[a], || {
            Box::new(move |t, o, g, sink| {
                let y = t.val(o);
                sink(a.0, g * &y.mapv(|y| y * (T::one() - y)));
            })
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push_with(v, &[a], || {
            Box::new(move |t, _o, g, sink| {
                let mask = t.val(a).mapv(|x| if x > T::zero() { T::one() } else { T::zero() });
                sink(a.0, g * &mask);
            })
        })
    }

    /// GELU, tanh approximation. Smooth, so finite differences agree closely.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c1 = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c2 = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        let v = self.val(a).mapv(|x| {
            let u = c1 * (x + c2 * x * x * x);
            half * x * (T::one() + u.tanh())
        });
        self.push_with(v, &[a], || {
            Box::new(move |t, _o, g, sink| {
                let d = t.val(a).mapv(|x| {
                    let u = c1 * (x + c2 * x * x * x);
                    let th = u.tanh();
                    let sech2 = T::one() - th * th;
                    let du = c1 * (T::one() + T::from_f64(3.0) * c2 * x * x);
                    half * (T::one() + th) + half * x * sech2 * du
                });
                sink(a.0, g * &d);
            })
        })
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs_val(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x.abs());
        self.push_with(v, &[a], || {
            Box::new(move |t, _o, g, sink| {
                let s = t.val(a).mapv(|x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                sink(a.0, g * &s);
            })
        })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a).mapv(|x| x.ln());
        self.push_with(v, &[a], || {
            Box::new(move |t, _o, g, sink| sink(a.0, g / t.val(a)))
        })
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the interval
    /// (inclusive) and is zero outside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.val(a).mapv(|x| x.max(lo).min(hi));
        self.push_with(v, &[a], || {
            Box::new(move |t, _o, g, sink| {
                let mask = t
                    .val(a)
                    .mapv(|x| if x >= lo && x <= hi { T::one() } else { T::zero() });
                sink(a.0, g * &mask);
            })
        })
    }
}

/// Reductions and broadcasts.
impl<T: Scalar> Tape<T> {
    /// Mean over every element; returns a 0-d tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len();
        let inv = T::from_usize(n).recip();
        let m = self.val(a).iter().fold(T::zero(), |acc, &x| acc + x) * inv;
        let v = ArrayD::from_elem(IxDyn(&[]), m);
        self.push_with(v, &[a], || {
            Box::new(move |t, _o, g, sink| {
                let gv = g[[]] * inv;
                sink(a.0, ArrayD::from_elem(t.val(a).raw_dim(), gv));
            })
        })
    }

    /// Sum over all axes except the first; `[B, ...] -> [B]`.
    pub fn sum_batchwise(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let b = av.shape()[0];
        let row = av.len() / b;
        let s = av.as_slice().unwrap();
        let mut out = Vec::with_capacity(b);
        for chunk in s.chunks_exact(row) {
            out.push(chunk.iter().fold(T::zero(), |acc, &x| acc + x));
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b]), out).unwrap();
        self.push_with(v, &[a], || {
            Box::new(move |t, _o, g, sink| {
                let shape = t.val(a).raw_dim();
                let gs = g.as_slice().unwrap();
                let mut dx = Vec::with_capacity(t.val(a).len());
                for &gb in gs {
                    dx.extend(std::iter::repeat(gb).take(row));
                }
                sink(a.0, ArrayD::from_shape_vec(shape, dx).unwrap());
            })
        })
    }

    /// Mean over the token axis of `[B, N, D] -> [B, D]`.
    pub fn mean_tokens(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let (b, n, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let inv = T::from_usize(n).recip();
        let s = av.as_slice().unwrap();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for ni in 0..n {
                let src = &s[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                let dst = &mut out[bi * d..(bi + 1) * d];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= inv);
        let v = ArrayD::from_shape_vec(IxDyn(&[b, d]), out).unwrap();
        self.push_with(v, &[a], || {
            Box::new(move |_t, _o, g, sink| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); b * n * d];
                for bi in 0..b {
                    let grow = &gs[bi * d..(bi + 1) * d];
                    for ni in 0..n {
                        let dst = &mut dx[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(grow) {
                            *o = gv * inv;
                        }
                    }
                }
                sink(a.0, ArrayD::from_shape_vec(IxDyn(&[b, n, d]), dx).unwrap());
            })
        })
    }

    /// Broadcast-add a parameter over the batch axis: `x[B, ...] + p[...]`.
    pub fn add_bcast0(&mut self, x: Var, p: Var) -> Var {
        let xv = self.val(x);
        let pv = self.val(p);
        assert_eq!(&xv.shape()[1..], pv.shape(), "add_bcast0 trailing shape");
        let b = xv.shape()[0];
        let row = pv.len();
        let xs = xv.as_slice().unwrap();
        let ps = pv.as_slice().unwrap();
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks_exact(row) {
            out.extend(chunk.iter().zip(ps).map(|(&a, &b)| a + b));
        }
        let v = ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap();
        self.push_with(v, &[x, p], || {
            Box::new(move |t, _o, g, sink| {
                sink(x.0, g.clone());
                if t.needs_grad(p) {
                    let gs = g.as_slice().unwrap();
                    let mut dp = vec![T::zero(); row];
                    for chunk in gs.chunks_exact(row) {
                        for (o, &gv) in dp.iter_mut().zip(chunk) {
                            *o += gv;
                        }
                    }
                    let _ = b;
                    sink(p.0, ArrayD::from_shape_vec(t.val(p).raw_dim(), dp).unwrap());
                }
            })
        })
    }
}

/// Linear algebra.
impl<T: Scalar> Tape<T> {
    /// Fused affine map on the last axis: `x[..., K] @ w[K, N] (+ bias[N])`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xv = self.val(x);
        let wv = self.val(w);
        let k = *xv.shape().last().unwrap();
        assert_eq!(wv.shape()[0], k, "linear in-dim");
        let n = wv.shape()[1];
        let r = xv.len() / k;
        let mut y = mm(view2(xv, r, k), view2(wv, k, n));
        if let Some(bv) = bias {
            let b = self.val(bv);
            let bs = b.as_slice().unwrap();
            for mut row in y.rows_mut() {
                for (o, &bb) in row.iter_mut().zip(bs) {
                    *o += bb;
                }
            }
        }
        let mut out_shape: Vec<usize> = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let v = reshaped(into_dyn(y), &out_shape);
        let parents: Vec<Var> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        self.push_with(v, &parents, || {
            Box::new(move |t, _o, g, sink| {
                let g2 = view2(g, r, n);
                if t.needs_grad(x) {
                    let dw_in = mm(g2, view2(t.val(w), k, n).reversed_axes());
                    sink(x.0, reshaped(into_dyn(dw_in), t.val(x).shape()));
                }
                if t.needs_grad(w) {
                    let dw = mm(view2(t.val(x), r, k).reversed_axes(), g2);
                    sink(w.0, into_dyn(dw));
                }
                if let Some(bv) = bias {
                    if t.needs_grad(bv) {
                        let mut db = vec![T::zero(); n];
                        for row in g2.rows() {
                            for (o, &gv) in db.iter_mut().zip(row) {
                                *o += gv;
                            }
                        }
                        sink(bv.0, ArrayD::from_shape_vec(IxDyn(&[n]), db).unwrap());
                    }
                }
            })
        })
    }

    /// Batched matmul `a[B, M, K] @ b[B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.val(a);
        let bv = self.val(b);
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[2];
        assert_eq!(bv.shape()[0], nb);
        assert_eq!(bv.shape()[1], k, "bmm inner dim");
        let mut out = ndarray::Array3::<T>::zeros((nb, m, n));
        for i in 0..nb {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            let oi = out.index_axis_mut(Axis(0), i);
            mm_into(
                ai.into_dimensionality().unwrap(),
                bi.into_dimensionality().unwrap(),
                T::zero(),
                &mut oi.into_dimensionality().unwrap(),
            );
        }
        self.push_with(into_dyn(out), &[a, b], || {
            Box::new(move |t, _o, g, sink| {
                let gv = g.view().into_shape_with_order((nb, m, n)).unwrap();
                if t.needs_grad(a) {
                    let bvv = t.val(b);
                    let mut da = ndarray::Array3::<T>::zeros((nb, m, k));
                    for i in 0..nb {
                        let gi = gv.index_axis(Axis(0), i);
                        let bi = bvv
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let di = da.index_axis_mut(Axis(0), i);
                        mm_into(gi, bi.reversed_axes(), T::zero(), &mut di.into_dimensionality().unwrap());
                    }
                    sink(a.0, into_dyn(da));
                }
                if t.needs_grad(b) {
                    let avv = t.val(a);
                    let mut db = ndarray::Array3::<T>::zeros((nb, k, n));
                    for i in 0..nb {
                        let gi = gv.index_axis(Axis(0), i);
                        let ai = avv
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let di = db.index_axis_mut(Axis(0), i);
                        mm_into(ai.reversed_axes(), gi, T::zero(), &mut di.into_dimensionality().unwrap());
                    }
                    sink(b.0, into_dyn(db));
                }
            })
        })
    }

    /// Batched matmul against a transposed right operand:
    /// `a[B, M, K] @ b[B, N, K]^T -> [B, M, N]`. Attention scores use this.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.val(a);
        let bv = self.val(b);
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[1];
        assert_eq!(bv.shape()[0], nb);
        assert_eq!(bv.shape()[2], k, "bmm_nt inner dim");
        let mut out = ndarray::Array3::<T>::zeros((nb, m, n));
        for i in 0..nb {
            let ai = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let bi = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let oi = out.index_axis_mut(Axis(0), i);
            mm_into(ai, bi.reversed_axes(), T::zero(), &mut oi.into_dimensionality().unwrap());
        }
        self.push_with(into_dyn(out), &[a, b], || {
            Box::new(move |t, _o, g, sink| {
                let gv = g.view().into_shape_with_order((nb, m, n)).unwrap();
                if t.needs_grad(a) {
                    let bvv = t.val(b);
                    let mut da = ndarray::Array3::<T>::zeros((nb, m, k));
                    for i in 0..nb {
                        let gi = gv.index_axis(Axis(0), i);
                        let bi = bvv
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let di = da.index_axis_mut(Axis(0), i);
                        mm_into(gi, bi, T::zero(), &mut di.into_dimensionality().unwrap());
                    }
                    sink(a.0, into_dyn(da));
                }
                if t.needs_grad(b) {
                    let avv = t.val(a);
                    let mut db = ndarray::Array3::<T>::zeros((nb, n, k));
                    for i in 0..nb {
                        let gi = gv.index_axis(Axis(0), i);
                        let ai = avv
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let di = db.index_axis_mut(Axis(0), i);
                        mm_into(gi.reversed_axes(), ai, T::zero(), &mut di.into_dimensionality().unwrap());
                    }
                    sink(b.0, into_dyn(db));
                }
            })
        })
    }
}

/// Normalization and attention pieces.
impl<T: Scalar> Tape<T> {
    /// Numerically-stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let d = *av.shape().last().unwrap();
        let s = av.as_slice().unwrap();
        let mut out = Vec::with_capacity(s.len());
        for row in s.chunks_exact(d) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut denom = T::zero();
            let start = out.len();
            for &x in row {
                let e = (x - mx).exp();
                denom += e;
                out.push(e);
            }
            let inv = denom.recip();
            for o in &mut out[start..] {
                *o *= inv;
            }
        }
        let v = ArrayD::from_shape_vec(av.raw_dim(), out).unwrap();
        self.push_with(v, &[a], || {
            Box::new(move |t, o, g, sink| {
                let y = t.val(o).as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = Vec::with_capacity(gs.len());
                for (yr, gr) in y.chunks_exact(d).zip(gs.chunks_exact(d)) {
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                sink(a.0, ArrayD::from_shape_vec(t.val(a).raw_dim(), dx).unwrap());
            })
        })
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.val(x);
        let d = *xv.shape().last().unwrap();
        let inv_d = T::from_usize(d).recip();
        let gs = self.val(gamma).as_slice().unwrap().to_vec();
        let bs = self.val(beta).as_slice().unwrap().to_vec();
        let s = xv.as_slice().unwrap();
        let mut out = Vec::with_capacity(s.len());
        for row in s.chunks_exact(d) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let inv_std = (var + eps).sqrt().recip();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv_std * gs[j] + bs[j]);
            }
        }
        let v = ArrayD::from_shape_vec(xv.raw_dim(), out).unwrap();
        self.push_with(v, &[x, gamma, beta], || {
            Box::new(move |t, _o, g, sink| {
                let xs = t.val(x).as_slice().unwrap();
                let gup = g.as_slice().unwrap();
                let gam = t.val(gamma).as_slice().unwrap();
                let rows = xs.len() / d;
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let xr = &xs[r * d..(r + 1) * d];
                    let gr = &gup[r * d..(r + 1) * d];
                    let mean = xr.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
                    let var = xr
                        .iter()
                        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                        * inv_d;
                    let inv_std = (var + eps).sqrt().recip();
                    // h = g * gamma; dx = inv_std * (h - mean(h) - xhat * mean(h * xhat))
                    let mut mean_h = T::zero();
                    let mut mean_hx = T::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        let h = gr[j] * gam[j];
                        mean_h += h;
                        mean_hx += h * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    mean_h *= inv_d;
                    mean_hx *= inv_d;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        let h = gr[j] * gam[j];
                        dx[r * d + j] = inv_std * (h - mean_h - xhat * mean_hx);
                    }
                }
                sink(x.0, ArrayD::from_shape_vec(t.val(x).raw_dim(), dx).unwrap());
                sink(gamma.0, ArrayD::from_shape_vec(IxDyn(&[d]), dgamma).unwrap());
                sink(beta.0, ArrayD::from_shape_vec(IxDyn(&[d]), dbeta).unwrap());
            })
        })
    }

    /// Feature-wise affine modulation with broadcasting over the token axis:
    /// `out[b,n,d] = gamma[b,d] * z[b,n,d] + beta[b,d]`.
    pub fn film(&mut self, z: Var, gamma: Var, beta: Var) -> Var {
        let zv = self.val(z);
        let (b, n, d) = (zv.shape()[0], zv.shape()[1], zv.shape()[2]);
        assert_eq!(self.val(gamma).shape(), &[b, d], "film gamma shape");
        assert_eq!(self.val(beta).shape(), &[b, d], "film beta shape");
        let zs = zv.as_slice().unwrap();
        let gs = self.val(gamma).as_slice().unwrap();
        let bs = self.val(beta).as_slice().unwrap();
        let mut out = Vec::with_capacity(zs.len());
        for bi in 0..b {
            let grow = &gs[bi * d..(bi + 1) * d];
            let brow = &bs[bi * d..(bi + 1) * d];
            for ni in 0..n {
                let zrow = &zs[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                for j in 0..d {
                    out.push(grow[j] * zrow[j] + brow[j]);
                }
            }
        }
        let v = ArrayD::from_shape_vec(zv.raw_dim(), out).unwrap();
        self.push_with(v, &[z, gamma, beta], || {
            Box::new(move |t, _o, g, sink| {
                let gu = g.as_slice().unwrap();
                let zs = t.val(z).as_slice().unwrap();
                let gs = t.val(gamma).as_slice().unwrap();
                if t.needs_grad(z) {
                    let mut dz = vec![T::zero(); zs.len()];
                    for bi in 0..b {
                        let grow = &gs[bi * d..(bi + 1) * d];
                        for ni in 0..n {
                            let base = (bi * n + ni) * d;
                            for j in 0..d {
                                dz[base + j] = gu[base + j] * grow[j];
                            }
                        }
                    }
                    sink(z.0, ArrayD::from_shape_vec(t.val(z).raw_dim(), dz).unwrap());
                }
                let mut dgamma = vec![T::zero(); b * d];
                let mut dbeta = vec![T::zero(); b * d];
                for bi in 0..b {
                    for ni in 0..n {
                        let base = (bi * n + ni) * d;
                        for j in 0..d {
                            dgamma[bi * d + j] += gu[base + j] * zs[base + j];
                            dbeta[bi * d + j] += gu[base + j];
                        }
                    }
                }
                sink(gamma.0, ArrayD::from_shape_vec(IxDyn(&[b, d]), dgamma).unwrap());
                sink(beta.0, ArrayD::from_shape_vec(IxDyn(&[b, d]), dbeta).unwrap());
            })
        })
    }
}

/// Shape manipulation.
impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = reshaped(self.val(a).clone(), shape);
        self.push_with(v, &[a], || {
            Box::new(move |t, _o, g, sink| {
                sink(a.0, reshaped(g.clone(), t.val(a).shape()));
            })
        })
    }

    /// Permute a rank-4 tensor `[A, B, C, D] -> [A, C, B, D]` (self-inverse).
    pub fn permute_0213(&mut self, a: Var) -> Var {
        fn perm<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
            let v = x
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .permuted_axes([0, 2, 1, 3]);
            into_dyn(v.as_standard_layout().to_owned())
        }
        let v = perm(self.val(a));
        self.push_with(v, &[a], || {
            Box::new(move |_t, _o, g, sink| sink(a.0, perm(g)))
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.val(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|&p| self.val(p).shape()[axis]).collect();
        let parts_owned: Arc<Vec<Var>> = Arc::new(parts.to_vec());
        self.push_with(v.as_standard_layout().to_owned(), parts, move || {
            Box::new(move |_t, _o, g, sink| {
                let mut start = 0;
                for (i, &p) in parts_owned.iter().enumerate() {
                    let end = start + sizes[i];
                    let piece = g.slice_axis(Axis(axis), ndarray::Slice::from(start..end));
                    sink(p.0, piece.as_standard_layout().to_owned());
                    start = end;
                }
            })
        })
    }
}

/// Patch/token rearrangement for the autoencoder.
impl<T: Scalar> Tape<T> {
    /// `[B, C, H, W] -> [B, N, C*ps*ps]` with `N = (H/ps)*(W/ps)`.
    /// Token features are ordered channel-major, then row, then column.
    pub fn patchify(&mut self, a: Var, ps: usize) -> Var {
        let av = self.val(a);
        let (b, c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2], av.shape()[3]);
        assert!(h % ps == 0 && w % ps == 0, "patchify divisibility");
        let v = patchify_arr(av, ps);
        self.push_with(v, &[a], || {
            Box::new(move |_t, _o, g, sink| {
                sink(a.0, unpatchify_arr(g, ps, c, h, w));
            })
        });
        let _ = b;
        Var(self.len() - 1)
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, a: Var, ps: usize, c: usize, h: usize, w: usize) -> Var {
        let v = unpatchify_arr(self.val(a), ps, c, h, w);
        self.push_with(v, &[a], || {
            Box::new(move |_t, _o, g, sink| sink(a.0, patchify_arr(g, ps)))
        })
    }

    /// Select token rows per batch element: `x[B, N, D], idx[B][Nv] -> [B, Nv, D]`.
    pub fn gather_tokens(&mut self, a: Var, idx: Arc<Vec<Vec<usize>>>) -> Var {
        let av = self.val(a);
        let (b, n, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let nv = idx[0].len();
        let s = av.as_slice().unwrap();
        let mut out = Vec::with_capacity(b * nv * d);
        for (bi, rows) in idx.iter().enumerate() {
            debug_assert_eq!(rows.len(), nv);
            for &ni in rows {
                out.extend_from_slice(&s[(bi * n + ni) * d..(bi * n + ni + 1) * d]);
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, nv, d]), out).unwrap();
        let idx_b = Arc::clone(&idx);
        self.push_with(v, &[a], move || {
            Box::new(move |_t, _o, g, sink| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); b * n * d];
                for (bi, rows) in idx_b.iter().enumerate() {
                    for (vi, &ni) in rows.iter().enumerate() {
                        let src = &gs[(bi * nv + vi) * d..(bi * nv + vi + 1) * d];
                        let dst = &mut dx[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                }
                sink(a.0, ArrayD::from_shape_vec(IxDyn(&[b, n, d]), dx).unwrap());
            })
        })
    }

    /// Scatter visible tokens back to their positions, filling the rest with a
    /// learned placeholder row: `vis[B, Nv, D], fill[D] -> [B, N, D]`.
    pub fn scatter_tokens(
        &mut self,
        vis: Var,
        idx: Arc<Vec<Vec<usize>>>,
        n_total: usize,
        fill: Var,
    ) -> Var {
        let vv = self.val(vis);
        let (b, nv, d) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        let fillv = self.val(fill).as_slice().unwrap().to_vec();
        assert_eq!(fillv.len(), d);
        let s = vv.as_slice().unwrap();
        let mut out = vec![T::zero(); b * n_total * d];
        for bi in 0..b {
            for t in 0..n_total {
                out[(bi * n_total + t) * d..(bi * n_total + t + 1) * d].copy_from_slice(&fillv);
            }
            for (vi, &ni) in idx[bi].iter().enumerate() {
                let src = &s[(bi * nv + vi) * d..(bi * nv + vi + 1) * d];
                out[(bi * n_total + ni) * d..(bi * n_total + ni + 1) * d].copy_from_slice(src);
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, n_total, d]), out).unwrap();
        let idx_b = Arc::clone(&idx);
        self.push_with(v, &[vis, fill], move || {
            Box::new(move |t, _o, g, sink| {
                let gs = g.as_slice().unwrap();
                if t.needs_grad(vis) {
                    let mut dv = vec![T::zero(); b * nv * d];
                    for bi in 0..b {
                        for (vi, &ni) in idx_b[bi].iter().enumerate() {
                            let src = &gs[(bi * n_total + ni) * d..(bi * n_total + ni + 1) * d];
                            dv[(bi * nv + vi) * d..(bi * nv + vi + 1) * d].copy_from_slice(src);
                        }
                    }
                    sink(vis.0, ArrayD::from_shape_vec(IxDyn(&[b, nv, d]), dv).unwrap());
                }
                if t.needs_grad(fill) {
                    let mut df = vec![T::zero(); d];
                    for bi in 0..b {
                        let visible: std::collections::HashSet<usize> =
                            idx_b[bi].iter().copied().collect();
                        for ni in 0..n_total {
                            if visible.contains(&ni) {
                                continue;
                            }
                            let src = &gs[(bi * n_total + ni) * d..(bi * n_total + ni + 1) * d];
                            for (o, &gv) in df.iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                    }
                    sink(fill.0, ArrayD::from_shape_vec(IxDyn(&[d]), df).unwrap());
                }
            })
        })
    }
}

fn patchify_arr<T: Scalar>(x: &ArrayD<T>, ps: usize) -> ArrayD<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (gh, gw) = (h / ps, w / ps);
    let n = gh * gw;
    let dim = c * ps * ps;
    let s = x.as_slice().unwrap();
    let mut out = vec![T::zero(); b * n * dim];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = gy * gw + gx;
                let base = (bi * n + tok) * dim;
                for ci in 0..c {
                    for py in 0..ps {
                        let src = ((bi * c + ci) * h + gy * ps + py) * w + gx * ps;
                        let dst = base + (ci * ps + py) * ps;
                        out[dst..dst + ps].copy_from_slice(&s[src..src + ps]);
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, n, dim]), out).unwrap()
}

fn unpatchify_arr<T: Scalar>(tok: &ArrayD<T>, ps: usize, c: usize, h: usize, w: usize) -> ArrayD<T> {
    let b = tok.shape()[0];
    let (gh, gw) = (h / ps, w / ps);
    let n = gh * gw;
    let dim = c * ps * ps;
    debug_assert_eq!(tok.shape()[1], n);
    debug_assert_eq!(tok.shape()[2], dim);
    let s = tok.as_slice().unwrap();
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tk = gy * gw + gx;
                let base = (bi * n + tk) * dim;
                for ci in 0..c {
                    for py in 0..ps {
                        let dst = ((bi * c + ci) * h + gy * ps + py) * w + gx * ps;
                        let src = base + (ci * ps + py) * ps;
                        out[dst..dst + ps].copy_from_slice(&s[src..src + ps]);
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap()
}

/// Convolution and resampling.
impl<T: Scalar> Tape<T> {
    /// 2-D convolution with square kernel, zero padding.
    /// `x[B, Cin, H, W] * w[Cout, Cin, k, k] (+ bias[Cout])`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self.val(x);
        let wv = self.val(w);
        let (b, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape()[1], cin, "conv2d in-channels");
        assert_eq!(wv.shape()[3], k, "square kernel");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kdim = cin * k * k;

        let wmat = view2(wv, cout, kdim);
        let mut out = vec![T::zero(); b * cout * ho * wo];
        let xs = xv.as_slice().unwrap();
        for bi in 0..b {
            let col = im2col(&xs[bi * cin * h * wd..], cin, h, wd, k, stride, pad, ho, wo);
            let colv = ArrayView2::from_shape((kdim, ho * wo), &col).unwrap();
            let y = mm(wmat, colv);
            out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo]
                .copy_from_slice(y.as_slice().unwrap());
        }
        if let Some(bv) = bias {
            let bs = self.val(bv).as_slice().unwrap();
            for bi in 0..b {
                for co in 0..cout {
                    let beg = (bi * cout + co) * ho * wo;
                    let add = bs[co];
                    for o in &mut out[beg..beg + ho * wo] {
                        *o += add;
                    }
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, cout, ho, wo]), out).unwrap();
        let parents: Vec<Var> = match bias {
            Some(bb) => vec![x, w, bb],
            None => vec![x, w],
        };
        self.push_with(v, &parents, || {
            Box::new(move |t, _o, g, sink| {
                let gs = g.as_slice().unwrap();
                let xs = t.val(x).as_slice().unwrap();
                let wv = t.val(w);
                if t.needs_grad(w) {
                    let mut dw = Array2::<T>::zeros((cout, kdim));
                    for bi in 0..b {
                        let col =
                            im2col(&xs[bi * cin * h * wd..], cin, h, wd, k, stride, pad, ho, wo);
                        let colv = ArrayView2::from_shape((kdim, ho * wo), &col).unwrap();
                        let gmat =
                            ArrayView2::from_shape((cout, ho * wo), &gs[bi * cout * ho * wo..(bi + 1) * cout * ho * wo])
                                .unwrap();
                        mm_into(gmat, colv.reversed_axes(), T::one(), &mut dw.view_mut());
                    }
                    sink(w.0, reshaped(into_dyn(dw), t.val(w).shape()));
                }
                if t.needs_grad(x) {
                    let wmat = view2(wv, cout, kdim);
                    let mut dx = vec![T::zero(); b * cin * h * wd];
                    for bi in 0..b {
                        let gmat = ArrayView2::from_shape(
                            (cout, ho * wo),
                            &gs[bi * cout * ho * wo..(bi + 1) * cout * ho * wo],
                        )
                        .unwrap();
                        let dcol = mm(wmat.reversed_axes(), gmat); // [kdim, ho*wo]
                        col2im(
                            dcol.as_slice().unwrap(),
                            &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                            cin,
                            h,
                            wd,
                            k,
                            stride,
                            pad,
                            ho,
                            wo,
                        );
                    }
                    sink(x.0, ArrayD::from_shape_vec(IxDyn(&[b, cin, h, wd]), dx).unwrap());
                }
                if let Some(bv) = bias {
                    if t.needs_grad(bv) {
                        let mut db = vec![T::zero(); cout];
                        for bi in 0..b {
                            for co in 0..cout {
                                let beg = (bi * cout + co) * ho * wo;
                                db[co] += gs[beg..beg + ho * wo]
                                    .iter()
                                    .fold(T::zero(), |a, &v| a + v);
                            }
                        }
                        sink(bv.0, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());
                    }
                }
            })
        })
    }

    /// Bilinear resize of `[B, C, h, w]` to `(out_h, out_w)`, half-pixel
    /// centers, edges replicated (align-corners off).
    pub fn bilinear_upsample(&mut self, a: Var, out_h: usize, out_w: usize) -> Var {
        let av = self.val(a);
        let (b, c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2], av.shape()[3]);
        let plan_y = bilinear_plan::<T>(h, out_h);
        let plan_x = bilinear_plan::<T>(w, out_w);
        let s = av.as_slice().unwrap();
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for bc in 0..b * c {
            let src = &s[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * out_h * out_w..(bc + 1) * out_h * out_w];
            for (oy, &(y0, y1, wy)) in plan_y.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in plan_x.iter().enumerate() {
                    let one = T::one();
                    let v = src[y0 * w + x0] * (one - wy) * (one - wx)
                        + src[y0 * w + x1] * (one - wy) * wx
                        + src[y1 * w + x0] * wy * (one - wx)
                        + src[y1 * w + x1] * wy * wx;
                    dst[oy * out_w + ox] = v;
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, c, out_h, out_w]), out).unwrap();
        self.push_with(v, &[a], move || {
            Box::new(move |_t, _o, g, sink| {
                let gs = g.as_slice().unwrap();
                let plan_y = bilinear_plan::<T>(h, out_h);
                let plan_x = bilinear_plan::<T>(w, out_w);
                let mut dx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gsrc = &gs[bc * out_h * out_w..(bc + 1) * out_h * out_w];
                    let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in plan_y.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in plan_x.iter().enumerate() {
                            let one = T::one();
                            let gv = gsrc[oy * out_w + ox];
                            dst[y0 * w + x0] += gv * (one - wy) * (one - wx);
                            dst[y0 * w + x1] += gv * (one - wy) * wx;
                            dst[y1 * w + x0] += gv * wy * (one - wx);
                            dst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                sink(a.0, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
            })
        })
    }
}

/// Per-output-pixel source rows/weights for bilinear resampling.
fn bilinear_plan<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let floor = center.floor();
            let frac = center - floor;
            let i0 = (floor.max(0.0) as usize).min(src - 1);
            let i1 = ((floor + 1.0).max(0.0) as usize).min(src - 1);
            // When both taps clamp to the same pixel the weight is irrelevant.
            let frac = if center < 0.0 { 0.0 } else { frac };
            (i0, i1, T::from_f64(frac))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut col = vec![T::zero(); cin * k * k * ho * wo];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * wo + ox] = x[(ci * h + iy) * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    dx: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy) * w + ix as usize] += col[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}
