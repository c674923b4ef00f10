//! Segmentation losses (BCE + Dice, per stage, alpha-weighted total) and
//! pixel-level IoU / F1 metrics.
//!
//! Losses are built from tape primitives so their gradients come out of the
//! same reverse pass as everything else; metrics are plain `f64` functions.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::nn::Fwd;
use crate::scalar::Scalar;

/// Probability clamp applied inside the BCE log terms.
pub const BCE_EPS: f64 = 1e-7;

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

/// Default weight of the coarse-stage loss in the total.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Mean binary cross-entropy over all pixels.
/// `pred` must hold probabilities in (0,1); `target` is 0/1.
pub fn bce_loss<T: Scalar>(f: &mut Fwd<T>, pred: Var, target: Var) -> Var {
    assert_eq!(
        f.tape.val(pred).shape(),
        f.tape.val(target).shape(),
        "bce shape mismatch"
    );
    let eps = T::from_f64(BCE_EPS);
    let p = f.tape.clamp(pred, eps, T::one() - eps);
    let log_p = f.tape.ln(p);
    let pos = f.tape.mul(target, log_p);
    let one_minus_p = f.tape.one_minus(p);
    let log_1p = f.tape.ln(one_minus_p);
    let one_minus_t = f.tape.one_minus(target);
    let negt = f.tape.mul(one_minus_t, log_1p);
    let sum = f.tape.add(pos, negt);
    let mean = f.tape.mean_all(sum);
    f.tape.neg(mean)
}

/// Dice loss, computed per image and then averaged over the batch:
/// `1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)`.
pub fn dice_loss<T: Scalar>(f: &mut Fwd<T>, pred: Var, target: Var) -> Var {
    assert_eq!(
        f.tape.val(pred).shape(),
        f.tape.val(target).shape(),
        "dice shape mismatch"
    );
    let s = T::from_f64(DICE_SMOOTH);
    let two = T::from_f64(2.0);
    let pt = f.tape.mul(pred, target);
    let inter = f.tape.sum_batchwise(pt); // [B]
    let sp = f.tape.sum_batchwise(pred);
    let st = f.tape.sum_batchwise(target);
    let num = f.tape.scale(inter, two);
    let num = f.tape.add_scalar(num, s);
    let den = f.tape.add(sp, st);
    let den = f.tape.add_scalar(den, s);
    let overlap = f.tape.div(num, den);
    let per_image = f.tape.one_minus(overlap);
    f.tape.mean_all(per_image)
}

/// Per-stage objective: BCE + Dice.
pub fn stage_loss<T: Scalar>(f: &mut Fwd<T>, pred: Var, target: Var) -> Var {
    let b = bce_loss(f, pred, target);
    let d = dice_loss(f, pred, target);
    f.tape.add(b, d)
}

/// Combine the two stage losses on the tape: `l_ref + alpha * l_crs`.
pub fn total_loss<T: Scalar>(f: &mut Fwd<T>, l_ref: Var, l_crs: Var, alpha: T) -> Var {
    let weighted = f.tape.scale(l_crs, alpha);
    f.tape.add(l_ref, weighted)
}

/// Scalar view of one optimization step's objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_crs: f64,
    pub l_ref: f64,
    pub l_total: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(l_crs: f64, l_ref: f64, alpha: f64) -> Self {
        LossBreakdown {
            l_crs,
            l_ref,
            l_total: l_ref + alpha * l_crs,
            alpha,
        }
    }
}

/// Pixel metrics for one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub f1: f64,
}

/// Batch metrics: means plus the per-image values behind them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub iou: f64,
    pub f1: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn empty(threshold: f64) -> Self {
        MetricReport {
            threshold,
            iou: 0.0,
            f1: 0.0,
            per_image: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.per_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_image.is_empty()
    }
}

/// Pixel IoU and F1 for one prediction/target pair.
/// Both masks empty counts as a perfect score (authentic image left clean).
pub fn iou_f1_single<T: Scalar>(
    pred: &[T],
    target: &[T],
    threshold: f64,
) -> (f64, f64) {
    debug_assert_eq!(pred.len(), target.len());
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut t_count = 0usize;
    for (&p, &t) in pred.iter().zip(target) {
        let pp = p.to_f64() >= threshold;
        let tt = t.to_f64() >= 0.5;
        p_count += pp as usize;
        t_count += tt as usize;
        inter += (pp && tt) as usize;
    }
    if p_count == 0 && t_count == 0 {
        return (1.0, 1.0);
    }
    let union = p_count + t_count - inter;
    let iou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    let f1 = if p_count + t_count == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p_count + t_count) as f64
    };
    (iou, f1)
}

/// Evaluate `[B, 1, H, W]` predictions against binary targets.
pub fn iou_f1<T: Scalar>(
    pred: &Array4<T>,
    target: &Array4<T>,
    threshold: f64,
    ids: Option<&[String]>,
) -> MetricReport {
    assert_eq!(pred.dim(), target.dim(), "metric shape mismatch");
    let b = pred.dim().0;
    let per: usize = pred.len() / b;
    let ps = pred.as_slice().unwrap();
    let ts = target.as_slice().unwrap();
    let mut report = MetricReport::empty(threshold);
    for i in 0..b {
        let (iou, f1) = iou_f1_single(&ps[i * per..(i + 1) * per], &ts[i * per..(i + 1) * per], threshold);
        report.per_image.push(ImageMetrics {
            id: ids.map(|v| v[i].clone()).unwrap_or_default(),
            iou,
            f1,
        });
    }
    if b > 0 {
        report.iou = report.per_image.iter().map(|m| m.iou).sum::<f64>() / b as f64;
        report.f1 = report.per_image.iter().map(|m| m.f1).sum::<f64>() / b as f64;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn scalar_of(f: &Fwd<f64>, v: Var) -> f64 {
        *f.tape.val(v).iter().next().unwrap()
    }

    fn run_loss(
        pred: &ArrayD<f64>,
        target: &ArrayD<f64>,
        which: impl Fn(&mut Fwd<f64>, Var, Var) -> Var,
    ) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut f = Fwd::eval(&store);
        let p = f.tape.constant(pred.clone());
        let t = f.tape.constant(target.clone());
        let l = which(&mut f, p, t);
        scalar_of(&f, l)
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let target = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = run_loss(&target.clone(), &target, bce_loss);
        assert!(loss <= 1e-6, "loss {loss}");
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let pred = ArrayD::from_elem(IxDyn(&[2, 1, 3, 3]), 0.5);
        let target = ArrayD::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |ix| {
            ((ix[2] + ix[3]) % 2) as f64
        });
        let loss = run_loss(&pred, &target, bce_loss);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn bce_matches_per_pixel_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let pred = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |_| rng.gen_range(0.02..0.98));
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |_| {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let loss = run_loss(&pred, &target, bce_loss);
        let mut oracle = 0.0;
        for (p, t) in pred.iter().zip(target.iter()) {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            oracle += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        oracle /= 16.0;
        assert!((loss - oracle).abs() < 1e-9, "{loss} vs {oracle}");
    }

    #[test]
    fn dice_perfect_overlap_is_bounded_by_smoothing() {
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| {
            if ix[2] < 2 {
                1.0
            } else {
                0.0
            }
        });
        let loss = run_loss(&target.clone(), &target, dice_loss);
        let area = 8.0;
        assert!(loss >= 0.0 && loss < DICE_SMOOTH / (2.0 * area + DICE_SMOOTH));
    }

    #[test]
    fn dice_disjoint_masks_near_one() {
        let pred = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| {
            if ix[2] < 2 {
                1.0
            } else {
                0.0
            }
        });
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| {
            if ix[2] >= 2 {
                1.0
            } else {
                0.0
            }
        });
        let loss = run_loss(&pred, &target, dice_loss);
        assert!(loss > 0.9, "loss {loss}");
    }

    #[test]
    fn dice_uniform_half_matches_formula_oracle() {
        // pred = 0.5 everywhere on 4x4, target has 8 ones:
        // per image: 1 - (2*(0.5*8) + 1) / (8 + 8 + 1) = 1 - 9/17
        let pred = ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.5);
        let target = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| {
            if ix[3] < 2 {
                1.0
            } else {
                0.0
            }
        });
        let loss = run_loss(&pred, &target, dice_loss);
        let oracle = 1.0 - 9.0 / 17.0;
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn stage_loss_is_sum_of_parts() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let pred = ArrayD::from_shape_fn(IxDyn(&[2, 1, 4, 4]), |_| rng.gen_range(0.05..0.95));
        let target = ArrayD::from_shape_fn(IxDyn(&[2, 1, 4, 4]), |_| {
            if rng.gen_bool(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let total = run_loss(&pred, &target, stage_loss);
        let b = run_loss(&pred, &target, bce_loss);
        let d = run_loss(&pred, &target, dice_loss);
        assert!((total - (b + d)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let store = ParamStore::<f64>::new();
        let mut f = Fwd::eval(&store);
        let l_ref = f.tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.4));
        let l_crs = f.tape.constant(ArrayD::from_elem(IxDyn(&[]), 0.2));
        let total = total_loss(&mut f, l_ref, l_crs, 0.5);
        assert_eq!(scalar_of(&f, total), 0.5);
        let total0 = total_loss(&mut f, l_ref, l_crs, 0.0);
        assert_eq!(scalar_of(&f, total0), 0.4);
        let br = LossBreakdown::new(0.2, 0.4, 0.5);
        assert_eq!(br.l_total, br.l_ref + br.alpha * br.l_crs);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Central differences at h=1e-4, relative error < 1e-4, random 8x8.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for trial in 0..5 {
            let shape = IxDyn(&[1, 1, 8, 8]);
            let pred = ArrayD::from_shape_fn(shape.clone(), |_| rng.gen_range(0.02..0.98));
            let target = ArrayD::from_shape_fn(shape.clone(), |_| {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            });
            for which in [0usize, 1] {
                let store = ParamStore::<f64>::new();
                let mut f = Fwd::train(&store);
                let p = f.tape.leaf(pred.clone(), true);
                let t = f.tape.constant(target.clone());
                let loss = if which == 0 {
                    bce_loss(&mut f, p, t)
                } else {
                    dice_loss(&mut f, p, t)
                };
                let grads = f.tape.backward(loss);
                let analytic = grads.get(p).unwrap().clone();

                let h = 1e-4;
                for flat in [0usize, 7, 21, 63] {
                    let mut plus = pred.clone();
                    let mut minus = pred.clone();
                    plus.as_slice_mut().unwrap()[flat] += h;
                    minus.as_slice_mut().unwrap()[flat] -= h;
                    let lp = run_loss(&plus, &target, |f, p, t| {
                        if which == 0 {
                            bce_loss(f, p, t)
                        } else {
                            dice_loss(f, p, t)
                        }
                    });
                    let lm = run_loss(&minus, &target, |f, p, t| {
                        if which == 0 {
                            bce_loss(f, p, t)
                        } else {
                            dice_loss(f, p, t)
                        }
                    });
                    let fd = (lp - lm) / (2.0 * h);
                    let an = analytic.as_slice().unwrap()[flat];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-4, "trial {trial} loss {which} elem {flat}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn metrics_trivial_cases() {
        let pred = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, _)| if y < 2 { 1.0 } else { 0.0 });
        let report = iou_f1(&pred, &pred.clone(), 0.5, None);
        assert_eq!(report.iou, 1.0);
        assert_eq!(report.f1, 1.0);

        let target = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, _)| if y >= 2 { 1.0 } else { 0.0 });
        let report = iou_f1(&pred, &target, 0.5, None);
        assert_eq!(report.iou, 0.0);
        assert_eq!(report.f1, 0.0);

        // empty/empty convention
        let z = Array4::<f64>::zeros((1, 1, 4, 4));
        let report = iou_f1(&z, &z.clone(), 0.5, None);
        assert_eq!(report.iou, 1.0);
        assert_eq!(report.f1, 1.0);
    }

    #[test]
    fn metrics_overlapping_blocks_oracle() {
        // P is a 2x2 block, T is a 2x2 block sharing a 2x1 column on 8x8:
        // |P∩T| = 2, |P∪T| = 6 -> IoU = 1/3; F1 = 2*2/(4+4) = 0.5.
        let mut pred = Array4::<f64>::zeros((1, 1, 8, 8));
        let mut target = Array4::<f64>::zeros((1, 1, 8, 8));
        for y in 2..4 {
            for x in 2..4 {
                pred[[0, 0, y, x]] = 1.0;
            }
            for x in 3..5 {
                target[[0, 0, y, x]] = 1.0;
            }
        }
        let report = iou_f1(&pred, &target, 0.5, None);
        assert!((report.iou - 2.0 / 6.0).abs() < 1e-12);
        assert!((report.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f1_equals_2iou_over_1_plus_iou() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for _ in 0..50 {
            let pred = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.gen_range(0.0..1.0));
            let target =
                Array4::from_shape_fn((1, 1, 8, 8), |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
            let r = iou_f1(&pred, &target, 0.5, None);
            let want = 2.0 * r.iou / (1.0 + r.iou);
            assert!((r.f1 - want).abs() < 1e-12);
            assert!(r.f1 >= r.iou - 1e-12);
        }
    }

    #[test]
    fn threshold_monotonicity() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let pred = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.gen_range(0.0..1.0));
        let count = |thr: f64| {
            pred.iter().filter(|&&p| p >= thr).count()
        };
        let mut prev = usize::MAX;
        for i in 0..20 {
            let c = count(i as f64 / 20.0);
            assert!(c <= prev);
            prev = c;
        }
    }
}
