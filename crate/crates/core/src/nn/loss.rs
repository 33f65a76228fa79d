//! Cross-entropy losses used by the two training stages and the
//! segmentation pretraining head.

use ndarray::{s, Array3, Array4};

/// Numerically stable log-softmax over a pair of logits.
#[inline]
fn log_softmax2(z0: f64, z1: f64) -> (f64, f64) {
    let m = z0.max(z1);
    let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
    (z0 - lse, z1 - lse)
}

/// Weighted two-class cross-entropy over per-cell occupancy logits.
///
/// `logits` is one `(B, 2, N, N)` tensor per future step; `targets` is the
/// dense one-hot stack `(B, t_f, N, N)`. The occupied class is weighted by
/// `positive_weight`, the empty class by 1; the result is the plain mean over
/// batch, steps and cells (weights scale the occupied terms but not the
/// normalizer, so increasing the weight strictly increases a miss's cost).
///
/// Returns the loss and, when `grad` is true, the per-step logit gradients.
pub fn weighted_grid_ce(
    logits: &[Array4<f64>],
    targets: &Array4<f64>,
    positive_weight: f64,
    grad: bool,
) -> (f64, Option<Vec<Array4<f64>>>) {
    let t_f = logits.len();
    let (bsz, two, n, _) = logits[0].dim();
    assert_eq!(two, 2, "grid logits must have two classes");
    assert_eq!(targets.dim(), (bsz, t_f, n, n), "target shape");
    let total = (bsz * t_f * n * n) as f64;
    let mut loss = 0.0;
    let mut grads = if grad {
        Some(vec![Array4::zeros((bsz, 2, n, n)); t_f])
    } else {
        None
    };
    for (t, lt) in logits.iter().enumerate() {
        for bi in 0..bsz {
            for r in 0..n {
                for c in 0..n {
                    let z0 = lt[[bi, 0, r, c]];
                    let z1 = lt[[bi, 1, r, c]];
                    let (l0, l1) = log_softmax2(z0, z1);
                    let occupied = targets[[bi, t, r, c]] > 0.5;
                    let w = if occupied { positive_weight } else { 1.0 };
                    loss -= w * if occupied { l1 } else { l0 };
                    if let Some(gs) = grads.as_mut() {
                        let p0 = l0.exp();
                        let p1 = l1.exp();
                        let (y0, y1) = if occupied { (0.0, 1.0) } else { (1.0, 0.0) };
                        gs[t][[bi, 0, r, c]] = w * (p0 - y0) / total;
                        gs[t][[bi, 1, r, c]] = w * (p1 - y1) / total;
                    }
                }
            }
        }
    }
    (loss / total, grads)
}

/// Occupancy probabilities from two-class logits: softmax over the class
/// axis, occupied channel. Output is `(B, t_f, N, N)`.
pub fn occupancy_probabilities(logits: &[Array4<f64>]) -> Array4<f64> {
    let t_f = logits.len();
    let (bsz, _, n, _) = logits[0].dim();
    let mut probs = Array4::zeros((bsz, t_f, n, n));
    for (t, lt) in logits.iter().enumerate() {
        for bi in 0..bsz {
            for r in 0..n {
                for c in 0..n {
                    let (_, l1) = log_softmax2(lt[[bi, 0, r, c]], lt[[bi, 1, r, c]]);
                    probs[[bi, t, r, c]] = l1.exp();
                }
            }
        }
    }
    probs
}

/// Mean per-pixel cross-entropy for `n_classes` segmentation logits
/// `(B, n_classes, N, N)` against class-index maps `(B, N, N)`.
pub fn pixel_ce(logits: &Array4<f64>, labels: &Array3<usize>, grad: bool) -> (f64, Option<Array4<f64>>) {
    let (bsz, k, n, _) = logits.dim();
    assert_eq!(labels.dim(), (bsz, n, n), "label shape");
    let total = (bsz * n * n) as f64;
    let mut loss = 0.0;
    let mut g = if grad { Some(Array4::zeros(logits.raw_dim())) } else { None };
    let mut probs = vec![0.0f64; k];
    for bi in 0..bsz {
        for r in 0..n {
            for c in 0..n {
                let m = (0..k).map(|i| logits[[bi, i, r, c]]).fold(f64::NEG_INFINITY, f64::max);
                let mut lse = 0.0;
                for i in 0..k {
                    probs[i] = (logits[[bi, i, r, c]] - m).exp();
                    lse += probs[i];
                }
                let y = labels[[bi, r, c]];
                assert!(y < k, "label {y} out of range for {k} classes");
                loss -= (probs[y] / lse).ln();
                if let Some(gr) = g.as_mut() {
                    for i in 0..k {
                        let p = probs[i] / lse;
                        gr[[bi, i, r, c]] = (p - if i == y { 1.0 } else { 0.0 }) / total;
                    }
                }
            }
        }
    }
    (loss / total, g)
}

/// Per-pixel argmax over class logits, `(B, N, N)` label maps.
pub fn argmax_classes(logits: &Array4<f64>) -> Array3<usize> {
    let (bsz, k, n, _) = logits.dim();
    let mut out = Array3::zeros((bsz, n, n));
    for bi in 0..bsz {
        for r in 0..n {
            for c in 0..n {
                let mut best = 0;
                for i in 1..k {
                    if logits[[bi, i, r, c]] > logits[[bi, best, r, c]] {
                        best = i;
                    }
                }
                out[[bi, r, c]] = best;
            }
        }
    }
    out
}

/// Utility for tests: dense one-hot targets from per-sample grids.
pub fn stack_targets(per_sample: &[Array3<f64>]) -> Array4<f64> {
    let bsz = per_sample.len();
    let (t_f, n, _) = per_sample[0].dim();
    let mut out = Array4::zeros((bsz, t_f, n, n));
    for (bi, s3) in per_sample.iter().enumerate() {
        out.slice_mut(s![bi, .., .., ..]).assign(s3);
    }
    out
}
