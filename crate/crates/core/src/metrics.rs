//! cIoU, gIoU, Pr@X, N-acc and T-acc with a mergeable accumulator.
//!
//! Conventions: an empty prediction on an empty ground truth has IoU 1;
//! Pr@X counts target-present samples with IoU >= X; N-acc and T-acc are
//! `None` when the split holds no sample of that kind, and cIoU is 1 when
//! every prediction and ground truth is empty.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::BinaryMask;

pub const PR_THRESHOLDS: [f64; 3] = [0.7, 0.8, 0.9];

/// Positive-pixel threshold for an `h x w` mask: 50 at 480x480, scaled by
/// area, at least 1.
pub fn min_pixel_threshold(h: usize, w: usize) -> usize {
    let scaled = 50.0 * (h * w) as f64 / (480.0 * 480.0);
    (libm_round(scaled) as usize).max(1)
}

fn libm_round(x: f64) -> f64 {
    num_traits::Float::round(x)
}

/// Clears masks with fewer than `threshold` positive pixels.
pub fn apply_min_pixel_rule(mask: &BinaryMask, threshold: usize) -> BinaryMask {
    if mask.count() < threshold {
        BinaryMask::empty(mask.height, mask.width)
    } else {
        mask.clone()
    }
}

/// `(|pred & gt|, |pred | gt|)`.
pub fn intersection_union(pred: &BinaryMask, gt: &BinaryMask) -> Result<(u64, u64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(invalid_arg!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    let (mut i, mut u) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        i += (p && g) as u64;
        u += (p || g) as u64;
    }
    Ok((i, u))
}

/// Per-sample IoU; both empty counts as 1.
pub fn sample_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub intersection: u64,
    pub union: u64,
    pub iou_sum: f64,
    pub samples: u64,
    /// Target-present samples with IoU >= each of [`PR_THRESHOLDS`].
    pub pr_hits: [u64; 3],
    pub target_samples: u64,
    /// Target-present samples predicted non-empty.
    pub target_hits: u64,
    pub no_target_samples: u64,
    /// No-target samples predicted empty.
    pub no_target_hits: u64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sample. The no-target flag is taken from `gt` being empty.
    pub fn add(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
        let (i, u) = intersection_union(pred, gt)?;
        let iou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        self.intersection += i;
        self.union += u;
        self.iou_sum += iou;
        self.samples += 1;
        if gt.is_empty() {
            self.no_target_samples += 1;
            self.no_target_hits += pred.is_empty() as u64;
        } else {
            self.target_samples += 1;
            self.target_hits += (!pred.is_empty()) as u64;
            for (hits, &t) in self.pr_hits.iter_mut().zip(&PR_THRESHOLDS) {
                *hits += (iou >= t) as u64;
            }
        }
        Ok(iou)
    }

    pub fn merge(&mut self, other: &Self) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.iou_sum += other.iou_sum;
        self.samples += other.samples;
        for (a, b) in self.pr_hits.iter_mut().zip(&other.pr_hits) {
            *a += b;
        }
        self.target_samples += other.target_samples;
        self.target_hits += other.target_hits;
        self.no_target_samples += other.no_target_samples;
        self.no_target_hits += other.no_target_hits;
    }

    pub fn finalize(&self) -> Result<MetricsReport> {
        if self.samples == 0 {
            return Err(Error::InvalidState("no samples accumulated".into()));
        }
        let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
        Ok(MetricsReport {
            ciou: ratio(self.intersection, self.union).unwrap_or(1.0),
            giou: self.iou_sum / self.samples as f64,
            pr07: ratio(self.pr_hits[0], self.target_samples),
            pr08: ratio(self.pr_hits[1], self.target_samples),
            pr09: ratio(self.pr_hits[2], self.target_samples),
            n_acc: ratio(self.no_target_hits, self.no_target_samples),
            t_acc: ratio(self.target_hits, self.target_samples),
            n_samples: self.samples,
            n_no_target: self.no_target_samples,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ciou: f64,
    pub giou: f64,
    pub pr07: Option<f64>,
    pub pr08: Option<f64>,
    pub pr09: Option<f64>,
    pub n_acc: Option<f64>,
    pub t_acc: Option<f64>,
    pub n_samples: u64,
    pub n_no_target: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn mask_with(h: usize, w: usize, on: &[usize]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &p in on {
            m.data[p] = true;
        }
        m
    }

    #[test]
    fn min_pixel_rule_at_480() {
        let t = min_pixel_threshold(480, 480);
        assert_eq!(t, 50);
        let m49 = mask_with(480, 480, &(0..49).collect::<Vec<_>>());
        assert!(apply_min_pixel_rule(&m49, t).is_empty());
        let m50 = mask_with(480, 480, &(0..50).collect::<Vec<_>>());
        assert_eq!(apply_min_pixel_rule(&m50, t), m50);
        let e = BinaryMask::empty(480, 480);
        assert_eq!(apply_min_pixel_rule(&e, t), e);
        assert_eq!(min_pixel_threshold(64, 64), 1);
        assert_eq!(min_pixel_threshold(96, 96), 2);
    }

    #[test]
    fn iou_examples() {
        let a = mask_with(2, 2, &[0, 1]);
        assert_eq!(sample_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(sample_iou(&a, &mask_with(2, 2, &[2, 3])).unwrap(), 0.0);
        assert_eq!(sample_iou(&a, &mask_with(2, 2, &[1, 2])).unwrap(), 1.0 / 3.0);
        let e = BinaryMask::empty(2, 2);
        assert_eq!(sample_iou(&e, &e).unwrap(), 1.0);
        assert_eq!(sample_iou(&e, &a).unwrap(), 0.0);
        assert_eq!(sample_iou(&a, &e).unwrap(), 0.0);
        assert!(sample_iou(&a, &BinaryMask::empty(3, 2)).is_err());
    }

    #[test]
    fn finalize_examples() {
        assert!(MetricsAccumulator::new().finalize().is_err());
        let mut acc = MetricsAccumulator::new();
        // (i, u) = (1, 3) and (3, 3).
        acc.add(&mask_with(2, 2, &[0, 1]), &mask_with(2, 2, &[1, 2])).unwrap();
        acc.add(&mask_with(2, 2, &[0, 1, 2]), &mask_with(2, 2, &[0, 1, 2])).unwrap();
        let r = acc.finalize().unwrap();
        assert_eq!(r.ciou, 4.0 / 6.0);
        assert_eq!(r.giou, (1.0 / 3.0 + 1.0) / 2.0);

        let mut one = MetricsAccumulator::new();
        one.add(&mask_with(2, 2, &[0, 1, 2]), &mask_with(2, 2, &[0, 1, 2, 3])).unwrap();
        let r = one.finalize().unwrap();
        assert_eq!((r.pr07, r.pr08, r.pr09), (Some(1.0), Some(0.0), Some(0.0)));
        assert_eq!(r.n_acc, None);
    }

    #[test]
    fn perfect_predictions() {
        let mut acc = MetricsAccumulator::new();
        for k in 0..6 {
            let gt = if k % 3 == 0 { BinaryMask::empty(3, 3) } else { mask_with(3, 3, &[k, k + 1]) };
            acc.add(&gt, &gt).unwrap();
        }
        let r = acc.finalize().unwrap();
        assert_eq!((r.ciou, r.giou), (1.0, 1.0));
        assert_eq!([r.pr07, r.pr08, r.pr09, r.n_acc, r.t_acc], [Some(1.0); 5]);
        assert_eq!((r.n_samples, r.n_no_target), (6, 2));
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (proptest::collection::vec(any::<bool>(), 16), proptest::collection::vec(any::<bool>(), 16), any::<bool>()).prop_map(|(a, b, empty_gt)| {
            let gt = if empty_gt { BinaryMask::empty(4, 4) } else { BinaryMask::from_vec(4, 4, b).unwrap() };
            (BinaryMask::from_vec(4, 4, a).unwrap(), gt)
        })
    }

    proptest! {
        #[test]
        fn merge_matches_concatenation(xs in proptest::collection::vec(arb_pair(), 1..20), split in 0usize..20) {
            let split = split.min(xs.len());
            let mut all = MetricsAccumulator::new();
            let (mut a, mut b) = (MetricsAccumulator::new(), MetricsAccumulator::new());
            for (i, (p, g)) in xs.iter().enumerate() {
                all.add(p, g).unwrap();
                if i < split { a.add(p, g).unwrap(); } else { b.add(p, g).unwrap(); }
            }
            let mut ab = a;
            ab.merge(&b);
            let mut ba = b;
            ba.merge(&a);
            for m in [ab, ba] {
                let (x, y) = (m.finalize().unwrap(), all.finalize().unwrap());
                prop_assert!((x.giou - y.giou).abs() < 1e-9);
                prop_assert_eq!(x.ciou, y.ciou);
                prop_assert_eq!(x.pr07, y.pr07);
                prop_assert_eq!(x.n_acc, y.n_acc);
            }
        }

        #[test]
        fn bounds_and_threshold_order(xs in proptest::collection::vec(arb_pair(), 1..30)) {
            let mut acc = MetricsAccumulator::new();
            for (p, g) in &xs {
                acc.add(p, g).unwrap();
            }
            let r = acc.finalize().unwrap();
            prop_assert!((0.0..=1.0).contains(&r.ciou) && (0.0..=1.0).contains(&r.giou));
            if let (Some(a), Some(b), Some(c)) = (r.pr07, r.pr08, r.pr09) {
                prop_assert!(c <= b && b <= a);
            }
        }

        #[test]
        fn min_pixel_rule_idempotent(bits in proptest::collection::vec(any::<bool>(), 36), t in 0usize..40) {
            let m = BinaryMask::from_vec(6, 6, bits).unwrap();
            let once = apply_min_pixel_rule(&m, t);
            prop_assert_eq!(apply_min_pixel_rule(&once, t), once);
        }
    }
}
