//! Positive/negative sample construction and class balancing.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bbox::{iou, BBox, RegionFeature};
use super::records::{RegionRecord, SampleRecord};
use crate::error::{Result, ShefuError};

/// Detections at or above this IoU with the ground truth are positives.
pub const POSITIVE_IOU: f64 = 0.7;
/// Detections at or below this IoU may replace a candidate in a negative.
pub const NEGATIVE_IOU: f64 = 0.3;

pub trait HasBox {
    fn bbox(&self) -> &BBox;
}

impl HasBox for RegionFeature {
    fn bbox(&self) -> &BBox {
        &self.bbox
    }
}

impl HasBox for RegionRecord {
    fn bbox(&self) -> &BBox {
        &self.bbox
    }
}

impl HasBox for BBox {
    fn bbox(&self) -> &BBox {
        self
    }
}

/// Indices of the detections whose IoU with `gt` is at least 0.7.
pub fn make_positive<R: HasBox>(detections: &[R], gt: &BBox) -> Result<Vec<usize>> {
    if detections.is_empty() {
        return Err(ShefuError::Contract("make_positive needs detections".into()));
    }
    let mut out = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        if iou(d.bbox(), gt)? >= POSITIVE_IOU {
            out.push(i);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMethod {
    RegionSwap,
    InstructionSwap,
    Both,
}

impl NegativeMethod {
    pub const ALL: [NegativeMethod; 3] = [
        NegativeMethod::RegionSwap,
        NegativeMethod::InstructionSwap,
        NegativeMethod::Both,
    ];

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self::ALL[rng.gen_range(0..3)]
    }

    fn swaps_region(self) -> bool {
        matches!(self, Self::RegionSwap | Self::Both)
    }

    fn swaps_instruction(self) -> bool {
        matches!(self, Self::InstructionSwap | Self::Both)
    }
}

/// Regions a region-swap negative may draw from.
#[derive(Debug, Clone, Copy)]
pub struct SwapPool<'a> {
    pub target_gt: BBox,
    pub dest_gt: BBox,
    pub target_regions: &'a [RegionRecord],
    pub dest_regions: &'a [RegionRecord],
}

fn low_iou<'a>(regions: &'a [RegionRecord], gt: &BBox) -> Result<Vec<&'a RegionRecord>> {
    let mut out = Vec::new();
    for r in regions {
        if iou(&r.bbox, gt)? <= NEGATIVE_IOU {
            out.push(r);
        }
    }
    Ok(out)
}

/// Builds a negative from `sample`.
///
/// Region swap replaces the target candidate, the destination candidate, or
/// both (chosen uniformly among the sides that have a region with
/// IoU ≤ 0.3) and clears the matching labels. Instruction swap takes an
/// instruction from `donors`, called with the possibly region-swapped
/// sample, and clears both labels.
pub fn make_negative<R, F>(
    sample: &SampleRecord,
    method: NegativeMethod,
    pool: &SwapPool<'_>,
    donors: F,
    rng: &mut R,
) -> Result<SampleRecord>
where
    R: Rng,
    F: FnOnce(&SampleRecord) -> Vec<String>,
{
    let mut out = sample.clone();
    if method.swaps_region() {
        let targ = low_iou(pool.target_regions, &pool.target_gt)?;
        let dest = low_iou(pool.dest_regions, &pool.dest_gt)?;
        let mut sides = Vec::with_capacity(3);
        if !targ.is_empty() {
            sides.push((true, false));
        }
        if !dest.is_empty() {
            sides.push((false, true));
        }
        if !targ.is_empty() && !dest.is_empty() {
            sides.push((true, true));
        }
        if sides.is_empty() {
            return Err(ShefuError::SamplingExhausted(format!(
                "sample {}: no region with IoU <= {NEGATIVE_IOU}",
                sample.id
            )));
        }
        let (swap_t, swap_d) = sides[rng.gen_range(0..sides.len())];
        if swap_t {
            let r = targ[rng.gen_range(0..targ.len())];
            out.target_region_id = r.id;
            out.target_bbox = r.bbox;
            out.y_targ = false;
        }
        if swap_d {
            let r = dest[rng.gen_range(0..dest.len())];
            out.dest_region_id = r.id;
            out.dest_bbox = r.bbox;
            out.y_dest = false;
        }
    }
    if method.swaps_instruction() {
        let original = sample.instruction.clone();
        let pool: Vec<String> = donors(&out)
            .into_iter()
            .filter(|d| *d != original)
            .collect();
        if pool.is_empty() {
            return Err(ShefuError::SamplingExhausted(format!(
                "sample {}: no donor instruction",
                sample.id
            )));
        }
        out.instruction = pool[rng.gen_range(0..pool.len())].clone();
        out.y_targ = false;
        out.y_dest = false;
    }
    out.negative = Some(method);
    Ok(out)
}

/// Keeps `n_pos` positives and `n_neg` negatives chosen uniformly with `rng`,
/// preserving the input order.
pub fn subsample_classes<T, R: Rng>(
    samples: Vec<T>,
    is_positive: impl Fn(&T) -> bool,
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    let pos: Vec<usize> = (0..samples.len()).filter(|&i| is_positive(&samples[i])).collect();
    let neg: Vec<usize> = (0..samples.len()).filter(|&i| !is_positive(&samples[i])).collect();
    if pos.len() < n_pos || neg.len() < n_neg {
        return Err(ShefuError::Contract(format!(
            "requested {n_pos}/{n_neg} positives/negatives, have {}/{}",
            pos.len(),
            neg.len()
        )));
    }
    let mut keep = vec![false; samples.len()];
    for (class, n) in [(&pos, n_pos), (&neg, n_neg)] {
        for j in index::sample(rng, class.len(), n) {
            keep[class[j]] = true;
        }
    }
    Ok(samples
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect())
}

/// Subsamples the majority class down to the minority count.
pub fn balance<T, R: Rng>(
    samples: Vec<T>,
    is_positive: impl Fn(&T) -> bool,
    rng: &mut R,
) -> Result<Vec<T>> {
    let n_pos = samples.iter().filter(|s| is_positive(s)).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ShefuError::Contract(format!(
            "cannot balance {n_pos} positives against {n_neg} negatives"
        )));
    }
    let n = n_pos.min(n_neg);
    subsample_classes(samples, is_positive, n, n, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BBox {
        BBox::new(x1, y1, x2, y2, 100.0, 100.0).unwrap()
    }

    fn region(id: u64, b: BBox) -> RegionRecord {
        RegionRecord {
            id,
            image_id: 0,
            bbox: b,
            confidence: 1.0,
        }
    }

    fn positive_sample() -> SampleRecord {
        SampleRecord {
            id: 7,
            instruction: "move the red cup to the blue table".into(),
            target_image_id: 1,
            dest_image_id: 2,
            target_bbox: bx(0.0, 0.0, 10.0, 10.0),
            dest_bbox: bx(50.0, 50.0, 90.0, 90.0),
            y_targ: true,
            y_dest: true,
            context_region_ids: vec![],
            target_region_id: 10,
            dest_region_id: 20,
            scene_id: 0,
            negative: None,
        }
    }

    #[test]
    fn positive_threshold_is_inclusive() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let dets = [
            gt,                        // IoU 1.0
            bx(0.0, 0.0, 10.0, 7.0),   // IoU 0.7 exactly
            bx(0.0, 0.0, 10.0, 6.9),   // IoU 0.69
            bx(20.0, 20.0, 30.0, 30.0), // disjoint
        ];
        assert_eq!(iou(&dets[1], &gt).unwrap(), 0.7);
        assert_eq!(make_positive(&dets, &gt).unwrap(), vec![0, 1]);
    }

    #[test]
    fn positive_needs_detections() {
        assert!(make_positive::<BBox>(&[], &bx(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn region_swap_flips_labels_and_respects_iou() {
        let s = positive_sample();
        let targ = [region(11, bx(60.0, 60.0, 70.0, 70.0)), region(12, bx(1.0, 1.0, 10.0, 10.0))];
        let dest = [region(21, bx(0.0, 0.0, 20.0, 20.0))];
        let pool = SwapPool {
            target_gt: s.target_bbox,
            dest_gt: s.dest_bbox,
            target_regions: &targ,
            dest_regions: &dest,
        };
        for seed in 0..32 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = make_negative(&s, NegativeMethod::RegionSwap, &pool, |_| vec![], &mut rng).unwrap();
            assert_eq!(n.instruction, s.instruction);
            assert!(!n.joint_label());
            if !n.y_targ {
                assert_eq!(n.target_region_id, 11);
                assert!(iou(&n.target_bbox, &s.target_bbox).unwrap() <= NEGATIVE_IOU);
            } else {
                assert_eq!(n.target_region_id, 10);
            }
            if !n.y_dest {
                assert_eq!(n.dest_region_id, 21);
            }
        }
    }

    #[test]
    fn instruction_swap_keeps_regions() {
        let s = positive_sample();
        let pool = SwapPool {
            target_gt: s.target_bbox,
            dest_gt: s.dest_bbox,
            target_regions: &[],
            dest_regions: &[],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let donors = |_: &SampleRecord| vec![s.instruction.clone(), "put the green pen on the bed".to_string()];
        let n = make_negative(&s, NegativeMethod::InstructionSwap, &pool, donors, &mut rng).unwrap();
        assert_eq!(n.instruction, "put the green pen on the bed");
        assert_eq!((n.target_region_id, n.dest_region_id), (10, 20));
        assert!(!n.y_targ && !n.y_dest);
        assert_eq!(n.negative, Some(NegativeMethod::InstructionSwap));
    }

    #[test]
    fn both_applies_each_rule() {
        let s = positive_sample();
        let targ = [region(11, bx(60.0, 60.0, 70.0, 70.0))];
        let pool = SwapPool {
            target_gt: s.target_bbox,
            dest_gt: s.dest_bbox,
            target_regions: &targ,
            dest_regions: &[],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = make_negative(&s, NegativeMethod::Both, &pool, |_| vec!["bring the pen to the bed".into()], &mut rng)
            .unwrap();
        assert_eq!(n.target_region_id, 11);
        assert!(iou(&n.target_bbox, &s.target_bbox).unwrap() <= NEGATIVE_IOU);
        assert_ne!(n.instruction, s.instruction);
    }

    #[test]
    fn exhausted_pools_are_errors() {
        let s = positive_sample();
        let near = [region(12, bx(1.0, 1.0, 10.0, 10.0))];
        let pool = SwapPool {
            target_gt: s.target_bbox,
            dest_gt: s.dest_bbox,
            target_regions: &near,
            dest_regions: &[],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_negative(&s, NegativeMethod::RegionSwap, &pool, |_| vec![], &mut rng),
            Err(ShefuError::SamplingExhausted(_))
        ));
        let only_self = |r: &SampleRecord| vec![r.instruction.clone()];
        assert!(matches!(
            make_negative(&s, NegativeMethod::InstructionSwap, &pool, only_self, &mut rng),
            Err(ShefuError::SamplingExhausted(_))
        ));
    }

    #[test]
    fn balance_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let even: Vec<bool> = [vec![true; 10], vec![false; 10]].concat();
        assert_eq!(balance(even.clone(), |&b| b, &mut rng).unwrap(), even);

        let skewed: Vec<(usize, bool)> = (0..40).map(|i| (i, i < 10)).collect();
        let out = balance(skewed.clone(), |s| s.1, &mut rng).unwrap();
        assert_eq!(out.iter().filter(|s| s.1).count(), 10);
        assert_eq!(out.iter().filter(|s| !s.1).count(), 10);
        assert!(out.windows(2).all(|w| w[0].0 < w[1].0), "order preserved");

        let again = |seed| balance(skewed.clone(), |s| s.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(again(5), again(5));

        assert!(balance(vec![true, true], |&b| b, &mut rng).is_err());
    }
}
