//! Whole-set statistics used to check the sampling rules after the fact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bbox::iou;
use super::records::Split;
use super::sampling::{NegativeMethod, POSITIVE_IOU};
use super::Dataset;
use crate::error::{Result, ShefuError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub splits: BTreeMap<String, SplitAudit>,
    /// smallest IoU of a candidate labelled positive
    pub min_positive_iou: f64,
    /// largest IoU of a candidate a region swap put in place
    pub max_swapped_iou: f64,
    pub negatives_by_method: BTreeMap<String, usize>,
    /// region-swap negatives where neither candidate was replaced
    pub swaps_without_swapped_side: usize,
}

impl Audit {
    pub fn max_imbalance(&self) -> usize {
        self.splits.values().map(|s| s.positives.abs_diff(s.negatives)).max().unwrap_or(0)
    }

    /// Share of the rarest negative method.
    pub fn min_method_share(&self) -> f64 {
        let total: usize = self.negatives_by_method.values().sum();
        if total == 0 {
            return 0.0;
        }
        NegativeMethod::ALL
            .iter()
            .map(|m| self.negatives_by_method.get(method_name(*m)).copied().unwrap_or(0))
            .min()
            .unwrap_or(0) as f64
            / total as f64
    }
}

fn method_name(m: NegativeMethod) -> &'static str {
    match m {
        NegativeMethod::RegionSwap => "region_swap",
        NegativeMethod::InstructionSwap => "instruction_swap",
        NegativeMethod::Both => "both",
    }
}

/// Measures candidate IoUs against the scene ground truth. Needs the
/// scene records, so it only applies to generated data.
///
/// Every candidate starts as a detection with IoU ≥ 0.7; a region swap
/// replaces it, so in a swap negative the candidates below 0.7 are exactly
/// the swapped ones.
pub fn audit(data: &Dataset) -> Result<Audit> {
    let scenes: BTreeMap<u64, _> = data.scenes.iter().map(|s| (s.id, s)).collect();
    let mut out = Audit {
        splits: BTreeMap::new(),
        min_positive_iou: 1.0,
        max_swapped_iou: 0.0,
        negatives_by_method: BTreeMap::new(),
        swaps_without_swapped_side: 0,
    };
    for split in Split::ALL {
        let mut s = SplitAudit::default();
        for rec in data.split(split) {
            if rec.joint_label() {
                s.positives += 1;
            } else {
                s.negatives += 1;
            }
            let scene = scenes
                .get(&rec.scene_id)
                .ok_or_else(|| ShefuError::Schema(format!("sample {} has no scene record", rec.id)))?;
            let t = iou(&rec.target_bbox, &scene.target_image.gt_bbox())?;
            let d = iou(&rec.dest_bbox, &scene.dest_image.gt_bbox())?;
            let swaps = matches!(rec.negative, Some(NegativeMethod::RegionSwap | NegativeMethod::Both));
            let mut any_swapped = false;
            for (y, v) in [(rec.y_targ, t), (rec.y_dest, d)] {
                if y {
                    out.min_positive_iou = out.min_positive_iou.min(v);
                }
                if swaps && v < POSITIVE_IOU {
                    any_swapped = true;
                    out.max_swapped_iou = out.max_swapped_iou.max(v);
                }
            }
            if swaps && !any_swapped {
                out.swaps_without_swapped_side += 1;
            }
            if let Some(m) = rec.negative {
                *out.negatives_by_method.entry(method_name(m).into()).or_default() += 1;
            }
        }
        out.splits.insert(split.name().into(), s);
    }
    Ok(out)
}
