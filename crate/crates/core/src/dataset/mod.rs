//! Fetch-and-carry samples: boxes, vocabulary, the on-disk format, the
//! positive/negative sampling rules and a synthetic scene generator.

pub mod audit;
pub mod bbox;
pub mod io;
pub mod records;
pub mod sampling;
pub mod synth;
pub mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use audit::{audit, Audit};
pub use bbox::{iou, BBox, RegionFeature};
pub use records::{ImageRecord, ObjectRecord, RegionRecord, Sample, SampleRecord, SceneRecord, Split};
pub use sampling::{balance, make_negative, make_positive, subsample_classes, NegativeMethod, SwapPool};
pub use synth::{generate_synthetic, grammar_vocab, SynthConfig};
pub use vocab::Vocab;

use crate::error::{Result, ShefuError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub d_f: usize,
    /// K: context regions per image
    pub context_slots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthConfig>,
}

impl Manifest {
    /// Manifest for a directory that ships without one: K is the largest
    /// per-image context count seen in any sample.
    pub fn inferred(
        d_f: usize,
        regions: &BTreeMap<u64, RegionRecord>,
        splits: &BTreeMap<Split, Vec<SampleRecord>>,
    ) -> Self {
        let mut k = 1;
        for rec in splits.values().flatten() {
            for image in [rec.target_image_id, rec.dest_image_id] {
                let n = rec
                    .context_region_ids
                    .iter()
                    .filter(|id| regions.get(id).is_some_and(|r| r.image_id == image))
                    .count();
                k = k.max(n);
            }
        }
        Self {
            d_f,
            context_slots: k,
            config_hash: None,
            generator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocab,
    pub features: BTreeMap<u64, Vec<f32>>,
    pub regions: BTreeMap<u64, RegionRecord>,
    pub scenes: Vec<SceneRecord>,
    pub splits: BTreeMap<Split, Vec<SampleRecord>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Checks referential integrity: every referenced region has a record
    /// and a feature vector of width D_f, and every box is valid.
    pub fn validate(&self) -> Result<()> {
        let d_f = self.manifest.d_f;
        if d_f == 0 || self.manifest.context_slots == 0 {
            return Err(ShefuError::Schema("manifest needs positive d_f and context_slots".into()));
        }
        for (id, f) in &self.features {
            if f.len() != d_f {
                return Err(ShefuError::Schema(format!(
                    "region {id} has {} features, expected {d_f}",
                    f.len()
                )));
            }
        }
        for r in self.regions.values() {
            r.bbox.validate()?;
            if !self.features.contains_key(&r.id) {
                return Err(ShefuError::Schema(format!("region {} has no feature vector", r.id)));
            }
        }
        let region = |id: u64, what: &str, sample: u64| {
            self.regions.get(&id).ok_or_else(|| {
                ShefuError::Schema(format!("sample {sample}: {what} region {id} is unknown"))
            })
        };
        for (split, recs) in &self.splits {
            for rec in recs {
                rec.target_bbox.validate()?;
                rec.dest_bbox.validate()?;
                let t = region(rec.target_region_id, "target", rec.id)?;
                let d = region(rec.dest_region_id, "destination", rec.id)?;
                if t.image_id != rec.target_image_id || d.image_id != rec.dest_image_id {
                    return Err(ShefuError::Schema(format!(
                        "{} sample {}: candidate region lies in a different image",
                        split.name(),
                        rec.id
                    )));
                }
                for &c in &rec.context_region_ids {
                    let r = region(c, "context", rec.id)?;
                    if r.image_id != rec.target_image_id && r.image_id != rec.dest_image_id {
                        return Err(ShefuError::Schema(format!(
                            "sample {}: context region {c} is from image {}, not the sample's images",
                            rec.id, r.image_id
                        )));
                    }
                }
            }
        }
        for scene in &self.scenes {
            for image in [&scene.target_image, &scene.dest_image] {
                if image.region_ids.len() != image.region_objects.len() || image.gt_object >= image.objects.len() {
                    return Err(ShefuError::Schema(format!("scene {} has an inconsistent image record", scene.id)));
                }
                for &id in &image.region_ids {
                    region(id, "scene", scene.id)?;
                }
            }
        }
        Ok(())
    }

    pub fn region_feature(&self, id: u64) -> Result<RegionFeature> {
        let r = self
            .regions
            .get(&id)
            .ok_or_else(|| ShefuError::Schema(format!("unknown region {id}")))?;
        let visual = self
            .features
            .get(&id)
            .ok_or_else(|| ShefuError::Schema(format!("region {id} has no feature vector")))?;
        Ok(RegionFeature {
            visual: visual.clone(),
            bbox: r.bbox,
        })
    }

    /// Looks up the features of a sample's candidates and context.
    pub fn resolve(&self, rec: &SampleRecord) -> Result<Sample> {
        let mut target = self.region_feature(rec.target_region_id)?;
        target.bbox = rec.target_bbox;
        let mut dest = self.region_feature(rec.dest_region_id)?;
        dest.bbox = rec.dest_bbox;
        let mut target_context = Vec::new();
        let mut dest_context = Vec::new();
        for &id in &rec.context_region_ids {
            let f = self.region_feature(id)?;
            if self.regions[&id].image_id == rec.target_image_id {
                target_context.push(f);
            } else {
                dest_context.push(f);
            }
        }
        Ok(Sample {
            instruction: rec.instruction.clone(),
            target,
            dest,
            target_context,
            dest_context,
            y_targ: rec.y_targ,
            y_dest: rec.y_dest,
        })
    }

    pub fn resolve_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split).iter().map(|r| self.resolve(r)).collect()
    }
}
