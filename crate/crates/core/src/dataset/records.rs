use serde::{Deserialize, Serialize};

use super::bbox::{BBox, RegionFeature};
use super::sampling::NegativeMethod;

/// One line of a split index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub instruction: String,
    pub target_image_id: u64,
    pub dest_image_id: u64,
    pub target_bbox: BBox,
    pub dest_bbox: BBox,
    pub y_targ: bool,
    pub y_dest: bool,
    pub context_region_ids: Vec<u64>,
    pub target_region_id: u64,
    pub dest_region_id: u64,
    #[serde(default)]
    pub scene_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<NegativeMethod>,
}

impl SampleRecord {
    /// Joint label `y_targ ∧ y_dest`.
    pub fn joint_label(&self) -> bool {
        self.y_targ && self.y_dest
    }
}

/// One detected region (regions.jsonl).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BBox,
    pub confidence: f32,
}

/// Attributes of a ground-truth object or furniture piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub category: String,
    pub color: String,
    pub spatial: String,
    pub furniture: bool,
    /// attribute subspaces zeroed in the features (target shown at the destination)
    #[serde(default)]
    pub masked: bool,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub objects: Vec<ObjectRecord>,
    /// index into `objects` of the referent
    pub gt_object: usize,
    /// detections in this image, highest confidence first
    pub region_ids: Vec<u64>,
    /// object index each detection was drawn from (parallel to `region_ids`)
    pub region_objects: Vec<usize>,
}

impl ImageRecord {
    pub fn gt_bbox(&self) -> BBox {
        self.objects[self.gt_object].bbox
    }
}

/// A fetch-and-carry scene: one instruction and its two images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub split: Split,
    pub instruction: String,
    pub target_image: ImageRecord,
    pub dest_image: ImageRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

/// A sample with its region features resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub instruction: String,
    pub target: RegionFeature,
    pub dest: RegionFeature,
    /// context regions from the target-candidate image, highest confidence first
    pub target_context: Vec<RegionFeature>,
    /// context regions from the destination-candidate image, highest confidence first
    pub dest_context: Vec<RegionFeature>,
    pub y_targ: bool,
    pub y_dest: bool,
}

impl Sample {
    pub fn joint_label(&self) -> bool {
        self.y_targ && self.y_dest
    }
}
