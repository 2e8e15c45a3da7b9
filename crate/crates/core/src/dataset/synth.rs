//! Desk-scale synthetic fetch-and-carry scenes.
//!
//! Each scene has a target image (everyday objects) and a destination image
//! (furniture, plus the target object placed on the destination with its
//! attributes masked). Region features carry one-hot attribute codes in
//! fixed disjoint subspaces plus Gaussian noise; instructions come from a
//! small compositional grammar.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bbox::{iou, BBox};
use super::records::{ImageRecord, ObjectRecord, RegionRecord, SampleRecord, SceneRecord, Split};
use super::sampling::{
    balance, make_negative, make_positive, subsample_classes, NegativeMethod, SwapPool, NEGATIVE_IOU,
    POSITIVE_IOU,
};
use super::vocab::{Vocab, MAX_VOCAB};
use super::{Dataset, Manifest};
use crate::error::{Result, ShefuError};

pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "white", "black", "orange", "purple"];
pub const OBJECTS: [&str; 12] = [
    "cup", "bottle", "apple", "book", "pen", "bowl", "mug", "spoon", "vase", "towel", "box", "plate",
];
pub const FURNITURE: [&str; 8] = ["table", "chair", "shelf", "sofa", "desk", "counter", "cabinet", "bed"];
pub const SPATIAL: [&str; 3] = ["left", "middle", "right"];
const TEMPLATES: [&str; 4] = [
    "move the {t} to the {d}",
    "put the {t} on the {d}",
    "bring the {t} to the {d}",
    "place the {t} onto the {d}",
];
const GRAMMAR_WORDS: [&str; 9] = ["move", "put", "bring", "place", "the", "to", "on", "onto", "in"];

const COLOR_OFFSET: usize = 0;
const OBJECT_OFFSET: usize = COLOR_OFFSET + COLORS.len();
const FURNITURE_OFFSET: usize = OBJECT_OFFSET + OBJECTS.len();
const SPATIAL_OFFSET: usize = FURNITURE_OFFSET + FURNITURE.len();
const FLAG_OFFSET: usize = SPATIAL_OFFSET + SPATIAL.len();
/// Leading feature dimensions reserved for attribute codes.
pub const ATTRIBUTE_DIMS: usize = FLAG_OFFSET + 1;

const GRID_COLS: usize = 4;
const GRID_ROWS: usize = 3;
const POSITIVES_PER_GT: usize = 2;
const NEGATIVES_PER_SCENE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_scenes: usize,
    /// train / val / test sample counts
    pub split_sizes: [usize; 3],
    /// K: context regions kept per image
    pub context_slots: usize,
    /// D_f: visual feature width
    pub d_f: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    pub image_width: f32,
    pub image_height: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 1099,
            split_sizes: [4420, 642, 686],
            context_slots: 16,
            d_f: 64,
            noise_sigma: 0.3,
            seed: 0,
            image_width: 640.0,
            image_height: 480.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ShefuError::Config(m));
        if self.d_f < ATTRIBUTE_DIMS {
            return bad(format!("d_f must be at least {ATTRIBUTE_DIMS}, got {}", self.d_f));
        }
        if self.context_slots == 0 {
            return bad("context_slots must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be a finite non-negative number, got {}", self.noise_sigma));
        }
        if self.split_sizes.iter().any(|&n| n < 2) {
            return bad(format!("every split needs at least 2 samples, got {:?}", self.split_sizes));
        }
        if self.n_scenes < 3 {
            return bad("n_scenes must be at least 3".into());
        }
        if self.image_width < (GRID_COLS * 80) as f32 || self.image_height < (GRID_ROWS * 80) as f32 {
            return bad("image is too small for the scene layout".into());
        }
        Ok(())
    }
}

/// The vocabulary the grammar draws from.
pub fn grammar_vocab() -> Vocab {
    Vocab::from_words(
        GRAMMAR_WORDS
            .iter()
            .chain(&SPATIAL)
            .chain(&COLORS)
            .chain(&OBJECTS)
            .chain(&FURNITURE)
            .copied(),
    )
}

fn check_vocab(vocab: &Vocab) -> Result<()> {
    if vocab.len() > MAX_VOCAB {
        return Err(ShefuError::Config(format!(
            "vocabulary has {} entries, limit is {MAX_VOCAB}",
            vocab.len()
        )));
    }
    let need = GRAMMAR_WORDS.iter().chain(&SPATIAL).chain(&COLORS).chain(&OBJECTS).chain(&FURNITURE);
    for w in need {
        if !vocab.contains(w) {
            return Err(ShefuError::Config(format!("vocabulary is missing grammar word {w:?}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AttrKind {
    Color,
    Spatial,
}

/// What an instruction phrase picks out: a category plus one attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Referent {
    category: String,
    kind: AttrKind,
    value: String,
}

impl Referent {
    fn of(o: &ObjectRecord, kind: AttrKind) -> Self {
        let value = match kind {
            AttrKind::Color => o.color.clone(),
            AttrKind::Spatial => o.spatial.clone(),
        };
        Self {
            category: o.category.clone(),
            kind,
            value,
        }
    }

    fn matches(&self, o: &ObjectRecord) -> bool {
        !o.masked && *self == Self::of(o, self.kind)
    }

    fn phrase(&self) -> String {
        match (self.kind, self.value.as_str()) {
            (AttrKind::Color, c) => format!("{c} {}", self.category),
            (AttrKind::Spatial, "middle") => format!("{} in the middle", self.category),
            (AttrKind::Spatial, side) => format!("{} on the {side}", self.category),
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream))
}

fn spatial_tag(b: &BBox) -> &'static str {
    let third = b.width / 3.0;
    if b.center_x() < third {
        "left"
    } else if b.center_x() > 2.0 * third {
        "right"
    } else {
        "middle"
    }
}

fn cell_boxes(rng: &mut ChaCha8Rng, n: usize, cfg: &SynthConfig) -> Vec<BBox> {
    let (cw, ch) = (cfg.image_width / GRID_COLS as f32, cfg.image_height / GRID_ROWS as f32);
    let mut cells: Vec<usize> = (0..GRID_COLS * GRID_ROWS).collect();
    cells.shuffle(rng);
    cells[..n]
        .iter()
        .map(|&c| {
            let (col, row) = ((c % GRID_COLS) as f32, (c / GRID_COLS) as f32);
            let w = rng.gen_range(0.45..0.9) * cw;
            let h = rng.gen_range(0.45..0.9) * ch;
            let x1 = col * cw + rng.gen_range(0.0..(cw - w));
            let y1 = row * ch + rng.gen_range(0.0..(ch - h));
            BBox {
                x1: x1.round(),
                y1: y1.round(),
                x2: (x1 + w).round(),
                y2: (y1 + h).round(),
                width: cfg.image_width,
                height: cfg.image_height,
            }
        })
        .collect()
}

/// Lays out `n` items, the first being the referent, so that the referent
/// is the only item matching its description and at least one distractor
/// shares a partial attribute with it.
fn layout_image(
    rng: &mut ChaCha8Rng,
    n: usize,
    furniture: bool,
    cfg: &SynthConfig,
) -> (Vec<ObjectRecord>, AttrKind) {
    let categories: &[&str] = if furniture { &FURNITURE } else { &OBJECTS };
    let kind = if rng.gen_bool(0.5) { AttrKind::Color } else { AttrKind::Spatial };
    let boxes = cell_boxes(rng, n, cfg);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.gen_range(0..xs.len())].to_string();
    let mut objects: Vec<ObjectRecord> = boxes
        .iter()
        .map(|b| ObjectRecord {
            category: pick(rng, categories),
            color: pick(rng, &COLORS),
            spatial: spatial_tag(b).to_string(),
            furniture,
            masked: false,
            bbox: *b,
        })
        .collect();
    let gt = Referent::of(&objects[0], kind);
    for i in 1..n {
        let o = &mut objects[i];
        match (i, kind) {
            // same category, different attribute value
            (1, AttrKind::Color) => {
                o.category = gt.category.clone();
                while o.color == gt.value {
                    o.color = pick(rng, &COLORS);
                }
            }
            (1, AttrKind::Spatial) if o.spatial != gt.value => o.category = gt.category.clone(),
            // same attribute value, different category
            (2, AttrKind::Color) => {
                o.color = gt.value.clone();
                while o.category == gt.category {
                    o.category = pick(rng, categories);
                }
            }
            _ => {}
        }
        while gt.matches(&objects[i]) {
            objects[i].category = pick(rng, categories);
        }
    }
    (objects, kind)
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, scale: f32) -> Option<BBox> {
    let (w, h) = (b.w(), b.h());
    let mut d = || rng.gen_range(-scale..scale);
    let x1 = (b.x1 + d() * w).clamp(0.0, b.width - 1.0).round();
    let y1 = (b.y1 + d() * h).clamp(0.0, b.height - 1.0).round();
    let x2 = (b.x2 + d() * w).clamp(0.0, b.width).round();
    let y2 = (b.y2 + d() * h).clamp(0.0, b.height).round();
    BBox::new(x1, y1, x2, y2, b.width, b.height).ok()
}

/// Draws a detection of `b` whose IoU with it falls in `[lo, hi]`.
fn detect(rng: &mut ChaCha8Rng, b: &BBox, scale: f32, lo: f64, hi: f64) -> Option<BBox> {
    (0..200).find_map(|_| {
        let d = jitter(rng, b, scale)?;
        let v = iou(&d, b).ok()?;
        (lo <= v && v <= hi).then_some(d)
    })
}

fn attribute_code(o: &ObjectRecord, d_f: usize) -> Vec<f32> {
    let mut v = vec![0.0; d_f];
    if o.masked {
        return v;
    }
    let at = |xs: &[&str], s: &str| xs.iter().position(|x| *x == s).expect("known attribute");
    v[COLOR_OFFSET + at(&COLORS, &o.color)] = 1.0;
    if o.furniture {
        v[FURNITURE_OFFSET + at(&FURNITURE, &o.category)] = 1.0;
        v[FLAG_OFFSET] = 1.0;
    } else {
        v[OBJECT_OFFSET + at(&OBJECTS, &o.category)] = 1.0;
    }
    v[SPATIAL_OFFSET + at(&SPATIAL, &o.spatial)] = 1.0;
    v
}

struct GeneratedScene {
    record: SceneRecord,
    target_ref: Referent,
    dest_ref: Referent,
    regions: Vec<RegionRecord>,
    features: Vec<(u64, Vec<f32>)>,
}

fn build_detections(
    rng: &mut ChaCha8Rng,
    image_id: u64,
    objects: &[ObjectRecord],
    gt: usize,
    cfg: &SynthConfig,
    noise: &Normal<f32>,
) -> (Vec<RegionRecord>, Vec<usize>, Vec<(u64, Vec<f32>)>) {
    let mut dets: Vec<(BBox, usize)> = Vec::new();
    for (oi, o) in objects.iter().enumerate() {
        if oi == gt {
            for _ in 0..POSITIVES_PER_GT {
                let d = detect(rng, &o.bbox, 0.06, POSITIVE_IOU, 1.0).unwrap_or(o.bbox);
                dets.push((d, oi));
            }
            if rng.gen_bool(0.5) {
                if let Some(d) = detect(rng, &o.bbox, 0.45, NEGATIVE_IOU + 0.05, POSITIVE_IOU - 0.05) {
                    dets.push((d, oi));
                }
            }
        } else {
            let d = detect(rng, &o.bbox, 0.06, POSITIVE_IOU, 1.0).unwrap_or(o.bbox);
            dets.push((d, oi));
        }
    }
    let mut scored: Vec<(f32, BBox, usize)> = dets
        .into_iter()
        .map(|(b, oi)| (rng.gen_range(0.3..1.0), b, oi))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut regions = Vec::new();
    let mut owners = Vec::new();
    let mut features = Vec::new();
    for (j, (conf, bbox, oi)) in scored.into_iter().enumerate() {
        let id = (image_id << 8) | j as u64;
        let mut f = attribute_code(&objects[oi], cfg.d_f);
        if cfg.noise_sigma > 0.0 {
            for x in &mut f {
                *x += noise.sample(rng);
            }
        }
        regions.push(RegionRecord {
            id,
            image_id,
            bbox,
            confidence: conf,
        });
        owners.push(oi);
        features.push((id, f));
    }
    (regions, owners, features)
}

fn generate_scene(index: u64, split: Split, cfg: &SynthConfig, noise: &Normal<f32>) -> GeneratedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index));
    let n_obj = rng.gen_range(3..=6);
    let (objects, t_kind) = layout_image(&mut rng, n_obj, false, cfg);
    let n_furn = rng.gen_range(2..=5);
    let (mut furniture, d_kind) = layout_image(&mut rng, n_furn, true, cfg);

    // the delivered target sits on top of the destination, attributes masked
    let db = furniture[0].bbox;
    let (pw, ph) = ((db.w() * 0.4).max(2.0), (db.h() * 0.4).max(2.0));
    let px1 = (db.center_x() - pw / 2.0).round();
    let placed = BBox {
        x1: px1,
        y1: db.y1,
        x2: px1 + pw.round(),
        y2: db.y1 + ph.round(),
        ..db
    };
    furniture.push(ObjectRecord {
        masked: true,
        bbox: placed,
        spatial: spatial_tag(&placed).to_string(),
        ..objects[0].clone()
    });

    let target_ref = Referent::of(&objects[0], t_kind);
    let dest_ref = Referent::of(&furniture[0], d_kind);
    let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
    let instruction = template
        .replace("{t}", &target_ref.phrase())
        .replace("{d}", &dest_ref.phrase());

    let (t_img, d_img) = (2 * index, 2 * index + 1);
    let (mut regions, t_owner, mut features) = build_detections(&mut rng, t_img, &objects, 0, cfg, noise);
    let (d_regions, d_owner, d_features) = build_detections(&mut rng, d_img, &furniture, 0, cfg, noise);
    let record = SceneRecord {
        id: index,
        split,
        instruction,
        target_image: ImageRecord {
            image_id: t_img,
            objects,
            gt_object: 0,
            region_ids: regions.iter().map(|r| r.id).collect(),
            region_objects: t_owner,
        },
        dest_image: ImageRecord {
            image_id: d_img,
            objects: furniture,
            gt_object: 0,
            region_ids: d_regions.iter().map(|r| r.id).collect(),
            region_objects: d_owner,
        },
    };
    regions.extend(d_regions);
    features.extend(d_features);
    GeneratedScene {
        record,
        target_ref,
        dest_ref,
        regions,
        features,
    }
}

fn object_of(image: &ImageRecord, region_id: u64) -> &ObjectRecord {
    let pos = image
        .region_ids
        .iter()
        .position(|&r| r == region_id)
        .expect("region belongs to image");
    &image.objects[image.region_objects[pos]]
}

fn scene_samples(
    scene: &GeneratedScene,
    split_scenes: &[GeneratedScene],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampleRecord>> {
    let rec = &scene.record;
    let (t_regions, d_regions) = scene.regions.split_at(rec.target_image.region_ids.len());
    let t_gt = rec.target_image.gt_bbox();
    let d_gt = rec.dest_image.gt_bbox();
    let context: Vec<u64> = rec.target_image.region_ids.iter().take(k)
        .chain(rec.dest_image.region_ids.iter().take(k))
        .copied()
        .collect();
    let mut out = Vec::new();
    let mut next_id = rec.id * 32;
    for &ti in &make_positive(t_regions, &t_gt)? {
        for &di in &make_positive(d_regions, &d_gt)? {
            let (t, d) = (&t_regions[ti], &d_regions[di]);
            out.push(SampleRecord {
                id: next_id,
                instruction: rec.instruction.clone(),
                target_image_id: rec.target_image.image_id,
                dest_image_id: rec.dest_image.image_id,
                target_bbox: t.bbox,
                dest_bbox: d.bbox,
                y_targ: true,
                y_dest: true,
                context_region_ids: context.clone(),
                target_region_id: t.id,
                dest_region_id: d.id,
                scene_id: rec.id,
                negative: None,
            });
            next_id += 1;
        }
    }
    let positives = out.len();
    if positives == 0 {
        return Ok(out);
    }
    let pool = SwapPool {
        target_gt: t_gt,
        dest_gt: d_gt,
        target_regions: t_regions,
        dest_regions: d_regions,
    };
    // donors must not describe whichever candidates the negative ends up with
    let donors = |s: &SampleRecord| -> Vec<String> {
        let t_obj = object_of(&rec.target_image, s.target_region_id);
        let d_obj = object_of(&rec.dest_image, s.dest_region_id);
        split_scenes
            .iter()
            .filter(|o| o.record.id != rec.id)
            .filter(|o| !o.target_ref.matches(t_obj) && !o.dest_ref.matches(d_obj))
            .map(|o| o.record.instruction.clone())
            .collect()
    };
    for _ in 0..NEGATIVES_PER_SCENE {
        let base = out[rng.gen_range(0..positives)].clone();
        let method = NegativeMethod::random(rng);
        let mut neg = make_negative(&base, method, &pool, donors, rng)?;
        neg.id = next_id;
        next_id += 1;
        out.push(neg);
    }
    Ok(out)
}

/// Generates a balanced synthetic dataset. A pure function of
/// `(config, vocab)`.
pub fn generate_synthetic(cfg: &SynthConfig, vocab: Option<&Vocab>) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = vocab.cloned().unwrap_or_else(grammar_vocab);
    check_vocab(&vocab)?;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f32::MIN_POSITIVE))
        .map_err(|e| ShefuError::Config(format!("noise_sigma: {e}")))?;

    let total: usize = cfg.split_sizes.iter().sum();
    let mut scene_counts = [0usize; 3];
    for i in 0..2 {
        scene_counts[i] = ((cfg.n_scenes * cfg.split_sizes[i]) as f64 / total as f64).round().max(1.0) as usize;
    }
    scene_counts[2] = cfg.n_scenes.saturating_sub(scene_counts[0] + scene_counts[1]);
    if scene_counts[2] == 0 {
        return Err(ShefuError::Config("n_scenes too small to populate every split".into()));
    }

    let mut regions = BTreeMap::new();
    let mut features = BTreeMap::new();
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut splits = BTreeMap::new();
    let mut index = 0u64;
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let generated: Vec<GeneratedScene> = (0..scene_counts[si])
            .map(|i| generate_scene(index + i as u64, split, cfg, &noise))
            .collect();
        index += scene_counts[si] as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX - si as u64));
        let mut pool = Vec::new();
        for scene in &generated {
            pool.extend(scene_samples(scene, &generated, cfg.context_slots, &mut rng)?);
        }
        let balanced = balance(pool, SampleRecord::joint_label, &mut rng)?;
        let want = cfg.split_sizes[si];
        let (n_pos, n_neg) = (want.div_ceil(2), want / 2);
        if balanced.len() < 2 * n_pos {
            return Err(ShefuError::Config(format!(
                "{} scenes yield {} balanced {} samples, {} requested; raise n_scenes",
                scene_counts[si],
                balanced.len(),
                split.name(),
                want
            )));
        }
        let samples = subsample_classes(balanced, SampleRecord::joint_label, n_pos, n_neg, &mut rng)?;
        splits.insert(split, samples);
        for scene in generated {
            regions.extend(scene.regions.into_iter().map(|r| (r.id, r)));
            features.extend(scene.features);
            scenes.push(scene.record);
        }
    }
    let data = Dataset {
        manifest: Manifest {
            d_f: cfg.d_f,
            context_slots: cfg.context_slots,
            generator: Some(cfg.clone()),
            config_hash: None,
        },
        vocab,
        features,
        regions,
        scenes,
        splits,
    };
    data.validate()?;
    Ok(data)
}
