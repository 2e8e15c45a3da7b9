//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json     feature width, context slots, generator config, config hash
//! <dir>/vocab.txt         one token per line, line number = id
//! <dir>/features.bin      "SHFUFEAT" blob of region features
//! <dir>/regions.jsonl     region id -> image id, box, confidence
//! <dir>/scenes.jsonl      optional scene metadata (used by `score`)
//! <dir>/{train,val,test}.jsonl   sample index
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::records::{RegionRecord, SceneRecord, Split};
use super::vocab::Vocab;
use super::{Dataset, Manifest};
use crate::error::{io_err, Result, ShefuError};

pub const FEATURE_MAGIC: &[u8; 8] = b"SHFUFEAT";
pub const FEATURE_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FEATURES_FILE: &str = "features.bin";
pub const REGIONS_FILE: &str = "regions.jsonl";
pub const SCENES_FILE: &str = "scenes.jsonl";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

/// Serializes features as: magic, u32 version, u32 D_f, u32 count, then
/// `count` records of (u64 region id, D_f × f32), all little-endian.
pub fn encode_feature_blob(d_f: usize, features: &BTreeMap<u64, Vec<f32>>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + features.len() * (8 + 4 * d_f));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(d_f, "D_f")?.to_le_bytes());
    out.extend_from_slice(&to_u32(features.len(), "feature count")?.to_le_bytes());
    for (&id, v) in features {
        if v.len() != d_f {
            return Err(ShefuError::Schema(format!(
                "region {id} has {} features, expected {d_f}",
                v.len()
            )));
        }
        out.extend_from_slice(&id.to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| ShefuError::Schema(format!("{what} {n} exceeds u32")))
}

pub fn decode_feature_blob(bytes: &[u8]) -> Result<(usize, BTreeMap<u64, Vec<f32>>)> {
    let header = |what: &str| ShefuError::Schema(format!("feature blob truncated in header ({what})"));
    if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
        return Err(ShefuError::Schema("feature blob has wrong magic".into()));
    }
    let word = |at: usize, what: &str| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| header(what))
    };
    let version = word(8, "version")?;
    if version != FEATURE_VERSION {
        return Err(ShefuError::Schema(format!("unsupported feature blob version {version}")));
    }
    let d_f = word(12, "D_f")? as usize;
    let count = word(16, "count")? as usize;
    if d_f == 0 {
        return Err(ShefuError::Schema("feature blob declares D_f = 0".into()));
    }
    let rec_len = 8 + 4 * d_f;
    let mut features = BTreeMap::new();
    let mut at = 20;
    for i in 0..count {
        let Some(rec) = bytes.get(at..at + rec_len) else {
            let id = bytes
                .get(at..at + 8)
                .map(|b| format!(" (region id {})", u64::from_le_bytes(b.try_into().unwrap())))
                .unwrap_or_default();
            return Err(ShefuError::Schema(format!(
                "feature record {i}{id} truncated: need {rec_len} bytes, {} left",
                bytes.len().saturating_sub(at)
            )));
        };
        let id = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let v: Vec<f32> = rec[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ShefuError::Schema(format!("feature record {i} (region id {id}) is not finite")));
        }
        if features.insert(id, v).is_some() {
            return Err(ShefuError::Schema(format!("duplicate region id {id} in feature blob")));
        }
        at += rec_len;
    }
    if at != bytes.len() {
        return Err(ShefuError::Schema(format!(
            "feature blob has {} trailing bytes after {count} records of D_f = {d_f}",
            bytes.len() - at
        )));
    }
    Ok((d_f, features))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(io_err(format!("writing {}", path.display())))?;
    }
    w.flush().map_err(io_err(format!("writing {}", path.display())))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| ShefuError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn save(dir: &Path, data: &Dataset) -> Result<()> {
    data.validate()?;
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let p = |f: &str| -> PathBuf { dir.join(f) };
    let manifest = serde_json::to_string_pretty(&data.manifest)? + "\n";
    fs::write(p(MANIFEST_FILE), manifest).map_err(io_err("writing manifest"))?;
    data.vocab.save(&p(VOCAB_FILE))?;
    let blob = encode_feature_blob(data.manifest.d_f, &data.features)?;
    fs::write(p(FEATURES_FILE), blob).map_err(io_err("writing feature blob"))?;
    write_jsonl(&p(REGIONS_FILE), data.regions.values())?;
    write_jsonl(&p(SCENES_FILE), &data.scenes)?;
    for split in Split::ALL {
        write_jsonl(&p(&split_file(split)), data.split(split))?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let p = |f: &str| -> PathBuf { dir.join(f) };
    let bytes = fs::read(p(FEATURES_FILE)).map_err(io_err(format!("reading {}", p(FEATURES_FILE).display())))?;
    let (d_f, features) = decode_feature_blob(&bytes)?;
    let vocab = Vocab::load(&p(VOCAB_FILE))?;
    let regions: BTreeMap<u64, RegionRecord> = read_jsonl::<RegionRecord>(&p(REGIONS_FILE))?
        .into_iter()
        .map(|r| (r.id, r))
        .collect();
    let scenes: Vec<SceneRecord> = if p(SCENES_FILE).exists() {
        read_jsonl(&p(SCENES_FILE))?
    } else {
        Vec::new()
    };
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let path = p(&split_file(split));
        let records = if path.exists() { read_jsonl(&path)? } else { Vec::new() };
        splits.insert(split, records);
    }
    let manifest = if p(MANIFEST_FILE).exists() {
        let text = fs::read_to_string(p(MANIFEST_FILE)).map_err(io_err("reading manifest"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| ShefuError::Parse {
            path: p(MANIFEST_FILE),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if m.d_f != d_f {
            return Err(ShefuError::Schema(format!(
                "manifest declares D_f = {} but feature blob header has D_f = {d_f}",
                m.d_f
            )));
        }
        m
    } else {
        Manifest::inferred(d_f, &regions, &splits)
    };
    let data = Dataset {
        manifest,
        vocab,
        features,
        regions,
        scenes,
        splits,
    };
    data.validate()?;
    Ok(data)
}
