//! Run configuration: one JSON object with flat dotted keys
//! (`"train.steps": 2000`). Defaults, then the file, then flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use shefu_core::dataset::{SynthConfig, Vocab};
use shefu_core::funnel::FunnelConfig;
use shefu_core::model::{ModelConfig, Variant};
use shefu_core::train::TrainConfig;
use shefu_core::{Result, ShefuError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_scenes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub context_slots: usize,
    pub d_f: usize,
    pub noise_sigma: f32,
    /// vocabulary file; the grammar's own word list when null
    pub vocab: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub max_tokens: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// 4·d_model when null
    pub ffn_width: Option<usize>,
    pub dropout: f64,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let funnel = FunnelConfig::default();
        let train = TrainConfig::new(ModelConfig {
            d_f: synth.d_f,
            context_slots: synth.context_slots,
            max_tokens: 16,
            vocab_size: 2,
            funnel: funnel.clone(),
            variant: Variant::Shefu,
        });
        Self {
            seed: 0,
            data: DataSection {
                n_scenes: synth.n_scenes,
                train_size: synth.split_sizes[0],
                val_size: synth.split_sizes[1],
                test_size: synth.split_sizes[2],
                context_slots: synth.context_slots,
                d_f: synth.d_f,
                noise_sigma: synth.noise_sigma,
                vocab: None,
            },
            model: ModelSection {
                max_tokens: 16,
                d_model: funnel.d_model,
                layers: funnel.layers,
                heads: funnel.heads,
                ffn_width: None,
                dropout: funnel.dropout,
                variant: Variant::Shefu.name().into(),
            },
            train: TrainSection {
                steps: train.steps,
                eval_every: train.eval_every,
                batch_size: train.batch_size,
                lr: train.lr,
                beta1: train.beta1,
                beta2: train.beta2,
                eps: train.eps,
            },
            bench: BenchSection { m: 100, n: 100, repeats: 5 },
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(p) = parts.next() {
            if parts.peek().is_none() {
                node.insert(p.to_string(), v.clone());
            } else {
                node = node
                    .entry(p)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys are leaves of the default tree");
            }
        }
    }
    Value::Object(root)
}

/// Layered settings before validation.
pub struct Overrides {
    flat: BTreeMap<String, Value>,
}

impl Overrides {
    pub fn defaults() -> Self {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(RunConfig::default()).expect("serializes"), &mut flat);
        Self { flat }
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match self.flat.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(ShefuError::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// `key=value`, where the value is JSON or else taken as a string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ShefuError::Config(format!("--set expects key=value, got {pair:?}")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        self.set(k.trim(), v)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ShefuError::Config(format!("reading config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| ShefuError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(m) = v else {
            return Err(ShefuError::Config(format!("config {} must be a JSON object", path.display())));
        };
        for (k, v) in m {
            if v.is_object() {
                return Err(ShefuError::Config(format!("config key {k:?}: use flat dotted keys, not nesting")));
            }
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn resolve(self) -> Result<RunConfig> {
        serde_json::from_value(unflatten(&self.flat)).map_err(|e| ShefuError::Config(e.to_string()))
    }
}

impl RunConfig {
    pub fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("serializes"), &mut out);
        out
    }

    /// sha256 over the flat form with sorted keys.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.flat()).expect("serializes"))
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.model.variant).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            ShefuError::Config(format!("unknown variant {:?}; expected one of {names:?}", self.model.variant))
        })
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            n_scenes: d.n_scenes,
            split_sizes: [d.train_size, d.val_size, d.test_size],
            context_slots: d.context_slots,
            d_f: d.d_f,
            noise_sigma: d.noise_sigma,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }

    /// Missing or unreadable vocabulary files are config errors.
    pub fn vocab(&self) -> Result<Option<Vocab>> {
        match &self.data.vocab {
            None => Ok(None),
            Some(p) => Vocab::load(Path::new(p))
                .map(Some)
                .map_err(|e| ShefuError::Config(format!("vocabulary {p}: {e}"))),
        }
    }

    /// Model and optimizer settings; dims the dataset fixes come from it.
    pub fn train_config(&self, d_f: usize, context_slots: usize, vocab_size: usize, seed: u64) -> Result<TrainConfig> {
        let m = &self.model;
        let model = ModelConfig {
            d_f,
            context_slots,
            max_tokens: m.max_tokens,
            vocab_size,
            funnel: FunnelConfig {
                layers: m.layers,
                d_model: m.d_model,
                heads: m.heads,
                ffn_width: m.ffn_width.unwrap_or(4 * m.d_model),
                dropout: m.dropout,
            },
            variant: self.variant()?,
        };
        let t = &self.train;
        let cfg = TrainConfig {
            steps: t.steps,
            eval_every: t.eval_every,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed,
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
