#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shefu_core::dataset::vocab::PAD_ID;
use shefu_core::embedder::{TokenSequence, POS_DIMS};
use shefu_core::funnel::FunnelConfig;
use shefu_core::model::{ModelConfig, Prepared, Variant};

pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_f: 5,
        context_slots: 3,
        max_tokens: 6,
        vocab_size: 10,
        funnel: FunnelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            ffn_width: 16,
            dropout: 0.0,
        },
        variant,
    }
}

fn region(rng: &mut ChaCha8Rng, d_f: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..d_f).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x1: f32 = rng.gen_range(0.0..0.5);
    let y1: f32 = rng.gen_range(0.0..0.5);
    let (w, h) = (rng.gen_range(0.1..0.5f32), rng.gen_range(0.1..0.5f32));
    v.extend_from_slice(&[x1, y1, x1 + w, y1 + h, w, h, w * h]);
    debug_assert_eq!(v.len(), d_f + POS_DIMS);
    v
}

/// Random inputs with some padded context slots and tokens.
pub fn random_prepared(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Prepared {
    let n_ctx = rng.gen_range(0..=cfg.context_slots);
    let n_tok = rng.gen_range(0..=cfg.max_tokens);
    let mut ids: Vec<usize> = (0..n_tok)
        .map(|_| {
            let id = rng.gen_range(0..cfg.vocab_size - 1);
            if id >= PAD_ID { id + 1 } else { id }
        })
        .collect();
    let mut mask = vec![true; n_tok];
    ids.resize(cfg.max_tokens, PAD_ID);
    mask.resize(cfg.max_tokens, false);
    Prepared {
        targ: region(rng, cfg.d_f),
        dest: region(rng, cfg.d_f),
        context: (0..n_ctx).map(|_| region(rng, cfg.d_f)).collect(),
        tokens: TokenSequence {
            ids,
            positions: (0..cfg.max_tokens).collect(),
            mask,
        },
        y_targ: rng.gen_bool(0.5),
        y_dest: rng.gen_bool(0.5),
    }
}
