//! Transformer encoder that max-pools its input before every layer after
//! the first, halving sequence length and head count.

use serde::{Deserialize, Serialize};
use shefu_tensor::{Real, Var};

use crate::error::{Result, ShefuError};
use crate::model::params::{Graph, Linear, Norm, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelConfig {
    /// L
    pub layers: usize,
    pub d_model: usize,
    /// A^(1)
    pub heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
}

impl Default for FunnelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 768,
            heads: 12,
            ffn_width: 4 * 768,
            dropout: 0.1,
        }
    }
}

impl FunnelConfig {
    /// Checks the schedule for a first-layer length `s1` and that every
    /// layer's head count divides d_model.
    pub fn validate(&self, s1: usize) -> Result<Vec<(usize, usize)>> {
        if self.d_model == 0 || self.ffn_width == 0 {
            return Err(ShefuError::Config("d_model and ffn_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ShefuError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        let schedule = halving_schedule(self.layers, s1, self.heads)?;
        for (l, &(_, a)) in schedule.iter().enumerate() {
            if self.d_model % a != 0 {
                return Err(ShefuError::Config(format!(
                    "d_model {} is not divisible by the {a} heads of layer {}",
                    self.d_model,
                    l + 1
                )));
            }
        }
        Ok(schedule)
    }
}

/// `(S^(l), A^(l))` per layer: layer 1 keeps `(s1, a1)`, later layers take
/// `⌊S/2⌋` and `max(1, ⌊A/2⌋)`.
pub fn halving_schedule(layers: usize, s1: usize, a1: usize) -> Result<Vec<(usize, usize)>> {
    if layers == 0 || a1 == 0 {
        return Err(ShefuError::Config("need at least one layer and one head".into()));
    }
    let mut out = vec![(s1, a1)];
    for l in 1..layers {
        let (s, a) = out[l - 1];
        if s < 2 {
            return Err(ShefuError::Config(format!(
                "sequence of length {s1} cannot be halved {} times",
                layers - 1
            )));
        }
        out.push((s / 2, (a / 2).max(1)));
    }
    if s1 == 0 {
        return Err(ShefuError::Config("sequence length must be positive".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunnelParams {
    pub layers: Vec<LayerParams>,
}

impl FunnelParams {
    pub fn register(pb: &mut ParamBuilder<'_>, cfg: &FunnelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_width);
        let layers = (0..cfg.layers)
            .map(|l| {
                let n = |s: &str| format!("funnel.{l}.{s}");
                LayerParams {
                    q: Linear::register(pb, &n("q"), d, d),
                    k: Linear::register(pb, &n("k"), d, d),
                    v: Linear::register(pb, &n("v"), d, d),
                    out: Linear::register(pb, &n("out"), d, d),
                    norm1: Norm::register(pb, &n("ln1"), d),
                    ffn_in: Linear::register(pb, &n("ffn_in"), d, f),
                    ffn_out: Linear::register(pb, &n("ffn_out"), f, d),
                    norm2: Norm::register(pb, &n("ln2"), d),
                }
            })
            .collect();
        Self { layers }
    }
}

/// Realized shape of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerTrace {
    pub len: usize,
    pub heads: usize,
    /// the attention node, for inspecting its weights
    pub attention: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `[B·S^(L), d_model]`
    pub out: Var,
    pub mask: Vec<bool>,
    pub len: usize,
    pub trace: Vec<LayerTrace>,
}

/// One encoder layer over `[B·seq, d]` rows. With `pool`, the input is
/// max-pooled first (mask OR-pooled) and the pooled input feeds Q, K, V and
/// the residual.
#[allow(clippy::too_many_arguments)]
pub fn attention_layer<T: Real>(
    g: &mut Graph<'_, '_, T>,
    p: &LayerParams,
    x: Var,
    batch: usize,
    seq: usize,
    mask: &[bool],
    heads: usize,
    pool: bool,
) -> Result<(Var, Vec<bool>, LayerTrace)> {
    let (x, mask, seq) = if pool {
        let (x, m) = g.tape.seq_max_pool(x, batch, seq, Some(mask))?;
        (x, m, seq / 2)
    } else {
        (x, mask.to_vec(), seq)
    };
    let q = p.q.apply(g, x)?;
    let k = p.k.apply(g, x)?;
    let v = p.v.apply(g, x)?;
    let att = g.tape.attention(q, k, v, batch, seq, heads, &mask)?;
    let o = p.out.apply(g, att)?;
    let o = g.dropout(o)?;
    let h = g.tape.add(x, o)?;
    let h = p.norm1.apply(g, h)?;
    let f = p.ffn_in.apply(g, h)?;
    let f = g.tape.gelu(f)?;
    let f = p.ffn_out.apply(g, f)?;
    let f = g.dropout(f)?;
    let y = g.tape.add(h, f)?;
    let y = p.norm2.apply(g, y)?;
    let trace = LayerTrace {
        len: seq,
        heads,
        attention: att,
    };
    Ok((y, mask, trace))
}

/// Runs all layers on the embedded sequence.
pub fn encode<T: Real>(
    g: &mut Graph<'_, '_, T>,
    cfg: &FunnelConfig,
    p: &FunnelParams,
    x: Var,
    batch: usize,
    seq: usize,
    mask: &[bool],
) -> Result<Encoded> {
    let schedule = cfg.validate(seq)?;
    let (mut x, mut mask, mut len) = (x, mask.to_vec(), seq);
    let mut trace = Vec::with_capacity(cfg.layers);
    for (l, (lp, &(_, heads))) in p.layers.iter().zip(&schedule).enumerate() {
        let (y, m, t) = attention_layer(g, lp, x, batch, len, &mask, heads, l > 0)?;
        debug_assert_eq!(t.len, schedule[l].0);
        x = y;
        mask = m;
        len = t.len;
        trace.push(t);
    }
    Ok(Encoded {
        out: x,
        mask,
        len,
        trace,
    })
}
