//! Input encoding: tokenizer, box geometry, the Switching Head and the
//! region/text embedding that produces the funnel's first-layer sequence.

use serde::{Deserialize, Serialize};
use shefu_tensor::{Real, Var};

use crate::dataset::vocab::{Vocab, PAD_ID, UNK_ID};
use crate::dataset::{BBox, RegionFeature};
use crate::error::{Result, ShefuError};
use crate::model::params::{Graph, Linear, Norm, ParamBuilder, ParamId};

/// Width of the box geometry vector.
pub const POS_DIMS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Target,
    Destination,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::Target, Mode::Destination];
}

/// `[x1/W, y1/H, x2/W, y2/H, w/W, h/H, w·h/(W·H)]`
pub fn positional_encode(b: &BBox) -> [f32; POS_DIMS] {
    let (w, h) = (b.w() / b.width, b.h() / b.height);
    [
        b.x1 / b.width,
        b.y1 / b.height,
        b.x2 / b.width,
        b.y2 / b.height,
        w,
        h,
        w * h,
    ]
}

/// Visual features followed by the box geometry.
pub fn region_input(r: &RegionFeature) -> Vec<f32> {
    let mut v = Vec::with_capacity(r.visual.len() + POS_DIMS);
    v.extend_from_slice(&r.visual);
    v.extend_from_slice(&positional_encode(&r.bbox));
    v
}

/// Keeps the candidate the mode asks about and zero-fills the other one,
/// geometry included.
pub fn switching_head(x_targ: &[f32], x_dest: &[f32], mode: Mode) -> (Vec<f32>, Vec<f32>) {
    match mode {
        Mode::Target => (x_targ.to_vec(), vec![0.0; x_dest.len()]),
        Mode::Destination => (vec![0.0; x_targ.len()], x_dest.to_vec()),
    }
}

/// Ablation of the Switching Head: the live candidate fills both slots.
pub fn duplicate_head(x_targ: &[f32], x_dest: &[f32], mode: Mode) -> (Vec<f32>, Vec<f32>) {
    match mode {
        Mode::Target => (x_targ.to_vec(), x_targ.to_vec()),
        Mode::Destination => (x_dest.to_vec(), x_dest.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    /// true on non-PAD slots
    pub mask: Vec<bool>,
}

/// Lowercases, strips punctuation, splits on whitespace and looks words up
/// (UNK for misses), truncating or PAD-filling to `max_tokens`.
pub fn tokenize(text: &str, vocab: &Vocab, max_tokens: usize) -> TokenSequence {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    let mut ids: Vec<usize> = cleaned
        .split_whitespace()
        .take(max_tokens)
        .map(|w| vocab.id(w).unwrap_or(UNK_ID))
        .collect();
    let mut mask = vec![true; ids.len()];
    ids.resize(max_tokens, PAD_ID);
    mask.resize(max_tokens, false);
    TokenSequence {
        ids,
        positions: (0..max_tokens).collect(),
        mask,
    }
}

/// Space-joined tokens of the unmasked slots.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    seq.ids
        .iter()
        .zip(&seq.mask)
        .filter(|(_, &m)| m)
        .map(|(&id, _)| vocab.token(id).unwrap_or(crate::dataset::vocab::UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionProjection {
    pub fc: Linear,
    pub norm: Norm,
}

impl RegionProjection {
    fn register(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_model: usize) -> Self {
        Self {
            fc: Linear::register(pb, &format!("{name}.fc"), d_in, d_model),
            norm: Norm::register(pb, &format!("{name}.ln"), d_model),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, '_, T>, x: Var) -> Result<Var> {
        let h = self.fc.apply(g, x)?;
        let h = self.norm.apply(g, h)?;
        g.dropout(h)
    }
}

/// Separate projections for the target slot, the destination slot and the
/// context detections, plus token/position tables for the text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedderParams {
    pub targ: RegionProjection,
    pub dest: RegionProjection,
    pub det: RegionProjection,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub text_norm: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedDims {
    pub d_f: usize,
    pub context_slots: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub d_model: usize,
}

impl EmbedDims {
    pub fn region_width(&self) -> usize {
        self.d_f + POS_DIMS
    }

    /// K + D_l + 2
    pub fn seq_len(&self) -> usize {
        self.context_slots + self.max_tokens + 2
    }
}

impl EmbedderParams {
    pub fn register(pb: &mut ParamBuilder<'_>, dims: &EmbedDims) -> Self {
        let (d_in, d) = (dims.region_width(), dims.d_model);
        Self {
            targ: RegionProjection::register(pb, "embed.targ", d_in, d),
            dest: RegionProjection::register(pb, "embed.dest", d_in, d),
            det: RegionProjection::register(pb, "embed.det", d_in, d),
            tokens: pb.normal("embed.tokens", vec![dims.vocab_size, d], 1.0),
            positions: pb.normal("embed.positions", vec![dims.max_tokens, d], 1.0),
            text_norm: Norm::register(pb, "embed.text.ln", d),
        }
    }
}

/// Row-major inputs of one batch, already passed through the Switching
/// Head (or its ablation).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbedInputs {
    pub batch: usize,
    /// `[B, D_f+7]`
    pub targ: Vec<f32>,
    /// `[B, D_f+7]`
    pub dest: Vec<f32>,
    /// `[B·K, D_f+7]`, zero rows in padded slots
    pub det: Vec<f32>,
    pub det_valid: Vec<bool>,
    /// `[B·D_l]`
    pub tokens: Vec<usize>,
    pub token_valid: Vec<bool>,
}

impl EmbedInputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one sequence. `context` is truncated to K and zero-padded.
    pub fn push(
        &mut self,
        dims: &EmbedDims,
        targ: &[f32],
        dest: &[f32],
        context: &[Vec<f32>],
        tokens: &TokenSequence,
    ) -> Result<()> {
        let w = dims.region_width();
        if targ.len() != w || dest.len() != w || context.iter().any(|c| c.len() != w) {
            return Err(ShefuError::Contract(format!("region inputs must have width D_f+7 = {w}")));
        }
        if tokens.ids.len() != dims.max_tokens || tokens.ids.iter().any(|&i| i >= dims.vocab_size) {
            return Err(ShefuError::Contract(format!(
                "token sequence must have {} ids below {}",
                dims.max_tokens, dims.vocab_size
            )));
        }
        self.batch += 1;
        self.targ.extend_from_slice(targ);
        self.dest.extend_from_slice(dest);
        for k in 0..dims.context_slots {
            match context.get(k) {
                Some(c) => {
                    self.det.extend_from_slice(c);
                    self.det_valid.push(true);
                }
                None => {
                    self.det.extend(std::iter::repeat(0.0).take(w));
                    self.det_valid.push(false);
                }
            }
        }
        self.tokens.extend_from_slice(&tokens.ids);
        self.token_valid.extend_from_slice(&tokens.mask);
        Ok(())
    }
}

/// Embeds a batch into `[B·S, d_model]` rows ordered per sequence as
/// `[targ, dest, det_1..det_K, txt_1..txt_D_l]`, with the validity mask.
pub fn embed<T: Real>(
    g: &mut Graph<'_, '_, T>,
    p: &EmbedderParams,
    dims: &EmbedDims,
    x: &EmbedInputs,
) -> Result<(Var, Vec<bool>)> {
    let (b, k, l, w) = (x.batch, dims.context_slots, dims.max_tokens, dims.region_width());
    if b == 0 || x.targ.len() != b * w || x.det.len() != b * k * w || x.tokens.len() != b * l {
        return Err(ShefuError::Contract("embed inputs do not match the batch dimensions".into()));
    }
    let targ = g.input(vec![b, w], &x.targ)?;
    let targ = p.targ.apply(g, targ)?;
    let dest = g.input(vec![b, w], &x.dest)?;
    let dest = p.dest.apply(g, dest)?;
    let det = g.input(vec![b * k, w], &x.det)?;
    let det = p.det.apply(g, det)?;

    let table = g.param(p.tokens);
    let tok = g.tape.gather_rows(table, &x.tokens)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pos_table = g.param(p.positions);
    let pos = g.tape.gather_rows(pos_table, &positions)?;
    let txt = g.tape.add(tok, pos)?;
    let txt = p.text_norm.apply(g, txt)?;
    let txt = g.dropout(txt)?;

    // stacked as [targ(B); dest(B); det(B·K); txt(B·D_l)], then reordered
    let all = g.tape.concat_rows(&[targ, dest, det, txt])?;
    let (dest0, det0, txt0) = (b, 2 * b, 2 * b + b * k);
    let s = dims.seq_len();
    let mut order = Vec::with_capacity(b * s);
    let mut mask = Vec::with_capacity(b * s);
    for i in 0..b {
        order.push(i);
        order.push(dest0 + i);
        mask.extend([true, true]);
        order.extend((0..k).map(|j| det0 + i * k + j));
        mask.extend_from_slice(&x.det_valid[i * k..(i + 1) * k]);
        order.extend((0..l).map(|j| txt0 + i * l + j));
        mask.extend_from_slice(&x.token_valid[i * l..(i + 1) * l]);
    }
    let seq = g.tape.gather_rows(all, &order)?;
    Ok((seq, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f32], b: &[f32]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn full_image_box() {
        let b = BBox::full(640.0, 480.0);
        assert_eq!(positional_encode(&b), [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn box_geometry_by_hand() {
        let b = BBox::new(64.0, 48.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let p = positional_encode(&b);
        assert!(close(&p, &[0.1, 0.1, 0.5, 0.5, 0.4, 0.4, 0.16]), "{p:?}");
        assert_eq!(p[6], p[4] * p[5]);
    }

    #[test]
    fn tokenize_looks_up_and_pads() {
        let v = Vocab::from_words(["the", "red", "cup"]);
        assert_eq!(v.id("the"), Some(2));
        let t = tokenize("The red, cup!", &v, 5);
        assert_eq!(t.ids, vec![2, 3, 4, PAD_ID, PAD_ID]);
        assert_eq!(t.mask, vec![true, true, true, false, false]);
        assert_eq!(t.positions, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_text_is_all_pad() {
        let v = Vocab::from_words(["the"]);
        let t = tokenize("", &v, 3);
        assert_eq!(t.ids, vec![PAD_ID; 3]);
        assert!(t.mask.iter().all(|m| !m));
    }

    #[test]
    fn unknown_words_map_to_unk_and_long_text_truncates() {
        let v = Vocab::from_words(["the"]);
        let t = tokenize("the zebra the the", &v, 3);
        assert_eq!(t.ids, vec![2, UNK_ID, 2]);
        assert!(t.mask.iter().all(|&m| m));
    }

    #[test]
    fn switching_head_cases() {
        let (a, b) = (vec![1.0, 2.0], vec![3.0, 4.0]);
        assert_eq!(switching_head(&a, &b, Mode::Target), (a.clone(), vec![0.0, 0.0]));
        assert_eq!(switching_head(&a, &b, Mode::Destination), (vec![0.0, 0.0], b.clone()));
        let z = vec![0.0, 0.0];
        for m in Mode::BOTH {
            assert_eq!(switching_head(&z, &z, m), (z.clone(), z.clone()));
        }
        assert_eq!(duplicate_head(&a, &b, Mode::Target), (a.clone(), a.clone()));
        assert_eq!(duplicate_head(&a, &b, Mode::Destination), (b.clone(), b));
    }
}
