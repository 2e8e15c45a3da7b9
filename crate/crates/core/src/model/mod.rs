//! The full model: embedder, funnel encoder and tail, for each of the four
//! compared variants.

pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shefu_tensor::{Real, Tape, Var};

use crate::dataset::{Sample, Vocab};
use crate::embedder::{
    duplicate_head, embed, region_input, switching_head, tokenize, EmbedDims, EmbedInputs,
    EmbedderParams, Mode, TokenSequence,
};
use crate::error::{Result, ShefuError};
use crate::funnel::{encode, Encoded, FunnelConfig, FunnelParams};
use crate::heads::{self, flatten, HeadKind, Prediction, TailParams, TaskWeights};
use params::{Graph, ParamBuilder, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Shefu,
    NoSwitchingHead,
    NoSwitchingTail,
    PairedBaseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Shefu,
        Variant::NoSwitchingHead,
        Variant::NoSwitchingTail,
        Variant::PairedBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Shefu => "shefu",
            Variant::NoSwitchingHead => "no_switching_head",
            Variant::NoSwitchingTail => "no_switching_tail",
            Variant::PairedBaseline => "paired_baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Scores targets and destinations in separate passes.
    pub fn is_factorized(self) -> bool {
        self != Variant::PairedBaseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// D_f
    pub d_f: usize,
    /// K
    pub context_slots: usize,
    /// D_l
    pub max_tokens: usize,
    /// D_v
    pub vocab_size: usize,
    pub funnel: FunnelConfig,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn dims(&self) -> EmbedDims {
        EmbedDims {
            d_f: self.d_f,
            context_slots: self.context_slots,
            max_tokens: self.max_tokens,
            vocab_size: self.vocab_size,
            d_model: self.funnel.d_model,
        }
    }

    /// `(S^(l), A^(l))` per layer.
    pub fn schedule(&self) -> Result<Vec<(usize, usize)>> {
        if self.d_f == 0 || self.context_slots == 0 || self.max_tokens == 0 || self.vocab_size < 2 {
            return Err(ShefuError::Config(
                "d_f, context_slots and max_tokens must be positive and the vocabulary needs UNK and PAD".into(),
            ));
        }
        self.funnel.validate(self.dims().seq_len())
    }

    /// Head input width `S^(L)·d_model`.
    pub fn flat_width(&self) -> Result<usize> {
        let last = *self.schedule()?.last().expect("at least one layer");
        Ok(last.0 * self.funnel.d_model)
    }
}

/// One sequence's inputs before the Switching Head is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub targ: Vec<f32>,
    pub dest: Vec<f32>,
    pub context: Vec<Vec<f32>>,
    pub tokens: TokenSequence,
    pub y_targ: bool,
    pub y_dest: bool,
}

impl Prepared {
    pub fn joint_label(&self) -> bool {
        self.y_targ && self.y_dest
    }
}

/// Builds model inputs for a sample. The K context slots take the
/// highest-confidence ⌈K/2⌉ regions of the target-candidate image and
/// ⌊K/2⌋ of the destination-candidate image; slots one image leaves empty
/// go to the other image's next regions.
pub fn prepare(sample: &Sample, cfg: &ModelConfig, vocab: &Vocab) -> Result<Prepared> {
    let width_ok = |v: &[f32]| v.len() == cfg.d_f;
    let all = [&sample.target, &sample.dest]
        .into_iter()
        .chain(&sample.target_context)
        .chain(&sample.dest_context);
    for r in all {
        if !width_ok(&r.visual) {
            return Err(ShefuError::Contract(format!(
                "region feature has width {}, model expects D_f = {}",
                r.visual.len(),
                cfg.d_f
            )));
        }
    }
    let k = cfg.context_slots;
    let (tk, dk) = (k.div_ceil(2), k / 2);
    let (t, d) = (&sample.target_context, &sample.dest_context);
    let nt = t.len().min(tk);
    let nd = d.len().min(dk);
    let spare = k - nt - nd;
    let extra_t = (t.len() - nt).min(spare);
    let extra_d = (d.len() - nd).min(spare - extra_t);
    let context = t[..nt + extra_t]
        .iter()
        .chain(&d[..nd + extra_d])
        .map(region_input)
        .collect();
    Ok(Prepared {
        targ: region_input(&sample.target),
        dest: region_input(&sample.dest),
        context,
        tokens: tokenize(&sample.instruction, vocab, cfg.max_tokens),
        y_targ: sample.y_targ,
        y_dest: sample.y_dest,
    })
}

/// A sequence to encode: inputs plus the mode it runs in (`None` for the
/// paired baseline, which always sees both candidates).
pub type Row<'a> = (&'a Prepared, Option<Mode>);

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub embed: EmbedderParams,
    pub funnel: FunnelParams,
    pub tail: TailParams,
}

impl Model<f32> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let flat = config.flat_width()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut rng);
        let embed = EmbedderParams::register(&mut pb, &config.dims());
        let funnel = FunnelParams::register(&mut pb, &config.funnel);
        let tail = match config.variant {
            Variant::Shefu | Variant::NoSwitchingHead => TailParams::switching(&mut pb, flat),
            Variant::NoSwitchingTail => TailParams::shared(&mut pb, flat),
            Variant::PairedBaseline => TailParams::joint(&mut pb, flat),
        };
        Ok(Self {
            config,
            params: pb.params,
            embed,
            funnel,
            tail,
        })
    }
}

impl<T: Real> Model<T> {
    /// Attaches loaded parameters, which must match the layout `config`
    /// implies name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let layout = Model::init(config, 0)?;
        let mut fresh = layout.params.cast::<T>();
        fresh.load_from(&params)?;
        Ok(Model {
            config: layout.config,
            params: fresh,
            embed: layout.embed,
            funnel: layout.funnel,
            tail: layout.tail,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embed: self.embed,
            funnel: self.funnel.clone(),
            tail: self.tail,
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn push_row(&self, inputs: &mut EmbedInputs, (p, mode): Row<'_>) -> Result<()> {
        let (targ, dest) = match (self.variant(), mode) {
            (Variant::Shefu | Variant::NoSwitchingTail, Some(m)) => switching_head(&p.targ, &p.dest, m),
            (Variant::NoSwitchingHead, Some(m)) => duplicate_head(&p.targ, &p.dest, m),
            (Variant::PairedBaseline, None) => (p.targ.clone(), p.dest.clone()),
            (v, m) => {
                return Err(ShefuError::Contract(format!("{} cannot run in mode {m:?}", v.name())));
            }
        };
        inputs.push(&self.config.dims(), &targ, &dest, &p.context, &p.tokens)
    }

    /// Encodes every row of every group in one batch and scores each group
    /// with its head. Returns one `[n_group, 2]` probability node per group
    /// plus the encoder trace.
    pub fn forward_groups(
        &self,
        g: &mut Graph<'_, '_, T>,
        groups: &[(HeadKind, Vec<Row<'_>>)],
    ) -> Result<(Vec<Var>, Encoded)> {
        let mut inputs = EmbedInputs::new();
        for (_, rows) in groups {
            for &row in rows {
                self.push_row(&mut inputs, row)?;
            }
        }
        let dims = self.config.dims();
        let batch = inputs.batch;
        let (seq, mask) = embed(g, &self.embed, &dims, &inputs)?;
        let enc = encode(g, &self.config.funnel, &self.funnel, seq, batch, dims.seq_len(), &mask)?;
        let flat = flatten(g, enc.out, batch, &enc.mask)?;
        let mut out = Vec::with_capacity(groups.len());
        let mut offset = 0;
        for (kind, rows) in groups {
            let sub = if groups.len() == 1 {
                flat
            } else {
                let idx: Vec<usize> = (offset..offset + rows.len()).collect();
                g.tape.gather_rows(flat, &idx)?
            };
            offset += rows.len();
            out.push(heads::predict(g, &self.tail, *kind, sub)?);
        }
        Ok((out, enc))
    }

    /// Training objective for a batch: target-mode loss with λ = (1, 0)
    /// plus destination-mode loss with λ = (0, 1); the paired baseline uses
    /// the joint label.
    pub fn training_loss(&self, g: &mut Graph<'_, '_, T>, batch: &[&Prepared]) -> Result<Var> {
        let y_t: Vec<bool> = batch.iter().map(|p| p.y_targ).collect();
        let y_d: Vec<bool> = batch.iter().map(|p| p.y_dest).collect();
        if !self.variant().is_factorized() {
            let rows = batch.iter().map(|&p| (p, None)).collect();
            let (probs, _) = self.forward_groups(g, &[(HeadKind::Joint, rows)])?;
            let y: Vec<bool> = batch.iter().map(|p| p.joint_label()).collect();
            return heads::loss(g.tape, &y, Some(probs[0]), &[], None, TaskWeights::for_mode(Mode::Target));
        }
        let groups: Vec<(HeadKind, Vec<Row<'_>>)> = Mode::BOTH
            .iter()
            .map(|&m| (HeadKind::from(m), batch.iter().map(|&p| (p, Some(m))).collect()))
            .collect();
        let (probs, _) = self.forward_groups(g, &groups)?;
        let lt = heads::loss(g.tape, &y_t, Some(probs[0]), &y_d, None, TaskWeights::for_mode(Mode::Target))?;
        let ld = heads::loss(g.tape, &y_t, None, &y_d, Some(probs[1]), TaskWeights::for_mode(Mode::Destination))?;
        Ok(g.tape.add(lt, ld)?)
    }

    /// Positive-class probabilities for rows scored by one head, without
    /// dropout.
    pub fn probabilities(&self, kind: HeadKind, rows: &[Row<'_>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.params);
        let (probs, _) = self.forward_groups(&mut g, &[(kind, rows.to_vec())])?;
        let p = g.tape.value(probs[0]).data();
        Ok(p.chunks_exact(2).map(|r| r[1].to_f64().unwrap()).collect())
    }

    /// Per-sample predictions. For the paired baseline both fields carry
    /// the joint probability.
    pub fn predict(&self, batch: &[&Prepared]) -> Result<Vec<Prediction>> {
        if !self.variant().is_factorized() {
            let rows: Vec<Row<'_>> = batch.iter().map(|&p| (p, None)).collect();
            let p = self.probabilities(HeadKind::Joint, &rows)?;
            return Ok(p.into_iter().map(|p| Prediction::new(p, p)).collect());
        }
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.params);
        let groups: Vec<(HeadKind, Vec<Row<'_>>)> = Mode::BOTH
            .iter()
            .map(|&m| (HeadKind::from(m), batch.iter().map(|&p| (p, Some(m))).collect()))
            .collect();
        let (probs, _) = self.forward_groups(&mut g, &groups)?;
        let pos = |v: Var| -> Vec<f64> {
            g.tape.value(v).data().chunks_exact(2).map(|r| r[1].to_f64().unwrap()).collect()
        };
        let (pt, pd) = (pos(probs[0]), pos(probs[1]));
        Ok(pt.into_iter().zip(pd).map(|(a, b)| Prediction::new(a, b)).collect())
    }
}

/// Finite-difference check of the training loss gradient with respect to
/// every parameter.
pub fn grad_check_loss(
    model: &Model<f64>,
    batch: &[&Prepared],
    h: f64,
) -> Result<shefu_tensor::GradCheckReport> {
    let point = model.params.tensors().to_vec();
    let report = shefu_tensor::grad_check(
        |tape, vars| {
            let mut g = Graph::prebound(tape, vars);
            model.training_loss(&mut g, batch).map_err(|e| match e {
                ShefuError::Tensor(t) => t,
                other => shefu_tensor::TensorError::Contract(other.to_string()),
            })
        },
        &point,
        h,
    )?;
    Ok(report)
}
