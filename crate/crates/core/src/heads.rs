//! Switching Tail: per-mode two-logit heads over the flattened final
//! sequence, binarization, label combination and the λ-weighted loss.

use serde::{Deserialize, Serialize};
use shefu_tensor::{Real, Tape, Tensor, Var, PROB_CLAMP};

use crate::embedder::Mode;
use crate::error::{Result, ShefuError};
use crate::model::params::{Graph, Linear, ParamBuilder};

/// Probability threshold; a tie counts as positive.
pub const THRESHOLD: f64 = 0.5;

pub fn binarize(p: f64) -> bool {
    p >= THRESHOLD
}

/// `ŷ = ŷ_targ ∧ ŷ_dest`
pub fn combine(y_targ: bool, y_dest: bool) -> bool {
    y_targ && y_dest
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_targ: f64,
    pub p_dest: f64,
    pub y_targ: bool,
    pub y_dest: bool,
    pub y: bool,
}

impl Prediction {
    pub fn new(p_targ: f64, p_dest: f64) -> Self {
        let (y_targ, y_dest) = (binarize(p_targ), binarize(p_dest));
        Self {
            p_targ,
            p_dest,
            y_targ,
            y_dest,
            y: combine(y_targ, y_dest),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub targ: f64,
    pub dest: f64,
}

impl TaskWeights {
    /// λ = (1, 0) in target mode and (0, 1) in destination mode.
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Target => Self { targ: 1.0, dest: 0.0 },
            Mode::Destination => Self { targ: 0.0, dest: 1.0 },
        }
    }
}

/// Which output head a row is scored by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Target,
    Destination,
    Joint,
}

impl From<Mode> for HeadKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Target => HeadKind::Target,
            Mode::Destination => HeadKind::Destination,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailParams {
    /// separate target and destination heads
    Switching { targ: Linear, dest: Linear },
    /// one head for both modes
    Shared(Linear),
    /// one head on the joint label
    Joint(Linear),
}

impl TailParams {
    pub fn switching(pb: &mut ParamBuilder<'_>, flat: usize) -> Self {
        Self::Switching {
            targ: Linear::register(pb, "head.targ", flat, 2),
            dest: Linear::register(pb, "head.dest", flat, 2),
        }
    }

    pub fn shared(pb: &mut ParamBuilder<'_>, flat: usize) -> Self {
        Self::Shared(Linear::register(pb, "head.shared", flat, 2))
    }

    pub fn joint(pb: &mut ParamBuilder<'_>, flat: usize) -> Self {
        Self::Joint(Linear::register(pb, "head.joint", flat, 2))
    }

    pub fn head(&self, kind: HeadKind) -> Result<&Linear> {
        match (self, kind) {
            (Self::Switching { targ, .. }, HeadKind::Target) => Ok(targ),
            (Self::Switching { dest, .. }, HeadKind::Destination) => Ok(dest),
            (Self::Shared(h), HeadKind::Target | HeadKind::Destination) => Ok(h),
            (Self::Joint(h), HeadKind::Joint) => Ok(h),
            _ => Err(ShefuError::Contract(format!("{kind:?} head is not part of this model"))),
        }
    }
}

/// Flattens `[B·S, d]` rows into `[B, S·d]`, zeroing invalid rows first.
pub fn flatten<T: Real>(
    g: &mut Graph<'_, '_, T>,
    x: Var,
    batch: usize,
    mask: &[bool],
) -> Result<Var> {
    let x = g.tape.mask_rows(x, mask)?;
    let n = g.tape.value(x).numel();
    if batch == 0 || n % batch != 0 {
        return Err(ShefuError::Contract("cannot flatten rows into the batch".into()));
    }
    Ok(g.tape.reshape(x, vec![batch, n / batch])?)
}

/// `softmax(f_FC(h'_out))` for every row of `flat` with the selected head;
/// returns `[B, 2]` with the positive class in column 1. Only that head's
/// parameters enter the tape.
pub fn predict<T: Real>(
    g: &mut Graph<'_, '_, T>,
    tail: &TailParams,
    kind: HeadKind,
    flat: Var,
) -> Result<Var> {
    let head = *tail.head(kind)?;
    let w = g.param(head.w);
    let width = g.tape.value(w).shape()[0];
    let (_, cols) = g.tape.value(flat).rows_cols();
    if cols != width {
        return Err(ShefuError::Contract(format!(
            "head expects {width} flattened features, got {cols}"
        )));
    }
    let logits = head.apply(g, flat)?;
    Ok(g.tape.softmax(logits)?)
}

/// `λ_targ·CE(y_targ, p_targ) + λ_dest·CE(y_dest, p_dest)` with mean CE
/// over rows. A term with zero weight is not evaluated, so its head stays
/// off the gradient path; its distribution may then be `None`.
pub fn loss<T: Real>(
    tape: &mut Tape<'_, T>,
    y_targ: &[bool],
    p_targ: Option<Var>,
    y_dest: &[bool],
    p_dest: Option<Var>,
    w: TaskWeights,
) -> Result<Var> {
    if w.targ < 0.0 || w.dest < 0.0 {
        return Err(ShefuError::Contract("task weights must be nonnegative".into()));
    }
    let mut terms = Vec::new();
    for (lambda, y, p) in [(w.targ, y_targ, p_targ), (w.dest, y_dest, p_dest)] {
        if lambda == 0.0 {
            continue;
        }
        let p = p.ok_or_else(|| ShefuError::Contract("weighted head has no distribution".into()))?;
        let labels: Vec<usize> = y.iter().map(|&b| usize::from(b)).collect();
        let ce = tape.cross_entropy(p, &labels)?;
        terms.push(if lambda == 1.0 { ce } else { tape.scale(ce, T::lit(lambda))? });
    }
    match terms.as_slice() {
        [] => Ok(tape.constant(Tensor::scalar(T::zero()))),
        [t] => Ok(*t),
        [a, b] => Ok(tape.add(*a, *b)?),
        _ => unreachable!(),
    }
}

/// Scalar version of [`loss`] for one sample with explicit two-class
/// distributions.
pub fn loss_value(
    y_targ: bool,
    p_targ: [f64; 2],
    y_dest: bool,
    p_dest: [f64; 2],
    w: TaskWeights,
) -> Result<f64> {
    let ce = |y: bool, p: [f64; 2]| -> Result<f64> {
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p[0] + p[1] - 1.0).abs() > 1e-6 {
            return Err(ShefuError::Contract(format!("{p:?} is not a distribution")));
        }
        Ok(-p[usize::from(y)].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
    };
    let mut total = 0.0;
    if w.targ != 0.0 {
        total += w.targ * ce(y_targ, p_targ)?;
    }
    if w.dest != 0.0 {
        total += w.dest * ce(y_dest, p_dest)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_rule() {
        assert!(binarize(0.51));
        assert!(!binarize(0.49));
        assert!(binarize(0.5));
        assert!(!binarize(0.5 - f64::EPSILON));
    }

    #[test]
    fn combination_truth_table() {
        assert!(combine(true, true));
        assert!(!combine(true, false));
        assert!(!combine(false, true));
        assert!(!combine(false, false));
    }

    #[test]
    fn uniform_target_loss_is_ln2() {
        let l = loss_value(true, [0.5, 0.5], false, [0.1, 0.9], TaskWeights::for_mode(Mode::Target)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let zero = TaskWeights { targ: 0.0, dest: 0.0 };
        assert_eq!(loss_value(true, [0.5, 0.5], true, [0.5, 0.5], zero).unwrap(), 0.0);
        assert!(loss_value(true, [0.7, 0.7], true, [0.5, 0.5], zero).is_ok());
        assert!(loss_value(true, [0.7, 0.7], true, [0.5, 0.5], TaskWeights { targ: 1.0, dest: 0.0 }).is_err());
    }

    #[test]
    fn tape_loss_matches_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let l = loss(&mut tape, &[true], Some(p), &[false], None, TaskWeights::for_mode(Mode::Target)).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let l = loss(&mut tape, &[true], None, &[true], None, TaskWeights { targ: 0.0, dest: 0.0 }).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }
}
