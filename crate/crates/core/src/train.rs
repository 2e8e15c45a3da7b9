//! Training loop, validation-based checkpoint selection and joint-label
//! evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shefu_tensor::{AdamState, Tape, TensorError};

use crate::dataset::{Dataset, Sample, Split, Vocab};
use crate::error::{Result, ShefuError};
use crate::model::params::{hex, Graph};
use crate::model::{prepare, Model, ModelConfig, Prepared};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Dims, variant and dropout rate.
    pub model: ModelConfig,
}

impl TrainConfig {
    /// 20000 steps, validation every 2000, batch 8, Adam(8e-5, 0.9, 0.999).
    pub fn new(model: ModelConfig) -> Self {
        Self {
            steps: 20_000,
            eval_every: 2_000,
            batch_size: 8,
            lr: 8e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ShefuError::Config(m.into()));
        if self.steps == 0 || self.eval_every == 0 || self.batch_size == 0 {
            return bad("steps, eval_every and batch_size must be positive");
        }
        if self.eval_every > self.steps {
            return bad("eval_every exceeds steps, so validation would never run");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || self.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        self.model.schedule()?;
        Ok(())
    }

    /// Non-fatal oddities worth printing.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.steps % self.eval_every != 0 {
            w.push(format!(
                "steps ({}) is not a multiple of eval_every ({}); the last {} steps are never validated",
                self.steps,
                self.eval_every,
                self.steps % self.eval_every
            ));
        }
        w
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    /// validation accuracy at every eval step
    pub curve: Vec<EvalPoint>,
    pub best_step: usize,
    pub val_accuracy: f64,
    /// test accuracy of the best-validation checkpoint
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub param_checksum: String,
}

impl RunReport {
    /// Metrics CSV: `step,split,accuracy,loss`.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("step,split,accuracy,loss\n");
        for p in &self.curve {
            s += &format!("{},val,{:.6},{:.6}\n", p.step, p.accuracy, p.loss);
        }
        s += &format!("{},test,{:.6},{:.6}\n", self.best_step, self.test_accuracy, self.test_loss);
        s
    }
}

/// Earliest step with the highest validation accuracy.
pub fn select_best(curve: &[EvalPoint]) -> Option<&EvalPoint> {
    curve.iter().fold(None, |best: Option<&EvalPoint>, p| match best {
        Some(b) if b.accuracy >= p.accuracy => Some(b),
        _ => Some(p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// mean per-sample training objective without dropout
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

const EVAL_CHUNK: usize = 64;

/// Joint-label accuracy: a sample counts as correct when `ŷ` equals
/// `y_targ ∧ y_dest`.
pub fn evaluate(model: &Model<f32>, samples: &[Prepared]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(ShefuError::Contract("cannot evaluate on an empty sample set".into()));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        for (p, s) in model.predict(&refs)?.iter().zip(chunk) {
            correct += usize::from(p.y == s.joint_label());
        }
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &model.params);
        let l = model.training_loss(&mut g, &refs)?;
        loss += g.tape.value(l).data()[0] as f64 * chunk.len() as f64;
    }
    let total = samples.len();
    Ok(Evaluation {
        accuracy: correct as f64 / total as f64,
        loss: loss / total as f64,
        correct,
        total,
    })
}

pub fn prepare_all(samples: &[Sample], cfg: &ModelConfig, vocab: &Vocab) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| prepare(s, cfg, vocab)).collect()
}

pub fn prepare_split(data: &Dataset, split: Split, cfg: &ModelConfig) -> Result<Vec<Prepared>> {
    prepare_all(&data.resolve_split(split)?, cfg, &data.vocab)
}

pub struct Trained {
    /// parameters of the best-validation checkpoint
    pub model: Model<f32>,
    pub report: RunReport,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains on `train`, validates on `val` every `eval_every` steps and
/// reports test accuracy of the best-validation parameters. Every step
/// sums the target-mode and destination-mode losses of one batch.
pub fn train(
    cfg: &TrainConfig,
    train: &[Prepared],
    val: &[Prepared],
    test: &[Prepared],
) -> Result<Trained> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ShefuError::Contract("training split is empty".into()));
    }
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(
        cfg.lr as f32,
        cfg.beta1 as f32,
        cfg.beta2 as f32,
        cfg.eps as f32,
        model.params.tensors(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut curve = Vec::new();
    let mut best: Option<(EvalPoint, Model<f32>)> = None;

    for step in 1..=cfg.steps {
        let batch: Vec<&Prepared> = (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                &train[order[cursor - 1]]
            })
            .collect();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let dropout = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step));
            let mut g = Graph::new(&mut tape, &model.params).with_dropout(cfg.model.funnel.dropout, dropout);
            let l = model.training_loss(&mut g, &batch).map_err(|e| diverged(e, step))?;
            let loss = g.tape.value(l).data()[0] as f64;
            if !loss.is_finite() {
                return Err(ShefuError::Divergence { step, loss });
            }
            (loss, g.param_grads(l).map_err(|e| diverged(e, step))?)
        };
        adam.step(model.params.tensors_mut(), &grads).map_err(|e| match e {
            TensorError::NumericInput { .. } => ShefuError::Divergence { step, loss },
            other => other.into(),
        })?;

        if step % cfg.eval_every == 0 {
            let e = evaluate(&model, val)?;
            let point = EvalPoint {
                step,
                accuracy: e.accuracy,
                loss: e.loss,
            };
            curve.push(point);
            if best.as_ref().is_none_or(|(b, _)| point.accuracy > b.accuracy) {
                best = Some((point, model.clone()));
            }
        }
    }

    let (best_point, model) = best.expect("at least one validation pass");
    let t = evaluate(&model, test)?;
    let report = RunReport {
        variant: cfg.model.variant.name().into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        curve,
        best_step: best_point.step,
        val_accuracy: best_point.accuracy,
        test_accuracy: t.accuracy,
        test_loss: t.loss,
        param_checksum: model.params.checksum(),
    };
    Ok(Trained { model, report })
}

fn diverged(e: ShefuError, step: usize) -> ShefuError {
    match e {
        ShefuError::Tensor(TensorError::NumericInput { .. }) => ShefuError::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(step: usize, accuracy: f64) -> EvalPoint {
        EvalPoint { step, accuracy, loss: 0.0 }
    }

    #[test]
    fn best_is_earliest_maximum() {
        let c = [pt(2, 0.5), pt(4, 0.7), pt(6, 0.7), pt(8, 0.6)];
        assert_eq!(select_best(&c).unwrap().step, 4);
        assert!(select_best(&[]).is_none());
    }

    #[test]
    fn csv_has_one_val_row_per_eval() {
        let r = RunReport {
            variant: "shefu".into(),
            seed: 0,
            config_hash: String::new(),
            curve: vec![pt(100, 0.5), pt(200, 0.75)],
            best_step: 200,
            val_accuracy: 0.75,
            test_accuracy: 0.5,
            test_loss: 1.0,
            param_checksum: String::new(),
        };
        let csv = r.metrics_csv();
        assert_eq!(csv.lines().filter(|l| l.contains(",val,")).count(), 2);
        assert_eq!(csv.lines().next().unwrap(), "step,split,accuracy,loss");
    }
}
