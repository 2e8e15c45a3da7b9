//! Candidate scoring: factorized M+N passes, the brute-force M×N oracle
//! and the timing benchmark comparing them.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, RegionFeature, Sample, Vocab};
use crate::embedder::Mode;
use crate::error::{Result, ShefuError};
use crate::heads::{binarize, HeadKind};
use crate::model::{prepare, Model, Prepared, Row};

/// One instruction with M target and N destination candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneQuery {
    pub instruction: String,
    pub targets: Vec<RegionFeature>,
    pub dests: Vec<RegionFeature>,
    /// highest-confidence regions of the target image
    pub target_context: Vec<RegionFeature>,
    /// highest-confidence regions of the destination image
    pub dest_context: Vec<RegionFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    /// per-candidate probabilities; empty for the paired baseline
    pub p_targ: Vec<f64>,
    pub p_dest: Vec<f64>,
    pub y_targ: Vec<bool>,
    pub y_dest: Vec<bool>,
    /// `(i*, j*)`
    pub pair: (usize, usize),
    pub pair_score: f64,
    /// false when no candidate on some side reaches the threshold; the
    /// argmax pair is still reported
    pub confident: bool,
    /// sequences actually pushed through the encoder
    pub forward_passes: u64,
    /// (target, destination) pairs scored
    pub pair_evaluations: u64,
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Runs candidate sequences through a frozen model, counting every
/// sequence encoded. Shareable across threads.
pub struct Scorer<'m> {
    pub model: &'m Model<f32>,
    pub vocab: &'m Vocab,
    /// sequences per forward batch
    pub chunk: usize,
    passes: AtomicU64,
}

impl<'m> Scorer<'m> {
    pub fn new(model: &'m Model<f32>, vocab: &'m Vocab) -> Self {
        Self {
            model,
            vocab,
            chunk: 64,
            passes: AtomicU64::new(0),
        }
    }

    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    fn check(&self, q: &SceneQuery) -> Result<()> {
        if q.targets.is_empty() || q.dests.is_empty() {
            return Err(ShefuError::Contract(format!(
                "query needs at least one candidate per side, got M = {}, N = {}",
                q.targets.len(),
                q.dests.len()
            )));
        }
        Ok(())
    }

    fn prepared(&self, q: &SceneQuery, t: &RegionFeature, d: &RegionFeature) -> Result<Prepared> {
        let s = Sample {
            instruction: q.instruction.clone(),
            target: t.clone(),
            dest: d.clone(),
            target_context: q.target_context.clone(),
            dest_context: q.dest_context.clone(),
            y_targ: false,
            y_dest: false,
        };
        prepare(&s, &self.model.config, self.vocab)
    }

    fn run(&self, kind: HeadKind, rows: &[Row<'_>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len());
        for c in rows.chunks(self.chunk.max(1)) {
            out.extend(self.model.probabilities(kind, c)?);
            self.passes.fetch_add(c.len() as u64, Ordering::Relaxed);
        }
        Ok(out)
    }

    /// M target-mode passes and N destination-mode passes; `i*` and `j*`
    /// are the per-side argmaxes.
    pub fn score_candidates(&self, q: &SceneQuery) -> Result<PairDecision> {
        self.check(q)?;
        if !self.model.variant().is_factorized() {
            return Err(ShefuError::Contract(
                "factorized scoring needs a switching-family model; the paired baseline scores pairs".into(),
            ));
        }
        let before = self.passes();
        // the other candidate slot is zero-filled or overwritten by the
        // head, so any candidate can stand in for it
        let targets = q
            .targets
            .iter()
            .map(|t| self.prepared(q, t, &q.dests[0]))
            .collect::<Result<Vec<_>>>()?;
        let dests = q
            .dests
            .iter()
            .map(|d| self.prepared(q, &q.targets[0], d))
            .collect::<Result<Vec<_>>>()?;
        let t_rows: Vec<Row<'_>> = targets.iter().map(|p| (p, Some(Mode::Target))).collect();
        let d_rows: Vec<Row<'_>> = dests.iter().map(|p| (p, Some(Mode::Destination))).collect();
        let p_targ = self.run(HeadKind::from(Mode::Target), &t_rows)?;
        let p_dest = self.run(HeadKind::from(Mode::Destination), &d_rows)?;
        let (i, j) = (argmax(&p_targ), argmax(&p_dest));
        Ok(PairDecision {
            y_targ: p_targ.iter().map(|&p| binarize(p)).collect(),
            y_dest: p_dest.iter().map(|&p| binarize(p)).collect(),
            pair: (i, j),
            pair_score: p_targ[i] * p_dest[j],
            confident: binarize(p_targ[i]) && binarize(p_dest[j]),
            forward_passes: self.passes() - before,
            pair_evaluations: (p_targ.len() * p_dest.len()) as u64,
            p_targ,
            p_dest,
        })
    }

    /// Scores every (i, j) pair. Factorized models run both modes per pair
    /// (2·M·N passes) and score `p_targ(i)·p_dest(j)`; the paired baseline
    /// runs one joint pass per pair.
    pub fn brute_force_pairs(&self, q: &SceneQuery) -> Result<PairDecision> {
        self.check(q)?;
        let before = self.passes();
        let (m, n) = (q.targets.len(), q.dests.len());
        let mut pairs = Vec::with_capacity(m * n);
        for t in &q.targets {
            for d in &q.dests {
                pairs.push(self.prepared(q, t, d)?);
            }
        }
        let mut p_targ = vec![0.0; m];
        let mut p_dest = vec![0.0; n];
        let scores: Vec<f64> = if self.model.variant().is_factorized() {
            let t_rows: Vec<Row<'_>> = pairs.iter().map(|p| (p, Some(Mode::Target))).collect();
            let d_rows: Vec<Row<'_>> = pairs.iter().map(|p| (p, Some(Mode::Destination))).collect();
            let pt = self.run(HeadKind::from(Mode::Target), &t_rows)?;
            let pd = self.run(HeadKind::from(Mode::Destination), &d_rows)?;
            for (k, (&a, &b)) in pt.iter().zip(&pd).enumerate() {
                p_targ[k / n] = a;
                p_dest[k % n] = b;
            }
            pt.iter().zip(&pd).map(|(a, b)| a * b).collect()
        } else {
            p_targ.clear();
            p_dest.clear();
            let rows: Vec<Row<'_>> = pairs.iter().map(|p| (p, None)).collect();
            self.run(HeadKind::Joint, &rows)?
        };
        let best = argmax(&scores);
        let confident = if p_targ.is_empty() {
            binarize(scores[best])
        } else {
            p_targ.iter().any(|&p| binarize(p)) && p_dest.iter().any(|&p| binarize(p))
        };
        Ok(PairDecision {
            y_targ: p_targ.iter().map(|&p| binarize(p)).collect(),
            y_dest: p_dest.iter().map(|&p| binarize(p)).collect(),
            pair: (best / n, best % n),
            pair_score: scores[best],
            confident,
            forward_passes: self.passes() - before,
            pair_evaluations: scores.len() as u64,
            p_targ,
            p_dest,
        })
    }
}

fn random_region(rng: &mut ChaCha8Rng, d_f: usize) -> RegionFeature {
    let (w, h) = (640.0f32, 480.0f32);
    let x1 = rng.gen_range(0.0..w - 20.0f32).round();
    let y1 = rng.gen_range(0.0..h - 20.0f32).round();
    let x2 = rng.gen_range(x1 + 10.0..=w).round();
    let y2 = rng.gen_range(y1 + 10.0..=h).round();
    RegionFeature {
        visual: (0..d_f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        bbox: BBox {
            x1,
            y1,
            x2,
            y2,
            width: w,
            height: h,
        },
    }
}

/// A query with `m` and `n` random candidates and a random instruction
/// drawn from the vocabulary.
pub fn random_query(rng: &mut ChaCha8Rng, d_f: usize, context: usize, vocab: &Vocab, m: usize, n: usize) -> SceneQuery {
    let words = &vocab.tokens()[2.min(vocab.len())..];
    let instruction = if words.is_empty() {
        String::new()
    } else {
        let len = rng.gen_range(3..=10);
        (0..len)
            .map(|_| words[rng.gen_range(0..words.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut side = |k: usize| (0..k).map(|_| random_region(rng, d_f)).collect::<Vec<_>>();
    SceneQuery {
        instruction,
        targets: side(m),
        dests: side(n),
        target_context: side(context.div_ceil(2)),
        dest_context: side(context / 2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub factorized_passes: u64,
    pub brute_pairs: u64,
    pub factorized_ms_median: f64,
    pub brute_ms_median: f64,
    pub speedup: f64,
    pub repeats: usize,
    pub seed: u64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        (xs[k / 2 - 1] + xs[k / 2]) / 2.0
    }
}

/// Times factorized scoring against the brute-force oracle on a random
/// query. Counts come from the scorer's pass counter. The paired baseline
/// has no factorized path, so its factorized columns are zero.
pub fn benchmark(model: &Model<f32>, vocab: &Vocab, m: usize, n: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(ShefuError::Config("repeats must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_query(&mut rng, model.config.d_f, model.config.context_slots, vocab, m, n);
    let scorer = Scorer::new(model, vocab);
    let factorized = model.variant().is_factorized();
    let (mut fast, mut slow) = (Vec::new(), Vec::new());
    let (mut passes, mut pairs) = (0, 0);
    for _ in 0..repeats {
        if factorized {
            let t0 = Instant::now();
            let d = scorer.score_candidates(&q)?;
            fast.push(t0.elapsed().as_secs_f64() * 1e3);
            passes = d.forward_passes;
        }
        let t0 = Instant::now();
        let d = scorer.brute_force_pairs(&q)?;
        slow.push(t0.elapsed().as_secs_f64() * 1e3);
        pairs = d.pair_evaluations;
    }
    let f = if factorized { median(fast) } else { 0.0 };
    let b = median(slow);
    Ok(BenchReport {
        m,
        n,
        factorized_passes: passes,
        brute_pairs: pairs,
        factorized_ms_median: f,
        brute_ms_median: b,
        speedup: if f > 0.0 { b / f } else { 0.0 },
        repeats,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
        assert_eq!(argmax(&[0.5]), 0);
        assert_eq!(argmax(&[0.3, 0.3]), 0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
