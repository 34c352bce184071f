//! Retrieval head, contrastive objective, and ranking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const PROJ: &str = "head.proj";
pub const LOG_TAU: &str = "head.log_tau";

/// Initial log inverse temperature of the contrastive loss.
pub const DEFAULT_LOG_TAU: f64 = 2.0;

/// Default inverse temperature of dual-softmax re-scoring.
pub const DEFAULT_DSL_TEMPERATURE: f64 = 100.0;

/// Recall cut-offs reported by [`evaluate`].
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Mean-pools frame CLS features (`T×D_v`) over time, projects to the text
/// space and L2-normalizes. Returns `1×D_t`.
pub fn video_embedding(tape: &mut Tape, frame_cls: Var, proj: Var) -> Result<Var> {
    let pooled = crate::asa::pool_video(tape, frame_cls)?;
    let projected = tape.matmul(pooled, proj)?;
    tape.l2_normalize(projected)
}

/// L2-normalized sentence feature.
pub fn text_embedding(tape: &mut Tape, sentence: Var) -> Result<Var> {
    tape.l2_normalize(sentence)
}

/// `videos·textsᵀ`, shape `V×Q`.
pub fn similarity(tape: &mut Tape, videos: Var, texts: Var) -> Result<Var> {
    let tt = tape.transpose(texts)?;
    tape.matmul(videos, tt)
}

/// Symmetric InfoNCE over a square similarity matrix whose diagonal holds
/// the matching pairs. The logit scale is `exp(log_tau)`.
pub fn contrastive_loss(tape: &mut Tape, sim: Var, log_tau: Var) -> Result<Var> {
    let shape = tape.shape(sim).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::Contract(format!(
            "contrastive loss needs a non-empty square matrix, got {shape:?}"
        )));
    }
    let n = shape[0];
    let tau = tape.exp(log_tau);
    let logits = tape.mul(sim, tau)?;
    let rows = tape.log_softmax(logits, 1)?;
    let cols = tape.log_softmax(logits, 0)?;
    let eye = tape.constant(Tensor::eye(n));
    let both = tape.add(rows, cols)?;
    let diag = tape.mul(both, eye)?;
    let total = tape.sum(diag);
    Ok(tape.scale(total, -0.5 / n as f64))
}

/// Which side issues queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

/// `V×Q` scores with the ground-truth text of each video.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Tensor,
    /// `gt[v]` is the text matching video `v`.
    pub gt: Vec<usize>,
}

impl SimilarityMatrix {
    /// Square scores with diagonal ground truth.
    pub fn diagonal(scores: Tensor) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Contract(format!("expected a square matrix, got {s:?}")));
        }
        let gt = (0..s[0]).collect();
        Ok(Self { scores, gt })
    }

    pub fn new(scores: Tensor, gt: Vec<usize>) -> Result<Self> {
        let s = scores.shape();
        if s.len() != 2 || s[0] != s[1] || gt.len() != s[0] {
            return Err(Error::Contract(format!("pairing of {} for matrix {s:?}", gt.len())));
        }
        let mut seen = vec![false; gt.len()];
        for &g in &gt {
            if g >= gt.len() || std::mem::replace(&mut seen[g], true) {
                return Err(Error::Contract("ground-truth pairing is not a bijection".into()));
            }
        }
        Ok(Self { scores, gt })
    }

    /// 1-based rank of the ground truth for each query. Items tied with the
    /// ground truth count against it.
    pub fn ranks(&self, direction: Direction) -> Vec<usize> {
        let n = self.gt.len();
        let s = |v: usize, q: usize| self.scores.get(&[v, q]);
        match direction {
            Direction::VideoToText => (0..n)
                .map(|v| {
                    let target = s(v, self.gt[v]);
                    1 + (0..n).filter(|&q| q != self.gt[v] && s(v, q) >= target).count()
                })
                .collect(),
            Direction::TextToVideo => {
                let mut video_of = vec![0; n];
                for (v, &q) in self.gt.iter().enumerate() {
                    video_of[q] = v;
                }
                (0..n)
                    .map(|q| {
                        let gv = video_of[q];
                        let target = s(gv, q);
                        1 + (0..n).filter(|&v| v != gv && s(v, q) >= target).count()
                    })
                    .collect()
            }
        }
    }
}

/// Fraction of queries whose ground truth ranks within the top `k`.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, direction: Direction) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("recall cut-off must be at least 1".into()));
    }
    let ranks = sim.ranks(direction);
    if ranks.is_empty() {
        return Ok(0.0);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// `(median rank, mean rank)`; an even count averages the middle pair.
pub fn rank_stats(ranks: &[usize]) -> (f64, f64) {
    if ranks.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2] as f64
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0
    };
    let mean = sorted.iter().sum::<usize>() as f64 / m as f64;
    (median, mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    /// Recall at each cut-off, as a fraction.
    pub r_at: BTreeMap<usize, f64>,
    pub mdr: f64,
    pub mnr: f64,
}

impl MetricsReport {
    pub fn r1(&self) -> f64 {
        self.r_at[&1]
    }
}

pub fn evaluate(sim: &SimilarityMatrix, direction: Direction) -> MetricsReport {
    let ranks = sim.ranks(direction);
    let n = ranks.len().max(1) as f64;
    let r_at = RECALL_KS
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let (mdr, mnr) = rank_stats(&ranks);
    MetricsReport {
        direction,
        r_at,
        mdr,
        mnr,
    }
}

/// Dual-softmax re-scoring: `softmax_rows(τ·s) ⊙ softmax_cols(τ·s)`.
pub fn dsl(scores: &Tensor, temperature: f64) -> Result<Tensor> {
    let (r, c) = match scores.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::dim("dsl", s, &[0, 0])),
    };
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let scaled = tape.scale(s, temperature);
    let rows = tape.softmax(scaled, 1)?;
    let cols = tape.softmax(scaled, 0)?;
    let out = tape.mul(rows, cols)?;
    debug_assert_eq!(tape.shape(out), [r, c]);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{fd_check, ParamStore};

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::diagonal(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn video_embedding_matches_oracle() {
        let f = Tensor::from_fn(&[3, 2], |i| (i as f64 + 1.0).ln());
        let p = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.0, 1.5]).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let pv = tape.constant(p.clone());
        let e = video_embedding(&mut tape, fv, pv).unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|j| (0..3).map(|t| f.get(&[t, j])).sum::<f64>() / 3.0)
            .collect();
        let proj: Vec<f64> = (0..3)
            .map(|k| mean[0] * p.get(&[0, k]) + mean[1] * p.get(&[1, k]))
            .collect();
        let norm = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (k, v) in proj.iter().enumerate() {
            assert!((tape.value(e).data()[k] - v / norm).abs() < 1e-14);
        }
        let n2: f64 = tape.value(e).data().iter().map(|v| v * v).sum();
        assert!((n2.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_closed_forms() {
        let run = |s: Tensor, log_tau: f64| {
            let mut tape = Tape::new();
            let sv = tape.constant(s);
            let t = tape.constant(Tensor::scalar(log_tau));
            let l = contrastive_loss(&mut tape, sv, t).unwrap();
            tape.item(l)
        };
        let e = std::f64::consts::E;
        let l = run(Tensor::eye(2), 0.0);
        assert!((l - -(e / (e + 1.0)).ln()).abs() < 1e-14);
        assert!((run(Tensor::full(&[4, 4], 0.3), 1.0) - 4f64.ln()).abs() < 1e-12);
        assert!(run(Tensor::eye(3), 5.0_f64.ln() * 20.0) < 1e-12);

        let mut tape = Tape::new();
        let bad = tape.constant(Tensor::zeros(&[2, 3]));
        let t = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(contrastive_loss(&mut tape, bad, t), Err(Error::Contract(_))));
    }

    #[test]
    fn contrastive_loss_gradients() {
        let mut store = ParamStore::new();
        store
            .insert("s", Tensor::from_fn(&[3, 3], |i| (i as f64 * 1.3).sin()), true)
            .unwrap();
        store.insert(LOG_TAU, Tensor::scalar(0.7), true).unwrap();
        let err = fd_check(
            |tape, st| {
                let s = tape.param(st, "s")?;
                let t = tape.param(st, LOG_TAU)?;
                contrastive_loss(tape, s, t)
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn recall_and_ranks() {
        let perfect = sim(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            assert_eq!(recall_at_k(&perfect, 1, d).unwrap(), 1.0);
            let r = evaluate(&perfect, d);
            assert_eq!((r.mdr, r.mnr), (1.0, 1.0));
        }
        let anti = sim(&[vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
        assert!((recall_at_k(&anti, 1, Direction::VideoToText).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(recall_at_k(&anti, 0, Direction::VideoToText).is_err());

        let ties = sim(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        assert_eq!(ties.ranks(Direction::VideoToText), vec![2, 1]);
        assert_eq!(ties.ranks(Direction::TextToVideo), vec![1, 2]);
        assert_eq!(rank_stats(&[1, 3]), (2.0, 2.0));
    }

    #[test]
    fn general_pairing() {
        let s = SimilarityMatrix::new(
            Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            vec![1, 0],
        )
        .unwrap();
        assert_eq!(s.ranks(Direction::TextToVideo), vec![1, 1]);
        assert!(SimilarityMatrix::new(Tensor::eye(2), vec![0, 0]).is_err());
    }

    #[test]
    fn dsl_cases() {
        let one = dsl(&Tensor::scalar(0.4).reshape(&[1, 1]).unwrap(), 100.0).unwrap();
        assert!((one.data()[0] - 1.0).abs() < 1e-15);

        let s = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.6, 0.9]]).unwrap();
        let raw = SimilarityMatrix::diagonal(s.clone()).unwrap();
        let fixed = SimilarityMatrix::diagonal(dsl(&s, DEFAULT_DSL_TEMPERATURE).unwrap()).unwrap();
        assert_eq!(recall_at_k(&raw, 1, Direction::TextToVideo).unwrap(), 0.5);
        assert_eq!(recall_at_k(&fixed, 1, Direction::TextToVideo).unwrap(), 1.0);
    }

    #[test]
    fn report_serializes() {
        let r = evaluate(&sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]), Direction::TextToVideo);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"text-to-video\""));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
