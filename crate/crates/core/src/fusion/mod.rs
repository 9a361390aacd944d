//! Shallow-fusion evaluation: n-best rescoring with an LM interpolation
//! weight β, corpus WER, and the end-to-end domain-adaptation experiment
//! harness.
//!
//! First-pass fusion is approximated by rescoring the simulated ASR's n-best
//! lists: combined score = asr_score + β · lm_log_prob (LM term optionally
//! divided by hypothesis length). β = 0 reproduces the ASR-only choice
//! exactly.

mod experiment;
pub mod synth;

pub use experiment::{
    run_experiment, write_report, ConditionRow, Conditions, DataParams, EvalReport,
    ExperimentSpec, GeneratorParams, ModelDims, ReportCounts,
};
pub use synth::{Domain, DomainParams, NoiseParams};

use serde::{Deserialize, Serialize};

use crate::align::{edit_align, EditOp};
use crate::asrsim::NBestList;
use crate::corpus::WordSequence;
use crate::error::{Error, Result};
use crate::nnlm::NnlmModel;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FusionConfig {
    /// LM interpolation weight, >= 0.
    pub beta: f64,
    /// n-best size requested from the simulated ASR.
    pub n: usize,
    /// Divide the LM term by the hypothesis token count (words + `<eos>`).
    pub length_norm: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            beta: 0.5,
            n: 8,
            length_norm: false,
        }
    }
}

/// Total LM log-probability (including `<eos>`) of every hypothesis in the
/// list. Computing these once lets a β grid reuse them.
pub fn lm_log_probs(model: &NnlmModel, nbest: &NBestList) -> Vec<f64> {
    nbest
        .entries
        .iter()
        .map(|e| {
            let (nll, _) = model.sequence_nll(&e.hypothesis);
            -nll
        })
        .collect()
}

/// Index of the combined-score argmax; ties keep the better ASR rank.
pub fn fuse_with_scores(
    nbest: &NBestList,
    lm_scores: &[f64],
    beta: f64,
    length_norm: bool,
) -> Result<usize> {
    if nbest.entries.is_empty() {
        return Err(Error::EmptyNBest);
    }
    if nbest.entries.len() != lm_scores.len() {
        return Err(Error::CountMismatch(format!(
            "{} entries vs {} lm scores",
            nbest.entries.len(),
            lm_scores.len()
        )));
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (entry, &lm)) in nbest.entries.iter().zip(lm_scores).enumerate() {
        let norm = if length_norm {
            (entry.hypothesis.len() + 1) as f64
        } else {
            1.0
        };
        let combined = entry.asr_score + beta * lm / norm;
        if combined > best_score {
            best_score = combined;
            best = i;
        }
    }
    Ok(best)
}

/// Rescores one n-best list and returns the chosen hypothesis.
pub fn fuse_rescore(
    nbest: &NBestList,
    model: &NnlmModel,
    config: &FusionConfig,
) -> Result<WordSequence> {
    let lm = lm_log_probs(model, nbest);
    let idx = fuse_with_scores(nbest, &lm, config.beta, config.length_norm)?;
    Ok(nbest.entries[idx].hypothesis.clone())
}

/// Corpus word error rate: (substitutions + deletions + insertions) /
/// reference words, from the same alignment the annotator uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

pub fn evaluate_wer(
    references: &[WordSequence],
    hypotheses: &[WordSequence],
) -> Result<WerBreakdown> {
    if references.len() != hypotheses.len() {
        return Err(Error::CountMismatch(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut out = WerBreakdown::default();
    for (r, h) in references.iter().zip(hypotheses) {
        let script = edit_align(&r.ids, &h.ids);
        for op in &script.ops {
            match op {
                EditOp::Substitute { .. } => out.substitutions += 1,
                EditOp::Delete { .. } => out.deletions += 1,
                EditOp::Insert { .. } => out.insertions += 1,
                EditOp::Match { .. } => {}
            }
        }
        out.ref_words += r.len();
    }
    out.wer = (out.substitutions + out.deletions + out.insertions) as f64
        / out.ref_words.max(1) as f64;
    Ok(out)
}

/// (baseline - value) / baseline: positive when `value` improves on the
/// baseline.
pub fn relative_reduction(baseline: f64, value: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        (baseline - value) / baseline
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asrsim::NBestEntry;
    use crate::corpus::{SourceTag, Vocabulary};
    use crate::nnlm::{train_nnlm, TrainingConfig};
    use crate::predictor::ScoredSequence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(ids: &[u32]) -> WordSequence {
        WordSequence::real(ids.to_vec())
    }

    fn list(entries: Vec<(Vec<u32>, f64)>) -> NBestList {
        NBestList {
            entries: entries
                .into_iter()
                .map(|(ids, asr_score)| NBestEntry {
                    hypothesis: seq(&ids),
                    asr_score,
                })
                .collect(),
            truncated: false,
        }
    }

    fn toy_model() -> (Vocabulary, NnlmModel) {
        let words: Vec<String> = (0..8).map(|i| format!("f{i}")).collect();
        let vocab = Vocabulary::from_words(words.iter().cloned());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus: Vec<ScoredSequence> = (0..80)
            .map(|_| {
                let ids: Vec<u32> = (0..5).map(|_| rng.gen_range(3..vocab.len() as u32)).collect();
                ScoredSequence::unscored(WordSequence::real(ids))
            })
            .collect();
        let config = TrainingConfig {
            embed_dim: 8,
            hidden_dim: 12,
            epochs: 2,
            alpha: 1.0,
            seed: 9,
            ..Default::default()
        };
        let (model, _) = train_nnlm(&[(corpus, 1.0)], &vocab, config).unwrap();
        (vocab, model)
    }

    #[test]
    fn beta_zero_returns_top_asr_hypothesis() {
        let (_, model) = toy_model();
        let nbest = list(vec![(vec![3, 4], -1.0), (vec![5, 6], -2.0), (vec![7], -3.0)]);
        let chosen = fuse_rescore(
            &nbest,
            &model,
            &FusionConfig {
                beta: 0.0,
                n: 3,
                length_norm: false,
            },
        )
        .unwrap();
        assert_eq!(chosen.ids, vec![3, 4]);
    }

    #[test]
    fn huge_beta_follows_lm() {
        let (_, model) = toy_model();
        let nbest = list(vec![(vec![3, 4], -1.0), (vec![5, 6], -2.0)]);
        let lm = lm_log_probs(&model, &nbest);
        let lm_best = if lm[0] >= lm[1] { 0 } else { 1 };
        let idx = fuse_with_scores(&nbest, &lm, 1e6, false).unwrap();
        assert_eq!(idx, lm_best);
    }

    #[test]
    fn hand_computed_combined_scores() {
        let nbest = list(vec![(vec![3], -1.0), (vec![4], -1.5)]);
        // lm advantage of hypothesis 2 exceeds its asr deficit at beta = 1
        let lm = vec![-3.0, -2.0];
        assert_eq!(fuse_with_scores(&nbest, &lm, 1.0, false).unwrap(), 1);
        // at beta = 0.4 the deficit wins: -1 - 1.2 = -2.2 vs -1.5 - 0.8 = -2.3
        assert_eq!(fuse_with_scores(&nbest, &lm, 0.4, false).unwrap(), 0);
    }

    #[test]
    fn chosen_hypothesis_attains_max_combined_score() {
        let (_, model) = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let entries: Vec<(Vec<u32>, f64)> = (0..6)
                .map(|_| {
                    let ids: Vec<u32> =
                        (0..rng.gen_range(1..5)).map(|_| rng.gen_range(3..10)).collect();
                    (ids, -rng.gen::<f64>() * 5.0)
                })
                .collect();
            let nbest = list(entries);
            let lm = lm_log_probs(&model, &nbest);
            for &(beta, ln) in &[(0.0, false), (0.5, false), (1.0, true), (2.0, true)] {
                let idx = fuse_with_scores(&nbest, &lm, beta, ln).unwrap();
                let combined = |i: usize| {
                    let norm = if ln {
                        (nbest.entries[i].hypothesis.len() + 1) as f64
                    } else {
                        1.0
                    };
                    nbest.entries[i].asr_score + beta * lm[i] / norm
                };
                let best = combined(idx);
                for i in 0..nbest.entries.len() {
                    assert!(combined(i) <= best + 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_list_is_error() {
        let (_, model) = toy_model();
        let nbest = NBestList {
            entries: vec![],
            truncated: false,
        };
        assert!(matches!(
            fuse_rescore(&nbest, &model, &FusionConfig::default()),
            Err(Error::EmptyNBest)
        ));
    }

    #[test]
    fn wer_identical_is_zero() {
        let refs = vec![seq(&[3, 4, 5]), seq(&[6])];
        let wer = evaluate_wer(&refs, &refs.clone()).unwrap();
        assert_eq!(wer.wer, 0.0);
        assert_eq!(wer.ref_words, 4);
    }

    #[test]
    fn wer_single_substitution_over_three_words() {
        let refs = vec![seq(&[3, 4, 5])];
        let hyps = vec![seq(&[3, 9, 5])];
        let wer = evaluate_wer(&refs, &hyps).unwrap();
        assert_eq!(wer.substitutions, 1);
        assert!((wer.wer - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn wer_matches_edit_script_identity() {
        // wer == 1 - matches/N + I/N, recomputed from the scripts
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut refs = Vec::new();
        let mut hyps = Vec::new();
        for _ in 0..100 {
            let r: Vec<u32> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(3..8)).collect();
            let h: Vec<u32> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(3..8)).collect();
            refs.push(seq(&r));
            hyps.push(seq(&h));
        }
        let wer = evaluate_wer(&refs, &hyps).unwrap();
        let mut matches = 0usize;
        let mut inserts = 0usize;
        let mut n = 0usize;
        for (r, h) in refs.iter().zip(&hyps) {
            let script = edit_align(&r.ids, &h.ids);
            matches += script
                .ops
                .iter()
                .filter(|op| matches!(op, EditOp::Match { .. }))
                .count();
            inserts += script
                .ops
                .iter()
                .filter(|op| matches!(op, EditOp::Insert { .. }))
                .count();
            n += r.len();
        }
        let identity = 1.0 - matches as f64 / n as f64 + inserts as f64 / n as f64;
        assert!((wer.wer - identity).abs() < 1e-12);
    }

    #[test]
    fn wer_count_mismatch_is_error() {
        let refs = vec![seq(&[3])];
        assert!(matches!(
            evaluate_wer(&refs, &[]),
            Err(Error::CountMismatch(_))
        ));
    }

    #[test]
    fn relative_reduction_arithmetic() {
        assert!((relative_reduction(0.25, 0.20) - 0.2).abs() < 1e-12);
        assert_eq!(relative_reduction(0.0, 0.0), 0.0);
        assert!(relative_reduction(0.2, 0.25) < 0.0);
    }
}
