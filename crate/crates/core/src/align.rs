//! Levenshtein alignment of an ASR hypothesis against its reference and
//! per-word binary error annotation.
//!
//! Annotation rules: a substituted or deleted reference word is labeled as an
//! error; an insertion labels the next reference word consumed after it (or
//! the `<eos>` slot when nothing follows). Deletion and insertion tagging are
//! independently switchable so corpora whose deletion/insertion statistics do
//! not transfer across domains can skip them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, SourceTag, TokenizedSequence, Vocabulary, WordSequence};
use crate::error::{Error, Result};

/// One step of an edit script. Indices refer to the original reference and
/// hypothesis sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { ref_i: usize, hyp_j: usize },
    Substitute { ref_i: usize, hyp_j: usize },
    Delete { ref_i: usize },
    Insert { hyp_j: usize },
}

/// A cost-minimal alignment between a reference and a hypothesis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    /// Number of non-match operations (the Levenshtein distance).
    pub fn cost(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| !matches!(op, EditOp::Match { .. }))
            .count()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut subs = 0;
        let mut dels = 0;
        let mut inss = 0;
        for op in &self.ops {
            match op {
                EditOp::Substitute { .. } => subs += 1,
                EditOp::Delete { .. } => dels += 1,
                EditOp::Insert { .. } => inss += 1,
                EditOp::Match { .. } => {}
            }
        }
        (subs, dels, inss)
    }

    /// Checks that ref indices and hyp indices each appear exactly once, in
    /// order, covering `0..ref_len` and `0..hyp_len`.
    pub fn validate(&self, ref_len: usize, hyp_len: usize) -> Result<()> {
        let mut next_ref = 0usize;
        let mut next_hyp = 0usize;
        for op in &self.ops {
            match *op {
                EditOp::Match { ref_i, hyp_j } | EditOp::Substitute { ref_i, hyp_j } => {
                    if ref_i != next_ref || hyp_j != next_hyp {
                        return Err(Error::InvalidScript(format!(
                            "expected ref {next_ref} / hyp {next_hyp}, got ref {ref_i} / hyp {hyp_j}"
                        )));
                    }
                    next_ref += 1;
                    next_hyp += 1;
                }
                EditOp::Delete { ref_i } => {
                    if ref_i != next_ref {
                        return Err(Error::InvalidScript(format!(
                            "expected ref {next_ref}, got ref {ref_i}"
                        )));
                    }
                    next_ref += 1;
                }
                EditOp::Insert { hyp_j } => {
                    if hyp_j != next_hyp {
                        return Err(Error::InvalidScript(format!(
                            "expected hyp {next_hyp}, got hyp {hyp_j}"
                        )));
                    }
                    next_hyp += 1;
                }
            }
        }
        if next_ref != ref_len || next_hyp != hyp_len {
            return Err(Error::InvalidScript(format!(
                "script covers {next_ref}/{ref_len} reference and {next_hyp}/{hyp_len} hypothesis words"
            )));
        }
        Ok(())
    }
}

/// Aligns hypothesis to reference with minimal edit cost.
///
/// When several minimal alignments exist the backtrace prefers, at each step
/// from the end, Match > Substitute > Delete > Insert, making the returned
/// script deterministic.
pub fn edit_align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditScript {
    let r = reference.len();
    let h = hypothesis.len();
    let width = h + 1;
    // dp[i*width + j] = min edits aligning reference[..i] with hypothesis[..j]
    let mut dp = vec![0u32; (r + 1) * width];
    for i in 0..=r {
        dp[i * width] = i as u32;
    }
    for j in 0..=h {
        dp[j] = j as u32;
    }
    for i in 1..=r {
        for j in 1..=h {
            let diag = dp[(i - 1) * width + j - 1]
                + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dp[(i - 1) * width + j] + 1;
            let ins = dp[i * width + j - 1] + 1;
            dp[i * width + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(r.max(h));
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        let cur = dp[i * width + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && dp[(i - 1) * width + j - 1] == cur
        {
            ops.push(EditOp::Match {
                ref_i: i - 1,
                hyp_j: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && dp[(i - 1) * width + j - 1] + 1 == cur
            && reference[i - 1] != hypothesis[j - 1]
        {
            ops.push(EditOp::Substitute {
                ref_i: i - 1,
                hyp_j: j - 1,
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[(i - 1) * width + j] + 1 == cur {
            ops.push(EditOp::Delete { ref_i: i - 1 });
            i -= 1;
        } else {
            debug_assert!(j > 0 && dp[i * width + j - 1] + 1 == cur);
            ops.push(EditOp::Insert { hyp_j: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    EditScript { ops }
}

/// Which error kinds contribute labels. Substitutions always do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnnotateFlags {
    pub deletions: bool,
    pub insertions: bool,
}

impl Default for AnnotateFlags {
    fn default() -> Self {
        AnnotateFlags {
            deletions: true,
            insertions: true,
        }
    }
}

/// A (reference, hypothesis) pair with binary per-word error labels. The
/// label vector has one extra trailing slot for `<eos>` (hit when an
/// insertion occurs after the last reference word).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedPair {
    pub reference: WordSequence,
    pub hypothesis: WordSequence,
    labels: Vec<bool>,
}

impl AnnotatedPair {
    /// Labels for the reference words only (length `|reference|`).
    pub fn word_labels(&self) -> &[bool] {
        &self.labels[..self.labels.len() - 1]
    }

    pub fn eos_label(&self) -> bool {
        *self.labels.last().expect("labels include eos slot")
    }

    /// All labels including the final `<eos>` slot (length `|reference| + 1`).
    pub fn labels_with_eos(&self) -> &[bool] {
        &self.labels
    }

    /// Copies each word's label to all its subword positions; the returned
    /// vector has one label per token plus the `<eos>` slot at the end.
    pub fn token_labels(&self, tokens: &TokenizedSequence) -> Result<Vec<bool>> {
        if tokens.word_spans.len() != self.reference.len() {
            return Err(Error::SpanMismatch(format!(
                "{} spans for {} reference words",
                tokens.word_spans.len(),
                self.reference.len()
            )));
        }
        let mut out = vec![false; tokens.tokens.len() + 1];
        for (w, &(start, end)) in tokens.word_spans.iter().enumerate() {
            for slot in &mut out[start..end] {
                *slot = self.labels[w];
            }
        }
        *out.last_mut().unwrap() = self.eos_label();
        Ok(out)
    }

    /// Builds a pair directly from labels (length `|reference| + 1`).
    pub fn from_labels(
        reference: WordSequence,
        hypothesis: WordSequence,
        labels: Vec<bool>,
    ) -> Result<Self> {
        if labels.len() != reference.len() + 1 {
            return Err(Error::CountMismatch(format!(
                "{} labels for {} reference words (+eos)",
                labels.len(),
                reference.len()
            )));
        }
        Ok(AnnotatedPair {
            reference,
            hypothesis,
            labels,
        })
    }
}

/// Applies the annotation rules to an edit script.
pub fn annotate(
    script: &EditScript,
    reference: &WordSequence,
    hypothesis: &WordSequence,
    flags: AnnotateFlags,
) -> Result<AnnotatedPair> {
    script.validate(reference.len(), hypothesis.len())?;
    let mut labels = vec![false; reference.len() + 1];
    let mut pending_insertion = false;
    for op in &script.ops {
        match *op {
            EditOp::Match { ref_i, .. } => {
                if pending_insertion {
                    labels[ref_i] = true;
                    pending_insertion = false;
                }
            }
            EditOp::Substitute { ref_i, .. } => {
                labels[ref_i] = true;
                pending_insertion = false;
            }
            EditOp::Delete { ref_i } => {
                if flags.deletions {
                    labels[ref_i] = true;
                }
                if pending_insertion {
                    labels[ref_i] = true;
                    pending_insertion = false;
                }
            }
            EditOp::Insert { .. } => {
                if flags.insertions {
                    pending_insertion = true;
                }
            }
        }
    }
    if pending_insertion {
        let eos = labels.len() - 1;
        labels[eos] = true;
    }
    Ok(AnnotatedPair {
        reference: reference.clone(),
        hypothesis: hypothesis.clone(),
        labels,
    })
}

/// Aligns and annotates each pair, preserving order. Errors carry the
/// offending item index.
pub fn annotate_corpus(
    pairs: &[(WordSequence, WordSequence)],
    flags: AnnotateFlags,
) -> Result<Vec<AnnotatedPair>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (r, h))| {
            let script = edit_align(&r.ids, &h.ids);
            annotate(&script, r, h, flags).map_err(Error::at_item(i))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct AnnotatedLine {
    #[serde(rename = "ref")]
    reference: String,
    hyp: String,
    word_labels: Vec<u8>,
    eos_label: u8,
}

/// A surface-form annotated record, the JSONL interchange unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotatedRecord {
    pub reference: Sentence,
    pub hypothesis: Sentence,
    pub word_labels: Vec<bool>,
    pub eos_label: bool,
}

impl AnnotatedRecord {
    pub fn from_pair(pair: &AnnotatedPair, vocab: &Vocabulary) -> Self {
        AnnotatedRecord {
            reference: vocab.decode_to_sentence(&pair.reference),
            hypothesis: vocab.decode_to_sentence(&pair.hypothesis),
            word_labels: pair.word_labels().to_vec(),
            eos_label: pair.eos_label(),
        }
    }

    pub fn bind(&self, vocab: &Vocabulary) -> Result<AnnotatedPair> {
        let mut labels = self.word_labels.clone();
        labels.push(self.eos_label);
        AnnotatedPair::from_labels(
            vocab.encode(&self.reference.words, SourceTag::Real),
            vocab.encode(&self.hypothesis.words, SourceTag::Real),
            labels,
        )
    }
}

/// Writes annotated pairs as JSONL:
/// `{"ref": "...", "hyp": "...", "word_labels": [0,1,...], "eos_label": 0|1}`.
pub fn write_annotated_jsonl(records: &[AnnotatedRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = AnnotatedLine {
            reference: rec.reference.text(),
            hyp: rec.hypothesis.text(),
            word_labels: rec.word_labels.iter().map(|&b| b as u8).collect(),
            eos_label: rec.eos_label as u8,
        };
        serde_json::to_writer(&mut w, &line).expect("annotated line serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_annotated_jsonl(path: &Path) -> Result<Vec<AnnotatedRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotatedLine = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("malformed annotated record ({e})"),
        })?;
        let reference = Sentence::from_text(&parsed.reference, SourceTag::Real);
        if parsed.word_labels.len() != reference.words.len() {
            return Err(Error::Jsonl {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!(
                    "{} labels for {} words",
                    parsed.word_labels.len(),
                    reference.words.len()
                ),
            });
        }
        out.push(AnnotatedRecord {
            reference,
            hypothesis: Sentence::from_text(&parsed.hyp, SourceTag::Real),
            word_labels: parsed.word_labels.iter().map(|&b| b != 0).collect(),
            eos_label: parsed.eos_label != 0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceTag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(ids: &[u32]) -> WordSequence {
        WordSequence::new(ids.to_vec(), SourceTag::Real)
    }

    fn align_pair(r: &[u32], h: &[u32], flags: AnnotateFlags) -> AnnotatedPair {
        let rs = seq(r);
        let hs = seq(h);
        let script = edit_align(&rs.ids, &hs.ids);
        annotate(&script, &rs, &hs, flags).unwrap()
    }

    /// Independent quadratic edit-distance oracle (cost only).
    fn edit_distance_oracle(a: &[u32], b: &[u32]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        let mut cur = vec![0usize; b.len() + 1];
        for i in 1..=a.len() {
            cur[0] = i;
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                cur[j] = (prev[j - 1] + cost).min(prev[j] + 1).min(cur[j - 1] + 1);
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        prev[b.len()]
    }

    #[test]
    fn single_substitution() {
        let script = edit_align(&[1u32, 2, 3], &[1u32, 9, 3]);
        assert_eq!(script.cost(), 1);
        assert_eq!(
            script.ops,
            vec![
                EditOp::Match { ref_i: 0, hyp_j: 0 },
                EditOp::Substitute { ref_i: 1, hyp_j: 1 },
                EditOp::Match { ref_i: 2, hyp_j: 2 },
            ]
        );
    }

    #[test]
    fn single_deletion() {
        let script = edit_align(&[1u32, 2, 3], &[1u32, 3]);
        assert_eq!(
            script.ops,
            vec![
                EditOp::Match { ref_i: 0, hyp_j: 0 },
                EditOp::Delete { ref_i: 1 },
                EditOp::Match { ref_i: 2, hyp_j: 1 },
            ]
        );
    }

    #[test]
    fn empty_sequences_align() {
        assert_eq!(edit_align::<u32>(&[], &[]).ops, vec![]);
        assert_eq!(edit_align(&[], &[5u32]).cost(), 1);
        assert_eq!(edit_align(&[5u32], &[]).cost(), 1);
    }

    #[test]
    fn random_pairs_match_cost_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let rl = rng.gen_range(0..=8);
            let hl = rng.gen_range(0..=8);
            let r: Vec<u32> = (0..rl).map(|_| rng.gen_range(0..10)).collect();
            let h: Vec<u32> = (0..hl).map(|_| rng.gen_range(0..10)).collect();
            let script = edit_align(&r, &h);
            script.validate(r.len(), h.len()).unwrap();
            assert_eq!(script.cost(), edit_distance_oracle(&r, &h));
        }
    }

    #[test]
    fn substitution_labels_victim() {
        let pair = align_pair(&[1, 2, 3], &[1, 9, 3], AnnotateFlags::default());
        assert_eq!(pair.word_labels(), &[false, true, false]);
        assert!(!pair.eos_label());
    }

    #[test]
    fn insertion_labels_following_word() {
        let pair = align_pair(&[1, 2], &[1, 9, 2], AnnotateFlags::default());
        assert_eq!(pair.word_labels(), &[false, true]);
        assert!(!pair.eos_label());
    }

    #[test]
    fn trailing_insertion_labels_eos() {
        let pair = align_pair(&[1, 2], &[1, 2, 9], AnnotateFlags::default());
        assert_eq!(pair.word_labels(), &[false, false]);
        assert!(pair.eos_label());
    }

    #[test]
    fn deletion_tagging_is_optional() {
        let flags = AnnotateFlags {
            deletions: false,
            insertions: true,
        };
        let pair = align_pair(&[1, 2, 3], &[1, 3], flags);
        assert_eq!(pair.word_labels(), &[false, false, false]);
        assert!(!pair.eos_label());
    }

    #[test]
    fn insertion_tagging_is_optional() {
        let flags = AnnotateFlags {
            deletions: true,
            insertions: false,
        };
        let pair = align_pair(&[1, 2], &[1, 9, 2], flags);
        assert_eq!(pair.word_labels(), &[false, false]);
        let pair = align_pair(&[1, 2], &[1, 2, 9], flags);
        assert!(!pair.eos_label());
    }

    #[test]
    fn consecutive_insertions_collapse() {
        let pair = align_pair(&[1, 2], &[1, 8, 9, 2], AnnotateFlags::default());
        assert_eq!(pair.word_labels(), &[false, true]);
    }

    #[test]
    fn identity_gives_zero_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let len = rng.gen_range(0..10);
            let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..6)).collect();
            let pair = align_pair(&ids, &ids, AnnotateFlags::default());
            assert!(pair.labels_with_eos().iter().all(|&l| !l));
        }
    }

    #[test]
    fn label_count_bounded_by_script_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let rl = rng.gen_range(0..=7);
            let hl = rng.gen_range(0..=7);
            let r: Vec<u32> = (0..rl).map(|_| rng.gen_range(0..5)).collect();
            let h: Vec<u32> = (0..hl).map(|_| rng.gen_range(0..5)).collect();
            let pair = align_pair(&r, &h, AnnotateFlags::default());
            let rs = seq(&r);
            let script = edit_align(&rs.ids, &h);
            let ones = pair.labels_with_eos().iter().filter(|&&l| l).count();
            assert!(ones <= script.cost());
        }
    }

    #[test]
    fn token_labels_copy_per_span() {
        let vocab = Vocabulary::from_words(vec!["hello".into(), "cat".into()]);
        let sv = crate::corpus::SubwordVocabulary::new(&vocab, 3).unwrap();
        let reference = vocab.encode(&["hello", "cat"], SourceTag::Real);
        let hyp = vocab.encode(&["hello", "hello"], SourceTag::Real);
        let script = edit_align(&reference.ids, &hyp.ids);
        let pair = annotate(&script, &reference, &hyp, AnnotateFlags::default()).unwrap();
        let toks = sv.tokenize(&reference);
        let tl = pair.token_labels(&toks).unwrap();
        // hello -> 2 chunks unlabeled, cat -> 1 chunk labeled, eos unlabeled
        assert_eq!(tl, vec![false, false, true, false]);
    }

    #[test]
    fn annotate_rejects_mismatched_script() {
        let script = edit_align(&[1u32, 2], &[1u32, 2]);
        let r = seq(&[1, 2, 3]);
        let h = seq(&[1, 2]);
        assert!(matches!(
            annotate(&script, &r, &h, AnnotateFlags::default()),
            Err(Error::InvalidScript(_))
        ));
    }

    #[test]
    fn annotate_corpus_preserves_order_and_reports_index() {
        let pairs = vec![
            (seq(&[1, 2]), seq(&[1, 2])),
            (seq(&[3]), seq(&[4])),
        ];
        let out = annotate_corpus(&pairs, AnnotateFlags::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].labels_with_eos().iter().all(|&l| !l));
        assert_eq!(out[1].word_labels(), &[true]);
        assert!(annotate_corpus(&[], AnnotateFlags::default()).unwrap().is_empty());
    }

    #[test]
    fn annotated_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let vocab = Vocabulary::from_words(vec!["a".into(), "b".into(), "x".into()]);
        let pairs = vec![(
            vocab.encode(&["a", "b"], SourceTag::Real),
            vocab.encode(&["a", "x"], SourceTag::Real),
        )];
        let annotated = annotate_corpus(&pairs, AnnotateFlags::default()).unwrap();
        let records: Vec<AnnotatedRecord> = annotated
            .iter()
            .map(|p| AnnotatedRecord::from_pair(p, &vocab))
            .collect();
        write_annotated_jsonl(&records, &path).unwrap();
        let back = read_annotated_jsonl(&path).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[0].bind(&vocab).unwrap(), annotated[0]);
    }
}
