//! Noisy-channel ASR simulator with a fully known error model.
//!
//! Each reference word is independently deleted, substituted (from a per-word
//! confusion distribution), or copied; after each reference position at most
//! one word may be inserted. Because every parameter is known, the
//! per-position probability of mis-recognition has an exact closed form for
//! substitution/deletion channels, and the channel probability of any
//! hypothesis can be computed exactly by dynamic programming — which is what
//! makes the downstream fallibility machinery testable against a ground
//! truth.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{annotate, edit_align, AnnotateFlags};
use crate::corpus::{SourceTag, Vocabulary, WordId, WordSequence};
use crate::error::{Error, Result};

const DIST_SUM_TOL: f64 = 1e-9;

/// Per-word channel parameters. The remaining mass `1 - rho - del` is the
/// probability of emitting the word unchanged.
#[derive(Clone, Debug, Default)]
pub struct WordParams {
    pub rho: f64,
    pub del: f64,
    pub confusion: Vec<(WordId, f64)>,
}

/// The simulated ASR's error model, bound to a vocabulary.
#[derive(Clone, Debug)]
pub struct ChannelModel {
    per_word: Vec<WordParams>,
    ins_prob: f64,
    ins_dist: Vec<(WordId, f64)>,
    context_trigger: Option<WordId>,
    seed: u64,
}

impl ChannelModel {
    pub fn new(
        per_word: Vec<WordParams>,
        ins_prob: f64,
        ins_dist: Vec<(WordId, f64)>,
        context_trigger: Option<WordId>,
        seed: u64,
    ) -> Result<Self> {
        let model = ChannelModel {
            per_word,
            ins_prob,
            ins_dist,
            context_trigger,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    /// A channel that never corrupts anything.
    pub fn noiseless(vocab_len: usize, seed: u64) -> Self {
        ChannelModel {
            per_word: vec![WordParams::default(); vocab_len],
            ins_prob: 0.0,
            ins_dist: Vec::new(),
            context_trigger: None,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn has_insertions(&self) -> bool {
        self.ins_prob > 0.0
    }

    pub fn vocab_len(&self) -> usize {
        self.per_word.len()
    }

    fn validate(&self) -> Result<()> {
        let check_prob = |p: f64, what: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::Channel(format!("{what} = {p} outside [0,1]")));
            }
            Ok(())
        };
        for (id, wp) in self.per_word.iter().enumerate() {
            check_prob(wp.rho, &format!("rho of word {id}"))?;
            check_prob(wp.del, &format!("del of word {id}"))?;
            let rho_max = if self.context_trigger.is_some() {
                2.0 * wp.rho
            } else {
                wp.rho
            };
            if rho_max + wp.del > 1.0 + DIST_SUM_TOL {
                return Err(Error::Channel(format!(
                    "word {id}: rho + del exceeds 1 (context doubling included)"
                )));
            }
            if wp.rho > 0.0 {
                let sum: f64 = wp.confusion.iter().map(|(_, p)| p).sum();
                if (sum - 1.0).abs() > DIST_SUM_TOL {
                    return Err(Error::Channel(format!(
                        "word {id}: confusion distribution sums to {sum}"
                    )));
                }
                for &(target, p) in &wp.confusion {
                    check_prob(p, &format!("confusion mass of word {id}"))?;
                    if target as usize == id {
                        return Err(Error::Channel(format!(
                            "word {id}: confusion target equals the word itself"
                        )));
                    }
                    if target as usize >= self.per_word.len() {
                        return Err(Error::Channel(format!(
                            "word {id}: confusion target {target} outside vocabulary"
                        )));
                    }
                }
            }
        }
        check_prob(self.ins_prob, "ins_prob")?;
        if self.ins_prob > 0.0 {
            let sum: f64 = self.ins_dist.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > DIST_SUM_TOL {
                return Err(Error::Channel(format!(
                    "insertion distribution sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Effective substitution probability at position `t`: doubled when the
    /// preceding reference word is the context trigger.
    pub fn rho_at(&self, reference: &[WordId], t: usize) -> f64 {
        let base = self.per_word[reference[t] as usize].rho;
        match self.context_trigger {
            Some(trigger) if t > 0 && reference[t - 1] == trigger => 2.0 * base,
            _ => base,
        }
    }

    fn del_of(&self, word: WordId) -> f64 {
        self.per_word[word as usize].del
    }

    /// Samples one corruption of the reference. Deterministic given the RNG
    /// state.
    pub fn corrupt(&self, reference: &WordSequence, rng: &mut ChaCha8Rng) -> WordSequence {
        let mut out = Vec::with_capacity(reference.len() + 2);
        for t in 0..reference.len() {
            let word = reference.ids[t];
            let rho = self.rho_at(&reference.ids, t);
            let del = self.del_of(word);
            let u: f64 = rng.gen();
            if u < del {
                // deleted
            } else if u < del + rho {
                out.push(sample_discrete(
                    &self.per_word[word as usize].confusion,
                    rng,
                ));
            } else {
                out.push(word);
            }
            if self.ins_prob > 0.0 {
                let v: f64 = rng.gen();
                if v < self.ins_prob {
                    out.push(sample_discrete(&self.ins_dist, rng));
                }
            }
        }
        WordSequence::new(out, SourceTag::Real)
    }

    /// Exact probability that position `t` is mis-recognized, i.e. one minus
    /// the probability of a correct emission. Only defined for channels
    /// without insertions (insertions shift labels through alignment, which
    /// the closed form does not capture).
    pub fn exact_fallibility(&self, reference: &WordSequence, t: usize) -> Result<f64> {
        if t >= reference.len() {
            return Err(Error::PositionOutOfRange {
                pos: t,
                len: reference.len(),
            });
        }
        if self.has_insertions() {
            return Err(Error::ExactUnavailable);
        }
        let word = reference.ids[t];
        Ok(self.del_of(word) + self.rho_at(&reference.ids, t))
    }

    /// Fraction of corrupt→align→annotate runs in which position `t` is
    /// labeled as an error. Deterministic given the channel seed.
    pub fn monte_carlo_fallibility(
        &self,
        reference: &WordSequence,
        t: usize,
        samples: usize,
    ) -> Result<f64> {
        if t > reference.len() {
            return Err(Error::PositionOutOfRange {
                pos: t,
                len: reference.len(),
            });
        }
        Ok(self.monte_carlo_fallibility_all(reference, samples)?[t])
    }

    /// Monte Carlo estimates for every position at once (index
    /// `reference.len()` is the `<eos>` slot), sharing one sample stream.
    pub fn monte_carlo_fallibility_all(
        &self,
        reference: &WordSequence,
        samples: usize,
    ) -> Result<Vec<f64>> {
        if samples < 1 {
            return Err(Error::InvalidParameter("samples must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut hits = vec![0u64; reference.len() + 1];
        for _ in 0..samples {
            let hyp = self.corrupt(reference, &mut rng);
            let script = edit_align(&reference.ids, &hyp.ids);
            let pair = annotate(&script, reference, &hyp, AnnotateFlags::default())?;
            for (slot, &label) in hits.iter_mut().zip(pair.labels_with_eos()) {
                *slot += u64::from(label);
            }
        }
        Ok(hits.into_iter().map(|h| h as f64 / samples as f64).collect())
    }

    /// Exact channel probability of emitting `hypothesis` given `reference`,
    /// marginalized over all latent per-position choices. Returns
    /// `f64::NEG_INFINITY` for unreachable hypotheses.
    pub fn log_prob(&self, reference: &WordSequence, hypothesis: &WordSequence) -> f64 {
        let r = &reference.ids;
        let h = &hypothesis.ids;
        let width = h.len() + 1;
        // forward[j]: probability of having emitted exactly h[..j] so far
        let mut forward = vec![0.0f64; width];
        forward[0] = 1.0;
        let mut after_emit = vec![0.0f64; width];
        for t in 0..r.len() {
            let word = r[t];
            let rho = self.rho_at(r, t);
            let del = self.del_of(word);
            let copy = (1.0 - rho - del).max(0.0);
            after_emit.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..width {
                let p = forward[j];
                if p == 0.0 {
                    continue;
                }
                after_emit[j] += p * del;
                if j + 1 < width {
                    let emitted = h[j];
                    let mut emit_p = 0.0;
                    if emitted == word {
                        emit_p += copy;
                    }
                    if rho > 0.0 {
                        if let Some(&(_, cp)) = self.per_word[word as usize]
                            .confusion
                            .iter()
                            .find(|(c, _)| *c == emitted)
                        {
                            emit_p += rho * cp;
                        }
                    }
                    after_emit[j + 1] += p * emit_p;
                }
            }
            if self.ins_prob > 0.0 {
                forward.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..width {
                    let p = after_emit[j];
                    if p == 0.0 {
                        continue;
                    }
                    forward[j] += p * (1.0 - self.ins_prob);
                    if j + 1 < width {
                        let emitted = h[j];
                        if let Some(&(_, ip)) =
                            self.ins_dist.iter().find(|(c, _)| *c == emitted)
                        {
                            forward[j + 1] += p * self.ins_prob * ip;
                        }
                    }
                }
            } else {
                std::mem::swap(&mut forward, &mut after_emit);
            }
        }
        forward[h.len()].ln()
    }

    /// Draws up to `n` distinct corruptions ranked by exact channel
    /// log-probability. When sampling cannot reach `n` distinct hypotheses it
    /// pads with systematically enumerated single-edit variants ranked by
    /// likelihood; if the channel is too degenerate even for that, fewer
    /// entries are returned with `truncated` set.
    pub fn decode_nbest(
        &self,
        reference: &WordSequence,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<NBestList> {
        if n < 1 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        let mut seen: HashSet<Vec<WordId>> = HashSet::new();
        let mut hyps: Vec<WordSequence> = Vec::with_capacity(n);
        let attempts = 50 * n + 200;
        for _ in 0..attempts {
            if hyps.len() >= n {
                break;
            }
            let hyp = self.corrupt(reference, rng);
            if seen.insert(hyp.ids.clone()) {
                hyps.push(hyp);
            }
        }
        if hyps.len() < n {
            let mut variants = self.single_edit_variants(reference);
            variants.retain(|v| !seen.contains(&v.ids));
            let mut scored: Vec<(f64, WordSequence)> = variants
                .into_iter()
                .map(|v| (self.log_prob(reference, &v), v))
                .filter(|(s, _)| s.is_finite())
                .collect();
            scored.sort_by(|(sa, a), (sb, b)| {
                sb.partial_cmp(sa).unwrap().then_with(|| a.ids.cmp(&b.ids))
            });
            for (_, v) in scored {
                if hyps.len() >= n {
                    break;
                }
                if seen.insert(v.ids.clone()) {
                    hyps.push(v);
                }
            }
        }
        let truncated = hyps.len() < n;
        let mut entries: Vec<NBestEntry> = hyps
            .into_iter()
            .map(|hypothesis| {
                let asr_score = self.log_prob(reference, &hypothesis);
                NBestEntry {
                    hypothesis,
                    asr_score,
                }
            })
            .collect();
        entries.sort_by(|a, b| {
            b.asr_score
                .partial_cmp(&a.asr_score)
                .unwrap()
                .then_with(|| a.hypothesis.ids.cmp(&b.hypothesis.ids))
        });
        Ok(NBestList { entries, truncated })
    }

    fn single_edit_variants(&self, reference: &WordSequence) -> Vec<WordSequence> {
        let mut out = vec![reference.clone()];
        for t in 0..reference.len() {
            let mut deleted = reference.ids.clone();
            deleted.remove(t);
            out.push(WordSequence::new(deleted, SourceTag::Real));
            for &(c, _) in &self.per_word[reference.ids[t] as usize].confusion {
                let mut ids = reference.ids.clone();
                ids[t] = c;
                out.push(WordSequence::new(ids, SourceTag::Real));
            }
            if self.ins_prob > 0.0 {
                for &(c, _) in &self.ins_dist {
                    let mut ids = reference.ids.clone();
                    ids.insert(t + 1, c);
                    out.push(WordSequence::new(ids, SourceTag::Real));
                }
            }
        }
        out
    }
}

use rand::SeedableRng;

fn sample_discrete(dist: &[(WordId, f64)], rng: &mut ChaCha8Rng) -> WordId {
    debug_assert!(!dist.is_empty());
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in dist {
        acc += p;
        if u < acc {
            return id;
        }
    }
    dist.last().expect("non-empty distribution").0
}

/// One simulated first-pass hypothesis with its exact channel log-probability.
#[derive(Clone, Debug)]
pub struct NBestEntry {
    pub hypothesis: WordSequence,
    pub asr_score: f64,
}

/// Hypotheses sorted by descending channel score. `truncated` is set when the
/// channel could not produce the requested number of distinct hypotheses.
#[derive(Clone, Debug)]
pub struct NBestList {
    pub entries: Vec<NBestEntry>,
    pub truncated: bool,
}

// ---------------------------------------------------------------------------
// Channel config (JSON external interface)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SubSpec {
    pub rho: f64,
    pub confusions: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InsSpec {
    pub prob: f64,
    pub dist: BTreeMap<String, f64>,
}

/// Surface-form channel description:
/// `{"sub": {"word": {"rho": .., "confusions": {..}}}, "del": {"word": ..},
///   "ins": {"prob": .., "dist": {..}}, "context_trigger": "word"|null,
///   "seed": ..}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelConfig {
    #[serde(default)]
    pub sub: BTreeMap<String, SubSpec>,
    #[serde(default)]
    pub del: BTreeMap<String, f64>,
    #[serde(default)]
    pub ins: Option<InsSpec>,
    #[serde(default)]
    pub context_trigger: Option<String>,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Channel(format!("{}: {e}", path.display())))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("channel config serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Every word string the config mentions, in deterministic order.
    pub fn mentioned_words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (w, spec) in &self.sub {
            out.push(w.clone());
            out.extend(spec.confusions.keys().cloned());
        }
        out.extend(self.del.keys().cloned());
        if let Some(ins) = &self.ins {
            out.extend(ins.dist.keys().cloned());
        }
        if let Some(t) = &self.context_trigger {
            out.push(t.clone());
        }
        out.sort();
        out.dedup();
        out
    }

    /// Resolves word strings against a vocabulary. Every mentioned word must
    /// be present.
    pub fn bind(&self, vocab: &Vocabulary) -> Result<ChannelModel> {
        let resolve = |w: &str| -> Result<WordId> {
            vocab
                .id(w)
                .ok_or_else(|| Error::Channel(format!("word '{w}' not in vocabulary")))
        };
        let mut per_word = vec![WordParams::default(); vocab.len()];
        for (w, spec) in &self.sub {
            let id = resolve(w)?;
            let confusion = spec
                .confusions
                .iter()
                .map(|(c, &p)| Ok((resolve(c)?, p)))
                .collect::<Result<Vec<_>>>()?;
            per_word[id as usize].rho = spec.rho;
            per_word[id as usize].confusion = confusion;
        }
        for (w, &p) in &self.del {
            per_word[resolve(w)? as usize].del = p;
        }
        let (ins_prob, ins_dist) = match &self.ins {
            Some(spec) => (
                spec.prob,
                spec.dist
                    .iter()
                    .map(|(c, &p)| Ok((resolve(c)?, p)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => (0.0, Vec::new()),
        };
        let trigger = self
            .context_trigger
            .as_deref()
            .map(resolve)
            .transpose()?;
        ChannelModel::new(per_word, ins_prob, ins_dist, trigger, self.seed)
    }
}

/// N-best JSONL line: `{"ref_id": i, "hyps": [{"text": "...", "score": ..}]}`.
#[derive(Serialize, Deserialize)]
struct NBestLine {
    ref_id: usize,
    hyps: Vec<NBestHyp>,
}

#[derive(Serialize, Deserialize)]
struct NBestHyp {
    text: String,
    score: f64,
}

pub fn write_nbest_jsonl(lists: &[NBestList], vocab: &Vocabulary, path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (i, list) in lists.iter().enumerate() {
        let line = NBestLine {
            ref_id: i,
            hyps: list
                .entries
                .iter()
                .map(|e| NBestHyp {
                    text: vocab.decode(&e.hypothesis).join(" "),
                    score: e.asr_score,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line).expect("nbest line serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads n-best JSONL at the surface level: per reference, a list of
/// (hypothesis words, score) pairs.
pub fn read_nbest_texts(path: &Path) -> Result<Vec<Vec<(Vec<String>, f64)>>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: NBestLine = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("malformed n-best record ({e})"),
        })?;
        out.push(
            parsed
                .hyps
                .into_iter()
                .map(|h| {
                    (
                        h.text.split_whitespace().map(str::to_string).collect(),
                        h.score,
                    )
                })
                .collect(),
        );
    }
    Ok(out)
}

pub fn read_nbest_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<NBestList>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: NBestLine = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("malformed n-best record ({e})"),
        })?;
        if parsed.ref_id != out.len() {
            return Err(Error::Jsonl {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("ref_id {} out of order", parsed.ref_id),
            });
        }
        out.push(NBestList {
            entries: parsed
                .hyps
                .into_iter()
                .map(|h| NBestEntry {
                    hypothesis: vocab.encode(
                        &h.text.split_whitespace().collect::<Vec<_>>(),
                        SourceTag::Real,
                    ),
                    asr_score: h.score,
                })
                .collect(),
            truncated: false,
        });
    }
    Ok(out)
}
