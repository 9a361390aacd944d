//! Fallibility score predictor: a small recurrent token classifier over
//! subword chunks, trained on annotated pairs, plus the subword→word→LM-token
//! score assembly.
//!
//! The classifier head emits two logits per position; the softmax mass on
//! class 1 is the fallibility score, so an untrained zero head scores every
//! token 0.5. Word scores are the max over the word's subword scores, and LM
//! tokens inherit their parent word's score unchanged.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::AnnotatedPair;
use crate::corpus::{
    Sentence, SourceTag, SubwordVocabulary, TokenizedSequence, Vocabulary, WordSequence,
};
use crate::error::{Error, Result};
use crate::numkit::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Matrix, Tape};
use crate::rnn::{
    rnn_param_blocks, rnn_param_blocks_mut, Embedding, EmbeddingVar, Linear, LinearVar, RnnStack,
    RnnStackVar,
};
use crate::train::{epoch_batches, holdout_split, splitmix64};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub chunk_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Hold out every n-th sequence (by salted index hash) for model
    /// selection.
    pub holdout_every: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            embed_dim: 16,
            hidden_dim: 32,
            layers: 2,
            bidirectional: true,
            chunk_len: 3,
            epochs: 8,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 0,
            holdout_every: 10,
        }
    }
}

pub struct PredictorModel {
    vocab: Vocabulary,
    subvocab: SubwordVocabulary,
    config: PredictorConfig,
    embed: Embedding,
    fwd: RnnStack,
    bwd: Option<RnnStack>,
    head: Linear,
}

/// Per-epoch training statistics; losses are mean per-token binary
/// cross-entropy.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PredictorTrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_heldout_loss: f64,
    pub degenerate_labels: bool,
}

/// Text plus per-word fallibility scores (and the `<eos>` score).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub words: WordSequence,
    pub word_scores: Vec<f64>,
    pub eos_score: f64,
}

impl ScoredSequence {
    pub fn new(words: WordSequence, word_scores: Vec<f64>, eos_score: f64) -> Result<Self> {
        if word_scores.len() != words.len() {
            return Err(Error::CountMismatch(format!(
                "{} scores for {} words",
                word_scores.len(),
                words.len()
            )));
        }
        Ok(ScoredSequence {
            words,
            word_scores,
            eos_score,
        })
    }

    /// Wraps a plain sequence with zero scores, under which weighted LM
    /// training reduces to conventional training.
    pub fn unscored(words: WordSequence) -> Self {
        let n = words.len();
        ScoredSequence {
            words,
            word_scores: vec![0.0; n],
            eos_score: 0.0,
        }
    }

    /// Word scores followed by the `<eos>` score.
    pub fn scores_with_eos(&self) -> Vec<f64> {
        let mut out = self.word_scores.clone();
        out.push(self.eos_score);
        out
    }
}

impl PredictorModel {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn subvocab(&self) -> &SubwordVocabulary {
        &self.subvocab
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    fn init(vocab: Vocabulary, config: PredictorConfig) -> Result<Self> {
        let subvocab = SubwordVocabulary::new(&vocab, config.chunk_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x70726564));
        let embed = Embedding::init(subvocab.len(), config.embed_dim, &mut rng);
        let fwd = RnnStack::init(config.embed_dim, config.hidden_dim, config.layers, &mut rng);
        let bwd = config
            .bidirectional
            .then(|| RnnStack::init(config.embed_dim, config.hidden_dim, config.layers, &mut rng));
        let state_dim = if config.bidirectional {
            2 * config.hidden_dim
        } else {
            config.hidden_dim
        };
        let head = Linear::zeros(state_dim, 2);
        Ok(PredictorModel {
            vocab,
            subvocab,
            config,
            embed,
            fwd,
            bwd,
            head,
        })
    }

    /// Input token ids for a sequence: its subword chunks plus a final
    /// `<eos>` token, so the classifier scores `len + 1` positions.
    fn input_tokens(&self, toks: &TokenizedSequence) -> Vec<u32> {
        let mut input = toks.tokens.clone();
        input.push(SubwordVocabulary::EOS_ID);
        input
    }

    /// Per-position classifier states via the plain (inference) path.
    fn states(&self, input: &[u32]) -> Vec<Matrix> {
        let n = input.len();
        let mut fwd_out = Vec::with_capacity(n);
        let mut state = self.fwd.zero_state();
        for &tok in input {
            state = self.fwd.step(&self.embed.row(tok), &state);
            fwd_out.push(state.last().expect("stack has layers").clone());
        }
        match &self.bwd {
            None => fwd_out,
            Some(bwd) => {
                let mut bwd_out = vec![Matrix::zeros(1, 0); n];
                let mut state = bwd.zero_state();
                for j in (0..n).rev() {
                    state = bwd.step(&self.embed.row(input[j]), &state);
                    bwd_out[j] = state.last().expect("stack has layers").clone();
                }
                fwd_out
                    .into_iter()
                    .zip(bwd_out)
                    .map(|(f, b)| f.concat_cols(&b))
                    .collect()
            }
        }
    }

    /// One fallibility score per subword token plus the trailing `<eos>`
    /// slot. Scores are softmax probabilities, strictly inside (0, 1).
    pub fn predict_scores(&self, text: &WordSequence) -> Vec<f64> {
        let toks = self.subvocab.tokenize(text);
        let input = self.input_tokens(&toks);
        self.states(&input)
            .iter()
            .map(|state| {
                let logits = self.head.apply(state);
                Matrix::row_log_softmax(logits.row(0))[1].exp()
            })
            .collect()
    }

    /// Predict, assemble to word level, and package as a [`ScoredSequence`].
    pub fn score_sequence(&self, text: &WordSequence) -> ScoredSequence {
        let toks = self.subvocab.tokenize(text);
        let token_scores = self.predict_scores(text);
        let word_scores = assemble_word_scores(&token_scores, &toks.word_spans)
            .expect("own tokenization matches own scores");
        let eos = *word_scores.last().expect("eos slot present");
        ScoredSequence {
            words: text.clone(),
            word_scores: word_scores[..word_scores.len() - 1].to_vec(),
            eos_score: eos,
        }
    }

    /// Scores a corpus, preserving order.
    pub fn score_corpus(&self, corpus: &[WordSequence]) -> Vec<ScoredSequence> {
        corpus.iter().map(|seq| self.score_sequence(seq)).collect()
    }

    fn param_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut blocks = vec![("embed".to_string(), &self.embed.table)];
        blocks.extend(rnn_param_blocks("fwd", &self.fwd));
        if let Some(bwd) = &self.bwd {
            blocks.extend(rnn_param_blocks("bwd", bwd));
        }
        blocks.push(("head.w".to_string(), &self.head.w));
        blocks.push(("head.b".to_string(), &self.head.b));
        blocks
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut blocks = vec![&mut self.embed.table];
        blocks.extend(rnn_param_blocks_mut(&mut self.fwd));
        if let Some(bwd) = &mut self.bwd {
            blocks.extend(rnn_param_blocks_mut(bwd));
        }
        blocks.push(&mut self.head.w);
        blocks.push(&mut self.head.b);
        blocks
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = PredictorMeta {
            kind: "predictor".into(),
            config: self.config.clone(),
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
        )
        .map_err(|e| Error::io(&meta_path, e))?;
        self.vocab.save_json(&dir.join("vocab.json"))?;
        save_checkpoint(&dir.join("weights.bin"), &self.param_blocks())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: PredictorMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad predictor meta: {e}")))?;
        let vocab = Vocabulary::load_json(&dir.join("vocab.json"))?;
        let mut model = Self::init(vocab, meta.config)?;
        let blocks = load_checkpoint(&dir.join("weights.bin"))?;
        let expected: Vec<String> = model.param_blocks().iter().map(|(n, _)| n.clone()).collect();
        let mut slots = model.param_blocks_mut();
        if blocks.len() != slots.len() {
            return Err(Error::Checkpoint(format!(
                "{} blocks in file, model has {}",
                blocks.len(),
                slots.len()
            )));
        }
        for ((name, matrix), (slot, expect)) in
            blocks.into_iter().zip(slots.iter_mut().zip(expected))
        {
            if name != expect {
                return Err(Error::Checkpoint(format!(
                    "block '{name}' where '{expect}' expected"
                )));
            }
            if matrix.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "block '{name}' is {}x{}, model expects {}x{}",
                    matrix.rows(),
                    matrix.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            **slot = matrix;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct PredictorMeta {
    kind: String,
    config: PredictorConfig,
}

/// Pre-tokenized training item.
struct TrainItem {
    input: Vec<u32>,
    labels: Vec<bool>,
}

/// Trains the classifier by mini-batch gradient descent on mean token-level
/// binary cross-entropy, returning the parameters of the epoch with the best
/// held-out loss.
pub fn train_predictor(
    corpus: &[AnnotatedPair],
    vocab: &Vocabulary,
    config: PredictorConfig,
) -> Result<(PredictorModel, PredictorTrainLog)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = PredictorModel::init(vocab.clone(), config.clone())?;

    let items: Vec<TrainItem> = corpus
        .iter()
        .map(|pair| {
            let toks = model.subvocab.tokenize(&pair.reference);
            let labels = pair.token_labels(&toks)?;
            Ok(TrainItem {
                input: model.input_tokens(&toks),
                labels,
            })
        })
        .collect::<Result<_>>()?;

    let all_labels: Vec<bool> = items.iter().flat_map(|it| it.labels.clone()).collect();
    let degenerate =
        all_labels.iter().all(|&l| l) || all_labels.iter().all(|&l| !l);
    if degenerate {
        log::warn!("degenerate labels: training corpus is all-{}", all_labels.first().map_or(0, |&l| l as u8));
    }

    let (train_idx, held_idx) =
        holdout_split(items.len(), config.holdout_every, splitmix64(config.seed));
    let select_on_heldout = !held_idx.is_empty();

    let shapes: Vec<(usize, usize)> = model
        .param_blocks()
        .iter()
        .map(|(_, m)| m.shape())
        .collect();
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), &shapes);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x62617463));

    let mut log = PredictorTrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_heldout_loss: f64::INFINITY,
        degenerate_labels: degenerate,
    };
    let mut best_params: Option<Vec<Matrix>> = None;

    for epoch in 0..config.epochs {
        let mut train_loss_sum = 0.0;
        let mut train_batches = 0usize;
        for batch in epoch_batches(&train_idx, config.batch_size, &mut batch_rng) {
            let loss = predictor_batch_step(&mut model, &items, &batch, &mut adam)?;
            train_loss_sum += loss;
            train_batches += 1;
        }
        let train_loss = train_loss_sum / train_batches.max(1) as f64;
        let heldout_loss = if select_on_heldout {
            mean_bce(&model, &items, &held_idx)
        } else {
            train_loss
        };
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            heldout_loss,
        });
        if heldout_loss < log.best_heldout_loss {
            log.best_heldout_loss = heldout_loss;
            log.best_epoch = epoch;
            best_params = Some(
                model
                    .param_blocks()
                    .iter()
                    .map(|(_, m)| (*m).clone())
                    .collect(),
            );
        }
    }
    if let Some(best) = best_params {
        for (slot, value) in model.param_blocks_mut().into_iter().zip(best) {
            *slot = value;
        }
    }
    Ok((model, log))
}

/// One optimizer step over a batch; returns the batch loss (mean BCE per
/// token, averaged over the batch).
fn predictor_batch_step(
    model: &mut PredictorModel,
    items: &[TrainItem],
    batch: &[usize],
    adam: &mut Adam,
) -> Result<f64> {
    let mut tape = Tape::new();
    let embed = EmbeddingVar::register(&mut tape, &model.embed);
    let fwd = RnnStackVar::register(&mut tape, &model.fwd);
    let bwd = model
        .bwd
        .as_ref()
        .map(|b| RnnStackVar::register(&mut tape, b));
    let head = LinearVar::register(&mut tape, &model.head);

    let mut param_ids = vec![embed.table];
    param_ids.extend(fwd.param_ids());
    if let Some(b) = &bwd {
        param_ids.extend(b.param_ids());
    }
    param_ids.push(head.w);
    param_ids.push(head.b);

    let hidden = model.fwd.hidden();
    let mut loss: Option<usize> = None;
    for &idx in batch {
        let item = &items[idx];
        let n = item.input.len();
        let base_w = 1.0 / (n as f64 * batch.len() as f64);

        let mut fwd_states = Vec::with_capacity(n);
        let mut state = fwd.zero_state(&mut tape, hidden);
        for &tok in &item.input {
            let x = embed.lookup(&mut tape, tok);
            state = fwd.step(&mut tape, x, &state);
            fwd_states.push(*state.last().expect("stack has layers"));
        }
        let states: Vec<usize> = match &bwd {
            None => fwd_states,
            Some(bwd) => {
                let mut bwd_states = vec![0usize; n];
                let mut state = bwd.zero_state(&mut tape, hidden);
                for j in (0..n).rev() {
                    let x = embed.lookup(&mut tape, item.input[j]);
                    state = bwd.step(&mut tape, x, &state);
                    bwd_states[j] = *state.last().expect("stack has layers");
                }
                fwd_states
                    .into_iter()
                    .zip(bwd_states)
                    .map(|(f, b)| tape.concat_cols(f, b))
                    .collect()
            }
        };
        for (j, &s) in states.iter().enumerate() {
            let logits = head.apply(&mut tape, s);
            let term = tape.weighted_nll(logits, item.labels[j] as usize, base_w);
            loss = Some(match loss {
                None => term,
                Some(acc) => tape.add(acc, term),
            });
        }
    }
    let loss = loss.expect("non-empty batch");
    tape.backward(loss);
    let grads: Vec<Matrix> = param_ids.iter().map(|&id| tape.grad(id).clone()).collect();
    let grad_refs: Vec<&Matrix> = grads.iter().collect();
    let loss_value = tape.value(loss).scalar_value();
    drop(tape);
    let mut params = model.param_blocks_mut();
    adam.step(&mut params, &grad_refs)?;
    Ok(loss_value)
}

/// Mean per-token binary cross-entropy over an index set (inference path).
fn mean_bce(model: &PredictorModel, items: &[TrainItem], indices: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for &idx in indices {
        let item = &items[idx];
        for (state, &label) in model.states(&item.input).iter().zip(&item.labels) {
            let logits = model.head.apply(state);
            let log_probs = Matrix::row_log_softmax(logits.row(0));
            total += -log_probs[label as usize];
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Word-level scores from subword scores by the max rule. The input carries
/// a trailing `<eos>` score which passes through unchanged, so the output
/// has `spans.len() + 1` entries.
pub fn assemble_word_scores(token_scores: &[f64], spans: &[(usize, usize)]) -> Result<Vec<f64>> {
    let token_count = spans.last().map_or(0, |&(_, end)| end);
    if token_scores.len() != token_count + 1 {
        return Err(Error::SpanMismatch(format!(
            "{} token scores for {} tokens (+eos)",
            token_scores.len(),
            token_count
        )));
    }
    let mut out = Vec::with_capacity(spans.len() + 1);
    for &(start, end) in spans {
        if start >= end || end > token_count {
            return Err(Error::SpanMismatch(format!("bad span ({start}, {end})")));
        }
        let max = token_scores[start..end]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(max);
    }
    out.push(*token_scores.last().expect("eos score present"));
    Ok(out)
}

/// Copies each word's score onto all its LM tokens (the `<eos>` score passes
/// through), producing `token_count + 1` scores.
pub fn split_to_nnlm_tokens(
    word_scores_with_eos: &[f64],
    spans: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if word_scores_with_eos.len() != spans.len() + 1 {
        return Err(Error::CountMismatch(format!(
            "{} word scores (+eos) for {} words",
            word_scores_with_eos.len(),
            spans.len()
        )));
    }
    let token_count = spans.last().map_or(0, |&(_, end)| end);
    let mut out = vec![0.0; token_count + 1];
    for (w, &(start, end)) in spans.iter().enumerate() {
        for slot in &mut out[start..end] {
            *slot = word_scores_with_eos[w];
        }
    }
    out[token_count] = *word_scores_with_eos.last().expect("eos score present");
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scored-corpus JSONL
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ScoredLine {
    text: String,
    word_scores: Vec<f64>,
    eos_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<SourceTag>,
}

/// Writes `{"text": ..., "word_scores": [...], "eos_score": ..}` lines, with
/// a `"tag": "generated"` field for generated text.
pub fn write_scored_jsonl(
    scored: &[ScoredSequence],
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scored {
        let line = ScoredLine {
            text: vocab.decode(&s.words).join(" "),
            word_scores: s.word_scores.clone(),
            eos_score: s.eos_score,
            tag: match s.words.tag {
                SourceTag::Real => None,
                SourceTag::Generated => Some(SourceTag::Generated),
            },
        };
        serde_json::to_writer(&mut w, &line).expect("scored line serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scored_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<ScoredSequence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScoredLine = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("malformed scored record ({e})"),
        })?;
        let sentence = Sentence::from_text(&parsed.text, parsed.tag.unwrap_or_default());
        let words = vocab.encode(&sentence.words, sentence.tag);
        out.push(
            ScoredSequence::new(words, parsed.word_scores, parsed.eos_score).map_err(|e| {
                Error::Jsonl {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                }
            })?,
        );
    }
    Ok(out)
}
