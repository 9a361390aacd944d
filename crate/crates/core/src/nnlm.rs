//! Correction-focused autoregressive LM: token NLL weighted by `α^s`, where
//! `s` is the token's fallibility score and `α ≥ 1` the focus temperature.
//! At `α = 1` (or all-zero scores) every weight is exactly 1.0 and training
//! coincides bit-for-bit with conventional NLL training.
//!
//! Model selection uses *unweighted* held-out perplexity so α shapes the
//! gradient focus, never the checkpoint choice.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SubwordVocabulary, Vocabulary, WordSequence};
use crate::error::{Error, Result};
use crate::generator::restore_blocks;
use crate::numkit::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Matrix, Tape};
use crate::predictor::{split_to_nnlm_tokens, ScoredSequence};
use crate::rnn::{
    rnn_param_blocks, rnn_param_blocks_mut, Embedding, EmbeddingVar, Linear, LinearVar, RnnStack,
    RnnStackVar,
};
use crate::train::{epoch_batches, holdout_split, splitmix64};

/// Tokenizer binding of the LM: whole words, or the derived character-chunk
/// subwords (which exercises the word→LM-token score split).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Word,
    Subword,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Focus temperature; must be >= 1.
    pub alpha: f64,
    /// Weight the `<eos>` prediction by its score (otherwise weight 1).
    pub use_eos_weight: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub holdout_every: usize,
    pub granularity: Granularity,
    /// Chunk length for the subword granularity.
    pub chunk_len: usize,
    /// Rescale weights so each batch's mean weight is 1, decoupling α from
    /// the effective step size. Off by default.
    pub renormalize_weights: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            embed_dim: 24,
            hidden_dim: 48,
            layers: 2,
            alpha: 3.0,
            use_eos_weight: true,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 0,
            holdout_every: 10,
            granularity: Granularity::Word,
            chunk_len: 3,
            renormalize_weights: false,
        }
    }
}

/// `α^s`: the training weight of a token with fallibility score `s`.
pub fn token_weight(score: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&score) || !score.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "score {score} outside [0,1]"
        )));
    }
    if alpha < 1.0 || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("alpha {alpha} below 1")));
    }
    Ok(alpha.powf(score))
}

pub struct NnlmModel {
    vocab: Vocabulary,
    config: TrainingConfig,
    subvocab: Option<SubwordVocabulary>,
    embed: Embedding,
    core: RnnStack,
    out: Linear,
}

/// External-interface log record:
/// `{"epoch": n, "train_weighted_loss": .., "heldout_ppl": ..}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NnlmEpochRecord {
    pub epoch: usize,
    pub train_weighted_loss: f64,
    pub heldout_ppl: f64,
}

#[derive(Clone, Debug)]
pub struct NnlmTrainLog {
    pub epochs: Vec<NnlmEpochRecord>,
    pub batch_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_heldout_ppl: f64,
}

pub fn write_train_log_jsonl(log: &NnlmTrainLog, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &log.epochs {
        serde_json::to_writer(&mut w, rec).expect("log record serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One training sequence reduced to LM tokens: inputs start with `<bos>`,
/// targets end with `<eos>`, and each target carries its fallibility score.
struct LmItem {
    inputs: Vec<u32>,
    targets: Vec<u32>,
    scores: Vec<f64>,
}

impl NnlmModel {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    /// Size of the output distribution (the LM token vocabulary).
    pub fn output_len(&self) -> usize {
        match &self.subvocab {
            Some(sv) => sv.len(),
            None => self.vocab.len(),
        }
    }

    fn init(vocab: Vocabulary, config: TrainingConfig) -> Result<Self> {
        let subvocab = match config.granularity {
            Granularity::Word => None,
            Granularity::Subword => Some(SubwordVocabulary::new(&vocab, config.chunk_len)?),
        };
        let token_count = match &subvocab {
            Some(sv) => sv.len(),
            None => vocab.len(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x6e6e6c6d));
        let embed = Embedding::init(token_count, config.embed_dim, &mut rng);
        let core = RnnStack::init(config.embed_dim, config.hidden_dim, config.layers, &mut rng);
        let out = Linear::zeros(config.hidden_dim, token_count);
        Ok(NnlmModel {
            vocab,
            config,
            subvocab,
            embed,
            core,
            out,
        })
    }

    /// An untrained model (zero output head ⇒ exactly uniform predictions).
    pub fn untrained(vocab: Vocabulary, config: TrainingConfig) -> Result<Self> {
        Self::init(vocab, config)
    }

    /// The LM-token rendering of a word sequence (no `<bos>`/`<eos>`).
    pub fn encode_tokens(&self, words: &WordSequence) -> Vec<u32> {
        match &self.subvocab {
            None => words.ids.clone(),
            Some(sv) => sv.tokenize(words).tokens,
        }
    }

    fn item(&self, scored: &ScoredSequence) -> Result<LmItem> {
        let (tokens, scores) = match &self.subvocab {
            None => (scored.words.ids.clone(), scored.scores_with_eos()),
            Some(sv) => {
                let toks = sv.tokenize(&scored.words);
                let token_scores =
                    split_to_nnlm_tokens(&scored.scores_with_eos(), &toks.word_spans)?;
                (toks.tokens, token_scores)
            }
        };
        // reserved ids coincide across granularities: bos 0, eos 1
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(Vocabulary::BOS_ID);
        inputs.extend_from_slice(&tokens);
        let mut targets = tokens;
        targets.push(Vocabulary::EOS_ID);
        debug_assert_eq!(scores.len(), targets.len());
        Ok(LmItem {
            inputs,
            targets,
            scores,
        })
    }

    /// Per-step log-probabilities of each target token (including `<eos>`),
    /// via the inference path.
    pub fn step_log_probs(&self, words: &WordSequence) -> Vec<f64> {
        let tokens = self.encode_tokens(words);
        let mut state = self.core.zero_state();
        let mut out = Vec::with_capacity(tokens.len() + 1);
        let mut input = Vocabulary::BOS_ID;
        for step in 0..=tokens.len() {
            state = self.core.step(&self.embed.row(input), &state);
            let h = state.last().expect("stack has layers");
            let log_probs = Matrix::row_log_softmax(self.out.apply(h).row(0));
            let target = if step < tokens.len() {
                tokens[step]
            } else {
                Vocabulary::EOS_ID
            };
            out.push(log_probs[target as usize]);
            input = target;
        }
        out
    }

    /// Total negative log-likelihood and target count for one sequence
    /// (including the `<eos>` prediction).
    pub fn sequence_nll(&self, words: &WordSequence) -> (f64, usize) {
        let lps = self.step_log_probs(words);
        (-lps.iter().sum::<f64>(), lps.len())
    }

    /// exp(mean unweighted token NLL) over a corpus, `<eos>` included.
    pub fn perplexity(&self, corpus: &[WordSequence]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut nll = 0.0;
        let mut count = 0usize;
        for seq in corpus {
            let (n, c) = self.sequence_nll(seq);
            nll += n;
            count += c;
        }
        Ok((nll / count as f64).exp())
    }

    /// log P(next_token | prefix_tokens) at the model's token granularity.
    pub fn score_continuation(&self, prefix_tokens: &[u32], next_token: u32) -> f64 {
        let mut state = self.core.zero_state();
        state = self.core.step(&self.embed.row(Vocabulary::BOS_ID), &state);
        for &tok in prefix_tokens {
            state = self.core.step(&self.embed.row(tok), &state);
        }
        let h = state.last().expect("stack has layers");
        Matrix::row_log_softmax(self.out.apply(h).row(0))[next_token as usize]
    }

    fn param_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut blocks = vec![("embed".to_string(), &self.embed.table)];
        blocks.extend(rnn_param_blocks("core", &self.core));
        blocks.push(("out.w".to_string(), &self.out.w));
        blocks.push(("out.b".to_string(), &self.out.b));
        blocks
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut blocks = vec![&mut self.embed.table];
        blocks.extend(rnn_param_blocks_mut(&mut self.core));
        blocks.push(&mut self.out.w);
        blocks.push(&mut self.out.b);
        blocks
    }

    /// Parameter payload for bit-level comparisons.
    pub fn param_bits(&self) -> Vec<u64> {
        self.param_blocks()
            .iter()
            .flat_map(|(_, m)| m.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = NnlmMeta {
            kind: "nnlm".into(),
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
        let meta: NnlmMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad nnlm meta: {e}")))?;
        let vocab = Vocabulary::load_json(&dir.join("vocab.json"))?;
        let mut model = Self::init(vocab, meta.config)?;
        let blocks = load_checkpoint(&dir.join("weights.bin"))?;
        restore_blocks(&mut model.param_blocks_mut(), blocks)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct NnlmMeta {
    kind: String,
    config: TrainingConfig,
}

/// Cycles through a source's training indices in reshuffled rounds.
struct SourceQueue {
    indices: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl SourceQueue {
    fn new(indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut q = SourceQueue {
            indices,
            order: Vec::new(),
            pos: 0,
        };
        q.reshuffle(rng);
        q
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.order = epoch_batches(&self.indices, self.indices.len().max(1), rng)
            .pop()
            .unwrap_or_default();
        self.pos = 0;
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos >= self.order.len() {
            self.reshuffle(rng);
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }
}

fn pick_source(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Trains with the fallibility-weighted objective over one or more scored
/// corpora mixed by sampling weight. Returns the checkpoint with the best
/// held-out *unweighted* perplexity.
pub fn train_nnlm(
    corpora: &[(Vec<ScoredSequence>, f64)],
    vocab: &Vocabulary,
    config: TrainingConfig,
) -> Result<(NnlmModel, NnlmTrainLog)> {
    if config.alpha < 1.0 || !config.alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "alpha {} below 1",
            config.alpha
        )));
    }
    run_training(corpora, vocab, config, true)
}

/// Conventional (unweighted) NLL trainer with the same schedule; the
/// reference route for the α = 1 equivalence contract. Scores are ignored
/// entirely.
pub fn train_nnlm_unweighted(
    corpora: &[(Vec<ScoredSequence>, f64)],
    vocab: &Vocabulary,
    config: TrainingConfig,
) -> Result<(NnlmModel, NnlmTrainLog)> {
    run_training(corpora, vocab, config, false)
}

fn run_training(
    corpora: &[(Vec<ScoredSequence>, f64)],
    vocab: &Vocabulary,
    config: TrainingConfig,
    weighted: bool,
) -> Result<(NnlmModel, NnlmTrainLog)> {
    if corpora.iter().all(|(seqs, _)| seqs.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    for (i, (_, w)) in corpora.iter().enumerate() {
        if !(*w > 0.0) || !w.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mix weight of source {i} must be positive"
            )));
        }
    }
    let mut model = NnlmModel::init(vocab.clone(), config.clone())?;

    let mut sources: Vec<Vec<LmItem>> = Vec::with_capacity(corpora.len());
    for (seqs, _) in corpora {
        sources.push(
            seqs.iter()
                .map(|s| model.item(s))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mix: Vec<f64> = corpora.iter().map(|(_, w)| *w).collect();

    // per-source deterministic held-out split; selection metric spans all
    // sources
    let mut queues = Vec::with_capacity(sources.len());
    let mut heldout: Vec<(usize, usize)> = Vec::new();
    let mut total_train = 0usize;
    let mut queue_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x71756575));
    for (si, items) in sources.iter().enumerate() {
        let (train_idx, held_idx) = holdout_split(
            items.len(),
            config.holdout_every,
            splitmix64(config.seed ^ si as u64),
        );
        total_train += train_idx.len();
        heldout.extend(held_idx.into_iter().map(|i| (si, i)));
        queues.push(SourceQueue::new(train_idx, &mut queue_rng));
    }
    if total_train == 0 {
        return Err(Error::EmptyCorpus);
    }
    let batches_per_epoch = total_train.div_ceil(config.batch_size.max(1));

    let shapes: Vec<(usize, usize)> = model
        .param_blocks()
        .iter()
        .map(|(_, m)| m.shape())
        .collect();
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), &shapes);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x62617463));

    let mut log = NnlmTrainLog {
        epochs: Vec::new(),
        batch_losses: Vec::new(),
        best_epoch: 0,
        best_heldout_ppl: f64::INFINITY,
    };
    let mut best_params: Option<Vec<Matrix>> = None;

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..batches_per_epoch {
            let source = pick_source(&mix, &mut batch_rng);
            let take = config.batch_size.min(queues[source].indices.len().max(1));
            let batch: Vec<usize> = (0..take)
                .map(|_| queues[source].next(&mut batch_rng))
                .collect();
            let loss = nnlm_batch_step(
                &mut model,
                &sources[source],
                &batch,
                &config,
                weighted,
                &mut adam,
            )?;
            loss_sum += loss;
            log.batch_losses.push(loss);
        }
        let heldout_ppl = if heldout.is_empty() {
            (loss_sum / batches_per_epoch as f64).exp()
        } else {
            heldout_perplexity(&model, &sources, &heldout)
        };
        log.epochs.push(NnlmEpochRecord {
            epoch,
            train_weighted_loss: loss_sum / batches_per_epoch as f64,
            heldout_ppl,
        });
        if heldout_ppl < log.best_heldout_ppl {
            log.best_heldout_ppl = heldout_ppl;
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

fn nnlm_batch_step(
    model: &mut NnlmModel,
    items: &[LmItem],
    batch: &[usize],
    config: &TrainingConfig,
    weighted: bool,
    adam: &mut Adam,
) -> Result<f64> {
    // per-target weights, fixed before the tape is built
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    for &idx in batch {
        let item = &items[idx];
        let n = item.targets.len();
        let base = 1.0 / (n as f64 * batch.len() as f64);
        let mut seq_weights = Vec::with_capacity(n);
        for (j, &score) in item.scores.iter().enumerate() {
            let w = if !weighted {
                1.0
            } else if j + 1 == n && !config.use_eos_weight {
                1.0
            } else {
                token_weight(score, config.alpha)?
            };
            seq_weights.push(w * base);
        }
        weights.push(seq_weights);
    }
    if weighted && config.renormalize_weights {
        // force the mean *focus* weight (excluding the 1/(n·B) scaling) to 1
        let mut sum = 0.0;
        let mut count = 0usize;
        for (bi, &idx) in batch.iter().enumerate() {
            let n = items[idx].targets.len();
            let base = 1.0 / (n as f64 * batch.len() as f64);
            for w in &weights[bi] {
                sum += w / base;
                count += 1;
            }
        }
        let scale = count as f64 / sum;
        for seq_weights in &mut weights {
            for w in seq_weights {
                *w *= scale;
            }
        }
    }

    let mut tape = Tape::new();
    let embed = EmbeddingVar::register(&mut tape, &model.embed);
    let core = RnnStackVar::register(&mut tape, &model.core);
    let out = LinearVar::register(&mut tape, &model.out);
    let mut param_ids = vec![embed.table];
    param_ids.extend(core.param_ids());
    param_ids.extend([out.w, out.b]);

    let mut loss: Option<usize> = None;
    for (bi, &idx) in batch.iter().enumerate() {
        let item = &items[idx];
        let mut state = core.zero_state(&mut tape, model.core.hidden());
        for (j, (&input, &target)) in item.inputs.iter().zip(&item.targets).enumerate() {
            let x = embed.lookup(&mut tape, input);
            state = core.step(&mut tape, x, &state);
            let h = *state.last().expect("stack has layers");
            let logits = out.apply(&mut tape, h);
            let term = tape.weighted_nll(logits, target as usize, weights[bi][j]);
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

fn heldout_perplexity(
    model: &NnlmModel,
    sources: &[Vec<LmItem>],
    heldout: &[(usize, usize)],
) -> f64 {
    let mut nll = 0.0;
    let mut count = 0usize;
    for &(si, idx) in heldout {
        let item = &sources[si][idx];
        let mut state = model.core.zero_state();
        for (&input, &target) in item.inputs.iter().zip(&item.targets) {
            state = model.core.step(&model.embed.row(input), &state);
            let h = state.last().expect("stack has layers");
            let log_probs = Matrix::row_log_softmax(model.out.apply(h).row(0));
            nll += -log_probs[target as usize];
            count += 1;
        }
    }
    (nll / count.max(1) as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SourceTag;

    fn small_vocab(n: usize) -> (Vocabulary, Vec<String>) {
        let words: Vec<String> = (0..n).map(|i| format!("t{i:02}")).collect();
        (Vocabulary::from_words(words.iter().cloned()), words)
    }

    fn chain_scored(
        vocab: &Vocabulary,
        words: &[String],
        count: usize,
        len: usize,
        seed: u64,
        score_of: impl Fn(usize) -> f64,
    ) -> Vec<ScoredSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut idx = rng.gen_range(0..words.len());
                let mut ids = Vec::with_capacity(len);
                let mut scores = Vec::with_capacity(len);
                for _ in 0..len {
                    ids.push(vocab.id(&words[idx]).unwrap());
                    scores.push(score_of(idx));
                    idx = if rng.gen::<f64>() < 0.7 {
                        (idx * 3 + 1) % words.len()
                    } else {
                        rng.gen_range(0..words.len())
                    };
                }
                ScoredSequence::new(WordSequence::real(ids), scores, 0.02).unwrap()
            })
            .collect()
    }

    fn tiny_config(seed: u64, alpha: f64) -> TrainingConfig {
        TrainingConfig {
            embed_dim: 10,
            hidden_dim: 16,
            layers: 2,
            alpha,
            epochs: 4,
            batch_size: 16,
            learning_rate: 0.02,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn token_weight_values() {
        assert_eq!(token_weight(0.0, 7.3).unwrap(), 1.0);
        assert_eq!(token_weight(1.0, 3.0).unwrap(), 3.0);
        assert!((token_weight(0.5, 4.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(token_weight(-0.1, 2.0).is_err());
        assert!(token_weight(1.1, 2.0).is_err());
        assert!(token_weight(0.5, 0.9).is_err());
    }

    #[test]
    fn token_weight_is_monotone() {
        let mut prev = 0.0;
        for i in 0..=10 {
            let s = i as f64 / 10.0;
            let w = token_weight(s, 3.0).unwrap();
            assert!(w >= prev);
            prev = w;
        }
        assert!(token_weight(0.7, 5.0).unwrap() > token_weight(0.7, 2.0).unwrap());
    }

    #[test]
    fn alpha_below_one_is_rejected() {
        let (vocab, words) = small_vocab(8);
        let corpus = chain_scored(&vocab, &words, 10, 5, 1, |_| 0.1);
        assert!(matches!(
            train_nnlm(&[(corpus, 1.0)], &vocab, tiny_config(1, 0.5)),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn untrained_model_has_uniform_perplexity() {
        let (vocab, words) = small_vocab(13);
        let model = NnlmModel::untrained(vocab.clone(), tiny_config(3, 1.0)).unwrap();
        let k = model.output_len() as f64;
        let corpus: Vec<WordSequence> = chain_scored(&vocab, &words, 20, 6, 4, |_| 0.0)
            .into_iter()
            .map(|s| s.words)
            .collect();
        let ppl = model.perplexity(&corpus).unwrap();
        assert!((ppl - k).abs() / k < 0.001, "ppl {ppl} vs k {k}");
        assert!(matches!(
            model.perplexity(&[]),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn alpha_one_matches_unweighted_trainer_bit_for_bit() {
        let (vocab, words) = small_vocab(12);
        let corpus = chain_scored(&vocab, &words, 120, 6, 5, |i| {
            if i % 3 == 0 {
                0.8
            } else {
                0.05
            }
        });
        let config = tiny_config(11, 1.0);
        let (weighted, wlog) =
            train_nnlm(&[(corpus.clone(), 1.0)], &vocab, config.clone()).unwrap();
        let (plain, plog) = train_nnlm_unweighted(&[(corpus, 1.0)], &vocab, config).unwrap();
        assert_eq!(weighted.param_bits(), plain.param_bits());
        assert_eq!(wlog.batch_losses.len(), plog.batch_losses.len());
        for (a, b) in wlog.batch_losses.iter().zip(&plog.batch_losses) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scores_make_alpha_irrelevant() {
        let (vocab, words) = small_vocab(10);
        let mut corpus = chain_scored(&vocab, &words, 80, 5, 7, |_| 0.0);
        for s in &mut corpus {
            s.eos_score = 0.0;
        }
        let (a, _) = train_nnlm(&[(corpus.clone(), 1.0)], &vocab, tiny_config(13, 3.0)).unwrap();
        let (b, _) = train_nnlm(&[(corpus, 1.0)], &vocab, tiny_config(13, 1.0)).unwrap();
        assert_eq!(a.param_bits(), b.param_bits());
    }

    #[test]
    fn weighted_loss_decomposes_over_tokens() {
        // total weighted loss of one batch equals the independent per-token
        // recomputation from step log-probs and token_weight
        let (vocab, words) = small_vocab(10);
        let corpus = chain_scored(&vocab, &words, 12, 5, 17, |i| (i as f64 / 12.0).min(1.0));
        let config = TrainingConfig {
            epochs: 1,
            batch_size: corpus.len(),
            holdout_every: usize::MAX,
            ..tiny_config(19, 2.5)
        };
        let (model, log) = train_nnlm(&[(corpus.clone(), 1.0)], &vocab, config.clone()).unwrap();
        // the single recorded batch loss was computed at init params; rebuild
        // an init-state model to recompute it independently
        let init = NnlmModel::untrained(vocab.clone(), config.clone()).unwrap();
        let mut expected = 0.0;
        for scored in &corpus {
            let lps = init.step_log_probs(&scored.words);
            let scores = scored.scores_with_eos();
            let n = lps.len() as f64;
            for (lp, s) in lps.iter().zip(&scores) {
                expected +=
                    token_weight(*s, config.alpha).unwrap() * (-lp) / (n * corpus.len() as f64);
            }
        }
        assert!(
            (log.batch_losses[0] - expected).abs() < 1e-12,
            "batch {} vs recomputed {expected}",
            log.batch_losses[0]
        );
        let _ = model;
    }

    #[test]
    fn gradient_scales_linearly_with_weight() {
        // a token with s=1 contributes exactly α times the gradient of the
        // same token with s=0
        let (vocab, words) = small_vocab(8);
        let seq = ScoredSequence::new(
            vocab.encode(&[words[0].as_str(), words[1].as_str()], SourceTag::Real),
            vec![1.0, 0.0],
            0.0,
        )
        .unwrap();
        let zero = ScoredSequence::new(seq.words.clone(), vec![0.0, 0.0], 0.0).unwrap();
        let alpha = 3.0;
        let config = TrainingConfig {
            epochs: 1,
            batch_size: 1,
            holdout_every: usize::MAX,
            ..tiny_config(23, alpha)
        };
        // compute the first-batch gradient of the embedding for both score
        // vectors at identical init, isolating the first target's term by
        // differencing
        let grad_of = |scored: &ScoredSequence, a: f64| {
            let mut model = NnlmModel::untrained(
                vocab.clone(),
                TrainingConfig {
                    alpha: a,
                    ..config.clone()
                },
            )
            .unwrap();
            let item = model.item(scored).unwrap();
            let mut adam = Adam::new(
                AdamConfig::with_lr(0.0),
                &model
                    .param_blocks()
                    .iter()
                    .map(|(_, m)| m.shape())
                    .collect::<Vec<_>>(),
            );
            // lr 0 step: params unchanged, we read the loss only; instead
            // grab gradients via a manual tape
            let mut tape = Tape::new();
            let embed = EmbeddingVar::register(&mut tape, &model.embed);
            let core = RnnStackVar::register(&mut tape, &model.core);
            let out = LinearVar::register(&mut tape, &model.out);
            let mut state = core.zero_state(&mut tape, model.core.hidden());
            let mut loss: Option<usize> = None;
            let n = item.targets.len() as f64;
            for (j, (&input, &target)) in item.inputs.iter().zip(&item.targets).enumerate() {
                let x = embed.lookup(&mut tape, input);
                state = core.step(&mut tape, x, &state);
                let h = *state.last().unwrap();
                let logits = out.apply(&mut tape, h);
                let w = token_weight(item.scores[j], a).unwrap() / n;
                let term = tape.weighted_nll(logits, target as usize, w);
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term),
                });
            }
            tape.backward(loss.unwrap());
            let g = tape.grad(embed.table).clone();
            let _ = &mut adam;
            let _ = &mut model;
            g
        };
        let g_scored = grad_of(&seq, alpha);
        let g_zero_at_alpha = grad_of(&zero, alpha);
        let g_zero_at_one = grad_of(&zero, 1.0);
        // s = 0 everywhere: alpha must not matter at all
        for (a, b) in g_zero_at_alpha.data().iter().zip(g_zero_at_one.data()) {
            assert_eq!(a, b);
        }
        // difference attributable to the first target scales by alpha:
        // grad(seq) - grad(zero) = (alpha - 1) * grad_first_term
        // verified through the loss side in weighted_loss_decomposes; here
        // check the first-token embedding row gradient ratio directly
        let bos_row = Vocabulary::BOS_ID as usize;
        let delta: Vec<f64> = g_scored
            .row(bos_row)
            .iter()
            .zip(g_zero_at_alpha.row(bos_row))
            .map(|(a, b)| a - b)
            .collect();
        // the bos row only receives gradient from the first step, whose
        // weight moved from 1 to alpha
        let base: Vec<f64> = g_zero_at_alpha.row(bos_row).to_vec();
        for (d, b) in delta.iter().zip(&base) {
            if b.abs() > 1e-12 {
                assert!(
                    ((d / b) - (alpha - 1.0)).abs() < 1e-9,
                    "ratio {} vs {}",
                    d / b,
                    alpha - 1.0
                );
            }
        }
    }

    #[test]
    fn training_improves_perplexity_and_generalizes() {
        let (vocab, words) = small_vocab(16);
        let corpus = chain_scored(&vocab, &words, 400, 6, 29, |_| 0.1);
        let config = TrainingConfig {
            epochs: 8,
            ..tiny_config(31, 1.0)
        };
        let (model, log) = train_nnlm(&[(corpus.clone(), 1.0)], &vocab, config).unwrap();
        let train_seqs: Vec<WordSequence> =
            corpus.iter().take(100).map(|s| s.words.clone()).collect();
        let heldout_seqs: Vec<WordSequence> = chain_scored(&vocab, &words, 100, 6, 999, |_| 0.1)
            .into_iter()
            .map(|s| s.words)
            .collect();
        let train_ppl = model.perplexity(&train_seqs).unwrap();
        let held_ppl = model.perplexity(&heldout_seqs).unwrap();
        assert!(train_ppl < vocab.len() as f64);
        assert!(train_ppl <= held_ppl * 1.02, "train {train_ppl} vs held {held_ppl}");
        assert!(log.best_heldout_ppl < vocab.len() as f64);
    }

    #[test]
    fn ppl_matches_independent_per_token_recomputation() {
        let (vocab, words) = small_vocab(10);
        let corpus = chain_scored(&vocab, &words, 60, 5, 37, |_| 0.2);
        let (model, _) = train_nnlm(&[(corpus.clone(), 1.0)], &vocab, tiny_config(41, 1.0)).unwrap();
        let seqs: Vec<WordSequence> = corpus.iter().take(20).map(|s| s.words.clone()).collect();
        let ppl = model.perplexity(&seqs).unwrap();
        // independent route: score_continuation per token
        let mut nll = 0.0;
        let mut count = 0usize;
        for seq in &seqs {
            let tokens = model.encode_tokens(seq);
            let mut prefix: Vec<u32> = Vec::new();
            for &tok in &tokens {
                nll += -model.score_continuation(&prefix, tok);
                prefix.push(tok);
                count += 1;
            }
            nll += -model.score_continuation(&prefix, Vocabulary::EOS_ID);
            count += 1;
        }
        let recomputed = (nll / count as f64).exp();
        assert!(
            (ppl - recomputed).abs() < 1e-9,
            "ppl {ppl} vs recomputed {recomputed}"
        );
    }

    #[test]
    fn continuation_distribution_normalizes() {
        let (vocab, words) = small_vocab(9);
        let corpus = chain_scored(&vocab, &words, 50, 5, 43, |_| 0.1);
        let (model, _) = train_nnlm(&[(corpus, 1.0)], &vocab, tiny_config(47, 1.0)).unwrap();
        let prefix = [vocab.id(&words[2]).unwrap(), vocab.id(&words[5]).unwrap()];
        let total: f64 = (0..model.output_len() as u32)
            .map(|t| model.score_continuation(&prefix, t).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn continuation_ignores_later_tokens() {
        let (vocab, words) = small_vocab(9);
        let corpus = chain_scored(&vocab, &words, 50, 5, 43, |_| 0.1);
        let (model, _) = train_nnlm(&[(corpus, 1.0)], &vocab, tiny_config(47, 1.0)).unwrap();
        let w: Vec<u32> = words.iter().map(|x| vocab.id(x).unwrap()).collect();
        let a = model.score_continuation(&[w[0], w[1]], w[2]);
        // step_log_probs on a longer sequence: the third step must agree
        let seq = WordSequence::real(vec![w[0], w[1], w[2], w[7], w[8]]);
        let lps = model.step_log_probs(&seq);
        assert_eq!(a.to_bits(), lps[2].to_bits());
    }

    #[test]
    fn subword_granularity_round_trips_scores() {
        let (vocab, words) = small_vocab(8);
        let corpus = chain_scored(&vocab, &words, 60, 4, 53, |i| if i % 2 == 0 { 0.9 } else { 0.1 });
        let config = TrainingConfig {
            granularity: Granularity::Subword,
            chunk_len: 2,
            ..tiny_config(59, 2.0)
        };
        let (model, _) = train_nnlm(&[(corpus.clone(), 1.0)], &vocab, config).unwrap();
        // tokens are chunks; "t07" with chunk_len 2 -> 2 tokens
        let seq = &corpus[0].words;
        let tokens = model.encode_tokens(seq);
        assert_eq!(tokens.len(), seq.len() * 2);
        let ppl = model.perplexity(&[seq.clone()]).unwrap();
        assert!(ppl.is_finite() && ppl > 1.0);
    }

    #[test]
    fn source_mixing_sees_both_corpora() {
        let (vocab, words) = small_vocab(12);
        // two disjoint halves of the vocabulary
        let a: Vec<ScoredSequence> = chain_scored(&vocab, &words[..6], 60, 5, 61, |_| 0.0);
        let b: Vec<ScoredSequence> = chain_scored(&vocab, &words[6..], 60, 5, 67, |_| 0.0);
        let config = TrainingConfig {
            epochs: 6,
            ..tiny_config(71, 1.0)
        };
        let (model, _) =
            train_nnlm(&[(a.clone(), 1.0), (b.clone(), 1.0)], &vocab, config).unwrap();
        let ppl_a = model
            .perplexity(&a.iter().map(|s| s.words.clone()).collect::<Vec<_>>())
            .unwrap();
        let ppl_b = model
            .perplexity(&b.iter().map(|s| s.words.clone()).collect::<Vec<_>>())
            .unwrap();
        // both sources were learned (far below uniform)
        let uniform = vocab.len() as f64;
        assert!(ppl_a < uniform * 0.8, "ppl_a {ppl_a}");
        assert!(ppl_b < uniform * 0.8, "ppl_b {ppl_b}");
    }

    #[test]
    fn reproducible_checkpoints() {
        let (vocab, words) = small_vocab(10);
        let corpus = chain_scored(&vocab, &words, 80, 5, 73, |i| (i % 3) as f64 / 3.0);
        let (a, _) = train_nnlm(&[(corpus.clone(), 1.0)], &vocab, tiny_config(79, 2.0)).unwrap();
        let (b, _) = train_nnlm(&[(corpus, 1.0)], &vocab, tiny_config(79, 2.0)).unwrap();
        assert_eq!(a.param_bits(), b.param_bits());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab, words) = small_vocab(10);
        let corpus = chain_scored(&vocab, &words, 60, 5, 83, |_| 0.3);
        let (model, log) = train_nnlm(&[(corpus.clone(), 1.0)], &vocab, tiny_config(89, 2.0)).unwrap();
        let model_dir = dir.path().join("nnlm");
        model.save(&model_dir).unwrap();
        write_train_log_jsonl(&log, &model_dir.join("train_log.jsonl")).unwrap();
        let loaded = NnlmModel::load(&model_dir).unwrap();
        assert_eq!(model.param_bits(), loaded.param_bits());
        let seq = corpus[0].words.clone();
        assert_eq!(
            model.perplexity(&[seq.clone()]).unwrap().to_bits(),
            loaded.perplexity(&[seq]).unwrap().to_bits()
        );
    }
}
