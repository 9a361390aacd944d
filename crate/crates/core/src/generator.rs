//! Multi-task text generator: one autoregressive word-level LM whose trunk
//! feeds two heads — a generation head over the vocabulary and a
//! classification head scoring the current token's fallibility — trained
//! jointly and decoded in a single trunk pass per sequence.
//!
//! At trunk step j the generation head predicts the *next* token while the
//! classification head scores the token just consumed, so sampling a token
//! and reading its score costs exactly one trunk step.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::AnnotatedPair;
use crate::corpus::{SourceTag, Vocabulary, WordSequence};
use crate::error::{Error, Result};
use crate::numkit::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Matrix, Tape, VarId};
use crate::predictor::ScoredSequence;
use crate::rnn::{
    rnn_param_blocks, rnn_param_blocks_mut, Embedding, EmbeddingVar, Linear, LinearVar, RnnStack,
    RnnStackVar,
};
use crate::train::{epoch_batches, holdout_split, splitmix64};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Weight of the classification task in the joint loss.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub holdout_every: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            embed_dim: 20,
            hidden_dim: 40,
            layers: 2,
            lambda: 1.0,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 0,
            holdout_every: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum DecodeMode {
    Greedy,
    Temperature(f64),
    TopK(usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub count: usize,
    pub max_len: usize,
    pub mode: DecodeMode,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            count: 100,
            max_len: 20,
            mode: DecodeMode::Temperature(1.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GenerationReport {
    pub requested: usize,
    pub emitted: usize,
    pub dropped_empty: usize,
    pub trunk_steps: u64,
    pub mean_len: f64,
    pub mean_score: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped_duplicate: usize,
    pub dropped_length: usize,
}

pub struct GeneratorModel {
    vocab: Vocabulary,
    config: GeneratorConfig,
    embed: Embedding,
    trunk: RnnStack,
    lm_head: Linear,
    cls_head: Linear,
}

#[derive(Clone, Debug)]
pub struct GenEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_joint_loss: f64,
    pub heldout_lm_ppl: f64,
    pub heldout_cls_loss: f64,
}

#[derive(Clone, Debug)]
pub struct GeneratorTrainLog {
    pub epochs: Vec<GenEpochStats>,
    pub best_epoch: usize,
    pub best_heldout_joint_loss: f64,
}

struct GenItem {
    /// `<bos>`, words, `<eos>`.
    input: Vec<u32>,
    /// Classification targets for trunk states 1..=L+1 (word labels then the
    /// `<eos>` label).
    cls_targets: Vec<usize>,
}

impl GeneratorModel {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn init(vocab: Vocabulary, config: GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x67656e65));
        let embed = Embedding::init(vocab.len(), config.embed_dim, &mut rng);
        let trunk = RnnStack::init(config.embed_dim, config.hidden_dim, config.layers, &mut rng);
        let lm_head = Linear::zeros(config.hidden_dim, vocab.len());
        let cls_head = Linear::zeros(config.hidden_dim, 2);
        GeneratorModel {
            vocab,
            config,
            embed,
            trunk,
            lm_head,
            cls_head,
        }
    }

    fn item(&self, pair: &AnnotatedPair) -> GenItem {
        let mut input = Vec::with_capacity(pair.reference.len() + 2);
        input.push(Vocabulary::BOS_ID);
        input.extend_from_slice(&pair.reference.ids);
        input.push(Vocabulary::EOS_ID);
        let cls_targets = pair
            .labels_with_eos()
            .iter()
            .map(|&l| l as usize)
            .collect();
        GenItem { input, cls_targets }
    }

    fn param_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut blocks = vec![("embed".to_string(), &self.embed.table)];
        blocks.extend(rnn_param_blocks("trunk", &self.trunk));
        blocks.push(("lm.w".to_string(), &self.lm_head.w));
        blocks.push(("lm.b".to_string(), &self.lm_head.b));
        blocks.push(("cls.w".to_string(), &self.cls_head.w));
        blocks.push(("cls.b".to_string(), &self.cls_head.b));
        blocks
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut blocks = vec![&mut self.embed.table];
        blocks.extend(rnn_param_blocks_mut(&mut self.trunk));
        blocks.push(&mut self.lm_head.w);
        blocks.push(&mut self.lm_head.b);
        blocks.push(&mut self.cls_head.w);
        blocks.push(&mut self.cls_head.b);
        blocks
    }

    /// Generates `config.count` scored sequences. Zero-length generations are
    /// dropped and counted; each kept sequence is tagged `generated`.
    pub fn generate_scored(
        &self,
        config: &GenerationConfig,
    ) -> Result<(Vec<ScoredSequence>, GenerationReport)> {
        if config.max_len < 1 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        match config.mode {
            DecodeMode::Temperature(t) if !(t > 0.0) => {
                return Err(Error::InvalidParameter("temperature must be > 0".into()));
            }
            DecodeMode::TopK(k) if k < 1 || k > self.vocab.len() => {
                return Err(Error::InvalidParameter(format!(
                    "top-k must be in 1..={}",
                    self.vocab.len()
                )));
            }
            _ => {}
        }
        let mut report = GenerationReport {
            requested: config.count,
            ..Default::default()
        };
        let mut out = Vec::with_capacity(config.count);
        let mut total_words = 0usize;
        let mut score_sum = 0.0;
        let mut score_count = 0usize;
        for i in 0..config.count {
            let mut rng =
                ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ (i as u64).wrapping_mul(0x9e37)));
            let (seq, steps) = self.decode_one(config, &mut rng);
            report.trunk_steps += steps;
            if seq.words.is_empty() {
                report.dropped_empty += 1;
                continue;
            }
            total_words += seq.words.len();
            score_sum += seq.word_scores.iter().sum::<f64>() + seq.eos_score;
            score_count += seq.word_scores.len() + 1;
            out.push(seq);
        }
        report.emitted = out.len();
        report.mean_len = if out.is_empty() {
            0.0
        } else {
            total_words as f64 / out.len() as f64
        };
        report.mean_score = if score_count == 0 {
            0.0
        } else {
            score_sum / score_count as f64
        };
        Ok((out, report))
    }

    /// Decodes one sequence; returns it with the number of trunk steps spent
    /// (`words + 2`: one for `<bos>`, one per word, one for `<eos>`).
    fn decode_one(&self, config: &GenerationConfig, rng: &mut ChaCha8Rng) -> (ScoredSequence, u64) {
        let mut steps = 0u64;
        let mut state = self.trunk.zero_state();
        let mut step = |token: u32, state: &[Matrix]| -> Vec<Matrix> {
            steps += 1;
            self.trunk.step(&self.embed.row(token), state)
        };
        state = step(Vocabulary::BOS_ID, &state);
        let mut words = Vec::new();
        let mut scores = Vec::new();
        loop {
            let h = state.last().expect("stack has layers");
            let logits = self.lm_head.apply(h);
            let next = choose_token(logits.row(0), config.mode, rng);
            if next == Vocabulary::EOS_ID || words.len() >= config.max_len {
                break;
            }
            state = step(next, &state);
            let cls = self.cls_head.apply(state.last().expect("stack has layers"));
            scores.push(Matrix::row_log_softmax(cls.row(0))[1].exp());
            words.push(next);
        }
        // one final step consuming <eos> yields its score in the same pass
        state = step(Vocabulary::EOS_ID, &state);
        let cls = self.cls_head.apply(state.last().expect("stack has layers"));
        let eos_score = Matrix::row_log_softmax(cls.row(0))[1].exp();
        (
            ScoredSequence {
                words: WordSequence::new(words, SourceTag::Generated),
                word_scores: scores,
                eos_score,
            },
            steps,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = GeneratorMeta {
            kind: "generator".into(),
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
        let meta: GeneratorMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad generator meta: {e}")))?;
        let vocab = Vocabulary::load_json(&dir.join("vocab.json"))?;
        let mut model = Self::init(vocab, meta.config);
        let blocks = load_checkpoint(&dir.join("weights.bin"))?;
        restore_blocks(&mut model.param_blocks_mut(), blocks)?;
        Ok(model)
    }
}

pub(crate) fn restore_blocks(
    slots: &mut [&mut Matrix],
    blocks: Vec<(String, Matrix)>,
) -> Result<()> {
    if blocks.len() != slots.len() {
        return Err(Error::Checkpoint(format!(
            "{} blocks in file, model has {}",
            blocks.len(),
            slots.len()
        )));
    }
    for ((_, matrix), slot) in blocks.into_iter().zip(slots.iter_mut()) {
        if matrix.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "block is {}x{}, model expects {}x{}",
                matrix.rows(),
                matrix.cols(),
                slot.rows(),
                slot.cols()
            )));
        }
        **slot = matrix;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    kind: String,
    config: GeneratorConfig,
}

fn choose_token(logits: &[f64], mode: DecodeMode, rng: &mut ChaCha8Rng) -> u32 {
    // <bos> and <unk> are never valid emissions
    let masked: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != Vocabulary::BOS_ID as usize && i != Vocabulary::UNK_ID as usize)
        .map(|(i, &l)| (i, l))
        .collect();
    match mode {
        DecodeMode::Greedy => {
            let mut best = masked[0];
            for &(i, l) in &masked[1..] {
                if l > best.1 {
                    best = (i, l);
                }
            }
            best.0 as u32
        }
        DecodeMode::Temperature(t) => {
            let scaled: Vec<f64> = masked.iter().map(|&(_, l)| l / t).collect();
            let idx = sample_softmax(&scaled, rng);
            masked[idx].0 as u32
        }
        DecodeMode::TopK(k) => {
            let mut sorted = masked.clone();
            sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            sorted.truncate(k);
            let logits: Vec<f64> = sorted.iter().map(|&(_, l)| l).collect();
            let idx = sample_softmax(&logits, rng);
            sorted[idx].0 as u32
        }
    }
}

fn sample_softmax(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let log_probs = Matrix::row_log_softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Joint loss for one batch on the tape. Returns the loss node.
///
/// Per sequence of length L (+`<eos>`): generation terms at states 0..=L
/// targeting the next input token, classification terms at states 1..=L+1
/// targeting the consumed token's label, both scaled by `1/((L+1)·batch)`,
/// the classification side additionally by λ.
fn build_joint_loss(
    tape: &mut Tape,
    embed: &EmbeddingVar,
    trunk: &RnnStackVar,
    lm_head: &LinearVar,
    cls_head: &LinearVar,
    hidden: usize,
    items: &[&GenItem],
    lambda: f64,
    with_cls_terms: bool,
) -> VarId {
    let mut loss: Option<VarId> = None;
    let add_term = |tape: &mut Tape, term: VarId, loss: &mut Option<VarId>| {
        *loss = Some(match *loss {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    };
    for item in items {
        let n_targets = item.input.len() - 1; // L + 1
        let base_w = 1.0 / (n_targets as f64 * items.len() as f64);
        let mut state = trunk.zero_state(tape, hidden);
        for j in 0..item.input.len() {
            let x = embed.lookup(tape, item.input[j]);
            state = trunk.step(tape, x, &state);
            let h = *state.last().expect("stack has layers");
            if j < n_targets {
                let lm_logits = lm_head.apply(tape, h);
                let term = tape.weighted_nll(lm_logits, item.input[j + 1] as usize, base_w);
                add_term(tape, term, &mut loss);
            }
            if j >= 1 && with_cls_terms {
                let cls_logits = cls_head.apply(tape, h);
                let term =
                    tape.weighted_nll(cls_logits, item.cls_targets[j - 1], lambda * base_w);
                add_term(tape, term, &mut loss);
            }
        }
    }
    loss.expect("non-empty batch")
}

/// Trains the joint generator. Returns the parameters from the epoch with the
/// best held-out joint loss.
pub fn train_generator(
    corpus: &[AnnotatedPair],
    vocab: &Vocabulary,
    config: GeneratorConfig,
) -> Result<(GeneratorModel, GeneratorTrainLog)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.lambda < 0.0 || !config.lambda.is_finite() {
        return Err(Error::InvalidParameter("lambda must be >= 0".into()));
    }
    let mut model = GeneratorModel::init(vocab.clone(), config.clone());
    let items: Vec<GenItem> = corpus.iter().map(|p| model.item(p)).collect();

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

    let mut log = GeneratorTrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_heldout_joint_loss: f64::INFINITY,
    };
    let mut best_params: Option<Vec<Matrix>> = None;

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in epoch_batches(&train_idx, config.batch_size, &mut batch_rng) {
            let batch_items: Vec<&GenItem> = batch.iter().map(|&i| &items[i]).collect();
            let mut tape = Tape::new();
            let embed = EmbeddingVar::register(&mut tape, &model.embed);
            let trunk = RnnStackVar::register(&mut tape, &model.trunk);
            let lm_head = LinearVar::register(&mut tape, &model.lm_head);
            let cls_head = LinearVar::register(&mut tape, &model.cls_head);
            let mut param_ids = vec![embed.table];
            param_ids.extend(trunk.param_ids());
            param_ids.extend([lm_head.w, lm_head.b, cls_head.w, cls_head.b]);
            let loss = build_joint_loss(
                &mut tape,
                &embed,
                &trunk,
                &lm_head,
                &cls_head,
                model.trunk.hidden(),
                &batch_items,
                config.lambda,
                true,
            );
            tape.backward(loss);
            let grads: Vec<Matrix> = param_ids.iter().map(|&id| tape.grad(id).clone()).collect();
            let grad_refs: Vec<&Matrix> = grads.iter().collect();
            loss_sum += tape.value(loss).scalar_value();
            batches += 1;
            drop(tape);
            let mut params = model.param_blocks_mut();
            adam.step(&mut params, &grad_refs)?;
        }
        let (heldout_joint, heldout_lm_ppl, heldout_cls) = if select_on_heldout {
            eval_heldout(&model, &items, &held_idx, config.lambda)
        } else {
            let train_loss = loss_sum / batches.max(1) as f64;
            (train_loss, f64::NAN, f64::NAN)
        };
        log.epochs.push(GenEpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            heldout_joint_loss: heldout_joint,
            heldout_lm_ppl,
            heldout_cls_loss: heldout_cls,
        });
        if heldout_joint < log.best_heldout_joint_loss {
            log.best_heldout_joint_loss = heldout_joint;
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

/// (mean joint loss, LM perplexity, mean classification loss) over an index
/// set via the inference path.
fn eval_heldout(
    model: &GeneratorModel,
    items: &[GenItem],
    indices: &[usize],
    lambda: f64,
) -> (f64, f64, f64) {
    let mut joint_sum = 0.0;
    let mut lm_nll = 0.0;
    let mut cls_nll = 0.0;
    let mut targets = 0usize;
    for &idx in indices {
        let item = &items[idx];
        let n_targets = item.input.len() - 1;
        let mut state = model.trunk.zero_state();
        let mut seq_lm = 0.0;
        let mut seq_cls = 0.0;
        for j in 0..item.input.len() {
            state = model.trunk.step(&model.embed.row(item.input[j]), &state);
            let h = state.last().expect("stack has layers");
            if j < n_targets {
                let log_probs = Matrix::row_log_softmax(model.lm_head.apply(h).row(0));
                seq_lm += -log_probs[item.input[j + 1] as usize];
            }
            if j >= 1 {
                let log_probs = Matrix::row_log_softmax(model.cls_head.apply(h).row(0));
                seq_cls += -log_probs[item.cls_targets[j - 1]];
            }
        }
        joint_sum += (seq_lm + lambda * seq_cls) / n_targets as f64;
        lm_nll += seq_lm;
        cls_nll += seq_cls;
        targets += n_targets;
    }
    let n = indices.len().max(1) as f64;
    let t = targets.max(1) as f64;
    (joint_sum / n, (lm_nll / t).exp(), cls_nll / t)
}

/// Drops duplicates of earlier sequences and out-of-range lengths,
/// order-preserving.
pub fn filter_generated(
    seqs: Vec<ScoredSequence>,
    dedup: bool,
    min_len: usize,
    max_len: usize,
) -> (Vec<ScoredSequence>, FilterReport) {
    let mut report = FilterReport::default();
    let mut seen: std::collections::HashSet<Vec<u32>> = Default::default();
    let mut out = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.words.len() < min_len || seq.words.len() > max_len {
            report.dropped_length += 1;
            continue;
        }
        if dedup && !seen.insert(seq.words.ids.clone()) {
            report.dropped_duplicate += 1;
            continue;
        }
        out.push(seq);
    }
    report.kept = out.len();
    (out, report)
}
