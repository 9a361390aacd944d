//! End-to-end domain-adaptation experiment: build synthetic domains and a
//! known channel, annotate a small dev set, train the score predictor and
//! the text generator, train LMs per focus temperature and per training
//! corpus, tune β on a dev split, and report fused WER/PPL per condition.
//!
//! Every random draw derives from the spec seed through named substreams, so
//! rerunning a spec reproduces the report byte for byte.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{Domain, DomainParams, NoiseParams};
use super::{
    evaluate_wer, fuse_with_scores, lm_log_probs, relative_reduction, WerBreakdown,
};
use crate::align::{annotate_corpus, AnnotateFlags, AnnotatedPair};
use crate::asrsim::{ChannelModel, NBestList};
use crate::corpus::{Sentence, Vocabulary, WordSequence};
use crate::error::{Error, Result};
use crate::generator::{
    train_generator, DecodeMode, GenerationConfig, GeneratorConfig, GeneratorModel,
};
use crate::nnlm::{train_nnlm, NnlmModel, TrainingConfig};
use crate::predictor::{train_predictor, PredictorConfig, PredictorModel, ScoredSequence};
use crate::train::substream_seed;
use rand::SeedableRng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub max_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataParams {
    /// Annotated (reference, hypothesis) pairs per domain.
    pub dev_pairs: usize,
    /// Target-domain text-only corpus size (also the OOD corpus size).
    pub text_sentences: usize,
    /// Held-out set for tuning β.
    pub devtune_sentences: usize,
    pub test_sentences: usize,
    /// Generated corpus size for the insufficient-text conditions.
    pub generated_sentences: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conditions {
    pub alpha_sweep: bool,
    pub generated_text: bool,
    pub annotation_transfer: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub target: DomainParams,
    pub ood: DomainParams,
    pub noise: NoiseParams,
    pub data: DataParams,
    pub predictor: ModelDims,
    pub predictor_bidirectional: bool,
    pub chunk_len: usize,
    pub generator: GeneratorParams,
    pub nnlm: ModelDims,
    /// Focus temperatures for the in-domain sweep; must contain 1.0.
    pub alphas: Vec<f64>,
    /// Temperatures compared on the generated corpus.
    pub gen_alphas: Vec<f64>,
    /// Temperature of the out-of-domain-annotation condition.
    pub transfer_alpha: f64,
    pub beta_grid: Vec<f64>,
    pub nbest: usize,
    pub length_norm: bool,
    pub conditions: Conditions,
}

impl ExperimentSpec {
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidParameter(format!(
            "bad experiment spec {}: {e}",
            path.display()
        )))
    }

    fn validate(&self) -> Result<()> {
        if self.nbest < 1 {
            return Err(Error::InvalidParameter("nbest must be >= 1".into()));
        }
        if self.beta_grid.is_empty() {
            return Err(Error::InvalidParameter("empty beta grid".into()));
        }
        if self.conditions.alpha_sweep && !self.alphas.contains(&1.0) {
            return Err(Error::InvalidParameter(
                "alpha sweep must include alpha = 1".into(),
            ));
        }
        if (self.conditions.annotation_transfer || self.conditions.generated_text)
            && !self.conditions.alpha_sweep
        {
            return Err(Error::InvalidParameter(
                "transfer and generated-text conditions need the alpha sweep's conventional row"
                    .into(),
            ));
        }
        for &a in self.alphas.iter().chain(&self.gen_alphas) {
            if a < 1.0 {
                return Err(Error::InvalidParameter(format!("alpha {a} below 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub corpus: String,
    pub annotation: String,
    pub alpha: f64,
    pub beta: f64,
    pub wer: WerBreakdown,
    pub ppl: f64,
    /// Relative WER reduction versus the conventional (α = 1, in-domain
    /// text) row; positive is better.
    pub rel_wer_vs_conventional: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportCounts {
    pub seed: u64,
    pub test_sentences: usize,
    pub devtune_sentences: usize,
    pub test_ref_words: usize,
    pub truncated_test_lists: usize,
    pub generated_kept: usize,
    pub generated_dropped_empty: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: ExperimentSpec,
    pub no_lm_wer: WerBreakdown,
    pub rows: Vec<ConditionRow>,
    pub counts: ReportCounts,
}

impl EvalReport {
    pub fn row(&self, condition: &str, alpha: f64) -> Option<&ConditionRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.alpha == alpha)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:<14} {:<8} {:>6} {:>6} {:>9} {:>9} {:>10}\n",
            "condition", "corpus", "annot", "alpha", "beta", "WER", "PPL", "rel vs a=1"
        ));
        out.push_str(&format!(
            "{:<22} {:<14} {:<8} {:>6} {:>6} {:>9.4} {:>9} {:>10}\n",
            "no-lm", "-", "-", "-", "-", self.no_lm_wer.wer, "-", "-"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<22} {:<14} {:<8} {:>6} {:>6} {:>9.4} {:>9.2} {:>+9.1}%\n",
                row.condition,
                row.corpus,
                row.annotation,
                row.alpha,
                row.beta,
                row.wer.wer,
                row.ppl,
                100.0 * row.rel_wer_vs_conventional
            ));
        }
        out
    }
}

/// Everything the per-condition loop reuses.
struct Prepared {
    vocab: Vocabulary,
    devtune_refs: Vec<WordSequence>,
    devtune_lists: Vec<NBestList>,
    test_refs: Vec<WordSequence>,
    test_lists: Vec<NBestList>,
}

pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<EvalReport> {
    spec.validate().map_err(Error::in_stage("spec"))?;
    let seed = spec.seed;

    // -- domains ------------------------------------------------------------
    let stage = "domains";
    let target = Domain::build(spec.target.clone()).map_err(Error::in_stage(stage))?;
    let ood = Domain::build(spec.ood.clone()).map_err(Error::in_stage(stage))?;

    // -- corpora ------------------------------------------------------------
    let sample = |domain: &Domain, count: usize, name: &str| -> Vec<Sentence> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, name));
        domain.sample_sentences(count, &mut rng)
    };
    let target_dev = sample(&target, spec.data.dev_pairs, "corpora/target/dev");
    let target_text = sample(&target, spec.data.text_sentences, "corpora/target/text");
    let devtune = sample(&target, spec.data.devtune_sentences, "corpora/target/devtune");
    let test = sample(&target, spec.data.test_sentences, "corpora/target/test");
    let ood_dev = sample(&ood, spec.data.dev_pairs, "corpora/ood/dev");
    let ood_text = sample(&ood, spec.data.text_sentences, "corpora/ood/text");

    // -- vocabulary -----------------------------------------------------------
    // one shared tokenizer vocabulary over everything the experiment touches,
    // standing in for a pretrained tokenizer
    let stage = "vocabulary";
    let all_sentences: Vec<&Sentence> = target_dev
        .iter()
        .chain(&target_text)
        .chain(&devtune)
        .chain(&test)
        .chain(&ood_dev)
        .chain(&ood_text)
        .collect();
    let vocab = Vocabulary::build(
        all_sentences.iter().map(|s| s.words.as_slice()),
        1,
    )
    .map_err(Error::in_stage(stage))?
    .extended_with(target.all_words())
    .extended_with(ood.all_words());
    let encode =
        |sents: &[Sentence]| -> Vec<WordSequence> { sents.iter().map(|s| vocab.encode(&s.words, s.tag)).collect() };
    let target_dev = encode(&target_dev);
    let target_text = encode(&target_text);
    let devtune_refs = encode(&devtune);
    let test_refs = encode(&test);
    let ood_dev = encode(&ood_dev);
    let ood_text = encode(&ood_text);

    // -- channels -------------------------------------------------------------
    let stage = "channels";
    let target_channel = target
        .channel_config(&spec.noise, substream_seed(seed, "channel/target"))
        .bind(&vocab)
        .map_err(Error::in_stage(stage))?;
    let ood_channel = ood
        .channel_config(&spec.noise, substream_seed(seed, "channel/ood"))
        .bind(&vocab)
        .map_err(Error::in_stage(stage))?;

    // -- annotation -----------------------------------------------------------
    let stage = "annotate";
    let annotate_domain = |channel: &ChannelModel,
                           refs: &[WordSequence],
                           name: &str|
     -> Result<Vec<AnnotatedPair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, name));
        let pairs: Vec<(WordSequence, WordSequence)> = refs
            .iter()
            .map(|r| (r.clone(), channel.corrupt(r, &mut rng)))
            .collect();
        annotate_corpus(&pairs, AnnotateFlags::default())
    };
    let target_annotated =
        annotate_domain(&target_channel, &target_dev, "corrupt/target").map_err(Error::in_stage(stage))?;
    let ood_annotated =
        annotate_domain(&ood_channel, &ood_dev, "corrupt/ood").map_err(Error::in_stage(stage))?;

    // -- predictors -----------------------------------------------------------
    let stage = "predictor";
    let predictor_config = |name: &str| PredictorConfig {
        embed_dim: spec.predictor.embed_dim,
        hidden_dim: spec.predictor.hidden_dim,
        layers: 2,
        bidirectional: spec.predictor_bidirectional,
        chunk_len: spec.chunk_len,
        epochs: spec.predictor.epochs,
        batch_size: spec.predictor.batch_size,
        learning_rate: spec.predictor.learning_rate,
        seed: substream_seed(seed, name),
        holdout_every: 10,
    };
    let (target_predictor, _) =
        train_predictor(&target_annotated, &vocab, predictor_config("predictor/target"))
            .map_err(Error::in_stage(stage))?;
    let ood_predictor: Option<PredictorModel> = if spec.conditions.annotation_transfer {
        let (m, _) = train_predictor(&ood_annotated, &vocab, predictor_config("predictor/ood"))
            .map_err(Error::in_stage(stage))?;
        Some(m)
    } else {
        None
    };

    // -- scoring ----------------------------------------------------------------
    let scored_indomain = target_predictor.score_corpus(&target_text);
    let scored_transfer = ood_predictor
        .as_ref()
        .map(|p| p.score_corpus(&target_text));
    let ood_unscored: Vec<ScoredSequence> = ood_text
        .iter()
        .map(|s| ScoredSequence::unscored(s.clone()))
        .collect();

    // -- generator ---------------------------------------------------------------
    let stage = "generator";
    let mut generated: Vec<ScoredSequence> = Vec::new();
    let mut generated_dropped_empty = 0usize;
    if spec.conditions.generated_text {
        let config = GeneratorConfig {
            embed_dim: spec.generator.embed_dim,
            hidden_dim: spec.generator.hidden_dim,
            layers: 2,
            lambda: spec.generator.lambda,
            epochs: spec.generator.epochs,
            batch_size: spec.generator.batch_size,
            learning_rate: spec.generator.learning_rate,
            seed: substream_seed(seed, "generator"),
            holdout_every: 10,
        };
        let (model, _) =
            train_generator(&target_annotated, &vocab, config).map_err(Error::in_stage(stage))?;
        let mut round = 0u64;
        while generated.len() < spec.data.generated_sentences && round < 4 {
            let want = spec.data.generated_sentences - generated.len();
            let gen_config = GenerationConfig {
                count: want + want / 5 + 8,
                max_len: spec.generator.max_len,
                mode: DecodeMode::Temperature(spec.generator.temperature),
                seed: substream_seed(seed, &format!("generate/{round}")),
            };
            let (mut seqs, report) =
                model.generate_scored(&gen_config).map_err(Error::in_stage(stage))?;
            generated_dropped_empty += report.dropped_empty;
            seqs.truncate(want);
            generated.extend(seqs);
            round += 1;
        }
        let _ = drop_generator(model);
    }
    let generated_kept = generated.len();

    // -- n-best decoding -----------------------------------------------------------
    let stage = "decode";
    let decode =
        |refs: &[WordSequence], name: &str| -> Result<Vec<NBestList>> {
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, name));
            refs.iter()
                .map(|r| target_channel.decode_nbest(r, spec.nbest, &mut rng))
                .collect()
        };
    let devtune_lists = decode(&devtune_refs, "decode/devtune").map_err(Error::in_stage(stage))?;
    let test_lists = decode(&test_refs, "decode/test").map_err(Error::in_stage(stage))?;

    let prepared = Prepared {
        vocab,
        devtune_refs,
        devtune_lists,
        test_refs,
        test_lists,
    };

    // -- baseline (top ASR hypothesis) ------------------------------------------------
    let no_lm_hyps: Vec<WordSequence> = prepared
        .test_lists
        .iter()
        .map(|l| l.entries[0].hypothesis.clone())
        .collect();
    let no_lm_wer = evaluate_wer(&prepared.test_refs, &no_lm_hyps)?;

    // -- conditions -----------------------------------------------------------------
    let stage = "nnlm";
    let mut rows: Vec<ConditionRow> = Vec::new();
    let mut plan: Vec<(String, String, String, f64, &[ScoredSequence])> = Vec::new();
    if spec.conditions.alpha_sweep {
        for &alpha in &spec.alphas {
            plan.push((
                "alpha_sweep".into(),
                "target_text".into(),
                "target".into(),
                alpha,
                &scored_indomain,
            ));
        }
    }
    if spec.conditions.generated_text {
        plan.push((
            "ood_text".into(),
            "ood_text".into(),
            "none".into(),
            1.0,
            &ood_unscored,
        ));
        for &alpha in &spec.gen_alphas {
            plan.push((
                "generated_text".into(),
                "generated".into(),
                "target".into(),
                alpha,
                &generated,
            ));
        }
    }
    if spec.conditions.annotation_transfer {
        plan.push((
            "annotation_transfer".into(),
            "target_text".into(),
            "ood".into(),
            spec.transfer_alpha,
            scored_transfer.as_ref().expect("transfer predictor trained"),
        ));
    }

    for (condition, corpus_name, annotation, alpha, corpus) in plan {
        let row_name = format!("nnlm/{condition}/{annotation}/{corpus_name}/{alpha}");
        let config = TrainingConfig {
            embed_dim: spec.nnlm.embed_dim,
            hidden_dim: spec.nnlm.hidden_dim,
            layers: 2,
            alpha,
            use_eos_weight: true,
            epochs: spec.nnlm.epochs,
            batch_size: spec.nnlm.batch_size,
            learning_rate: spec.nnlm.learning_rate,
            seed: substream_seed(seed, &row_name),
            ..Default::default()
        };
        let (model, _) = train_nnlm(&[(corpus.to_vec(), 1.0)], &prepared.vocab, config)
            .map_err(Error::in_stage(stage))?;
        let (beta, wer, ppl) = tune_and_eval(&model, &prepared, &spec.beta_grid, spec.length_norm)
            .map_err(Error::in_stage("fusion"))?;
        rows.push(ConditionRow {
            condition,
            corpus: corpus_name,
            annotation,
            alpha,
            beta,
            wer,
            ppl,
            rel_wer_vs_conventional: 0.0,
        });
        log::info!(
            "{row_name}: beta {beta}, wer {:.4}, ppl {ppl:.2}",
            rows.last().unwrap().wer.wer
        );
    }

    // relative reductions versus the conventional in-domain row
    let conventional_wer = rows
        .iter()
        .find(|r| r.condition == "alpha_sweep" && r.alpha == 1.0)
        .map(|r| r.wer.wer)
        .unwrap_or(no_lm_wer.wer);
    for row in &mut rows {
        row.rel_wer_vs_conventional = relative_reduction(conventional_wer, row.wer.wer);
    }

    let report = EvalReport {
        spec: spec.clone(),
        no_lm_wer,
        counts: ReportCounts {
            seed,
            test_sentences: prepared.test_refs.len(),
            devtune_sentences: prepared.devtune_refs.len(),
            test_ref_words: no_lm_wer.ref_words,
            truncated_test_lists: prepared.test_lists.iter().filter(|l| l.truncated).count(),
            generated_kept,
            generated_dropped_empty,
        },
        rows,
    };

    if let Some(dir) = out_dir {
        write_report(&report, dir).map_err(Error::in_stage("report"))?;
    }
    Ok(report)
}

fn drop_generator(model: GeneratorModel) -> GeneratorModel {
    model
}

/// Grid-tunes β on the devtune lists (ties keep the smaller β), then
/// evaluates the chosen β on the test lists. Returns (β, test WER, test PPL).
fn tune_and_eval(
    model: &NnlmModel,
    prepared: &Prepared,
    beta_grid: &[f64],
    length_norm: bool,
) -> Result<(f64, WerBreakdown, f64)> {
    let devtune_lm: Vec<Vec<f64>> = prepared
        .devtune_lists
        .iter()
        .map(|l| lm_log_probs(model, l))
        .collect();
    let mut best_beta = beta_grid[0];
    let mut best_wer = f64::INFINITY;
    for &beta in beta_grid {
        let hyps: Vec<WordSequence> = prepared
            .devtune_lists
            .iter()
            .zip(&devtune_lm)
            .map(|(list, lm)| {
                fuse_with_scores(list, lm, beta, length_norm)
                    .map(|i| list.entries[i].hypothesis.clone())
            })
            .collect::<Result<_>>()?;
        let wer = evaluate_wer(&prepared.devtune_refs, &hyps)?.wer;
        if wer < best_wer {
            best_wer = wer;
            best_beta = beta;
        }
    }
    let test_hyps: Vec<WordSequence> = prepared
        .test_lists
        .iter()
        .map(|list| {
            let lm = lm_log_probs(model, list);
            fuse_with_scores(list, &lm, best_beta, length_norm)
                .map(|i| list.entries[i].hypothesis.clone())
        })
        .collect::<Result<_>>()?;
    let wer = evaluate_wer(&prepared.test_refs, &test_hyps)?;
    let ppl = model.perplexity(&prepared.test_refs)?;
    Ok((best_beta, wer, ppl))
}

/// Writes `report.json` and `report.txt`; returns the written paths.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    std::fs::write(&json_path, report.to_json() + "\n").map_err(|e| Error::io(&json_path, e))?;
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, report.to_table()).map_err(|e| Error::io(&txt_path, e))?;
    Ok(vec![json_path, txt_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_domain(name: &str, seed: u64) -> DomainParams {
        DomainParams {
            name: name.into(),
            content_words: 30,
            marked_every: 5,
            zipf_s: 1.1,
            sent_len_min: 5,
            sent_len_max: 9,
            p_core: 0.3,
            p_chain: 0.5,
            seed,
        }
    }

    pub(super) fn micro_spec() -> ExperimentSpec {
        ExperimentSpec {
            seed: 7,
            target: micro_domain("target", 101),
            ood: micro_domain("ood", 202),
            noise: NoiseParams {
                rho_marked: 0.7,
                rho_base: 0.02,
                del: 0.01,
                ins: 0.005,
            },
            data: DataParams {
                dev_pairs: 60,
                text_sentences: 150,
                devtune_sentences: 40,
                test_sentences: 50,
                generated_sentences: 120,
            },
            predictor: ModelDims {
                embed_dim: 12,
                hidden_dim: 20,
                epochs: 4,
                batch_size: 16,
                learning_rate: 0.02,
            },
            predictor_bidirectional: true,
            chunk_len: 3,
            generator: GeneratorParams {
                embed_dim: 12,
                hidden_dim: 24,
                epochs: 4,
                batch_size: 16,
                learning_rate: 0.02,
                lambda: 1.0,
                temperature: 1.0,
                max_len: 12,
            },
            nnlm: ModelDims {
                embed_dim: 12,
                hidden_dim: 24,
                epochs: 3,
                batch_size: 16,
                learning_rate: 0.02,
            },
            alphas: vec![1.0, 3.0],
            gen_alphas: vec![1.0, 3.0],
            transfer_alpha: 3.0,
            beta_grid: vec![0.2, 0.5],
            nbest: 4,
            length_norm: false,
            conditions: Conditions {
                alpha_sweep: true,
                generated_text: true,
                annotation_transfer: true,
            },
        }
    }

    #[test]
    fn noiseless_channel_gives_zero_wer_everywhere() {
        let mut spec = micro_spec();
        spec.noise = NoiseParams {
            rho_marked: 0.0,
            rho_base: 0.0,
            del: 0.0,
            ins: 0.0,
        };
        spec.alphas = vec![1.0];
        spec.conditions = Conditions {
            alpha_sweep: true,
            generated_text: false,
            annotation_transfer: false,
        };
        let report = run_experiment(&spec, None).unwrap();
        assert_eq!(report.no_lm_wer.wer, 0.0);
        for row in &report.rows {
            assert_eq!(row.wer.wer, 0.0, "condition {}", row.condition);
        }
        // noiseless channel cannot produce n distinct hypotheses
        assert_eq!(report.counts.truncated_test_lists, report.counts.test_sentences);
    }

    #[test]
    fn report_is_byte_deterministic() {
        let mut spec = micro_spec();
        // keep the double run cheap
        spec.conditions.generated_text = false;
        spec.conditions.annotation_transfer = false;
        spec.alphas = vec![1.0];
        let a = run_experiment(&spec, None).unwrap();
        let b = run_experiment(&spec, None).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn full_micro_run_covers_all_conditions() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&micro_spec(), Some(dir.path())).unwrap();
        assert!(report.no_lm_wer.wer > 0.05, "baseline {}", report.no_lm_wer.wer);
        // rows: 2 sweep + 1 ood + 2 generated + 1 transfer
        assert_eq!(report.rows.len(), 6);
        assert!(report.row("alpha_sweep", 1.0).is_some());
        assert!(report.row("generated_text", 3.0).is_some());
        assert!(report.row("annotation_transfer", 3.0).is_some());
        assert_eq!(report.counts.generated_kept, 120);
        for row in &report.rows {
            assert!(row.ppl.is_finite() && row.ppl > 1.0);
            assert!(report.spec.beta_grid.contains(&row.beta));
        }
        // conventional row's relative reduction is exactly zero
        assert_eq!(
            report.row("alpha_sweep", 1.0).unwrap().rel_wer_vs_conventional,
            0.0
        );
        assert!(dir.path().join("report.json").is_file());
        assert!(dir.path().join("report.txt").is_file());
        let table = report.to_table();
        assert!(table.contains("no-lm"));
        assert!(table.contains("alpha_sweep"));
    }

    #[test]
    fn invalid_spec_names_the_stage() {
        let mut spec = micro_spec();
        spec.alphas = vec![2.0, 3.0]; // missing the conventional row
        let err = run_experiment(&spec, None).unwrap_err();
        assert_eq!(err.stage_name(), Some("spec"));
        assert!(err.to_string().contains("spec"));
    }

    #[test]
    fn spec_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let spec = micro_spec();
        std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
        let loaded = ExperimentSpec::load_json(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&loaded).unwrap(),
            serde_json::to_string(&spec).unwrap()
        );
    }
}
