//! Text representation, vocabulary construction, deterministic subword
//! tokenization, and JSONL corpus I/O shared by all other modules.
//!
//! Two token granularities exist side by side: whole words (the unit the
//! channel simulator and the word-level LM operate on) and fixed-length
//! character chunks (the unit the fallibility predictor operates on). The
//! chunking is deterministic so the word↔subword mapping is reproducible
//! across runs and platforms.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub type WordId = u32;
pub type SubwordId = u32;

/// Where a sentence came from: real text or model-generated text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Real,
    Generated,
}

impl Default for SourceTag {
    fn default() -> Self {
        SourceTag::Real
    }
}

/// Dense word vocabulary with reserved `<bos>`, `<eos>`, `<unk>` entries at
/// ids 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, WordId>,
}

impl Vocabulary {
    pub const BOS_ID: WordId = 0;
    pub const EOS_ID: WordId = 1;
    pub const UNK_ID: WordId = 2;

    /// Builds a vocabulary from a corpus of sentences. Words with frequency
    /// >= `min_count` are kept, ordered by descending frequency with ties
    /// broken lexicographically, after the three reserved tokens.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        if min_count < 1 {
            return Err(Error::InvalidParameter("min_count must be >= 1".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut sentences = 0usize;
        for sentence in corpus {
            sentences += 1;
            for word in sentence.as_ref() {
                *counts.entry(word.clone()).or_insert(0) += 1;
            }
        }
        if sentences == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(w, c)| *c as usize >= min_count && !is_reserved(w))
            .collect();
        kept.sort_by(|(wa, ca), (wb, cb)| cb.cmp(ca).then_with(|| wa.cmp(wb)));
        Ok(Self::from_words(kept.into_iter().map(|(w, _)| w)))
    }

    /// Builds a vocabulary from an explicit word order (reserved tokens are
    /// prepended; duplicates and reserved names in the input are dropped).
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut out = Vec::with_capacity(8);
        out.push(BOS.to_string());
        out.push(EOS.to_string());
        out.push(UNK.to_string());
        let mut index: HashMap<String, WordId> = out
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as WordId))
            .collect();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), out.len() as WordId);
                out.push(w);
            }
        }
        Vocabulary { words: out, index }
    }

    /// Returns a copy of this vocabulary extended with any missing words,
    /// appended in the order given.
    pub fn extended_with<I: IntoIterator<Item = String>>(&self, extra: I) -> Self {
        let mut words: Vec<String> = self.words[3..].to_vec();
        let seen: HashMap<&String, ()> = words.iter().map(|w| (w, ())).collect();
        let mut appended = Vec::new();
        for w in extra {
            if !is_reserved(&w) && !seen.contains_key(&w) && !appended.contains(&w) {
                appended.push(w);
            }
        }
        drop(seen);
        words.extend(appended);
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn id(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> WordId {
        self.id(word).unwrap_or(Self::UNK_ID)
    }

    /// Encodes surface words to ids, mapping out-of-vocabulary words to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S], tag: SourceTag) -> WordSequence {
        WordSequence {
            ids: words.iter().map(|w| self.id_or_unk(w.as_ref())).collect(),
            tag,
        }
    }

    pub fn decode<'a>(&'a self, seq: &WordSequence) -> Vec<&'a str> {
        seq.ids.iter().map(|&id| self.word(id)).collect()
    }

    pub fn decode_to_sentence(&self, seq: &WordSequence) -> Sentence {
        Sentence {
            words: seq.ids.iter().map(|&id| self.word(id).to_string()).collect(),
            tag: seq.tag,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            words: self.words.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("vocabulary serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("bad vocabulary file: {e}"),
        })?;
        if file.words.len() < 3 || file.words[0] != BOS || file.words[1] != EOS || file.words[2] != UNK
        {
            return Err(Error::InvalidParameter(
                "vocabulary file must start with <bos>, <eos>, <unk>".into(),
            ));
        }
        Ok(Self::from_words(file.words.into_iter().skip(3)))
    }
}

fn is_reserved(word: &str) -> bool {
    word == BOS || word == EOS || word == UNK
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

/// A sentence as word ids under some [`Vocabulary`] (`<bos>`/`<eos>` excluded).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WordSequence {
    pub ids: Vec<WordId>,
    pub tag: SourceTag,
}

impl WordSequence {
    pub fn new(ids: Vec<WordId>, tag: SourceTag) -> Self {
        WordSequence { ids, tag }
    }

    pub fn real(ids: Vec<WordId>) -> Self {
        Self::new(ids, SourceTag::Real)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Subword vocabulary derived deterministically from a word vocabulary by
/// splitting each surface form into fixed-length character chunks.
///
/// Chunk ids are assigned in first-seen order while scanning words by
/// ascending word id, after the three reserved subword tokens. The same word
/// vocabulary and chunk length therefore always produce the same subword ids.
#[derive(Clone, Debug)]
pub struct SubwordVocabulary {
    chunk_len: usize,
    chunks: Vec<String>,
    index: HashMap<String, SubwordId>,
    word_chunks: Vec<Vec<SubwordId>>,
}

impl SubwordVocabulary {
    pub const BOS_ID: SubwordId = 0;
    pub const EOS_ID: SubwordId = 1;
    pub const UNK_ID: SubwordId = 2;

    pub fn new(vocab: &Vocabulary, chunk_len: usize) -> Result<Self> {
        if chunk_len < 1 {
            return Err(Error::InvalidParameter("chunk_len must be >= 1".into()));
        }
        let mut chunks = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        let mut index: HashMap<String, SubwordId> = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i as SubwordId))
            .collect();
        let mut word_chunks = Vec::with_capacity(vocab.len());
        for id in 0..vocab.len() as WordId {
            if id < 3 {
                word_chunks.push(vec![id]); // reserved words map to reserved subwords
                continue;
            }
            let pieces = chunk_word(vocab.word(id), chunk_len);
            let ids = pieces
                .into_iter()
                .map(|piece| {
                    *index.entry(piece.clone()).or_insert_with(|| {
                        chunks.push(piece);
                        (chunks.len() - 1) as SubwordId
                    })
                })
                .collect();
            word_chunks.push(ids);
        }
        Ok(SubwordVocabulary {
            chunk_len,
            chunks,
            index,
            word_chunks,
        })
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chunk(&self, id: SubwordId) -> &str {
        &self.chunks[id as usize]
    }

    pub fn id(&self, chunk: &str) -> Option<SubwordId> {
        self.index.get(chunk).copied()
    }

    /// Tokenizes a word sequence into subword chunks with per-word spans.
    pub fn tokenize(&self, seq: &WordSequence) -> TokenizedSequence {
        let mut tokens = Vec::new();
        let mut word_spans = Vec::with_capacity(seq.len());
        for &wid in &seq.ids {
            let start = tokens.len();
            tokens.extend_from_slice(&self.word_chunks[wid as usize]);
            word_spans.push((start, tokens.len()));
        }
        TokenizedSequence { tokens, word_spans }
    }

    /// Reconstructs the surface words by concatenating each span's chunks.
    pub fn detokenize(&self, toks: &TokenizedSequence) -> Vec<String> {
        toks.word_spans
            .iter()
            .map(|&(start, end)| {
                toks.tokens[start..end]
                    .iter()
                    .map(|&t| self.chunk(t))
                    .collect::<String>()
            })
            .collect()
    }
}

fn chunk_word(word: &str, chunk_len: usize) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return vec![String::new()];
    }
    chars
        .chunks(chunk_len)
        .map(|c| c.iter().collect())
        .collect()
}

/// Convenience wrapper matching the operation shape used elsewhere: derive the
/// subword vocabulary and tokenize in one call.
pub fn tokenize_subwords(
    seq: &WordSequence,
    vocab: &Vocabulary,
    chunk_len: usize,
) -> Result<TokenizedSequence> {
    Ok(SubwordVocabulary::new(vocab, chunk_len)?.tokenize(seq))
}

/// Subword token ids plus the word→token-range map.
///
/// Spans are contiguous, non-overlapping, ordered, and cover `0..tokens.len()`
/// exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub tokens: Vec<SubwordId>,
    pub word_spans: Vec<(usize, usize)>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A raw text sentence, the unit of corpus I/O. Binding to ids happens via
/// [`Vocabulary::encode`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub words: Vec<String>,
    pub tag: SourceTag,
}

impl Sentence {
    pub fn real<S: Into<String>>(words: Vec<S>) -> Self {
        Sentence {
            words: words.into_iter().map(Into::into).collect(),
            tag: SourceTag::Real,
        }
    }

    pub fn from_text(text: &str, tag: SourceTag) -> Self {
        Sentence {
            words: text.split_whitespace().map(str::to_string).collect(),
            tag,
        }
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<SourceTag>,
}

/// Reads a JSONL corpus: one `{"text": "...", "tag": "real"|"generated"}`
/// object per line; `tag` defaults to `real`.
pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<Sentence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("malformed JSON ({e})"),
        })?;
        let text = parsed.text.ok_or_else(|| Error::Jsonl {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "missing field 'text'".into(),
        })?;
        out.push(Sentence::from_text(&text, parsed.tag.unwrap_or_default()));
    }
    Ok(out)
}

/// Writes sentences as JSONL (UTF-8, LF). The `tag` field is omitted for
/// `real` sentences so the round trip is byte-stable for plain corpora.
pub fn write_corpus_jsonl<'a, I>(sentences: I, path: &Path) -> Result<()>
where
    I: IntoIterator<Item = &'a Sentence>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sentences {
        let line = CorpusLine {
            text: Some(s.text()),
            tag: match s.tag {
                SourceTag::Real => None,
                SourceTag::Generated => Some(SourceTag::Generated),
            },
        };
        serde_json::to_writer(&mut w, &line).expect("corpus line serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sents(texts: &[&str]) -> Vec<Vec<String>> {
        texts
            .iter()
            .map(|t| t.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn build_orders_by_frequency_then_lex() {
        let v = Vocabulary::build(sents(&["a b", "a c"]), 1).unwrap();
        assert_eq!(v.words(), &["<bos>", "<eos>", "<unk>", "a", "b", "c"]);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.word(3), "a");
    }

    #[test]
    fn build_applies_min_count() {
        let v = Vocabulary::build(sents(&["a b", "a c"]), 2).unwrap();
        assert_eq!(v.words(), &["<bos>", "<eos>", "<unk>", "a"]);
        assert_eq!(v.id_or_unk("b"), Vocabulary::UNK_ID);
        assert_eq!(v.id_or_unk("c"), Vocabulary::UNK_ID);
    }

    #[test]
    fn build_rejects_empty_corpus() {
        let err = Vocabulary::build(Vec::<Vec<String>>::new(), 1).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn reserved_ids_are_fixed_and_distinct() {
        let v = Vocabulary::build(sents(&["x"]), 1).unwrap();
        assert_eq!(v.id(BOS), Some(0));
        assert_eq!(v.id(EOS), Some(1));
        assert_eq!(v.id(UNK), Some(2));
    }

    #[test]
    fn ids_are_dense_and_invertible() {
        let v = Vocabulary::build(sents(&["the cat sat", "the dog sat"]), 1).unwrap();
        for (i, w) in v.words().iter().enumerate() {
            assert_eq!(v.id(w), Some(i as WordId));
        }
    }

    #[test]
    fn chunking_matches_fixed_size_examples() {
        let v = Vocabulary::from_words(vec!["hello".into(), "a".into()]);
        let sv = SubwordVocabulary::new(&v, 3).unwrap();
        let seq = v.encode(&["hello"], SourceTag::Real);
        let t = sv.tokenize(&seq);
        assert_eq!(t.word_spans, vec![(0, 2)]);
        assert_eq!(sv.chunk(t.tokens[0]), "hel");
        assert_eq!(sv.chunk(t.tokens[1]), "lo");

        let seq = v.encode(&["a"], SourceTag::Real);
        let t = sv.tokenize(&seq);
        assert_eq!(t.word_spans, vec![(0, 1)]);
        assert_eq!(sv.chunk(t.tokens[0]), "a");
    }

    #[test]
    fn chunking_two_words() {
        let v = Vocabulary::from_words(vec!["hi".into(), "there".into()]);
        let sv = SubwordVocabulary::new(&v, 2).unwrap();
        let seq = v.encode(&["hi", "there"], SourceTag::Real);
        let t = sv.tokenize(&seq);
        let surface: Vec<&str> = t.tokens.iter().map(|&i| sv.chunk(i)).collect();
        assert_eq!(surface, vec!["hi", "th", "er", "e"]);
        assert_eq!(t.word_spans, vec![(0, 1), (1, 4)]);
    }

    #[test]
    fn detokenize_round_trips_in_vocab_words() {
        let v = Vocabulary::build(sents(&["alpha beta gamma delta"]), 1).unwrap();
        let sv = SubwordVocabulary::new(&v, 3).unwrap();
        let seq = v.encode(&["gamma", "alpha", "delta"], SourceTag::Real);
        let t = sv.tokenize(&seq);
        assert_eq!(sv.detokenize(&t), vec!["gamma", "alpha", "delta"]);
    }

    #[test]
    fn jsonl_read_basic_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{\"text\": \"the cat sat\"}\n").unwrap();
        let got = read_corpus_jsonl(&path).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].words, vec!["the", "cat", "sat"]);
        assert_eq!(got[0].tag, SourceTag::Real);

        std::fs::write(&path, "{\"txt\": \"x\"}\n").unwrap();
        let err = read_corpus_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("missing field 'text' at line 1"));

        std::fs::write(&path, "{\"text\": \"ok\"}\nnot json\n").unwrap();
        let err = read_corpus_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn vocabulary_file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = sents(&["b a", "a c", "a b"]);
        let v1 = Vocabulary::build(corpus.clone(), 1).unwrap();
        let v2 = Vocabulary::build(corpus, 1).unwrap();
        let p1 = dir.path().join("v1.json");
        let p2 = dir.path().join("v2.json");
        v1.save_json(&p1).unwrap();
        v2.save_json(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(Vocabulary::load_json(&p1).unwrap(), v1);
    }

    proptest! {
        #[test]
        fn corpus_round_trip(words in proptest::collection::vec("[a-z]{1,8}", 1..30),
                             generated in any::<bool>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.jsonl");
            let tag = if generated { SourceTag::Generated } else { SourceTag::Real };
            let sent = Sentence { words: words.clone(), tag };
            write_corpus_jsonl([&sent], &path).unwrap();
            let got = read_corpus_jsonl(&path).unwrap();
            prop_assert_eq!(&got, &vec![sent]);
        }

        #[test]
        fn span_partition_reconstructs_words(words in proptest::collection::vec("[a-z]{1,10}", 1..12),
                                             chunk_len in 1usize..5) {
            let vocab = Vocabulary::from_words(words.clone());
            let sv = SubwordVocabulary::new(&vocab, chunk_len).unwrap();
            let seq = vocab.encode(&words, SourceTag::Real);
            let t = sv.tokenize(&seq);
            // spans partition [0, |tokens|) in order
            let mut cursor = 0;
            for &(s, e) in &t.word_spans {
                prop_assert_eq!(s, cursor);
                prop_assert!(e > s);
                cursor = e;
            }
            prop_assert_eq!(cursor, t.tokens.len());
            prop_assert_eq!(sv.detokenize(&t), words);
        }

        #[test]
        fn tokenization_is_deterministic(words in proptest::collection::vec("[a-z]{1,8}", 1..10)) {
            let vocab = Vocabulary::from_words(words.clone());
            let a = SubwordVocabulary::new(&vocab, 3).unwrap();
            let b = SubwordVocabulary::new(&vocab, 3).unwrap();
            let seq = vocab.encode(&words, SourceTag::Real);
            prop_assert_eq!(a.tokenize(&seq), b.tokenize(&seq));
        }
    }
}
