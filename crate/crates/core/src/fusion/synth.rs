//! Seeded synthetic text domains for the adaptation experiments.
//!
//! Every domain shares a small core of function words and owns a disjoint
//! set of generated content words with a domain-specific frequency profile
//! (Zipf exponent) and bigram chain. A fifth of the content words are
//! "confusable": their surface carries a `zz` digraph (the cue a subword
//! classifier can transfer across domains) and the simulated ASR substitutes
//! them aggressively, while everything else is mostly recognized correctly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::asrsim::{ChannelConfig, InsSpec, SubSpec};
use crate::corpus::{Sentence, SourceTag};
use crate::error::{Error, Result};

/// Function words shared by all domains.
pub const CORE_WORDS: [&str; 20] = [
    "the", "of", "and", "to", "in", "is", "on", "for", "with", "as", "at", "by", "an", "be",
    "it", "or", "are", "from", "this", "that",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainParams {
    pub name: String,
    pub content_words: usize,
    /// Every k-th content word (by frequency rank) is confusable.
    pub marked_every: usize,
    /// Zipf exponent of the content-word frequency profile.
    pub zipf_s: f64,
    pub sent_len_min: usize,
    pub sent_len_max: usize,
    /// Probability of emitting a core word at each position.
    pub p_core: f64,
    /// Probability of following the domain's bigram chain for content words.
    pub p_chain: f64,
    pub seed: u64,
}

pub struct Domain {
    pub params: DomainParams,
    pub content: Vec<String>,
    pub marked: Vec<bool>,
    chain_stride: usize,
}

/// Channel intensity knobs shared by the experiment spec.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Substitution probability of confusable words.
    pub rho_marked: f64,
    /// Substitution probability of everything else.
    pub rho_base: f64,
    pub del: f64,
    pub ins: f64,
}

const CONSONANTS: &[u8] = b"bcdfghklmnprstv";
const VOWELS: &[u8] = b"aeiou";

fn synth_word(rng: &mut ChaCha8Rng, marked: bool) -> String {
    let len = rng.gen_range(4..=7);
    let mut word = String::with_capacity(len + 2);
    for i in 0..len {
        let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
        word.push(set[rng.gen_range(0..set.len())] as char);
    }
    if marked {
        let pos = rng.gen_range(1..word.len());
        word.insert_str(pos, "zz");
    }
    word
}

impl Domain {
    pub fn build(params: DomainParams) -> Result<Self> {
        if params.content_words < 4 || params.marked_every < 2 {
            return Err(Error::InvalidParameter(
                "domain needs >= 4 content words and marked_every >= 2".into(),
            ));
        }
        if params.sent_len_min < 1 || params.sent_len_min > params.sent_len_max {
            return Err(Error::InvalidParameter("bad sentence length range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut content: Vec<String> = Vec::with_capacity(params.content_words);
        let mut marked = Vec::with_capacity(params.content_words);
        for i in 0..params.content_words {
            let is_marked = i % params.marked_every == 0;
            loop {
                let w = synth_word(&mut rng, is_marked);
                if !content.contains(&w) && !CORE_WORDS.contains(&w.as_str()) {
                    content.push(w);
                    break;
                }
            }
            marked.push(is_marked);
        }
        let chain_stride = (params.seed as usize % (params.content_words - 1)) + 1;
        Ok(Domain {
            params,
            content,
            marked,
            chain_stride,
        })
    }

    /// Core plus content surfaces, in deterministic order.
    pub fn all_words(&self) -> Vec<String> {
        CORE_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(self.content.iter().cloned())
            .collect()
    }

    fn successor(&self, idx: usize) -> usize {
        (idx + self.chain_stride) % self.content.len()
    }

    /// Next non-confusable content index at or after `idx` (wrapping).
    fn next_unmarked(&self, mut idx: usize) -> usize {
        idx %= self.content.len();
        while self.marked[idx] {
            idx = (idx + 1) % self.content.len();
        }
        idx
    }

    pub fn sample_sentences(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<Sentence> {
        let core_zipf = Zipf::new(CORE_WORDS.len() as u64, 1.0).expect("valid zipf");
        let content_zipf =
            Zipf::new(self.content.len() as u64, self.params.zipf_s).expect("valid zipf");
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = rng.gen_range(self.params.sent_len_min..=self.params.sent_len_max);
            let mut words = Vec::with_capacity(len);
            let mut prev_content = content_zipf.sample(rng) as usize - 1;
            for _ in 0..len {
                if rng.gen::<f64>() < self.params.p_core {
                    let idx = core_zipf.sample(rng) as usize - 1;
                    words.push(CORE_WORDS[idx].to_string());
                } else {
                    let idx = if rng.gen::<f64>() < self.params.p_chain {
                        self.successor(prev_content)
                    } else {
                        content_zipf.sample(rng) as usize - 1
                    };
                    words.push(self.content[idx].clone());
                    prev_content = idx;
                }
            }
            out.push(Sentence {
                words,
                tag: SourceTag::Real,
            });
        }
        out
    }

    /// Channel over this domain's words: confusable words substitute into
    /// two plausible (non-confusable, in-domain) partners with high
    /// probability; everything else errs rarely.
    pub fn channel_config(&self, noise: &NoiseParams, seed: u64) -> ChannelConfig {
        let mut config = ChannelConfig {
            sub: Default::default(),
            del: Default::default(),
            ins: None,
            context_trigger: None,
            seed,
        };
        let half = self.content.len() / 2;
        for (i, word) in self.content.iter().enumerate() {
            let (rho, confusions) = if self.marked[i] {
                let p1 = self.next_unmarked(i + half);
                let mut p2 = self.next_unmarked(p1 + 1);
                if p2 == p1 {
                    p2 = self.next_unmarked(p1 + 2);
                }
                let mut map = std::collections::BTreeMap::new();
                map.insert(self.content[p1].clone(), 0.8);
                map.insert(self.content[p2].clone(), 0.2);
                (noise.rho_marked, map)
            } else {
                let partner = self.next_unmarked(i + 1);
                let mut map = std::collections::BTreeMap::new();
                map.insert(self.content[partner].clone(), 1.0);
                (noise.rho_base, map)
            };
            if rho > 0.0 {
                config.sub.insert(word.clone(), SubSpec { rho, confusions });
            }
            if noise.del > 0.0 {
                config.del.insert(word.clone(), noise.del);
            }
        }
        for (i, word) in CORE_WORDS.iter().enumerate() {
            if noise.rho_base > 0.0 {
                let mut map = std::collections::BTreeMap::new();
                map.insert(CORE_WORDS[(i + 1) % CORE_WORDS.len()].to_string(), 1.0);
                config.sub.insert(
                    word.to_string(),
                    SubSpec {
                        rho: noise.rho_base,
                        confusions: map,
                    },
                );
            }
            if noise.del > 0.0 {
                config.del.insert(word.to_string(), noise.del);
            }
        }
        if noise.ins > 0.0 {
            let mut dist = std::collections::BTreeMap::new();
            for w in CORE_WORDS.iter().take(4) {
                dist.insert(w.to_string(), 0.25);
            }
            config.ins = Some(InsSpec {
                prob: noise.ins,
                dist,
            });
        }
        config
    }
}
