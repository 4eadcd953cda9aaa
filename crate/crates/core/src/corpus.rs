//! Vocabulary, synthetic grammar, corpus files and batching.
//!
//! The synthetic grammar partitions the vocabulary into three difficulty
//! classes so that per-position losses are heterogeneous:
//!
//! * FUNCTION tokens are fixed by position parity and the sentence topic,
//!   so they are predictable from context.
//! * CONTENT tokens are drawn uniformly from the sentence topic's word list.
//! * NOISE tokens are uniform over the noise list and carry no information.
//!
//! Each position picks its class independently with the grammar weights.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const NUM_RESERVED: usize = 3;
const RESERVED: [&str; NUM_RESERVED] = ["[PAD]", "[MASK]", "[UNK]"];

/// A sentence as vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Bijective token-string/index mapping with reserved slots 0..3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-reserved tokens; reserved tokens are
    /// prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("vocabulary must start with {r}"),
                });
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("invalid token {t:?}"),
                });
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// Uniform draw over non-reserved tokens.
    pub fn random_token<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        rng.random_range(NUM_RESERVED as u32..self.tokens.len() as u32)
    }

    /// Sidecar format: one token per line, index = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_full_list(text.lines().map(str::to_string).collect())
    }

    pub fn encode(&self, line: &str) -> TokenSequence {
        TokenSequence(
            line.split_whitespace()
                .map(|w| self.id(w).unwrap_or(UNK))
                .collect(),
        )
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.0
            .iter()
            .map(|&t| self.token(t).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Ground-truth difficulty class of a synthetic token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Difficulty {
    Function,
    Content,
    Noise,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Function, Difficulty::Content, Difficulty::Noise];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGrammar {
    pub num_topics: usize,
    pub words_per_topic: usize,
    pub num_noise: usize,
    /// FUNCTION / CONTENT / NOISE.
    pub weights: [f64; 3],
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticGrammar {
    fn default() -> Self {
        Self {
            num_topics: 8,
            words_per_topic: 12,
            num_noise: 16,
            weights: [0.5, 0.35, 0.15],
            min_len: 12,
            max_len: 24,
        }
    }
}

/// Sentences with per-position difficulty labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub sentences: Vec<TokenSequence>,
    pub labels: Vec<Vec<Difficulty>>,
}

impl SyntheticGrammar {
    /// Two function tokens per topic, one per position parity.
    pub fn num_function(&self) -> usize {
        2 * self.num_topics
    }

    pub fn num_content(&self) -> usize {
        self.num_topics * self.words_per_topic
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("grammar: {m}")));
        if self.num_topics == 0 || self.words_per_topic == 0 || self.num_noise == 0 {
            return bad("token classes must be non-empty");
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("weights must be a probability vector");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        Ok(())
    }

    fn function_offset(&self) -> u32 {
        NUM_RESERVED as u32
    }

    fn content_offset(&self) -> u32 {
        self.function_offset() + self.num_function() as u32
    }

    fn noise_offset(&self) -> u32 {
        self.content_offset() + self.num_content() as u32
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut toks = Vec::new();
        for t in 0..self.num_topics {
            for parity in 0..2 {
                toks.push(format!("f{t}{}", if parity == 0 { "e" } else { "o" }));
            }
        }
        for t in 0..self.num_topics {
            for w in 0..self.words_per_topic {
                toks.push(format!("t{t}w{w:02}"));
            }
        }
        for n in 0..self.num_noise {
            toks.push(format!("n{n:02}"));
        }
        Vocabulary::from_tokens(toks).expect("generated tokens are unique")
    }

    /// Difficulty class of a token id, `None` for reserved or foreign ids.
    pub fn label_of(&self, id: u32) -> Option<Difficulty> {
        if id < self.function_offset() {
            None
        } else if id < self.content_offset() {
            Some(Difficulty::Function)
        } else if id < self.noise_offset() {
            Some(Difficulty::Content)
        } else if id < self.noise_offset() + self.num_noise as u32 {
            Some(Difficulty::Noise)
        } else {
            None
        }
    }

    fn sample_sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> (TokenSequence, Vec<Difficulty>) {
        let n = rng.random_range(self.min_len..=self.max_len);
        let topic = rng.random_range(0..self.num_topics) as u32;
        let mut toks = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let u: f64 = rng.random();
            let class = if u < self.weights[0] {
                Difficulty::Function
            } else if u < self.weights[0] + self.weights[1] {
                Difficulty::Content
            } else {
                Difficulty::Noise
            };
            let tok = match class {
                Difficulty::Function => self.function_offset() + 2 * topic + (i % 2) as u32,
                Difficulty::Content => {
                    self.content_offset()
                        + topic * self.words_per_topic as u32
                        + rng.random_range(0..self.words_per_topic as u32)
                }
                Difficulty::Noise => self.noise_offset() + rng.random_range(0..self.num_noise as u32),
            };
            toks.push(tok);
            labels.push(class);
        }
        (TokenSequence(toks), labels)
    }
}

pub fn generate_corpus<R: Rng + ?Sized>(
    grammar: &SyntheticGrammar,
    num_sentences: usize,
    rng: &mut R,
) -> SyntheticCorpus {
    let mut sentences = Vec::with_capacity(num_sentences);
    let mut labels = Vec::with_capacity(num_sentences);
    for _ in 0..num_sentences {
        let (s, l) = grammar.sample_sentence(rng);
        sentences.push(s);
        labels.push(l);
    }
    SyntheticCorpus { sentences, labels }
}

/// Parses corpus text: one sentence per line, whitespace-separated tokens.
/// Unknown tokens map to `[UNK]`.
pub fn parse_corpus(text: &str, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty sentence".into(),
            });
        }
        if let Some(bad) = line
            .split_whitespace()
            .find(|w| *w == RESERVED[PAD as usize] || *w == RESERVED[MASK as usize])
        {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("reserved token {bad} in raw text"),
            });
        }
        out.push(vocab.encode(line));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, vocab)
}

pub fn save_corpus(path: &Path, corpus: &[TokenSequence], vocab: &Vocabulary) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in corpus {
        writeln!(f, "{}", vocab.decode(s)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// A padded batch; padding positions carry `[PAD]` and are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn pad(sentences: &[&TokenSequence]) -> Self {
        let width = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let rows = sentences
            .iter()
            .map(|s| {
                let mut r = s.0.clone();
                r.resize(width, PAD);
                r
            })
            .collect();
        Self {
            rows,
            lengths: sentences.iter().map(|s| s.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Unpadded sentences.
    pub fn sentences(&self) -> Vec<TokenSequence> {
        self.rows
            .iter()
            .zip(&self.lengths)
            .map(|(r, &n)| TokenSequence(r[..n].to_vec()))
            .collect()
    }
}

/// One epoch of padded batches, shuffled when `rng` is given.
pub fn batch_iter<'a, R: Rng + ?Sized>(
    corpus: &'a [TokenSequence],
    batch_size: usize,
    rng: Option<&mut R>,
) -> impl Iterator<Item = Batch> + 'a {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let size = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| {
        let refs: Vec<&TokenSequence> = idx.iter().map(|&i| &corpus[i]).collect();
        Batch::pad(&refs)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grammar_vocabulary_layout() {
        let g = SyntheticGrammar::default();
        let v = g.vocabulary();
        assert_eq!(v.len(), NUM_RESERVED + 16 + 96 + 16);
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(g.label_of(v.id("f0e").unwrap()), Some(Difficulty::Function));
        assert_eq!(g.label_of(v.id("t7w11").unwrap()), Some(Difficulty::Content));
        assert_eq!(g.label_of(v.id("n15").unwrap()), Some(Difficulty::Noise));
        assert_eq!(g.label_of(PAD), None);
    }

    #[test]
    fn generated_sentences_avoid_reserved_tokens() {
        let g = SyntheticGrammar::default();
        let c = generate_corpus(&g, 200, &mut ChaCha8Rng::seed_from_u64(1));
        for (s, l) in c.sentences.iter().zip(&c.labels) {
            assert!((12..=24).contains(&s.len()));
            for (&t, &lab) in s.0.iter().zip(l) {
                assert!(!Vocabulary::is_reserved(t));
                assert_eq!(g.label_of(t), Some(lab));
            }
        }
    }

    #[test]
    fn all_function_grammar_is_deterministic_given_parity_and_topic() {
        let g = SyntheticGrammar {
            weights: [1.0, 0.0, 0.0],
            ..Default::default()
        };
        let c = generate_corpus(&g, 50, &mut ChaCha8Rng::seed_from_u64(2));
        for s in &c.sentences {
            for i in 2..s.len() {
                assert_eq!(s.0[i], s.0[i - 2]);
            }
        }
    }

    #[test]
    fn all_noise_grammar_has_entropy_ln_m() {
        let g = SyntheticGrammar {
            weights: [0.0, 0.0, 1.0],
            ..Default::default()
        };
        let c = generate_corpus(&g, 4000, &mut ChaCha8Rng::seed_from_u64(3));
        let mut counts: HashMap<u32, usize> = HashMap::new();
        let mut total = 0;
        for s in &c.sentences {
            for &t in &s.0 {
                *counts.entry(t).or_default() += 1;
                total += 1;
            }
        }
        assert_eq!(counts.len(), 16);
        let h: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        assert!((h - 16f64.ln()).abs() < 0.01, "{h}");
    }

    #[test]
    fn batches_of_ten_by_four() {
        let corpus: Vec<TokenSequence> = (1..=10).map(|n| TokenSequence(vec![5; n])).collect();
        let sizes: Vec<usize> = batch_iter(&corpus, 4, None::<&mut ChaCha8Rng>)
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let b = batch_iter(&corpus, 4, None::<&mut ChaCha8Rng>).next().unwrap();
        assert_eq!(b.rows[0], vec![5, PAD, PAD, PAD]);
        assert_eq!(b.sentences()[0], corpus[0]);
        assert_eq!(batch_iter(&[], 4, None::<&mut ChaCha8Rng>).count(), 0);
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = SyntheticGrammar::default();
        let v = g.vocabulary();
        let c = generate_corpus(&g, 20, &mut ChaCha8Rng::seed_from_u64(4));
        let cp = dir.path().join("c.txt");
        let vp = dir.path().join("v.txt");
        save_corpus(&cp, &c.sentences, &v).unwrap();
        v.save(&vp).unwrap();
        let v2 = Vocabulary::load(&vp).unwrap();
        assert_eq!(v2, v);
        assert_eq!(load_corpus(&cp, &v2).unwrap(), c.sentences);

        fs::write(&cp, "").unwrap();
        assert!(load_corpus(&cp, &v2).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let v = SyntheticGrammar::default().vocabulary();
        match parse_corpus("f0e f0o\n\nn01", &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_corpus("f0e [MASK]", &v) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_corpus("zzz", &v).unwrap()[0].0, vec![UNK]);
    }
}
