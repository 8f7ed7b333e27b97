use std::ops::Range;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const SPECIAL_TOKENS: usize = 4;
const DIGITS: usize = 10;

/// Token layout shared by the synthetic corpora.
///
/// `0` begins a document, `1` opens the passkey preamble, `2 3` is the key
/// marker, the next ten ids are digits and everything above is filler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub const BOS: usize = 0;
    pub const INTRO: usize = 1;
    pub const KEY_MARKER: [usize; 2] = [2, 3];

    /// Needs room for the special tokens, ten digits and at least eight
    /// filler tokens.
    pub fn new(size: usize) -> Result<Self> {
        let min = SPECIAL_TOKENS + DIGITS + 8;
        if size < min {
            return Err(Error::invalid(format!(
                "vocabulary of {size} tokens is too small (need at least {min})"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn digits(&self) -> Range<usize> {
        SPECIAL_TOKENS..SPECIAL_TOKENS + DIGITS
    }

    pub fn filler(&self) -> Range<usize> {
        SPECIAL_TOKENS + DIGITS..self.size
    }

    /// Digits and filler together: every token that may carry content.
    pub fn content(&self) -> Range<usize> {
        SPECIAL_TOKENS..self.size
    }
}

/// Geometry of one passkey document.
///
/// The prompt is `preamble, filler x X, marker_prefix, passkey, filler x Y,
/// query_suffix` and is `total_len` tokens long. The answer starts right
/// after it, `distance_k` tokens after the first passkey token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPasskeyTask {
    pub filler_vocab: Vec<usize>,
    pub digit_vocab: Vec<usize>,
    pub preamble: Vec<usize>,
    pub marker_prefix: Vec<usize>,
    pub query_suffix: Vec<usize>,
    pub passkey_len: usize,
    pub total_len: usize,
    pub distance_k: usize,
    /// Filler is a random phrase of this many distinct tokens, repeated.
    pub phrase_len: (usize, usize),
}

impl SyntheticPasskeyTask {
    pub const DEFAULT_PASSKEY_LEN: usize = 5;

    pub fn new(vocab: &Vocabulary, total_len: usize, distance_k: usize) -> Self {
        Self {
            filler_vocab: vocab.filler().collect(),
            digit_vocab: vocab.digits().collect(),
            preamble: vec![Vocabulary::BOS, Vocabulary::INTRO],
            marker_prefix: Vocabulary::KEY_MARKER.to_vec(),
            query_suffix: Vocabulary::KEY_MARKER.to_vec(),
            passkey_len: Self::DEFAULT_PASSKEY_LEN,
            total_len,
            distance_k,
            phrase_len: (4, 10),
        }
    }

    /// Smallest distance: the passkey directly followed by the query.
    pub fn min_distance(&self) -> usize {
        self.passkey_len + self.query_suffix.len()
    }

    /// Largest distance: no filler before the passkey.
    pub fn max_distance(&self) -> usize {
        self.total_len
            .saturating_sub(self.preamble.len() + self.marker_prefix.len())
    }

    pub fn with_distance(&self, distance_k: usize) -> Self {
        Self {
            distance_k,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.passkey_len == 0 {
            return Err(Error::invalid("passkey must have at least one token"));
        }
        if self.digit_vocab.is_empty() || self.filler_vocab.is_empty() {
            return Err(Error::invalid("digit and filler vocabularies must be non-empty"));
        }
        let (lo, hi) = self.phrase_len;
        if lo == 0 || lo > hi || hi > self.filler_vocab.len() {
            return Err(Error::invalid(format!(
                "phrase length range {lo}..={hi} does not fit {} filler tokens",
                self.filler_vocab.len()
            )));
        }
        let structural: Vec<usize> = self
            .preamble
            .iter()
            .chain(&self.marker_prefix)
            .chain(&self.query_suffix)
            .copied()
            .collect();
        let overlap = self.filler_vocab.iter().any(|t| self.digit_vocab.contains(t))
            || structural
                .iter()
                .any(|t| self.filler_vocab.contains(t) || self.digit_vocab.contains(t));
        if overlap {
            return Err(Error::invalid(
                "filler, digit and marker alphabets must be disjoint",
            ));
        }
        if self.distance_k < self.min_distance() || self.distance_k > self.max_distance() {
            return Err(Error::invalid(format!(
                "distance {} is infeasible for a {}-token prompt (allowed {}..={})",
                self.distance_k,
                self.total_len,
                self.min_distance(),
                self.max_distance()
            )));
        }
        Ok(())
    }
}

/// A generated prompt with its expected answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeyDocument {
    pub tokens: Vec<usize>,
    pub passkey: Vec<usize>,
    pub passkey_start: usize,
    pub distance_k: usize,
}

impl PasskeyDocument {
    /// Index at which the answer should begin.
    pub fn answer_position(&self) -> usize {
        self.tokens.len()
    }

    /// Prompt followed by the answer, as used for training.
    pub fn with_answer(&self) -> Vec<usize> {
        let mut out = self.tokens.clone();
        out.extend_from_slice(&self.passkey);
        out
    }
}

pub fn generate_passkey_document<R: Rng + ?Sized>(
    task: &SyntheticPasskeyTask,
    rng: &mut R,
) -> Result<PasskeyDocument> {
    task.validate()?;
    let phrase_len = rng.random_range(task.phrase_len.0..=task.phrase_len.1);
    let phrase: Vec<usize> = task
        .filler_vocab
        .choose_multiple(rng, phrase_len)
        .copied()
        .collect();
    let passkey: Vec<usize> = (0..task.passkey_len)
        .map(|_| *task.digit_vocab.choose(rng).expect("non-empty"))
        .collect();

    let y = task.distance_k - task.min_distance();
    let x = task.max_distance() - task.distance_k;
    let mut filler = phrase.iter().copied().cycle();

    let mut tokens = Vec::with_capacity(task.total_len);
    tokens.extend_from_slice(&task.preamble);
    tokens.extend(filler.by_ref().take(x));
    tokens.extend_from_slice(&task.marker_prefix);
    let passkey_start = tokens.len();
    tokens.extend_from_slice(&passkey);
    tokens.extend(filler.take(y));
    tokens.extend_from_slice(&task.query_suffix);
    debug_assert_eq!(tokens.len(), task.total_len);
    debug_assert_eq!(tokens.len() - passkey_start, task.distance_k);
    Ok(PasskeyDocument {
        tokens,
        passkey,
        passkey_start,
        distance_k: task.distance_k,
    })
}

/// A random sequence of content tokens repeated until `len` tokens, after a
/// leading BOS. The period is at least 8 and at most half the length.
pub fn copy_document<R: Rng + ?Sized>(vocab: &Vocabulary, len: usize, rng: &mut R) -> Vec<usize> {
    let max_period = (len / 2).max(8);
    let period = rng.random_range(8.min(max_period)..=max_period);
    let content = vocab.content();
    let seq: Vec<usize> = (0..period)
        .map(|_| rng.random_range(content.clone()))
        .collect();
    std::iter::once(Vocabulary::BOS)
        .chain(seq.into_iter().cycle())
        .take(len)
        .collect()
}

/// Endless stream of `len`-token training documents: passkey documents
/// (prompt plus answer, distance uniform over the feasible range) mixed
/// with copy documents, which teach the model to look up earlier context.
/// The first `copy_warmup` documents are all copy documents.
#[derive(Debug, Clone)]
pub struct PasskeyCorpus {
    vocab: Vocabulary,
    task: SyntheticPasskeyTask,
    copy_fraction: f64,
    copy_warmup: usize,
    rng: ChaCha8Rng,
}

impl PasskeyCorpus {
    /// Starts the stream with `docs` copy documents.
    pub fn with_copy_warmup(mut self, docs: usize) -> Self {
        self.copy_warmup = docs;
        self
    }
}

impl Iterator for PasskeyCorpus {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let len = self.task.total_len + self.task.passkey_len;
        let warming_up = self.copy_warmup > 0;
        self.copy_warmup = self.copy_warmup.saturating_sub(1);
        if warming_up || self.rng.random_bool(self.copy_fraction) {
            return Some(copy_document(&self.vocab, len, &mut self.rng));
        }
        let k = self
            .rng
            .random_range(self.task.min_distance()..=self.task.max_distance());
        let doc = generate_passkey_document(&self.task.with_distance(k), &mut self.rng)
            .expect("distance drawn from the feasible range");
        Some(doc.with_answer())
    }
}

/// Training corpus of documents exactly `doc_len` tokens long.
pub fn passkey_corpus(
    vocab: &Vocabulary,
    doc_len: usize,
    copy_fraction: f64,
    seed: u64,
) -> Result<PasskeyCorpus> {
    if !(0.0..=1.0).contains(&copy_fraction) {
        return Err(Error::invalid(format!(
            "copy fraction {copy_fraction} must lie in [0, 1]"
        )));
    }
    let prompt_len = doc_len.saturating_sub(SyntheticPasskeyTask::DEFAULT_PASSKEY_LEN);
    let probe = SyntheticPasskeyTask::new(vocab, prompt_len, 0);
    let task = probe.with_distance(probe.min_distance());
    task.validate()?;
    Ok(PasskeyCorpus {
        vocab: *vocab,
        task,
        copy_fraction,
        copy_warmup: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

/// Held-out text for perplexity: `n_docs` passkey documents of `doc_len`
/// tokens each, concatenated.
pub fn passkey_stream(vocab: &Vocabulary, doc_len: usize, n_docs: usize, seed: u64) -> Result<Vec<usize>> {
    let corpus = passkey_corpus(vocab, doc_len, 0.0, seed)?;
    Ok(corpus.take(n_docs).flatten().collect())
}
