//! Labeled synthetic-language corpora.
//!
//! Each language is a seeded Markov chain whose emission support is its own
//! vocabulary band plus a shared set of anchor tokens. Generation, splitting
//! and file I/O are pure functions of their inputs.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

const HEADER_PREFIX: &str = "#nmcorpus v1 vocab=";
const LANGUAGE_PREFIX: &str = "#language ";
const END_PREFIX: &str = "#end ";

/// Number of preferred successors per Markov state.
const BRANCHING: usize = 4;
/// Probability mass spread uniformly over the whole emission support.
const SMOOTHING: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: String,
    /// Half-open token-id interval `[start, end)`.
    pub vocab_range: (TokenId, TokenId),
    pub transition_seed: u64,
    #[serde(default)]
    pub shared_anchor_ids: Vec<TokenId>,
    #[serde(default = "default_order")]
    pub order: u8,
}

fn default_order() -> u8 {
    1
}

impl LanguageSpec {
    pub fn new(id: &str, vocab_range: Range<TokenId>, transition_seed: u64) -> Self {
        Self {
            id: id.to_string(),
            vocab_range: (vocab_range.start, vocab_range.end),
            transition_seed,
            shared_anchor_ids: Vec::new(),
            order: 1,
        }
    }

    pub fn with_anchors(mut self, anchors: &[TokenId]) -> Self {
        self.shared_anchor_ids = anchors.to_vec();
        self
    }

    pub fn with_order(mut self, order: u8) -> Self {
        self.order = order;
        self
    }

    pub fn range(&self) -> Range<TokenId> {
        self.vocab_range.0..self.vocab_range.1
    }

    /// Sorted, de-duplicated emission support: vocab band plus anchors.
    pub fn support(&self) -> Vec<TokenId> {
        let set: BTreeSet<TokenId> = self
            .range()
            .chain(self.shared_anchor_ids.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        let (start, end) = self.vocab_range;
        if start >= end {
            return Err(Error::Validation(format!(
                "language `{}` has an empty vocab range [{start}, {end})",
                self.id
            )));
        }
        if end as usize > vocab_size {
            return Err(Error::Validation(format!(
                "language `{}` vocab range [{start}, {end}) exceeds vocab size {vocab_size}",
                self.id
            )));
        }
        if let Some(a) = self
            .shared_anchor_ids
            .iter()
            .find(|&&a| a as usize >= vocab_size)
        {
            return Err(Error::Validation(format!(
                "language `{}` anchor {a} exceeds vocab size {vocab_size}",
                self.id
            )));
        }
        if !(1..=2).contains(&self.order) {
            return Err(Error::Validation(format!(
                "language `{}` has unsupported Markov order {}",
                self.id, self.order
            )));
        }
        if self.id.is_empty() || self.id.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "language id `{}` must be non-empty without whitespace",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub language: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub vocab_size: usize,
    pub languages: Vec<LanguageSpec>,
    pub samples: Vec<Sample>,
}

impl LabeledCorpus {
    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.languages, self.vocab_size)?;
        let known: HashSet<&str> = self.languages.iter().map(|l| l.id.as_str()).collect();
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !known.contains(s.language.as_str()) {
                return Err(Error::Validation(format!(
                    "sample {} has unknown language `{}`",
                    s.id, s.language
                )));
            }
            if s.tokens.len() < 2 {
                return Err(Error::Validation(format!(
                    "sample {} has {} tokens, need at least 2",
                    s.id,
                    s.tokens.len()
                )));
            }
            if let Some(t) = s.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::Validation(format!(
                    "sample {} token {t} is outside vocab size {}",
                    s.id, self.vocab_size
                )));
            }
            if !ids.insert(s.id) {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn language_ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn has_language(&self, language: &str) -> bool {
        self.samples.iter().any(|s| s.language == language)
    }

    pub fn samples_of<'a>(&'a self, language: &'a str) -> impl Iterator<Item = &'a Sample> + 'a {
        self.samples.iter().filter(move |s| s.language == language)
    }

    pub fn count_by_language(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.language.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn token_count(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).sum()
    }

    /// Sub-corpus holding only the given languages; language specs are kept.
    pub fn filter_languages(&self, keep: &[&str]) -> LabeledCorpus {
        LabeledCorpus {
            vocab_size: self.vocab_size,
            languages: self.languages.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| keep.contains(&s.language.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Concatenates two corpora over the same vocabulary. Sample ids must
    /// stay unique.
    pub fn merge(&self, other: &LabeledCorpus) -> Result<LabeledCorpus> {
        if self.vocab_size != other.vocab_size {
            return Err(Error::Validation(format!(
                "cannot merge corpora with vocab sizes {} and {}",
                self.vocab_size, other.vocab_size
            )));
        }
        let mut languages = self.languages.clone();
        for l in &other.languages {
            match languages.iter().find(|x| x.id == l.id) {
                Some(existing) if existing != l => {
                    return Err(Error::Validation(format!(
                        "language `{}` is declared differently in the two corpora",
                        l.id
                    )))
                }
                Some(_) => {}
                None => languages.push(l.clone()),
            }
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        let merged = LabeledCorpus {
            vocab_size: self.vocab_size,
            languages,
            samples,
        };
        merged.validate()?;
        Ok(merged)
    }
}

fn validate_specs(specs: &[LanguageSpec], vocab_size: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for s in specs {
        s.validate(vocab_size)?;
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Validation(format!("duplicate language id `{}`", s.id)));
        }
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            let overlap = a.vocab_range.0 < b.vocab_range.1 && b.vocab_range.0 < a.vocab_range.1;
            if overlap && a.transition_seed == b.transition_seed {
                return Err(Error::Validation(format!(
                    "languages `{}` and `{}` overlap in vocabulary and share transition seed {}",
                    a.id, b.id, a.transition_seed
                )));
            }
        }
    }
    Ok(())
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct MarkovChain {
    support: Vec<TokenId>,
    seed: u64,
}

impl MarkovChain {
    fn new(spec: &LanguageSpec) -> Self {
        Self {
            support: spec.support(),
            seed: spec.transition_seed,
        }
    }

    /// Draws the next token given the conditioning context (one or two
    /// previous tokens). The per-state successor table is derived from the
    /// transition seed, so no table is materialized.
    fn next(&self, context: &[TokenId], rng: &mut ChaCha8Rng) -> TokenId {
        if rng.gen::<f64>() < SMOOTHING {
            return *self.support.choose(rng).expect("non-empty support");
        }
        let mut state = mix(self.seed ^ (context.len() as u64).rotate_left(48));
        for &t in context {
            state = mix(state ^ u64::from(t));
        }
        let mut table_rng = ChaCha8Rng::seed_from_u64(state);
        let branching = BRANCHING.min(self.support.len());
        let successors: Vec<TokenId> = self
            .support
            .choose_multiple(&mut table_rng, branching)
            .copied()
            .collect();
        let weights: Vec<f64> = (0..branching)
            .map(|_| 0.5 + table_rng.gen::<f64>() * 2.5)
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (tok, w) in successors.iter().zip(&weights) {
            if u < *w {
                return *tok;
            }
            u -= w;
        }
        *successors.last().expect("non-empty successors")
    }
}

/// Generates `samples_per_language` sequences of length `sample_len` for
/// every language. Sample ids are assigned consecutively in spec order.
pub fn gen_corpus(
    specs: &[LanguageSpec],
    vocab_size: usize,
    samples_per_language: usize,
    sample_len: usize,
    seed: u64,
) -> Result<LabeledCorpus> {
    if samples_per_language == 0 {
        return Err(Error::Config("samples_per_language must be at least 1".into()));
    }
    if sample_len < 2 {
        return Err(Error::Config("sample_len must be at least 2".into()));
    }
    if specs.is_empty() {
        return Err(Error::Config("at least one language is required".into()));
    }
    validate_specs(specs, vocab_size)?;

    let mut samples = Vec::with_capacity(specs.len() * samples_per_language);
    let mut next_id = 0u64;
    for (lang_index, spec) in specs.iter().enumerate() {
        let chain = MarkovChain::new(spec);
        let order = spec.order as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(lang_index as u64 + 1)));
        for _ in 0..samples_per_language {
            let mut tokens = Vec::with_capacity(sample_len);
            tokens.push(*chain.support.choose(&mut rng).expect("non-empty support"));
            while tokens.len() < sample_len {
                let ctx_start = tokens.len().saturating_sub(order);
                let next = chain.next(&tokens[ctx_start..], &mut rng);
                tokens.push(next);
            }
            samples.push(Sample {
                id: next_id,
                language: spec.id.clone(),
                tokens,
            });
            next_id += 1;
        }
    }
    Ok(LabeledCorpus {
        vocab_size,
        languages: specs.to_vec(),
        samples,
    })
}

/// The default two-language setup: `A` on `[2, vocab/2)`, `B` on
/// `[vocab/2, vocab)`, anchors `{0, 1}` shared by both.
pub fn bilingual_specs(vocab_size: usize) -> Vec<LanguageSpec> {
    let half = (vocab_size / 2) as TokenId;
    vec![
        LanguageSpec::new("A", 2..half, 11).with_anchors(&[0, 1]),
        LanguageSpec::new("B", half..vocab_size as TokenId, 29).with_anchors(&[0, 1]),
    ]
}

/// Stratified split: every language is shuffled with `seed` and cut at
/// `round(train_fraction * n)`, clamped so both sides keep at least one
/// sample. Relative sample order of the input is preserved in both halves.
pub fn split_corpus(
    corpus: &LabeledCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledCorpus, LabeledCorpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut train_ids = HashSet::new();
    for (lang_index, (language, count)) in corpus.count_by_language().into_iter().enumerate() {
        if count < 2 {
            return Err(Error::Validation(format!(
                "language `{language}` has {count} sample(s); stratified split needs at least 2"
            )));
        }
        let mut ids: Vec<u64> = corpus.samples_of(&language).map(|s| s.id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(lang_index as u64 + 101)));
        ids.shuffle(&mut rng);
        let n_train = ((train_fraction * count as f64).round() as usize).clamp(1, count - 1);
        train_ids.extend(ids.into_iter().take(n_train));
    }
    let (train, eval): (Vec<Sample>, Vec<Sample>) = corpus
        .samples
        .iter()
        .cloned()
        .partition(|s| train_ids.contains(&s.id));
    let make = |samples| LabeledCorpus {
        vocab_size: corpus.vocab_size,
        languages: corpus.languages.clone(),
        samples,
    };
    Ok((make(train), make(eval)))
}

pub fn save_corpus(corpus: &LabeledCorpus, path: &Path) -> Result<()> {
    fs::write(path, render_corpus(corpus))?;
    Ok(())
}

pub fn render_corpus(corpus: &LabeledCorpus) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER_PREFIX}{}", corpus.vocab_size);
    for l in &corpus.languages {
        let anchors = if l.shared_anchor_ids.is_empty() {
            "-".to_string()
        } else {
            join(&l.shared_anchor_ids, ",")
        };
        let _ = writeln!(
            out,
            "{LANGUAGE_PREFIX}{} {} {} {} {} {}",
            l.id, l.vocab_range.0, l.vocab_range.1, l.transition_seed, l.order, anchors
        );
    }
    for s in &corpus.samples {
        let _ = writeln!(out, "{}\t{}\t{}", s.id, s.language, join(&s.tokens, " "));
    }
    let _ = writeln!(out, "{END_PREFIX}{}", corpus.samples.len());
    out
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

pub fn load_corpus(path: &Path) -> Result<LabeledCorpus> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<LabeledCorpus> {
    if !text.ends_with('\n') {
        return Err(Error::parse(
            format!("offset {}", text.len()),
            "file does not end with a newline (truncated?)",
        ));
    }
    let mut lines = text.lines().enumerate();
    let vocab_size = match lines.next() {
        Some((_, line)) => line
            .strip_prefix(HEADER_PREFIX)
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::parse("line 1", format!("bad header `{line}`")))?,
        None => return Err(Error::parse("line 1", "empty file")),
    };

    let mut languages = Vec::new();
    let mut samples = Vec::new();
    let mut end_count = None;
    for (i, line) in lines {
        let loc = format!("line {}", i + 1);
        if end_count.is_some() {
            return Err(Error::parse(loc, "content after end marker"));
        }
        if let Some(rest) = line.strip_prefix(LANGUAGE_PREFIX) {
            languages.push(parse_language(rest).map_err(|m| Error::parse(&loc, m))?);
        } else if let Some(rest) = line.strip_prefix(END_PREFIX) {
            let n = rest
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(&loc, "bad end marker"))?;
            end_count = Some(n);
        } else {
            samples.push(parse_sample(line).map_err(|m| Error::parse(&loc, m))?);
        }
    }
    match end_count {
        None => {
            return Err(Error::parse(
                format!("offset {}", text.len()),
                "missing end marker (truncated?)",
            ))
        }
        Some(n) if n != samples.len() => {
            return Err(Error::parse(
                "end marker",
                format!("declares {n} samples, found {}", samples.len()),
            ))
        }
        Some(_) => {}
    }
    let corpus = LabeledCorpus {
        vocab_size,
        languages,
        samples,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn parse_language(rest: &str) -> std::result::Result<LanguageSpec, String> {
    let fields: Vec<&str> = rest.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(format!("language line needs 6 fields, found {}", fields.len()));
    }
    let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| format!("bad {what} `{s}`"));
    let anchors = if fields[5] == "-" {
        Vec::new()
    } else {
        fields[5]
            .split(',')
            .map(|a| a.parse::<TokenId>().map_err(|_| format!("bad anchor `{a}`")))
            .collect::<std::result::Result<_, _>>()?
    };
    Ok(LanguageSpec {
        id: fields[0].to_string(),
        vocab_range: (
            num(fields[1], "range start")? as TokenId,
            num(fields[2], "range end")? as TokenId,
        ),
        transition_seed: num(fields[3], "seed")?,
        order: num(fields[4], "order")? as u8,
        shared_anchor_ids: anchors,
    })
}

fn parse_sample(line: &str) -> std::result::Result<Sample, String> {
    let mut parts = line.split('\t');
    let (Some(id), Some(language), Some(tokens), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err("expected `<id>\\t<language>\\t<tokens>`".into());
    };
    let id = id.parse::<u64>().map_err(|_| format!("bad sample id `{id}`"))?;
    let tokens = tokens
        .split(' ')
        .map(|t| t.parse::<TokenId>().map_err(|_| format!("bad token `{t}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Sample {
        id,
        language: language.to_string(),
        tokens,
    })
}
