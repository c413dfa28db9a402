//! The synthetic task corpus.
//!
//! A task is a parameterized rule over short token sequences that outputs one
//! label token, together with a canonical English definition. Fifteen
//! families are split into ten training families (100 tasks) and five
//! held-out families (20 tasks). Token ids 0..=9 are digits and 10..=35 are
//! lowercase letters; every rule reads only symbols below its alphabet size,
//! which never exceeds 16, so labels fit the 16-way head.

use std::fmt;
use std::path::Path;

use crate::embedder::{cosine, TextEmbedder};
use crate::format::{parse_usize, ByteReader, FormatError};
use crate::hash::fnv1a64;
use crate::model::Example;
use crate::numerics::{derive_seed, Rng};

pub const MIN_LEN: usize = 4;
pub const MAX_LEN: usize = 12;
/// First of the sixteen token ids reserved for definition digests.
pub const DIGEST_BASE: u32 = 48;
pub const DIGEST_LEN: usize = 4;

const NUMBER_WORDS: [&str; 17] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TaskError {
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error("definitions `{0}` and `{1}` are too similar ({2:.4})")]
    Separation(String, String, f64),
    #[error("duplicate definition `{0}`")]
    DuplicateDefinition(String),
    #[error("{0}")]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

fn word(n: usize) -> &'static str {
    NUMBER_WORDS[n]
}

/// A task rule with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    MaxToken { m: usize },
    MinToken { m: usize },
    FirstCopy { m: usize },
    LastCopy { m: usize },
    MajoritySymbol { m: usize },
    WindowExtreme { greatest: bool, w: usize, m: usize },
    AnchoredThreshold { first: bool, t: usize, m: usize },
    ReversePositionCopy { p: usize, m: usize },
    WindowedMajority { w: usize, m: usize },
    ParityOfSum { m: usize },
    ModularSum { q: usize },
    ContainsSymbol { s: usize },
    CountSymbol { s: usize },
    LengthBucket { w: usize },
    SortedIndicator { m: usize },
    IdentityCopy { m: usize },
}

pub const TEST_FAMILIES: [&str; 5] = ["max-token", "min-token", "first-copy", "last-copy", "majority-symbol"];
pub const TRAIN_FAMILIES: [&str; 10] = [
    "window-extreme",
    "anchored-threshold",
    "reverse-position-copy",
    "windowed-majority",
    "parity-of-sum",
    "modular-sum",
    "contains-symbol",
    "count-symbol",
    "length-bucket",
    "sorted-indicator",
];
pub const CATEGORIES: [&str; 12] = [
    "extremum",
    "windowed-extremum",
    "position-copy",
    "thresholded-position",
    "reverse-position",
    "majority",
    "parity",
    "modular-arithmetic",
    "membership",
    "counting",
    "length",
    "ordering",
];

/// Smallest symbol among those seen most often.
pub fn majority(xs: &[u32]) -> u32 {
    let mut counts = [0usize; 64];
    for &x in xs {
        counts[x as usize] += 1;
    }
    let best = *counts.iter().max().expect("nonempty");
    counts.iter().position(|&c| c == best).expect("present") as u32
}

fn alphabet_suffix(m: usize) -> String {
    format!(", {} symbols", word(m))
}

fn random_sequence(rng: &mut Rng, alphabet: usize, min_len: usize) -> Vec<u32> {
    let n = rng.between(min_len, MAX_LEN);
    (0..n).map(|_| rng.below(alphabet) as u32).collect()
}

impl Rule {
    pub fn family(&self) -> &'static str {
        match self {
            Rule::MaxToken { .. } => "max-token",
            Rule::MinToken { .. } => "min-token",
            Rule::FirstCopy { .. } => "first-copy",
            Rule::LastCopy { .. } => "last-copy",
            Rule::MajoritySymbol { .. } => "majority-symbol",
            Rule::WindowExtreme { .. } => "window-extreme",
            Rule::AnchoredThreshold { .. } => "anchored-threshold",
            Rule::ReversePositionCopy { .. } => "reverse-position-copy",
            Rule::WindowedMajority { .. } => "windowed-majority",
            Rule::ParityOfSum { .. } => "parity-of-sum",
            Rule::ModularSum { .. } => "modular-sum",
            Rule::ContainsSymbol { .. } => "contains-symbol",
            Rule::CountSymbol { .. } => "count-symbol",
            Rule::LengthBucket { .. } => "length-bucket",
            Rule::SortedIndicator { .. } => "sorted-indicator",
            Rule::IdentityCopy { .. } => "identity-copy",
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Rule::MaxToken { .. } | Rule::MinToken { .. } => "extremum",
            Rule::WindowExtreme { .. } => "windowed-extremum",
            Rule::FirstCopy { .. } | Rule::LastCopy { .. } | Rule::IdentityCopy { .. } => "position-copy",
            Rule::AnchoredThreshold { .. } => "thresholded-position",
            Rule::ReversePositionCopy { .. } => "reverse-position",
            Rule::MajoritySymbol { .. } | Rule::WindowedMajority { .. } => "majority",
            Rule::ParityOfSum { .. } => "parity",
            Rule::ModularSum { .. } => "modular-arithmetic",
            Rule::ContainsSymbol { .. } => "membership",
            Rule::CountSymbol { .. } => "counting",
            Rule::LengthBucket { .. } => "length",
            Rule::SortedIndicator { .. } => "ordering",
        }
    }

    /// Symbols read by the rule are below this bound.
    pub fn alphabet(&self) -> usize {
        match *self {
            Rule::MaxToken { m }
            | Rule::MinToken { m }
            | Rule::FirstCopy { m }
            | Rule::LastCopy { m }
            | Rule::MajoritySymbol { m }
            | Rule::WindowExtreme { m, .. }
            | Rule::AnchoredThreshold { m, .. }
            | Rule::ReversePositionCopy { m, .. }
            | Rule::WindowedMajority { m, .. }
            | Rule::ParityOfSum { m }
            | Rule::SortedIndicator { m }
            | Rule::IdentityCopy { m } => m,
            Rule::ModularSum { .. } | Rule::ContainsSymbol { .. } | Rule::CountSymbol { .. } => 10,
            Rule::LengthBucket { .. } => 16,
        }
    }

    pub fn min_len(&self) -> usize {
        match *self {
            Rule::ReversePositionCopy { p, .. } => p.max(MIN_LEN),
            _ => MIN_LEN,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Rule::ParityOfSum { .. } | Rule::ContainsSymbol { .. } | Rule::SortedIndicator { .. })
    }

    pub fn definition(&self) -> String {
        match *self {
            Rule::MaxToken { m } => format!("report the greatest symbol in the whole sequence{}", alphabet_suffix(m)),
            Rule::MinToken { m } => format!("report the smallest symbol in the whole sequence{}", alphabet_suffix(m)),
            Rule::FirstCopy { m } => format!("echo the first symbol of the sequence{}", alphabet_suffix(m)),
            Rule::LastCopy { m } => format!("echo the final symbol of the sequence{}", alphabet_suffix(m)),
            Rule::MajoritySymbol { m } => format!(
                "name the symbol that occurs most often, preferring the smaller one on ties{}",
                alphabet_suffix(m)
            ),
            Rule::WindowExtreme { greatest, w, m } => format!(
                "report the {} symbol among the first {} positions{}",
                if greatest { "greatest" } else { "smallest" },
                word(w),
                alphabet_suffix(m)
            ),
            Rule::AnchoredThreshold { first, t, m } => format!(
                "echo the {} symbol of the sequence that is at least {}{}",
                if first { "first" } else { "final" },
                word(t),
                alphabet_suffix(m)
            ),
            Rule::ReversePositionCopy { p, m } => {
                format!("name the entry sitting {} places from the right end{}", word(p), alphabet_suffix(m))
            }
            Rule::WindowedMajority { w, m } => format!(
                "name the symbol that occurs most often among the first {} positions, preferring the smaller one on ties{}",
                word(w),
                alphabet_suffix(m)
            ),
            Rule::ParityOfSum { m } => format!(
                "answer one when the digit total is odd and zero otherwise; digits range below {}",
                word(m)
            ),
            Rule::ModularSum { q } => format!("give the digit total modulo {}", word(q)),
            Rule::ContainsSymbol { s } => format!("answer one when the digit {} is present and zero otherwise", word(s)),
            Rule::CountSymbol { s } => format!("give how many times the digit {} occurs", word(s)),
            Rule::LengthBucket { w } => format!("give the sequence length divided by {}, rounded down", word(w)),
            Rule::SortedIndicator { m } => format!(
                "answer one when the symbols never decrease from left to right and zero otherwise{}",
                alphabet_suffix(m)
            ),
            Rule::IdentityCopy { m } => {
                format!("repeat the symbol that fills every position{}", alphabet_suffix(m))
            }
        }
    }

    /// Whether `xs` is a valid input: length in range, symbols inside the
    /// alphabet, and any rule-specific condition met.
    pub fn accepts(&self, xs: &[u32]) -> bool {
        if xs.len() < self.min_len() || xs.len() > MAX_LEN || xs.iter().any(|&x| x as usize >= self.alphabet()) {
            return false;
        }
        match *self {
            Rule::AnchoredThreshold { t, .. } => xs.iter().any(|&x| x as usize >= t),
            Rule::IdentityCopy { .. } => xs.iter().all(|&x| x == xs[0]),
            _ => true,
        }
    }

    /// The label for a valid input; `None` outside the rule's domain.
    pub fn label(&self, xs: &[u32]) -> Option<u32> {
        if !self.accepts(xs) {
            return None;
        }
        let window = |w: usize| &xs[..w.min(xs.len())];
        let v = match *self {
            Rule::MaxToken { .. } => *xs.iter().max()?,
            Rule::MinToken { .. } => *xs.iter().min()?,
            Rule::FirstCopy { .. } | Rule::IdentityCopy { .. } => xs[0],
            Rule::LastCopy { .. } => xs[xs.len() - 1],
            Rule::MajoritySymbol { .. } => majority(xs),
            Rule::WindowExtreme { greatest, w, .. } => {
                let win = window(w).iter().copied();
                if greatest {
                    win.max()?
                } else {
                    win.min()?
                }
            }
            Rule::AnchoredThreshold { first, t, .. } => {
                let mut hits = xs.iter().copied().filter(|&x| x as usize >= t);
                if first {
                    hits.next()?
                } else {
                    hits.last()?
                }
            }
            Rule::ReversePositionCopy { p, .. } => xs[xs.len() - p],
            Rule::WindowedMajority { w, .. } => majority(window(w)),
            Rule::ParityOfSum { .. } => xs.iter().sum::<u32>() % 2,
            Rule::ModularSum { q } => xs.iter().sum::<u32>() % q as u32,
            Rule::ContainsSymbol { s } => xs.contains(&(s as u32)) as u32,
            Rule::CountSymbol { s } => xs.iter().filter(|&&x| x == s as u32).count() as u32,
            Rule::LengthBucket { w } => (xs.len() / w) as u32,
            Rule::SortedIndicator { .. } => xs.windows(2).all(|p| p[0] <= p[1]) as u32,
        };
        Some(v)
    }

    fn draw_raw(&self, rng: &mut Rng) -> Vec<u32> {
        match *self {
            Rule::AnchoredThreshold { t, m, .. } => loop {
                let xs = random_sequence(rng, m, MIN_LEN);
                if xs.iter().any(|&x| x as usize >= t) {
                    return xs;
                }
            },
            Rule::CountSymbol { s } => {
                let n = rng.between(MIN_LEN, MAX_LEN);
                (0..n).map(|_| if rng.bernoulli(0.3) { s as u32 } else { rng.below(10) as u32 }).collect()
            }
            Rule::SortedIndicator { m } => {
                let mut xs = random_sequence(rng, m, MIN_LEN);
                if rng.bernoulli(0.5) {
                    xs.sort_unstable();
                }
                xs
            }
            Rule::IdentityCopy { m } => {
                let n = rng.between(MIN_LEN, MAX_LEN);
                vec![rng.below(m) as u32; n]
            }
            _ => random_sequence(rng, self.alphabet(), self.min_len()),
        }
    }

    /// One input drawn from the rule's generator. Binary rules first pick
    /// the wanted label with probability one half and resample until it
    /// comes up.
    pub fn draw_input(&self, rng: &mut Rng) -> Vec<u32> {
        if !self.is_binary() {
            return self.draw_raw(rng);
        }
        let want = rng.bernoulli(0.5) as u32;
        loop {
            let xs = self.draw_raw(rng);
            if self.label(&xs) == Some(want) {
                return xs;
            }
        }
    }

    pub fn draw_example(&self, rng: &mut Rng) -> Example {
        let xs = self.draw_input(rng);
        let label = self.label(&xs).expect("generator stays in the domain");
        Example::new(xs, label)
    }

    /// Stable identifier such as `max-token/9` or `window-extreme/greatest/5/12`.
    pub fn id(&self) -> String {
        let params: Vec<String> = match *self {
            Rule::MaxToken { m }
            | Rule::MinToken { m }
            | Rule::FirstCopy { m }
            | Rule::LastCopy { m }
            | Rule::MajoritySymbol { m }
            | Rule::ParityOfSum { m }
            | Rule::SortedIndicator { m }
            | Rule::IdentityCopy { m } => vec![m.to_string()],
            Rule::WindowExtreme { greatest, w, m } => {
                vec![if greatest { "greatest" } else { "smallest" }.into(), w.to_string(), m.to_string()]
            }
            Rule::AnchoredThreshold { first, t, m } => {
                vec![if first { "first" } else { "final" }.into(), t.to_string(), m.to_string()]
            }
            Rule::ReversePositionCopy { p, m } => vec![p.to_string(), m.to_string()],
            Rule::WindowedMajority { w, m } => vec![w.to_string(), m.to_string()],
            Rule::ModularSum { q } => vec![q.to_string()],
            Rule::ContainsSymbol { s } | Rule::CountSymbol { s } => vec![s.to_string()],
            Rule::LengthBucket { w } => vec![w.to_string()],
        };
        format!("{}/{}", self.family(), params.join("/"))
    }

    /// Inverse of [`Rule::id`]. Parameters must be in range for the rule to
    /// be well formed (alphabet 1..=16, windows and offsets within the
    /// sequence length).
    pub fn parse_id(id: &str) -> Result<Rule, TaskError> {
        let unknown = || TaskError::UnknownTask(id.to_string());
        let parts: Vec<&str> = id.split('/').collect();
        let num = |i: usize| -> Result<usize, TaskError> {
            parts.get(i).and_then(|s| s.parse::<usize>().ok()).ok_or_else(unknown)
        };
        let flag = |i: usize, yes: &str, no: &str| -> Result<bool, TaskError> {
            match parts.get(i) {
                Some(s) if *s == yes => Ok(true),
                Some(s) if *s == no => Ok(false),
                _ => Err(unknown()),
            }
        };
        let arity = |n: usize| if parts.len() == n + 1 { Ok(()) } else { Err(unknown()) };
        let rule = match parts[0] {
            "max-token" => arity(1).and(num(1).map(|m| Rule::MaxToken { m }))?,
            "min-token" => arity(1).and(num(1).map(|m| Rule::MinToken { m }))?,
            "first-copy" => arity(1).and(num(1).map(|m| Rule::FirstCopy { m }))?,
            "last-copy" => arity(1).and(num(1).map(|m| Rule::LastCopy { m }))?,
            "majority-symbol" => arity(1).and(num(1).map(|m| Rule::MajoritySymbol { m }))?,
            "parity-of-sum" => arity(1).and(num(1).map(|m| Rule::ParityOfSum { m }))?,
            "sorted-indicator" => arity(1).and(num(1).map(|m| Rule::SortedIndicator { m }))?,
            "identity-copy" => arity(1).and(num(1).map(|m| Rule::IdentityCopy { m }))?,
            "modular-sum" => arity(1).and(num(1).map(|q| Rule::ModularSum { q }))?,
            "contains-symbol" => arity(1).and(num(1).map(|s| Rule::ContainsSymbol { s }))?,
            "count-symbol" => arity(1).and(num(1).map(|s| Rule::CountSymbol { s }))?,
            "length-bucket" => arity(1).and(num(1).map(|w| Rule::LengthBucket { w }))?,
            "window-extreme" => {
                arity(3)?;
                Rule::WindowExtreme { greatest: flag(1, "greatest", "smallest")?, w: num(2)?, m: num(3)? }
            }
            "anchored-threshold" => {
                arity(3)?;
                Rule::AnchoredThreshold { first: flag(1, "first", "final")?, t: num(2)?, m: num(3)? }
            }
            "reverse-position-copy" => {
                arity(2)?;
                Rule::ReversePositionCopy { p: num(1)?, m: num(2)? }
            }
            "windowed-majority" => {
                arity(2)?;
                Rule::WindowedMajority { w: num(1)?, m: num(2)? }
            }
            _ => return Err(unknown()),
        };
        if rule.well_formed() {
            Ok(rule)
        } else {
            Err(unknown())
        }
    }

    fn well_formed(&self) -> bool {
        let m = self.alphabet();
        if !(1..=16).contains(&m) {
            return false;
        }
        match *self {
            Rule::WindowExtreme { w, .. } | Rule::WindowedMajority { w, .. } => (1..=MAX_LEN).contains(&w),
            Rule::AnchoredThreshold { t, m, .. } => t < m,
            Rule::ReversePositionCopy { p, .. } => (1..=MAX_LEN).contains(&p),
            Rule::ParityOfSum { m } | Rule::SortedIndicator { m } => m >= 2,
            Rule::ModularSum { q } => (1..=16).contains(&q),
            Rule::ContainsSymbol { s } | Rule::CountSymbol { s } => s < 10,
            Rule::LengthBucket { w } => (1..=MAX_LEN).contains(&w),
            _ => true,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// The corpus parameter grid of every family, training families first.
pub fn corpus_rules(family: &str) -> Vec<Rule> {
    let alphabets = [9, 11, 13, 15];
    match family {
        "max-token" => alphabets.iter().map(|&m| Rule::MaxToken { m }).collect(),
        "min-token" => alphabets.iter().map(|&m| Rule::MinToken { m }).collect(),
        "first-copy" => alphabets.iter().map(|&m| Rule::FirstCopy { m }).collect(),
        "last-copy" => alphabets.iter().map(|&m| Rule::LastCopy { m }).collect(),
        "majority-symbol" => [3, 5, 7, 9].iter().map(|&m| Rule::MajoritySymbol { m }).collect(),
        "window-extreme" => [true, false]
            .iter()
            .flat_map(|&greatest| (5..=9).map(move |w| Rule::WindowExtreme { greatest, w, m: w + 7 }))
            .collect(),
        "anchored-threshold" => [true, false]
            .iter()
            .flat_map(|&first| {
                [(1, 16), (1, 12), (2, 16), (2, 12), (3, 16)].into_iter().map(move |(t, m)| Rule::AnchoredThreshold {
                    first,
                    t,
                    m,
                })
            })
            .collect(),
        "reverse-position-copy" => [2, 3, 4]
            .iter()
            .flat_map(|&p| [8, 12, 16].into_iter().map(move |m| Rule::ReversePositionCopy { p, m }))
            .chain(std::iter::once(Rule::ReversePositionCopy { p: 5, m: 10 }))
            .collect(),
        "windowed-majority" => [8, 10, 12]
            .iter()
            .flat_map(|&w| [3, 5, 7].into_iter().map(move |m| Rule::WindowedMajority { w, m }))
            .chain(std::iter::once(Rule::WindowedMajority { w: 9, m: 9 }))
            .collect(),
        "parity-of-sum" => (2..12).map(|m| Rule::ParityOfSum { m }).collect(),
        "modular-sum" => (3..13).map(|q| Rule::ModularSum { q }).collect(),
        "contains-symbol" => (0..10).map(|s| Rule::ContainsSymbol { s }).collect(),
        "count-symbol" => (0..10).map(|s| Rule::CountSymbol { s }).collect(),
        "length-bucket" => (1..11).map(|w| Rule::LengthBucket { w }).collect(),
        "sorted-indicator" => (4..14).map(|m| Rule::SortedIndicator { m }).collect(),
        "identity-copy" => (2..=16).map(|m| Rule::IdentityCopy { m }).collect(),
        _ => Vec::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub rule: Rule,
    pub split: Split,
    /// Seed of this task's example stream.
    pub seed: u64,
}

impl Task {
    pub fn id(&self) -> String {
        self.rule.id()
    }

    pub fn definition(&self) -> String {
        self.rule.definition()
    }

    pub fn category(&self) -> &'static str {
        self.rule.category()
    }

    /// `n` examples from the stream named by `(task seed, stream)`.
    pub fn sample(&self, n: usize, stream: u64) -> Vec<Example> {
        sample_examples(&self.rule, n, derive_seed(self.seed, &[stream]))
    }
}

/// `n` independent examples of `rule` drawn under `seed`.
pub fn sample_examples(rule: &Rule, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rule.draw_example(&mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub train: Vec<Task>,
    pub test: Vec<Task>,
}

pub fn generate_corpus(seed: u64) -> Corpus {
    let build = |families: &[&str], split: Split, offset: u64| -> Vec<Task> {
        families
            .iter()
            .flat_map(|f| corpus_rules(f))
            .enumerate()
            .map(|(i, rule)| Task { rule, split, seed: derive_seed(seed, &[offset, i as u64]) })
            .collect()
    };
    Corpus { seed, train: build(&TRAIN_FAMILIES, Split::Train, 0), test: build(&TEST_FAMILIES, Split::Test, 1) }
}

impl Corpus {
    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.train.iter().chain(&self.test)
    }

    pub fn find(&self, id: &str) -> Option<&Task> {
        self.tasks().find(|t| t.id() == id)
    }

    /// Definitions are unique and definitions of different families stay
    /// below `tau` in similarity.
    pub fn check_separation(&self, embedder: &dyn TextEmbedder, tau: f64) -> Result<f64, TaskError> {
        let tasks: Vec<&Task> = self.tasks().collect();
        let defs: Vec<String> = tasks.iter().map(|t| t.definition()).collect();
        let embs: Vec<_> = defs.iter().map(|d| embedder.embed(d)).collect();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..tasks.len() {
            for j in 0..i {
                if defs[i] == defs[j] {
                    return Err(TaskError::DuplicateDefinition(defs[i].clone()));
                }
                if tasks[i].rule.family() == tasks[j].rule.family() {
                    continue;
                }
                let s = cosine(&embs[i], &embs[j]).expect("one embedder");
                worst = worst.max(s);
                if s >= tau {
                    return Err(TaskError::Separation(defs[j].clone(), defs[i].clone(), s));
                }
            }
        }
        Ok(worst)
    }
}

/// The reserved tokens standing for a definition: the low four nibbles of
/// its FNV-1a hash, offset into the digest range.
pub fn definition_digest(definition: &str) -> [u32; DIGEST_LEN] {
    let h = fnv1a64(definition.as_bytes());
    std::array::from_fn(|i| DIGEST_BASE + ((h >> (4 * i)) & 15) as u32)
}

/// `tokens` with the definition digest in front.
pub fn with_digest(definition: &str, tokens: &[u32]) -> Vec<u32> {
    let mut out = definition_digest(definition).to_vec();
    out.extend_from_slice(tokens);
    out
}

fn write_examples(out: &mut String, examples: &[Example]) {
    for e in examples {
        let toks: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!("{} -> {}\n", toks.join(" "), e.label));
    }
}

fn parse_tokens(s: &str, at: usize) -> Result<Vec<u32>, FormatError> {
    let toks: Result<Vec<u32>, _> = s.split(' ').map(|t| t.parse::<u32>()).collect();
    match toks {
        Ok(t) if !t.is_empty() => Ok(t),
        _ => Err(FormatError::new(at, format!("bad token list `{s}`"))),
    }
}

fn parse_example(line: &str, at: usize) -> Result<Example, FormatError> {
    let (toks, label) = line.split_once(" -> ").ok_or_else(|| FormatError::new(at, "expected `tokens -> label`"))?;
    let label = label.parse::<u32>().map_err(|_| FormatError::new(at, format!("bad label `{label}`")))?;
    Ok(Example::new(parse_tokens(toks, at)?, label))
}

/// One task file: identity, definition and `n` examples.
pub fn task_record(task: &Task, examples: &[Example]) -> String {
    let mut out = String::from("tegee-task 1\n");
    out.push_str(&format!("id {}\n", task.id()));
    out.push_str(&format!("category {}\n", task.category()));
    out.push_str(&format!("split {}\n", task.split.name()));
    out.push_str(&format!("definition {}\n", task.definition()));
    out.push_str(&format!("examples {}\n", examples.len()));
    write_examples(&mut out, examples);
    out.push_str("end\n");
    out
}

/// File-system friendly form of a task id.
pub fn file_stem(id: &str) -> String {
    id.replace('/', "_")
}

/// Writes one `.task` file per task plus `index.txt` listing them.
pub fn export_corpus(corpus: &Corpus, dir: &Path, examples_per_task: usize) -> Result<(), TaskError> {
    let io = |p: &Path, e: std::io::Error| TaskError::Io { path: p.display().to_string(), message: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut index = format!("tegee-corpus 1\nseed {}\ntasks {}\n", corpus.seed, corpus.train.len() + corpus.test.len());
    for (i, task) in corpus.tasks().enumerate() {
        let name = format!("{}.task", file_stem(&task.id()));
        let path = dir.join(&name);
        std::fs::write(&path, task_record(task, &task.sample(examples_per_task, 0))).map_err(|e| io(&path, e))?;
        index.push_str(&format!("{i} {} {} {}\n", task.split.name(), task.id(), name));
    }
    index.push_str("end\n");
    let path = dir.join("index.txt");
    std::fs::write(&path, index).map_err(|e| io(&path, e))
}

/// Few-shot demonstrations with a final query. The answer to the query is
/// kept private: training code sees only [`DemonstrationSet::shots`].
///
/// ```compile_fail
/// use tegee::tasks::{generate_corpus, DemonstrationSet};
/// let demos = DemonstrationSet::draw(&generate_corpus(0).test[0], 5, 0);
/// let _leak = demos.answer;
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct DemonstrationSet {
    shots: Vec<Example>,
    query: Vec<u32>,
    answer: Option<u32>,
    provenance: Option<Rule>,
}

impl DemonstrationSet {
    pub fn new(shots: Vec<Example>, query: Vec<u32>, answer: Option<u32>, provenance: Option<Rule>) -> Self {
        assert!(!shots.is_empty(), "a demonstration set needs at least one shot");
        DemonstrationSet { shots, query, answer, provenance }
    }

    /// `shots` demonstrations plus one query, all from `task`.
    pub fn draw(task: &Task, shots: usize, stream: u64) -> Self {
        let mut all = task.sample(shots + 1, stream);
        let last = all.pop().expect("shots + 1 examples");
        DemonstrationSet::new(all, last.tokens, Some(last.label), Some(task.rule))
    }

    pub fn shots(&self) -> &[Example] {
        &self.shots
    }

    pub fn query(&self) -> &[u32] {
        &self.query
    }

    /// The task the demonstrations were drawn from, when known.
    pub fn provenance(&self) -> Option<Rule> {
        self.provenance
    }

    /// Checks a prediction against the held-out answer, if there is one.
    pub fn is_correct(&self, prediction: u32) -> Option<bool> {
        self.answer.map(|a| a == prediction)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("tegee-demos 1\n");
        match self.provenance {
            Some(r) => out.push_str(&format!("task {}\n", r.id())),
            None => out.push_str("task none\n"),
        }
        out.push_str(&format!("shots {}\n", self.shots.len()));
        write_examples(&mut out, &self.shots);
        let q: Vec<String> = self.query.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!("query {}\n", q.join(" ")));
        match self.answer {
            Some(a) => out.push_str(&format!("answer {a}\n")),
            None => out.push_str("answer none\n"),
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        let at = r.offset();
        if r.line()? != "tegee-demos 1" {
            return Err(FormatError::new(at, "not a demonstration file (expected `tegee-demos 1`)"));
        }
        let at = r.offset();
        let task = r.fields("task", 2)?[1];
        let provenance = match task {
            "none" => None,
            id => Some(Rule::parse_id(id).map_err(|e| FormatError::new(at, e.to_string()))?),
        };
        let at = r.offset();
        let n = parse_usize(r.fields("shots", 2)?[1], at)?;
        if n == 0 {
            return Err(FormatError::new(at, "at least one shot is required"));
        }
        let mut shots = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            shots.push(parse_example(r.line()?, at)?);
        }
        let at = r.offset();
        let line = r.line()?;
        let query = parse_tokens(line.strip_prefix("query ").ok_or_else(|| FormatError::new(at, "expected `query`"))?, at)?;
        let at = r.offset();
        let answer = match r.fields("answer", 2)?[1] {
            "none" => None,
            a => Some(a.parse::<u32>().map_err(|_| FormatError::new(at, format!("bad answer `{a}`")))?),
        };
        let at = r.offset();
        if r.line()? != "end" {
            return Err(FormatError::new(at, "expected `end`"));
        }
        r.finish()?;
        Ok(DemonstrationSet { shots, query, answer, provenance })
    }
}
