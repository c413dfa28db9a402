//! Concluding a task definition from demonstrations.
//!
//! Three extractors share one interface: the oracle returns the ground-truth
//! definition of the task the demonstrations came from, the hypothesis
//! extractor searches a library of executable rules for one consistent with
//! every shot, and the noisy extractor drops words from the oracle
//! definition at random.

use std::fmt;

use crate::format::FormatError;
use crate::hash::fnv1a64;
use crate::model::Example;
use crate::numerics::{derive_seed, Rng};
use crate::tasks::{corpus_rules, DemonstrationSet, Rule};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExtractError {
    #[error("demonstrations carry no task provenance")]
    Provenance,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown extractor `{0}`")]
    UnknownSource(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Source {
    Oracle,
    Hypothesis,
    Noisy(f64),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Oracle => f.write_str("oracle"),
            Source::Hypothesis => f.write_str("hypothesis"),
            Source::Noisy(p) => write!(f, "noisy:{p}"),
        }
    }
}

impl std::str::FromStr for Source {
    type Err = ExtractError;

    /// Accepts `oracle`, `hypothesis` and `noisy:<p>` with `p` in `[0, 1]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Source::Oracle),
            "hypothesis" => Ok(Source::Hypothesis),
            _ => match s.strip_prefix("noisy:").and_then(|p| p.parse::<f64>().ok()) {
                Some(p) if (0.0..=1.0).contains(&p) => Ok(Source::Noisy(p)),
                _ => Err(ExtractError::UnknownSource(s.to_string())),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub definition: String,
    pub confidence: f64,
    pub source: Source,
}

pub trait Extractor {
    fn source(&self) -> Source;
    fn extract(&self, demos: &DemonstrationSet) -> Result<Extraction, ExtractError>;
}

pub struct OracleExtractor;

impl Extractor for OracleExtractor {
    fn source(&self) -> Source {
        Source::Oracle
    }

    fn extract(&self, demos: &DemonstrationSet) -> Result<Extraction, ExtractError> {
        let rule = demos.provenance().ok_or(ExtractError::Provenance)?;
        Ok(Extraction { definition: rule.definition(), confidence: 1.0, source: Source::Oracle })
    }
}

/// Every family at broad parameter grids: alphabets 2..=16 for the
/// single-parameter sequence families, the corpus grids for families whose
/// parameters are coupled, and the full symbol or divisor ranges for the
/// digit families.
pub fn default_library() -> Vec<Rule> {
    let mut lib = Vec::new();
    for m in 2..=16 {
        lib.extend([
            Rule::MaxToken { m },
            Rule::MinToken { m },
            Rule::FirstCopy { m },
            Rule::LastCopy { m },
            Rule::MajoritySymbol { m },
            Rule::ParityOfSum { m },
            Rule::SortedIndicator { m },
            Rule::IdentityCopy { m },
            Rule::ModularSum { q: m },
        ]);
    }
    for family in ["window-extreme", "anchored-threshold", "reverse-position-copy", "windowed-majority"] {
        lib.extend(corpus_rules(family));
    }
    for s in 0..10 {
        lib.extend([Rule::ContainsSymbol { s }, Rule::CountSymbol { s }]);
    }
    lib.extend((1..=12).map(|w| Rule::LengthBucket { w }));
    lib
}

pub struct HypothesisExtractor {
    library: Vec<Rule>,
}

impl Default for HypothesisExtractor {
    fn default() -> Self {
        HypothesisExtractor { library: default_library() }
    }
}

impl HypothesisExtractor {
    pub fn new(library: Vec<Rule>) -> Self {
        HypothesisExtractor { library }
    }

    pub fn library(&self) -> &[Rule] {
        &self.library
    }
}

fn consistent(rule: &Rule, e: &Example) -> bool {
    rule.label(&e.tokens) == Some(e.label)
}

/// Search over `library`. Among hypotheses consistent with every shot, the
/// one with the smallest alphabet wins, then the lexicographically first
/// family id, then library order. Confidence is the share of winners'
/// tier (consistent hypotheses with the winning alphabet) that belong to the
/// winning family. When nothing is fully consistent, the hypothesis matching
/// the most shots is returned under the same ordering, with the matched
/// fraction as confidence.
pub fn extract_by_hypothesis(shots: &[Example], library: &[Rule]) -> Result<Extraction, ExtractError> {
    if library.is_empty() {
        return Err(ExtractError::Contract("empty hypothesis library".into()));
    }
    if shots.is_empty() {
        return Err(ExtractError::Contract("no shots".into()));
    }
    let key = |r: &Rule| (r.alphabet(), r.family());
    let scored: Vec<(usize, &Rule)> =
        library.iter().map(|r| (shots.iter().filter(|e| consistent(r, e)).count(), r)).collect();
    let best_score = scored.iter().map(|(s, _)| *s).max().expect("nonempty library");
    let mut top: Vec<&Rule> = scored.iter().filter(|(s, _)| *s == best_score).map(|(_, r)| *r).collect();
    // Stable, so library order breaks the remaining ties.
    top.sort_by(|a, b| key(a).cmp(&key(b)));
    let winner = top[0];
    let confidence = if best_score == shots.len() {
        let tier: Vec<&&Rule> = top.iter().filter(|r| r.alphabet() == winner.alphabet()).collect();
        tier.iter().filter(|r| r.family() == winner.family()).count() as f64 / tier.len() as f64
    } else {
        best_score as f64 / shots.len() as f64
    };
    Ok(Extraction { definition: winner.definition(), confidence, source: Source::Hypothesis })
}

impl Extractor for HypothesisExtractor {
    fn source(&self) -> Source {
        Source::Hypothesis
    }

    fn extract(&self, demos: &DemonstrationSet) -> Result<Extraction, ExtractError> {
        extract_by_hypothesis(demos.shots(), &self.library)
    }
}

/// Drops each word of `definition` independently with probability `p`; an
/// empty result becomes `task`.
pub fn drop_words(definition: &str, p: f64, rng: &mut Rng) -> String {
    let kept: Vec<&str> = definition.split_whitespace().filter(|_| !rng.bernoulli(p)).collect();
    if kept.is_empty() {
        "task".to_string()
    } else {
        kept.join(" ")
    }
}

pub struct NoisyExtractor {
    pub p: f64,
    pub seed: u64,
}

impl NoisyExtractor {
    pub fn new(p: f64, seed: u64) -> Result<Self, ExtractError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(ExtractError::Contract(format!("drop probability {p} outside [0, 1]")));
        }
        Ok(NoisyExtractor { p, seed })
    }
}

impl Extractor for NoisyExtractor {
    fn source(&self) -> Source {
        Source::Noisy(self.p)
    }

    /// The word stream is seeded by the extractor seed and the definition,
    /// so the same demonstrations always degrade the same way.
    fn extract(&self, demos: &DemonstrationSet) -> Result<Extraction, ExtractError> {
        let clean = OracleExtractor.extract(demos)?.definition;
        let mut rng = Rng::new(derive_seed(self.seed, &[fnv1a64(clean.as_bytes())]));
        Ok(Extraction { definition: drop_words(&clean, self.p, &mut rng), confidence: 1.0 - self.p, source: self.source() })
    }
}

pub fn make_extractor(source: Source, seed: u64) -> Box<dyn Extractor + Send + Sync> {
    match source {
        Source::Oracle => Box::new(OracleExtractor),
        Source::Hypothesis => Box::new(HypothesisExtractor::default()),
        Source::Noisy(p) => Box::new(NoisyExtractor { p, seed }),
    }
}

/// Definition records, one per task: `task-id<TAB>confidence<TAB>definition`.
pub fn definitions_to_text(source: &str, records: &[(String, Extraction)]) -> String {
    let mut out = format!("tegee-definitions 1\nsource {source}\ncount {}\n", records.len());
    for (id, e) in records {
        out.push_str(&format!("{id}\t{}\t{}\n", e.confidence, e.definition.replace('\n', " ")));
    }
    out.push_str("end\n");
    out
}

/// Parses a definitions file into `(task id, definition)` pairs. The
/// confidence column may be empty for externally produced lists.
pub fn definitions_from_text(bytes: &[u8]) -> Result<(String, Vec<(String, String)>), FormatError> {
    let mut r = crate::format::ByteReader::new(bytes);
    let at = r.offset();
    if r.line()? != "tegee-definitions 1" {
        return Err(FormatError::new(at, "not a definitions file (expected `tegee-definitions 1`)"));
    }
    let source = r.fields("source", 2)?[1].to_string();
    let at = r.offset();
    let n = crate::format::parse_usize(r.fields("count", 2)?[1], at)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let line = r.line()?;
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(_conf), Some(def)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(FormatError::new(at, "expected `task-id<TAB>confidence<TAB>definition`"));
        };
        if id.is_empty() {
            return Err(FormatError::new(at, "empty task id"));
        }
        out.push((id.to_string(), def.to_string()));
    }
    let at = r.offset();
    if r.line()? != "end" {
        return Err(FormatError::new(at, "expected `end`"));
    }
    r.finish()?;
    Ok((source, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_corpus, sample_examples};

    #[test]
    fn max_family_is_recognized() {
        let shots = sample_examples(&Rule::MaxToken { m: 9 }, 5, 4);
        let e = extract_by_hypothesis(&shots, &default_library()).unwrap();
        assert!(e.definition.starts_with("report the greatest symbol in the whole sequence"), "{}", e.definition);
        assert_eq!(e.confidence, 1.0);
    }

    #[test]
    fn palindrome_is_ambiguous() {
        let shots = vec![Example::new(vec![2, 5, 5, 2], 2)];
        let e = extract_by_hypothesis(&shots, &default_library()).unwrap();
        assert_eq!(e.definition, Rule::FirstCopy { m: 6 }.definition());
        assert!(e.confidence < 1.0);
    }

    #[test]
    fn corrupted_label_gives_partial_match() {
        let mut shots = sample_examples(&Rule::MinToken { m: 11 }, 5, 9);
        shots[2].label = 15;
        let e = extract_by_hypothesis(&shots, &default_library()).unwrap();
        assert_eq!(e.confidence, 0.8);
    }

    #[test]
    fn empty_library_rejected() {
        let shots = sample_examples(&Rule::MinToken { m: 11 }, 2, 9);
        assert!(matches!(extract_by_hypothesis(&shots, &[]), Err(ExtractError::Contract(_))));
    }

    #[test]
    fn noisy_edges() {
        let task = &generate_corpus(0).test[0];
        let demos = DemonstrationSet::draw(task, 5, 0);
        let clean = NoisyExtractor::new(0.0, 1).unwrap().extract(&demos).unwrap();
        assert_eq!(clean.definition, task.definition());
        assert_eq!(NoisyExtractor::new(1.0, 1).unwrap().extract(&demos).unwrap().definition, "task");
        assert!(NoisyExtractor::new(1.5, 1).is_err());
        let no_prov = DemonstrationSet::new(demos.shots().to_vec(), vec![1, 2, 3, 4], None, None);
        assert_eq!(OracleExtractor.extract(&no_prov), Err(ExtractError::Provenance));
    }

    #[test]
    fn source_names_round_trip() {
        for s in [Source::Oracle, Source::Hypothesis, Source::Noisy(0.5)] {
            assert_eq!(s.to_string().parse::<Source>().unwrap(), s);
        }
        assert!("noisy:2".parse::<Source>().is_err());
    }

    #[test]
    fn definitions_file_round_trip() {
        let e = Extraction { definition: "give the digit total modulo three".into(), confidence: 0.5, source: Source::Hypothesis };
        let text = definitions_to_text("hypothesis", &[("modular-sum/3".into(), e)]);
        let (src, recs) = definitions_from_text(text.as_bytes()).unwrap();
        assert_eq!(src, "hypothesis");
        assert_eq!(recs, vec![("modular-sum/3".to_string(), "give the digit total modulo three".to_string())]);
    }
}
