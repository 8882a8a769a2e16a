//! Whitespace tokenization, vocabularies, TSV datasets and a synthetic
//! keyword-sentiment corpus with negation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const RESERVED_TOKENS: [&str; 3] = ["[pad]", "[unk]", "[cls]"];

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Token to id mapping with `[pad]`, `[unk]` and `[cls]` fixed at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Ranks lowercased whitespace tokens by descending frequency, breaking
    /// ties lexicographically, and keeps as many as fit in `vocab_size`
    /// after the reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::input(
                "cannot build a vocabulary from an empty corpus",
            ));
        }
        if vocab_size < RESERVED_TOKENS.len() {
            return Err(Error::config(format!(
                "vocab_size {vocab_size} leaves no room for reserved tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                if !RESERVED_TOKENS.contains(&tok.as_str()) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(vocab_size - RESERVED_TOKENS.len());
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[cls]` followed by token ids, truncated to `max_seq_len`, no padding.
    pub fn encode_unpadded(&self, text: &str, max_seq_len: usize) -> Vec<u32> {
        std::iter::once(CLS_ID)
            .chain(tokenize(text).map(|t| self.id(&t).unwrap_or(UNK_ID)))
            .take(max_seq_len)
            .collect()
    }

    /// `[cls]` followed by token ids, truncated or right-padded with `[pad]`
    /// to exactly `max_seq_len`.
    pub fn encode(&self, text: &str, max_seq_len: usize) -> Vec<u32> {
        let mut ids = self.encode_unpadded(text, max_seq_len);
        ids.resize(max_seq_len, PAD_ID);
        ids
    }

    /// Display strings for `ids`, `[unk]` for anything unknown.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[1]).to_string())
            .collect()
    }

    /// One token per line; line `n` (0-based) holds id `n + 3`.
    pub fn to_file_string(&self) -> String {
        self.tokens[RESERVED_TOKENS.len()..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_tokens(text.lines().map(str::to_string)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

/// Parses `label<TAB>text` lines. Only the first tab separates; later tabs
/// stay in the text.
pub fn parse_tsv(content: &str, path: &Path) -> Result<Vec<Example>> {
    let body = content.strip_suffix('\n').unwrap_or(content);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (label, text) = line
                .split_once('\t')
                .ok_or_else(|| err("expected label<TAB>text".into()))?;
            let label = label
                .parse::<usize>()
                .map_err(|_| err(format!("label {label:?} is not a non-negative integer")))?;
            if text.is_empty() {
                return Err(err("empty text".into()));
            }
            Ok(Example {
                text: text.to_string(),
                label,
            })
        })
        .collect()
}

pub fn load_tsv(path: &Path) -> Result<Vec<Example>> {
    let content = std::fs::read_to_string(path)?;
    parse_tsv(&content, path)
}

pub fn to_tsv(examples: &[Example]) -> String {
    examples
        .iter()
        .map(|e| format!("{}\t{}\n", e.label, e.text))
        .collect()
}

pub fn write_tsv(examples: &[Example], path: &Path) -> Result<()> {
    write_atomic(path, to_tsv(examples).as_bytes())
}

/// Checks every label is below `num_classes`.
pub fn check_labels(examples: &[Example], num_classes: usize) -> Result<()> {
    match examples.iter().find(|e| e.label >= num_classes) {
        Some(e) => Err(Error::config(format!(
            "label {} does not fit a {num_classes}-class model",
            e.label
        ))),
        None => Ok(()),
    }
}

/// An example already mapped to token ids (unpadded: `[pad]` is masked out
/// of attention, so trailing padding never changes a prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub label: usize,
}

pub fn encode_dataset(examples: &[Example], vocab: &Vocab, max_seq_len: usize) -> Vec<Encoded> {
    examples
        .iter()
        .map(|e| Encoded {
            ids: vocab.encode_unpadded(&e.text, max_seq_len),
            label: e.label,
        })
        .collect()
}

const POSITIVE: [&str; 12] = [
    "good",
    "great",
    "excellent",
    "wonderful",
    "delightful",
    "brilliant",
    "charming",
    "superb",
    "enjoyable",
    "moving",
    "benign",
    "fantastic",
];
const NEGATIVE: [&str; 12] = [
    "bad", "awful", "terrible", "boring", "dull", "hampered", "painful", "mediocre", "tedious",
    "clumsy", "bland", "dreadful",
];
const NEGATIONS: [&str; 4] = ["not", "never", "hardly", "rarely"];
const FILLER: [&str; 40] = [
    "the",
    "movie",
    "film",
    "plot",
    "story",
    "actors",
    "was",
    "is",
    "a",
    "an",
    "with",
    "and",
    "this",
    "that",
    "director",
    "scenes",
    "script",
    "music",
    "it",
    "of",
    "in",
    "at",
    "very",
    "quite",
    "really",
    "ending",
    "characters",
    "cast",
    "performance",
    "screen",
    "time",
    "some",
    "many",
    "all",
    "its",
    "her",
    "his",
    "their",
    "visual",
    "dialogue",
];

/// Parameters of the synthetic sentiment corpus. Label 1 is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub negations: Vec<String>,
    pub filler: Vec<String>,
    pub negation_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            positive: owned(&POSITIVE),
            negative: owned(&NEGATIVE),
            negations: owned(&NEGATIONS),
            filler: owned(&FILLER),
            negation_rate: 0.3,
            min_len: 5,
            max_len: 20,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() || self.filler.is_empty() {
            return Err(Error::config("keyword and filler lists must be non-empty"));
        }
        if self.positive.iter().any(|w| self.negative.contains(w)) {
            return Err(Error::config("positive and negative keywords overlap"));
        }
        if !(0.0..=1.0).contains(&self.negation_rate) {
            return Err(Error::config("negation_rate outside [0, 1]"));
        }
        if self.negation_rate > 0.0 && self.negations.is_empty() {
            return Err(Error::config("negation_rate > 0 needs negation words"));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::config(
                "sentence lengths must satisfy 2 <= min <= max",
            ));
        }
        Ok(())
    }
}

/// A generated example plus the bookkeeping needed for case analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthExample {
    pub example: Example,
    /// A negation word flips the keyword's polarity ("hard" case).
    pub negated: bool,
    pub keyword: String,
    /// Word position of the keyword in `example.text`.
    pub keyword_pos: usize,
}

/// Seeded corpus of `n` filler sentences, each carrying one sentiment
/// keyword. With probability `negation_rate` a negation word is placed right
/// before the keyword and the label flips.
pub fn generate_synthetic(spec: &SynthSpec, n: usize) -> Result<Vec<SynthExample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::input("n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let positive = rng.random_bool(0.5);
        let negated = spec.negation_rate > 0.0 && rng.random::<f64>() < spec.negation_rate;
        let pool = if positive {
            &spec.positive
        } else {
            &spec.negative
        };
        let keyword = pool.choose(&mut rng).expect("non-empty").clone();

        let mut words: Vec<&str> = (0..len)
            .map(|_| spec.filler.choose(&mut rng).expect("non-empty").as_str())
            .collect();
        let lowest = usize::from(negated);
        let keyword_pos = rng.random_range(lowest..len);
        words[keyword_pos] = &keyword;
        if negated {
            words[keyword_pos - 1] = spec.negations.choose(&mut rng).expect("non-empty");
        }
        out.push(SynthExample {
            example: Example {
                text: words.join(" "),
                label: usize::from(positive != negated),
            },
            negated,
            keyword,
            keyword_pos,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let v = Vocab::build(&["a b", "a"], 16).unwrap();
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
        let v = Vocab::build(&["x m"], 16).unwrap();
        assert!(v.id("m").unwrap() < v.id("x").unwrap());
    }

    #[test]
    fn vocab_truncates_and_maps_unknowns() {
        let v = Vocab::build(&["a a a b b c"], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("c"), None);
        assert_eq!(v.encode("c A", 4), vec![CLS_ID, UNK_ID, 3, PAD_ID]);
        assert!(Vocab::build::<&str>(&[], 8).is_err());
    }

    #[test]
    fn encode_shapes() {
        let v = Vocab::build(&["good movie"], 16).unwrap();
        assert_eq!(v.encode("", 4), vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(v.encode("   ", 3), vec![CLS_ID, PAD_ID, PAD_ID]);
        let good = v.id("good").unwrap();
        let movie = v.id("movie").unwrap();
        assert_eq!(
            v.encode("good movie", 5),
            vec![CLS_ID, good, movie, PAD_ID, PAD_ID]
        );
        assert_eq!(v.encode("good movie good movie good", 4).len(), 4);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&["b a c a"], 16).unwrap();
        v.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a\nb\nc\n");
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn tsv_parsing_rules() {
        let p = Path::new("t.tsv");
        assert_eq!(
            parse_tsv("1\thello world\n", p).unwrap(),
            vec![Example {
                text: "hello world".into(),
                label: 1
            }]
        );
        let ex = parse_tsv("0\ta\tb\tc", p).unwrap();
        assert_eq!(ex[0].text, "a\tb\tc");
        assert!(parse_tsv("", p).unwrap().is_empty());

        match parse_tsv("1\tok\nno tab here\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_tsv("x\ttext\n", p),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_tsv("-1\ttext\n", p),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(parse_tsv("1\t\n", p), Err(Error::Parse { .. })));
    }

    #[test]
    fn tsv_file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        let content = "1\tgreat film\n0\tnot\tgood at all\n2\tthird\n";
        std::fs::write(&path, content).unwrap();
        let ex = load_tsv(&path).unwrap();
        assert_eq!(to_tsv(&ex), content);
        let out = dir.path().join("e.tsv");
        write_tsv(&ex, &out).unwrap();
        assert_eq!(std::fs::read_to_string(out).unwrap(), content);
    }

    #[test]
    fn label_check() {
        let ex = vec![Example {
            text: "x".into(),
            label: 2,
        }];
        assert!(check_labels(&ex, 3).is_ok());
        assert!(matches!(check_labels(&ex, 2), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_without_negation_follows_keywords() {
        let spec = SynthSpec {
            negation_rate: 0.0,
            seed: 3,
            ..SynthSpec::default()
        };
        for s in generate_synthetic(&spec, 300).unwrap() {
            assert!(!s.negated);
            let positive = spec.positive.contains(&s.keyword);
            assert_eq!(s.example.label, usize::from(positive));
            let words: Vec<&str> = s.example.text.split(' ').collect();
            assert_eq!(words[s.keyword_pos], s.keyword);
            assert!((spec.min_len..=spec.max_len).contains(&words.len()));
        }
    }

    #[test]
    fn synthetic_negation_flips_label() {
        let spec = SynthSpec {
            negation_rate: 1.0,
            seed: 4,
            ..SynthSpec::default()
        };
        for s in generate_synthetic(&spec, 200).unwrap() {
            assert!(s.negated);
            let words: Vec<&str> = s.example.text.split(' ').collect();
            assert!(spec.negations.iter().any(|n| n == words[s.keyword_pos - 1]));
            let positive = spec.positive.contains(&s.keyword);
            assert_eq!(s.example.label, usize::from(!positive));
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SynthSpec {
            seed: 11,
            ..SynthSpec::default()
        };
        assert_eq!(
            generate_synthetic(&spec, 50).unwrap(),
            generate_synthetic(&spec, 50).unwrap()
        );
        let other = SynthSpec {
            seed: 12,
            ..spec.clone()
        };
        assert_ne!(
            generate_synthetic(&spec, 50).unwrap(),
            generate_synthetic(&other, 50).unwrap()
        );
        assert!(generate_synthetic(&spec, 0).is_err());
    }

    #[test]
    fn synthetic_negation_rate_concentrates() {
        // Binomial(2000, 0.3) has sd ~0.0102, so +-0.03 is about 3 sd.
        let spec = SynthSpec {
            seed: 21,
            ..SynthSpec::default()
        };
        let data = generate_synthetic(&spec, 2000).unwrap();
        let frac = data.iter().filter(|s| s.negated).count() as f64 / 2000.0;
        assert!((frac - 0.3).abs() <= 0.03, "negated fraction {frac}");
    }

    #[test]
    fn synth_spec_validation() {
        let mut spec = SynthSpec::default();
        spec.negative.push("good".into());
        assert!(spec.validate().is_err());
        let spec = SynthSpec {
            negation_rate: 1.5,
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = SynthSpec {
            min_len: 9,
            max_len: 3,
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
