//! Transcript handling: normalization, the pronunciation lexicon,
//! forced-alignment parsing, duration quantization, length regulation,
//! and the two content-editing operations (word replacement and muting).
//!
//! Everything here is a pure function over immutable sequences. There is
//! deliberately no grapheme-to-phoneme fallback: a word outside the
//! lexicon is a hard error, and number expansion is out of scope.

mod textgrid;
mod timing;

pub use textgrid::{parse_textgrid, parse_textgrid_str, serialize_textgrid};
pub use timing::{
    edit_mute, edit_mute_entries, edit_replace, length_regulate, quantize_durations,
    regulation_indices, FRAME_RATE,
};

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("unsupported token \"{token}\" (digits are not expanded)")]
    UnsupportedToken { token: String },
    #[error("word \"{word}\" is not in the lexicon")]
    OutOfVocabulary { word: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon line {line}: {detail}")]
    LexiconParse { line: usize, detail: String },
    #[error("\"{symbol}\" is not an ARPABET phoneme")]
    BadPhoneme { symbol: String },
    #[error("TextGrid is missing interval tier \"{tier}\"")]
    MissingTier { tier: String },
    #[error("TextGrid line {line}: cannot parse number from \"{text}\"")]
    BadNumber { line: usize, text: String },
    #[error("TextGrid line {line}: {detail}")]
    BadTextGrid { line: usize, detail: String },
    #[error("intervals not contiguous: entry {index} ends at {end} but the next starts at {next_start}")]
    NonContiguous {
        index: usize,
        end: f64,
        next_start: f64,
    },
    #[error("phoneme entry {index} (\"{symbol}\") is neither silence nor inside a word span")]
    UncoveredPhoneme { index: usize, symbol: String },
    #[error("word \"{word}\" does not occur in the alignment")]
    WordNotFound { word: String },
    #[error("entry range {first}..={last} is not a valid span (sequence has {len} entries)")]
    SpanOutOfRange { first: usize, last: usize, len: usize },
    #[error("utterance of {seconds} s is shorter than one frame at {FRAME_RATE} fps")]
    UtteranceTooShort { seconds: f64 },
    #[error("durations length {durations} does not match phoneme row count {rows}")]
    DurationCountMismatch { durations: usize, rows: usize },
    #[error("duration at index {index} is zero; every phoneme needs at least one frame")]
    ZeroDuration { index: usize },
}

/// The closed CMU/ARPABET phone inventory. Vowels carry a stress digit
/// 0, 1, or 2; consonants never do.
const ARPABET_VOWELS: &[&str] = &[
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];
const ARPABET_CONSONANTS: &[&str] = &[
    "B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N", "NG", "P", "R", "S", "SH",
    "T", "TH", "V", "W", "Y", "Z", "ZH",
];

/// The silence token used for pauses and muted spans.
pub const SILENCE: &str = "sil";

/// One ARPABET symbol (e.g. `K`, `AE1`) or the silence token `sil`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Phoneme {
    symbol: String,
}

impl Phoneme {
    pub fn new(symbol: &str) -> Result<Self, TextError> {
        if symbol == SILENCE {
            return Ok(Self {
                symbol: symbol.to_string(),
            });
        }
        let (base, stress) = match symbol.char_indices().last() {
            Some((i, c)) if c.is_ascii_digit() => (&symbol[..i], true),
            _ => (symbol, false),
        };
        let ok = if stress {
            ARPABET_VOWELS.contains(&base)
                && matches!(symbol.chars().last(), Some('0' | '1' | '2'))
        } else {
            ARPABET_CONSONANTS.contains(&base)
        };
        if !ok {
            return Err(TextError::BadPhoneme {
                symbol: symbol.to_string(),
            });
        }
        Ok(Self {
            symbol: symbol.to_string(),
        })
    }

    pub fn silence() -> Self {
        Self {
            symbol: SILENCE.to_string(),
        }
    }

    pub fn symbol(&self) -> &str {
        &self.symbol
    }

    pub fn is_silence(&self) -> bool {
        self.symbol == SILENCE
    }
}

impl fmt::Display for Phoneme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.symbol)
    }
}

/// Every symbol the model can see, in a fixed order: silence first, then
/// all consonants, then every vowel with each stress digit. Embedding ids
/// index into this list.
pub fn phoneme_inventory() -> Vec<String> {
    let mut inv = vec![SILENCE.to_string()];
    inv.extend(ARPABET_CONSONANTS.iter().map(|s| s.to_string()));
    for v in ARPABET_VOWELS {
        for d in 0..3 {
            inv.push(format!("{v}{d}"));
        }
    }
    inv
}

/// Index of a phoneme in [`phoneme_inventory`].
pub fn phoneme_id(p: &Phoneme) -> usize {
    // The inventory is small and fixed; a linear scan keeps this free of
    // global state.
    phoneme_inventory()
        .iter()
        .position(|s| s == p.symbol())
        .expect("validated phoneme is always in the inventory")
}

/// Lowercase, strip punctuation (word-internal apostrophes survive), and
/// split on whitespace. Tokens containing digits are rejected rather than
/// expanded.
pub fn normalize_text(raw: &str) -> Result<Vec<String>, TextError> {
    let mut words = Vec::new();
    for token in raw.split_whitespace() {
        if token.chars().any(|c| c.is_ascii_digit()) {
            return Err(TextError::UnsupportedToken {
                token: token.to_string(),
            });
        }
        let cleaned: String = token
            .to_lowercase()
            .chars()
            .filter(|c| c.is_alphabetic() || *c == '\'')
            .collect();
        let cleaned = cleaned.trim_matches('\'');
        if !cleaned.is_empty() {
            words.push(cleaned.to_string());
        }
    }
    Ok(words)
}

/// Word-to-pronunciation table in CMU dictionary format: one entry per
/// line, headword, TAB, space-separated ARPABET symbols. Lines starting
/// with `;;;` are comments. Only the first variant of a word is kept.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: HashMap<String, Vec<Phoneme>>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self, TextError> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let (word, phones) = line.split_once('\t').ok_or(TextError::LexiconParse {
                line: line_no,
                detail: "expected word TAB phonemes".to_string(),
            })?;
            // Variant headwords like "word(2)" mark alternates; the first
            // plain entry wins and alternates are ignored.
            let word = word.trim().to_lowercase();
            if word.is_empty() {
                return Err(TextError::LexiconParse {
                    line: line_no,
                    detail: "empty headword".to_string(),
                });
            }
            let base = match word.split_once('(') {
                Some((b, _)) => b.to_string(),
                None => word,
            };
            if entries.contains_key(&base) {
                continue;
            }
            let mut seq = Vec::new();
            for sym in phones.split_whitespace() {
                seq.push(Phoneme::new(sym).map_err(|e| TextError::LexiconParse {
                    line: line_no,
                    detail: e.to_string(),
                })?);
            }
            if seq.is_empty() {
                return Err(TextError::LexiconParse {
                    line: line_no,
                    detail: "no phonemes after the headword".to_string(),
                });
            }
            entries.insert(base, seq);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// The lexicon compiled into the binary; covers the bundled corpus
    /// vocabulary.
    pub fn bundled() -> Self {
        Self::parse(include_str!("../../assets/lexicon.txt"))
            .expect("bundled lexicon must parse")
    }

    pub fn lookup(&self, word: &str) -> Result<&[Phoneme], TextError> {
        self.entries
            .get(&word.to_lowercase())
            .map(Vec::as_slice)
            .ok_or_else(|| TextError::OutOfVocabulary {
                word: word.to_string(),
            })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// One aligned phoneme interval, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPhoneme {
    pub phoneme: Phoneme,
    pub start: f64,
    pub end: f64,
}

impl AlignedPhoneme {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// A word's extent as an inclusive range of entry indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    pub first: usize,
    pub last: usize,
}

/// Forced-alignment output: contiguous, non-overlapping phoneme entries
/// plus the word spans that cover every non-silence entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPhonemeSeq {
    pub entries: Vec<AlignedPhoneme>,
    pub word_spans: Vec<WordSpan>,
}

impl AlignedPhonemeSeq {
    /// Validate contiguity and word-span coverage, returning the sequence
    /// itself so construction sites can chain it.
    pub fn validated(self) -> Result<Self, TextError> {
        for i in 0..self.entries.len().saturating_sub(1) {
            let (end, next_start) = (self.entries[i].end, self.entries[i + 1].start);
            if end != next_start {
                return Err(TextError::NonContiguous {
                    index: i,
                    end,
                    next_start,
                });
            }
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.phoneme.is_silence() {
                continue;
            }
            let covering = self
                .word_spans
                .iter()
                .filter(|s| s.first <= i && i <= s.last)
                .count();
            if covering != 1 {
                return Err(TextError::UncoveredPhoneme {
                    index: i,
                    symbol: e.phoneme.symbol().to_string(),
                });
            }
        }
        for span in &self.word_spans {
            if span.last >= self.entries.len() || span.first > span.last {
                return Err(TextError::SpanOutOfRange {
                    first: span.first,
                    last: span.last,
                    len: self.entries.len(),
                });
            }
        }
        Ok(self)
    }

    pub fn start(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.start)
    }

    pub fn end(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.end)
    }

    pub fn total_seconds(&self) -> f64 {
        self.end() - self.start()
    }

    /// First span carrying `word` (case-insensitive), if any.
    pub fn find_word(&self, word: &str) -> Option<&WordSpan> {
        let w = word.to_lowercase();
        self.word_spans.iter().find(|s| s.word == w)
    }

    /// The spoken words in order.
    pub fn words(&self) -> Vec<&str> {
        self.word_spans.iter().map(|s| s.word.as_str()).collect()
    }
}
