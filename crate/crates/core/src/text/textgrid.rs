//! Praat long-format TextGrid parsing and serialization.
//!
//! Only interval tiers named `phones` and `words` are consumed; other
//! tiers are ignored. Empty phone labels become the silence token.
//! Serialization uses the shortest round-tripping float representation,
//! so parse(serialize(seq)) reproduces every boundary exactly.

use std::fs;
use std::path::Path;

use super::{AlignedPhoneme, AlignedPhonemeSeq, Phoneme, TextError, WordSpan};

#[derive(Debug, Clone)]
struct RawInterval {
    xmin: f64,
    xmax: f64,
    text: String,
}

/// Labels the aligner uses for non-speech stretches.
fn is_silence_label(label: &str) -> bool {
    matches!(label, "" | "sil" | "sp" | "spn")
}

pub fn parse_textgrid(path: &Path) -> Result<AlignedPhonemeSeq, TextError> {
    let text = fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_textgrid_str(&text)
}

pub fn parse_textgrid_str(text: &str) -> Result<AlignedPhonemeSeq, TextError> {
    let mut tiers: Vec<(String, Vec<RawInterval>)> = Vec::new();
    let mut in_interval = false;
    let mut cur: Option<RawInterval> = None;

    let parse_num = |line_no: usize, rhs: &str| -> Result<f64, TextError> {
        rhs.trim().parse::<f64>().map_err(|_| TextError::BadNumber {
            line: line_no,
            text: rhs.trim().to_string(),
        })
    };
    let quoted = |rhs: &str| -> String {
        rhs.trim().trim_matches('"').to_string()
    };

    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.trim();
        if let Some(rhs) = line.strip_prefix("name =") {
            tiers.push((quoted(rhs), Vec::new()));
            in_interval = false;
        } else if line.starts_with("intervals [") {
            if let Some(interval) = cur.take() {
                push_interval(&mut tiers, interval, line_no)?;
            }
            if tiers.is_empty() {
                return Err(TextError::BadTextGrid {
                    line: line_no,
                    detail: "interval before any tier name".to_string(),
                });
            }
            in_interval = true;
            cur = Some(RawInterval {
                xmin: f64::NAN,
                xmax: f64::NAN,
                text: String::new(),
            });
        } else if let Some(rhs) = line.strip_prefix("xmin =") {
            if in_interval {
                let v = parse_num(line_no, rhs)?;
                cur.as_mut().expect("in_interval implies cur").xmin = v;
            }
        } else if let Some(rhs) = line.strip_prefix("xmax =") {
            if in_interval {
                let v = parse_num(line_no, rhs)?;
                cur.as_mut().expect("in_interval implies cur").xmax = v;
            }
        } else if let Some(rhs) = line.strip_prefix("text =") {
            if in_interval {
                cur.as_mut().expect("in_interval implies cur").text = quoted(rhs);
                let interval = cur.take().expect("just set");
                push_interval(&mut tiers, interval, line_no)?;
                in_interval = false;
            }
        }
    }
    if let Some(interval) = cur.take() {
        push_interval(&mut tiers, interval, text.lines().count())?;
    }

    let phones = tiers
        .iter()
        .find(|(name, _)| name == "phones")
        .map(|(_, ivs)| ivs)
        .ok_or_else(|| TextError::MissingTier {
            tier: "phones".to_string(),
        })?;
    let words = tiers
        .iter()
        .find(|(name, _)| name == "words")
        .map(|(_, ivs)| ivs)
        .ok_or_else(|| TextError::MissingTier {
            tier: "words".to_string(),
        })?;

    let mut entries = Vec::with_capacity(phones.len());
    for iv in phones {
        let phoneme = if is_silence_label(&iv.text) {
            Phoneme::silence()
        } else {
            Phoneme::new(&iv.text)?
        };
        entries.push(AlignedPhoneme {
            phoneme,
            start: iv.xmin,
            end: iv.xmax,
        });
    }
    for i in 0..entries.len().saturating_sub(1) {
        if entries[i].end != entries[i + 1].start {
            return Err(TextError::NonContiguous {
                index: i,
                end: entries[i].end,
                next_start: entries[i + 1].start,
            });
        }
    }

    let mut word_spans = Vec::new();
    for iv in words {
        if is_silence_label(&iv.text) {
            continue;
        }
        // Boundaries come from the same aligner run, so phone entries sit
        // exactly inside their word interval; a whisker of tolerance
        // guards against shortest-repr differences from other writers.
        const EPS: f64 = 1e-9;
        let inside: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.start >= iv.xmin - EPS && e.end <= iv.xmax + EPS)
            .map(|(j, _)| j)
            .collect();
        if inside.is_empty() {
            return Err(TextError::BadTextGrid {
                line: 0,
                detail: format!("word \"{}\" covers no phone intervals", iv.text),
            });
        }
        word_spans.push(WordSpan {
            word: iv.text.to_lowercase(),
            first: inside[0],
            last: *inside.last().expect("non-empty"),
        });
    }

    AlignedPhonemeSeq {
        entries,
        word_spans,
    }
    .validated()
}

fn push_interval(
    tiers: &mut [(String, Vec<RawInterval>)],
    interval: RawInterval,
    line_no: usize,
) -> Result<(), TextError> {
    if interval.xmin.is_nan() || interval.xmax.is_nan() {
        return Err(TextError::BadTextGrid {
            line: line_no,
            detail: "interval is missing xmin or xmax".to_string(),
        });
    }
    tiers
        .last_mut()
        .expect("caller checks a tier exists")
        .1
        .push(interval);
    Ok(())
}

/// Render in Praat long format with `words` then `phones` tiers. Word
/// intervals are rebuilt from spans, with empty-label intervals filling
/// the silent stretches.
pub fn serialize_textgrid(seq: &AlignedPhonemeSeq) -> String {
    let xmin = seq.start();
    let xmax = seq.end();

    let mut word_intervals: Vec<RawInterval> = Vec::new();
    let mut cursor = xmin;
    for span in &seq.word_spans {
        let w_start = seq.entries[span.first].start;
        let w_end = seq.entries[span.last].end;
        if w_start > cursor {
            word_intervals.push(RawInterval {
                xmin: cursor,
                xmax: w_start,
                text: String::new(),
            });
        }
        word_intervals.push(RawInterval {
            xmin: w_start,
            xmax: w_end,
            text: span.word.clone(),
        });
        cursor = w_end;
    }
    if cursor < xmax || word_intervals.is_empty() {
        word_intervals.push(RawInterval {
            xmin: cursor,
            xmax,
            text: String::new(),
        });
    }

    let phone_intervals: Vec<RawInterval> = seq
        .entries
        .iter()
        .map(|e| RawInterval {
            xmin: e.start,
            xmax: e.end,
            text: if e.phoneme.is_silence() {
                String::new()
            } else {
                e.phoneme.symbol().to_string()
            },
        })
        .collect();

    let mut out = String::new();
    out.push_str("File type = \"ooTextFile\"\n");
    out.push_str("Object class = \"TextGrid\"\n\n");
    out.push_str(&format!("xmin = {xmin}\n"));
    out.push_str(&format!("xmax = {xmax}\n"));
    out.push_str("tiers? <exists>\n");
    out.push_str("size = 2\n");
    out.push_str("item []:\n");
    for (idx, (name, intervals)) in [("words", &word_intervals), ("phones", &phone_intervals)]
        .iter()
        .enumerate()
    {
        out.push_str(&format!("    item [{}]:\n", idx + 1));
        out.push_str("        class = \"IntervalTier\"\n");
        out.push_str(&format!("        name = \"{name}\"\n"));
        out.push_str(&format!("        xmin = {xmin}\n"));
        out.push_str(&format!("        xmax = {xmax}\n"));
        out.push_str(&format!("        intervals: size = {}\n", intervals.len()));
        for (k, iv) in intervals.iter().enumerate() {
            out.push_str(&format!("        intervals [{}]:\n", k + 1));
            out.push_str(&format!("            xmin = {}\n", iv.xmin));
            out.push_str(&format!("            xmax = {}\n", iv.xmax));
            out.push_str(&format!("            text = \"{}\"\n", iv.text));
        }
    }
    out
}
