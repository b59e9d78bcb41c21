//! Duration quantization, length regulation, and content edits.
//!
//! Quantization must preserve the total utterance length exactly: the
//! decoder is non-autoregressive and the supervision grid is fixed, so a
//! one-frame drift would shear every downstream comparison. Largest-
//! remainder rounding gives that guarantee; the tie-break and zero-raise
//! rules below make it deterministic.

use super::{AlignedPhoneme, AlignedPhonemeSeq, Lexicon, Phoneme, TextError, WordSpan};
use crate::tensor::Tensor;

/// Audio feature rate: one frame per 256 samples at 16 kHz.
pub const FRAME_RATE: f64 = 62.5;

/// Integer frame counts per phoneme, summing to
/// `round_half_even(total_seconds * rate)`.
///
/// Ideal counts are `duration * rate`; floors are topped up in order of
/// descending remainder (ties to the lowest index) until the total is
/// met; any zero count is then raised to 1 by stealing a frame from its
/// largest neighbor.
pub fn quantize_durations(seq: &AlignedPhonemeSeq, rate: f64) -> Result<Vec<usize>, TextError> {
    let n = seq.entries.len();
    if n == 0 {
        return Err(TextError::UtteranceTooShort { seconds: 0.0 });
    }
    let total_seconds = seq.total_seconds();
    let total_frames = (total_seconds * rate).round_ties_even() as i64;
    if total_frames < 1 {
        return Err(TextError::UtteranceTooShort {
            seconds: total_seconds,
        });
    }
    if (total_frames as usize) < n {
        // Not enough frames to give every phoneme one.
        return Err(TextError::UtteranceTooShort {
            seconds: total_seconds,
        });
    }

    let ideals: Vec<f64> = seq.entries.iter().map(|e| e.duration() * rate).collect();
    let mut counts: Vec<i64> = ideals.iter().map(|d| d.floor() as i64).collect();
    let floor_sum: i64 = counts.iter().sum();
    let deficit = total_frames - floor_sum;
    debug_assert!(deficit >= 0, "floor sum exceeds rounded total");

    let mut order: Vec<usize> = (0..n).collect();
    // Descending remainder, ties broken by the lower index.
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ideals[a] - ideals[a].floor(), ideals[b] - ideals[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(deficit as usize) {
        counts[i] += 1;
    }

    // Zero-raise: give starved phonemes one frame from the larger of
    // their neighbors (ties to the earlier neighbor).
    loop {
        let Some(zero_at) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let left = zero_at.checked_sub(1).map(|i| (i, counts[i]));
        let right = (zero_at + 1 < n).then(|| (zero_at + 1, counts[zero_at + 1]));
        let donor = match (left, right) {
            (Some((li, lc)), Some((ri, rc))) => {
                if rc > lc {
                    ri
                } else {
                    li
                }
            }
            (Some((li, _)), None) => li,
            (None, Some((ri, _))) => ri,
            (None, None) => unreachable!("n >= total_frames >= 1 and counts[0] == 0 means n > 1"),
        };
        if counts[donor] < 2 {
            return Err(TextError::UtteranceTooShort {
                seconds: total_seconds,
            });
        }
        counts[donor] -= 1;
        counts[zero_at] += 1;
    }

    debug_assert_eq!(counts.iter().sum::<i64>(), total_frames);
    Ok(counts.into_iter().map(|c| c as usize).collect())
}

/// Frame-to-phoneme index map: phoneme `i` contributes `durations[i]`
/// copies of `i`. This is the gather that implements length regulation,
/// shared by the value-level helper below and the tape path in the model.
pub fn regulation_indices(durations: &[usize]) -> Result<Vec<usize>, TextError> {
    let mut out = Vec::with_capacity(durations.iter().sum());
    for (i, &d) in durations.iter().enumerate() {
        if d == 0 {
            return Err(TextError::ZeroDuration { index: i });
        }
        out.extend(std::iter::repeat(i).take(d));
    }
    Ok(out)
}

/// Repeat row `i` of a P x D matrix `durations[i]` times; output is
/// sum(durations) x D.
pub fn length_regulate(embeddings: &Tensor, durations: &[usize]) -> Result<Tensor, TextError> {
    if durations.len() != embeddings.rows() {
        return Err(TextError::DurationCountMismatch {
            durations: durations.len(),
            rows: embeddings.rows(),
        });
    }
    let indices = regulation_indices(durations)?;
    let d = embeddings.cols();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in &indices {
        data.extend_from_slice(embeddings.row(i));
    }
    Ok(Tensor::new(vec![indices.len(), d], data).unwrap())
}

/// Replace one aligned word with another from the lexicon. The old span's
/// total duration is redistributed uniformly over the new phonemes at
/// millisecond resolution (largest remainder, lowest-index ties); the
/// final boundary is pinned to the old span's end, so the utterance
/// length is unchanged to the bit.
pub fn edit_replace(
    seq: &AlignedPhonemeSeq,
    word: &str,
    new_word: &str,
    lexicon: &Lexicon,
) -> Result<AlignedPhonemeSeq, TextError> {
    let span = seq
        .find_word(word)
        .cloned()
        .ok_or_else(|| TextError::WordNotFound {
            word: word.to_string(),
        })?;
    let new_phones: Vec<Phoneme> = lexicon.lookup(new_word)?.to_vec();

    let span_start = seq.entries[span.first].start;
    let span_end = seq.entries[span.last].end;
    let boundaries = uniform_boundaries(span_start, span_end, new_phones.len());

    let mut entries: Vec<AlignedPhoneme> = seq.entries[..span.first].to_vec();
    for (i, p) in new_phones.iter().enumerate() {
        entries.push(AlignedPhoneme {
            phoneme: p.clone(),
            start: boundaries[i],
            end: boundaries[i + 1],
        });
    }
    entries.extend_from_slice(&seq.entries[span.last + 1..]);

    let old_len = span.last - span.first + 1;
    let shift = new_phones.len() as isize - old_len as isize;
    let mut word_spans = Vec::with_capacity(seq.word_spans.len());
    for s in &seq.word_spans {
        if s.first == span.first && s.last == span.last && s.word == span.word {
            word_spans.push(WordSpan {
                word: new_word.to_lowercase(),
                first: span.first,
                last: span.first + new_phones.len() - 1,
            });
        } else if s.first > span.last {
            word_spans.push(WordSpan {
                word: s.word.clone(),
                first: (s.first as isize + shift) as usize,
                last: (s.last as isize + shift) as usize,
            });
        } else {
            word_spans.push(s.clone());
        }
    }

    AlignedPhonemeSeq {
        entries,
        word_spans,
    }
    .validated()
}

/// Split [start, end] into `n` pieces, uniform at 1 ms resolution. The
/// first and last boundaries are exactly `start` and `end`.
fn uniform_boundaries(start: f64, end: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1);
    let total_ms = ((end - start) * 1000.0).round() as i64;
    let base = total_ms / n as i64;
    let rem = (total_ms % n as i64) as usize;
    // All remainders equal under a uniform split, so "largest remainder,
    // lowest index" degenerates to: the first `rem` pieces get the extra
    // millisecond.
    let mut boundaries = Vec::with_capacity(n + 1);
    boundaries.push(start);
    let mut acc_ms = 0i64;
    for i in 0..n {
        acc_ms += base + if i < rem { 1 } else { 0 };
        boundaries.push(start + acc_ms as f64 / 1000.0);
    }
    boundaries[n] = end;
    boundaries
}

/// Mute a word: its entries collapse to a single silence entry of equal
/// total duration.
pub fn edit_mute(seq: &AlignedPhonemeSeq, word: &str) -> Result<AlignedPhonemeSeq, TextError> {
    let span = seq
        .find_word(word)
        .cloned()
        .ok_or_else(|| TextError::WordNotFound {
            word: word.to_string(),
        })?;
    edit_mute_entries(seq, span.first, span.last)
}

/// Mute an inclusive entry range. Muting a range that is already a single
/// silence entry is the identity.
pub fn edit_mute_entries(
    seq: &AlignedPhonemeSeq,
    first: usize,
    last: usize,
) -> Result<AlignedPhonemeSeq, TextError> {
    if last >= seq.entries.len() || first > last {
        return Err(TextError::SpanOutOfRange {
            first,
            last,
            len: seq.entries.len(),
        });
    }
    let start = seq.entries[first].start;
    let end = seq.entries[last].end;

    let mut entries: Vec<AlignedPhoneme> = seq.entries[..first].to_vec();
    entries.push(AlignedPhoneme {
        phoneme: Phoneme::silence(),
        start,
        end,
    });
    entries.extend_from_slice(&seq.entries[last + 1..]);

    let removed = last - first + 1;
    let shift = 1isize - removed as isize;
    let mut word_spans = Vec::new();
    for s in &seq.word_spans {
        if s.first >= first && s.last <= last {
            continue; // the muted word itself
        }
        if s.first > last {
            word_spans.push(WordSpan {
                word: s.word.clone(),
                first: (s.first as isize + shift) as usize,
                last: (s.last as isize + shift) as usize,
            });
        } else {
            word_spans.push(s.clone());
        }
    }

    AlignedPhonemeSeq {
        entries,
        word_spans,
    }
    .validated()
}
