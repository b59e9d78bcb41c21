//! Audio loading and Mel-spectrum extraction.
//!
//! The front end is deliberately rigid: mono PCM-16 WAV at 16 kHz in,
//! peak-normalized samples, then a 1024-point STFT (periodic Hann, hop
//! 256, reflect padding) and an 80-band HTK-scale log-Mel spectrogram at
//! 62.5 frames per second. Everything here is a pure function of its
//! input, so all of it may run concurrently.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FFT_SIZE: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 80;
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
pub const MEL_FMAX: f64 = 8_000.0;
/// Power floor applied before the log, so silence maps to `ln(1e-10)`.
pub const POWER_FLOOR: f64 = 1e-10;
/// Seconds covered by one Mel frame: 256 / 16000.
pub const HOP_SECONDS: f64 = HOP as f64 / SAMPLE_RATE as f64;
/// Mel frames per second (62.5).
pub const FRAME_RATE: f64 = SAMPLE_RATE as f64 / HOP as f64;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed WAV header ({detail})")]
    MalformedHeader { path: String, detail: String },
    #[error("{path}: unsupported encoding (format tag {format}, {bits} bits); only PCM-16 is accepted")]
    UnsupportedEncoding { path: String, format: u16, bits: u16 },
    #[error("{path}: {found} channels; only mono input is accepted")]
    ChannelCount { path: String, found: u16 },
    #[error("{path}: sample rate {found} Hz; expected {SAMPLE_RATE} Hz")]
    SampleRate { path: String, found: u32 },
}

/// Mono 16 kHz audio, peak-normalized to magnitude 1.0 (all-zero input is
/// left untouched).
#[derive(Debug, Clone)]
pub struct AudioSignal {
    samples: Vec<f64>,
}

impl AudioSignal {
    /// Normalize and wrap raw samples. The peak is scaled to exactly 1.0,
    /// which makes the front end invariant to recording gain.
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        if peak > 0.0 {
            for s in &mut samples {
                *s /= peak;
            }
        }
        Self { samples }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// Log-Mel energies, one row per frame, 80 columns.
#[derive(Debug, Clone)]
pub struct MelFrames {
    values: Tensor,
}

impl MelFrames {
    pub fn new(values: Tensor) -> Self {
        assert_eq!(
            values.cols(),
            N_MELS,
            "MelFrames must have {N_MELS} columns, got shape {:?}",
            values.shape()
        );
        Self { values }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn hop_seconds(&self) -> f64 {
        HOP_SECONDS
    }

    /// One row of comma-separated values per frame, for eyeballing in a
    /// spreadsheet.
    pub fn export_csv(&self, path: &Path) -> Result<(), AudioError> {
        let mut out = String::new();
        for t in 0..self.values.rows() {
            let row: Vec<String> = self
                .values
                .row(t)
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| AudioError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

// ---- WAV ------------------------------------------------------------------

/// Parse a mono PCM-16 16 kHz RIFF/WAVE file and peak-normalize it.
/// Chunks other than `fmt ` and `data` are skipped.
pub fn load_wav(path: &Path) -> Result<AudioSignal, AudioError> {
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let p = path.display().to_string();
    let malformed = |detail: &str| AudioError::MalformedHeader {
        path: p.clone(),
        detail: detail.to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE signature"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes([bytes[pos + 4], bytes[pos + 5], bytes[pos + 6], bytes[pos + 7]])
            as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(malformed("chunk size exceeds file length"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk shorter than 16 bytes"));
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunk bodies are padded to an even length.
        pos = body_start + size + (size % 2);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| malformed("no fmt chunk"))?;
    if format != 1 || bits != 16 {
        return Err(AudioError::UnsupportedEncoding {
            path: p,
            format,
            bits,
        });
    }
    if channels != 1 {
        return Err(AudioError::ChannelCount { path: p, found: channels });
    }
    if rate != SAMPLE_RATE {
        return Err(AudioError::SampleRate { path: p, found: rate });
    }
    let data = data.ok_or_else(|| malformed("no data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(malformed("data chunk length is odd"));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Ok(AudioSignal::from_samples(samples))
}

/// Write samples (clamped to [-1, 1]) as a canonical 44-byte-header mono
/// PCM-16 WAV. The inverse of `load_wav` up to quantization.
pub fn save_wav_pcm16(path: &Path, samples: &[f64]) -> Result<(), AudioError> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&out).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---- STFT -----------------------------------------------------------------

/// Periodic Hann window of length `FFT_SIZE`.
fn hann_periodic() -> Vec<f64> {
    (0..FFT_SIZE)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / FFT_SIZE as f64).cos()))
        .collect()
}

/// Reflect index `i` (which may be negative or past the end, encoded as an
/// offset into the padded signal) back into [0, n). Mirrors about the end
/// samples without repeating them, bouncing as often as needed.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Centered STFT: reflect-pad by `FFT_SIZE/2` on each side, slide a
/// periodic Hann window with hop 256. Frame count is `floor(N/256) + 1`;
/// bins 0..=512 are kept.
pub fn stft(signal: &AudioSignal) -> Vec<Vec<Complex<f64>>> {
    let x = signal.samples();
    let n = x.len();
    assert!(n >= 1, "stft: empty signal");
    let half = FFT_SIZE / 2;
    let window = hann_periodic();
    let num_frames = n / HOP + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut frames = Vec::with_capacity(num_frames);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    for t in 0..num_frames {
        for j in 0..FFT_SIZE {
            // Position in the original signal: padded index minus pad width.
            let src = (t * HOP + j) as isize - half as isize;
            let sample = if src >= 0 && (src as usize) < n {
                x[src as usize]
            } else {
                x[reflect_index(src, n)]
            };
            buf[j] = Complex::new(sample * window[j], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..N_BINS].to_vec());
    }
    frames
}

// ---- Mel ------------------------------------------------------------------

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// 80 triangular filters on the HTK mel scale spanning 0-8000 Hz, as an
/// 80 x 513 matrix. Peaks have unit amplitude; no area normalization.
pub fn mel_filterbank() -> Tensor {
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(MEL_FMAX);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut fb = vec![0.0; N_MELS * N_BINS];
    for m in 0..N_MELS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..N_BINS {
            let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
            if f <= lo || f >= hi {
                continue;
            }
            let w = if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[m * N_BINS + k] = w;
        }
    }
    Tensor::new(vec![N_MELS, N_BINS], fb).unwrap()
}

/// Full front end: power spectrum, filterbank, floored log.
pub fn mel_spectrogram(signal: &AudioSignal) -> MelFrames {
    let frames = stft(signal);
    let fb = mel_filterbank();
    let t_len = frames.len();
    let mut out = vec![0.0; t_len * N_MELS];
    let mut power = vec![0.0; N_BINS];
    for (t, frame) in frames.iter().enumerate() {
        for (k, c) in frame.iter().enumerate() {
            power[k] = c.norm_sqr();
        }
        for m in 0..N_MELS {
            let row = &fb.data()[m * N_BINS..(m + 1) * N_BINS];
            let mut acc = 0.0;
            for k in 0..N_BINS {
                acc += row[k] * power[k];
            }
            out[t * N_MELS + m] = acc.max(POWER_FLOOR).ln();
        }
    }
    MelFrames::new(Tensor::new(vec![t_len, N_MELS], out).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, seconds: f64, amp: f64) -> Vec<f64> {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect()
    }

    #[test]
    fn load_one_second_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        save_wav_pcm16(&path, &sine(440.0, 1.0, 0.8)).unwrap();
        let sig = load_wav(&path).unwrap();
        assert_eq!(sig.samples().len(), 16000);
        assert_eq!(sig.sample_rate(), 16000);
    }

    #[test]
    fn peak_is_normalized_to_one() {
        let sig = AudioSignal::from_samples(vec![0.0, 0.5, -0.25, 0.1]);
        let peak = sig.samples().iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        assert_eq!(peak, 1.0);
        assert_eq!(sig.samples()[1], 1.0); // 0.5 rescaled by 2.0
        assert_eq!(sig.samples()[2], -0.5);
    }

    #[test]
    fn all_zero_input_left_unscaled() {
        let sig = AudioSignal::from_samples(vec![0.0; 100]);
        assert!(sig.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_file_rejected_with_channel_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        // Hand-build a 2-channel header around a tiny payload.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, bytes).unwrap();
        match load_wav(&path) {
            Err(AudioError::ChannelCount { found, .. }) => assert_eq!(found, 2),
            other => panic!("expected ChannelCount, got {other:?}"),
        }
    }

    #[test]
    fn wrong_rate_rejected_with_rate_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rate.wav");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 2).to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&22050u32.to_le_bytes());
        bytes.extend_from_slice(&44100u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0]);
        std::fs::write(&path, bytes).unwrap();
        match load_wav(&path) {
            Err(AudioError::SampleRate { found, .. }) => assert_eq!(found, 22050),
            other => panic!("expected SampleRate, got {other:?}"),
        }
    }

    #[test]
    fn garbage_rejected_with_malformed_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav file at all").unwrap();
        match load_wav(&path) {
            Err(AudioError::MalformedHeader { .. }) => {}
            other => panic!("expected MalformedHeader, got {other:?}"),
        }
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.wav");
        let orig = sine(300.0, 0.1, 1.0);
        save_wav_pcm16(&path, &orig).unwrap();
        let sig = load_wav(&path).unwrap();
        assert_eq!(sig.samples().len(), orig.len());
        // Peak-normalization maps the quantized peak back near 1.0; the
        // worst-case error is one quantization step scaled by the gain.
        for (a, b) in sig.samples().iter().zip(&orig) {
            assert!((a - b).abs() < 2.0 / 32767.0, "{a} vs {b}");
        }
    }

    #[test]
    fn frame_count_formula() {
        let sig = AudioSignal::from_samples(sine(440.0, 1.0, 1.0));
        assert_eq!(sig.samples().len(), 16000);
        let frames = stft(&sig);
        assert_eq!(frames.len(), 63); // floor(16000/256) + 1
        assert_eq!(frames[0].len(), N_BINS);
    }

    #[test]
    fn sine_peaks_at_expected_bin_and_matches_dense_dft() {
        let sig = AudioSignal::from_samples(sine(440.0, 1.0, 1.0));
        let frames = stft(&sig);
        // 440 Hz lands at bin 440 * 1024 / 16000 = 28.16 -> argmax 28.
        for frame in frames.iter().skip(3).take(frames.len() - 6) {
            let argmax = frame
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 28);
        }

        // Dense DFT oracle on one interior frame: rebuild the windowed
        // samples and evaluate the definition directly.
        let t = 10;
        let window = hann_periodic();
        let x = sig.samples();
        let half = FFT_SIZE / 2;
        let windowed: Vec<f64> = (0..FFT_SIZE)
            .map(|j| {
                let src = (t * HOP + j) as isize - half as isize;
                let s = if src >= 0 && (src as usize) < x.len() {
                    x[src as usize]
                } else {
                    x[reflect_index(src, x.len())]
                };
                s * window[j]
            })
            .collect();
        for k in 0..N_BINS {
            let mut acc = Complex::new(0.0, 0.0);
            for (n, &v) in windowed.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * (k * n) as f64 / FFT_SIZE as f64;
                acc += Complex::new(phase.cos(), phase.sin()) * v;
            }
            assert!(
                (acc - frames[t][k]).norm() < 1e-6,
                "bin {k}: dense {acc} vs fft {}",
                frames[t][k]
            );
        }
    }

    #[test]
    fn zero_signal_gives_zero_magnitudes() {
        let sig = AudioSignal::from_samples(vec![0.0; 4096]);
        for frame in stft(&sig) {
            for c in frame {
                assert_eq!(c.norm(), 0.0);
            }
        }
    }

    #[test]
    fn filterbank_rows_positive_and_centers_increase() {
        let fb = mel_filterbank();
        assert_eq!(fb.shape(), &[N_MELS, N_BINS]);
        let mut prev_center = -1.0f64;
        for m in 0..N_MELS {
            let row = fb.row(m);
            assert!(row.iter().any(|&v| v > 0.0), "filter {m} is empty");
            assert!(row.iter().all(|&v| v >= 0.0));
            // Support must be one contiguous run of positive entries.
            let first = row.iter().position(|&v| v > 0.0).unwrap();
            let last = N_BINS - 1 - row.iter().rev().position(|&v| v > 0.0).unwrap();
            assert!(
                row[first..=last].iter().all(|&v| v > 0.0),
                "filter {m} support has holes"
            );
            let center = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as f64;
            assert!(center > prev_center, "centers not increasing at {m}");
            prev_center = center;
        }
    }

    #[test]
    fn filterbank_on_ones_equals_row_sums() {
        let fb = mel_filterbank();
        for m in 0..N_MELS {
            let sum: f64 = fb.row(m).iter().sum();
            assert!(sum > 0.0);
            // Applying to an all-ones power spectrum is exactly the row sum.
            let applied: f64 = fb.row(m).iter().map(|v| v * 1.0).sum();
            assert_eq!(applied, sum);
        }
    }

    #[test]
    fn silence_is_floored() {
        let sig = AudioSignal::from_samples(vec![0.0; 8000]);
        let mel = mel_spectrogram(&sig);
        let floor = POWER_FLOOR.ln();
        for v in mel.values().data() {
            assert_eq!(*v, floor);
        }
    }

    #[test]
    fn frame_counts_agree_between_stft_and_mel() {
        let sig = AudioSignal::from_samples(sine(200.0, 0.73, 1.0));
        assert_eq!(mel_spectrogram(&sig).num_frames(), stft(&sig).len());
    }

    #[test]
    fn white_noise_keeps_every_band_off_the_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise: Vec<f64> = (0..16000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mel = mel_spectrogram(&AudioSignal::from_samples(noise));
        let floor = POWER_FLOOR.ln();
        for v in mel.values().data() {
            assert!(*v > floor + 1.0, "band stuck at floor: {v}");
        }
    }

    #[test]
    fn hop_shift_moves_frames_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<f64> = (0..8000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut shifted = vec![0.0; HOP];
        shifted.extend_from_slice(&base);

        let mel_a = mel_spectrogram(&AudioSignal::from_samples(base));
        let mel_b = mel_spectrogram(&AudioSignal::from_samples(shifted));
        // Interior frames (analysis window fully inside the signal on both
        // sides) must line up exactly one index apart.
        for t in 3..mel_a.num_frames() - 3 {
            for m in 0..N_MELS {
                let a = mel_a.values().get2(t, m);
                let b = mel_b.values().get2(t + 1, m);
                assert!((a - b).abs() < 1e-9, "frame {t} band {m}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn amplitude_invariance_through_normalization() {
        let quiet = sine(440.0, 0.5, 0.1);
        let loud: Vec<f64> = quiet.iter().map(|s| s * 2.0).collect();
        let mel_q = mel_spectrogram(&AudioSignal::from_samples(quiet));
        let mel_l = mel_spectrogram(&AudioSignal::from_samples(loud));
        for (a, b) in mel_q.values().data().iter().zip(mel_l.values().data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mel_spectrogram_is_bit_deterministic() {
        let sig = AudioSignal::from_samples(sine(523.25, 0.4, 0.9));
        let a = mel_spectrogram(&sig);
        let b = mel_spectrogram(&sig);
        for (x, y) in a.values().data().iter().zip(b.values().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn csv_export_writes_one_row_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mel.csv");
        let sig = AudioSignal::from_samples(sine(440.0, 0.1, 1.0));
        let mel = mel_spectrogram(&sig);
        mel.export_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), mel.num_frames());
        assert_eq!(text.lines().next().unwrap().split(',').count(), N_MELS);
    }
}
