//! Forward passes for every submodule. Each method appends onto a
//! caller-owned tape; nothing here mutates the model.

use rand::Rng;

use crate::tensor::{Tape, Tensor, TensorId};

use super::{Bound, Model, ModelError, GROUP_DECODER, GROUP_F_S1, GROUP_F_S2, GROUP_PHONEME_ENCODER, GROUP_STYLE_ENCODER};

/// Sinusoidal positional encoding, Vaswani form: even columns sine, odd
/// columns cosine, wavelengths geometric in 10000^(2i/d).
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = 2 * (i / 2);
            let rate = 10000f64.powf(exponent as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).unwrap()
}

/// Input to the style encoder: either a pretrained embedding pair loaded
/// from a tensor file (shape [2, F, C]), or log-Mel frames for the
/// trainable desk-scale stub to featurize.
#[derive(Debug, Clone)]
pub enum StyleInput {
    Features(Tensor),
    Mel(Tensor),
}

/// Stage-II head output: the vertex offsets and the 100-dim bottleneck
/// activation they are a linear function of.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Output {
    pub vertices: TensorId,
    pub hidden: TensorId,
}

impl Model {
    fn linear(&self, tape: &mut Tape, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let t = tape.value(x).rows();
        let xw = tape.matmul(x, w);
        let be = tape.expand_rows(b, t);
        tape.add(xw, be)
    }

    fn self_attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        x: TensorId,
    ) -> TensorId {
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dh = d / heads;
        let q = self.linear(tape, x, bound.id(&format!("{prefix}.attn.wq")), bound.id(&format!("{prefix}.attn.bq")));
        let k = self.linear(tape, x, bound.id(&format!("{prefix}.attn.wk")), bound.id(&format!("{prefix}.attn.bk")));
        let v = self.linear(tape, x, bound.id(&format!("{prefix}.attn.wv")), bound.id(&format!("{prefix}.attn.bv")));
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scaled);
            contexts.push(tape.matmul(attn, vh));
        }
        let ctx = tape.concat_cols(&contexts);
        self.linear(tape, ctx, bound.id(&format!("{prefix}.attn.wo")), bound.id(&format!("{prefix}.attn.bo")))
    }

    /// One FFT block: post-LN self-attention sublayer, then the 9/1 conv
    /// sublayer, dropout after each sublayer in training mode.
    pub fn fft_block<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        x: TensorId,
        rng: &mut R,
    ) -> TensorId {
        let p = self.config.dropout;
        let attn = self.self_attention(tape, bound, prefix, x);
        let attn = tape.dropout(attn, p, rng);
        let sum1 = tape.add(x, attn);
        let x = tape.layer_norm(
            sum1,
            bound.id(&format!("{prefix}.ln1.gain")),
            bound.id(&format!("{prefix}.ln1.bias")),
        );
        let c1 = tape.conv1d(
            x,
            bound.id(&format!("{prefix}.conv1.w")),
            bound.id(&format!("{prefix}.conv1.b")),
        );
        let c1 = tape.relu(c1);
        let c2 = tape.conv1d(
            c1,
            bound.id(&format!("{prefix}.conv2.w")),
            bound.id(&format!("{prefix}.conv2.b")),
        );
        let c2 = tape.dropout(c2, p, rng);
        let sum2 = tape.add(x, c2);
        tape.layer_norm(
            sum2,
            bound.id(&format!("{prefix}.ln2.gain")),
            bound.id(&format!("{prefix}.ln2.bias")),
        )
    }

    /// Embedding lookup + positional encoding + the encoder stack.
    pub fn encode_phonemes<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[usize],
        rng: &mut R,
    ) -> Result<TensorId, ModelError> {
        for &id in ids {
            if id >= self.config.phoneme_vocab {
                return Err(ModelError::IdOutOfRange {
                    id,
                    vocab: self.config.phoneme_vocab,
                });
            }
        }
        let embed = bound.id(&format!("{GROUP_PHONEME_ENCODER}.embed"));
        let mut x = tape.embedding(embed, ids);
        let pe = tape.constant(positional_encoding(ids.len(), self.config.hidden));
        x = tape.add(x, pe);
        for i in 0..self.config.encoder_blocks {
            x = self.fft_block(tape, bound, &format!("{GROUP_PHONEME_ENCODER}.block{i}"), x, rng);
        }
        Ok(x)
    }

    /// Produce the two feature streams, F x C each. File features are
    /// constants; the Mel stub is trainable.
    fn style_streams<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &StyleInput,
        _rng: &mut R,
    ) -> Result<[TensorId; 2], ModelError> {
        let c = self.config.style_channels;
        match input {
            StyleInput::Features(t) => {
                let shape = t.shape().to_vec();
                if shape.len() != 3 || shape[0] != 2 {
                    return Err(ModelError::StyleFeatureShape { shape });
                }
                if shape[2] != c {
                    return Err(ModelError::StyleChannelMismatch {
                        found: shape[2],
                        expected: c,
                    });
                }
                let f = shape[1];
                if f < 2 {
                    return Err(ModelError::StyleTooShort { frames: f });
                }
                let per = f * c;
                let a = Tensor::new(vec![f, c], t.data()[..per].to_vec()).unwrap();
                let b = Tensor::new(vec![f, c], t.data()[per..].to_vec()).unwrap();
                Ok([tape.constant(a), tape.constant(b)])
            }
            StyleInput::Mel(mel) => {
                if mel.rows() < 2 {
                    return Err(ModelError::StyleTooShort { frames: mel.rows() });
                }
                assert_eq!(
                    mel.cols(),
                    crate::audio::N_MELS,
                    "style stub expects {} Mel bands, got {:?}",
                    crate::audio::N_MELS,
                    mel.shape()
                );
                let mel_id = tape.constant(mel.clone());
                let mut streams = [mel_id; 2];
                for (s, slot) in streams.iter_mut().enumerate() {
                    let h = tape.conv1d(
                        mel_id,
                        bound.id(&format!("{GROUP_STYLE_ENCODER}.stub{s}.conv1.w")),
                        bound.id(&format!("{GROUP_STYLE_ENCODER}.stub{s}.conv1.b")),
                    );
                    let h = tape.relu(h);
                    *slot = tape.conv1d(
                        h,
                        bound.id(&format!("{GROUP_STYLE_ENCODER}.stub{s}.conv2.w")),
                        bound.id(&format!("{GROUP_STYLE_ENCODER}.stub{s}.conv2.b")),
                    );
                }
                Ok(streams)
            }
        }
    }

    /// Style vector from a feature-stream pair: channel-interleaved
    /// concat, MaxPool1d(k=2, s=2) across the interleaved channel axis
    /// (elementwise max of the two streams), temporal mean-pool, then
    /// the two head layers. The channel reading of the pool is what makes
    /// the head invariant to frame duplication, which is the property
    /// that matters for a style (not content) pathway.
    pub fn style_encode<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &StyleInput,
        rng: &mut R,
    ) -> Result<TensorId, ModelError> {
        let c = self.config.style_channels;
        let [a, b] = self.style_streams(tape, bound, input, rng)?;
        let cat = tape.concat_cols(&[a, b]);
        let interleave: Vec<usize> = (0..c).flat_map(|i| [i, c + i]).collect();
        let paired = tape.gather_cols(cat, &interleave);
        let tr = tape.transpose(paired); // 2C x F
        let pooled_tr = tape.max_pool_rows2(tr); // C x F
        let pooled = tape.transpose(pooled_tr); // F x C
        let mean = tape.mean_rows(pooled); // 1 x C
        let h = self.linear(
            tape,
            mean,
            bound.id(&format!("{GROUP_STYLE_ENCODER}.head.lin1.w")),
            bound.id(&format!("{GROUP_STYLE_ENCODER}.head.lin1.b")),
        );
        let h = tape.relu(h);
        let h = tape.dropout(h, self.config.dropout, rng);
        let s = self.linear(
            tape,
            h,
            bound.id(&format!("{GROUP_STYLE_ENCODER}.head.lin2.w")),
            bound.id(&format!("{GROUP_STYLE_ENCODER}.head.lin2.b")),
        );
        Ok(tape.tanh(s))
    }

    /// Length-regulate the content and add the style vector to every
    /// frame. The gather indices give the adaptor its backward pass for
    /// free; there are no parameters here.
    pub fn variance_adapt(
        &self,
        tape: &mut Tape,
        content: TensorId,
        durations: &[usize],
        style: TensorId,
    ) -> Result<TensorId, ModelError> {
        let rows = tape.value(content).rows();
        if durations.len() != rows {
            return Err(ModelError::DurationCount {
                durations: durations.len(),
                rows,
            });
        }
        let mut indices = Vec::with_capacity(durations.iter().sum());
        for (i, &d) in durations.iter().enumerate() {
            if d == 0 {
                return Err(ModelError::DurationCount {
                    durations: durations.len(),
                    rows,
                });
            }
            indices.extend(std::iter::repeat(i).take(d));
        }
        let regulated = tape.embedding(content, &indices);
        let style_rows = tape.expand_rows(style, indices.len());
        Ok(tape.add(regulated, style_rows))
    }

    /// Decoder stack plus the Stage-I Mel head.
    pub fn decode_stage1<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        adapted: TensorId,
        rng: &mut R,
    ) -> TensorId {
        let mut x = adapted;
        for i in 0..self.config.decoder_blocks {
            x = self.fft_block(tape, bound, &format!("{GROUP_DECODER}.block{i}"), x, rng);
        }
        self.linear(
            tape,
            x,
            bound.id(&format!("{GROUP_F_S1}.w")),
            bound.id(&format!("{GROUP_F_S1}.b")),
        )
    }

    /// Decoder stack plus the Stage-II vertex head. The bottleneck
    /// activation is part of the output because the Laplacian-mod loss
    /// verification needs it.
    pub fn decode_stage2<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        adapted: TensorId,
        rng: &mut R,
    ) -> Stage2Output {
        let mut x = adapted;
        for i in 0..self.config.decoder_blocks {
            x = self.fft_block(tape, bound, &format!("{GROUP_DECODER}.block{i}"), x, rng);
        }
        let pre = self.linear(
            tape,
            x,
            bound.id(&format!("{GROUP_F_S2}.lin1.w")),
            bound.id(&format!("{GROUP_F_S2}.lin1.b")),
        );
        let hidden = tape.tanh(pre);
        let vertices = self.linear(
            tape,
            hidden,
            bound.id(&format!("{GROUP_F_S2}.lin2.w")),
            bound.id(&format!("{GROUP_F_S2}.lin2.b")),
        );
        Stage2Output { vertices, hidden }
    }

    /// The final-layer matrix the Laplacian-mod loss regularizes:
    /// columns are the 100 vertex-offset basis fields plus the bias as a
    /// 101st column; shape 3Nv x (f_s2_hidden + 1).
    pub fn lap_matrix(&self, tape: &mut Tape, bound: &Bound) -> TensorId {
        let wt = tape.transpose(bound.id(&format!("{GROUP_F_S2}.lin2.w")));
        let bt = tape.transpose(bound.id(&format!("{GROUP_F_S2}.lin2.b")));
        tape.concat_cols(&[wt, bt])
    }
}
