//! The shared non-autoregressive backbone: phoneme encoder, style
//! encoder, variance adaptor, decoder, and the two projection heads.
//!
//! One set of weights serves both stages. Stage I reads the backbone
//! through `F_s1` (hidden -> 80 Mel bands); Stage II swaps in `F_s2`
//! (hidden -> 100 -> tanh -> 3Nv) and fine-tunes with the phoneme
//! encoder frozen. Forward passes build onto a caller-supplied tape, so
//! the same code path serves training and inference.

mod backbone;
mod spline;

pub use backbone::{positional_encoding, Stage2Output, StyleInput};
pub use spline::{resample_matrix, resample_to_fps};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Mode, Tape, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("phoneme id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("style feature stream has {frames} frames; need at least 2")]
    StyleTooShort { frames: usize },
    #[error("style feature tensor must be [2, F, C], got shape {shape:?}")]
    StyleFeatureShape { shape: Vec<usize> },
    #[error("style feature channels {found} do not match the configured {expected}")]
    StyleChannelMismatch { found: usize, expected: usize },
    #[error("durations length {durations} does not match content rows {rows}")]
    DurationCount { durations: usize, rows: usize },
    #[error("resampling needs at least 4 source frames, got {found}")]
    TooFewFrames { found: usize },
    #[error("target fps {fps} is not 25 or 30")]
    BadTargetFps { fps: f64 },
    #[error("animation is at {fps} fps; resampling starts from the 62.5 fps feature rate")]
    NotFeatureRate { fps: f64 },
}

/// Architecture hyperparameters. Defaults are the full-size published
/// configuration; `desk()` shrinks everything that scales for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub heads: usize,
    pub filter: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub conv_kernels: [usize; 2],
    pub dropout: f64,
    pub phoneme_vocab: usize,
    /// Width of the style vector. Style is injected by adding it to every
    /// frame of the regulated content, so this must equal `hidden`.
    pub style_dim: usize,
    /// Channels per style feature stream (each of the two providers).
    pub style_channels: usize,
    /// Hidden width of the style head's first linear layer.
    pub style_hidden: usize,
    /// Width of the Stage-II bottleneck whose outgoing weight matrix the
    /// Laplacian-mod loss regularizes.
    pub f_s2_hidden: usize,
    pub vertex_count: usize,
}

impl BackboneConfig {
    pub fn full(phoneme_vocab: usize, vertex_count: usize) -> Self {
        Self {
            hidden: 256,
            heads: 2,
            filter: 1024,
            encoder_blocks: 4,
            decoder_blocks: 6,
            conv_kernels: [9, 1],
            dropout: 0.2,
            phoneme_vocab,
            style_dim: 256,
            style_channels: 64,
            style_hidden: 64,
            f_s2_hidden: 100,
            vertex_count,
        }
    }

    /// Small enough to train inside a test, same shape everywhere it
    /// matters (two conv kernels, head structure, both heads present).
    pub fn desk(phoneme_vocab: usize, vertex_count: usize) -> Self {
        Self {
            hidden: 48,
            heads: 2,
            filter: 96,
            encoder_blocks: 2,
            decoder_blocks: 2,
            conv_kernels: [9, 1],
            dropout: 0.2,
            phoneme_vocab,
            style_dim: 48,
            style_channels: 16,
            style_hidden: 24,
            f_s2_hidden: 100,
            vertex_count,
        }
    }

    pub fn validate(&self) {
        assert!(
            self.hidden % self.heads == 0,
            "hidden {} not divisible by heads {}",
            self.hidden,
            self.heads
        );
        assert!(
            self.style_dim == self.hidden,
            "style_dim {} must equal hidden {}: style is added onto every frame",
            self.style_dim,
            self.hidden
        );
        assert!(self.conv_kernels.iter().all(|k| k % 2 == 1));
        assert!((0.0..1.0).contains(&self.dropout));
    }

    pub fn coord_count(&self) -> usize {
        3 * self.vertex_count
    }
}

/// Parameter-group names; freeze flags attach at this granularity.
pub const GROUP_PHONEME_ENCODER: &str = "phoneme_encoder";
pub const GROUP_STYLE_ENCODER: &str = "style_encoder";
pub const GROUP_DECODER: &str = "decoder";
pub const GROUP_F_S1: &str = "f_s1";
pub const GROUP_F_S2: &str = "f_s2";

pub const ALL_GROUPS: [&str; 5] = [
    GROUP_PHONEME_ENCODER,
    GROUP_STYLE_ENCODER,
    GROUP_DECODER,
    GROUP_F_S1,
    GROUP_F_S2,
];

/// Named parameter tensors plus per-group freeze flags. Iteration order
/// is the BTreeMap's sorted order everywhere, which keeps every
/// parameter walk deterministic.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeMap<String, bool>,
}

impl ModelWeights {
    /// Deterministic initialization: uniform Xavier bounds for matrices
    /// and convolutions, zeros for biases, identity for layer norms.
    pub fn init(config: &BackboneConfig, seed: u64) -> Self {
        config.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();

        // Insertion happens in a fixed code order below, so the RNG draw
        // sequence is part of the format.
        let mut mat = |params: &mut BTreeMap<String, Tensor>,
                       rng: &mut ChaCha8Rng,
                       name: &str,
                       rows: usize,
                       cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(name.to_string(), Tensor::new(vec![rows, cols], data).unwrap());
        };
        let conv = |params: &mut BTreeMap<String, Tensor>,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    c_out: usize,
                    c_in: usize,
                    k: usize| {
            let bound = (6.0 / ((c_in + c_out) * k) as f64).sqrt();
            let data = (0..c_out * c_in * k).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(
                name.to_string(),
                Tensor::new(vec![c_out, c_in, k], data).unwrap(),
            );
        };
        let zeros_row = |params: &mut BTreeMap<String, Tensor>, name: &str, n: usize| {
            params.insert(name.to_string(), Tensor::zeros(&[1, n]));
        };
        let vec1 = |params: &mut BTreeMap<String, Tensor>, name: &str, n: usize, fill: f64| {
            params.insert(name.to_string(), Tensor::filled(&[n], fill));
        };

        let d = config.hidden;
        let embed_data: Vec<f64> = (0..config.phoneme_vocab * d)
            .map(|_| rng.gen_range(-0.1..0.1))
            .collect();
        params.insert(
            format!("{GROUP_PHONEME_ENCODER}.embed"),
            Tensor::new(vec![config.phoneme_vocab, d], embed_data).unwrap(),
        );

        let mut fft_block = |params: &mut BTreeMap<String, Tensor>,
                             rng: &mut ChaCha8Rng,
                             prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                mat(params, rng, &format!("{prefix}.attn.{w}"), d, d);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                zeros_row(params, &format!("{prefix}.attn.{b}"), d);
            }
            vec1(params, &format!("{prefix}.ln1.gain"), d, 1.0);
            vec1(params, &format!("{prefix}.ln1.bias"), d, 0.0);
            conv(params, rng, &format!("{prefix}.conv1.w"), config.filter, d, config.conv_kernels[0]);
            vec1(params, &format!("{prefix}.conv1.b"), config.filter, 0.0);
            conv(params, rng, &format!("{prefix}.conv2.w"), d, config.filter, config.conv_kernels[1]);
            vec1(params, &format!("{prefix}.conv2.b"), d, 0.0);
            vec1(params, &format!("{prefix}.ln2.gain"), d, 1.0);
            vec1(params, &format!("{prefix}.ln2.bias"), d, 0.0);
        };

        for i in 0..config.encoder_blocks {
            fft_block(&mut params, &mut rng, &format!("{GROUP_PHONEME_ENCODER}.block{i}"));
        }
        for i in 0..config.decoder_blocks {
            fft_block(&mut params, &mut rng, &format!("{GROUP_DECODER}.block{i}"));
        }

        // Style feature stub: two independent 2-layer conv extractors over
        // the 80-band Mel input, standing in for the frozen pretrained
        // embedding pair at desk scale.
        let c = config.style_channels;
        for s in 0..2 {
            conv(&mut params, &mut rng, &format!("{GROUP_STYLE_ENCODER}.stub{s}.conv1.w"), c, crate::audio::N_MELS, 5);
            vec1(&mut params, &format!("{GROUP_STYLE_ENCODER}.stub{s}.conv1.b"), c, 0.0);
            conv(&mut params, &mut rng, &format!("{GROUP_STYLE_ENCODER}.stub{s}.conv2.w"), c, c, 5);
            vec1(&mut params, &format!("{GROUP_STYLE_ENCODER}.stub{s}.conv2.b"), c, 0.0);
        }
        // Style head above the merged stream.
        mat(&mut params, &mut rng, &format!("{GROUP_STYLE_ENCODER}.head.lin1.w"), c, config.style_hidden);
        zeros_row(&mut params, &format!("{GROUP_STYLE_ENCODER}.head.lin1.b"), config.style_hidden);
        mat(&mut params, &mut rng, &format!("{GROUP_STYLE_ENCODER}.head.lin2.w"), config.style_hidden, config.style_dim);
        zeros_row(&mut params, &format!("{GROUP_STYLE_ENCODER}.head.lin2.b"), config.style_dim);

        mat(&mut params, &mut rng, &format!("{GROUP_F_S1}.w"), d, crate::audio::N_MELS);
        zeros_row(&mut params, &format!("{GROUP_F_S1}.b"), crate::audio::N_MELS);

        mat(&mut params, &mut rng, &format!("{GROUP_F_S2}.lin1.w"), d, config.f_s2_hidden);
        zeros_row(&mut params, &format!("{GROUP_F_S2}.lin1.b"), config.f_s2_hidden);
        mat(&mut params, &mut rng, &format!("{GROUP_F_S2}.lin2.w"), config.f_s2_hidden, config.coord_count());
        zeros_row(&mut params, &format!("{GROUP_F_S2}.lin2.b"), config.coord_count());

        let frozen = ALL_GROUPS.iter().map(|g| (g.to_string(), false)).collect();
        Self { params, frozen }
    }

    pub fn from_parts(
        params: BTreeMap<String, Tensor>,
        frozen: BTreeMap<String, bool>,
    ) -> Self {
        Self { params, frozen }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let slot = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        assert_eq!(
            slot.shape(),
            value.shape(),
            "parameter {name} shape {:?} cannot take value of shape {:?}",
            slot.shape(),
            value.shape()
        );
        *slot = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn group_of(name: &str) -> &str {
        name.split('.').next().expect("split always yields one part")
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) {
        let slot = self
            .frozen
            .get_mut(group)
            .unwrap_or_else(|| panic!("no parameter group named {group}"));
        *slot = frozen;
    }

    pub fn is_group_frozen(&self, group: &str) -> bool {
        *self
            .frozen
            .get(group)
            .unwrap_or_else(|| panic!("no parameter group named {group}"))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.is_group_frozen(Self::group_of(name))
    }

    pub fn frozen_flags(&self) -> &BTreeMap<String, bool> {
        &self.frozen
    }

    /// Names of parameters that participate in optimization right now.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| !self.is_frozen(n))
            .cloned()
            .collect()
    }
}

/// Tape bindings for one forward pass: every parameter as a leaf node,
/// `requires_grad` tracking the freeze flags.
pub struct Bound {
    ids: BTreeMap<String, TensorId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Config plus weights; the unit that trains, saves, and infers.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: BackboneConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn init(config: BackboneConfig, seed: u64) -> Self {
        let weights = ModelWeights::init(&config, seed);
        Self { config, weights }
    }

    /// Push every parameter onto the tape. Frozen groups become constants
    /// so backward never touches them.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut ids = BTreeMap::new();
        for (name, tensor) in self.weights.iter() {
            let requires_grad =
                tape.mode() == Mode::Train && !self.weights.is_frozen(name);
            ids.insert(name.to_string(), tape.leaf(tensor.clone(), requires_grad));
        }
        Bound { ids }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BackboneConfig {
        BackboneConfig::desk(97, 12)
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelWeights::init(&cfg(), 7);
        let b = ModelWeights::init(&cfg(), 7);
        for (name, t) in a.iter() {
            let u = b.get(name);
            assert_eq!(t.shape(), u.shape());
            for (x, y) in t.data().iter().zip(u.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} differs");
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = ModelWeights::init(&cfg(), 7);
        let b = ModelWeights::init(&cfg(), 8);
        let name = format!("{GROUP_F_S1}.w");
        assert_ne!(a.get(&name).data(), b.get(&name).data());
    }

    #[test]
    fn expected_parameter_shapes() {
        let c = cfg();
        let w = ModelWeights::init(&c, 1);
        assert_eq!(w.get("phoneme_encoder.embed").shape(), &[97, c.hidden]);
        assert_eq!(w.get("phoneme_encoder.block0.attn.wq").shape(), &[c.hidden, c.hidden]);
        assert_eq!(
            w.get("phoneme_encoder.block0.conv1.w").shape(),
            &[c.filter, c.hidden, 9]
        );
        assert_eq!(
            w.get("phoneme_encoder.block1.conv2.w").shape(),
            &[c.hidden, c.filter, 1]
        );
        assert_eq!(w.get("f_s1.w").shape(), &[c.hidden, 80]);
        assert_eq!(w.get("f_s2.lin1.w").shape(), &[c.hidden, 100]);
        assert_eq!(w.get("f_s2.lin2.w").shape(), &[100, 36]);
        assert_eq!(w.get("f_s2.lin2.b").shape(), &[1, 36]);
        assert_eq!(w.get("style_encoder.head.lin2.w").shape(), &[c.style_hidden, c.style_dim]);
    }

    #[test]
    fn full_config_matches_published_table() {
        let c = BackboneConfig::full(100, 300);
        assert_eq!(c.hidden, 256);
        assert_eq!(c.heads, 2);
        assert_eq!(c.filter, 1024);
        assert_eq!(c.encoder_blocks, 4);
        assert_eq!(c.decoder_blocks, 6);
        assert_eq!(c.conv_kernels, [9, 1]);
        assert_eq!(c.dropout, 0.2);
        assert_eq!(c.style_dim, 256);
        assert_eq!(c.f_s2_hidden, 100);
        c.validate();
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn heads_must_divide_hidden() {
        let mut c = cfg();
        c.hidden = 50;
        c.style_dim = 50;
        c.heads = 3;
        c.validate();
    }

    #[test]
    #[should_panic(expected = "must equal hidden")]
    fn style_dim_must_equal_hidden() {
        let mut c = cfg();
        c.style_dim = 64;
        c.validate();
    }

    #[test]
    fn freeze_flags_follow_groups() {
        let mut w = ModelWeights::init(&cfg(), 1);
        assert!(!w.is_frozen("phoneme_encoder.embed"));
        w.set_frozen(GROUP_PHONEME_ENCODER, true);
        assert!(w.is_frozen("phoneme_encoder.embed"));
        assert!(w.is_frozen("phoneme_encoder.block0.attn.wq"));
        assert!(!w.is_frozen("decoder.block0.attn.wq"));
        let trainable = w.trainable_names();
        assert!(trainable.iter().all(|n| !n.starts_with("phoneme_encoder.")));
        assert!(trainable.iter().any(|n| n.starts_with("decoder.")));
    }

    #[test]
    fn bound_constants_for_frozen_groups() {
        use crate::tensor::{Mode, Tape};
        let mut model = Model::init(cfg(), 3);
        model.weights.set_frozen(GROUP_PHONEME_ENCODER, true);
        let mut tape = Tape::new(Mode::Train);
        let bound = model.bind(&mut tape);
        assert!(!tape.requires_grad(bound.id("phoneme_encoder.embed")));
        assert!(tape.requires_grad(bound.id("decoder.block0.attn.wq")));
    }
}
