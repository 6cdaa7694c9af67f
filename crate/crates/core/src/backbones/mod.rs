//! Frozen networks: ViT-style vision encoder, causal text encoder (used only
//! when fine-tuning the encoder pair) and the causal language decoder.

mod decoder;
pub mod nn;
mod pretrain;
mod text;
mod vision;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{Decoder, DecoderPass};
pub use nn::Params;
pub use pretrain::{pretrain_language_model, LmPretrainConfig};
pub use text::TextEncoder;
pub use vision::{patchify, VisionEncoder};

use crate::data::{ImageTensor, TokenSequence, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{digest, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionEncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        VisionEncoderConfig {
            patch_size: 32,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
        }
    }
}

impl VisionEncoderConfig {
    pub fn n_patches(&self) -> usize {
        (IMAGE_SIZE / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !IMAGE_SIZE.is_multiple_of(self.patch_size) {
            return Err(Error::config("vision.patch_size", format!("must divide {IMAGE_SIZE}")));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config("vision.embed_dim", "must be divisible by vision.n_heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Full vocabulary size including RET.
    pub vocab_size: usize,
    /// Input embedding width (D).
    pub embed_dim: usize,
    /// Output hidden width (H). Must equal `embed_dim`.
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
}

impl DecoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        DecoderConfig {
            vocab_size,
            embed_dim: 128,
            hidden_dim: 128,
            n_layers: 2,
            n_heads: 4,
            context_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim != self.hidden_dim {
            return Err(Error::config(
                "decoder.hidden_dim",
                "must equal decoder.embed_dim (D = H)",
            ));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "decoder.embed_dim",
                "must be divisible by decoder.n_heads",
            ));
        }
        if self.vocab_size < 6 {
            return Err(Error::config("decoder.vocab_size", "must hold the six special tokens"));
        }
        if self.context_len == 0 {
            return Err(Error::config("decoder.context_len", "must be positive"));
        }
        Ok(())
    }
}

/// All frozen networks. Nothing in here receives gradients during bridge
/// training; see [`BackboneBundle::frozen_digests`].
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneBundle<T> {
    pub vision: VisionEncoder<T>,
    pub text: TextEncoder<T>,
    pub decoder: Decoder<T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

/// Deterministic initialization: every weight matrix is uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, embeddings use the model width as
/// fan-in, biases start at zero and layer-norm gains at one.
pub fn init_backbones<T: Scalar>(
    vision_cfg: VisionEncoderConfig,
    decoder_cfg: DecoderConfig,
    seed: u64,
) -> Result<BackboneBundle<T>> {
    vision_cfg.validate()?;
    decoder_cfg.validate()?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    Ok(BackboneBundle {
        vision: VisionEncoder::init(&mut stream(1), vision_cfg),
        text: TextEncoder::init(
            &mut stream(2),
            decoder_cfg.vocab_size,
            vision_cfg.embed_dim,
            vision_cfg.n_layers,
            vision_cfg.n_heads,
            decoder_cfg.context_len,
        ),
        decoder: Decoder::init(&mut stream(3), decoder_cfg),
    })
}

impl<T: Scalar> BackboneBundle<T> {
    pub fn vision_cfg(&self) -> VisionEncoderConfig {
        self.vision.cfg
    }

    pub fn decoder_cfg(&self) -> DecoderConfig {
        self.decoder.cfg
    }

    /// CLS embedding `v` of one image.
    pub fn encode_image(&self, image: &ImageTensor) -> Array1<T> {
        self.vision.encode(&[image]).row(0).to_owned()
    }

    pub fn encode_images(&self, images: &[&ImageTensor]) -> Array2<T> {
        self.vision.encode(images)
    }

    /// Text-encoder embedding `u` taken at the EOS position.
    pub fn encode_caption(&self, tokens: &TokenSequence) -> Result<Array1<T>> {
        Ok(self.text.encode(&[&tokens.ids])?.row(0).to_owned())
    }

    /// Logits and hidden states for all positions (prefix rows first).
    pub fn decoder_forward(
        &self,
        prefix: &Array2<T>,
        tokens: &TokenSequence,
        ret_embedding: ArrayView1<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        self.decoder.forward_with_prefix(prefix, tokens, ret_embedding)
    }

    pub fn hidden_at_ret(
        &self,
        prefix: &Array2<T>,
        tokens: &TokenSequence,
        ret_embedding: ArrayView1<T>,
    ) -> Result<Array1<T>> {
        self.decoder.hidden_at_ret(prefix, tokens, ret_embedding)
    }

    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        self.named()
            .into_iter()
            .map(|(name, a)| TensorInfo {
                name,
                shape: a.shape().to_vec(),
                frozen: true,
            })
            .collect()
    }

    /// SHA-256 of every tensor, keyed by name.
    pub fn frozen_digests(&self) -> BTreeMap<String, String> {
        self.named().into_iter().map(|(n, a)| (n, digest(a))).collect()
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> BackboneBundle<U> {
        let mut out: BackboneBundle<U> =
            init_backbones(self.vision_cfg(), self.decoder_cfg(), 0).expect("validated configs");
        let src: BTreeMap<String, &Array2<T>> = self.named().into_iter().collect();
        out.visit_mut("", &mut |n, a| *a = crate::tensor::cast2(src[&n]));
        out
    }
}

impl<T: Scalar> Params<T> for BackboneBundle<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.vision.visit(&nn::join(prefix, "vision"), f);
        self.text.visit(&nn::join(prefix, "text"), f);
        self.decoder.visit(&nn::join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.vision.visit_mut(&nn::join(prefix, "vision"), f);
        self.text.visit_mut(&nn::join(prefix, "text"), f);
        self.decoder.visit_mut(&nn::join(prefix, "decoder"), f);
    }
}
