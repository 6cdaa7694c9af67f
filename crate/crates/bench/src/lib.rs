//! Deterministic inputs for the kernel benchmarks, at the desk model sizes.

use capret_core::backbones::{init_backbones, BackboneBundle, DecoderConfig, VisionEncoderConfig};
use capret_core::bridge::Bridge;
use capret_core::data::{ImageTensor, TokenSequence, Vocabulary};
use capret_core::retrieval::RetrievalIndex;
use capret_core::training::{build_interleaved_batch, EncodedImage, InterleavedBatch};
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 64;
pub const RETRIEVAL_DIM: usize = 32;

/// Values in [-1, 1) from a fixed hash of the position.
pub fn pseudo(i: usize) -> f32 {
    let x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    (x % 20_000) as f32 / 10_000.0 - 1.0
}

pub fn matrix(rows: usize, cols: usize, salt: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |(i, j)| pseudo(salt * 1_000_003 + i * cols + j))
}

pub fn backbones() -> BackboneBundle<f32> {
    let vision = VisionEncoderConfig::default();
    let decoder = DecoderConfig {
        vocab_size: VOCAB,
        embed_dim: 128,
        hidden_dim: 128,
        n_layers: 2,
        n_heads: 4,
        context_len: 64,
    };
    init_backbones(vision, decoder, 0).expect("valid sizes")
}

pub fn bridge(backbones: &BackboneBundle<f32>) -> Bridge<f32> {
    Bridge::init(backbones, RETRIEVAL_DIM, 0).expect("valid sizes")
}

pub fn image(salt: usize) -> ImageTensor {
    let pixels = Array3::from_shape_fn((224, 224, 3), |(y, x, c)| {
        0.5 + 0.5 * pseudo(salt + c * 50_176 + y * 224 + x)
    });
    ImageTensor::from_array(pixels).expect("224x224 RGB")
}

/// A caption of `len` words ending in EOS and RET.
pub fn caption(len: usize, salt: usize) -> TokenSequence {
    let mut ids = vec![Vocabulary::BOS];
    ids.extend((0..len).map(|i| 5 + ((salt * 31 + i * 7) % (VOCAB - 6)) as u32));
    ids.extend([Vocabulary::EOS, VOCAB as u32 - 1]);
    TokenSequence::new(ids)
}

pub fn records(n: usize, vision_dim: usize) -> Vec<EncodedImage<f32>> {
    (0..n)
        .map(|i| {
            let captions = vec![caption(8, i), caption(10, i + n)];
            EncodedImage {
                id: format!("img{i:04}"),
                uri: format!("img{i:04}.png"),
                v: Array1::from_shape_fn(vision_dim, |j| pseudo(i * vision_dim + j)),
                texts: vec![String::new(); 2],
                captions,
            }
        })
        .collect()
}

pub fn batch(backbones: &BackboneBundle<f32>, pairs: usize) -> InterleavedBatch<f32> {
    let recs = records(pairs, backbones.vision_cfg().embed_dim);
    build_interleaved_batch(&recs, pairs, VOCAB as u32 - 1, &mut ChaCha8Rng::seed_from_u64(0)).expect("enough records")
}

pub fn index(n: usize) -> RetrievalIndex {
    let ids: Vec<String> = (0..n).map(|i| format!("img{i:05}")).collect();
    RetrievalIndex::from_embeddings(ids.clone(), ids, matrix(n, RETRIEVAL_DIM, 1)).expect("consistent shapes")
}
