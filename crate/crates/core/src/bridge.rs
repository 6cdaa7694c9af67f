//! The trainable parameters connecting the frozen networks.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::nn::uniform;
use crate::backbones::{BackboneBundle, Params};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const INITIAL_TEMPERATURE: f64 = 0.07;

/// `W_c: m x D`, `W_i: m x q`, `W_t: H x q`, the RET embedding row and the
/// log-temperature. Temperature is `exp(log_tau)`, so it stays positive under
/// any update.
#[derive(Clone, Debug, PartialEq)]
pub struct Bridge<T> {
    pub w_c: Array2<T>,
    pub w_i: Array2<T>,
    pub w_t: Array2<T>,
    /// `1 x D`
    pub ret_embedding: Array2<T>,
    /// `1 x 1`
    pub log_tau: Array2<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeDims {
    pub vision_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub retrieval_dim: usize,
}

impl<T: Scalar> Bridge<T> {
    /// Projections are uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; the RET
    /// row starts at the mean decoder embedding plus small uniform noise.
    pub fn init(backbones: &BackboneBundle<T>, retrieval_dim: usize, seed: u64) -> Result<Self> {
        let m = backbones.vision_cfg().embed_dim;
        let dcfg = backbones.decoder_cfg();
        let (d, h) = (dcfg.embed_dim, dcfg.hidden_dim);
        if retrieval_dim == 0 || retrieval_dim >= d {
            return Err(Error::config("q", format!("retrieval dim must be in 1..{d} (q < D)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_c = uniform(&mut rng, m, d, 1.0 / (m as f64).sqrt());
        let w_i = uniform(&mut rng, m, retrieval_dim, 1.0 / (m as f64).sqrt());
        let w_t = uniform(&mut rng, h, retrieval_dim, 1.0 / (h as f64).sqrt());
        let mean = backbones.decoder.mean_embedding();
        let ret_embedding = Array2::from_shape_fn((1, d), |(_, j)| mean[j] + T::lit(rng.random_range(-0.01..=0.01)));
        Ok(Bridge {
            w_c,
            w_i,
            w_t,
            ret_embedding,
            log_tau: Array2::from_elem((1, 1), T::lit(INITIAL_TEMPERATURE.ln())),
        })
    }

    pub fn dims(&self) -> BridgeDims {
        BridgeDims {
            vision_dim: self.w_c.nrows(),
            embed_dim: self.w_c.ncols(),
            hidden_dim: self.w_t.nrows(),
            retrieval_dim: self.w_i.ncols(),
        }
    }

    pub fn tau(&self) -> T {
        self.log_tau[[0, 0]].exp()
    }

    pub fn ret(&self) -> ArrayView1<'_, T> {
        self.ret_embedding.row(0)
    }

    fn project(w: &Array2<T>, x: ArrayView1<T>, what: &str) -> Result<Array1<T>> {
        if x.len() != w.nrows() {
            return Err(Error::Shape(format!(
                "{what}: input length {} != {}",
                x.len(),
                w.nrows()
            )));
        }
        Ok(x.dot(w))
    }

    /// `v^T W_c`: the single visual prefix embedding.
    pub fn project_visual_prefix(&self, v: ArrayView1<T>) -> Result<Array1<T>> {
        Self::project(&self.w_c, v, "visual prefix")
    }

    /// `v^T W_i`
    pub fn project_image_for_retrieval(&self, v: ArrayView1<T>) -> Result<Array1<T>> {
        Self::project(&self.w_i, v, "image retrieval projection")
    }

    /// `h^T W_t`
    pub fn project_ret_for_retrieval(&self, h: ArrayView1<T>) -> Result<Array1<T>> {
        Self::project(&self.w_t, h, "text retrieval projection")
    }

    /// Names and element counts of every trainable tensor.
    pub fn trainable_parameters(&self) -> Vec<(String, usize)> {
        self.named().into_iter().map(|(n, a)| (n, a.len())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Bridge<U> {
        use crate::tensor::cast2;
        Bridge {
            w_c: cast2(&self.w_c),
            w_i: cast2(&self.w_i),
            w_t: cast2(&self.w_t),
            ret_embedding: cast2(&self.ret_embedding),
            log_tau: cast2(&self.log_tau),
        }
    }
}

impl<T: Scalar> Params<T> for Bridge<T> {
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        f("W_c".into(), &self.w_c);
        f("W_i".into(), &self.w_i);
        f("W_t".into(), &self.w_t);
        f("ret_embedding".into(), &self.ret_embedding);
        f("log_tau".into(), &self.log_tau);
    }
    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        f("W_c".into(), &mut self.w_c);
        f("W_i".into(), &mut self.w_i);
        f("W_t".into(), &mut self.w_t);
        f("ret_embedding".into(), &mut self.ret_embedding);
        f("log_tau".into(), &mut self.log_tau);
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::backbones::{init_backbones, DecoderConfig, VisionEncoderConfig};

    fn setup(q: usize) -> (BackboneBundle<f64>, Bridge<f64>) {
        let b = init_backbones(VisionEncoderConfig::default(), DecoderConfig::with_vocab(30), 2).unwrap();
        let br = Bridge::init(&b, q, 4).unwrap();
        (b, br)
    }

    fn naive(v: &[f64], w: &Array2<f64>) -> Vec<f64> {
        let mut out = vec![0.0; w.ncols()];
        for (j, o) in out.iter_mut().enumerate() {
            for (i, &vi) in v.iter().enumerate() {
                *o += vi * w[[i, j]];
            }
        }
        out
    }

    #[test]
    fn parameter_count_formula() {
        let (_, br) = setup(32);
        let params = br.trainable_parameters();
        assert_eq!(params.len(), 5);
        let total: usize = params.iter().map(|(_, n)| n).sum();
        assert_eq!(total, 64 * 128 + 64 * 32 + 128 * 32 + 128 + 1);
        assert_eq!(total, 14_465);
        let names: Vec<_> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["W_c", "W_i", "W_t", "ret_embedding", "log_tau"]);
    }

    #[test]
    fn backbone_tensors_are_not_trainable() {
        let (b, br) = setup(32);
        let trainable: Vec<String> = br.trainable_parameters().into_iter().map(|(n, _)| n).collect();
        for info in b.tensor_infos() {
            assert!(!trainable.contains(&info.name));
        }
    }

    #[test]
    fn zero_and_basis_inputs() {
        let (_, br) = setup(32);
        let zero = Array1::<f64>::zeros(64);
        assert!(br.project_visual_prefix(zero.view()).unwrap().iter().all(|&x| x == 0.0));
        assert!(br
            .project_image_for_retrieval(zero.view())
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(br
            .project_ret_for_retrieval(Array1::zeros(128).view())
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let mut e1 = Array1::<f64>::zeros(64);
        e1[0] = 1.0;
        assert_eq!(br.project_visual_prefix(e1.view()).unwrap(), br.w_c.row(0));
        assert_eq!(br.project_image_for_retrieval(e1.view()).unwrap().len(), 32);
        assert!(br.project_visual_prefix(Array1::zeros(63).view()).is_err());
    }

    #[test]
    fn q_must_be_below_d() {
        let b = init_backbones::<f32>(VisionEncoderConfig::default(), DecoderConfig::with_vocab(30), 2).unwrap();
        assert!(Bridge::init(&b, 128, 0).is_err());
        assert!((Bridge::init(&b, 32, 0).unwrap().tau() - 0.07).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn projections_match_naive_multiply(seed in 0u64..1000) {
            let (_, br) = setup(32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
            let va = Array1::from(v.clone());
            let ha = Array1::from(h.clone());
            for (got, want) in [
                (br.project_visual_prefix(va.view()).unwrap(), naive(&v, &br.w_c)),
                (br.project_image_for_retrieval(va.view()).unwrap(), naive(&v, &br.w_i)),
                (br.project_ret_for_retrieval(ha.view()).unwrap(), naive(&h, &br.w_t)),
            ] {
                for (a, b) in got.iter().zip(&want) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn projections_are_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..100) {
            let (_, br) = setup(16);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v1 = Array1::from_shape_fn(64, |_| rng.random_range(-1.0..1.0));
            let v2 = Array1::from_shape_fn(64, |_| rng.random_range(-1.0..1.0));
            let mix = &v1 * alpha + &v2 * beta;
            let lhs = br.project_image_for_retrieval(mix.view()).unwrap();
            let rhs = br.project_image_for_retrieval(v1.view()).unwrap() * alpha
                + br.project_image_for_retrieval(v2.view()).unwrap() * beta;
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let lhs = br.project_visual_prefix(mix.view()).unwrap();
            let rhs = br.project_visual_prefix(v1.view()).unwrap() * alpha
                + br.project_visual_prefix(v2.view()).unwrap() * beta;
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
