use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::nn::{join, uniform, Linear, Params, Stack, StackCache};
use super::VisionEncoderConfig;
use crate::data::{ImageTensor, IMAGE_SIZE};
use crate::tensor::Scalar;

/// ViT-style encoder: linear patch embedding, learned CLS token and positions,
/// bidirectional blocks, output taken at the CLS position.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder<T> {
    pub cfg: VisionEncoderConfig,
    pub patch: Linear<T>,
    pub cls: Array2<T>,
    pub pos: Array2<T>,
    pub stack: Stack<T>,
}

pub struct VisionCache<T> {
    patches: Array2<T>,
    stack: StackCache<T>,
    n_images: usize,
}

/// Flattens one image into `n_patches x (p * p * 3)` rows, row-major over patches.
pub fn patchify<T: Scalar>(image: &ImageTensor, patch: usize) -> Array2<T> {
    let px = image.pixels();
    let per_side = IMAGE_SIZE / patch;
    let mut out = Array2::<T>::zeros((per_side * per_side, patch * patch * 3));
    for py in 0..per_side {
        for pxi in 0..per_side {
            let mut row = out.row_mut(py * per_side + pxi);
            let mut c = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..3 {
                        row[c] = T::lit(px[[py * patch + y, pxi * patch + x, ch]] as f64);
                        c += 1;
                    }
                }
            }
        }
    }
    out
}

impl<T: Scalar> VisionEncoder<T> {
    pub fn init<R: Rng>(rng: &mut R, cfg: VisionEncoderConfig) -> Self {
        let m = cfg.embed_dim;
        let bound = 1.0 / (m as f64).sqrt();
        VisionEncoder {
            cfg,
            patch: Linear::init(rng, cfg.patch_size * cfg.patch_size * 3, m),
            cls: uniform(rng, 1, m, bound),
            pos: uniform(rng, cfg.n_patches() + 1, m, bound),
            stack: Stack::init(rng, m, cfg.n_layers, cfg.n_heads, false),
        }
    }

    fn tokens(&self, patches: &Array2<T>, n_images: usize) -> (Array2<T>, Vec<std::ops::Range<usize>>) {
        let np = self.cfg.n_patches();
        let embedded = self.patch.forward(patches);
        let seq = np + 1;
        let mut x = Array2::<T>::zeros((n_images * seq, self.cfg.embed_dim));
        let mut segments = Vec::with_capacity(n_images);
        for i in 0..n_images {
            let start = i * seq;
            let block = concatenate![Axis(0), self.cls, embedded.slice(s![i * np..(i + 1) * np, ..])];
            x.slice_mut(s![start..start + seq, ..]).assign(&(block + &self.pos));
            segments.push(start..start + seq);
        }
        (x, segments)
    }

    fn gather_patches(&self, images: &[&ImageTensor]) -> Array2<T> {
        let views: Vec<Array2<T>> = images.iter().map(|im| patchify(im, self.cfg.patch_size)).collect();
        let refs: Vec<_> = views.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &refs).expect("patch widths agree")
    }

    fn cls_rows(&self, hidden: &Array2<T>, n_images: usize) -> Array2<T> {
        let seq = self.cfg.n_patches() + 1;
        Array2::from_shape_fn((n_images, self.cfg.embed_dim), |(i, j)| hidden[[i * seq, j]])
    }

    /// One embedding row per image.
    pub fn encode(&self, images: &[&ImageTensor]) -> Array2<T> {
        if images.is_empty() {
            return Array2::zeros((0, self.cfg.embed_dim));
        }
        let (x, segs) = self.tokens(&self.gather_patches(images), images.len());
        let hidden = self.stack.infer(x, &segs);
        self.cls_rows(&hidden, images.len())
    }

    pub fn forward_train(&self, images: &[&ImageTensor]) -> (Array2<T>, VisionCache<T>) {
        let patches = self.gather_patches(images);
        let (x, segs) = self.tokens(&patches, images.len());
        let (hidden, stack) = self.stack.forward(x, &segs);
        let out = self.cls_rows(&hidden, images.len());
        (
            out,
            VisionCache {
                patches,
                stack,
                n_images: images.len(),
            },
        )
    }

    /// Accumulates parameter gradients given d(loss)/d(CLS outputs).
    pub fn backward(&self, cache: &VisionCache<T>, d_out: &Array2<T>, grads: &mut Self) {
        let np = self.cfg.n_patches();
        let seq = np + 1;
        let n = cache.n_images;
        let mut dh = Array2::<T>::zeros((n * seq, self.cfg.embed_dim));
        for i in 0..n {
            dh.row_mut(i * seq).assign(&d_out.row(i));
        }
        let segs: Vec<_> = (0..n).map(|i| i * seq..(i + 1) * seq).collect();
        let dx = self.stack.backward(&cache.stack, &segs, &dh, Some(&mut grads.stack));
        let mut d_embedded = Array2::<T>::zeros((n * np, self.cfg.embed_dim));
        for i in 0..n {
            let block = dx.slice(s![i * seq..(i + 1) * seq, ..]);
            grads.pos += &block;
            let mut c = grads.cls.row_mut(0);
            c += &block.row(0);
            d_embedded
                .slice_mut(s![i * np..(i + 1) * np, ..])
                .assign(&block.slice(s![1.., ..]));
        }
        let g = &mut grads.patch;
        g.weight += &cache.patches.t().dot(&d_embedded);
        g.bias += &d_embedded.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

impl<T: Scalar> Params<T> for VisionEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<T>)) {
        self.patch.visit(&join(prefix, "patch"), f);
        f(join(prefix, "cls"), &self.cls);
        f(join(prefix, "pos"), &self.pos);
        self.stack.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<T>)) {
        self.patch.visit_mut(&join(prefix, "patch"), f);
        f(join(prefix, "cls"), &mut self.cls);
        f(join(prefix, "pos"), &mut self.pos);
        self.stack.visit_mut(prefix, f);
    }
}
