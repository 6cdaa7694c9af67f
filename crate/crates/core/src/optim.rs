//! Adam with bias correction over any [`Params`] collection.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbones::Params;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments per parameter name.
    pub moments: BTreeMap<String, (Array2<T>, Array2<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Params<T>>(cfg: AdamConfig, params: &P) -> Self {
        let mut moments = BTreeMap::new();
        params.visit("", &mut |name, a| {
            moments.insert(name, (Array2::zeros(a.raw_dim()), Array2::zeros(a.raw_dim())));
        });
        Adam { cfg, t: 0, moments }
    }

    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut grad_map: BTreeMap<String, &Array2<T>> = BTreeMap::new();
        grads.visit("", &mut |n, g| {
            grad_map.insert(n, g);
        });
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let step = T::lit(lr / c1);
        let c2_sqrt = T::lit(c2.sqrt());
        let eps = T::lit(self.cfg.eps);
        let moments = &mut self.moments;
        params.visit_mut("", &mut |name, p| {
            let g = grad_map[&name];
            let (m, v) = moments.get_mut(&name).expect("moment for every parameter");
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1t * *m + one_b1 * g;
                *v = b2t * *v + one_b2 * g * g;
                *p -= step * *m / (v.sqrt() / c2_sqrt + eps);
            });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::nn::Linear;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Linear::<f64> {
            weight: Array2::from_elem((1, 2), 1.0),
            bias: Array2::zeros((1, 2)),
        };
        let mut g = p.zeros_like();
        g.weight[[0, 0]] = 3.0;
        g.weight[[0, 1]] = -0.5;
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &g, 0.1);
        assert!((p.weight[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.weight[[0, 1]] - 1.1).abs() < 1e-6);
        assert_eq!(p.bias, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Linear::<f32> {
            weight: Array2::from_elem((2, 2), 0.5),
            bias: Array2::zeros((1, 2)),
        };
        let before = p.clone();
        let g = Linear {
            weight: Array2::from_elem((2, 2), 1.0f32),
            bias: Array2::from_elem((1, 2), 1.0f32),
        };
        Adam::new(AdamConfig::default(), &p).step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }
}
