//! Minimal CPU convolutional network engine: NCHW tensors, im2col
//! convolutions on top of a blocked GEMM, batch norm, pooling, and Adam.

mod layers;
mod scalar;

pub use layers::{
    fan_in_uniform, kaiming, BatchNorm2d, Conv2d, CoordPlanes, GlobalAvgPool, Layer, Linear, MaxPool2d, Param, Relu,
    ResidualBlock, Sequential, Tensor,
};
pub use scalar::{gemm, Mat, Scalar};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Adam with bias correction. State is matched to parameters by visiting
/// order, which the owning model keeps fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, config: AdamConfig) -> Self {
        Adam {
            lr,
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter the visitor yields.
    pub fn step(&mut self, visit: impl FnOnce(&mut dyn FnMut(&mut Param<T>))) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let step_size = T::from_f64(self.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(eps);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        visit(&mut |p: &mut Param<T>| {
            if m_all.len() <= idx {
                m_all.push(vec![T::ZERO; p.value.len()]);
                v_all.push(vec![T::ZERO; p.value.len()]);
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                p.value[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, fan_in_uniform(&mut r, len, 1))
    }

    /// Loss = sum(y * probe); compares analytic input and parameter
    /// gradients with central differences.
    fn check_layer(layer: &mut dyn Layer<f64>, x: Tensor<f64>) {
        let y = layer.forward(&x, true);
        let probe = random_tensor(y.shape, 99);
        let loss = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| {
            let y = layer.forward(x, true);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
        };
        layer.visit_params(&mut |p| p.zero_grad());
        layer.forward(&x, true);
        let dx = layer.backward(&probe);

        let h = 1e-6;
        for i in (0..x.data.len()).step_by(7.max(x.data.len() / 40)) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * h);
            assert!(
                (fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "input grad {i}: {fd} vs {}",
                dx.data[i]
            );
        }

        let mut grads = Vec::new();
        layer.visit_params(&mut |p| grads.push(p.grad.clone()));
        for (pi, g) in grads.iter().enumerate() {
            for j in (0..g.len()).step_by(5.max(g.len() / 20)) {
                let shift = |delta: f64, layer: &mut dyn Layer<f64>| {
                    let mut k = 0;
                    layer.visit_params(&mut |p| {
                        if k == pi {
                            p.value[j] += delta;
                        }
                        k += 1;
                    });
                };
                shift(h, layer);
                let lp = loss(layer, &x);
                shift(-2.0 * h, layer);
                let lm = loss(layer, &x);
                shift(h, layer);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {pi}[{j}]: {fd} vs {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, true, &mut rng());
        check_layer(&mut conv, random_tensor([2, 2, 7, 6], 1));
    }

    #[test]
    fn batch_norm_gradients() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, -0.2];
        check_layer(&mut bn, random_tensor([3, 3, 4, 4], 2));
    }

    #[test]
    fn linear_pool_coord_gradients() {
        let mut lin = Linear::<f64>::new("l", 12, 4, &mut rng());
        check_layer(&mut lin, random_tensor([3, 3, 2, 2], 3));
        check_layer(&mut GlobalAvgPool::default(), random_tensor([2, 3, 4, 5], 4));
        check_layer(&mut CoordPlanes::default(), random_tensor([2, 1, 3, 4], 5));
        check_layer(&mut MaxPool2d::new(3, 2, 1), random_tensor([2, 2, 6, 6], 6));
    }

    #[test]
    fn residual_gradients() {
        let mut block = ResidualBlock::<f64>::new("r", 2, 4, 2, &mut rng());
        check_layer(&mut block, random_tensor([3, 2, 6, 6], 7));
        let mut same = ResidualBlock::<f64>::new("s", 3, 3, 1, &mut rng());
        check_layer(&mut same, random_tensor([2, 3, 5, 5], 8));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut conv = Conv2d::<f64>::new("c", 2, 2, 3, 2, 1, true, &mut rng());
        conv.bias.as_mut().unwrap().value = vec![0.25, -0.5];
        let x = random_tensor([1, 2, 5, 5], 9);
        let y = conv.forward(&x, false);
        assert_eq!(y.shape, [1, 2, 3, 3]);
        for co in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = conv.bias.as_ref().unwrap().value[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += conv.weight.value[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data[(ci * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((s - y.data[(co * 3 + oy) * 3 + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - 1e-5];
        let y = bn.forward(&Tensor::from_vec([1, 1, 1, 2], vec![2.0, 4.0]), false);
        assert!((y.data[0]).abs() < 1e-12 && (y.data[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr_and_zero_lr_is_inert() {
        let mut p = Param::new("p", vec![2], vec![1.0f64, -1.0]);
        p.grad = vec![0.3, -2.0];
        let mut adam = Adam::new(0.01, AdamConfig::default());
        adam.step(|f| f(&mut p));
        assert!((p.value[0] - 0.99).abs() < 1e-9);
        assert!((p.value[1] + 0.99).abs() < 1e-9);

        let mut q = Param::new("q", vec![1], vec![0.5f32]);
        q.grad = vec![1.0];
        let mut still = Adam::new(0.0, AdamConfig::default());
        still.step(|f| f(&mut q));
        assert_eq!(q.value[0], 0.5);
    }
}
