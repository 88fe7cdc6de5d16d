//! Instance normalization (per-sample, per-channel) with learnable affine.

use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InstanceNorm2d {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

/// Per-channel statistics saved by the forward pass for backprop.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub mean: Vec<f64>,
    pub istd: Vec<f64>,
}

impl InstanceNorm2d {
    pub fn new(channels: usize) -> Self {
        InstanceNorm2d {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, NormCache) {
        assert_eq!(x.c, self.channels, "instance norm channel mismatch");
        let n = x.h * x.w;
        let mut y = Tensor::zeros(x.c, x.h, x.w);
        let mut mean = vec![0.0; x.c];
        let mut istd = vec![0.0; x.c];
        for c in 0..x.c {
            let xs = &x.data[c * n..(c + 1) * n];
            let mu = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            mean[c] = mu;
            istd[c] = is;
            let (g, b) = (self.gamma[c], self.beta[c]);
            for (out, &v) in y.data[c * n..(c + 1) * n].iter_mut().zip(xs) {
                *out = g * (v - mu) * is + b;
            }
        }
        (y, NormCache { mean, istd })
    }

    /// Backward pass; accumulates parameter gradients and returns dX.
    pub fn backward(
        &self,
        x: &Tensor,
        cache: &NormCache,
        gy: &Tensor,
        ggamma: &mut [f64],
        gbeta: &mut [f64],
    ) -> Tensor {
        let n = x.h * x.w;
        let nf = n as f64;
        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        for c in 0..x.c {
            let xs = &x.data[c * n..(c + 1) * n];
            let gys = &gy.data[c * n..(c + 1) * n];
            let (mu, is) = (cache.mean[c], cache.istd[c]);

            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for (&g, &v) in gys.iter().zip(xs) {
                let xhat = (v - mu) * is;
                sum_gy += g;
                sum_gy_xhat += g * xhat;
            }
            ggamma[c] += sum_gy_xhat;
            gbeta[c] += sum_gy;

            let mean_gy = sum_gy / nf;
            let mean_gy_xhat = sum_gy_xhat / nf;
            let scale = self.gamma[c] * is;
            for ((out, &g), &v) in gx.data[c * n..(c + 1) * n].iter_mut().zip(gys).zip(xs) {
                let xhat = (v - mu) * is;
                *out = scale * (g - mean_gy - xhat * mean_gy_xhat);
            }
        }
        gx
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}
