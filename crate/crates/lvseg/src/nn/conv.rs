//! 2D convolution and 2x stride-2 transposed convolution with explicit
//! backward passes. Convolutions are lowered to GEMM via im2col.

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

/// Standard 2D convolution. Weight layout: `[out_c][in_c][k][k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: vec![0.0; out_c * in_c * k * k],
            bias: vec![0.0; out_c],
        }
    }

    /// He initialization scaled for a LeakyReLU with the given negative slope.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R, slope: f64) {
        let fan_in = (self.in_c * self.k * self.k) as f64;
        let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        for w in &mut self.weight {
            *w = dist.sample(rng);
        }
        for b in &mut self.bias {
            *b = 0.0;
        }
    }

    /// Initialize with a small output scale (used by layers that should start
    /// close to a zero map, e.g. a residual generator's final projection).
    pub fn init_small<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let dist = Normal::new(0.0, std).expect("valid normal");
        for w in &mut self.weight {
            *w = dist.sample(rng);
        }
        for b in &mut self.bias {
            *b = 0.0;
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = self.out_hw(x.h, x.w);
        let kk = self.k * self.k;
        let n = oh * ow;
        let mut col = vec![0.0; self.in_c * kk * n];
        for c in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * kk + ky * self.k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = (c * x.h + iy as usize) * x.w;
                        let dst = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                col[dst + ox] = x.data[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (col, oh, ow)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channel mismatch");
        let (col, oh, ow) = self.im2col(x);
        let kdim = self.in_c * self.k * self.k;
        let n = oh * ow;
        let wmat = ArrayView2::from_shape((self.out_c, kdim), &self.weight).expect("weight view");
        let cmat = ArrayView2::from_shape((kdim, n), &col).expect("col view");
        let y = wmat.dot(&cmat);
        let (mut data, _) = y.into_raw_vec_and_offset();
        for o in 0..self.out_c {
            let b = self.bias[o];
            for v in &mut data[o * n..(o + 1) * n] {
                *v += b;
            }
        }
        Tensor::from_vec(self.out_c, oh, ow, data)
    }

    /// Backward pass: returns input gradient and accumulates into the given
    /// weight/bias gradient buffers (which must be pre-sized).
    pub fn backward(&self, x: &Tensor, gy: &Tensor, gw: &mut [f64], gb: &mut [f64]) -> Tensor {
        let (col, oh, ow) = self.im2col(x);
        let kdim = self.in_c * self.k * self.k;
        let n = oh * ow;
        assert_eq!((gy.c, gy.h, gy.w), (self.out_c, oh, ow), "conv grad shape mismatch");

        let gymat = ArrayView2::from_shape((self.out_c, n), &gy.data).expect("gy view");
        let cmat = ArrayView2::from_shape((kdim, n), &col).expect("col view");

        // dW = dY · colᵀ
        let gw_mat = gymat.dot(&cmat.t());
        let (gw_data, _) = gw_mat.into_raw_vec_and_offset();
        for (a, b) in gw.iter_mut().zip(&gw_data) {
            *a += b;
        }
        for o in 0..self.out_c {
            gb[o] += gy.data[o * n..(o + 1) * n].iter().sum::<f64>();
        }

        // dcol = Wᵀ · dY, then scatter back to the input grid.
        let wmat = ArrayView2::from_shape((self.out_c, kdim), &self.weight).expect("weight view");
        let gcol = wmat.t().dot(&gymat);
        let (gcol, _) = gcol.into_raw_vec_and_offset();

        let mut gx = Tensor::zeros(x.c, x.h, x.w);
        let kk = self.k * self.k;
        for c in 0..self.in_c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * kk + ky * self.k + kx) * n;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let dst = (c * x.h + iy as usize) * x.w;
                        let src = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                gx.data[dst + ix as usize] += gcol[src + ox];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Transposed convolution with a fixed 2x2 kernel and stride 2 (exact 2x
/// upsampling, no overlap). Weight layout: `[in_c][out_c][2][2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub in_c: usize,
    pub out_c: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvTranspose2x2 {
    pub fn new(in_c: usize, out_c: usize) -> Self {
        ConvTranspose2x2 {
            in_c,
            out_c,
            weight: vec![0.0; in_c * out_c * 4],
            bias: vec![0.0; out_c],
        }
    }

    pub fn init_he<R: Rng>(&mut self, rng: &mut R, slope: f64) {
        // Each output pixel sees in_c contributing weights.
        let fan_in = self.in_c as f64;
        let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        for w in &mut self.weight {
            *w = dist.sample(rng);
        }
        for b in &mut self.bias {
            *b = 0.0;
        }
    }

    /// Reshape weights to a `(out_c*4, in_c)` matrix so the forward pass is a
    /// single GEMM followed by a scatter.
    fn weight_matrix(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.out_c * 4 * self.in_c];
        for i in 0..self.in_c {
            for o in 0..self.out_c {
                for t in 0..4 {
                    m[(o * 4 + t) * self.in_c + i] = self.weight[(i * self.out_c + o) * 4 + t];
                }
            }
        }
        m
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "transposed conv input channel mismatch");
        let n = x.h * x.w;
        let wmat_data = self.weight_matrix();
        let wmat = ArrayView2::from_shape((self.out_c * 4, self.in_c), &wmat_data).expect("w view");
        let xmat = ArrayView2::from_shape((self.in_c, n), &x.data).expect("x view");
        let y4 = wmat.dot(&xmat);
        let (y4, _) = y4.into_raw_vec_and_offset();

        let (oh, ow) = (2 * x.h, 2 * x.w);
        let mut y = Tensor::zeros(self.out_c, oh, ow);
        for o in 0..self.out_c {
            let b = self.bias[o];
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = (o * 4 + dy * 2 + dx) * n;
                    for r in 0..x.h {
                        let dst = (o * oh + 2 * r + dy) * ow + dx;
                        let row = src + r * x.w;
                        for c in 0..x.w {
                            y.data[dst + 2 * c] = y4[row + c] + b;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor, gy: &Tensor, gw: &mut [f64], gb: &mut [f64]) -> Tensor {
        let n = x.h * x.w;
        assert_eq!((gy.c, gy.h, gy.w), (self.out_c, 2 * x.h, 2 * x.w), "transposed conv grad shape");

        // Gather dY into the (out_c*4, n) layout used by the forward GEMM.
        let mut g4 = vec![0.0; self.out_c * 4 * n];
        let ow = gy.w;
        for o in 0..self.out_c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let dst = (o * 4 + dy * 2 + dx) * n;
                    for r in 0..x.h {
                        let src = (o * gy.h + 2 * r + dy) * ow + dx;
                        let row = dst + r * x.w;
                        for c in 0..x.w {
                            g4[row + c] = gy.data[src + 2 * c];
                        }
                    }
                }
            }
        }

        let g4mat = ArrayView2::from_shape((self.out_c * 4, n), &g4).expect("g4 view");
        let xmat = ArrayView2::from_shape((self.in_c, n), &x.data).expect("x view");

        // dW' = dY4 · xᵀ, mapped back into the [in_c][out_c][2][2] layout.
        let gwmat = g4mat.dot(&xmat.t());
        for i in 0..self.in_c {
            for o in 0..self.out_c {
                for t in 0..4 {
                    gw[(i * self.out_c + o) * 4 + t] += gwmat[(o * 4 + t, i)];
                }
            }
        }
        for o in 0..self.out_c {
            let mut s = 0.0;
            for t in 0..4 {
                s += g4[(o * 4 + t) * n..(o * 4 + t + 1) * n].iter().sum::<f64>();
            }
            gb[o] += s;
        }

        // dX = W'ᵀ · dY4
        let wmat_data = self.weight_matrix();
        let wmat = ArrayView2::from_shape((self.out_c * 4, self.in_c), &wmat_data).expect("w view");
        let gx = wmat.t().dot(&g4mat);
        let (gx, _) = gx.into_raw_vec_and_offset();
        Tensor::from_vec(self.in_c, x.h, x.w, gx)
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}
