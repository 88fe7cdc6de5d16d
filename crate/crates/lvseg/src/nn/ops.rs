//! Stateless tensor operations: activations, softmax, channel concat/split.

use super::tensor::Tensor;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, gy: &Tensor, slope: f64) -> Tensor {
    let data = x
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
        .collect();
    Tensor::from_vec(x.c, x.h, x.w, data)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let data = x
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.c, x.h, x.w, data)
}

/// Numerically stable per-pixel softmax over the channel dimension.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let n = logits.h * logits.w;
    let mut out = Tensor::zeros(logits.c, logits.h, logits.w);
    for p in 0..n {
        let mut maxv = f64::NEG_INFINITY;
        for c in 0..logits.c {
            maxv = maxv.max(logits.data[c * n + p]);
        }
        let mut denom = 0.0;
        for c in 0..logits.c {
            let e = (logits.data[c * n + p] - maxv).exp();
            out.data[c * n + p] = e;
            denom += e;
        }
        for c in 0..logits.c {
            out.data[c * n + p] /= denom;
        }
    }
    out
}

/// Given dL/dp for p = softmax(z), compute dL/dz per pixel.
pub fn softmax_backward(probs: &Tensor, gprobs: &Tensor) -> Tensor {
    let n = probs.h * probs.w;
    let mut gz = Tensor::zeros(probs.c, probs.h, probs.w);
    for p in 0..n {
        let mut dot = 0.0;
        for c in 0..probs.c {
            dot += probs.data[c * n + p] * gprobs.data[c * n + p];
        }
        for c in 0..probs.c {
            let pv = probs.data[c * n + p];
            gz.data[c * n + p] = pv * (gprobs.data[c * n + p] - dot);
        }
    }
    gz
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Split a gradient tensor along channels into (first `c_a` channels, rest).
pub fn split_channels(g: &Tensor, c_a: usize) -> (Tensor, Tensor) {
    let n = g.h * g.w;
    let ga = Tensor::from_vec(c_a, g.h, g.w, g.data[..c_a * n].to_vec());
    let gb = Tensor::from_vec(g.c - c_a, g.h, g.w, g.data[c_a * n..].to_vec());
    (ga, gb)
}

/// Elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.c, a.h, a.w, data)
}
