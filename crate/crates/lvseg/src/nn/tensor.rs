//! Dense per-sample tensor: (channels, height, width), f64, row-major with
//! the width index fastest.

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length mismatch");
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, ch: usize, y: usize, x: usize) -> usize {
        (ch * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(ch, y, x)]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(ch, y, x);
        self.data[i] = v;
    }

    /// Shape triple for error messages.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
