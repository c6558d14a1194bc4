use crate::error::{Error, Result};

/// Dense NCHW tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Dimension { what: "tensor data", expected, actual: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Row `h` of channel `c` in sample `n`.
    pub fn row(&self, n: usize, c: usize, h: usize) -> &[f64] {
        let [_, cs, hs, ws] = self.shape;
        let start = ((n * cs + c) * hs + h) * ws;
        &self.data[start..start + ws]
    }

    pub fn row_mut(&mut self, n: usize, c: usize, h: usize) -> &mut [f64] {
        let [_, cs, hs, ws] = self.shape;
        let start = ((n * cs + c) * hs + h) * ws;
        &mut self.data[start..start + ws]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// Gather samples by index into a new batch.
    pub fn gather(&self, idx: &[usize]) -> Self {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Self { shape: [idx.len(), self.shape[1], self.shape[2], self.shape[3]], data }
    }

    /// Zero-pad the spatial axes.
    pub(crate) fn pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let [n, c, h, w] = self.shape;
        let (ph, pw) = (h + top + bottom, w + left + right);
        let mut out = Self::zeros([n, c, ph, pw]);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    out.row_mut(ni, ci, hi + top)[left..left + w].copy_from_slice(self.row(ni, ci, hi));
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor::pad`].
    pub(crate) fn crop(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let [n, c, h, w] = self.shape;
        let (ch, cw) = (h - top - bottom, w - left - right);
        let mut out = Self::zeros([n, c, ch, cw]);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..ch {
                    out.row_mut(ni, ci, hi).copy_from_slice(&self.row(ni, ci, hi + top)[left..left + cw]);
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let cx = x.chunks_exact(4);
    let cy = y.chunks_exact(4);
    let tail: f64 = cx.remainder().iter().zip(cy.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in cx.zip(cy) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_crop_roundtrip() {
        let t = Tensor::from_vec([1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let p = t.pad(1, 0, 2, 1);
        assert_eq!(p.shape(), [1, 2, 3, 6]);
        assert_eq!(p.row(0, 1, 1), &[0.0, 0.0, 6.0, 7.0, 8.0, 0.0]);
        assert_eq!(p.crop(1, 0, 2, 1), t);
    }

    #[test]
    fn dot_matches_naive() {
        let x: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let y: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((dot(&x, &y) - naive).abs() < 1e-12);
    }
}
