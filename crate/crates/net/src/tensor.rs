//! A minimal dense f64 tensor.
//!
//! Activations are `[channels, depth, height, width]` (width fastest);
//! convolution weights are `[out_c, in_c, kd, kh, kw]`.

use cdis_core::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor data length must match dims"
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims, "add_assign dims must match");
        let rhs = other.data.as_slice();
        par::for_each_chunk_mut(&mut self.data, 1 << 14, |ci, chunk| {
            let base = ci * (1 << 14);
            for (k, v) in chunk.iter_mut().enumerate() {
                *v += rhs[base + k];
            }
        });
    }

    /// Elementwise `self += scale * other`.
    pub fn axpy(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.dims, other.dims, "axpy dims must match");
        let rhs = other.data.as_slice();
        par::for_each_chunk_mut(&mut self.data, 1 << 14, |ci, chunk| {
            let base = ci * (1 << 14);
            for (k, v) in chunk.iter_mut().enumerate() {
                *v += scale * rhs[base + k];
            }
        });
    }

    pub fn scale(&mut self, k: f64) {
        par::for_each_chunk_mut(&mut self.data, 1 << 14, |_, chunk| {
            for v in chunk {
                *v *= k;
            }
        });
    }
}
