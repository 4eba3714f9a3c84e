//! Dense tensor storage plus the reverse-mode autodiff graph built on top of it.
//!
//! Layout is row-major with image-like data ordered [batch, channel, height,
//! width]. Values are stored as f32; statistical reductions (batch-norm
//! moments, losses) accumulate in f64.

mod graph;
mod kernels;
mod params;

pub use graph::{Mode, NodeId, Session};
pub use kernels::conv_out_extent;
pub use params::{Param, ParamStore, SgdConfig};

use crate::error::{Error, Result};

/// Dense N-dimensional float array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated zeroed on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::Dimension(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Interpret as [B, C, H, W].
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [b, c, h, w] => Ok((*b, *c, *h, *w)),
            other => Err(Error::Dimension(format!("expected 4-d tensor, got {:?}", other))),
        }
    }

    /// Interpret as [C, H, W] (single image).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::Dimension(format!("expected 3-d tensor, got {:?}", other))),
        }
    }

    /// Add a leading batch axis of extent 1.
    pub fn unsqueeze0(&self) -> Tensor {
        let mut shape = Vec::with_capacity(self.shape.len() + 1);
        shape.push(1);
        shape.extend_from_slice(&self.shape);
        Tensor { shape, data: self.data.clone(), grad: None }
    }

    /// Drop a leading batch axis of extent 1.
    pub fn squeeze0(&self) -> Result<Tensor> {
        if self.shape.first() != Some(&1) {
            return Err(Error::Dimension(format!(
                "squeeze0 on shape {:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data.clone(),
            grad: None,
        })
    }

    /// One [H, W] channel plane of a [C, H, W] tensor, as a copy.
    pub fn channel_plane(&self, c: usize) -> Result<Vec<f32>> {
        let (ch, h, w) = self.dims3()?;
        if c >= ch {
            return Err(Error::Dimension(format!("channel {} of {}", c, ch)));
        }
        Ok(self.data[c * h * w..(c + 1) * h * w].to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite values in {}", what)))
        }
    }
}
