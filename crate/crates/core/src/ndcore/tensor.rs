use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Where the channel axis sits in an unbatched feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    ChannelsFirst,
    ChannelsLast,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows `idx` of the leading axis, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn row(&self, i: usize) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * row..(i + 1) * row].to_vec(),
        }
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::Empty { op: "stack" })?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Per-channel mean over all spatial positions of an unbatched feature map.
///
/// A rank-1 input has no spatial axes and is returned unchanged.
pub fn global_avg_pool(a: &Tensor, layout: Layout) -> Result<Tensor> {
    if a.is_empty() || a.rank() == 0 {
        return Err(Error::Empty { op: "global_avg_pool" });
    }
    if a.rank() == 1 {
        return Ok(a.clone());
    }
    let (channels, spatial) = match layout {
        Layout::ChannelsFirst => (a.shape[0], a.shape[1..].iter().product::<usize>()),
        Layout::ChannelsLast => (a.shape[a.rank() - 1], a.shape[..a.rank() - 1].iter().product()),
    };
    let mut out = vec![0.0; channels];
    match layout {
        Layout::ChannelsFirst => {
            for (c, o) in out.iter_mut().enumerate() {
                *o = a.data[c * spatial..(c + 1) * spatial].iter().sum::<f64>() / spatial as f64;
            }
        }
        Layout::ChannelsLast => {
            for pos in 0..spatial {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += a.data[pos * channels + c];
                }
            }
            for o in &mut out {
                *o /= spatial as f64;
            }
        }
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_ok());
    }

    #[test]
    fn gap_examples() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&a, Layout::ChannelsFirst).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[3, 4, 4], 2.5);
        assert_eq!(global_avg_pool(&c, Layout::ChannelsFirst).unwrap().data(), &[2.5; 3]);
        let v = Tensor::vector(vec![1.0, -2.0]);
        assert_eq!(global_avg_pool(&v, Layout::ChannelsFirst).unwrap(), v);
        assert!(global_avg_pool(&Tensor::zeros(&[0]), Layout::ChannelsFirst).is_err());
    }

    #[test]
    fn gap_layouts_agree() {
        // [H=2, W=1, C=2] channels-last vs its channels-first transpose
        let last = Tensor::new(vec![2, 1, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let first = Tensor::new(vec![2, 2, 1], vec![1.0, 3.0, 10.0, 30.0]).unwrap();
        assert_eq!(
            global_avg_pool(&last, Layout::ChannelsLast).unwrap(),
            global_avg_pool(&first, Layout::ChannelsFirst).unwrap()
        );
    }
}
