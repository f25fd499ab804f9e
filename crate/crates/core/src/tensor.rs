//! Dense row-major tensors of 64-bit reals.

use crate::error::GraphError;

/// A dense tensor. `values.len()` always equals the product of `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
        }
    }

    /// Builds a tensor from parts. Panics if the extents do not match the
    /// value count; callers construct shapes, so this is a programming error.
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not cover {} values",
            shape,
            values.len()
        );
        Tensor {
            shape: shape.to_vec(),
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Leading extent (the batch axis for batched tensors).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of scalars per leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.values[i * w..(i + 1) * w]
    }

    /// Gathers the given rows into a new tensor with the same trailing shape.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut values = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, values }
    }

    /// Reinterprets the tensor with a new shape of equal volume.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, self.values.clone())
    }

    /// Consuming variant of [`Tensor::reshaped`]; no copy.
    pub fn into_reshaped(self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, self.values)
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(
        &self,
        layer_index: usize,
        layer_kind: &'static str,
    ) -> Result<(), GraphError> {
        if self.first_non_finite().is_some() {
            Err(GraphError::NonFinite {
                layer_index,
                layer_kind,
            })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_volume_must_match() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.row_len(), 3);
    }

    #[test]
    #[should_panic]
    fn mismatched_volume_panics() {
        let _ = Tensor::from_vec(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn gather_preserves_trailing_shape() {
        let t = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = t.gather_rows(&[2, 0]);
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.values(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn non_finite_detection() {
        let mut t = Tensor::zeros(&[4]);
        assert_eq!(t.first_non_finite(), None);
        t.values_mut()[2] = f64::NAN;
        assert_eq!(t.first_non_finite(), Some(2));
    }
}
