//! Dense row-major n-dimensional arrays and the shape arithmetic shared by
//! the tape ops: strides, trailing-axis broadcasting and a cache-friendly
//! matrix-multiply kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. `data.len() == shape.iter().product()` always.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Array {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.into_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Converts element type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.into_f64())).collect(),
        }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two shapes with trailing-axis alignment.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = padded_dim(a, i, ndim);
        let db = padded_dim(b, i, ndim);
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::dimension(format!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Dimension at `pos` of `shape` once left-padded with 1s to `ndim` axes.
fn padded_dim(shape: &[usize], pos: usize, ndim: usize) -> usize {
    let pad = ndim - shape.len();
    if pos < pad {
        1
    } else {
        shape[pos - pad]
    }
}

/// Left-pads a shape with 1s to `ndim` axes.
pub fn pad_shape(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

/// Iterator-free index mapping: given a flat index into `out_shape`, returns
/// the flat index into an operand of (padded) shape `op_shape`, treating
/// size-1 axes as broadcast.
pub fn broadcast_index(flat: usize, out_shape: &[usize], op_shape: &[usize]) -> usize {
    debug_assert_eq!(out_shape.len(), op_shape.len());
    let mut rem = flat;
    let mut idx = 0usize;
    let mut stride = 1usize;
    for d in (0..out_shape.len()).rev() {
        let coord = rem % out_shape[d];
        rem /= out_shape[d];
        let c = if op_shape[d] == 1 { 0 } else { coord };
        idx += c * stride;
        stride *= op_shape[d];
    }
    idx
}

/// Reorders axes of a dense array; `axes` must be a permutation of `0..ndim`.
pub fn permute<T: Scalar>(x: &Array<T>, axes: &[usize]) -> Result<Array<T>> {
    let s = x.shape();
    let ndim = s.len();
    let mut seen = vec![false; ndim];
    if axes.len() != ndim
        || axes
            .iter()
            .any(|&a| a >= ndim || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::dimension(format!(
            "axes {:?} is not a permutation of 0..{}",
            axes, ndim
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let in_strides = strides(s);
    let out_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut coord = vec![0usize; ndim];
    for _ in 0..x.numel() {
        let mut flat_in = 0usize;
        for d in 0..ndim {
            flat_in += coord[d] * out_strides[d];
        }
        out.push(x.data()[flat_in]);
        for d in (0..ndim).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    Array::new(out_shape, out)
}

/// C[m,n] += A[m,k] * B[k,n] on contiguous slices, ikj loop order.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n].
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T.
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            crow[j] = crow[j] + s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert_eq!(strides(&[]), Vec::<usize>::new());
    }

    #[test]
    fn broadcast_trailing_alignment() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shapes(&[4, 1, 5], &[2, 5]).unwrap(),
            vec![4, 2, 5]
        );
        assert!(broadcast_shapes(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn reshape_checks_element_count() {
        let a = Array::<f64>::zeros(&[2, 6]);
        assert!(a.clone().reshaped(vec![3, 4]).is_ok());
        assert!(a.reshaped(vec![5, 2]).is_err());
    }

    #[test]
    fn matmul_kernel_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
