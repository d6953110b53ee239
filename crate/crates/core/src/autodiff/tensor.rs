use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// A tensor with an empty shape is a scalar holding one element.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is already known to match; used by kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            off = off * dim + ix;
        }
        off
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an input maps onto a broadcast output, with the common layouts
/// special-cased so their loops stay simple.
pub(crate) enum Bcast {
    Same,
    /// Input covers a trailing block of the output, repeated.
    Repeat(usize),
    /// Input covers the leading axes; each input value spans `inner` outputs.
    Outer(usize),
    General(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return Bcast::Same;
        }
        let in_len: usize = input.iter().product();
        let lead = input.iter().take_while(|&&d| d == 1).count();
        let core = &input[lead..];
        if core.len() <= out.len() && out[out.len() - core.len()..] == *core {
            return Bcast::Repeat(in_len);
        }
        if input.len() == out.len() {
            let k = input
                .iter()
                .zip(out)
                .take_while(|(a, b)| a == b)
                .count();
            if input[k..].iter().all(|&d| d == 1) {
                return Bcast::Outer(out[k..].iter().product());
            }
        }
        Bcast::General(BroadcastOffsets::new(out, input).collect())
    }

    /// Input values laid out over the whole output.
    pub(crate) fn expand<'a>(&self, data: &'a [f64], numel: usize) -> std::borrow::Cow<'a, [f64]> {
        use std::borrow::Cow;
        match self {
            Bcast::Same => Cow::Borrowed(data),
            Bcast::Repeat(_) => {
                let mut v = Vec::with_capacity(numel);
                while v.len() < numel {
                    v.extend_from_slice(data);
                }
                Cow::Owned(v)
            }
            Bcast::Outer(inner) => Cow::Owned(
                data.iter()
                    .flat_map(|&v| std::iter::repeat_n(v, *inner))
                    .collect(),
            ),
            Bcast::General(offs) => Cow::Owned(offs.iter().map(|&o| data[o]).collect()),
        }
    }

    /// Sums an output-shaped array back onto the input layout.
    pub(crate) fn reduce(&self, full: &[f64], in_len: usize) -> Vec<f64> {
        match self {
            Bcast::Same => full.to_vec(),
            Bcast::Repeat(len) => {
                let mut acc = vec![0.0; in_len];
                for chunk in full.chunks_exact(*len) {
                    acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                }
                acc
            }
            Bcast::Outer(inner) => full.chunks_exact(*inner).map(|c| c.iter().sum()).collect(),
            Bcast::General(offs) => {
                let mut acc = vec![0.0; in_len];
                for (v, &o) in full.iter().zip(offs) {
                    acc[o] += v;
                }
                acc
            }
        }
    }
}

/// Walks the elements of a broadcast output shape in row-major order and
/// yields, for each, the offset into an input of shape `input`.
pub(crate) struct BroadcastOffsets {
    dims: Vec<usize>,
    strides: Vec<usize>,
    counter: Vec<usize>,
    offset: usize,
    remaining: usize,
}

impl BroadcastOffsets {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        let n = out.len();
        let mut strides = vec![0; n];
        let mut stride = 1;
        for i in (0..input.len()).rev() {
            let o = i + n - input.len();
            strides[o] = if input[i] == 1 { 0 } else { stride };
            stride *= input[i];
        }
        BroadcastOffsets {
            dims: out.to_vec(),
            strides,
            counter: vec![0; n],
            offset: 0,
            remaining: out.iter().product(),
        }
    }
}

impl Iterator for BroadcastOffsets {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let current = self.offset;
        for d in (0..self.dims.len()).rev() {
            self.counter[d] += 1;
            self.offset += self.strides[d];
            if self.counter[d] < self.dims[d] {
                break;
            }
            self.offset -= self.strides[d] * self.dims[d];
            self.counter[d] = 0;
        }
        Some(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn broadcast_offsets_match_naive_indexing() {
        let out = [2, 3, 4];
        let input = [3, 1];
        let offs: Vec<_> = BroadcastOffsets::new(&out, &input).collect();
        let mut expected = Vec::new();
        for _a in 0..2 {
            for b in 0..3 {
                for _c in 0..4 {
                    expected.push(b);
                }
            }
        }
        assert_eq!(offs, expected);
    }

    #[test]
    fn bcast_layouts_agree_with_general_offsets() {
        let cases: [(&[usize], &[usize]); 5] = [
            (&[2, 3, 4], &[4]),
            (&[2, 3, 4], &[1, 3, 4]),
            (&[2, 3, 4], &[2, 3, 1]),
            (&[2, 3, 4], &[3, 1]),
            (&[2, 3, 4], &[]),
        ];
        for (out, input) in cases {
            let n: usize = out.iter().product();
            let m: usize = input.iter().product();
            let data: Vec<f64> = (0..m).map(|i| i as f64 + 0.5).collect();
            let want: Vec<f64> = BroadcastOffsets::new(out, input).map(|o| data[o]).collect();
            let b = Bcast::new(out, input);
            assert_eq!(&*b.expand(&data, n), want.as_slice(), "{out:?} <- {input:?}");
            let full: Vec<f64> = (0..n).map(|i| (i * i) as f64).collect();
            let mut red = vec![0.0; m];
            for (v, o) in full.iter().zip(BroadcastOffsets::new(out, input)) {
                red[o] += v;
            }
            assert_eq!(b.reduce(&full, m), red);
        }
    }
}
