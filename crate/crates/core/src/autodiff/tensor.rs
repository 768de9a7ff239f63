//! Dense row-major `f64` tensors with numpy-style broadcasting helpers.

/// A dense tensor: a shape and a row-major `f64` buffer.
///
/// All tensors in the engine are double precision; the attack's binary-search
/// loops amplify rounding, so single precision is never used.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and matching buffer.
    ///
    /// Panics if the buffer length does not equal the shape product; callers
    /// construct shapes, so a mismatch is a programming error.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor { shape, data: vec![value; len] }
    }

    /// A shape-`[1]` scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer under a new shape (must preserve the element count).
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numpy-style broadcast of two shapes (right-aligned; a dimension may be
/// stretched only when it is 1). Returns `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides of `shape`, right-aligned into `rank` dims, with stride 0
/// on broadcast (size-1) dimensions.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut nat = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        nat[i] = acc;
        acc *= shape[i];
    }
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = nat[i - offset];
        }
        // broadcast dims (or left-padding) keep stride 0
    }
    out
}

/// Visit every element of the broadcast output of `a_shape ⊗ b_shape`,
/// yielding `(out_index, a_index, b_index)` in row-major output order.
///
/// Fast paths cover the shapes the detector and losses actually hit
/// (identical shapes, scalar operands, rank-2 pairwise grids); the generic
/// odometer handles the rest.
pub fn broadcast_zip(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if a_shape == b_shape {
        for i in 0..total {
            visit(i, i, i);
        }
        return;
    }
    let a_len: usize = a_shape.iter().product();
    let b_len: usize = b_shape.iter().product();
    if a_len == 1 {
        for i in 0..total {
            visit(i, 0, i);
        }
        return;
    }
    if b_len == 1 {
        for i in 0..total {
            visit(i, i, 0);
        }
        return;
    }
    let a_str = broadcast_strides(a_shape, out_shape);
    let b_str = broadcast_strides(b_shape, out_shape);
    if out_shape.len() == 2 {
        let (rows, cols) = (out_shape[0], out_shape[1]);
        let mut oi = 0;
        for r in 0..rows {
            let ar = r * a_str[0];
            let br = r * b_str[0];
            for c in 0..cols {
                visit(oi, ar + c * a_str[1], br + c * b_str[1]);
                oi += 1;
            }
        }
        return;
    }
    // general odometer
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..total {
        visit(oi, ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += a_str[d];
            bi += b_str[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= a_str[d] * out_shape[d];
            bi -= b_str[d] * out_shape[d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[5], &[1]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn zip_pairwise_grid() {
        // [3,1] x [1,2] -> [3,2]; a varies along rows, b along cols
        let mut seen = Vec::new();
        broadcast_zip(&[3, 1], &[1, 2], &[3, 2], |o, a, b| seen.push((o, a, b)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 0, 1), (2, 1, 0), (3, 1, 1), (4, 2, 0), (5, 2, 1)]
        );
    }

    #[test]
    fn zip_general_rank3() {
        let mut seen = Vec::new();
        broadcast_zip(&[2, 1, 2], &[2, 2, 1], &[2, 2, 2], |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen.len(), 8);
        // spot-check the last element: out (1,1,1) -> a (1,0,1)=3, b (1,1,0)=3
        assert_eq!(seen[7], (7, 3, 3));
    }
}
