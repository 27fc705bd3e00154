//! Dense row-major arrays of f64, rank 0 through 3.
//!
//! Everything in the differentiation graph is backed by these. Rank 0 is a
//! scalar with an empty shape. No views, no strides: slicing copies.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{}, {}, ..]", self.data[0], self.data[1])
        }
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(shape.len() <= 3, "rank above 3 is unsupported: {shape:?}");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Array { shape, data }
    }

    pub fn scalar(x: f64) -> Self {
        Array { shape: vec![], data: vec![x] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], x: f64) -> Self {
        Array::new(shape.to_vec(), vec![x; shape.iter().product()])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Array { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Scalar payload; panics if the array is not a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar_shaped(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a rank-2 array.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "dims2 on rank-{} array", self.rank());
        (self.shape[0], self.shape[1])
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, x: f64) {
        let (_, c) = self.dims2();
        self.data[i * c + j] = x;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
        assert_eq!(self.shape, other.shape);
        Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Array) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm of the flattened array.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Plain 2-D matrix product, no transposition flags.
    pub fn matmul(&self, other: &Array) -> Array {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lrow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &l) in lrow.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let rrow = &other.data[p * n..(p + 1) * n];
                for (o, &r) in orow.iter_mut().zip(rrow.iter()) {
                    *o += l * r;
                }
            }
        }
        Array::new(vec![m, n], out)
    }

    /// `self^T * other` for rank-2 arrays.
    pub fn t_matmul(&self, other: &Array) -> Array {
        let (k, m) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "t_matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let lrow = &self.data[p * m..(p + 1) * m];
            let rrow = &other.data[p * n..(p + 1) * n];
            for (i, &l) in lrow.iter().enumerate() {
                if l == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &r) in orow.iter_mut().zip(rrow.iter()) {
                    *o += l * r;
                }
            }
        }
        Array::new(vec![m, n], out)
    }

    /// `self * other^T` for rank-2 arrays.
    pub fn matmul_t(&self, other: &Array) -> Array {
        let (m, k) = self.dims2();
        let (n, k2) = other.dims2();
        assert_eq!(k, k2, "matmul_t inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lrow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let rrow = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = lrow.iter().zip(rrow.iter()).map(|(&a, &b)| a * b).sum();
            }
        }
        Array::new(vec![m, n], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let a = Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Array::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_agree() {
        let a = Array::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Array::new(vec![3, 4], (0..12).map(|x| x as f64).collect());
        let direct = {
            // a^T explicitly
            let mut at = Array::zeros(&[2, 3]);
            for i in 0..3 {
                for j in 0..2 {
                    at.set2(j, i, a.at2(i, j));
                }
            }
            at.matmul(&b)
        };
        assert_eq!(a.t_matmul(&b), direct);
    }
}
