//! Sparse row-to-row linear maps.
//!
//! A [`RowMap`] sends input rows to output rows with optional weights. It covers
//! every index shuffle the model needs (window partition, cyclic shift,
//! temporal grouping, patch merging, im2col with zero padding) as well as
//! pooling and bilinear resampling.

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct RowMap<S> {
    in_rows: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Option<Vec<S>>,
}

impl<S: Scalar> RowMap<S> {
    /// Pure gather: output row `o` copies input row `src[o]`, or is zero for `None`.
    pub fn gather(in_rows: usize, src: impl IntoIterator<Item = Option<usize>>) -> Self {
        let mut offsets = vec![0];
        let mut index = Vec::new();
        for s in src {
            if let Some(i) = s {
                assert!(i < in_rows, "gather index {i} out of range {in_rows}");
                index.push(i as u32);
            }
            offsets.push(index.len());
        }
        Self {
            in_rows,
            offsets,
            index,
            weight: None,
        }
    }

    /// Permutation gather with every output row present.
    pub fn permutation(src: &[usize]) -> Self {
        Self::gather(src.len(), src.iter().map(|&i| Some(i)))
    }

    /// General weighted map: output row `o` is `sum(w * input[i])` over `entries[o]`.
    pub fn weighted(in_rows: usize, entries: impl IntoIterator<Item = Vec<(usize, S)>>) -> Self {
        let mut offsets = vec![0];
        let mut index = Vec::new();
        let mut weight = Vec::new();
        for row in entries {
            for (i, w) in row {
                assert!(i < in_rows, "row map index {i} out of range {in_rows}");
                index.push(i as u32);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        Self {
            in_rows,
            offsets,
            index,
            weight: Some(weight),
        }
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Inverse of a permutation map.
    pub fn inverse_permutation(&self) -> Self {
        assert_eq!(self.in_rows, self.out_rows(), "not a permutation");
        let mut inv = vec![usize::MAX; self.in_rows];
        for o in 0..self.out_rows() {
            let (a, b) = (self.offsets[o], self.offsets[o + 1]);
            assert_eq!(b - a, 1, "not a permutation");
            inv[self.index[a] as usize] = o;
        }
        assert!(inv.iter().all(|&i| i != usize::MAX), "not a permutation");
        Self::permutation(&inv)
    }

    pub fn apply(&self, x: &[S], cols: usize) -> Vec<S> {
        assert_eq!(x.len(), self.in_rows * cols, "row map input size");
        let mut out = vec![S::zero(); self.out_rows() * cols];
        for o in 0..self.out_rows() {
            let dst = &mut out[o * cols..(o + 1) * cols];
            for e in self.offsets[o]..self.offsets[o + 1] {
                let i = self.index[e] as usize;
                let src = &x[i * cols..(i + 1) * cols];
                match &self.weight {
                    None => {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    Some(w) => {
                        let w = w[e];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * *s;
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint: accumulates `mapᵀ · dy` into `dx`.
    pub fn apply_transpose_into(&self, dy: &[S], cols: usize, dx: &mut [S]) {
        assert_eq!(dy.len(), self.out_rows() * cols, "row map grad size");
        assert_eq!(dx.len(), self.in_rows * cols, "row map grad target size");
        for o in 0..self.out_rows() {
            let src = &dy[o * cols..(o + 1) * cols];
            for e in self.offsets[o]..self.offsets[o + 1] {
                let i = self.index[e] as usize;
                let dst = &mut dx[i * cols..(i + 1) * cols];
                match &self.weight {
                    None => {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    Some(w) => {
                        let w = w[e];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * *s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_inverse_round_trips() {
        let p = RowMap::<f64>::permutation(&[2, 0, 3, 1]);
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let y = p.apply(&x, 2);
        assert_eq!(y, vec![4.0, 5.0, 0.0, 1.0, 6.0, 7.0, 2.0, 3.0]);
        let back = p.inverse_permutation().apply(&y, 2);
        assert_eq!(back, x);
    }

    #[test]
    fn transpose_is_adjoint() {
        let m = RowMap::<f64>::weighted(3, vec![vec![(0, 0.5), (2, 2.0)], vec![], vec![(1, -1.0)]]);
        let x = [1.0, 2.0, 3.0];
        let dy = [0.3, 0.7, -0.2];
        let y = m.apply(&x, 1);
        let mut dx = [0.0; 3];
        m.apply_transpose_into(&dy, 1, &mut dx);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
