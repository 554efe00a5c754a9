use crate::Mat;

/// A fixed sparse linear operator between row spaces, stored as CSR.
///
/// Applying it to an `in_rows x C` matrix yields an `out_rows x C` matrix where
/// each output row is a weighted sum of input rows. Bilinear and trilinear
/// sampling, splatting, upsampling, view averaging and row gathers are all
/// instances of this operator: the weights depend only on geometry, so the
/// operator is linear in the features and its adjoint is the transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    in_rows: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn builder(in_rows: usize) -> SparseMapBuilder {
        SparseMapBuilder {
            map: SparseMap { in_rows, offsets: vec![0], indices: Vec::new(), weights: Vec::new() },
        }
    }

    /// Selects rows `idx[i]` of the input for output row `i`.
    pub fn gather(in_rows: usize, idx: &[usize]) -> Self {
        let mut b = Self::builder(in_rows);
        for &i in idx {
            b.push_row(&[(i, 1.0)]);
        }
        b.build()
    }

    /// Averages consecutive groups of `group` rows.
    pub fn group_mean(groups: usize, group: usize) -> Self {
        let mut b = Self::builder(groups * group);
        let w = 1.0 / group as f64;
        let mut entries = Vec::with_capacity(group);
        for g in 0..groups {
            entries.clear();
            entries.extend((0..group).map(|j| (g * group + j, w)));
            b.push_row(&entries);
        }
        b.build()
    }

    /// Repeats every input row `times` times consecutively.
    pub fn repeat_rows(in_rows: usize, times: usize) -> Self {
        let mut b = Self::builder(in_rows);
        for r in 0..in_rows {
            for _ in 0..times {
                b.push_row(&[(r, 1.0)]);
            }
        }
        b.build()
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Entries `(input row, weight)` of one output row.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.offsets[r], self.offsets[r + 1]);
        self.indices[s..e].iter().zip(&self.weights[s..e]).map(|(&i, &w)| (i as usize, w))
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        assert_eq!(x.rows(), self.in_rows, "sparse map expects {} input rows, got {}", self.in_rows, x.rows());
        let c = x.cols();
        let mut out = Mat::zeros(self.out_rows(), c);
        let src = x.data();
        let dst = out.data_mut();
        for r in 0..self.out_rows() {
            let o = &mut dst[r * c..(r + 1) * c];
            for k in self.offsets[r]..self.offsets[r + 1] {
                let i = self.indices[k] as usize;
                let w = self.weights[k];
                for (ov, iv) in o.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *ov += w * iv;
                }
            }
        }
        out
    }

    /// Adds `S^T g` into `acc`.
    pub fn apply_transpose_into(&self, g: &Mat, acc: &mut Mat) {
        assert_eq!(g.rows(), self.out_rows());
        assert_eq!(acc.rows(), self.in_rows);
        let c = g.cols();
        let src = g.data();
        let dst = acc.data_mut();
        for r in 0..self.out_rows() {
            let gr = &src[r * c..(r + 1) * c];
            for k in self.offsets[r]..self.offsets[r + 1] {
                let i = self.indices[k] as usize;
                let w = self.weights[k];
                for (ov, gv) in dst[i * c..(i + 1) * c].iter_mut().zip(gr) {
                    *ov += w * gv;
                }
            }
        }
    }

    pub fn apply_transpose(&self, g: &Mat) -> Mat {
        let mut acc = Mat::zeros(self.in_rows, g.cols());
        self.apply_transpose_into(g, &mut acc);
        acc
    }

    /// `self ∘ inner`: applying the result equals applying `inner` then `self`.
    pub fn compose(&self, inner: &SparseMap) -> SparseMap {
        assert_eq!(self.in_rows, inner.out_rows());
        let mut b = SparseMap::builder(inner.in_rows);
        let mut acc: Vec<(usize, f64)> = Vec::new();
        for r in 0..self.out_rows() {
            acc.clear();
            for (mid, w) in self.row_entries(r) {
                for (i, v) in inner.row_entries(mid) {
                    acc.push((i, w * v));
                }
            }
            acc.sort_unstable_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
            for &(i, w) in &acc {
                match merged.last_mut() {
                    Some(last) if last.0 == i => last.1 += w,
                    _ => merged.push((i, w)),
                }
            }
            b.push_row(&merged);
        }
        b.build()
    }
}

pub struct SparseMapBuilder {
    map: SparseMap,
}

impl SparseMapBuilder {
    /// Appends one output row. Zero weights are dropped.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(i, w) in entries {
            assert!(i < self.map.in_rows, "sparse index {i} out of range {}", self.map.in_rows);
            if w != 0.0 {
                self.map.indices.push(i as u32);
                self.map.weights.push(w);
            }
        }
        self.map.offsets.push(self.map.indices.len());
    }

    pub fn push_empty(&mut self) {
        self.map.offsets.push(self.map.indices.len());
    }

    pub fn rows_so_far(&self) -> usize {
        self.map.offsets.len() - 1
    }

    pub fn build(self) -> SparseMap {
        self.map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_is_adjoint() {
        let mut b = SparseMap::builder(3);
        b.push_row(&[(0, 0.5), (2, 0.5)]);
        b.push_empty();
        b.push_row(&[(1, 2.0)]);
        let s = b.build();
        let x = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = Mat::from_vec(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
        let lhs: f64 = s.apply(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(s.apply_transpose(&g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let inner = SparseMap::repeat_rows(2, 3);
        let outer = SparseMap::group_mean(2, 3);
        let x = Mat::from_vec(2, 1, vec![4.0, -1.0]);
        let direct = outer.apply(&inner.apply(&x));
        assert_eq!(outer.compose(&inner).apply(&x), direct);
        assert_eq!(direct, x);
    }
}
