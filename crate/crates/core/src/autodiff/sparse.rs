/// Fixed linear map `out[i] = Σ_j w_ij · in[j]` stored row-wise.
///
/// Bilinear resampling, ROI pooling and index gathers are all instances of
/// this, which gives them one shared (and already checked) backward rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    in_len: usize,
    out_shape: Vec<usize>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMap {
    pub fn new(in_len: usize, out_shape: &[usize], rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), out_shape.iter().product::<usize>());
        debug_assert!(rows.iter().flatten().all(|&(j, _)| j < in_len));
        Self {
            in_len,
            out_shape: out_shape.to_vec(),
            rows,
        }
    }

    /// Selects `indices` from a flat input.
    pub fn gather(in_len: usize, indices: &[usize]) -> Self {
        let rows = indices.iter().map(|&i| vec![(i, 1.0)]).collect();
        Self::new(in_len, &[indices.len()], rows)
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, w)| w * input[j]).sum())
            .collect()
    }

    pub fn transpose_apply(&self, grad: &[f64], out: &mut [f64]) {
        for (r, g) in self.rows.iter().zip(grad) {
            for &(j, w) in r {
                out[j] += w * g;
            }
        }
    }
}
