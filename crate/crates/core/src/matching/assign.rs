use crate::error::{Error, Result};

/// Dense `rows × cols` cost matrix; either extent may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("cost matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&r| cols.iter().map(|&c| self.at(r, c)).collect())
            .collect()
    }
}

/// One-to-one assignment of queries (rows) to ground truths (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    /// `(query, gt)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    /// Queries left for the no-object class.
    pub unmatched: Vec<usize>,
}

impl MatchAssignment {
    fn from_choice(choice: &[Option<usize>]) -> Self {
        let mut pairs = Vec::new();
        let mut unmatched = Vec::new();
        for (q, c) in choice.iter().enumerate() {
            match c {
                Some(g) => pairs.push((q, *g)),
                None => unmatched.push(q),
            }
        }
        Self { pairs, unmatched }
    }

    /// Sum of matched costs, accumulated in query order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.at(q, g)).sum()
    }

    /// Ground truth matched to each query.
    pub fn gt_of_query(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

fn tie_tolerance(v: f64) -> f64 {
    1e-12 * (1.0 + v.abs())
}

/// Minimum total of a rectangular assignment problem covering
/// `min(rows, cols)` pairs, and for each row its column (if any).
fn kuhn_munkres(a: &[Vec<f64>]) -> (f64, Vec<Option<usize>>) {
    let n0 = a.len();
    let m0 = a.first().map_or(0, Vec::len);
    if n0 == 0 || m0 == 0 {
        return (0.0, vec![None; n0]);
    }
    let transposed = n0 > m0;
    let at = |i: usize, j: usize| if transposed { a[j][i] } else { a[i][j] };
    let (n, m) = if transposed { (m0, n0) } else { (n0, m0) };

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut choice = vec![None; n0];
    let mut total = 0.0;
    for (j, &pj) in p.iter().enumerate().take(m + 1).skip(1) {
        if pj != 0 {
            let (r, c) = if transposed {
                (j - 1, pj - 1)
            } else {
                (pj - 1, j - 1)
            };
            choice[r] = Some(c);
        }
    }
    for (r, c) in choice.iter().enumerate() {
        if let Some(c) = c {
            total += a[r][*c];
        }
    }
    (total, choice)
}

/// Optimal assignment of `min(N, M)` pairs. Among optimal assignments
/// (within a relative tolerance of 1e-12) the one whose per-query choice
/// vector is lexicographically smallest wins, with "unmatched" ordered after
/// every ground truth. This makes the result independent of solver internals.
pub fn hungarian_match(cost: &CostMatrix) -> MatchAssignment {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return MatchAssignment::from_choice(&vec![None; n]);
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let (best, _) = kuhn_munkres(&cost.submatrix(&all_rows, &all_cols));
    let limit = best + tie_tolerance(best);
    let max_unmatched = n.saturating_sub(m);

    let mut choice: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut used = vec![false; m];
    let mut fixed_cost = 0.0;
    let mut unmatched = 0;
    for q in 0..n {
        let rest_rows: Vec<usize> = (q + 1..n).collect();
        let mut options: Vec<Option<usize>> = (0..m).filter(|&g| !used[g]).map(Some).collect();
        if unmatched < max_unmatched {
            options.push(None);
        }
        let mut picked = None;
        for opt in options {
            let mut cols: Vec<usize> = (0..m).filter(|&g| !used[g]).collect();
            let here = match opt {
                Some(g) => {
                    cols.retain(|&c| c != g);
                    cost.at(q, g)
                }
                None => 0.0,
            };
            // the remaining rows must still be able to cover every remaining column
            if opt.is_none() && rest_rows.len() < cols.len() {
                continue;
            }
            let (sub, _) = kuhn_munkres(&cost.submatrix(&rest_rows, &cols));
            if fixed_cost + here + sub <= limit {
                picked = Some((opt, here));
                break;
            }
        }
        // the optimum itself is always admissible, so some option fits
        let (opt, here) = picked.expect("an optimal continuation exists");
        fixed_cost += here;
        match opt {
            Some(g) => used[g] = true,
            None => unmatched += 1,
        }
        choice.push(opt);
    }
    MatchAssignment::from_choice(&choice)
}

/// Exhaustive search over injections, same tie rule as [`hungarian_match`].
/// Errors if `min(N, M) > 8`.
pub fn brute_force_match(cost: &CostMatrix) -> Result<MatchAssignment> {
    let (n, m) = (cost.rows(), cost.cols());
    if n.min(m) > 8 {
        return Err(Error::Contract(format!(
            "brute-force matching is capped at min(N, M) = 8, got {n}x{m}"
        )));
    }
    let mut all = Vec::new();
    let mut cur = Vec::with_capacity(n);
    enumerate(n, m, &mut cur, &mut vec![false; m], &mut all);
    let totals: Vec<f64> = all
        .iter()
        .map(|c: &Vec<Option<usize>>| MatchAssignment::from_choice(c).total(cost))
        .collect();
    let best = totals.iter().cloned().fold(f64::INFINITY, f64::min);
    let best = if best.is_finite() { best } else { 0.0 };
    let limit = best + tie_tolerance(best);
    let idx = totals.iter().position(|&t| t <= limit).unwrap_or(0);
    Ok(MatchAssignment::from_choice(&all[idx]))
}

/// Lexicographic enumeration with gts before "unmatched".
fn enumerate(
    n: usize,
    m: usize,
    cur: &mut Vec<Option<usize>>,
    used: &mut [bool],
    out: &mut Vec<Vec<Option<usize>>>,
) {
    let q = cur.len();
    if q == n {
        out.push(cur.clone());
        return;
    }
    let matched = cur.iter().filter(|c| c.is_some()).count();
    let need = n.min(m) - matched;
    let left = n - q;
    for g in 0..m {
        if !used[g] && need > 0 {
            used[g] = true;
            cur.push(Some(g));
            enumerate(n, m, cur, used, out);
            cur.pop();
            used[g] = false;
        }
    }
    if left > need {
        cur.push(None);
        enumerate(n, m, cur, used, out);
        cur.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, rng: &mut ChaCha8Rng) -> CostMatrix {
        CostMatrix::new(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = hungarian_match(&c);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total(&c), 2.0);
    }

    #[test]
    fn single_pair_is_forced() {
        let c = CostMatrix::from_rows(&[vec![7.5]]).unwrap();
        assert_eq!(hungarian_match(&c).pairs, vec![(0, 0)]);
        assert_eq!(brute_force_match(&c).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn zero_permutation_is_found() {
        let perm = [2, 0, 3, 1];
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..4)
                    .map(|j| {
                        if perm[i] == j {
                            0.0
                        } else {
                            1.0 + (i + j) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let c = CostMatrix::from_rows(&rows).unwrap();
        let b = brute_force_match(&c).unwrap();
        assert_eq!(b.pairs, vec![(0, 2), (1, 0), (2, 3), (3, 1)]);
        assert_eq!(b.total(&c), 0.0);
        assert_eq!(hungarian_match(&c), b);
    }

    #[test]
    fn ties_break_toward_lowest_pairs() {
        let c = CostMatrix::new(3, 3, vec![1.0; 9]).unwrap();
        assert_eq!(hungarian_match(&c).pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let wide = CostMatrix::new(4, 2, vec![0.0; 8]).unwrap();
        let a = hungarian_match(&wide);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.unmatched, vec![2, 3]);
        assert_eq!(brute_force_match(&wide).unwrap(), a);
    }

    #[test]
    fn empty_sides() {
        let c = CostMatrix::new(3, 0, vec![]).unwrap();
        let a = hungarian_match(&c);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched, vec![0, 1, 2]);
        assert_eq!(brute_force_match(&c).unwrap(), a);
    }

    #[test]
    fn brute_force_cap() {
        let c = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(brute_force_match(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn three_by_five_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..50 {
            let c = random(3, 5, &mut rng);
            assert_eq!(hungarian_match(&c), brute_force_match(&c).unwrap());
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random(n, m, &mut rng);
            let h = hungarian_match(&c);
            let b = brute_force_match(&c).unwrap();
            prop_assert_eq!(h.total(&c), b.total(&c));
            prop_assert_eq!(h.pairs.len(), n.min(m));
        }

        #[test]
        fn invariant_under_constant_shift(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=6, k in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random(n, m, &mut rng);
            prop_assert_eq!(hungarian_match(&c), hungarian_match(&c.map(|v| v + k)));
        }
    }
}
