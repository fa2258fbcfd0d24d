use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::geometry::normalize_angle;
use crate::tensor::Tensor;

use super::{Mode, Op, SparseMap, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Survivor mask for one dropout invocation: `0` or `1/(1−rate)` per element.
///
/// The generator is keyed by `(seed, call)` so a replayed tape draws the
/// same masks in the same order.
pub fn dropout_mask(len: usize, rate: f64, seed: u64, call: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(call);
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

impl Tape {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape(), data).expect("binary op shape");
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// `a[N,M] + b[M]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = *self.shape(a).last().unwrap();
        if self.value(b).len() != m {
            return dim_err(format!(
                "add_row: {:?} vs row of {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(m) {
            row.iter_mut().zip(&bv).for_each(|(x, y)| *x += y);
        }
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    /// `a[N,M] + b[N]`, broadcasting `b` over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.col_dims(a, b, "add_col")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (r, row) in out.data_mut().chunks_mut(m).enumerate().take(n) {
            row.iter_mut().for_each(|x| *x += bv[r]);
        }
        Ok(self.push(out, Op::AddCol(a, b), &[a, b]))
    }

    /// `a[N,M] * b[N]`, scaling each row.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, m) = self.col_dims(a, b, "mul_col")?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (r, row) in out.data_mut().chunks_mut(m).enumerate() {
            row.iter_mut().for_each(|x| *x *= bv[r]);
        }
        Ok(self.push(out, Op::MulCol(a, b), &[a, b]))
    }

    fn col_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (n, m) = self.value(a).dims2()?;
        if self.value(b).len() != n {
            return dim_err(format!(
                "{what}: {:?} vs column of {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok((n, m))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err(format!("matmul: [{n},{k}] x [{k2},{m}]"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a_ip = av[i * k + p];
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a_ip * bv;
                }
            }
        }
        let out = Tensor::new(&[n, m], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let out = Tensor::new(&[c, r], out)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// `x W + b` for `x[N,C_in]`, `W[C_in,C_out]`, `b[C_out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), f64::recip)
    }

    /// Wraps angles into `[−π/2, π/2)`; locally the identity.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        self.unary(a, Op::WrapAngle(a), normalize_angle)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let m = *self.shape(a).last().unwrap();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(m) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let m = *self.shape(a).last().unwrap();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return dim_err(format!(
                "layer_norm: last axis {c}, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if self.mode() == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let call = self.next_dropout_call();
        let mask = dropout_mask(self.value(x).len(), rate, self.seed(), call)?;
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, m)| *v *= m);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis: `[N,M] → [N]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = *self.shape(a).last().unwrap();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(m)
            .map(|r| r.iter().sum())
            .collect();
        let out = Tensor::new(&[data.len()], data).expect("sum_rows shape");
        self.push(out, Op::SumRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Contiguous flat slice `[offset, offset + Π shape)` reshaped to `shape`.
    pub fn narrow(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let av = self.value(a);
        if offset + n > av.len() {
            return dim_err(format!(
                "narrow: [{offset}, {}) out of {} elements",
                offset + n,
                av.len()
            ));
        }
        let out = Tensor::new(shape, av.data()[offset..offset + n].to_vec())?;
        Ok(self.push(out, Op::Narrow { x: a, offset }, &[a]))
    }

    /// Rows `[start, start + len)` of a 2-D tensor.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.value(a).dims2()?;
        self.narrow(a, start * c, &[len, c])
    }

    /// Flat concatenation, reshaped to `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = 0;
        let mut cols = None;
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if *cols.get_or_insert(c) != c {
                return dim_err("concat_rows: column counts differ");
            }
            rows += r;
        }
        let cols = cols.ok_or_else(|| Error::Dimension("concat_rows: no inputs".into()))?;
        self.concat(parts, &[rows, cols])
    }

    pub fn sparse(&mut self, x: Var, map: SparseMap) -> Result<Var> {
        if self.value(x).len() != map.in_len() {
            return dim_err(format!(
                "sparse map expects {} inputs, got {}",
                map.in_len(),
                self.value(x).len()
            ));
        }
        let out = Tensor::new(map.out_shape(), map.apply(self.value(x).data()))?;
        Ok(self.push(out, Op::Sparse { x, map }, &[x]))
    }

    /// Picks flat elements by index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return dim_err(format!("gather index {bad} out of range {n}"));
        }
        self.sparse(x, SparseMap::gather(n, indices))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
