//! Reverse-mode differentiation over an append-only tape.
//!
//! Every forward op appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product. `backward` walks the tape once in
//! reverse, so each node's gradient is accumulated exactly once.

mod conv;
pub mod ops;
mod sparse;

pub use conv::{conv_out_extent, Conv2dSpec};
pub use sparse::SparseMap;

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Recip(Var),
    WrapAngle(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    SumRows(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        offset: usize,
    },
    Concat(Vec<Var>),
    Sparse {
        x: Var,
        map: SparseMap,
    },
    Conv2d {
        x: Var,
        w: Var,
        spec: Conv2dSpec,
    },
    Depthwise {
        x: Var,
        w: Var,
        spec: Conv2dSpec,
    },
    RotatedIou {
        boxes: Var,
        rows: Vec<usize>,
        jac: Vec<[f64; 5]>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    seed: u64,
    mode: Mode,
    dropout_calls: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(0, Mode::Eval)
    }
}

impl Tape {
    pub fn new(seed: u64, mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            seed,
            mode,
            dropout_calls: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn next_dropout_call(&mut self) -> u64 {
        let c = self.dropout_calls;
        self.dropout_calls += 1;
        c
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(n.value.shape(), g).expect("gradient shape"),
                    None => Tensor::zeros(n.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::WrapAngle(a) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
            }
            Op::AddRow(a, b) => {
                let m = self.value(*b).len();
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for row in g.chunks(m) {
                        add_into(d, row);
                    }
                });
            }
            Op::AddCol(a, b) => {
                let n = self.value(*b).len();
                let m = g.len() / n;
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (r, row) in g.chunks(m).enumerate() {
                        d[r] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MulCol(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let m = g.len() / bv.len();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i / m];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..g.len() {
                        d[i / m] += g[i] * av[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let (_, m) = self.value(*b).dims2().unwrap();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G Bᵀ, dB = Aᵀ G
                self.accumulate(grads, *a, |d| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            d[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            let drow = &mut d[p * m..(p + 1) * m];
                            for j in 0..m {
                                drow[j] += a_ip * grow[j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                self.accumulate(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / av[i];
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        } else if av[i] < 0.0 {
                            d[i] -= g[i];
                        }
                    }
                });
            }
            Op::Recip(a) => self.accumulate(grads, *a, |d| {
                for i in 0..d.len() {
                    d[i] -= g[i] * out[i] * out[i];
                }
            }),
            Op::Softmax(a) => {
                let m = *node.value.shape().last().unwrap();
                self.accumulate(grads, *a, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(m).zip(out.chunks(m)).zip(g.chunks(m))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..m {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let m = *node.value.shape().last().unwrap();
                self.accumulate(grads, *a, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(m).zip(out.chunks(m)).zip(g.chunks(m))
                    {
                        let s: f64 = grow.iter().sum();
                        for j in 0..m {
                            drow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |d| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let cf = c as f64;
                    for (r, ((drow, grow), hrow)) in d
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let k = inv_std[r] / cf;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            drow[j] += k * (cf * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => self.accumulate(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * mask[i];
                }
            }),
            Op::Sum(a) => self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SumRows(a) => {
                let m = self.value(*a).len() / g.len();
                self.accumulate(grads, *a, |d| {
                    for (r, drow) in d.chunks_mut(m).enumerate() {
                        drow.iter_mut().for_each(|d| *d += g[r]);
                    }
                });
            }
            Op::Narrow { x, offset } => self.accumulate(grads, *x, |d| {
                add_into(&mut d[*offset..*offset + g.len()], g);
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Sparse { x, map } => self.accumulate(grads, *x, |d| map.transpose_apply(g, d)),
            Op::Conv2d { x, w, spec } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                self.accumulate(grads, *x, |d| conv::conv2d_grad_input(spec, wv, g, d));
                self.accumulate(grads, *w, |d| conv::conv2d_grad_weight(spec, xv, g, d));
            }
            Op::Depthwise { x, w, spec } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                self.accumulate(grads, *x, |d| conv::depthwise_grad_input(spec, wv, g, d));
                self.accumulate(grads, *w, |d| conv::depthwise_grad_weight(spec, xv, g, d));
            }
            Op::RotatedIou { boxes, rows, jac } => self.accumulate(grads, *boxes, |d| {
                for ((&r, j), gi) in rows.iter().zip(jac).zip(g) {
                    for p in 0..5 {
                        d[r * 5 + p] += gi * j[p];
                    }
                }
            }),
        }
    }

    /// Rotated IoU between rows of a `[N,5]` box tensor and fixed target boxes.
    ///
    /// Output is `[pairs.len()]`; the Jacobian w.r.t. each predicted row is
    /// computed in forward mode alongside the value.
    pub fn rotated_iou(&mut self, boxes: Var, pairs: &[(usize, RotatedBox)]) -> Result<Var> {
        let bv = self.value(boxes);
        let (n, five) = bv.dims2()?;
        if five != 5 {
            return Err(Error::Dimension(format!(
                "box tensor must be [N,5], got {:?}",
                bv.shape()
            )));
        }
        if pairs.is_empty() {
            return Err(Error::Dimension(
                "rotated_iou needs at least one pair".into(),
            ));
        }
        let mut vals = Vec::with_capacity(pairs.len());
        let mut jac = Vec::with_capacity(pairs.len());
        let mut rows = Vec::with_capacity(pairs.len());
        for (r, gt) in pairs {
            if *r >= n {
                return Err(Error::Dimension(format!("box row {r} out of range {n}")));
            }
            let p = bv.row(*r);
            let (iou, grad) = crate::geometry::iou_with_grad([p[0], p[1], p[2], p[3], p[4]], gt);
            vals.push(iou);
            jac.push(grad);
            rows.push(*r);
        }
        let value = Tensor::new(&[vals.len()], vals)?;
        Ok(self.push(value, Op::RotatedIou { boxes, rows, jac }, &[boxes]))
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
