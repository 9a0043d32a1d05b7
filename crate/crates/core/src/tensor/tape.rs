//! Reverse-mode tape. Every operation computes its value eagerly and records
//! enough to replay its vector-Jacobian product in reverse order.

use alloc::vec;
use alloc::vec::Vec;

use super::conv::{self, Conv2dParams, ConvShape};
use super::norm::{self, BatchNormStats, NormMode};
use super::{dim_err, Tensor, TensorError, LOG_CLAMP};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
        cols: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Tanh {
        a: usize,
    },
    Softmax {
        a: usize,
        cols: usize,
    },
    CrossEntropy {
        probs: usize,
        label: usize,
    },
    Sum {
        a: usize,
    },
    AddN {
        parts: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        widths: Vec<usize>,
        rows: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        len: usize,
        cols: usize,
    },
    Reshape {
        a: usize,
    },
    ScaleRows {
        a: usize,
        p: usize,
        cols: usize,
    },
    SumRows {
        a: usize,
        cols: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        shape: ConvShape,
        params: Conv2dParams,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
        mode: NormMode,
    },
    LocationRows {
        x: usize,
        sample: usize,
        channels: usize,
        spatial: usize,
    },
    Embed {
        table: usize,
        indices: Vec<u32>,
        spatial: usize,
        channels: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Single-owner record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&cols) if cols > 0 => (shape.iter().product::<usize>() / cols, cols),
        _ => (1, shape.iter().product()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. It receives a gradient if `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(alloc::format!(
                "shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(dim_err("matmul needs two matrices"));
        };
        if k != k2 {
            return Err(dim_err(alloc::format!(
                "matmul inner extents differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let out = super::matmul_values(self.data(a), self.data(b), m, k, n);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.value(bias).numel() != cols {
            return Err(dim_err("bias length differs from last axis"));
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::AddBias {
                a: a.0,
                bias: bias.0,
                cols,
            },
            &[a, bias],
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a: a.0, factor }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh { a: a.0 })
    }

    /// Softmax over the last axis, row by row.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a));
        if cols == 0 {
            return Err(dim_err("softmax over an empty axis"));
        }
        let out = self
            .data(a)
            .chunks(cols)
            .flat_map(super::softmax_values)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax { a: a.0, cols }, &[a]))
    }

    /// `−ln(max(probs[label], 1e−12))` as a scalar.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var, TensorError> {
        let loss = super::cross_entropy_value(self.data(probs), label)?;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs: probs.0,
                label,
            },
            &[probs],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a: a.0 }, &[a])
    }

    /// Elementwise sum of equally shaped values.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| TensorError::Contract("add_n of nothing".into()))?;
        for &p in rest {
            self.same_shape(first, p)?;
        }
        let mut out = self.data(first).to_vec();
        for &p in rest {
            for (o, v) in out.iter_mut().zip(self.data(p)) {
                *o += v;
            }
        }
        let shape = self.shape(first).to_vec();
        let idx = parts.iter().map(|v| v.0).collect();
        Ok(self.push(shape, out, Op::AddN { parts: idx }, parts))
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let &first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let (rows, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let shape = self.shape(p);
            if shape.len() != lead.len() + 1 || shape[..lead.len()] != lead[..] {
                return Err(dim_err("concat leading extents differ"));
            }
            widths.push(*shape.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let idx = parts.iter().map(|v| v.0).collect();
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: idx,
                widths,
                rows,
            },
            parts,
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (_, cols) = rows_cols(self.shape(a));
        if start + len > cols {
            return Err(dim_err("slice past end of axis"));
        }
        let out = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(
            shape,
            out,
            Op::SliceCols {
                a: a.0,
                start,
                len,
                cols,
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.len() > super::MAX_RANK
        {
            return Err(dim_err("reshape changes element count"));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a: a.0 }, &[a]))
    }

    /// Multiplies row `j` of an `H×F` matrix by `p[j]`.
    pub fn scale_rows(&mut self, a: Var, p: Var) -> Result<Var, TensorError> {
        let &[rows, cols] = self.shape(a) else {
            return Err(dim_err("scale_rows needs a matrix"));
        };
        if self.value(p).numel() != rows {
            return Err(dim_err("row weights differ from row count"));
        }
        let w = self.data(p);
        let out = self
            .data(a)
            .chunks(cols)
            .zip(w)
            .flat_map(|(row, &pj)| row.iter().map(move |x| x * pj))
            .collect();
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::ScaleRows {
                a: a.0,
                p: p.0,
                cols,
            },
            &[a, p],
        ))
    }

    /// Sums the rows of an `H×F` matrix into a `1×F` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let &[_, cols] = self.shape(a) else {
            return Err(dim_err("sum_rows needs a matrix"));
        };
        let mut out = vec![0.0; cols];
        for row in self.data(a).chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.push(vec![1, cols], out, Op::SumRows { a: a.0, cols }, &[a]))
    }

    /// Dilated cross-correlation (no kernel flip) of `C×H×W` or `B×C×H×W`
    /// input with `C_out×C_in×kh×kw` kernels.
    pub fn conv2d(&mut self, x: Var, k: Var, params: Conv2dParams) -> Result<Var, TensorError> {
        let shape = ConvShape::infer(self.shape(x), self.shape(k), &params)?;
        let out = conv::forward(self.data(x), self.data(k), &shape, &params);
        let out_shape = if self.shape(x).len() == 3 {
            vec![shape.c_out, shape.out_h, shape.out_w]
        } else {
            vec![shape.batch, shape.c_out, shape.out_h, shape.out_w]
        };
        Ok(self.push(
            out_shape,
            out,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                shape,
                params,
            },
            &[x, k],
        ))
    }

    /// Batch normalization of `B×C×H×W` input. Train mode returns the batch
    /// statistics so the caller can update its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchNormStats>), TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::Parameter(
                "batch norm eps must be positive".into(),
            ));
        }
        let &[b, c, h, w] = self.shape(x) else {
            return Err(dim_err("batch norm input must be B×C×H×W"));
        };
        if b == 0 {
            return Err(dim_err("batch norm needs at least one sample"));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(dim_err("gamma/beta length differs from channel count"));
        }
        let running = match mode {
            NormMode::Train => None,
            NormMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    TensorError::Contract("eval-mode batch norm needs running statistics".into())
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(dim_err("running statistics differ from channel count"));
                }
                Some((rm, rv))
            }
        };
        let dims = (b, c, h * w);
        let fwd = norm::forward(
            self.data(x),
            dims,
            self.data(gamma),
            self.data(beta),
            eps,
            running,
        );
        let var = self.push(
            vec![b, c, h, w],
            fwd.out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat: fwd.x_hat,
                inv_std: fwd.inv_std,
                dims,
                mode,
            },
            &[x, gamma, beta],
        );
        Ok((var, fwd.stats))
    }

    /// Feature rows of one sample: `B×F×h×w` → `(h·w)×F`, row `j` being the
    /// spatial location `j` in row-major order.
    pub fn location_rows(&mut self, x: Var, sample: usize) -> Result<Var, TensorError> {
        let &[b, f, h, w] = self.shape(x) else {
            return Err(dim_err("location_rows needs B×F×h×w"));
        };
        if sample >= b {
            return Err(TensorError::Index {
                index: sample,
                extent: b,
            });
        }
        let spatial = h * w;
        let src = &self.data(x)[sample * f * spatial..(sample + 1) * f * spatial];
        let mut out = vec![0.0; spatial * f];
        for c in 0..f {
            for j in 0..spatial {
                out[j * f + c] = src[c * spatial + j];
            }
        }
        Ok(self.push(
            vec![spatial, f],
            out,
            Op::LocationRows {
                x: x.0,
                sample,
                channels: f,
                spatial,
            },
            &[x],
        ))
    }

    /// Looks up `B×H×W` cell indices in an `N×C` table, producing
    /// `B×C×H×W`. Index 0 is padding and maps to zeros; index `i ≥ 1` reads
    /// table row `i − 1`.
    pub fn embed(
        &mut self,
        table: Var,
        indices: &[u32],
        grid: (usize, usize, usize),
    ) -> Result<Var, TensorError> {
        let &[rows, channels] = self.shape(table) else {
            return Err(dim_err("embedding table must be N×C"));
        };
        let (b, h, w) = grid;
        let spatial = h * w;
        if indices.len() != b * spatial {
            return Err(dim_err("index grid size mismatch"));
        }
        let t = self.data(table);
        let mut out = vec![0.0; b * channels * spatial];
        for s in 0..b {
            for j in 0..spatial {
                let idx = indices[s * spatial + j] as usize;
                if idx == 0 {
                    continue;
                }
                if idx > rows {
                    return Err(TensorError::Index {
                        index: idx,
                        extent: rows + 1,
                    });
                }
                for c in 0..channels {
                    out[(s * channels + c) * spatial + j] = t[(idx - 1) * channels + c];
                }
            }
        }
        Ok(self.push(
            vec![b, channels, h, w],
            out,
            Op::Embed {
                table: table.0,
                indices: indices.to_vec(),
                spatial,
                channels,
            },
            &[table],
        ))
    }

    /// Populates gradients on every `requires_grad` leaf. Leaves the loss does
    /// not depend on receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.set_grad(g)?;
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf)
                && node.value.requires_grad()
                && node.value.grad().is_none()
            {
                let n = node.value.numel();
                node.value.set_grad(vec![0.0; n])?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let data = |j: usize| nodes[j].value.data();
        let out = nodes[i].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].tracked {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (data(a), data(b));
                // dA = dC·Bᵀ
                acc(a, &mut |da| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ·dC
                acc(b, &mut |db| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a_rp * gv;
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::AddBias { a, bias, cols } => {
                acc(a, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (data(a), data(b));
                acc(a, &mut |d| {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                acc(b, &mut |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            &Op::Scale { a, factor } => acc(a, &mut |d| {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }),
            &Op::Relu { a } => {
                let x = data(a);
                acc(a, &mut |d| {
                    for ((d, gv), &xv) in d.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            &Op::Sigmoid { a } => acc(a, &mut |d| {
                for ((d, gv), y) in d.iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            &Op::Tanh { a } => acc(a, &mut |d| {
                for ((d, gv), y) in d.iter_mut().zip(g).zip(out) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            &Op::Softmax { a, cols } => acc(a, &mut |d| {
                for ((drow, grow), yrow) in
                    d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((dv, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv += y * (gv - dot);
                    }
                }
            }),
            &Op::CrossEntropy { probs, label } => {
                let p = data(probs)[label];
                acc(probs, &mut |d| {
                    if p >= LOG_CLAMP {
                        d[label] -= g[0] / p;
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |d| {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::AddN { parts } => {
                for &p in parts {
                    acc(p, &mut |d| add_into(d, g));
                }
            }
            Op::Concat {
                parts,
                widths,
                rows,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    acc(p, &mut |d| {
                        for r in 0..*rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut d[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SliceCols {
                a,
                start,
                len,
                cols,
            } => acc(a, &mut |d| {
                for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(len)) {
                    add_into(&mut drow[start..start + len], grow);
                }
            }),
            &Op::Reshape { a } => acc(a, &mut |d| add_into(d, g)),
            &Op::ScaleRows { a, p, cols } => {
                let (av, pv) = (data(a), data(p));
                acc(a, &mut |d| {
                    for ((drow, grow), &pj) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(pv) {
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += gv * pj;
                        }
                    }
                });
                acc(p, &mut |d| {
                    for ((dj, grow), arow) in d.iter_mut().zip(g.chunks(cols)).zip(av.chunks(cols))
                    {
                        *dj += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            &Op::SumRows { a, cols } => acc(a, &mut |d| {
                for drow in d.chunks_mut(cols) {
                    add_into(drow, g);
                }
            }),
            &Op::Conv2d {
                x,
                k,
                shape,
                params,
            } => {
                let (dx, dk) = conv::backward(
                    data(x),
                    data(k),
                    g,
                    &shape,
                    &params,
                    nodes[x].tracked,
                    nodes[k].tracked,
                );
                if let Some(dx) = dx {
                    acc(x, &mut |d| add_into(d, &dx));
                }
                if let Some(dk) = dk {
                    acc(k, &mut |d| add_into(d, &dk));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                dims,
                mode,
            } => {
                let grads_bn = norm::backward(g, x_hat, inv_std, data(*gamma), *dims, *mode);
                acc(*x, &mut |d| add_into(d, &grads_bn.dx));
                acc(*gamma, &mut |d| add_into(d, &grads_bn.dgamma));
                acc(*beta, &mut |d| add_into(d, &grads_bn.dbeta));
            }
            &Op::LocationRows {
                x,
                sample,
                channels,
                spatial,
            } => acc(x, &mut |d| {
                let base = sample * channels * spatial;
                for c in 0..channels {
                    for j in 0..spatial {
                        d[base + c * spatial + j] += g[j * channels + c];
                    }
                }
            }),
            Op::Embed {
                table,
                indices,
                spatial,
                channels,
            } => acc(*table, &mut |d| {
                for (pos, &idx) in indices.iter().enumerate() {
                    if idx == 0 {
                        continue;
                    }
                    let (s, j) = (pos / spatial, pos % spatial);
                    let row = (idx as usize - 1) * channels;
                    for c in 0..*channels {
                        d[row + c] += g[(s * channels + c) * spatial + j];
                    }
                }
            }),
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), Some(&[6.0][..]));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x·x + 2x  ⇒ dy/dx = 2x + 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let two_x = tape.scale(x, 2.0);
        let y = tape.add(sq, two_x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), Some(&[5.0][..]));
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.scale(c, 2.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(&[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(w), Err(TensorError::Contract(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::matrix(1, 2, &[1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, &[3.0, 4.0]).unwrap());
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(p), &[11.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::matrix(3, 2, &[1.0, -2.0, 3.5, 4.0, 5.0, 6.0]).unwrap());
        let p = tape.matmul(z, any).unwrap();
        assert_eq!(tape.data(p), &[0.0; 4]);

        assert!(matches!(
            tape.matmul(m, any),
            Err(TensorError::Dimension(_))
        ));
    }

    #[test]
    fn sum_of_product_gradient() {
        // loss = sum(A·B) ⇒ dA = ones·Bᵀ
        let mut tape = Tape::new();
        let a = tape.leaf(
            Tensor::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .with_grad(),
        );
        let b = tape.constant(Tensor::matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        // row sums of B: 6, 15
        assert_eq!(tape.grad(a), Some(&[6.0, 15.0, 6.0, 15.0][..]));
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.data(s)[1], 0.5);
        let t = tape.tanh(x);
        assert_eq!(tape.data(t)[1], 0.0);
        let l3 = tape.constant(Tensor::scalar(math::ln(3.0)));
        let s3 = tape.sigmoid(l3);
        assert!((tape.data(s3)[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[0.0, 1.0]).with_grad());
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[0.0, 1.0][..]));
    }

    #[test]
    fn embedding_skips_padding() {
        let mut tape = Tape::new();
        let table = tape.leaf(
            Tensor::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .with_grad(),
        );
        let e = tape.embed(table, &[0, 2, 1], (1, 1, 3)).unwrap();
        assert_eq!(tape.shape(e), &[1, 2, 1, 3]);
        // channel 0 then channel 1
        assert_eq!(tape.data(e), &[0.0, 3.0, 1.0, 0.0, 4.0, 2.0]);
        assert!(tape.embed(table, &[3, 0, 0], (1, 1, 3)).is_err());
        let loss = tape.sum(e);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table), Some(&[1.0, 1.0, 1.0, 1.0][..]));
    }

    #[test]
    fn location_rows_transposes_channels() {
        let mut tape = Tape::new();
        // B=2, F=2, h=1, w=2
        let x = tape.constant(Tensor::new(&[2, 2, 1, 2], (0..8).map(f64::from).collect()).unwrap());
        let a = tape.location_rows(x, 1).unwrap();
        assert_eq!(tape.shape(a), &[2, 2]);
        assert_eq!(tape.data(a), &[4.0, 6.0, 5.0, 7.0]);
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::vector(&[1.0]));
        let b = tape.constant(Tensor::vector(&[0.0]));
        let (y, stats) = tape
            .batch_norm(x, g, b, 1e-12, NormMode::Train, None)
            .unwrap();
        let y = tape.data(y);
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
        let stats = stats.unwrap();
        assert_eq!((stats.mean[0], stats.var[0], stats.count), (2.0, 1.0, 2));

        let g0 = tape.constant(Tensor::vector(&[0.0]));
        let b7 = tape.constant(Tensor::vector(&[7.0]));
        let (y, _) = tape
            .batch_norm(x, g0, b7, 1e-5, NormMode::Train, None)
            .unwrap();
        assert_eq!(tape.data(y), &[7.0, 7.0]);

        let (y, stats) = tape
            .batch_norm(x, g, b, 1e-12, NormMode::Eval, Some((&[0.0], &[1.0])))
            .unwrap();
        assert!(stats.is_none());
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-9 && (tape.data(y)[1] - 3.0).abs() < 1e-9);

        assert!(matches!(
            tape.batch_norm(x, g, b, 0.0, NormMode::Train, None),
            Err(TensorError::Parameter(_))
        ));
    }

    #[test]
    fn running_stats_update() {
        let stats = BatchNormStats {
            mean: vec![2.0],
            var: vec![1.0],
            count: 2,
        };
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        stats.update_running(&mut rm, &mut rv, 0.1);
        assert!((rm[0] - 0.2).abs() < 1e-15);
        // unbiased var = 2
        assert!((rv[0] - 1.1).abs() < 1e-15);
    }
}
