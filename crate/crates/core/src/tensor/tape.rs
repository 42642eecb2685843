//! Dynamic, single-use reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is one reverse sweep. A tape can be swept
//! once; a second call returns [`Error::Contract`].

use super::{axis_split, broadcast_index, broadcast_shape, matmul_kernel, softmax_kernel, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    ConcatLastAxis,
}

/// Broadcast bookkeeping for binary ops: `None` when both shapes are equal.
#[derive(Debug)]
struct BinaryMap {
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, BinaryMap),
    Sub(Var, Var, BinaryMap),
    Mul(Var, Var, BinaryMap),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    VStack(Vec<Var>),
    Softmax(Var, usize),
    ReduceMax(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Scale(Var, f64),
    Nll(Var, usize),
    Gru(Box<GruCache>),
}

/// Forward intermediates of a fused GRU layer, rows in input order.
/// Adds into the gradient buffer of a variable.
type GradSink<'a> = dyn FnMut(Var, &mut dyn FnMut(&mut [f64])) + 'a;

#[derive(Debug)]
struct GruCache {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    reverse: bool,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// `h_prev · W_hh + b_hh` restricted to the candidate gate.
    hn: Vec<f64>,
    h_prev: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    swept: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that receives a gradient.
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

    /// Gradient of the swept loss with respect to `v`; `None` before
    /// `backward` or when `v` does not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if operands.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "{kind:?} takes {n} operand(s), got {}",
                    operands.len()
                )))
            }
        };
        match kind {
            Elementwise::Add => {
                arity(2)?;
                self.add(operands[0], operands[1])
            }
            Elementwise::Sub => {
                arity(2)?;
                self.sub(operands[0], operands[1])
            }
            Elementwise::Mul => {
                arity(2)?;
                self.mul(operands[0], operands[1])
            }
            Elementwise::Tanh => {
                arity(1)?;
                Ok(self.tanh(operands[0]))
            }
            Elementwise::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(operands[0]))
            }
            Elementwise::ConcatLastAxis => self.concat(operands),
        }
    }

    fn binary_map(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, BinaryMap)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), BinaryMap { a: None, b: None }));
        }
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::Dimension {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let ma = (sa != out.as_slice()).then(|| broadcast_index(sa, &out));
        let mb = (sb != out.as_slice()).then(|| broadcast_index(sb, &out));
        Ok((out, BinaryMap { a: ma, b: mb }))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, BinaryMap) -> Op,
    ) -> Result<Var> {
        let (shape, map) = self.binary_map(name, a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = av[map.a.as_ref().map_or(i, |m| m[i])];
                let y = bv[map.b.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, make(a, b, map)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        let rg = self.requires_grad(x);
        self.push(value, rg, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, vars: &[Var]) -> Result<Var> {
        let Some(&first) = vars.first() else {
            return Err(Error::EmptySequence("concat"));
        };
        let lead = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(vars.len());
        for &v in vars {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in vars.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(vars);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Concat(vars.to_vec())))
    }

    /// Stacks rank-2 blocks (or rank-1 rows) along axis 0.
    pub fn vstack(&mut self, vars: &[Var]) -> Result<Var> {
        let Some(&first) = vars.first() else {
            return Err(Error::EmptySequence("vstack"));
        };
        let cols = *self.shape(first).last().unwrap_or(&1);
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in vars {
            let t = self.value(v);
            let (r, c) = match t.shape() {
                &[c] => (1, c),
                &[r, c] => (r, c),
                s => {
                    return Err(Error::Dimension {
                        op: "vstack",
                        lhs: vec![0, cols],
                        rhs: s.to_vec(),
                    })
                }
            };
            if c != cols {
                return Err(Error::Dimension {
                    op: "vstack",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let rg = self.any_grad(vars);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], data),
            rg,
            Op::VStack(vars.to_vec()),
        ))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Domain(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let data = softmax_kernel(t.data(), t.shape(), axis);
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Softmax(x, axis)))
    }

    /// Coordinate-wise max over the rows of an `N×d` tensor (a rank-1 input is
    /// treated as `N×1`), producing a length-`d` vector. Ties pick the lowest row.
    pub fn reduce_max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = match t.shape() {
            &[n] => (n, 1),
            &[n, d] => (n, d),
            s => {
                return Err(Error::Dimension {
                    op: "reduce_max",
                    lhs: s.to_vec(),
                    rhs: vec![0, 0],
                })
            }
        };
        if n == 0 {
            return Err(Error::EmptySequence("reduce_max"));
        }
        let data = t.data();
        let mut best = data[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..n {
            for j in 0..d {
                let v = data[i * d + j];
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(vec![d], best), rg, Op::ReduceMax(x, argmax)))
    }

    /// Rows `ids` of a `V×d` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2()?;
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocab { id, size: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            rg,
            Op::Gather(table, ids.to_vec()),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::Domain(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(vec![len, c], data), rg, Op::SliceRows(x, start)))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::Domain(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_parts(vec![r, len], data), rg, Op::SliceCols(x, start)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    /// `-ln(max(p[index], 1e-12))` for a flat probability tensor.
    pub fn nll(&mut self, probs: Var, index: usize) -> Result<Var> {
        let t = self.value(probs);
        if index >= t.numel() {
            return Err(Error::Domain(format!(
                "class index {index} out of range for {} classes",
                t.numel()
            )));
        }
        let loss = -t.data()[index].max(NLL_FLOOR).ln();
        let rg = self.requires_grad(probs);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Nll(probs, index)))
    }

    /// Single-direction GRU over the rows of `x` (`N×in`) as one node.
    /// Gate blocks of `w_ih` (`in×3h`), `w_hh` (`h×3h`) and the biases are
    /// ordered update, reset, candidate:
    /// `z = σ(x W_z + h W'_z)`, `r = σ(x W_r + h W'_r)`,
    /// `n = tanh(x W_n + r ⊙ (h W'_n))`, `h' = n + z ⊙ (h − n)` (biases omitted).
    /// Returns `N×h` states in input order; `reverse` runs from the last row.
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        let ok = xs.len() == 2
            && wi.len() == 2
            && wh.len() == 2
            && wi[0] == xs[1]
            && wh[1] == 3 * wh[0]
            && wi[1] == wh[1]
            && self.shape(b_ih) == [wh[1]]
            && self.shape(b_hh) == [wh[1]];
        if !ok {
            return Err(Error::Dimension {
                op: "gru",
                lhs: xs,
                rhs: wi.into_iter().chain(wh).collect(),
            });
        }
        let (steps, input, h) = (xs[0], xs[1], wh[0]);
        let h3 = 3 * h;
        let mut xw = matmul_kernel(self.value(x).data(), self.value(w_ih).data(), steps, input, h3);
        let bi = self.value(b_ih).data();
        for row in xw.chunks_mut(h3) {
            row.iter_mut().zip(bi).for_each(|(v, b)| *v += b);
        }
        let whh = self.value(w_hh).data();
        let bh = self.value(b_hh).data();
        let size = steps * h;
        let (mut z, mut r, mut n, mut hn, mut h_prev) = (
            vec![0.0; size],
            vec![0.0; size],
            vec![0.0; size],
            vec![0.0; size],
            vec![0.0; size],
        );
        let mut out = vec![0.0; size];
        let mut state = vec![0.0; h];
        let mut hw = vec![0.0; h3];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            hw.copy_from_slice(bh);
            for (i, &hv) in state.iter().enumerate() {
                if hv != 0.0 {
                    let wrow = &whh[i * h3..(i + 1) * h3];
                    hw.iter_mut().zip(wrow).for_each(|(a, w)| *a += hv * w);
                }
            }
            let xt = &xw[t * h3..(t + 1) * h3];
            let o = t * h;
            h_prev[o..o + h].copy_from_slice(&state);
            for j in 0..h {
                let zj = sigmoid(xt[j] + hw[j]);
                let rj = sigmoid(xt[h + j] + hw[h + j]);
                let nj = (xt[2 * h + j] + rj * hw[2 * h + j]).tanh();
                z[o + j] = zj;
                r[o + j] = rj;
                n[o + j] = nj;
                hn[o + j] = hw[2 * h + j];
                state[j] = nj + zj * (state[j] - nj);
            }
            out[o..o + h].copy_from_slice(&state);
        }
        let rg = self.any_grad(&[x, w_ih, w_hh, b_ih, b_hh]);
        let cache = GruCache {
            x,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            reverse,
            z,
            r,
            n,
            hn,
            h_prev,
        };
        Ok(self.push(Tensor::from_parts(vec![steps, h], out), rg, Op::Gru(Box::new(cache))))
    }

    /// Sweeps the tape once from the scalar `loss`, filling gradients of every
    /// node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::Contract(
                "backward already ran on this tape; tapes are single-use".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.swept = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(*a, &mut |ga| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        for t in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[t * n + j];
                            }
                            ga[i * k + t] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ · dC
                    let at = av.transpose().expect("rank-2");
                    let prod = matmul_kernel(at.data(), g, k, m, n);
                    for (d, p) in gb.iter_mut().zip(prod) {
                        *d += p;
                    }
                });
            }
            Op::Add(a, b, map) => {
                acc(*a, &mut |ga| scatter(ga, g, map.a.as_deref(), |_| 1.0));
                acc(*b, &mut |gb| scatter(gb, g, map.b.as_deref(), |_| 1.0));
            }
            Op::Sub(a, b, map) => {
                acc(*a, &mut |ga| scatter(ga, g, map.a.as_deref(), |_| 1.0));
                acc(*b, &mut |gb| scatter(gb, g, map.b.as_deref(), |_| -1.0));
            }
            Op::Mul(a, b, map) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let pick = |vals: &[f64], m: &Option<Vec<usize>>, i: usize| vals[m.as_ref().map_or(i, |m| m[i])];
                acc(*a, &mut |ga| scatter(ga, g, map.a.as_deref(), |i| pick(bv, &map.b, i)));
                acc(*b, &mut |gb| scatter(gb, g, map.b.as_deref(), |i| pick(av, &map.a, i)));
            }
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Scale(x, factor) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * factor;
                }
            }),
            Op::Concat(vars) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / total;
                let mut off = 0;
                for &v in vars {
                    let w = *self.shape(v).last().unwrap();
                    acc(v, &mut |gv| {
                        for r in 0..rows {
                            for c in 0..w {
                                gv[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::VStack(vars) => {
                let mut off = 0;
                for &v in vars {
                    let n = self.value(v).numel();
                    acc(v, &mut |gv| {
                        for i in 0..n {
                            gv[i] += g[off + i];
                        }
                    });
                    off += n;
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::ReduceMax(x, argmax) => {
                let d = argmax.len();
                acc(*x, &mut |gx| {
                    for (j, &i) in argmax.iter().enumerate() {
                        gx[i * d + j] += g[j];
                    }
                });
            }
            Op::Gather(table, ids) => {
                let d = self.value(*table).shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i];
                }
            }),
            Op::SliceRows(x, start) => {
                let c = node.value.shape()[1];
                acc(*x, &mut |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        gx[start * c + i] += gv;
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
                let c = self.shape(*x)[1];
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Nll(p, index) => {
                let pv = self.value(*p).data()[*index];
                acc(*p, &mut |gp| {
                    if pv > NLL_FLOOR {
                        gp[*index] -= g[0] / pv;
                    }
                });
            }
            Op::Gru(c) => self.gru_backward(c, g, &mut acc),
        }
    }

    fn gru_backward(&self, c: &GruCache, g: &[f64], acc: &mut GradSink<'_>) {
        let x = self.value(c.x);
        let (steps, input) = (x.shape()[0], x.shape()[1]);
        let h = self.shape(c.w_hh)[0];
        let h3 = 3 * h;
        let whh = self.value(c.w_hh).data();
        // gradients of the gate pre-activations: input side and recurrent side
        let mut dxw = vec![0.0; steps * h3];
        let mut dhw = vec![0.0; steps * h3];
        let mut carry = vec![0.0; h];
        for k in (0..steps).rev() {
            let t = if c.reverse { steps - 1 - k } else { k };
            let o = t * h;
            let mut dh_prev = vec![0.0; h];
            for j in 0..h {
                let dh = g[o + j] + carry[j];
                let (z, r, n, hp) = (c.z[o + j], c.r[o + j], c.n[o + j], c.h_prev[o + j]);
                let dn = dh * (1.0 - z);
                let dz = dh * (hp - n);
                dh_prev[j] = dh * z;
                let dan = dn * (1.0 - n * n);
                let dr = dan * c.hn[o + j];
                let daz = dz * z * (1.0 - z);
                let dar = dr * r * (1.0 - r);
                let row = t * h3;
                dxw[row + j] = daz;
                dxw[row + h + j] = dar;
                dxw[row + 2 * h + j] = dan;
                dhw[row + j] = daz;
                dhw[row + h + j] = dar;
                dhw[row + 2 * h + j] = dan * r;
            }
            let row = &dhw[t * h3..(t + 1) * h3];
            for (i, dp) in dh_prev.iter_mut().enumerate() {
                let wrow = &whh[i * h3..(i + 1) * h3];
                *dp += wrow.iter().zip(row).map(|(w, d)| w * d).sum::<f64>();
            }
            carry = dh_prev;
        }
        acc(c.x, &mut |gx| {
            let w = self.value(c.w_ih).data();
            for t in 0..steps {
                let d = &dxw[t * h3..(t + 1) * h3];
                for i in 0..input {
                    let wrow = &w[i * h3..(i + 1) * h3];
                    gx[t * input + i] += wrow.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        });
        acc(c.w_ih, &mut |gw| {
            let xv = x.data();
            for t in 0..steps {
                let d = &dxw[t * h3..(t + 1) * h3];
                for i in 0..input {
                    let xi = xv[t * input + i];
                    if xi != 0.0 {
                        gw[i * h3..(i + 1) * h3]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(a, b)| *a += xi * b);
                    }
                }
            }
        });
        acc(c.w_hh, &mut |gw| {
            for t in 0..steps {
                let d = &dhw[t * h3..(t + 1) * h3];
                for i in 0..h {
                    let hp = c.h_prev[t * h + i];
                    if hp != 0.0 {
                        gw[i * h3..(i + 1) * h3]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(a, b)| *a += hp * b);
                    }
                }
            }
        });
        acc(c.b_ih, &mut |gb| {
            for d in dxw.chunks(h3) {
                gb.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
        });
        acc(c.b_hh, &mut |gb| {
            for d in dhw.chunks(h3) {
                gb.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
        });
    }
}

/// Accumulates `g[i] * scale(i)` into `dst`, through a broadcast map if present.
fn scatter(dst: &mut [f64], g: &[f64], map: Option<&[usize]>, scale: impl Fn(usize) -> f64) {
    match map {
        None => {
            for i in 0..g.len() {
                dst[i] += g[i] * scale(i);
            }
        }
        Some(m) => {
            for i in 0..g.len() {
                dst[m[i]] += g[i] * scale(i);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn v(values: &[f64]) -> Tensor {
        Tensor::vector(values.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(v(&[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let expected = [0.0900, 0.2447, 0.6652];
        for (a, b) in tape.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4);
        }

        let x = tape.constant(v(&[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.value(y).data();
        assert!(out.iter().all(|p| p.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[1.0]));
        assert!(matches!(tape.softmax(x, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_along_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 5.0], &[1.0, -5.0]]));
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.value(y);
        assert!((out.at(0, 0) - 0.5).abs() < 1e-12);
        assert!((out.at(0, 1) + out.at(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reduce_max_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, -2.0], &[3.0, 0.0]]));
        let m = tape.reduce_max(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 0.0]);

        let x = tape.constant(t(&[&[5.0, -1.0]]));
        let m = tape.reduce_max(x).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, -1.0]);

        let x = tape.constant(t(&[&[1.0, -2.0], &[3.0, 0.0], &[1.0, -2.0]]));
        let m = tape.reduce_max(x).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 0.0]);
    }

    #[test]
    fn reduce_max_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[2.0], &[2.0]]));
        let m = tape.reduce_max(x).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(v(&[1.0, 2.0]));
        let b = tape.constant(v(&[3.0, 4.0]));
        let c = tape.elementwise(Elementwise::Add, &[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

        let z = tape.constant(v(&[0.0]));
        let th = tape.elementwise(Elementwise::Tanh, &[z]).unwrap();
        assert_eq!(tape.value(th).data(), &[0.0]);

        let p = tape.constant(v(&[1.0]));
        let q = tape.constant(v(&[2.0, 3.0]));
        let cat = tape.elementwise(Elementwise::ConcatLastAxis, &[p, q]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0]);

        let bad = tape.constant(v(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, bad), Err(Error::Dimension { .. })));
        assert!(tape.elementwise(Elementwise::Tanh, &[a, b]).is_err());
    }

    #[test]
    fn gather_rows_examples() {
        let mut tape = Tape::new();
        let table = tape.param(t(&[&[1.0, 1.0], &[2.0, 2.0]]));
        let g = tape.gather_rows(table, &[1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, 2.0, 1.0, 1.0]);
        assert!(matches!(
            tape.gather_rows(table, &[5]),
            Err(Error::OutOfVocab { id: 5, size: 2 })
        ));

        let twice = tape.gather_rows(table, &[0, 0]).unwrap();
        let s = tape.sum(twice);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_linear_gives_weights() {
        let mut tape = Tape::new();
        let w = tape.constant(v(&[0.5, -1.5, 2.0]));
        let x = tape.param(v(&[3.0, 1.0, -4.0]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, -1.5, 2.0]);
        assert_eq!(tape.grad(loss).unwrap(), &[1.0]);
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_of_normalised_sum_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(v(&[0.3, -1.2, 2.5, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(v(&[1.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(v(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let m = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let b = tape.param(v(&[10.0, 20.0]));
        let c = tape.param(t(&[&[1.0], &[2.0], &[3.0]]));
        let s = tape.add(m, b).unwrap();
        let s = tape.mul(s, c).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0, 26.0, 48.0, 45.0, 78.0]);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[6.0, 6.0]);
        assert_eq!(tape.grad(c).unwrap(), &[33.0, 37.0, 41.0]);
    }
}
