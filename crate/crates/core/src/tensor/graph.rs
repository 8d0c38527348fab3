//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter the
//! tape through [`Graph::param`]; [`Graph::backward`] accumulates their
//! gradients into the owning [`ParamStore`].

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{attend_head, matmul_rows, softmax_row};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul {
        x: Var,
        w: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    ScalarMul {
        a: Var,
        s: Var,
    },
    Exp {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        heads: usize,
        batch: usize,
        lq: usize,
        lk: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        a: Var,
    },
    BmmBt {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        n: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.requires_grad);
        self.params.insert(id, v);
        v
    }

    /// `x @ w` where `x` is `(..., k)` and `w` is `(k, n)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "matmul weight must be 2-d");
        let (k, n) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), k, "matmul inner dims {xs:?} x {ws:?}");
        let rows = self.value(x).rows();
        let out = matmul_rows(self.value(x).data(), self.value(w).data(), rows, k, n);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(shape, out).unwrap(), Op::MatMul { x, w, rows, k, n }, rg)
    }

    /// Adds a `(n)` bias to every row of `(..., n)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = self.value(x).last_dim();
        assert_eq!(self.value(b).len(), n, "bias length");
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias { x, b }, rg)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg)
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scalar_mul needs a scalar");
        let sv = self.value(s).item();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::ScalarMul { a, s }, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = f(*x));
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu { a },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_mut(n) {
            softmax_row(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let n = self.value(x).last_dim();
        let rows = self.value(x).rows();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), n, "layer norm gamma");
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let xr = self.value(x).row(r);
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (xr[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `(B, Lq, d)`, `k` and `v` are `(B, Lk, d)`; heads split `d`
    /// into contiguous slices. `key_mask` is `(B, Lk)`, true = attend.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], heads: usize) -> Var {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        assert_eq!(qs.len(), 3, "attention expects (B, L, d)");
        assert_eq!(ks, self.shape(v), "k/v shape mismatch");
        let (batch, lq, d) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        assert_eq!(ks[0], batch, "attention batch mismatch");
        assert_eq!(ks[2], d, "attention width mismatch");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        assert_eq!(key_mask.len(), batch * lk, "key mask size");
        let dh = d / heads;
        let mut out = vec![0.0; batch * lq * d];
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut head_out = vec![0.0; lq * dh];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    let pslice = &mut probs[((b * heads + h) * lq) * lk..((b * heads + h + 1) * lq) * lk];
                    attend_head(
                        |i, c| qd[(b * lq + i) * d + off + c],
                        |j, c| kd[(b * lk + j) * d + off + c],
                        |j, c| vd[(b * lk + j) * d + off + c],
                        &key_mask[b * lk..(b + 1) * lk],
                        lq,
                        dh,
                        pslice,
                        &mut head_out,
                    );
                    for i in 0..lq {
                        let dst = (b * lq + i) * d + off;
                        out[dst..dst + dh].copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(qs, out).unwrap(),
            Op::Attention {
                q,
                k,
                v,
                mask: key_mask.to_vec(),
                heads,
                batch,
                lq,
                lk,
                probs,
            },
            rg,
        )
    }

    /// Attention weights of the most recent [`Graph::attention`] node `att`,
    /// laid out `(B, heads, Lq, Lk)`.
    pub fn attention_probs(&self, att: Var) -> Option<&[f64]> {
        match &self.nodes[att.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Looks up rows of `table` (`(V, d)`); `shape` is the id layout.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Var {
        let ts = self.shape(table).to_vec();
        assert_eq!(ts.len(), 2, "embedding table must be 2-d");
        let d = ts[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < ts[0], "id {id} out of vocabulary range {}", ts[0]);
            out.extend_from_slice(self.value(table).row(id));
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let rg = self.rg(table);
        self.push(
            Tensor::new(oshape, out).unwrap(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Selects rows of `x` viewed as `(rows, d)`; result is `(idx.len(), d)`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let d = self.value(x).last_dim();
        let rows = self.value(x).rows();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < rows, "row {i} out of range {rows}");
            out.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![idx.len(), d], out).unwrap(),
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`(N, K)`). Rows with `None` targets are ignored; with no
    /// targets at all the loss is 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let k = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        assert_eq!(targets.len(), rows, "one target slot per logit row");
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * k..(r + 1) * k];
            let lrow = self.value(logits).row(r);
            let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lrow.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            softmax_row(row);
            if let Some(t) = *t {
                assert!(t < k, "target {t} out of range {k}");
                total += lse - lrow[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Batched `a @ b^T`: `(B, M, d) x (B, N, d) -> (B, M, N)`.
    pub fn bmm_bt(&mut self, a: Var, b: Var) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(as_.len(), 3, "bmm_bt expects 3-d");
        assert_eq!(as_[0], bs[0], "bmm_bt batch");
        assert_eq!(as_[2], bs[2], "bmm_bt width");
        let (batch, m, d, n) = (as_[0], as_[1], as_[2], bs[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bb in 0..batch {
            for i in 0..m {
                let ar = &ad[(bb * m + i) * d..(bb * m + i + 1) * d];
                for j in 0..n {
                    let br = &bd[(bb * n + j) * d..(bb * n + j + 1) * d];
                    out[(bb * m + i) * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![batch, m, n], out).unwrap(),
            Op::BmmBt { a, b, batch, m, n },
            rg,
        )
    }

    /// Inverted dropout. A no-op when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor::new(self.shape(x).to_vec(), mask).unwrap());
        self.mul(x, m)
    }

    /// Runs reverse-mode differentiation from the scalar `loss` and adds the
    /// resulting parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    /// Gradient of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul { x, w, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let go = &gout[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let wr = &wv[kk * n..(kk + 1) * n];
                            gx[r * k + kk] += go.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for r in 0..rows {
                        let go = &gout[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let xv = xv[r * k + kk];
                            if xv == 0.0 {
                                continue;
                            }
                            for (g, o) in gw[kk * n..(kk + 1) * n].iter_mut().zip(go) {
                                *g += xv * o;
                            }
                        }
                    }
                });
            }
            Op::AddBias { x, b } => {
                acc(*x, &mut |gx| add_into(gx, gout));
                let n = nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for row in gout.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| add_into(gb, gout));
            }
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for ((g, o), y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += o * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((g, o), x) in gb.iter_mut().zip(gout).zip(av) {
                        *g += o * x;
                    }
                });
            }
            Op::Scale { a, c } => {
                acc(*a, &mut |ga| {
                    for (g, o) in ga.iter_mut().zip(gout) {
                        *g += c * o;
                    }
                });
            }
            Op::ScalarMul { a, s } => {
                let sv = nodes[s.0].value.item();
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for (g, o) in ga.iter_mut().zip(gout) {
                        *g += sv * o;
                    }
                });
                acc(*s, &mut |gs| {
                    gs[0] += av.iter().zip(gout).map(|(x, o)| x * o).sum::<f64>();
                });
            }
            Op::Exp { a } => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((g, o), y) in ga.iter_mut().zip(gout).zip(y) {
                        *g += o * y;
                    }
                });
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((g, o), y) in ga.iter_mut().zip(gout).zip(y) {
                        *g += o * (1.0 - y * y);
                    }
                });
            }
            Op::Gelu { a } => {
                let xv = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((g, o), &x) in ga.iter_mut().zip(gout).zip(xv) {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *g += o * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                acc(*a, &mut |ga| {
                    for ((gr, orow), yr) in ga.chunks_mut(n).zip(gout.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = orow.iter().zip(yr).map(|(o, y)| o * y).sum();
                        for ((g, o), y) in gr.iter_mut().zip(orow).zip(yr) {
                            *g += y * (o - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let gv = nodes[gamma.0].value.data();
                acc(*x, &mut |gx| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let go = &gout[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dxh: Vec<f64> = go.iter().zip(gv).map(|(o, g)| o * g).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] += inv / n as f64 * (n as f64 * dxh[c] - s1 - xh[c] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (orow, xrow) in gout.chunks(n).zip(xhat.chunks(n)) {
                        for ((g, o), h) in gg.iter_mut().zip(orow).zip(xrow) {
                            *g += o * h;
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for orow in gout.chunks(n) {
                        add_into(gb, orow);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                batch,
                lq,
                lk,
                probs,
            } => {
                let (heads, batch, lq, lk) = (*heads, *batch, *lq, *lk);
                let d = node.value.last_dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qd = nodes[q.0].value.data();
                let kd = nodes[k.0].value.data();
                let vd = nodes[v.0].value.data();
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; lk];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        let p = &probs[((b * heads + h) * lq) * lk..((b * heads + h + 1) * lq) * lk];
                        for i in 0..lq {
                            let go = &gout[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                            let pi = &p[i * lk..(i + 1) * lk];
                            for j in 0..lk {
                                if !mask[b * lk + j] {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vr = &vd[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                                dp[j] = go.iter().zip(vr).map(|(a, b)| a * b).sum();
                                let gvr = &mut gv[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                                for (g, o) in gvr.iter_mut().zip(go) {
                                    *g += pi[j] * o;
                                }
                            }
                            let dot: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..lk {
                                let ds = pi[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let qi = (b * lq + i) * d + off;
                                let kj = (b * lk + j) * d + off;
                                for c in 0..dh {
                                    gq[qi + c] += ds * kd[kj + c];
                                    gk[kj + c] += ds * qd[qi + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |g| add_into(g, &gq));
                acc(*k, &mut |g| add_into(g, &gk));
                acc(*v, &mut |g| add_into(g, &gv));
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.last_dim();
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * d..(i + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let k = nodes[logits.0].value.last_dim();
                let w = gout[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..k {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * k + c] += w * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|g| *g += gout[0]));
            }
            Op::BmmBt { a, b, batch, m, n } => {
                let (batch, m, n) = (*batch, *m, *n);
                let d = nodes[a.0].value.last_dim();
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for bb in 0..batch {
                        for i in 0..m {
                            for j in 0..n {
                                let o = gout[(bb * m + i) * n + j];
                                if o == 0.0 {
                                    continue;
                                }
                                let br = (bb * n + j) * d;
                                let ar = (bb * m + i) * d;
                                for c in 0..d {
                                    ga[ar + c] += o * bd[br + c];
                                }
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for bb in 0..batch {
                        for i in 0..m {
                            for j in 0..n {
                                let o = gout[(bb * m + i) * n + j];
                                if o == 0.0 {
                                    continue;
                                }
                                let br = (bb * n + j) * d;
                                let ar = (bb * m + i) * d;
                                for c in 0..d {
                                    gb[br + c] += o * ad[ar + c];
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
