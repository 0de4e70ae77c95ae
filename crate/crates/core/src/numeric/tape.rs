//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every forward call appends one node; `backward` walks the nodes once, in
//! reverse order, pushing adjoints into their inputs. Node inputs always have
//! smaller indices than the node itself, so the record is topologically
//! sorted by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, View, ViewMut};
use super::params::{ParamId, ParamStore};
use super::rng::seeded;
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    ScaleBy { x: Var, s: Var },
    Relu { x: Var },
    Gelu { x: Var, slope: Vec<f64> },
    Softmax { x: Var, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Option<Var>, offset: Option<Var>, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    Slice { x: Var, offset: usize, len: usize, width: usize },
    Reshape { x: Var },
    SelectPosition { x: Var, batch: usize, len: usize, width: usize, pos: usize },
    BroadcastBatch { x: Var, batch: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    RowDot { v: Var, t: Var, batch: usize, n: usize, d: usize },
    Attention(Box<AttentionSaved>),
    CrossEntropy { probs: Var, labels: Vec<usize>, floor: f64 },
    Sum { x: Var },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    scale: f64,
    /// Softmax output, `[batch, heads, nq, nk]`.
    probs: Vec<f64>,
    /// Dropout multipliers on the attention weights, same layout as `probs`.
    keep: Option<Vec<f64>>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
    source: Option<ParamId>,
}

/// Whether stochastic ops are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train,
}

/// One computation record. Build it by calling the op methods, then call
/// [`Tape::backward`] once on a scalar output.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    finished: bool,
}

impl Tape {
    /// Evaluation-mode record: dropout is a pass-through.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Eval,
            rng: seeded(0, 0),
            finished: false,
        }
    }

    /// Training-mode record; dropout masks are drawn from a counter-based
    /// stream keyed by `(seed, stream)`.
    pub fn train(seed: u64, stream: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode: Mode::Train,
            rng: seeded(seed, stream),
            finished: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: false,
            op: Op::Leaf,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free leaf that records a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: true,
            op: Op::Leaf,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            grad: None,
            needs_grad: p.requires_grad,
            op: Op::Leaf,
            source: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.source, &node.grad) {
                store.accumulate(id, g);
            }
        }
    }

    // ------------------------------------------------------------------
    // Linear algebra

    /// `a [m, k] @ b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::dense(self.value(a).data(), m, k),
            View::dense(self.value(b).data(), k, n),
            0.0,
            ViewMut::dense(&mut out, m, n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a [m, k] @ b[n, k]^T`. Leading axes of `a` are flattened into `m` and
    /// restored on the output.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sb.len() != 2 || sa.last() != Some(&sb[1]) {
            return dim_err(format!("matmul_nt of {sa:?} and {sb:?}"));
        }
        let k = sb[1];
        let n = sb[0];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::dense(self.value(a).data(), m, k),
            View::dense(self.value(b).data(), n, k).t(),
            0.0,
            ViewMut::dense(&mut out, m, n),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMulNt { a, b, m, k, n }, &[a, b]))
    }

    /// `x @ w^T + bias` with `w [out, in]`, `bias [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ------------------------------------------------------------------
    // Elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds `bias [w]` to every row of `x [..., w]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(bias) != [w] {
            return dim_err(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % w])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|v| v * c).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return dim_err(format!("scale_by needs a scalar, got {:?}", self.shape(s)));
        }
        let c = self.scalar(s);
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|v| v * c).collect(),
        )?;
        Ok(self.push(value, Op::ScaleBy { x, s }, &[x, s]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        let mut slope = Vec::with_capacity(src.len());
        for &v in src {
            let (y, dy) = gelu(v);
            out.push(y);
            slope.push(dy);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu { x, slope }, &[x])
    }

    /// Inverted dropout. Pass-through in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        check_probability(p)?;
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let mask = keep_mask(&mut self.rng, n, p);
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    // ------------------------------------------------------------------
    // Normalization

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} invalid for {shape:?}"));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| src[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, len, inner }, &[x]))
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        offset: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let w = self.value(x).last_dim();
        for p in [gain, offset].into_iter().flatten() {
            if self.shape(p) != [w] {
                return dim_err(format!(
                    "layer_norm affine term {:?} vs width {w}",
                    self.shape(p)
                ));
            }
        }
        let src = self.value(x);
        let rows = src.rows();
        let mut xhat = vec![0.0; src.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, v) in row.iter().enumerate() {
                xhat[r * w + j] = (v - mean) * rs;
            }
        }
        let g = gain.map(|g| self.value(g).data().to_vec());
        let b = offset.map(|b| self.value(b).data().to_vec());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let j = i % w;
                let y = g.as_ref().map_or(h, |g| h * g[j]);
                b.as_ref().map_or(y, |b| y + b[j])
            })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let mut inputs = vec![x];
        inputs.extend(gain);
        inputs.extend(offset);
        Ok(self.push(
            value,
            Op::LayerNorm { x, gain, offset, xhat, rstd },
            &inputs,
        ))
    }

    /// Scales each last-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let w = src.last_dim();
        let norms: Vec<f64> = (0..src.rows())
            .map(|r| (src.row(r).iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt())
            .collect();
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i / w])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    // ------------------------------------------------------------------
    // Structural

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return dim_err(format!(
                    "concat operands {:?} and {s:?} disagree off the last axis",
                    self.shape(first)
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(first).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), widths }, parts))
    }

    /// Columns `[offset, offset + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let width = self.value(x).last_dim();
        let value = self.value(x).slice_last(offset, len)?;
        Ok(self.push(value, Op::Slice { x, offset, len, width }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Picks token `pos` from `x [b, l, d]`, giving `[b, d]`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pos >= s[1] {
            return dim_err(format!("select position {pos} from {s:?}"));
        }
        let (batch, len, width) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(batch * width);
        for b in 0..batch {
            let at = (b * len + pos) * width;
            data.extend_from_slice(&src[at..at + width]);
        }
        let value = Tensor::new(vec![batch, width], data)?;
        Ok(self.push(
            value,
            Op::SelectPosition { x, batch, len, width, pos },
            &[x],
        ))
    }

    /// Repeats `x [n, d]` into `[batch, n, d]`.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || batch == 0 {
            return dim_err(format!("broadcast of {s:?} over batch {batch}"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(batch * src.len());
        for _ in 0..batch {
            data.extend_from_slice(src);
        }
        let value = Tensor::new(vec![batch, s[0], s[1]], data)?;
        Ok(self.push(value, Op::BroadcastBatch { x, batch }, &[x]))
    }

    /// Rows of `table [v, d]` at `idx`, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return dim_err(format!("gather from non-matrix {s:?}"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Vocabulary(format!(
                "row {bad} out of range for table of {} rows",
                s[0]
            )));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * s[1]);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idx.len(), s[1]], data)?;
        Ok(self.push(value, Op::GatherRows { table, idx: idx.to_vec() }, &[table]))
    }

    /// `out[b, n] = v[b] . t[b, n]` for `v [b, d]`, `t [b, n, d]`.
    pub fn row_dot(&mut self, v: Var, t: Var) -> Result<Var> {
        let (sv, st) = (self.shape(v).to_vec(), self.shape(t).to_vec());
        if sv.len() != 2 || st.len() != 3 || sv[0] != st[0] || sv[1] != st[2] {
            return dim_err(format!("row_dot of {sv:?} and {st:?}"));
        }
        let (batch, n, d) = (st[0], st[1], st[2]);
        let (vd, td) = (self.value(v).data(), self.value(t).data());
        let mut out = vec![0.0; batch * n];
        for b in 0..batch {
            let vr = &vd[b * d..(b + 1) * d];
            for j in 0..n {
                let tr = &td[(b * n + j) * d..(b * n + j + 1) * d];
                out[b * n + j] = vr.iter().zip(tr).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::new(vec![batch, n], out)?;
        Ok(self.push(value, Op::RowDot { v, t, batch, n, d }, &[v, t]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    // ------------------------------------------------------------------
    // Fused ops

    /// Multi-head scaled dot-product attention.
    ///
    /// `q [b, nq, d]` attends over `k, v [b, nk, d]` independently per batch
    /// entry; heads split `d` into equal contiguous slices. Dropout with
    /// probability `p` is applied to the attention weights in training mode.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, p: f64) -> Result<Var> {
        check_probability(p)?;
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return dim_err(format!("attention over q {sq:?}, k {sk:?}, v {sv:?}"));
        }
        let (batch, nq, d, nk) = (sq[0], sq[1], sq[2], sk[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let keep = if self.mode == Mode::Train && p > 0.0 {
            Some(keep_mask(&mut self.rng, probs.len(), p))
        } else {
            None
        };
        let mut out = vec![0.0; batch * nq * d];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut weights = vec![0.0; nq * nk];
        for b in 0..batch {
            for h in 0..heads {
                let blk = (b * heads + h) * nq * nk;
                let scores = &mut probs[blk..blk + nq * nk];
                gemm(
                    scale,
                    head_view(qd, b, h, nq, d, dh),
                    head_view(kd, b, h, nk, d, dh).t(),
                    0.0,
                    ViewMut::dense(scores, nq, nk),
                );
                for row in scores.chunks_mut(nk) {
                    softmax_in_place(row);
                }
                weights.copy_from_slice(scores);
                if let Some(keep) = &keep {
                    weights
                        .iter_mut()
                        .zip(&keep[blk..blk + nq * nk])
                        .for_each(|(w, m)| *w *= m);
                }
                gemm(
                    1.0,
                    View::dense(&weights, nq, nk),
                    head_view(vd, b, h, nk, d, dh),
                    0.0,
                    ViewMut {
                        data: &mut out,
                        offset: b * nq * d + h * dh,
                        rows: nq,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        let value = Tensor::new(vec![batch, nq, d], out)?;
        let saved = AttentionSaved { q, k, v, batch, nq, nk, d, heads, scale, probs, keep };
        Ok(self.push(value, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Mean over the batch of `-ln p[label]`, with `p` floored at `floor`.
    pub fn cross_entropy_from_probs(
        &mut self,
        probs: Var,
        labels: &[usize],
        floor: f64,
    ) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!(
                "cross entropy over {s:?} with {} labels",
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return dim_err(format!("label {bad} out of range for {} classes", s[1]));
        }
        let p = self.value(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let v = p.row(i)[l];
                // NaN must survive the floor.
                -(if v.is_nan() { v } else { v.max(floor) }).ln()
            })
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy { probs, labels: labels.to_vec(), floor },
            &[probs],
        ))
    }

    // ------------------------------------------------------------------

    /// Replays adjoints from the scalar `loss`. A record can only be
    /// differentiated once; a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.finished {
            return Err(Error::Backward(
                "record already differentiated; run a fresh forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(loss)
            )));
        }
        self.finished = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else { continue };
            if !node.needs_grad {
                continue;
            }
            propagate(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

fn head_view(data: &[f64], b: usize, h: usize, rows: usize, d: usize, dh: usize) -> View<'_> {
    View {
        data,
        offset: b * rows * d + h * dh,
        rows,
        cols: dh,
        rs: d,
        cs: 1,
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

fn keep_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Value and derivative.
fn gelu(x: f64) -> (f64, f64) {
    let s = sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x));
    (x * s, s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x))
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Adds `contrib` into the gradient slot of `v` if it wants one.
fn accum(nodes: &mut [Node], v: Var, contrib: impl FnOnce(&mut [f64], &[Node])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let mut g = nodes[v.0]
        .grad
        .take()
        .unwrap_or_else(|| vec![0.0; nodes[v.0].value.numel()]);
    contrib(&mut g, nodes);
    nodes[v.0].grad = Some(g);
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].needs_grad
}

fn propagate(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            accum(nodes, a, |ga, ns| {
                gemm(
                    1.0,
                    View::dense(g, m, n),
                    View::dense(ns[b.0].value.data(), k, n).t(),
                    1.0,
                    ViewMut::dense(ga, m, k),
                )
            });
            accum(nodes, b, |gb, ns| {
                gemm(
                    1.0,
                    View::dense(ns[a.0].value.data(), m, k).t(),
                    View::dense(g, m, n),
                    1.0,
                    ViewMut::dense(gb, k, n),
                )
            });
        }
        &Op::MatMulNt { a, b, m, k, n } => {
            accum(nodes, a, |ga, ns| {
                gemm(
                    1.0,
                    View::dense(g, m, n),
                    View::dense(ns[b.0].value.data(), n, k),
                    1.0,
                    ViewMut::dense(ga, m, k),
                )
            });
            accum(nodes, b, |gb, ns| {
                gemm(
                    1.0,
                    View::dense(g, m, n).t(),
                    View::dense(ns[a.0].value.data(), m, k),
                    1.0,
                    ViewMut::dense(gb, n, k),
                )
            });
        }
        &Op::Add { a, b } => {
            for v in [a, b] {
                accum(nodes, v, |gv, _| gv.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
        &Op::AddBias { x, bias } => {
            accum(nodes, x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            let w = out.last_dim();
            accum(nodes, bias, |gb, _| {
                for (i, v) in g.iter().enumerate() {
                    gb[i % w] += v;
                }
            });
        }
        &Op::Scale { x, c } => {
            accum(nodes, x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
        }
        &Op::ScaleBy { x, s } => {
            let c = nodes[s.0].value.data()[0];
            accum(nodes, x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
            accum(nodes, s, |gs, ns| {
                gs[0] += ns[x.0].value.data().iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            });
        }
        &Op::Relu { x } => {
            accum(nodes, x, |gx, ns| {
                for ((a, &v), b) in gx.iter_mut().zip(ns[x.0].value.data()).zip(g) {
                    if v > 0.0 {
                        *a += b;
                    }
                }
            });
        }
        Op::Gelu { x, slope } => {
            accum(nodes, *x, |gx, _| {
                for ((a, d), b) in gx.iter_mut().zip(slope).zip(g) {
                    *a += d * b;
                }
            });
        }
        &Op::Softmax { x, len, inner } => {
            let y = out.data();
            accum(nodes, x, |gx, _| {
                let outer = y.len() / (len * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let at = base + j * inner;
                            gx[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, offset, xhat, rstd } => {
            let w = out.last_dim();
            let gamma = gain.map(|v| nodes[v.0].value.data().to_vec());
            if let Some(gv) = *gain {
                accum(nodes, gv, |gg, _| {
                    for (i, (a, h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % w] += a * h;
                    }
                });
            }
            if let Some(ov) = *offset {
                accum(nodes, ov, |go, _| {
                    for (i, a) in g.iter().enumerate() {
                        go[i % w] += a;
                    }
                });
            }
            accum(nodes, *x, |gx, _| {
                let mut dh = vec![0.0; w];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * w..(r + 1) * w];
                    let hr = &xhat[r * w..(r + 1) * w];
                    for j in 0..w {
                        dh[j] = gamma.as_ref().map_or(gr[j], |gm| gr[j] * gm[j]);
                    }
                    let mean_dh = dh.iter().sum::<f64>() / w as f64;
                    let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        gx[r * w + j] += rs * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            });
        }
        Op::Dropout { x, mask } => {
            accum(nodes, *x, |gx, _| {
                for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += b * m;
                }
            });
        }
        Op::Concat { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                accum(nodes, p, |gp, _| {
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        &Op::Slice { x, offset, len, width } => {
            accum(nodes, x, |gx, _| {
                for (r, chunk) in g.chunks(len).enumerate() {
                    for (j, v) in chunk.iter().enumerate() {
                        gx[r * width + offset + j] += v;
                    }
                }
            });
        }
        &Op::Reshape { x } => {
            accum(nodes, x, |gx, _| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
        }
        &Op::SelectPosition { x, batch, len, width, pos } => {
            accum(nodes, x, |gx, _| {
                for b in 0..batch {
                    let at = (b * len + pos) * width;
                    for j in 0..width {
                        gx[at + j] += g[b * width + j];
                    }
                }
            });
        }
        &Op::BroadcastBatch { x, batch } => {
            accum(nodes, x, |gx, _| {
                let n = gx.len();
                for b in 0..batch {
                    for (a, v) in gx.iter_mut().zip(&g[b * n..(b + 1) * n]) {
                        *a += v;
                    }
                }
            });
        }
        Op::GatherRows { table, idx } => {
            let w = out.last_dim();
            accum(nodes, *table, |gt, _| {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..w {
                        gt[i * w + j] += g[r * w + j];
                    }
                }
            });
        }
        Op::L2Normalize { x, norms } => {
            let y = out.data();
            let w = out.last_dim();
            accum(nodes, *x, |gx, _| {
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        gx[r * w + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            });
        }
        &Op::RowDot { v, t, batch, n, d } => {
            accum(nodes, v, |gv, ns| {
                let td = ns[t.0].value.data();
                for b in 0..batch {
                    for j in 0..n {
                        let c = g[b * n + j];
                        let tr = &td[(b * n + j) * d..(b * n + j + 1) * d];
                        for (a, x) in gv[b * d..(b + 1) * d].iter_mut().zip(tr) {
                            *a += c * x;
                        }
                    }
                }
            });
            accum(nodes, t, |gt, ns| {
                let vd = ns[v.0].value.data();
                for b in 0..batch {
                    let vr = &vd[b * d..(b + 1) * d];
                    for j in 0..n {
                        let c = g[b * n + j];
                        for (a, x) in gt[(b * n + j) * d..(b * n + j + 1) * d].iter_mut().zip(vr) {
                            *a += c * x;
                        }
                    }
                }
            });
        }
        Op::Attention(s) => attention_backward(nodes, s, g),
        Op::CrossEntropy { probs, labels, floor } => {
            let c = g[0] / labels.len() as f64;
            accum(nodes, *probs, |gp, ns| {
                let p = &ns[probs.0].value;
                let w = p.last_dim();
                for (i, &l) in labels.iter().enumerate() {
                    let v = p.row(i)[l];
                    if v > *floor || v.is_nan() {
                        gp[i * w + l] -= c / v;
                    }
                }
            });
        }
        &Op::Sum { x } => {
            accum(nodes, x, |gx, _| gx.iter_mut().for_each(|a| *a += g[0]));
        }
    }
}

fn attention_backward(nodes: &mut [Node], s: &AttentionSaved, g: &[f64]) {
    let AttentionSaved { q, k, v, batch, nq, nk, d, heads, scale, ref probs, ref keep } = *s;
    let dh = d / heads;
    let need = [wants(nodes, q), wants(nodes, k), wants(nodes, v)];
    if !need.iter().any(|&x| x) {
        return;
    }
    let mut gq = vec![0.0; batch * nq * d];
    let mut gk = vec![0.0; batch * nk * d];
    let mut gv = vec![0.0; batch * nk * d];
    let (qd, kd, vd) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let mut weights = vec![0.0; nq * nk];
    let mut dp = vec![0.0; nq * nk];
    for b in 0..batch {
        for h in 0..heads {
            let blk = (b * heads + h) * nq * nk;
            let p = &probs[blk..blk + nq * nk];
            weights.copy_from_slice(p);
            if let Some(keep) = keep {
                weights
                    .iter_mut()
                    .zip(&keep[blk..blk + nq * nk])
                    .for_each(|(w, m)| *w *= m);
            }
            let gout = head_view(g, b, h, nq, d, dh);
            // dV = W^T dOut
            gemm(
                1.0,
                View::dense(&weights, nq, nk).t(),
                gout,
                1.0,
                ViewMut { data: &mut gv, offset: b * nk * d + h * dh, rows: nk, cols: dh, rs: d, cs: 1 },
            );
            // dW = dOut V^T
            gemm(
                1.0,
                gout,
                head_view(vd, b, h, nk, d, dh).t(),
                0.0,
                ViewMut::dense(&mut dp, nq, nk),
            );
            if let Some(keep) = keep {
                dp.iter_mut()
                    .zip(&keep[blk..blk + nq * nk])
                    .for_each(|(x, m)| *x *= m);
            }
            // Softmax adjoint, scaled.
            for (prow, drow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (x, &pv) in drow.iter_mut().zip(prow) {
                    *x = scale * pv * (*x - dot);
                }
            }
            gemm(
                1.0,
                View::dense(&dp, nq, nk),
                head_view(kd, b, h, nk, d, dh),
                1.0,
                ViewMut { data: &mut gq, offset: b * nq * d + h * dh, rows: nq, cols: dh, rs: d, cs: 1 },
            );
            gemm(
                1.0,
                View::dense(&dp, nq, nk).t(),
                head_view(qd, b, h, nq, d, dh),
                1.0,
                ViewMut { data: &mut gk, offset: b * nk * d + h * dh, rows: nk, cols: dh, rs: d, cs: 1 },
            );
        }
    }
    for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
        accum(nodes, var, |acc, _| acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b));
    }
}
