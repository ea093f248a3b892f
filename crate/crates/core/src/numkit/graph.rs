//! Reverse-mode gradients over the closed set of primitives the slate models
//! are built from: affine layers, embedding gathers, pointwise activations,
//! concatenation, dot products, sampled-softmax cross entropy, diagonal
//! Gaussian KL, and reparameterized sampling.
//!
//! There is no general tape for arbitrary graphs; every model in this crate
//! has a fixed shape, so the op set stays small and each backward rule is
//! written out by hand. Values are computed eagerly at op-construction time,
//! `backward` replays the node list in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::{Error, Result};

use super::func::{logsumexp, sigmoid, softplus};
use super::{Gradients, Tensor2, LOGVAR_MAX, LOGVAR_MIN};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Constant leaf; no gradient.
    Value,
    /// Parameter leaf; gradient exported under its name.
    Param,
    /// `y = Wx + b`
    Affine { w: NodeId, b: NodeId, x: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Elementwise clamp; gradient passes only strictly inside the range.
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize, len: usize },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Scalar dot product of two equal-length vectors.
    Dot(NodeId, NodeId),
    SumScalars(Vec<NodeId>),
    /// One row of a trainable table; gradient accumulates into that row.
    GatherRow { table: NodeId, row: usize },
    /// Dot of `x` against selected rows of a frozen table; gradient flows to
    /// `x` only. Collapses the per-negative dots of sampled softmax into one
    /// node.
    DotRows {
        x: NodeId,
        table: Arc<Tensor2>,
        rows: Vec<usize>,
    },
    /// `mean + exp(logvar/2) * noise`; the noise is a constant.
    Reparam {
        mean: NodeId,
        logvar: NodeId,
        noise: Vec<f64>,
    },
    /// Closed-form KL between two diagonal Gaussians.
    KlDiag {
        q_mean: NodeId,
        q_logvar: NodeId,
        p_mean: NodeId,
        p_logvar: NodeId,
    },
    /// `logsumexp(logits) - logits[0]`; index 0 is the target logit.
    SampledCe { logits: NodeId },
    /// `softplus(logit) - label * logit`, the stable binary cross entropy.
    BceLogit { logit: NodeId, label: f64 },
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// A single forward computation with enough context recorded to run the
/// backward pass. Build one per training batch.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    /// Constant column vector.
    pub fn constant(&mut self, data: &[f64]) -> NodeId {
        self.push(data.to_vec(), data.len(), 1, Op::Value)
    }

    /// Bind a named parameter. Rebinding the same name returns the cached
    /// node, so a parameter used many times in one graph accumulates all of
    /// its gradient contributions in one buffer.
    pub fn param(&mut self, name: &str, tensor: &Tensor2) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            debug_assert_eq!(self.shape(id), (tensor.rows(), tensor.cols()));
            return id;
        }
        let id = self.push(
            tensor.data().to_vec(),
            tensor.rows(),
            tensor.cols(),
            Op::Param,
        );
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> NodeId {
        let (rows, cols) = self.shape(w);
        assert_eq!(cols, self.len_of(x), "affine: W cols vs x length");
        assert_eq!(rows, self.len_of(b), "affine: W rows vs b length");
        let mut y = mat_vec(&self.nodes[w.0].value, rows, cols, &self.nodes[x.0].value);
        for (yi, bi) in y.iter_mut().zip(&self.nodes[b.0].value) {
            *yi += bi;
        }
        self.push(y, rows, 1, Op::Affine { w, b, x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        let n = y.len();
        self.push(y, n, 1, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| sigmoid(*v)).collect();
        let n = y.len();
        self.push(y, n, 1, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        let n = y.len();
        self.push(y, n, 1, Op::Tanh(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.clamp(lo, hi)).collect();
        let n = y.len();
        self.push(y, n, 1, Op::Clamp { x, lo, hi })
    }

    /// Clamp into the shared logvar range.
    pub fn clamp_logvar(&mut self, x: NodeId) -> NodeId {
        self.clamp(x, LOGVAR_MIN, LOGVAR_MAX)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut y = Vec::new();
        for &p in parts {
            y.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = y.len();
        self.push(y, n, 1, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        assert!(start + len <= self.len_of(x), "slice out of range");
        let y = self.nodes[x.0].value[start..start + len].to_vec();
        self.push(y, len, 1, Op::Slice { x, start, len })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.len_of(a), self.len_of(b), "add: length mismatch");
        let y: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, z)| x + z)
            .collect();
        let n = y.len();
        self.push(y, n, 1, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * k).collect();
        let n = y.len();
        self.push(y, n, 1, Op::Scale(x, k))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.len_of(a), self.len_of(b), "dot: length mismatch");
        let v: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![v], 1, 1, Op::Dot(a, b))
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let mut acc = 0.0;
        for &p in parts {
            debug_assert_eq!(self.len_of(p), 1);
            acc += self.nodes[p.0].value[0];
        }
        self.push(vec![acc], 1, 1, Op::SumScalars(parts.to_vec()))
    }

    pub fn gather_row(&mut self, table: NodeId, row: usize) -> NodeId {
        let (rows, cols) = self.shape(table);
        assert!(row < rows, "gather_row: row {row} out of {rows}");
        let y = self.nodes[table.0].value[row * cols..(row + 1) * cols].to_vec();
        self.push(y, cols, 1, Op::GatherRow { table, row })
    }

    pub fn dot_rows(&mut self, x: NodeId, table: Arc<Tensor2>, rows: Vec<usize>) -> NodeId {
        assert_eq!(self.len_of(x), table.cols(), "dot_rows: dim mismatch");
        let xv = &self.nodes[x.0].value;
        let y: Vec<f64> = rows.iter().map(|&r| table.row_dot(r, xv)).collect();
        let n = y.len();
        self.push(y, n, 1, Op::DotRows { x, table, rows })
    }

    pub fn reparam(&mut self, mean: NodeId, logvar: NodeId, noise: &[f64]) -> NodeId {
        assert_eq!(self.len_of(mean), self.len_of(logvar));
        assert_eq!(self.len_of(mean), noise.len());
        let y: Vec<f64> = self.nodes[mean.0]
            .value
            .iter()
            .zip(&self.nodes[logvar.0].value)
            .zip(noise)
            .map(|((m, lv), n)| m + (lv / 2.0).exp() * n)
            .collect();
        let n = y.len();
        self.push(
            y,
            n,
            1,
            Op::Reparam {
                mean,
                logvar,
                noise: noise.to_vec(),
            },
        )
    }

    pub fn kl_diag(
        &mut self,
        q_mean: NodeId,
        q_logvar: NodeId,
        p_mean: NodeId,
        p_logvar: NodeId,
    ) -> NodeId {
        let dim = self.len_of(q_mean);
        assert_eq!(dim, self.len_of(q_logvar));
        assert_eq!(dim, self.len_of(p_mean));
        assert_eq!(dim, self.len_of(p_logvar));
        // Same accumulation order as gaussian_kl so graph and hand
        // compositions agree to rounding.
        let mut acc = 0.0;
        for i in 0..dim {
            let lq = self.nodes[q_logvar.0].value[i];
            let lp = self.nodes[p_logvar.0].value[i];
            let sq = lq.exp();
            let sp = lp.exp();
            let dm = self.nodes[q_mean.0].value[i] - self.nodes[p_mean.0].value[i];
            acc += (sq + dm * dm) / sp - 1.0 + lp - lq;
        }
        self.push(
            vec![0.5 * acc],
            1,
            1,
            Op::KlDiag {
                q_mean,
                q_logvar,
                p_mean,
                p_logvar,
            },
        )
    }

    pub fn sampled_ce(&mut self, logits: NodeId) -> NodeId {
        assert!(
            self.len_of(logits) >= 2,
            "sampled_ce: need target plus at least one negative"
        );
        let l = &self.nodes[logits.0].value;
        let v = logsumexp(l) - l[0];
        self.push(vec![v], 1, 1, Op::SampledCe { logits })
    }

    pub fn bce_logit(&mut self, logit: NodeId, label: f64) -> NodeId {
        debug_assert_eq!(self.len_of(logit), 1);
        let l = self.nodes[logit.0].value[0];
        let v = softplus(l) - label * l;
        self.push(vec![v], 1, 1, Op::BceLogit { logit, label })
    }

    /// Backpropagate from a scalar loss node; returns gradients for every
    /// bound parameter (zeros for parameters the loss never touched).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.len_of(loss) != 1 {
            return Err(Error::Contract("backward: loss must be scalar".into()));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::Training("loss is not finite".into()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        let mut out = Gradients::new();
        for (name, &id) in &self.bound {
            let (rows, cols) = self.shape(id);
            let data = grads[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; rows * cols]);
            out.insert(
                name.clone(),
                Tensor2::from_vec(rows, cols, data)
                    .map_err(|_| Error::Training(format!("non-finite gradient for {name}")))?,
            );
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Value | Op::Param => {}
            Op::Affine { w, b, x } => {
                let (rows, cols) = self.shape(*w);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                {
                    let gw = ensure(grads, w.0, rows * cols);
                    for r in 0..rows {
                        let base = r * cols;
                        for c in 0..cols {
                            gw[base + c] += dy[r] * xv[c];
                        }
                    }
                }
                accumulate(grads, b.0, dy);
                {
                    let gx = ensure(grads, x.0, cols);
                    for r in 0..rows {
                        let base = r * cols;
                        for c in 0..cols {
                            gx[c] += wv[base + c] * dy[r];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let g: Vec<f64> = self.nodes[x.0]
                    .value
                    .iter()
                    .zip(dy)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(grads, x.0, &g);
            }
            Op::Sigmoid(x) => {
                let g: Vec<f64> = node
                    .value
                    .iter()
                    .zip(dy)
                    .map(|(y, d)| d * y * (1.0 - y))
                    .collect();
                accumulate(grads, x.0, &g);
            }
            Op::Tanh(x) => {
                let g: Vec<f64> = node
                    .value
                    .iter()
                    .zip(dy)
                    .map(|(y, d)| d * (1.0 - y * y))
                    .collect();
                accumulate(grads, x.0, &g);
            }
            Op::Clamp { x, lo, hi } => {
                let g: Vec<f64> = self.nodes[x.0]
                    .value
                    .iter()
                    .zip(dy)
                    .map(|(v, d)| if *v > *lo && *v < *hi { *d } else { 0.0 })
                    .collect();
                accumulate(grads, x.0, &g);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.len_of(p);
                    accumulate(grads, p.0, &dy[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Slice { x, start, len } => {
                let gx = ensure(grads, x.0, self.len_of(*x));
                for k in 0..*len {
                    gx[start + k] += dy[k];
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, a.0, dy);
                accumulate(grads, b.0, dy);
            }
            Op::Scale(x, k) => {
                let g: Vec<f64> = dy.iter().map(|d| d * k).collect();
                accumulate(grads, x.0, &g);
            }
            Op::Dot(a, b) => {
                let d = dy[0];
                let ga: Vec<f64> = self.nodes[b.0].value.iter().map(|v| d * v).collect();
                let gb: Vec<f64> = self.nodes[a.0].value.iter().map(|v| d * v).collect();
                accumulate(grads, a.0, &ga);
                accumulate(grads, b.0, &gb);
            }
            Op::SumScalars(parts) => {
                for &p in parts {
                    accumulate(grads, p.0, dy);
                }
            }
            Op::GatherRow { table, row } => {
                let (rows, cols) = self.shape(*table);
                let gt = ensure(grads, table.0, rows * cols);
                for c in 0..cols {
                    gt[row * cols + c] += dy[c];
                }
            }
            Op::DotRows { x, table, rows } => {
                let gx = ensure(grads, x.0, table.cols());
                for (j, &r) in rows.iter().enumerate() {
                    let row = table.row(r);
                    for (g, w) in gx.iter_mut().zip(row) {
                        *g += dy[j] * w;
                    }
                }
            }
            Op::Reparam {
                mean,
                logvar,
                noise,
            } => {
                accumulate(grads, mean.0, dy);
                let g: Vec<f64> = self.nodes[logvar.0]
                    .value
                    .iter()
                    .zip(noise)
                    .zip(dy)
                    .map(|((lv, n), d)| d * 0.5 * (lv / 2.0).exp() * n)
                    .collect();
                accumulate(grads, logvar.0, &g);
            }
            Op::KlDiag {
                q_mean,
                q_logvar,
                p_mean,
                p_logvar,
            } => {
                let d = dy[0];
                let dim = self.len_of(*q_mean);
                let qm = &self.nodes[q_mean.0].value;
                let qlv = &self.nodes[q_logvar.0].value;
                let pm = &self.nodes[p_mean.0].value;
                let plv = &self.nodes[p_logvar.0].value;
                let mut g_qm = vec![0.0; dim];
                let mut g_qlv = vec![0.0; dim];
                let mut g_pm = vec![0.0; dim];
                let mut g_plv = vec![0.0; dim];
                for k in 0..dim {
                    let sq = qlv[k].exp();
                    let sp = plv[k].exp();
                    let dm = qm[k] - pm[k];
                    g_qm[k] = d * dm / sp;
                    g_pm[k] = -d * dm / sp;
                    g_qlv[k] = d * 0.5 * (sq / sp - 1.0);
                    g_plv[k] = d * 0.5 * (1.0 - (sq + dm * dm) / sp);
                }
                accumulate(grads, q_mean.0, &g_qm);
                accumulate(grads, q_logvar.0, &g_qlv);
                accumulate(grads, p_mean.0, &g_pm);
                accumulate(grads, p_logvar.0, &g_plv);
            }
            Op::SampledCe { logits } => {
                let d = dy[0];
                let l = &self.nodes[logits.0].value;
                let lse = logsumexp(l);
                let mut g: Vec<f64> = l.iter().map(|v| d * (v - lse).exp()).collect();
                g[0] -= d;
                accumulate(grads, logits.0, &g);
            }
            Op::BceLogit { logit, label } => {
                let l = self.nodes[logit.0].value[0];
                accumulate(grads, logit.0, &[dy[0] * (sigmoid(l) - label)]);
            }
        }
    }
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    for (r, out) in y.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *out = acc;
    }
    y
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: &[f64]) {
    let g = ensure(grads, idx, contrib.len());
    for (gi, ci) in g.iter_mut().zip(contrib) {
        *gi += ci;
    }
}
