use super::params::ParamStore;
use super::tensor::{dot, mm_rows, transpose_data, Tensor};
use super::{AutodiffError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// Leaf bound to a parameter-store slot; grads flow back via
    /// [`Tape::write_grads`].
    Param(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f32 },
    Relu(usize),
    Sigmoid(usize),
    RowLogSoftmax(usize),
    CausalSoftmax(usize),
    CausalAttend { probs: usize, values: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    AddRowBias { x: usize, bias: usize },
    GatherRows { x: usize, ids: Vec<usize> },
    PickEntries { x: usize, coords: Vec<(usize, usize)> },
    ConcatCols(usize, usize),
    SliceCols { x: usize, start: usize },
    Reshape(usize),
    MeanAll(usize),
    SumAll(usize),
    WeightedSum { xs: Vec<usize>, ws: Vec<f32> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;
// Largest f32 strictly below 1.0; keeps sigmoid output in the open interval.
const SIGMOID_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

/// Ordered record of executed differentiable operations.
///
/// The tape is a single-threaded context: operations append nodes, and
/// [`Tape::backward`] visits them in reverse execution order exactly once
/// per call. Gradients accumulate across repeated backward calls until
/// [`Tape::zero_grads`]; this mirrors gradient accumulation across
/// micro-batches.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    /// Scalar readout of a shape-[] node.
    pub fn item(&self, v: Var) -> Result<f32> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "item() on node of shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    /// Records an input leaf, copying the tensor's data and requires_grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Records a leaf bound to `store[idx]`; always differentiable.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> Var {
        let t = store.get(idx).tensor();
        self.push(Op::Param(idx), t.shape().to_vec(), t.data().to_vec(), true)
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(AutodiffError::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a, "matmul")?;
        let (k2, n) = self.rows_cols(b, "matmul")?;
        if k != k2 {
            return Err(AutodiffError::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bt = transpose_data(self.value(b), k, n);
        let out = mm_rows(self.value(a), m, k, &bt, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a.0, b.0), vec![m, n], out, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(x, "transpose")?;
        let out = transpose_data(self.value(x), r, c);
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x.0), vec![c, r], out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a.0, b.0), self.shape(a).to_vec(), out, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a.0, b.0), self.shape(a).to_vec(), out, needs))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|v| scale * v + shift).collect();
        let needs = self.needs(x);
        self.push(
            Op::Affine { x: x.0, scale },
            self.shape(x).to_vec(),
            out,
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(x);
        self.push(Op::Relu(x.0), self.shape(x).to_vec(), out, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let needs = self.needs(x);
        self.push(Op::Sigmoid(x.0), self.shape(x).to_vec(), out, needs)
    }

    /// Numerically stable log-softmax over the last axis of a [N,V] matrix
    /// (or a length-V vector, treated as one row).
    pub fn row_log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, v) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                return Err(AutodiffError::Dimension {
                    op: "row_log_softmax",
                    lhs: s,
                    rhs: vec![],
                })
            }
        };
        if v == 0 {
            return Err(AutodiffError::Dimension {
                op: "row_log_softmax",
                lhs: s,
                rhs: vec![],
            });
        }
        let mut out = vec![0.0f32; n * v];
        for r in 0..n {
            let row = &self.value(x)[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &val in row {
                z += ((val - m) as f64).exp();
            }
            let lz = z.ln();
            for (o, &val) in out[r * v..(r + 1) * v].iter_mut().zip(row) {
                *o = ((val - m) as f64 - lz) as f32;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::RowLogSoftmax(x.0), s, out, needs))
    }

    /// Row softmax of an [L,L] score matrix under the causal mask: row r
    /// normalizes over columns 0..=r, later columns are exactly zero, so a
    /// position's distribution never depends on later positions.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (l, l2) = self.rows_cols(x, "causal_softmax")?;
        if l != l2 {
            return Err(AutodiffError::Dimension {
                op: "causal_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut out = vec![0.0f32; l * l];
        for r in 0..l {
            let row = &self.value(x)[r * l..r * l + r + 1];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &val in row {
                z += ((val - m) as f64).exp();
            }
            for (c, &val) in row.iter().enumerate() {
                out[r * l + c] = (((val - m) as f64).exp() / z) as f32;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::CausalSoftmax(x.0), vec![l, l], out, needs))
    }

    /// Attention context under the causal mask: row r of the output is
    /// sum over u <= r of probs[r,u] * values[u]. Equivalent to a matmul
    /// against causally masked probabilities, but each row accumulates
    /// over exactly r+1 terms, so a position's value is independent of the
    /// sequence length beyond it (down to the bit).
    pub fn causal_attend(&mut self, probs: Var, values: Var) -> Result<Var> {
        let (l, l2) = self.rows_cols(probs, "causal_attend")?;
        let (lv, dh) = self.rows_cols(values, "causal_attend")?;
        if l != l2 || l != lv {
            return Err(AutodiffError::Dimension {
                op: "causal_attend",
                lhs: self.shape(probs).to_vec(),
                rhs: self.shape(values).to_vec(),
            });
        }
        let vt = transpose_data(self.value(values), l, dh);
        let mut out = vec![0.0f32; l * dh];
        for r in 0..l {
            let prow = &self.value(probs)[r * l..r * l + r + 1];
            for j in 0..dh {
                out[r * dh + j] = dot(prow, &vt[j * l..j * l + r + 1]);
            }
        }
        let needs = self.needs(probs) || self.needs(values);
        Ok(self.push(
            Op::CausalAttend {
                probs: probs.0,
                values: values.0,
            },
            vec![l, dh],
            out,
            needs,
        ))
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.rows_cols(x, "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(AutodiffError::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mut out = vec![0.0f32; n * d];
        for r in 0..n {
            let row = &self.value(x)[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            let g = self.value(gamma);
            let b = self.value(beta);
            for c in 0..d {
                let xhat = (row[c] as f64 - mean) * inv;
                out[r * d + c] = (xhat * g[c] as f64 + b[c] as f64) as f32;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
            vec![n, d],
            out,
            needs,
        ))
    }

    /// Row-wise bias addition: [N,d] + [d].
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.rows_cols(x, "add_row_bias")?;
        if self.shape(bias) != [d] {
            return Err(AutodiffError::Dimension {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(x).to_vec();
        let b = self.value(bias);
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] += b[c];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Op::AddRowBias {
                x: x.0,
                bias: bias.0,
            },
            vec![n, d],
            out,
            needs,
        ))
    }

    /// Gathers rows of x by index (embedding lookup, hidden-state selection).
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.rows_cols(x, "gather_rows")?;
        if ids.is_empty() {
            return Err(AutodiffError::Contract("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::Contract(format!(
                "gather_rows id {} out of range for {} rows",
                bad, n
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.value(x)[i * d..(i + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::GatherRows {
                x: x.0,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            needs,
        ))
    }

    /// Picks scalar entries (row, col) from a matrix into a vector.
    pub fn pick_entries(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = self.rows_cols(x, "pick_entries")?;
        if coords.is_empty() {
            return Err(AutodiffError::Contract("pick_entries with no coords".into()));
        }
        if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= n || c >= d) {
            return Err(AutodiffError::Contract(format!(
                "pick_entries ({}, {}) out of range for [{}, {}]",
                r, c, n, d
            )));
        }
        let out: Vec<f32> = coords.iter().map(|&(r, c)| self.value(x)[r * d + c]).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Op::PickEntries {
                x: x.0,
                coords: coords.to_vec(),
            },
            vec![coords.len()],
            out,
            needs,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.rows_cols(a, "concat_cols")?;
        let (n2, db) = self.rows_cols(b, "concat_cols")?;
        if n != n2 {
            return Err(AutodiffError::Dimension {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(&self.value(a)[r * da..(r + 1) * da]);
            out.extend_from_slice(&self.value(b)[r * db..(r + 1) * db]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a.0, b.0), vec![n, da + db], out, needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.rows_cols(x, "slice_cols")?;
        if start >= end || end > d {
            return Err(AutodiffError::Dimension {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&self.value(x)[r * d + start..r * d + end]);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x: x.0, start }, vec![n, w], out, needs))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(AutodiffError::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x.0), shape, data, needs))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(Op::MeanAll(x.0), vec![], vec![(s / n as f64) as f32], needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let needs = self.needs(x);
        self.push(Op::SumAll(x.0), vec![], vec![s as f32], needs)
    }

    /// Sequential f32 weighted sum of scalar nodes: w0*x0 + w1*x1 + ...
    /// Evaluated left to right so a reported loss breakdown recombines to
    /// the same bits.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(AutodiffError::Contract("weighted_sum of no terms".into()));
        }
        let mut acc = 0.0f32;
        for &(v, w) in terms {
            let val = self.item(v)?;
            acc += w * val;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        let (xs, ws): (Vec<usize>, Vec<f32>) = terms.iter().map(|&(v, w)| (v.0, w)).unzip();
        Ok(self.push(Op::WeightedSum { xs, ws }, vec![], vec![acc], needs))
    }

    /// Reverse pass from a scalar loss. Visits nodes in reverse execution
    /// order exactly once; every reachable differentiable node receives a
    /// gradient. Calling backward again without [`Tape::zero_grads`]
    /// accumulates into the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }
        let mut flow: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        flow[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = flow[id].take() else { continue };
            self.backprop_node(id, &g, &mut flow);
            // Persist for callers: grads on the tape accumulate across
            // backward invocations.
            let slot = self.grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
            for (acc, v) in slot.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f32], flow: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let mut send = |target: usize, delta: Vec<f32>| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut flow[target] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].needs_grad {
                    // dA = G * B^T : rows of B are already the rows of B^T's columns.
                    let da = mm_rows(g, m, n, &self.nodes[*b].data, k);
                    send(*a, da);
                }
                if self.nodes[*b].needs_grad {
                    // dB = A^T * G
                    let at = transpose_data(&self.nodes[*a].data, m, k);
                    let gt = transpose_data(g, m, n);
                    let db = mm_rows(&at, k, m, &gt, n);
                    send(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                send(*x, transpose_data(g, r, c));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f32> =
                        g.iter().zip(&self.nodes[*b].data).map(|(x, y)| x * y).collect();
                    send(*a, da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<f32> =
                        g.iter().zip(&self.nodes[*a].data).map(|(x, y)| x * y).collect();
                    send(*b, db);
                }
            }
            Op::Affine { x, scale } => {
                send(*x, g.iter().map(|v| v * scale).collect());
            }
            Op::Relu(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[*x].data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                send(*x, dx);
            }
            Op::RowLogSoftmax(x) => {
                let (n, v) = if node.shape.len() == 1 {
                    (1, node.shape[0])
                } else {
                    (node.shape[0], node.shape[1])
                };
                let mut dx = vec![0.0f32; n * v];
                for r in 0..n {
                    let gr = &g[r * v..(r + 1) * v];
                    let or = &node.data[r * v..(r + 1) * v];
                    let gsum: f64 = gr.iter().map(|&x| x as f64).sum();
                    for c in 0..v {
                        dx[r * v + c] =
                            (gr[c] as f64 - (or[c] as f64).exp() * gsum) as f32;
                    }
                }
                send(*x, dx);
            }
            Op::CausalSoftmax(x) => {
                let l = node.shape[0];
                let mut dx = vec![0.0f32; l * l];
                for r in 0..l {
                    let pr = &node.data[r * l..r * l + r + 1];
                    let gr = &g[r * l..r * l + r + 1];
                    let inner: f64 = pr
                        .iter()
                        .zip(gr)
                        .map(|(&p, &gv)| p as f64 * gv as f64)
                        .sum();
                    for c in 0..=r {
                        dx[r * l + c] = (pr[c] as f64 * (gr[c] as f64 - inner)) as f32;
                    }
                }
                send(*x, dx);
            }
            Op::CausalAttend { probs, values } => {
                let (l, dh) = (node.shape[0], node.shape[1]);
                let pv = &self.nodes[*probs].data;
                let vv = &self.nodes[*values].data;
                if self.nodes[*probs].needs_grad {
                    let mut dp = vec![0.0f32; l * l];
                    for r in 0..l {
                        let grow = &g[r * dh..(r + 1) * dh];
                        for u in 0..=r {
                            dp[r * l + u] = dot(grow, &vv[u * dh..(u + 1) * dh]);
                        }
                    }
                    send(*probs, dp);
                }
                if self.nodes[*values].needs_grad {
                    let mut dv = vec![0.0f32; l * dh];
                    for r in 0..l {
                        let grow = &g[r * dh..(r + 1) * dh];
                        for u in 0..=r {
                            let p = pv[r * l + u];
                            for j in 0..dh {
                                dv[u * dh + j] += p * grow[j];
                            }
                        }
                    }
                    send(*values, dv);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                let xv = &self.nodes[*x].data;
                let gam = &self.nodes[*gamma].data;
                let mut dx = vec![0.0f32; n * d];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let var = row
                        .iter()
                        .map(|&v| {
                            let c = v as f64 - mean;
                            c * c
                        })
                        .sum::<f64>()
                        / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> =
                        row.iter().map(|&v| (v as f64 - mean) * inv).collect();
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    let dxhat: Vec<f64> = (0..d)
                        .map(|c| {
                            let v = gr[c] as f64 * gam[c] as f64;
                            sum_dxhat += v;
                            sum_dxhat_xhat += v * xhat[c];
                            v
                        })
                        .collect();
                    for c in 0..d {
                        dgamma[c] += (gr[c] as f64 * xhat[c]) as f32;
                        dbeta[c] += gr[c];
                        dx[r * d + c] = (inv
                            * (dxhat[c]
                                - sum_dxhat / d as f64
                                - xhat[c] * sum_dxhat_xhat / d as f64))
                            as f32;
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::AddRowBias { x, bias } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                send(*x, g.to_vec());
                if self.nodes[*bias].needs_grad {
                    let mut db = vec![0.0f32; d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::GatherRows { x, ids } => {
                let d = node.shape[1];
                let rows = self.nodes[*x].shape[0];
                let mut dx = vec![0.0f32; rows * d];
                for (out_r, &src) in ids.iter().enumerate() {
                    for c in 0..d {
                        dx[src * d + c] += g[out_r * d + c];
                    }
                }
                send(*x, dx);
            }
            Op::PickEntries { x, coords } => {
                let (n, d) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let mut dx = vec![0.0f32; n * d];
                for (k, &(r, c)) in coords.iter().enumerate() {
                    dx[r * d + c] += g[k];
                }
                send(*x, dx);
            }
            Op::ConcatCols(a, b) => {
                let n = node.shape[0];
                let da = self.nodes[*a].shape[1];
                let db = self.nodes[*b].shape[1];
                let mut ga = vec![0.0f32; n * da];
                let mut gb = vec![0.0f32; n * db];
                for r in 0..n {
                    let grow = &g[r * (da + db)..(r + 1) * (da + db)];
                    ga[r * da..(r + 1) * da].copy_from_slice(&grow[..da]);
                    gb[r * db..(r + 1) * db].copy_from_slice(&grow[da..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::SliceCols { x, start } => {
                let (n, w) = (node.shape[0], node.shape[1]);
                let d = self.nodes[*x].shape[1];
                let mut dx = vec![0.0f32; n * d];
                for r in 0..n {
                    dx[r * d + start..r * d + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, dx);
            }
            Op::Reshape(x) => {
                send(*x, g.to_vec());
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x].data.len();
                send(*x, vec![g[0] / n as f32; n]);
            }
            Op::SumAll(x) => {
                let n = self.nodes[*x].data.len();
                send(*x, vec![g[0]; n]);
            }
            Op::WeightedSum { xs, ws } => {
                for (&xid, &w) in xs.iter().zip(ws) {
                    send(xid, vec![g[0] * w]);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    /// Deposits accumulated gradients of parameter leaves into the store's
    /// grad buffers (adding to whatever is already there).
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(idx) = node.op {
                if let Some(g) = self.grads[id].as_deref() {
                    store.get_mut(idx).tensor_mut().accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

fn sigmoid_scalar(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x as f64).exp())
    } else {
        let e = (x as f64).exp();
        e / (1.0 + e)
    } as f32;
    y.clamp(f32::MIN_POSITIVE, SIGMOID_MAX)
}
