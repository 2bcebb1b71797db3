//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order and only refer to earlier nodes, so
//! the reverse creation order is a valid topological order. Parameters are
//! referenced in place from the [`ParamStore`]; each parameter gets exactly
//! one node per graph no matter how often it is used.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{add_into, axpy, dot, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, F),
    MatVec(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Slice { x: NodeId, start: usize },
    Row { x: NodeId, index: usize },
    Stack(Vec<NodeId>),
    Broadcast(NodeId),
    Reshape(NodeId),
    Gather { table: NodeId, indices: Vec<usize> },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Softmax { x: NodeId, axis: usize },
    BilinearProject { m: NodeId, g: NodeId, transposed: bool },
    Dropout { x: NodeId, mask: Vec<F> },
    GradReverse { x: NodeId, lambda: F },
    #[allow(dead_code)]
    Detach(NodeId),
    Sum(NodeId),
    Nll { p: NodeId, labels: Vec<usize> },
    CrossEntropyRows { logits: NodeId, labels: Vec<usize>, probs: Vec<F> },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MatVec(..) => "matvec",
            Op::MatMulNT(..) => "matmul_nt",
            Op::VecMat(..) => "vecmat",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Row { .. } => "row",
            Op::Stack(_) => "stack",
            Op::Broadcast(_) => "broadcast_rows",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Ln(_) => "ln",
            Op::Softmax { .. } => "softmax",
            Op::BilinearProject { .. } => "bilinear_project",
            Op::Dropout { .. } => "dropout",
            Op::GradReverse { .. } => "grad_reverse",
            Op::Detach(_) => "detach",
            Op::Sum(_) => "sum",
            Op::Nll { .. } => "nll",
            Op::CrossEntropyRows { .. } => "cross_entropy_rows",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'s, F> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<NodeId>>,
    grads: Vec<Option<Vec<F>>>,
    dropout_rng: Option<ChaCha8Rng>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&n, lead)) => (numel(lead), n),
        None => (1, 1),
    }
}

impl<'s, F: Real> Graph<'s, F> {
    /// Evaluation graph: dropout is the identity.
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            grads: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training graph: dropout masks are drawn from `rng`.
    pub fn training(store: &'s ParamStore<F>, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        g.dropout_rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(pid) => self.store.value(pid).data(),
            _ => &node.value,
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<F> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.value(id)[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `id`, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == numel(&shape));
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    // ---- leaves -------------------------------------------------------

    pub fn input(&mut self, t: Tensor<F>, requires_grad: bool) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.input(t, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let shape = self.store.value(id).shape().to_vec();
        let rg = self.store.is_trainable(id);
        let n = self.push(shape, Vec::new(), Op::Param(id), rg);
        self.param_nodes[id.0] = Some(n);
        n
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<NodeId> {
        self.same_shape(op.name(), a, b)?;
        let v: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: NodeId, op: Op<F>, f: impl Fn(F) -> F) -> NodeId {
        let v: Vec<F> = self.value(x).iter().map(|&a| f(a)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, op, rg)
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        self.unary(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |a| if a > F::zero() { a } else { F::zero() })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), |a| a.tanh())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Ln(x), |a| a.ln())
    }

    /// Identity forward; the gradient flowing back into `x` is scaled by `-lambda`.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: F) -> NodeId {
        let v = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::GradReverse { x, lambda }, rg)
    }

    /// Identity forward; no gradient flows back into `x`.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).to_vec();
        self.push(self.shape(x).to_vec(), v, Op::Detach(x), false)
    }

    /// Inverted dropout. Kept entries are scaled by `1 / (1 - rate)`. The
    /// identity in evaluation graphs or when `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: F) -> NodeId {
        let n = self.value(x).len();
        let rng = match self.dropout_rng.as_mut() {
            Some(r) if rate > F::zero() => r,
            _ => return x,
        };
        let keep = F::one() - rate;
        let scale = F::one() / keep;
        let keep64 = keep.f64();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep64 { scale } else { F::zero() })
            .collect();
        let v: Vec<F> = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Dropout { x, mask }, rg)
    }

    // ---- linear algebra -----------------------------------------------

    /// `[T, n] + [n]` with the bias broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, n) = split_last(self.shape(x));
        if self.shape(b) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let v: Vec<F> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &c)| a + c))
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(self.shape(x).to_vec(), v, Op::AddRow(x, b), rg))
    }

    /// `W [m, n] · x [n] -> [m]`
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let ws = self.shape(w);
        if ws.len() != 2 || self.shape(x) != [ws[1]] {
            return Err(Error::shape("matvec", ws, self.shape(x)));
        }
        let (m, n) = (ws[0], ws[1]);
        let xv = self.value(x);
        let v: Vec<F> = self.value(w).chunks(n).map(|row| dot(row, xv)).collect();
        let rg = self.rg(&[w, x]);
        Ok(self.push(vec![m], v, Op::MatVec(w, x), rg))
    }

    /// `X [T, n] · Wᵀ` with `W [m, n]`, giving `[T, m]`.
    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("matmul_nt", xs, ws));
        }
        let (t, n, m) = (xs[0], xs[1], ws[0]);
        let wv = self.value(w);
        let mut v = Vec::with_capacity(t * m);
        for row in self.value(x).chunks(n) {
            for wr in wv.chunks(n) {
                v.push(dot(row, wr));
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(vec![t, m], v, Op::MatMulNT(x, w), rg))
    }

    /// `a [T] · H [T, n] -> [n]`, the a-weighted sum of the rows of H.
    pub fn vecmat(&mut self, a: NodeId, h: NodeId) -> Result<NodeId> {
        let hs = self.shape(h);
        if hs.len() != 2 || self.shape(a) != [hs[0]] {
            return Err(Error::shape("vecmat", self.shape(a), hs));
        }
        let n = hs[1];
        let mut v = vec![F::zero(); n];
        for (&ai, row) in self.value(a).iter().zip(self.value(h).chunks(n)) {
            axpy(ai, row, &mut v);
        }
        let rg = self.rg(&[a, h]);
        Ok(self.push(vec![n], v, Op::VecMat(a, h), rg))
    }

    /// `U[k, :] = mᵀ G_k` (or `mᵀ G_kᵀ` when `transposed`), for `m [d]` and
    /// `G [K, d, d]`. Combined with [`Graph::matmul_nt`] this evaluates the
    /// bilinear forms `mᵀ G_k h` for a whole sequence of `h`.
    pub fn bilinear_project(&mut self, m: NodeId, g: NodeId, transposed: bool) -> Result<NodeId> {
        let gs = self.shape(g);
        if gs.len() != 3 || gs[1] != gs[2] || self.shape(m) != [gs[1]] {
            return Err(Error::shape("bilinear_project", self.shape(m), gs));
        }
        let (k, d) = (gs[0], gs[1]);
        let mv = self.value(m);
        let gv = self.value(g);
        let mut u = vec![F::zero(); k * d];
        for kk in 0..k {
            let slice = &gv[kk * d * d..(kk + 1) * d * d];
            let out = &mut u[kk * d..(kk + 1) * d];
            if transposed {
                for (b, o) in out.iter_mut().enumerate() {
                    *o = dot(&slice[b * d..(b + 1) * d], mv);
                }
            } else {
                for (a, &ma) in mv.iter().enumerate() {
                    axpy(ma, &slice[a * d..(a + 1) * d], out);
                }
            }
        }
        let rg = self.rg(&[m, g]);
        Ok(self.push(vec![k, d], u, Op::BilinearProject { m, g, transposed }, rg))
    }

    /// `r[t, k] = mᵀ G_k h_t` for every row `h_t` of `h [T, d]`.
    pub fn bilinear(&mut self, m: NodeId, g: NodeId, h: NodeId, transposed: bool) -> Result<NodeId> {
        let u = self.bilinear_project(m, g, transposed)?;
        self.matmul_nt(h, u)
    }

    // ---- structure ----------------------------------------------------

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", sa, sb));
        }
        let (lead, p) = split_last(sa);
        let (_, q) = split_last(sb);
        let (av, bv) = (self.value(a), self.value(b));
        let mut v = Vec::with_capacity(lead * (p + q));
        for r in 0..lead {
            v.extend_from_slice(&av[r * p..(r + 1) * p]);
            v.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, v, Op::Concat(a, b), rg))
    }

    /// `x[..., start..start+len]` along the last axis.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        let (lead, n) = split_last(sx);
        if sx.is_empty() || start + len > n {
            return Err(Error::shape("slice", sx, &[start, len]));
        }
        let xv = self.value(x);
        let mut v = Vec::with_capacity(lead * len);
        for r in 0..lead {
            v.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, v, Op::Slice { x, start }, rg))
    }

    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 || index >= sx[0] {
            return Err(Error::shape("row", sx, &[index]));
        }
        let n = sx[1];
        let v = self.value(x)[index * n..(index + 1) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n], v, Op::Row { x, index }, rg))
    }

    /// Stack equally sized vectors into a `[T, n]` matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = match rows.first() {
            Some(&r) => self.shape(r).to_vec(),
            None => return Err(Error::shape("stack", &[], &[])),
        };
        if first.len() != 1 {
            return Err(Error::shape("stack", &first, &[]));
        }
        let mut v = Vec::with_capacity(rows.len() * first[0]);
        for &r in rows {
            if self.shape(r) != first.as_slice() {
                return Err(Error::shape("stack", &first, self.shape(r)));
            }
            v.extend_from_slice(self.value(r));
        }
        let rg = self.rg(rows);
        Ok(self.push(vec![rows.len(), first[0]], v, Op::Stack(rows.to_vec()), rg))
    }

    /// Repeat a vector `[n]` into `[rows, n]`.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 1 {
            return Err(Error::shape("broadcast_rows", sx, &[rows]));
        }
        let xv = self.value(x);
        let mut v = Vec::with_capacity(rows * xv.len());
        for _ in 0..rows {
            v.extend_from_slice(xv);
        }
        let shape = vec![rows, sx[0]];
        let rg = self.rg(&[x]);
        Ok(self.push(shape, v, Op::Broadcast(x), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    /// Rows `table[indices[t], :]` stacked into `[T, D]`.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let st = self.shape(table);
        if st.len() != 2 || indices.iter().any(|&i| i >= st[0]) {
            return Err(Error::shape("gather", st, &[indices.len()]));
        }
        let d = st[1];
        let tv = self.value(table);
        let mut v = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            v.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![indices.len(), d],
            v,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions and losses ----------------------------------------

    /// Softmax along `axis` (any axis of a 1-D or 2-D node).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::shape("softmax", &sx, &[axis]));
        }
        let (outer, n, inner) = axis_split(&sx, axis);
        let mut v = self.value(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mut mx = F::neg_infinity();
                for k in 0..n {
                    mx = mx.max(v[idx(k)]);
                }
                let mut s = F::zero();
                for k in 0..n {
                    let e = (v[idx(k)] - mx).exp();
                    v[idx(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    v[idx(k)] = v[idx(k)] / s;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(sx, v, Op::Softmax { x, axis }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().fold(F::zero(), |a, &b| a + b);
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    /// `-Σ_t ln p[t, labels[t]]` for row-stochastic `p [T, C]` (or `[C]` with one label).
    pub fn nll(&mut self, p: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sp = self.shape(p);
        let (rows, c) = split_last(sp);
        if rows != labels.len() || labels.iter().any(|&y| y >= c) {
            return Err(Error::shape("nll", sp, &[labels.len()]));
        }
        let pv = self.value(p);
        let s = labels
            .iter()
            .enumerate()
            .fold(F::zero(), |acc, (t, &y)| acc - pv[t * c + y].ln());
        let rg = self.rg(&[p]);
        Ok(self.push(
            vec![],
            vec![s],
            Op::Nll {
                p,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row cross-entropy `-ln softmax(logits[t])[labels[t]]`, giving `[T]`.
    /// Equivalent to `softmax` followed by `nll` row by row, computed with a
    /// log-sum-exp so saturated logits stay finite.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != labels.len() || labels.iter().any(|&y| y >= sl[1]) {
            return Err(Error::shape("cross_entropy_rows", sl, &[labels.len()]));
        }
        let c = sl[1];
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(lv.len());
        let mut out = Vec::with_capacity(labels.len());
        for (row, &y) in lv.chunks(c).zip(labels) {
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let s = row.iter().map(|&z| (z - mx).exp()).fold(F::zero(), |a, b| a + b);
            let lse = mx + s.ln();
            probs.extend(row.iter().map(|&z| (z - lse).exp()));
            out.push(lse - row[y]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![labels.len()],
            out,
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- diagnostics --------------------------------------------------

    /// First node (in creation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        (0..self.nodes.len()).map(NodeId).find_map(|id| {
            self.value(id)
                .iter()
                .any(|v| !v.is_finite())
                .then(|| (id, self.nodes[id.0].op.name()))
        })
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Afterwards every reachable node
    /// that requires a gradient holds `∂root/∂node`, summed over all paths.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![F::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.propagate(NodeId(id), &g);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Add the gradients of every parameter node into `out`.
    pub fn param_grads_into(&self, out: &mut Gradients<F>) {
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let (Some(n), true) = (node, self.store.is_trainable(ParamId(pid))) {
                if let Some(g) = self.grad(*n) {
                    out.accumulate(self.store, ParamId(pid), g);
                }
            }
        }
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.param_nodes[id.0]
    }

    fn propagate(&mut self, id: NodeId, g: &[F]) {
        let ctx = Ctx {
            store: self.store,
            nodes: &self.nodes,
        };
        apply_rule(&ctx, &mut self.grads, id, g);
    }
}

struct Ctx<'a, F> {
    store: &'a ParamStore<F>,
    nodes: &'a [Node<F>],
}

impl<'a, F: Real> Ctx<'a, F> {
    fn value(&self, id: NodeId) -> &'a [F] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(pid) => self.store.value(pid).data(),
            _ => &node.value,
        }
    }

    fn shape(&self, id: NodeId) -> &'a [usize] {
        &self.nodes[id.0].shape
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn slot<'g, F: Real>(
    grads: &'g mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    id: NodeId,
) -> Option<&'g mut [F]> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let n = numel(&nodes[id.0].shape);
    Some(
        grads[id.0]
            .get_or_insert_with(|| vec![F::zero(); n])
            .as_mut_slice(),
    )
}

fn apply_rule<F: Real>(cx: &Ctx<'_, F>, grads: &mut [Option<Vec<F>>], id: NodeId, g: &[F]) {
    match cx.nodes[id.0].op {
        Op::Input | Op::Param(_) | Op::Detach(_) => {}
        Op::Add(a, b) => {
            if let Some(s) = slot(grads, cx.nodes, a) {
                add_into(g, s);
            }
            if let Some(s) = slot(grads, cx.nodes, b) {
                add_into(g, s);
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(grads, cx.nodes, a) {
                add_into(g, s);
            }
            if let Some(s) = slot(grads, cx.nodes, b) {
                axpy(-F::one(), g, s);
            }
        }
        Op::Mul(a, b) => {
            let bv = cx.value(b);
            if let Some(s) = slot(grads, cx.nodes, a) {
                for ((si, &gi), &bi) in s.iter_mut().zip(g).zip(bv) {
                    *si += gi * bi;
                }
            }
            let av = cx.value(a);
            if let Some(s) = slot(grads, cx.nodes, b) {
                for ((si, &gi), &ai) in s.iter_mut().zip(g).zip(av) {
                    *si += gi * ai;
                }
            }
        }
        Op::AddRow(x, b) => {
            if let Some(s) = slot(grads, cx.nodes, x) {
                add_into(g, s);
            }
            let n = cx.value(b).len();
            if let Some(s) = slot(grads, cx.nodes, b) {
                for row in g.chunks(n) {
                    add_into(row, s);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(s) = slot(grads, cx.nodes, x) {
                axpy(c, g, s);
            }
        }
        Op::GradReverse { x, lambda } => {
            if let Some(s) = slot(grads, cx.nodes, x) {
                axpy(-lambda, g, s);
            }
        }
        Op::Dropout { x, ref mask } => {
            if let Some(s) = slot(grads, cx.nodes, x) {
                for ((si, &gi), &m) in s.iter_mut().zip(g).zip(mask) {
                    *si += gi * m;
                }
            }
        }
        Op::MatVec(w, x) => {
            let n = cx.value(x).len();
            if cx.rg(w) {
                let xv = cx.value(x);
                let s = slot(grads, cx.nodes, w).unwrap();
                for (i, &gi) in g.iter().enumerate() {
                    axpy(gi, &xv, &mut s[i * n..(i + 1) * n]);
                }
            }
            if cx.rg(x) {
                let wv = cx.value(w);
                let s = slot(grads, cx.nodes, x).unwrap();
                for (i, &gi) in g.iter().enumerate() {
                    axpy(gi, &wv[i * n..(i + 1) * n], s);
                }
            }
        }
        Op::MatMulNT(x, w) => {
            let n = cx.shape(x)[1];
            let m = cx.shape(w)[0];
            if cx.rg(x) {
                let wv = cx.value(w);
                let s = slot(grads, cx.nodes, x).unwrap();
                for (t, grow) in g.chunks(m).enumerate() {
                    let srow = &mut s[t * n..(t + 1) * n];
                    for (j, &gj) in grow.iter().enumerate() {
                        if gj != F::zero() {
                            axpy(gj, &wv[j * n..(j + 1) * n], srow);
                        }
                    }
                }
            }
            if cx.rg(w) {
                let xv = cx.value(x);
                let s = slot(grads, cx.nodes, w).unwrap();
                for (t, grow) in g.chunks(m).enumerate() {
                    let xrow = &xv[t * n..(t + 1) * n];
                    for (j, &gj) in grow.iter().enumerate() {
                        if gj != F::zero() {
                            axpy(gj, xrow, &mut s[j * n..(j + 1) * n]);
                        }
                    }
                }
            }
        }
        Op::VecMat(a, h) => {
            let n = g.len();
            if cx.rg(a) {
                let hv = cx.value(h);
                let s = slot(grads, cx.nodes, a).unwrap();
                for (t, st) in s.iter_mut().enumerate() {
                    *st += dot(g, &hv[t * n..(t + 1) * n]);
                }
            }
            if cx.rg(h) {
                let av = cx.value(a);
                let s = slot(grads, cx.nodes, h).unwrap();
                for (t, &at) in av.iter().enumerate() {
                    axpy(at, g, &mut s[t * n..(t + 1) * n]);
                }
            }
        }
        Op::BilinearProject { m, g: gt, transposed } => {
            let k = cx.shape(gt)[0];
            let d = cx.shape(gt)[1];
            if cx.rg(m) {
                let gv = cx.value(gt);
                let s = slot(grads, cx.nodes, m).unwrap();
                for kk in 0..k {
                    let slice = &gv[kk * d * d..(kk + 1) * d * d];
                    let gu = &g[kk * d..(kk + 1) * d];
                    if transposed {
                        for (b, &gub) in gu.iter().enumerate() {
                            axpy(gub, &slice[b * d..(b + 1) * d], s);
                        }
                    } else {
                        for (a, sa) in s.iter_mut().enumerate() {
                            *sa += dot(&slice[a * d..(a + 1) * d], gu);
                        }
                    }
                }
            }
            if cx.rg(gt) {
                let mv = cx.value(m);
                let s = slot(grads, cx.nodes, gt).unwrap();
                for kk in 0..k {
                    let gu = &g[kk * d..(kk + 1) * d];
                    let sk = &mut s[kk * d * d..(kk + 1) * d * d];
                    if transposed {
                        for (b, &gub) in gu.iter().enumerate() {
                            axpy(gub, &mv, &mut sk[b * d..(b + 1) * d]);
                        }
                    } else {
                        for (a, &ma) in mv.iter().enumerate() {
                            axpy(ma, gu, &mut sk[a * d..(a + 1) * d]);
                        }
                    }
                }
            }
        }
        Op::Concat(a, b) => {
            let (_, p) = split_last(cx.shape(a));
            let (_, q) = split_last(cx.shape(b));
            if let Some(s) = slot(grads, cx.nodes, a) {
                for (r, grow) in g.chunks(p + q).enumerate() {
                    add_into(&grow[..p], &mut s[r * p..(r + 1) * p]);
                }
            }
            if let Some(s) = slot(grads, cx.nodes, b) {
                for (r, grow) in g.chunks(p + q).enumerate() {
                    add_into(&grow[p..], &mut s[r * q..(r + 1) * q]);
                }
            }
        }
        Op::Slice { x, start } => {
            let (_, n) = split_last(cx.shape(x));
            let len = *cx.nodes[id.0].shape.last().unwrap();
            if let Some(s) = slot(grads, cx.nodes, x) {
                for (r, grow) in g.chunks(len).enumerate() {
                    add_into(grow, &mut s[r * n + start..r * n + start + len]);
                }
            }
        }
        Op::Row { x, index } => {
            let n = g.len();
            if let Some(s) = slot(grads, cx.nodes, x) {
                add_into(g, &mut s[index * n..(index + 1) * n]);
            }
        }
        Op::Stack(ref rows) => {
            let n = cx.nodes[id.0].shape[1];
            for (t, &r) in rows.iter().enumerate() {
                if let Some(s) = slot(grads, cx.nodes, r) {
                    add_into(&g[t * n..(t + 1) * n], s);
                }
            }
        }
        Op::Broadcast(x) => {
            let n = cx.value(x).len();
            if let Some(s) = slot(grads, cx.nodes, x) {
                for row in g.chunks(n) {
                    add_into(row, s);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(s) = slot(grads, cx.nodes, x) {
                add_into(g, s);
            }
        }
        Op::Gather { table, ref indices } => {
            let d = cx.shape(table)[1];
            if let Some(s) = slot(grads, cx.nodes, table) {
                for (t, &i) in indices.iter().enumerate() {
                    add_into(&g[t * d..(t + 1) * d], &mut s[i * d..(i + 1) * d]);
                }
            }
        }
        Op::Relu(x) => {
            let y = &cx.nodes[id.0].value;
            if let Some(s) = slot(grads, cx.nodes, x) {
                for ((si, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                    if yi > F::zero() {
                        *si += gi;
                    }
                }
            }
        }
        Op::Tanh(x) => {
            let y = &cx.nodes[id.0].value;
            if let Some(s) = slot(grads, cx.nodes, x) {
                for ((si, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                    *si += gi * (F::one() - yi * yi);
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = &cx.nodes[id.0].value;
            if let Some(s) = slot(grads, cx.nodes, x) {
                for ((si, &gi), &yi) in s.iter_mut().zip(g).zip(y) {
                    *si += gi * yi * (F::one() - yi);
                }
            }
        }
        Op::Ln(x) => {
            let xv = cx.value(x);
            if let Some(s) = slot(grads, cx.nodes, x) {
                for ((si, &gi), &xi) in s.iter_mut().zip(g).zip(xv) {
                    *si += gi / xi;
                }
            }
        }
        Op::Softmax { x, axis } => {
            let shape = &cx.nodes[id.0].shape;
            let y = &cx.nodes[id.0].value;
            let (outer, n, inner) = axis_split(&shape, axis);
            if let Some(s) = slot(grads, cx.nodes, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let mut gy = F::zero();
                        for k in 0..n {
                            gy += g[idx(k)] * y[idx(k)];
                        }
                        for k in 0..n {
                            s[idx(k)] += y[idx(k)] * (g[idx(k)] - gy);
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            let g0 = g[0];
            if let Some(s) = slot(grads, cx.nodes, x) {
                s.iter_mut().for_each(|si| *si += g0);
            }
        }
        Op::Nll { p, ref labels } => {
            let (_, c) = split_last(cx.shape(p));
            let pv = cx.value(p);
            let g0 = g[0];
            if let Some(s) = slot(grads, cx.nodes, p) {
                for (t, &y) in labels.iter().enumerate() {
                    s[t * c + y] -= g0 / pv[t * c + y];
                }
            }
        }
        Op::CrossEntropyRows {
            logits,
            ref labels,
            ref probs,
        } => {
            let c = cx.shape(logits)[1];
            if let Some(s) = slot(grads, cx.nodes, logits) {
                for (t, &y) in labels.iter().enumerate() {
                    let gt = g[t];
                    if gt == F::zero() {
                        continue;
                    }
                    let row = &mut s[t * c..(t + 1) * c];
                    axpy(gt, &probs[t * c..(t + 1) * c], row);
                    row[y] -= gt;
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn sigmoid<F: Real>(a: F) -> F {
    if a >= F::zero() {
        F::one() / (F::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::params::Partition;

    fn empty() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn relu_and_softmax_values() {
        let s = empty();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::vector(vec![0.0; 3]));
        let p = g.softmax(z, 0).unwrap();
        for &v in g.value(p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn nll_of_uniform_13() {
        let s = empty();
        let mut g = Graph::new(&s);
        let z = g.constant(Tensor::zeros(&[1, 13]));
        let p = g.softmax(z, 1).unwrap();
        let l = g.nll(p, &[7]).unwrap();
        assert!((g.scalar(l) - 13f64.ln()).abs() < 1e-12);
        assert!((g.scalar(l) - 2.5649).abs() < 1e-4);
    }

    #[test]
    fn product_rule_and_relu_gate() {
        let s = empty();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![2.0]), true);
        let y = g.input(Tensor::vector(vec![3.0]), true);
        let xy = g.mul(x, y).unwrap();
        let root = g.sum(xy);
        g.backward(root).unwrap();
        assert_eq!(g.grad(root).unwrap(), &[1.0]);
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert_eq!(g.grad(y).unwrap(), &[2.0]);

        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![-1.0]), true);
        let r = g.relu(x);
        let root = g.sum(r);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn bilinear_hand_example() {
        let mut s = empty();
        let gid = s
            .add(
                "G",
                Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                Partition::Feature,
            )
            .unwrap();
        let mut g = Graph::new(&s);
        let m = g.input(Tensor::vector(vec![1.0, 0.0]), true);
        let h = g.input(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(), true);
        let gn = g.param(gid);
        let r = g.bilinear(m, gn, h, false).unwrap();
        assert_eq!(g.value(r), &[2.0]);
        let root = g.sum(r);
        g.backward(root).unwrap();
        assert_eq!(g.grad(h).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.grad(m).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn transposed_bilinear_swaps_indices() {
        let mut s = empty();
        let gid = s
            .add(
                "G",
                Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                Partition::Feature,
            )
            .unwrap();
        let mut g = Graph::new(&s);
        let m = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let h = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let gn = g.param(gid);
        let r = g.bilinear(m, gn, h, true).unwrap();
        // mᵀ Gᵀ h = hᵀ G m = G[1][0] = 3
        assert_eq!(g.value(r), &[3.0]);
    }

    #[test]
    fn grad_reverse_contract() {
        let s = empty();
        for (lambda, want) in [(0.1, -0.1), (0.0, 0.0)] {
            let mut g = Graph::new(&s);
            let x = g.input(Tensor::vector(vec![1.5, -2.0]), true);
            let r = g.grad_reverse(x, lambda);
            assert_eq!(g.value(r), &[1.5, -2.0]);
            let root = g.sum(r);
            g.backward(root).unwrap();
            for &v in g.grad(x).unwrap() {
                assert!((v - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // root = a*b + a*c with b = 2a, c = a + 1  =>  root = 2a² + a² + a
        let s = empty();
        let mut g = Graph::new(&s);
        let a = g.input(Tensor::vector(vec![1.5]), true);
        let b = g.scale(a, 2.0);
        let one = g.constant(Tensor::vector(vec![1.0]));
        let c = g.add(a, one).unwrap();
        let ab = g.mul(a, b).unwrap();
        let ac = g.mul(a, c).unwrap();
        let sum = g.add(ab, ac).unwrap();
        let root = g.sum(sum);
        g.backward(root).unwrap();
        // d/da (3a² + a) = 6a + 1
        assert!((g.grad(a).unwrap()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let s = empty();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_error_names_op() {
        let s = empty();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch in add: [2] vs [1]");
    }

    #[test]
    fn unreachable_nodes_untouched() {
        let s = empty();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::vector(vec![1.0]), true);
        let y = g.input(Tensor::vector(vec![2.0]), true);
        let root = g.sum(x);
        let _later = g.sum(y);
        g.backward(root).unwrap();
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_reproducible_in_training() {
        use rand::SeedableRng;
        let s = empty();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::vector(vec![1.0; 16]));
        assert_eq!(g.dropout(x, 0.5), x);

        let masks: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut g = Graph::training(&s, ChaCha8Rng::seed_from_u64(4));
                let x = g.constant(Tensor::vector(vec![1.0; 16]));
                let d = g.dropout(x, 0.5);
                g.value(d).to_vec()
            })
            .collect();
        assert_eq!(masks[0], masks[1]);
        assert!(masks[0].iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
