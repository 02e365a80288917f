//! Tape-based reverse-mode autodiff over 1-D/2-D tensors.
//!
//! A fresh graph is built per training step: leaves are registered from a
//! [`ParamSet`], ops append nodes in topological order, and `backward`
//! walks the tape in reverse. Every op validates shapes up front and checks
//! its output for non-finite values, so a graph that builds without error
//! holds only finite numbers.

use std::collections::HashMap;

use super::kernels as k;
use super::{rf, NumericsError, ParamSet, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulNt { a: NodeId, b: NodeId },
    MatVec { x: NodeId, w: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    AddScalar { a: NodeId, s: NodeId },
    Scale { a: NodeId, c: F },
    Gelu { a: NodeId },
    Exp { a: NodeId },
    Clamp { a: NodeId, lo: F, hi: F },
    Min2 { a: NodeId, b: NodeId },
    Square { a: NodeId },
    Mean { a: NodeId },
    Sum { a: NodeId },
    SoftmaxRows { a: NodeId, cols: usize },
    CausalSoftmax { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: F },
    Embed { table: NodeId, ids: Vec<usize> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    GatherLogSoftmax { logits: NodeId, targets: Vec<usize> },
    CrossEntropySum { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

#[derive(Debug, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Parameter-name → leaf-node binding for one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.into()))
    }
}

/// Register every parameter of `set` as a leaf of `g`.
pub fn bind_params<F: Real>(g: &mut Graph<F>, set: &ParamSet<F>) -> BoundParams {
    let mut ids = HashMap::new();
    for p in set.iter() {
        ids.insert(p.name.clone(), g.leaf(&p.tensor));
    }
    BoundParams { ids }
}

/// Copy accumulated leaf gradients back into the parameter set.
/// Trainable parameters that did not participate get zero gradients.
pub fn harvest_grads<F: Real>(
    g: &Graph<F>,
    bound: &BoundParams,
    set: &mut ParamSet<F>,
) -> Result<()> {
    let names: Vec<String> = set
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let id = bound.id(&name)?;
        let grad = g
            .grad(id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![F::zero(); g.value(id).len()]);
        set.get_mut(&name)?.tensor.set_grad(Some(grad));
    }
    Ok(())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn leaf(&mut self, t: &Tensor<F>) -> NodeId {
        self.push_unchecked(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<NodeId> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push_unchecked(
            t.shape().to_vec(),
            t.data().to_vec(),
            false,
            Op::Leaf,
        ))
    }

    pub fn scalar_const(&mut self, x: F) -> NodeId {
        self.push_unchecked(vec![1], vec![x], false, Op::Leaf)
    }

    fn push_unchecked(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        needs_grad: bool,
        op: Op<F>,
    ) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        needs_grad: bool,
        op: Op<F>,
        name: &str,
    ) -> Result<NodeId> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite(name.into()));
        }
        Ok(self.push_unchecked(shape, data, needs_grad, op))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn dims2(&self, id: NodeId, name: &str) -> Result<(usize, usize)> {
        match *self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((r, c)),
            ref s => Err(NumericsError::ShapeMismatch(format!(
                "{name}: expected 2-D, got {s:?}"
            ))),
        }
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul lhs")?;
        let (kb, n) = self.dims2(b, "matmul rhs")?;
        if ka != kb {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul: inner extents {ka} vs {kb}"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        k::gemm_nn(self.value(a), self.value(b), &mut out, m, ka, n);
        self.push(vec![m, n], out, self.needs(&[a, b]), Op::MatMul { a, b }, "matmul")
    }

    /// a @ b^T with b stored [n×k]; used for attention scores and the tied
    /// LM head.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul_nt lhs")?;
        let (n, kb) = self.dims2(b, "matmul_nt rhs")?;
        if ka != kb {
            return Err(NumericsError::ShapeMismatch(format!(
                "matmul_nt: inner extents {ka} vs {kb}"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        k::gemm_nt(self.value(a), self.value(b), &mut out, m, ka, n);
        self.push(vec![m, n], out, self.needs(&[a, b]), Op::MatMulNt { a, b }, "matmul_nt")
    }

    /// [m×n] @ [n] -> [m].
    pub fn matvec(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "matvec lhs")?;
        if self.shape(w) != [n] {
            return Err(NumericsError::ShapeMismatch(format!(
                "matvec: vector shape {:?} vs cols {n}",
                self.shape(w)
            )));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let out: Vec<F> = (0..m).map(|i| k::dot(&xv[i * n..(i + 1) * n], wv)).collect();
        self.push(vec![m], out, self.needs(&[x, w]), Op::MatVec { x, w }, "matvec")
    }

    fn elementwise2(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
        name: &str,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, self.needs(&[a, b]), op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    /// Minimum of two same-shape tensors; gradient follows the smaller
    /// operand (ties go to `a`).
    pub fn min2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, |x, y| if x <= y { x } else { y }, Op::Min2 { a, b }, "min2")
    }

    /// [m×n] + [n] row broadcast.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "add_bias lhs")?;
        if self.shape(bias) != [n] {
            return Err(NumericsError::ShapeMismatch(format!(
                "add_bias: bias {:?} vs cols {n}",
                self.shape(bias)
            )));
        }
        let av = self.value(a);
        let bv = self.value(bias);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        self.push(vec![m, n], out, self.needs(&[a, bias]), Op::AddBias { a, bias }, "add_bias")
    }

    /// [n] + scalar [1] broadcast.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(NumericsError::ShapeMismatch("add_scalar: rhs not scalar".into()));
        }
        let sv = self.value(s)[0];
        let out: Vec<F> = self.value(a).iter().map(|&x| x + sv).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, self.needs(&[a, s]), Op::AddScalar { a, s }, "add_scalar")
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let out: Vec<F> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(shape, out, needs, Op::Scale { a, c }, "scale")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<F> = self.value(a).iter().map(|&x| k::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(shape, out, needs, Op::Gelu { a }, "gelu")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<F> = self.value(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(shape, out, needs, Op::Exp { a }, "exp")
    }

    /// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> Result<NodeId> {
        let out: Vec<F> = self
            .value(a)
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(shape, out, needs, Op::Clamp { a, lo, hi }, "clamp")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<F> = self.value(a).iter().map(|&x| x * x).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(shape, out, needs, Op::Square { a }, "square")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(NumericsError::ShapeMismatch("mean of empty tensor".into()));
        }
        let mut s = F::zero();
        for &x in v {
            s = s + x;
        }
        let out = vec![s / rf::<F>(v.len() as f64)];
        let needs = self.needs(&[a]);
        self.push(vec![1], out, needs, Op::Mean { a }, "mean")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let mut s = F::zero();
        for &x in self.value(a) {
            s = s + x;
        }
        let needs = self.needs(&[a]);
        self.push(vec![1], vec![s], needs, Op::Sum { a }, "sum")
    }

    /// Softmax along `axis`. Supports 1-D (axis 0) and 2-D (axis 1, i.e.
    /// per row); other layouts are not needed by the models here.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let cols = match (shape.as_slice(), axis) {
            ([n], 0) => *n,
            ([_, c], 1) => *c,
            _ => {
                return Err(NumericsError::ShapeMismatch(format!(
                    "softmax: axis {axis} invalid for shape {shape:?}"
                )))
            }
        };
        if cols == 0 {
            return Err(NumericsError::ShapeMismatch("softmax over empty axis".into()));
        }
        let v = self.value(a);
        let rows = v.len() / cols;
        let mut out = vec![F::zero(); v.len()];
        for i in 0..rows {
            k::softmax_row(&v[i * cols..(i + 1) * cols], &mut out[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(&[a]);
        self.push(shape, out, needs, Op::SoftmaxRows { a, cols }, "softmax")
    }

    /// Causally masked softmax over a square score matrix: row i is a
    /// softmax over columns 0..=i, zero beyond.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (t, t2) = self.dims2(a, "causal_softmax")?;
        if t != t2 {
            return Err(NumericsError::ShapeMismatch(format!(
                "causal_softmax: square matrix required, got [{t}, {t2}]"
            )));
        }
        let v = self.value(a);
        let mut out = vec![F::zero(); t * t];
        for i in 0..t {
            k::softmax_row(&v[i * t..i * t + i + 1], &mut out[i * t..i * t + i + 1]);
        }
        let needs = self.needs(&[a]);
        self.push(vec![t, t], out, needs, Op::CausalSoftmax { a }, "causal_softmax")
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> Result<NodeId> {
        let (rows, cols) = match *self.shape(x) {
            [n] => (1, n),
            [r, c] => (r, c),
            ref s => {
                return Err(NumericsError::ShapeMismatch(format!(
                    "layer_norm: expected 1-D or 2-D, got {s:?}"
                )))
            }
        };
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(NumericsError::ShapeMismatch(format!(
                "layer_norm: gamma {:?} / beta {:?} vs cols {cols}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut out = vec![F::zero(); xv.len()];
        for i in 0..rows {
            k::layer_norm_row(
                &xv[i * cols..(i + 1) * cols],
                &gv,
                &bv,
                eps,
                &mut out[i * cols..(i + 1) * cols],
            );
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, gamma, beta]);
        self.push(shape, out, needs, Op::LayerNorm { x, gamma, beta, eps }, "layer_norm")
    }

    /// Row gather from an embedding table: out[t] = table[ids[t]].
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2(table, "embed table")?;
        for &id in ids {
            if id >= v {
                return Err(NumericsError::InvalidTarget { index: id, vocab: v });
            }
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(&[table]);
        self.push(
            vec![ids.len(), d],
            out,
            needs,
            Op::Embed { table, ids: ids.to_vec() },
            "embed",
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(a, "slice_rows")?;
        if start + len > rows {
            return Err(NumericsError::ShapeMismatch(format!(
                "slice_rows: [{start}, {}) out of {rows} rows",
                start + len
            )));
        }
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(&[a]);
        self.push(vec![len, cols], out, needs, Op::SliceRows { a, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + len > cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "slice_cols: [{start}, {}) out of {cols} cols",
                start + len
            )));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&v[i * cols + start..i * cols + start + len]);
        }
        let needs = self.needs(&[a]);
        self.push(vec![rows, len], out, needs, Op::SliceCols { a, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch("concat_cols of nothing".into()));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols part")?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch(format!(
                    "concat_cols: row mismatch {r} vs {rows}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                out.extend_from_slice(&v[i * w..(i + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        self.push(
            vec![rows, total],
            out,
            needs,
            Op::ConcatCols { parts: parts.to_vec() },
            "concat_cols",
        )
    }

    /// Per-row log softmax gathered at a target id: [T×V] -> [T].
    pub fn gather_log_softmax(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, vocab) = self.dims2(logits, "gather_log_softmax")?;
        if targets.len() != rows {
            return Err(NumericsError::ShapeMismatch(format!(
                "gather_log_softmax: {} targets for {rows} rows",
                targets.len()
            )));
        }
        for &t in targets {
            if t >= vocab {
                return Err(NumericsError::InvalidTarget { index: t, vocab });
            }
        }
        let v = self.value(logits);
        let out: Vec<F> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| k::log_softmax_gather(&v[i * vocab..(i + 1) * vocab], t))
            .collect();
        let needs = self.needs(&[logits]);
        self.push(
            vec![rows],
            out,
            needs,
            Op::GatherLogSoftmax { logits, targets: targets.to_vec() },
            "gather_log_softmax",
        )
    }

    /// Sum over masked rows of -log softmax(logits)[target]; pair with a
    /// `scale` by 1/count for a mean. Errors if every row is masked out.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(NodeId, usize)> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(NumericsError::ShapeMismatch(format!(
                "cross_entropy: {} targets / {} mask for {rows} rows",
                targets.len(),
                mask.len()
            )));
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= vocab {
                return Err(NumericsError::InvalidTarget { index: t, vocab });
            }
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumericsError::EmptyLoss);
        }
        let v = self.value(logits);
        let mut loss = F::zero();
        for i in 0..rows {
            if mask[i] {
                loss = loss - k::log_softmax_gather(&v[i * vocab..(i + 1) * vocab], targets[i]);
            }
        }
        let needs = self.needs(&[logits]);
        let id = self.push(
            vec![1],
            vec![loss],
            needs,
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            "cross_entropy",
        )?;
        Ok((id, count))
    }

    /// Mean negative log-likelihood over unmasked positions.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (sum, count) = self.cross_entropy_sum(logits, targets, mask)?;
        self.scale(sum, rf::<F>(1.0 / count as f64))
    }

    // ---- backward -----------------------------------------------------

    fn take_grad_buf(&mut self, id: NodeId) -> Option<Vec<F>> {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        Some(
            node.grad
                .take()
                .unwrap_or_else(|| vec![F::zero(); node.data.len()]),
        )
    }

    fn put_grad(&mut self, id: NodeId, g: Vec<F>) {
        self.nodes[id.0].grad = Some(g);
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(NumericsError::ShapeMismatch(
                "backward root must be scalar".into(),
            ));
        }
        if !self.nodes[root.0].needs_grad {
            return Ok(()); // nothing trainable feeds the root
        }
        self.nodes[root.0].grad = Some(vec![F::one()]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let gout = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, kk) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        k::gemm_nt(&gout, self.value(b), &mut ga, m, n, kk);
                        self.put_grad(a, ga);
                    }
                    if let Some(mut gb) = self.take_grad_buf(b) {
                        k::gemm_tn(self.value(a), &gout, &mut gb, kk, m, n);
                        self.put_grad(b, gb);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (m, kk) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[0];
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        k::gemm_nn(&gout, self.value(b), &mut ga, m, n, kk);
                        self.put_grad(a, ga);
                    }
                    if let Some(mut gb) = self.take_grad_buf(b) {
                        k::gemm_tn(&gout, self.value(a), &mut gb, n, m, kk);
                        self.put_grad(b, gb);
                    }
                }
                Op::MatVec { x, w } => {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    if let Some(mut gx) = self.take_grad_buf(x) {
                        let wv = self.value(w);
                        for i2 in 0..m {
                            let gi = gout[i2];
                            for j in 0..n {
                                gx[i2 * n + j] = gx[i2 * n + j] + gi * wv[j];
                            }
                        }
                        self.put_grad(x, gx);
                    }
                    if let Some(mut gw) = self.take_grad_buf(w) {
                        let xv = self.value(x);
                        for i2 in 0..m {
                            let gi = gout[i2];
                            for j in 0..n {
                                gw[j] = gw[j] + gi * xv[i2 * n + j];
                            }
                        }
                        self.put_grad(w, gw);
                    }
                }
                Op::Add { a, b } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        axpy(&mut ga, &gout, F::one());
                        self.put_grad(a, ga);
                    }
                    if let Some(mut gb) = self.take_grad_buf(b) {
                        axpy(&mut gb, &gout, F::one());
                        self.put_grad(b, gb);
                    }
                }
                Op::Sub { a, b } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        axpy(&mut ga, &gout, F::one());
                        self.put_grad(a, ga);
                    }
                    if let Some(mut gb) = self.take_grad_buf(b) {
                        axpy(&mut gb, &gout, -F::one());
                        self.put_grad(b, gb);
                    }
                }
                Op::Mul { a, b } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        for ((g, &go), &bv) in ga.iter_mut().zip(&gout).zip(self.nodes[b.0].data.iter()) {
                            *g = *g + go * bv;
                        }
                        self.put_grad(a, ga);
                    }
                    if let Some(mut gb) = self.take_grad_buf(b) {
                        for ((g, &go), &av) in gb.iter_mut().zip(&gout).zip(self.nodes[a.0].data.iter()) {
                            *g = *g + go * av;
                        }
                        self.put_grad(b, gb);
                    }
                }
                Op::Min2 { a, b } => {
                    let (av, bv) = (self.nodes[a.0].data.clone(), self.nodes[b.0].data.clone());
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        for i2 in 0..gout.len() {
                            if av[i2] <= bv[i2] {
                                ga[i2] = ga[i2] + gout[i2];
                            }
                        }
                        self.put_grad(a, ga);
                    }
                    if let Some(mut gb) = self.take_grad_buf(b) {
                        for i2 in 0..gout.len() {
                            if av[i2] > bv[i2] {
                                gb[i2] = gb[i2] + gout[i2];
                            }
                        }
                        self.put_grad(b, gb);
                    }
                }
                Op::AddBias { a, bias } => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        axpy(&mut ga, &gout, F::one());
                        self.put_grad(a, ga);
                    }
                    if let Some(mut gb) = self.take_grad_buf(bias) {
                        for i2 in 0..m {
                            for j in 0..n {
                                gb[j] = gb[j] + gout[i2 * n + j];
                            }
                        }
                        self.put_grad(bias, gb);
                    }
                }
                Op::AddScalar { a, s } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        axpy(&mut ga, &gout, F::one());
                        self.put_grad(a, ga);
                    }
                    if let Some(mut gs) = self.take_grad_buf(s) {
                        let mut acc = F::zero();
                        for &g in &gout {
                            acc = acc + g;
                        }
                        gs[0] = gs[0] + acc;
                        self.put_grad(s, gs);
                    }
                }
                Op::Scale { a, c } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        axpy(&mut ga, &gout, c);
                        self.put_grad(a, ga);
                    }
                }
                Op::Gelu { a } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let av = &self.nodes[a.0].data;
                        for i2 in 0..gout.len() {
                            ga[i2] = ga[i2] + gout[i2] * k::gelu_deriv(av[i2]);
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::Exp { a } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let yv = &self.nodes[i].data;
                        for i2 in 0..gout.len() {
                            ga[i2] = ga[i2] + gout[i2] * yv[i2];
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let av = &self.nodes[a.0].data;
                        for i2 in 0..gout.len() {
                            if av[i2] >= lo && av[i2] <= hi {
                                ga[i2] = ga[i2] + gout[i2];
                            }
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::Square { a } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let two = rf::<F>(2.0);
                        let av = &self.nodes[a.0].data;
                        for i2 in 0..gout.len() {
                            ga[i2] = ga[i2] + gout[i2] * two * av[i2];
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::Mean { a } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let c = gout[0] / rf::<F>(ga.len() as f64);
                        for g in ga.iter_mut() {
                            *g = *g + c;
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::Sum { a } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        for g in ga.iter_mut() {
                            *g = *g + gout[0];
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::SoftmaxRows { a, cols } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let p = &self.nodes[i].data;
                        let rows = p.len() / cols;
                        for r in 0..rows {
                            let prow = &p[r * cols..(r + 1) * cols];
                            let grow = &gout[r * cols..(r + 1) * cols];
                            let dotgp = k::dot(grow, prow);
                            for c in 0..cols {
                                ga[r * cols + c] =
                                    ga[r * cols + c] + prow[c] * (grow[c] - dotgp);
                            }
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::CausalSoftmax { a } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let p = &self.nodes[i].data;
                        let t = self.nodes[i].shape[0];
                        for r in 0..t {
                            let prow = &p[r * t..r * t + r + 1];
                            let grow = &gout[r * t..r * t + r + 1];
                            let dotgp = k::dot(grow, prow);
                            for c in 0..=r {
                                ga[r * t + c] = ga[r * t + c] + prow[c] * (grow[c] - dotgp);
                            }
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let cols = *self.nodes[x.0].shape.last().unwrap();
                    let rows = self.nodes[x.0].data.len() / cols;
                    let xv = self.nodes[x.0].data.clone();
                    let gv = self.nodes[gamma.0].data.clone();
                    let n = rf::<F>(cols as f64);
                    // per-row stats recomputed; cheaper than saving them
                    let mut xhat = vec![F::zero(); xv.len()];
                    let mut inv_sigma = vec![F::zero(); rows];
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let mut mean = F::zero();
                        for &v in row {
                            mean = mean + v;
                        }
                        mean = mean / n;
                        let mut var = F::zero();
                        for &v in row {
                            let d = v - mean;
                            var = var + d * d;
                        }
                        var = var / n;
                        let inv = (var + eps).sqrt().recip();
                        inv_sigma[r] = inv;
                        for c in 0..cols {
                            xhat[r * cols + c] = (row[c] - mean) * inv;
                        }
                    }
                    if let Some(mut gg) = self.take_grad_buf(gamma) {
                        for r in 0..rows {
                            for c in 0..cols {
                                gg[c] = gg[c] + gout[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                        self.put_grad(gamma, gg);
                    }
                    if let Some(mut gb) = self.take_grad_buf(beta) {
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] = gb[c] + gout[r * cols + c];
                            }
                        }
                        self.put_grad(beta, gb);
                    }
                    if let Some(mut gx) = self.take_grad_buf(x) {
                        for r in 0..rows {
                            let mut mean_g = F::zero();
                            let mut mean_gx = F::zero();
                            for c in 0..cols {
                                let g = gout[r * cols + c] * gv[c];
                                mean_g = mean_g + g;
                                mean_gx = mean_gx + g * xhat[r * cols + c];
                            }
                            mean_g = mean_g / n;
                            mean_gx = mean_gx / n;
                            for c in 0..cols {
                                let g = gout[r * cols + c] * gv[c];
                                gx[r * cols + c] = gx[r * cols + c]
                                    + inv_sigma[r] * (g - mean_g - xhat[r * cols + c] * mean_gx);
                            }
                        }
                        self.put_grad(x, gx);
                    }
                }
                Op::Embed { table, ids } => {
                    if let Some(mut gt) = self.take_grad_buf(table) {
                        let d = self.nodes[table.0].shape[1];
                        for (t, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                gt[id * d + c] = gt[id * d + c] + gout[t * d + c];
                            }
                        }
                        self.put_grad(table, gt);
                    }
                }
                Op::SliceRows { a, start } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let cols = self.nodes[a.0].shape[1];
                        for (idx, &g) in gout.iter().enumerate() {
                            ga[start * cols + idx] = ga[start * cols + idx] + g;
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::SliceCols { a, start } => {
                    if let Some(mut ga) = self.take_grad_buf(a) {
                        let cols = self.nodes[a.0].shape[1];
                        let width = self.nodes[i].shape[1];
                        let rows = self.nodes[i].shape[0];
                        for r in 0..rows {
                            for c in 0..width {
                                ga[r * cols + start + c] =
                                    ga[r * cols + start + c] + gout[r * width + c];
                            }
                        }
                        self.put_grad(a, ga);
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.nodes[p.0].shape[1];
                        if let Some(mut gp) = self.take_grad_buf(p) {
                            for r in 0..rows {
                                for c in 0..w {
                                    gp[r * w + c] = gp[r * w + c] + gout[r * total + offset + c];
                                }
                            }
                            self.put_grad(p, gp);
                        }
                        offset += w;
                    }
                }
                Op::GatherLogSoftmax { logits, targets } => {
                    if let Some(mut gl) = self.take_grad_buf(logits) {
                        let vocab = self.nodes[logits.0].shape[1];
                        let lv = &self.nodes[logits.0].data;
                        let mut probs = vec![F::zero(); vocab];
                        for (r, &t) in targets.iter().enumerate() {
                            let g = gout[r];
                            if g == F::zero() {
                                continue;
                            }
                            k::softmax_row(&lv[r * vocab..(r + 1) * vocab], &mut probs);
                            for c in 0..vocab {
                                gl[r * vocab + c] = gl[r * vocab + c] - g * probs[c];
                            }
                            gl[r * vocab + t] = gl[r * vocab + t] + g;
                        }
                        self.put_grad(logits, gl);
                    }
                }
                Op::CrossEntropySum { logits, targets, mask } => {
                    if let Some(mut gl) = self.take_grad_buf(logits) {
                        let vocab = self.nodes[logits.0].shape[1];
                        let lv = &self.nodes[logits.0].data;
                        let g = gout[0];
                        let mut probs = vec![F::zero(); vocab];
                        for (r, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
                            if !m {
                                continue;
                            }
                            k::softmax_row(&lv[r * vocab..(r + 1) * vocab], &mut probs);
                            for c in 0..vocab {
                                gl[r * vocab + c] = gl[r * vocab + c] + g * probs[c];
                            }
                            gl[r * vocab + t] = gl[r * vocab + t] - g;
                        }
                        self.put_grad(logits, gl);
                    }
                }
            }
            self.nodes[i].grad = Some(gout);
        }
        Ok(())
    }
}

#[inline]
fn axpy<F: Real>(acc: &mut [F], x: &[F], c: F) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + c * v;
    }
}
