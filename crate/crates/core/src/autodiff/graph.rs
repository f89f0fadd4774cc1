use crate::autodiff::kernels;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Variance floor used by [`Graph::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// The operation that produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    MatMul,
    ReduceSum,
    ReduceMean,
    Softmax,
    LayerNorm,
    Gelu,
    EmbedLookup,
    Concat,
    Slice,
    ScatterRows,
    Scale,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var },
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    ReduceSum { a: Var },
    ReduceMean { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gelu { a: Var },
    EmbedLookup { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { a: Var, axis: Axis, start: usize },
    ScatterRows { base: Var, updates: Var, indices: Vec<usize> },
    Scale { a: Var, factor: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::ReduceSum { .. } => OpKind::ReduceSum,
            Op::ReduceMean { .. } => OpKind::ReduceMean,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::EmbedLookup { .. } => OpKind::EmbedLookup,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::Scale { .. } => OpKind::Scale,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// its consumer's id and the graph is acyclic by construction. A graph admits
/// exactly one [`Graph::backward`] call.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Leaves with a gradient, as `(node id, gradient)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        check_finite("param", value.data())?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        check_finite("constant", value.data())?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Elementwise sum. `b` may also be a single row (`[d]` or `[1, d]`)
    /// broadcast over every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            false
        } else if vb.len() == va.cols() && vb.rows() <= 1 && va.shape().len() >= 2 {
            true
        } else {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        };
        let mut out = va.data().to_vec();
        if broadcast {
            let w = va.cols();
            for row in out.chunks_mut(w) {
                for (o, &x) in row.iter_mut().zip(vb.data()) {
                    *o += x;
                }
            }
        } else {
            for (o, &x) in out.iter_mut().zip(vb.data()) {
                *o += x;
            }
        }
        let value = Tensor::from_parts(va.shape().to_vec(), out);
        self.emit("add", value, Op::Add { a, b, broadcast }, &[a, b])
    }

    /// `a - b` for equal shapes, expressed with [`Graph::scale`] and [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| {
                shape_err(
                    "mul",
                    format!("{:?} * {:?}", self.value(a).shape(), self.value(b).shape()),
                )
            })?;
        self.emit("mul", value, Op::Mul { a, b }, &[a, b])
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (ar, ac) = matrix_dims(self.value(a), "matmul")?;
        let (br, bc) = matrix_dims(self.value(b), "matmul")?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{m}x{k}] @ [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::from_parts(vec![m, n], out);
        self.emit(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let value = Tensor::scalar(self.value(a).sum());
        self.emit("reduce-sum", value, Op::ReduceSum { a }, &[a])
    }

    /// Mean of every element, as a `[1]` tensor.
    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("reduce-mean", "empty input"));
        }
        let value = Tensor::scalar(t.mean());
        self.emit("reduce-mean", value, Op::ReduceMean { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let t = self.value(a);
        let w = t.cols();
        let mut out = t.data().to_vec();
        if w > 0 {
            kernels::softmax_rows(&mut out, w);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.emit("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Normalisation over the last axis without learned affine terms.
    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let t = self.value(a);
        let w = t.cols();
        if w == 0 {
            return Err(shape_err("layernorm", "zero-width rows"));
        }
        let mut out = t.data().to_vec();
        let inv_std = kernels::layernorm_rows(&mut out, w, LAYERNORM_EPS);
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.emit("layernorm", value, Op::LayerNorm { a, inv_std }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let value = self.value(a).map(kernels::gelu);
        self.emit("gelu", value, Op::Gelu { a }, &[a])
    }

    /// Gathers rows `ids` of a `[V×d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_var(table)?;
        let t = self.value(table);
        let (v, d) = matrix_dims(t, "embed-lookup")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidIndices(format!(
                    "embedding id {id} outside table of {v} rows"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        self.emit(
            "embed-lookup",
            value,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenates matrices along rows or columns.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        for &p in parts {
            self.check_var(p)?;
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| matrix_dims(self.value(p), "concat"))
            .collect::<Result<_>>()?;
        let value = match axis {
            Axis::Rows => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(shape_err("concat", format!("column counts {dims:?}")));
                }
                let mut out = Vec::with_capacity(dims.iter().map(|d| d.0 * c).sum());
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
                let r = dims.iter().map(|d| d.0).sum();
                Tensor::from_parts(vec![r, c], out)
            }
            Axis::Cols => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(shape_err("concat", format!("row counts {dims:?}")));
                }
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::from_parts(vec![r, c], out)
            }
        };
        self.emit(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Contiguous block of `len` rows or columns starting at `start`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        self.check_var(a)?;
        let t = self.value(a);
        let (r, c) = matrix_dims(t, "slice")?;
        let extent = if axis == Axis::Rows { r } else { c };
        if start + len > extent {
            return Err(shape_err(
                "slice",
                format!("{start}..{} of {extent} along {axis:?}", start + len),
            ));
        }
        let value = match axis {
            Axis::Rows => Tensor::from_parts(
                vec![len, c],
                t.data()[start * c..(start + len) * c].to_vec(),
            ),
            Axis::Cols => {
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&t.row(i)[start..start + len]);
                }
                Tensor::from_parts(vec![r, len], out)
            }
        };
        self.emit("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    /// Replaces rows `indices` of `base` with the rows of `updates`, in order.
    pub fn scatter_rows(&mut self, base: Var, updates: Var, indices: &[usize]) -> Result<Var> {
        self.check_var(base)?;
        self.check_var(updates)?;
        let (n, d) = matrix_dims(self.value(base), "scatter-rows")?;
        let (m, du) = matrix_dims(self.value(updates), "scatter-rows")?;
        if d != du || m != indices.len() {
            return Err(shape_err(
                "scatter-rows",
                format!("base [{n}x{d}], updates [{m}x{du}], {} indices", indices.len()),
            ));
        }
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidIndices(format!("row {i} outside 0..{n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidIndices(format!("duplicate row {i}")));
            }
        }
        let mut out = self.value(base).data().to_vec();
        let upd = self.value(updates);
        for (j, &i) in indices.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(upd.row(j));
        }
        let value = Tensor::from_parts(vec![n, d], out);
        self.emit(
            "scatter-rows",
            value,
            Op::ScatterRows {
                base,
                updates,
                indices: indices.to_vec(),
            },
            &[base, updates],
        )
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_var(a)?;
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let value = self.value(a).map(|v| v * factor);
        self.emit("scale", value, Op::Scale { a, factor }, &[a])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::GraphSpent);
        }
        self.check_var(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.spent = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut out: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    out[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                    continue;
                }
                Op::Add { a, b, broadcast } => {
                    if ng(*a) {
                        let slot = grad_slot(&mut grads, *a, g.len());
                        for (s, &x) in slot.iter_mut().zip(&g) {
                            *s += x;
                        }
                    }
                    if ng(*b) {
                        let lb = val(*b).len();
                        let slot = grad_slot(&mut grads, *b, lb);
                        if *broadcast {
                            for row in g.chunks(lb) {
                                for (s, &x) in slot.iter_mut().zip(row) {
                                    *s += x;
                                }
                            }
                        } else {
                            for (s, &x) in slot.iter_mut().zip(&g) {
                                *s += x;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if ng(*a) {
                        let vb = val(*b).data();
                        let slot = grad_slot(&mut grads, *a, g.len());
                        for ((s, &x), &y) in slot.iter_mut().zip(&g).zip(vb) {
                            *s += x * y;
                        }
                    }
                    if ng(*b) {
                        let va = val(*a).data();
                        let slot = grad_slot(&mut grads, *b, g.len());
                        for ((s, &x), &y) in slot.iter_mut().zip(&g).zip(va) {
                            *s += x * y;
                        }
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let (ta, tb) = (*trans_a, *trans_b);
                    let (ar, ac) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let (br, bc) = (val(*b).shape()[0], val(*b).shape()[1]);
                    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                    let n = if tb { br } else { bc };
                    if ng(*a) {
                        let vb = val(*b).data();
                        let slot = grad_slot(&mut grads, *a, ar * ac);
                        if ta {
                            // a stored [k×m]: dA = op(B) · Gᵀ
                            kernels::gemm(k, n, m, vb, tb, &g, true, slot, true);
                        } else {
                            // dA [m×k] = G · op(B)ᵀ
                            kernels::gemm(m, n, k, &g, false, vb, !tb, slot, true);
                        }
                    }
                    if ng(*b) {
                        let va = val(*a).data();
                        let slot = grad_slot(&mut grads, *b, br * bc);
                        if tb {
                            // b stored [n×k]: dB = Gᵀ · op(A)
                            kernels::gemm(n, m, k, &g, true, va, ta, slot, true);
                        } else {
                            // dB [k×n] = op(A)ᵀ · G
                            kernels::gemm(k, m, n, va, !ta, &g, false, slot, true);
                        }
                    }
                }
                Op::ReduceSum { a } => {
                    let slot = grad_slot(&mut grads, *a, val(*a).len());
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                }
                Op::ReduceMean { a } => {
                    let len = val(*a).len();
                    let slot = grad_slot(&mut grads, *a, len);
                    let share = g[0] / len as f64;
                    for s in slot.iter_mut() {
                        *s += share;
                    }
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let w = node.value.cols();
                    let slot = grad_slot(&mut grads, *a, y.len());
                    for ((yr, gr), sr) in y.chunks(w).zip(g.chunks(w)).zip(slot.chunks_mut(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((s, &p), &q) in sr.iter_mut().zip(yr).zip(gr) {
                            *s += p * (q - dot);
                        }
                    }
                }
                Op::LayerNorm { a, inv_std } => {
                    let y = node.value.data();
                    let w = node.value.cols();
                    let slot = grad_slot(&mut grads, *a, y.len());
                    let wf = w as f64;
                    for (((yr, gr), sr), &inv) in y
                        .chunks(w)
                        .zip(g.chunks(w))
                        .zip(slot.chunks_mut(w))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() / wf;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / wf;
                        for ((s, &gi), &yi) in sr.iter_mut().zip(gr).zip(yr) {
                            *s += inv * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
                Op::Gelu { a } => {
                    let x = val(*a).data();
                    let slot = grad_slot(&mut grads, *a, x.len());
                    for ((s, &gi), &xi) in slot.iter_mut().zip(&g).zip(x) {
                        *s += gi * kernels::gelu_grad(xi);
                    }
                }
                Op::EmbedLookup { table, ids } => {
                    let d = val(*table).cols();
                    let slot = grad_slot(&mut grads, *table, val(*table).len());
                    for (j, &id) in ids.iter().enumerate() {
                        for (s, &x) in slot[id * d..(id + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]) {
                            *s += x;
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let total_cols = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = (val(p).shape()[0], val(p).shape()[1]);
                        if ng(p) {
                            let slot = grad_slot(&mut grads, p, pr * pc);
                            match axis {
                                Axis::Rows => {
                                    for (s, &x) in slot.iter_mut().zip(&g[offset * pc..(offset + pr) * pc]) {
                                        *s += x;
                                    }
                                }
                                Axis::Cols => {
                                    for i in 0..pr {
                                        let src = &g[i * total_cols + offset..i * total_cols + offset + pc];
                                        for (s, &x) in slot[i * pc..(i + 1) * pc].iter_mut().zip(src) {
                                            *s += x;
                                        }
                                    }
                                }
                            }
                        }
                        offset += if *axis == Axis::Rows { pr } else { pc };
                    }
                }
                Op::Slice { a, axis, start } => {
                    let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let slot = grad_slot(&mut grads, *a, r * c);
                    match axis {
                        Axis::Rows => {
                            for (s, &x) in slot[start * c..].iter_mut().zip(&g) {
                                *s += x;
                            }
                        }
                        Axis::Cols => {
                            let len = node.value.cols();
                            for i in 0..r {
                                let dst = &mut slot[i * c + start..i * c + start + len];
                                for (s, &x) in dst.iter_mut().zip(&g[i * len..(i + 1) * len]) {
                                    *s += x;
                                }
                            }
                        }
                    }
                }
                Op::ScatterRows {
                    base,
                    updates,
                    indices,
                } => {
                    let d = node.value.cols();
                    if ng(*base) {
                        let mut masked = g.clone();
                        for &i in indices {
                            masked[i * d..(i + 1) * d].fill(0.0);
                        }
                        let slot = grad_slot(&mut grads, *base, masked.len());
                        for (s, &x) in slot.iter_mut().zip(&masked) {
                            *s += x;
                        }
                    }
                    if ng(*updates) {
                        let slot = grad_slot(&mut grads, *updates, indices.len() * d);
                        for (j, &i) in indices.iter().enumerate() {
                            for (s, &x) in slot[j * d..(j + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                                *s += x;
                            }
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    let slot = grad_slot(&mut grads, *a, g.len());
                    for (s, &x) in slot.iter_mut().zip(&g) {
                        *s += x * factor;
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}
