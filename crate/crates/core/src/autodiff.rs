//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep
//! visits every node after all of its consumers. Leaves created with
//! [`Graph::constant`] never receive gradients; gradient work is skipped for
//! any subgraph that does not depend on a [`Graph::param`] leaf.

use crate::discovery::PartMaskSet;
use crate::losses::{self, AttentionStack, AttnLossKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
struct AttnLossSpec<T> {
    channels: usize,
    present: Vec<bool>,
    h: usize,
    w: usize,
    masks: PartMaskSet,
    eps: T,
    kind: AttnLossKind,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Affine { x: Var, scale: T },
    Relu(Var),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    Mse { pred: Var, target: Tensor<T> },
    AttnLoss { maps: Vec<Var>, spec: Box<AttnLossSpec<T>> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; `None` when `v` does not influence
    /// the root or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Add a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row shape");
        let mut v = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        let v = self.value(x).scaled(scale);
        let rg = self.rg(x);
        self.push(v, Op::Affine { x, scale }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut v = src.clone();
        for i in 0..src.rows() {
            let row = v.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for a in row.iter_mut() {
                *a = (*a - max).exp();
                sum += *a;
            }
            for a in row.iter_mut() {
                *a /= sum;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), t.cols(), data).unwrap();
        let rg = self.rg(table);
        self.push(v, Op::GatherRows(table, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, cols, data).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let src = self.value(x);
        let mut v = Tensor::zeros(src.rows(), cols.len());
        for i in 0..src.rows() {
            for (j, &c) in cols.iter().enumerate() {
                v[(i, j)] = src[(i, c)];
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::SelectCols(x, cols.to_vec()), rg)
    }

    /// Mean squared error against a constant target, as a `1 × 1` node.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let l = losses::diffusion_loss(target.data(), self.value(pred).data())
            .expect("mse shapes");
        let rg = self.rg(pred);
        self.push(Tensor::filled(1, 1, l), Op::Mse { pred, target }, rg)
    }

    /// Attention loss over per-layer maps.
    ///
    /// Each map is `cells × n_present`, columns ordered by present channel.
    pub fn attention_loss(
        &mut self,
        maps: &[Var],
        present: &[bool],
        h: usize,
        w: usize,
        masks: &PartMaskSet,
        eps: T,
        kind: AttnLossKind,
    ) -> crate::Result<Var> {
        let spec = AttnLossSpec {
            channels: present.len(),
            present: present.to_vec(),
            h,
            w,
            masks: masks.clone(),
            eps,
            kind,
        };
        let stack = self.assemble_stack(maps, &spec)?;
        let norm = losses::normalize_attention(&stack)?;
        let (l, _) = losses::attention_loss_with_grad(&norm, masks, eps, kind, false)?;
        let rg = maps.iter().any(|&m| self.rg(m));
        Ok(self.push(
            Tensor::filled(1, 1, l),
            Op::AttnLoss {
                maps: maps.to_vec(),
                spec: Box::new(spec),
            },
            rg,
        ))
    }

    fn assemble_stack(&self, maps: &[Var], spec: &AttnLossSpec<T>) -> crate::Result<AttentionStack<T>> {
        let cells = spec.h * spec.w;
        let live: Vec<usize> = (0..spec.channels).filter(|&m| spec.present[m]).collect();
        let mut data = vec![T::zero(); maps.len() * spec.channels * cells];
        for (l, &map) in maps.iter().enumerate() {
            let t = self.value(map);
            if t.shape() != (cells, live.len()) {
                return Err(crate::Error::Validation(format!(
                    "attention map is {:?}, expected {:?}",
                    t.shape(),
                    (cells, live.len())
                )));
            }
            for (j, &m) in live.iter().enumerate() {
                let base = (l * spec.channels + m) * cells;
                for p in 0..cells {
                    data[base + p] = t[(p, j)];
                }
            }
        }
        AttentionStack::new(maps.len(), spec.channels, spec.h, spec.w, data, spec.present.clone())
    }

    /// Reverse sweep from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(1, 1, T::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only keep gradients for nodes that need them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_bt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (acc, &v) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *row, r);
                }
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.scaled(*scale));
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows(table, idx) => {
                let t = self.value(*table);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                    offset += r;
                    self.accumulate(grads, p, Tensor::from_vec(r, c, slice).unwrap());
                }
            }
            Op::SelectCols(x, cols) => {
                let src = self.value(*x);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    for (j, &c) in cols.iter().enumerate() {
                        d[(i, c)] += g[(i, j)];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let dl = losses::diffusion_loss_grad(target.data(), p.data());
                let scale = g.data()[0];
                let d = Tensor::from_vec(p.rows(), p.cols(), dl.into_iter().map(|v| v * scale).collect())
                    .unwrap();
                self.accumulate(grads, *pred, d);
            }
            Op::AttnLoss { maps, spec } => {
                let stack = self.assemble_stack(maps, spec).expect("validated at construction");
                let norm = losses::normalize_attention(&stack).expect("validated at construction");
                let (_, g_norm) =
                    losses::attention_loss_with_grad(&norm, &spec.masks, spec.eps, spec.kind, true)
                        .expect("validated at construction");
                let g_stack = losses::normalize_attention_backward(&stack, &norm, &g_norm);
                let scale = g.data()[0];
                let cells = spec.h * spec.w;
                let live: Vec<usize> = (0..spec.channels).filter(|&m| spec.present[m]).collect();
                for (l, &map) in maps.iter().enumerate() {
                    if !self.rg(map) {
                        continue;
                    }
                    let mut d = Tensor::zeros(cells, live.len());
                    for (j, &m) in live.iter().enumerate() {
                        let base = (l * spec.channels + m) * cells;
                        for p in 0..cells {
                            d[(p, j)] = g_stack[base + p] * scale;
                        }
                    }
                    self.accumulate(grads, map, d);
                }
            }
        }
    }
}
