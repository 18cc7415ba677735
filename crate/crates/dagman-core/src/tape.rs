//! Reverse-mode autodiff over flat row-major buffers.
//!
//! The op set is exactly what the encoder, the semantic-attention block and
//! the loss heads need: dense matmuls, batched attention products, an
//! element-gather (which subsumes window partitioning, cyclic shifts, head
//! splitting and patch merging), softmax/log-softmax, layer norm, GELU and
//! a handful of reductions. Values are stored per node; gradients are
//! accumulated on demand by [`Tape::backward`].

use std::sync::Arc;

use crate::num::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn i(self) -> usize {
        self.0 as usize
    }
}

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    /// x[r,c] + b[c] broadcast over rows.
    AddBias(Var, Var),
    /// Row i of x scaled by the constant w[i].
    ScaleRows(Var, Arc<Vec<F>>),
    /// a[m,k] · b[k,n].
    MatMul(Var, Var),
    /// Batched a[b,m,k] · b[b,k,n].
    BmmNN(Var, Var),
    /// Batched a[b,m,k] · b[b,n,k]^T (attention scores).
    BmmNT(Var, Var),
    /// out[i] = x[plan[i]].
    Gather(Var, Arc<Vec<u32>>),
    /// Rows of a stacked on top of rows of b.
    Concat0(Var, Var),
    Reshape(Var),
    /// Row-wise softmax; node value is the output.
    Softmax(Var),
    /// Row-wise log-softmax; node value is the output.
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    /// Mean over axis 0 of [r,c] -> [c].
    MeanAxis0(Var),
    SumAll(Var),
    /// Σ_i w[i]·x[i] -> scalar.
    DotConst(Var, Arc<Vec<F>>),
    Abs(Var),
}

struct Node<F: Scalar> {
    value: Arc<Vec<F>>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.i()).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    (numel(shape) / cols.max(1), cols)
}

impl<F: Scalar> Tape<F> {
    pub fn new(grad_enabled: bool) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.i()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.i()].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, needs_grad: bool, op: Op<F>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value: Arc::new(value),
            shape,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        Var((self.nodes.len() - 1) as u32)
    }

    fn push_shared(
        &mut self,
        value: Arc<Vec<F>>,
        shape: Vec<usize>,
        needs_grad: bool,
        op: Op<F>,
    ) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        Var((self.nodes.len() - 1) as u32)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.i()].needs_grad
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, value: Vec<F>, shape: &[usize]) -> Var {
        self.push(value, shape.to_vec(), false, Op::Leaf)
    }

    pub fn constant_shared(&mut self, value: Arc<Vec<F>>, shape: &[usize]) -> Var {
        self.push_shared(value, shape.to_vec(), false, Op::Leaf)
    }

    /// Trainable leaf (a parameter bound for this pass).
    pub fn param(&mut self, value: Arc<Vec<F>>, shape: &[usize]) -> Var {
        self.push_shared(value, shape.to_vec(), true, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add: length mismatch");
        let out: Vec<F> = va.iter().zip(vb).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "sub: length mismatch");
        let out: Vec<F> = va.iter().zip(vb).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "mul: length mismatch");
        let out: Vec<F> = va.iter().zip(vb).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, ng, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out: Vec<F> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(out, shape, ng, Op::Scale(a, c))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = rows_cols(self.shape(x));
        assert_eq!(self.value(b).len(), c, "add_bias: width mismatch");
        let xv = self.value(x);
        let bv = self.value(b);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let src = &xv[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                dst[j] = src[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(b);
        self.push(out, shape, ng, Op::AddBias(x, b))
    }

    /// Multiply row i by the constant weight w[i] (mask application,
    /// patch dropout, residual path-drop scaling).
    pub fn scale_rows(&mut self, x: Var, w: Arc<Vec<F>>) -> Var {
        let (r, c) = rows_cols(self.shape(x));
        assert_eq!(w.len(), r, "scale_rows: row count mismatch");
        let xv = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let wi = w[i];
            let src = &xv[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                dst[j] = src[j] * wi;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, ng, Op::ScaleRows(x, w))
    }

    /// a[m,k]·b[k,n]; higher-rank `a` is treated as [rows, k].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = rows_cols(self.shape(a));
        let bs = self.shape(b);
        assert_eq!(bs.len(), 2, "matmul: rhs must be 2-D");
        assert_eq!(bs[0], k, "matmul: inner dim mismatch");
        let n = bs[1];
        let mut out = vec![F::zero(); m * n];
        kernels::mm_nn_acc(&mut out, self.value(a), self.value(b), m, k, n);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, ng, Op::MatMul(a, b))
    }

    /// Batched a[b,m,k]·b[b,k,n].
    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "bmm_nn: lhs rank");
        assert_eq!(sb.len(), 3, "bmm_nn: rhs rank");
        assert_eq!(sa[0], sb[0], "bmm_nn: batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm_nn: inner dim mismatch");
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bt * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for t in 0..bt {
            kernels::mm_nn_acc(
                &mut out[t * m * n..(t + 1) * m * n],
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![bt, m, n], ng, Op::BmmNN(a, b))
    }

    /// Batched a[b,m,k]·b[b,n,k]^T — the QK^T product.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "bmm_nt: lhs rank");
        assert_eq!(sb.len(), 3, "bmm_nt: rhs rank");
        assert_eq!(sa[0], sb[0], "bmm_nt: batch mismatch");
        assert_eq!(sa[2], sb[2], "bmm_nt: inner dim mismatch");
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![F::zero(); bt * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for t in 0..bt {
            kernels::mm_nt_acc(
                &mut out[t * m * n..(t + 1) * m * n],
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * n * k..(t + 1) * n * k],
                m,
                k,
                n,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![bt, m, n], ng, Op::BmmNT(a, b))
    }

    /// out[i] = x[plan[i]]; backward scatter-adds.
    pub fn gather(&mut self, x: Var, plan: Arc<Vec<u32>>, out_shape: &[usize]) -> Var {
        assert_eq!(plan.len(), numel(out_shape), "gather: plan/shape mismatch");
        let xv = self.value(x);
        let out: Vec<F> = plan.iter().map(|&i| xv[i as usize]).collect();
        let ng = self.ng(x);
        self.push(out, out_shape.to_vec(), ng, Op::Gather(x, plan))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, c) = rows_cols(self.shape(a));
        let (rb, cb) = rows_cols(self.shape(b));
        assert_eq!(c, cb, "concat_rows: width mismatch");
        let mut out = Vec::with_capacity((ra + rb) * c);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![ra + rb, c], ng, Op::Concat0(a, b))
    }

    /// Free view with a new shape (same number of elements).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(self.shape(x)), numel(shape), "reshape: size mismatch");
        let value = Arc::clone(&self.nodes[x.i()].value);
        let ng = self.ng(x);
        self.push_shared(value, shape.to_vec(), ng, Op::Reshape(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            kernels::softmax_row(&mut out[i * c..(i + 1) * c], &xv[i * c..(i + 1) * c]);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, ng, Op::Softmax(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            kernels::log_softmax_row(&mut out[i * c..(i + 1) * c], &xv[i * c..(i + 1) * c]);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, ng, Op::LogSoftmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (r, c) = rows_cols(self.shape(x));
        assert_eq!(self.value(gamma).len(), c, "layer_norm: gamma width");
        assert_eq!(self.value(beta).len(), c, "layer_norm: beta width");
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![F::zero(); r * c];
        let mut mean = vec![F::zero(); r];
        let mut rstd = vec![F::zero(); r];
        let inv_c = F::one() / F::of(c as f64);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_c;
            let rs = F::one() / (var + eps).sqrt();
            mean[i] = mu;
            rstd[i] = rs;
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                dst[j] = (row[j] - mu) * rs * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            shape,
            ng,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<F> = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, ng, Op::Gelu(x))
    }

    /// Mean over the leading axis: [r,c] -> [c].
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let (r, c) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] = out[j] + row[j];
            }
        }
        let inv = F::one() / F::of(r as f64);
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let ng = self.ng(x);
        self.push(out, vec![c], ng, Op::MeanAxis0(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], ng, Op::SumAll(x))
    }

    /// Weighted sum against a constant vector: Σ w[i]·x[i] -> scalar.
    pub fn dot_const(&mut self, x: Var, w: Arc<Vec<F>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), w.len(), "dot_const: length mismatch");
        let s: F = xv.iter().zip(w.iter()).map(|(&a, &b)| a * b).sum();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], ng, Op::DotConst(x, w))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out: Vec<F> = self.value(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, ng, Op::Abs(x))
    }

    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(numel(self.shape(v)), 1);
        self.value(v)[0]
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(numel(self.shape(loss)), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.i()] = Some(vec![F::one()]);

        for idx in (0..=loss.i()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads);
            // Keep the gradient available for callers (parameters are leaves,
            // so this only retains what is actually read afterwards).
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut Vec<Option<Vec<F>>>, v: Var, update: impl FnOnce(&mut [F])) {
        if !self.nodes[v.i()].needs_grad {
            return;
        }
        let slot = &mut grads[v.i()];
        if slot.is_none() {
            *slot = Some(vec![F::zero(); self.nodes[v.i()].value.len()]);
        }
        update(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut Vec<Option<Vec<F>>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi = *gi + gv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (gi, &gv) in gb.iter_mut().zip(g) {
                        *gi = *gi + gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi = *gi + gv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (gi, &gv) in gb.iter_mut().zip(g) {
                        *gi = *gi - gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                self.accum(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * vb[i];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, |ga| {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi = *gi + gv * c;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let (r, c) = rows_cols(&node.shape);
                self.accum(grads, *x, |gx| {
                    for (gi, &gv) in gx.iter_mut().zip(g) {
                        *gi = *gi + gv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..r {
                        let row = &g[i * c..(i + 1) * c];
                        for j in 0..c {
                            gb[j] = gb[j] + row[j];
                        }
                    }
                });
            }
            Op::ScaleRows(x, w) => {
                let (r, c) = rows_cols(&node.shape);
                self.accum(grads, *x, |gx| {
                    for i in 0..r {
                        let wi = w[i];
                        let grow = &g[i * c..(i + 1) * c];
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] = dst[j] + grow[j] * wi;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                self.accum(grads, *a, |ga| {
                    kernels::mm_nt_acc(ga, g, &bv, m, n, k);
                });
                self.accum(grads, *b, |gb| {
                    kernels::mm_tn_acc(gb, &av, g, m, k, n);
                });
            }
            Op::BmmNN(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                self.accum(grads, *a, |ga| {
                    for t in 0..bt {
                        kernels::mm_nt_acc(
                            &mut ga[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.accum(grads, *b, |gb| {
                    for t in 0..bt {
                        kernels::mm_tn_acc(
                            &mut gb[t * k * n..(t + 1) * k * n],
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::BmmNT(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                // dA = dC·B, dB = dC^T·A (per batch).
                self.accum(grads, *a, |ga| {
                    for t in 0..bt {
                        kernels::mm_nn_acc(
                            &mut ga[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * n * k..(t + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.accum(grads, *b, |gb| {
                    for t in 0..bt {
                        kernels::mm_tn_acc(
                            &mut gb[t * n * k..(t + 1) * n * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &av[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            Op::Gather(x, plan) => {
                self.accum(grads, *x, |gx| {
                    for (i, &src) in plan.iter().enumerate() {
                        gx[src as usize] = gx[src as usize] + g[i];
                    }
                });
            }
            Op::Concat0(a, b) => {
                let na = self.value(*a).len();
                self.accum(grads, *a, |ga| {
                    for i in 0..na {
                        ga[i] = ga[i] + g[i];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (i, gi) in gb.iter_mut().enumerate() {
                        *gi = *gi + g[na + i];
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, |gx| {
                    for (gi, &gv) in gx.iter_mut().zip(g) {
                        *gi = *gi + gv;
                    }
                });
            }
            Op::Softmax(x) => {
                let (r, c) = rows_cols(&node.shape);
                let p = Arc::clone(&node.value);
                self.accum(grads, *x, |gx| {
                    for i in 0..r {
                        let prow = &p[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: F = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] = dst[j] + prow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (r, c) = rows_cols(&node.shape);
                let lp = Arc::clone(&node.value);
                self.accum(grads, *x, |gx| {
                    for i in 0..r {
                        let lprow = &lp[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let gsum: F = grow.iter().copied().sum();
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] = dst[j] + grow[j] - lprow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (r, c) = rows_cols(&node.shape);
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gamma).to_vec();
                let inv_c = F::one() / F::of(c as f64);
                self.accum(grads, *x, |gx| {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let (mu, rs) = (mean[i], rstd[i]);
                        let mut sum_gg = F::zero();
                        let mut sum_ggx = F::zero();
                        for j in 0..c {
                            let gg = grow[j] * gv[j];
                            let xh = (row[j] - mu) * rs;
                            sum_gg = sum_gg + gg;
                            sum_ggx = sum_ggx + gg * xh;
                        }
                        let m1 = sum_gg * inv_c;
                        let m2 = sum_ggx * inv_c;
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            let gg = grow[j] * gv[j];
                            let xh = (row[j] - mu) * rs;
                            dst[j] = dst[j] + rs * (gg - m1 - xh * m2);
                        }
                    }
                });
                self.accum(grads, *gamma, |gg| {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let (mu, rs) = (mean[i], rstd[i]);
                        for j in 0..c {
                            gg[j] = gg[j] + grow[j] * (row[j] - mu) * rs;
                        }
                    }
                });
                self.accum(grads, *beta, |gb| {
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..c {
                            gb[j] = gb[j] + grow[j];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).to_vec();
                self.accum(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::MeanAxis0(x) => {
                let (r, c) = rows_cols(self.shape(*x));
                let inv = F::one() / F::of(r as f64);
                self.accum(grads, *x, |gx| {
                    for i in 0..r {
                        let dst = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            dst[j] = dst[j] + g[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                self.accum(grads, *x, |gx| {
                    for gi in gx.iter_mut() {
                        *gi = *gi + g0;
                    }
                });
            }
            Op::DotConst(x, w) => {
                let g0 = g[0];
                self.accum(grads, *x, |gx| {
                    for (gi, &wi) in gx.iter_mut().zip(w.iter()) {
                        *gi = *gi + g0 * wi;
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).to_vec();
                self.accum(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        let s = if xv[i] > F::zero() {
                            F::one()
                        } else if xv[i] < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        gx[i] = gx[i] + g[i] * s;
                    }
                });
            }
        }
    }
}

/// Dense kernels shared by the tape and by value-level (no-grad) paths.
pub mod kernels {
    use crate::num::Scalar;

    /// c[m,n] += a[m,k]·b[k,n].
    pub fn mm_nn_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(c.len(), m * n);
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    crow[j] = crow[j] + aik * brow[j];
                }
            }
        }
    }

    /// c[m,n] += a[m,k]·b[n,k]^T (rows of b as columns).
    pub fn mm_nt_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(c.len(), m * n);
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = F::zero();
                for kk in 0..k {
                    acc = acc + arow[kk] * brow[kk];
                }
                crow[j] = crow[j] + acc;
            }
        }
    }

    /// c[k,n] += a[m,k]^T·b[m,n].
    pub fn mm_tn_acc<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(c.len(), k * n);
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let crow = &mut c[kk * n..(kk + 1) * n];
                for j in 0..n {
                    crow[j] = crow[j] + aik * brow[j];
                }
            }
        }
    }

    pub fn softmax_row<F: Scalar>(out: &mut [F], x: &[F]) {
        let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in out.iter_mut().zip(x) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = F::one() / sum;
        for o in out.iter_mut() {
            *o = *o * inv;
        }
    }

    pub fn log_softmax_row<F: Scalar>(out: &mut [F], x: &[F]) {
        let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in x {
            sum = sum + (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, &v) in out.iter_mut().zip(x) {
            *o = v - lse;
        }
    }

    /// tanh-form GELU.
    pub fn gelu<F: Scalar>(x: F) -> F {
        let c = F::of(0.7978845608028654); // sqrt(2/pi)
        let k = F::of(0.044715);
        let u = c * (x + k * x * x * x);
        F::of(0.5) * x * (F::one() + u.tanh())
    }

    pub fn gelu_grad<F: Scalar>(x: F) -> F {
        let c = F::of(0.7978845608028654);
        let k = F::of(0.044715);
        let u = c * (x + k * x * x * x);
        let t = u.tanh();
        let du = c * (F::one() + F::of(3.0) * k * x * x);
        F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * du
    }
}
