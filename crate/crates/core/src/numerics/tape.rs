//! Tensor-level reverse-mode tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. `backward` walks the nodes in reverse recording
//! order and accumulates gradients additively.

use std::borrow::Cow;

use super::ops;
use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Conv {
        x: Var,
        kernel: Var,
        ranges: Vec<(usize, usize)>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    JointCombine {
        a: Var,
        b: Var,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// One computation graph. Parameters may be bound by reference so every
/// forward pass on the tape reads the caller's storage directly.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Owned leaf; differentiable when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let g = t.requires_grad;
        self.push(Cow::Owned(t), Op::Leaf, g)
    }

    /// Borrowed, always-differentiable leaf.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Address of the buffer backing `v`, used to check parameter sharing.
    pub fn storage_ptr(&self, v: Var) -> *const T {
        self.nodes[v.0].value.data.as_ptr()
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&a| f(a)).collect());
        let g = self.needs(&[x]);
        self.push(Cow::Owned(out), op, g)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape.clone(), data);
        let g = self.needs(&[a, b]);
        self.push(Cow::Owned(out), op, g)
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dims {:?} x {:?}", av.shape, bv.shape);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&av.data, &bv.data, &mut out, m, k, n);
        let g = self.needs(&[a, b]);
        self.push(Cow::Owned(Tensor::new(vec![m, n], out)), Op::MatMul(a, b), g)
    }

    /// Adds a length-`n` bias to every row of `[m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias length");
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| a + bv.data[i % n])
            .collect();
        let out = Tensor::new(xv.shape.clone(), data);
        let g = self.needs(&[x, bias]);
        self.push(Cow::Owned(out), Op::AddBias(x, bias), g)
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, Op::OneMinus(x), |a| T::one() - a)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |a| a.tanh())
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |a| a * sigmoid(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, xhat, rstd) = ops::layer_norm_forward(
            self.value(x),
            &self.value(gamma).data,
            &self.value(beta).data,
        );
        let g = self.needs(&[x, gamma, beta]);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        )
    }

    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let (out, probs) =
            ops::attention_forward(self.value(q), self.value(k), self.value(v), mask, heads)?;
        let g = self.needs(&[q, k, v]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            g,
        ))
    }

    /// Depthwise convolution with per-output-frame visible input ranges.
    pub fn conv(&mut self, x: Var, kernel: Var, ranges: Vec<(usize, usize)>) -> Result<Var> {
        let out = ops::conv_forward(self.value(x), self.value(kernel), &ranges)?;
        let g = self.needs(&[x, kernel]);
        Ok(self.push(Cow::Owned(out), Op::Conv { x, kernel, ranges }, g))
    }

    /// Row lookup into a `[n, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::BadToken { token: i, vocab: n });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data);
        let g = self.needs(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Reinterprets the contiguous prefix of `x` holding `product(shape)` elements.
    pub fn reshape_prefix(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        let xv = self.value(x);
        assert!(n <= xv.len(), "reshape beyond buffer");
        let out = Tensor::new(shape, xv.data[..n].to_vec());
        let g = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::Reshape(x), g)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let out = Tensor::new(vec![end - start, c], xv.data[start * c..end * c].to_vec());
        let g = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::SliceRows { x, start }, g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (m, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&xv.data[i * c + start..i * c + end]);
        }
        let out = Tensor::new(vec![m, end - start], data);
        let g = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::SliceCols { x, start }, g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows column mismatch");
            rows += pv.rows();
            data.extend_from_slice(&pv.data);
        }
        let g = self.needs(parts);
        self.push(
            Cow::Owned(Tensor::new(vec![rows, c], data)),
            Op::ConcatRows(parts.to_vec()),
            g,
        )
    }

    /// `out[t·U1 + u, :] = tanh(a[t, :] + b[u, :])` for `a: [T,H]`, `b: [U1,H]`.
    pub fn joint_combine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (t, u1, h) = (av.rows(), bv.rows(), av.cols());
        assert_eq!(bv.cols(), h, "joint hidden mismatch");
        let mut out = vec![T::zero(); t * u1 * h];
        for ti in 0..t {
            let ar = av.row(ti);
            for ui in 0..u1 {
                let br = bv.row(ui);
                let o = &mut out[(ti * u1 + ui) * h..(ti * u1 + ui + 1) * h];
                for c in 0..h {
                    o[c] = (ar[c] + br[c]).tanh();
                }
            }
        }
        let g = self.needs(&[a, b]);
        self.push(
            Cow::Owned(Tensor::new(vec![t * u1, h], out)),
            Op::JointCombine { a, b },
            g,
        )
    }

    /// Scalar `Σ w ⊙ x` with a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), w.len());
        let s: T = xv.data.iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let g = self.needs(&[x]);
        self.push(
            Cow::Owned(Tensor::new(vec![1], vec![s])),
            Op::WeightedSum { x, w },
            g,
        )
    }

    /// Backward from a scalar node.
    pub fn backward_scalar(&self, out: Var) -> Grads<T> {
        self.backward(vec![(out, Tensor::new(vec![1], vec![T::one()]))])
    }

    /// Reverse sweep seeded with upstream gradients for one or more nodes.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(
                g.len(),
                self.nodes[v.0].value.len(),
                "seed gradient size mismatch"
            );
            acc_into(&mut grads, v, &self.nodes[v.0].value.shape, |buf| {
                for (o, &x) in buf.iter_mut().zip(&g.data) {
                    *o += x;
                }
            });
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = &g.data;
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc(grads, *a, |buf| gemm_nt_acc(gd, &bv.data, buf, m, k, n));
                self.acc(grads, *b, |buf| gemm_tn_acc(&av.data, gd, buf, m, k, n));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |buf| add_to(buf, gd));
                let n = self.value(*b).len();
                self.acc(grads, *b, |buf| {
                    for (i, &v) in gd.iter().enumerate() {
                        buf[i % n] += v;
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_to(buf, gd));
                self.acc(grads, *b, |buf| add_to(buf, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_to(buf, gd));
                self.acc(grads, *b, |buf| {
                    for (o, &v) in buf.iter_mut().zip(gd) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                self.acc(grads, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |buf| {
                for (o, &v) in buf.iter_mut().zip(gd) {
                    *o += v * *s;
                }
            }),
            Op::OneMinus(x) => self.acc(grads, *x, |buf| {
                for (o, &v) in buf.iter_mut().zip(gd) {
                    *o -= v;
                }
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] += gd[i] * out[i] * (T::one() - out[i]);
                }
            }),
            Op::Tanh(x) => self.acc(grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] += gd[i] * (T::one() - out[i] * out[i]);
                }
            }),
            Op::Silu(x) => {
                let xv = &self.value(*x).data;
                self.acc(grads, *x, |buf| {
                    for i in 0..buf.len() {
                        let s = sigmoid(xv[i]);
                        buf[i] += gd[i] * (s + xv[i] * s * (T::one() - s));
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let gam = &self.value(*gamma).data;
                let mut gx = vec![T::zero(); m * n];
                let mut gg = vec![T::zero(); n];
                let mut gb = vec![T::zero(); n];
                ops::layer_norm_backward(xhat, rstd, gam, gd, m, n, &mut gx, &mut gg, &mut gb);
                self.acc(grads, *x, |buf| add_to(buf, &gx));
                self.acc(grads, *gamma, |buf| add_to(buf, &gg));
                self.acc(grads, *beta, |buf| add_to(buf, &gb));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let n = qv.len();
                let mut gq = vec![T::zero(); n];
                let mut gk = vec![T::zero(); n];
                let mut gv = vec![T::zero(); n];
                ops::attention_backward(qv, kv, vv, probs, *heads, gd, &mut gq, &mut gk, &mut gv);
                self.acc(grads, *q, |buf| add_to(buf, &gq));
                self.acc(grads, *k, |buf| add_to(buf, &gk));
                self.acc(grads, *v, |buf| add_to(buf, &gv));
            }
            Op::Conv { x, kernel, ranges } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let mut gx = vec![T::zero(); xv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                ops::conv_backward(xv, kv, ranges, gd, &mut gx, &mut gk);
                self.acc(grads, *x, |buf| add_to(buf, &gx));
                self.acc(grads, *kernel, |buf| add_to(buf, &gk));
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                self.acc(grads, *table, |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_to(&mut buf[i * d..(i + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |buf| add_to(&mut buf[..gd.len()], gd)),
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                self.acc(grads, *x, |buf| {
                    add_to(&mut buf[start * c..start * c + gd.len()], gd)
                });
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (node.value.rows(), node.value.cols());
                let c = self.value(*x).cols();
                self.acc(grads, *x, |buf| {
                    for i in 0..m {
                        add_to(
                            &mut buf[i * c + start..i * c + start + w],
                            &gd[i * w..(i + 1) * w],
                        );
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |buf| add_to(buf, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::JointCombine { a, b } => {
                let (t, u1, h) = (self.value(*a).rows(), self.value(*b).rows(), node.value.cols());
                let mut ga = vec![T::zero(); t * h];
                let mut gb = vec![T::zero(); u1 * h];
                for ti in 0..t {
                    for ui in 0..u1 {
                        let base = (ti * u1 + ui) * h;
                        for c in 0..h {
                            let y = out[base + c];
                            let d = gd[base + c] * (T::one() - y * y);
                            ga[ti * h + c] += d;
                            gb[ui * h + c] += d;
                        }
                    }
                }
                self.acc(grads, *a, |buf| add_to(buf, &ga));
                self.acc(grads, *b, |buf| add_to(buf, &gb));
            }
            Op::WeightedSum { x, w } => {
                let s = gd[0];
                self.acc(grads, *x, |buf| {
                    for (o, &wi) in buf.iter_mut().zip(w) {
                        *o += s * wi;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        acc_into(grads, v, &node.value.shape, f);
    }
}

fn acc_into<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(&mut slot.data);
}

#[inline]
fn add_to<T: Real>(buf: &mut [T], src: &[T]) {
    for (o, &s) in buf.iter_mut().zip(src) {
        *o += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
