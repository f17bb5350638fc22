//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every operation appends one node holding its output value and enough
//! bookkeeping to push an upstream gradient back to its inputs. A tape is
//! built by exactly one forward pass and consumed by one call to
//! [`Tape::backward`], which walks the nodes in reverse insertion order.
//!
//! Parameters enter the tape by reference through [`Tape::param`]; frozen
//! parameters (and everything computed only from frozen values) are marked
//! as not requiring a gradient, so backward never materialises a gradient
//! for them.

use std::collections::{BTreeMap, HashMap};
use std::ops::Deref;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::kernels::{
    self, col2im, gemm, im2col, resize_planes, resize_planes_adjoint, resize_taps, row_major,
    transposed, ConvGeometry, ResizeMode,
};
use crate::numeric::{Scalar, Tensor};
use crate::params::{ParamId, ParamStore};

/// Gather index marking a zero-filled output element.
pub const GATHER_PAD: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Stored<'a, F> {
    Owned(Tensor<F>),
    Borrowed(&'a Tensor<F>),
}

impl<F> Deref for Stored<'_, F> {
    type Target = Tensor<F>;
    fn deref(&self) -> &Tensor<F> {
        match self {
            Stored::Owned(t) => t,
            Stored::Borrowed(t) => t,
        }
    }
}

type Taps<F> = Arc<Vec<Vec<(usize, F)>>>;

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    Scale(Var, F),
    Reshape(Var),
    Gather {
        src: Var,
        index: Arc<[usize]>,
    },
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        src: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        // geometry of the correlation this operation is the adjoint of
        geom: ConvGeometry,
        in_channels: usize,
    },
    Resize {
        src: Var,
        channels: usize,
        in_hw: (usize, usize),
        rows: Taps<F>,
        cols: Taps<F>,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        target: Arc<[F]>,
        eps: F,
    },
    Dice {
        p: Var,
        target: Arc<[F]>,
        eps: F,
    },
}

struct Node<'a, F> {
    value: Stored<'a, F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<'a, F: Scalar> {
    store: Option<&'a ParamStore<F>>,
    nodes: Vec<Node<'a, F>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    params: BTreeMap<ParamId, Tensor<F>>,
    leaves: HashMap<usize, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&var.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// Elementwise sum of parameter gradients.
    pub fn merge(&mut self, other: Gradients<F>) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += *b),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Write parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g)?;
        }
        Ok(())
    }
}

impl<'a, F: Scalar> Default for Tape<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Scalar> Tape<'a, F> {
    /// Tape without a parameter store; only leaves and constants.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'a ParamStore<F>) -> Self {
        Tape {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Tape that records values only; backward yields no gradients.
    pub fn inference(store: &'a ParamStore<F>) -> Self {
        Tape {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Input leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Stored::Owned(t),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bring a stored parameter onto the tape (once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self
            .store
            .expect("Tape::param requires a tape built with a parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            value: Stored::Borrowed(&p.value),
            op: Op::Param(id),
            requires_grad: self.grad_enabled && p.tunable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape and is
    /// repeated over the leading axes.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_bcast", sa, sb));
        }
        let nb = tb.numel();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bd[i % nb])
            .collect();
        let out = Tensor::new(sa, data)?;
        Ok(self.push(out, Op::AddBcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `out[i] = src[index[i]]`, or zero where `index[i] == GATHER_PAD`.
    pub fn gather(
        &mut self,
        src: Var,
        index: Arc<[usize]>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let shape = shape.into();
        let t = self.value(src);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", &shape, &[index.len()]));
        }
        let n = t.numel();
        if let Some(bad) = index.iter().find(|&&i| i != GATHER_PAD && i >= n) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {n} elements"
            )));
        }
        let sd = t.data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_PAD { F::zero() } else { sd[i] })
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { src, index }, &[src]))
    }

    /// Axis permutation, `out.shape[i] = in.shape[axes[i]]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (index, out_shape) = permute_index(&shape, axes)?;
        self.gather(a, index.into(), out_shape)
    }

    /// Matrix product of 2-D operands, or batched product of 3-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` (batched for 3-D operands).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (batch, m, k, kb, n) = match (sa.len(), sb.len()) {
            (2, 2) if !trans_b => (1, sa[0], sa[1], sb[0], sb[1]),
            (2, 2) => (1, sa[0], sa[1], sb[1], sb[0]),
            (3, 3) if sa[0] == sb[0] && !trans_b => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[2], sb[1]),
            _ => return Err(Error::dim(op, sa, sb)),
        };
        if k != kb {
            return Err(Error::dim(op, sa, sb));
        }
        let mut out = vec![F::zero(); batch * m * n];
        let sbm = if trans_b { row_major(k) } else { row_major(n) };
        let sbm = if trans_b { (sbm.1, sbm.0) } else { sbm };
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                row_major(k),
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                sbm,
                F::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Matmul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let t = self.value(src);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = t.data();
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(F::neg_infinity(), |m, j| m.max(x[at(j)]));
                let mut total = F::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.push(
            out,
            Op::Softmax {
                src,
                outer,
                len,
                inner,
            },
            &[src],
        ))
    }

    pub fn gelu(&mut self, src: Var) -> Var {
        let out = self.value(src).map(kernels::gelu);
        self.push(out, Op::Gelu(src), &[src])
    }

    /// Layer normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let width = *tx.shape().last().expect("non-empty shape");
        if tg.numel() != width || tb.numel() != width {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / width;
        let mut y = vec![F::zero(); tx.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let nf = F::lit(width as f64);
        for r in 0..rows {
            let row = &tx.data()[r * width..(r + 1) * width];
            let mu = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            for j in 0..width {
                y[r * width + j] = (row[j] - mu) * rs * tg.data()[j] + tb.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let out = Tensor::new(tx.shape(), y)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Cross-correlation of a `(ci, h, w)` image with a `(co, ci, k, k)`
    /// kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::dim("conv2d", sx, sw));
        }
        let geom = ConvGeometry {
            channels: sx[0],
            height: sx[1],
            width: sx[2],
            kernel: sw[2],
            stride,
            padding,
        };
        if !geom.valid() {
            return Err(Error::geometry(
                "conv2d",
                format!(
                    "input {sx:?}, kernel {}, stride {stride}, padding {padding}",
                    sw[2]
                ),
            ));
        }
        let co = sw[0];
        if let Some(b) = bias {
            if self.value(b).numel() != co {
                return Err(Error::dim("conv2d bias", sw, self.value(b).shape()));
            }
        }
        let col = im2col(tx.data(), &geom);
        let (ckk, p) = (geom.col_rows(), geom.col_cols());
        let mut y = vec![F::zero(); co * p];
        gemm(
            co,
            ckk,
            p,
            tw.data(),
            row_major(ckk),
            &col,
            row_major(p),
            F::zero(),
            &mut y,
        );
        if let Some(b) = bias {
            for (c, bv) in self.value(b).data().iter().enumerate() {
                y[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += *bv);
            }
        }
        let out = Tensor::new([co, geom.out_height(), geom.out_width()], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                out_channels: co,
            },
            &inputs,
        ))
    }

    /// Transposed convolution of a `(ci, h, w)` image with a `(ci, co, k, k)`
    /// kernel, no padding: output `(co, (h-1)·s + k, (w-1)·s + k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != sw[3] {
            return Err(Error::dim("conv_transpose2d", sx, sw));
        }
        if stride == 0 || sw[2] == 0 {
            return Err(Error::geometry(
                "conv_transpose2d",
                "stride and kernel must be >= 1",
            ));
        }
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[1], sw[2]);
        if let Some(b) = bias {
            if self.value(b).numel() != co {
                return Err(Error::dim(
                    "conv_transpose2d bias",
                    sw,
                    self.value(b).shape(),
                ));
            }
        }
        let geom = ConvGeometry {
            channels: co,
            height: (h - 1) * stride + k,
            width: (wd - 1) * stride + k,
            kernel: k,
            stride,
            padding: 0,
        };
        let ckk = co * k * k;
        let mut cols = vec![F::zero(); ckk * h * wd];
        gemm(
            ckk,
            ci,
            h * wd,
            tw.data(),
            transposed(ckk),
            tx.data(),
            row_major(h * wd),
            F::zero(),
            &mut cols,
        );
        let mut y = vec![F::zero(); co * geom.height * geom.width];
        col2im(&cols, &geom, &mut y);
        if let Some(b) = bias {
            let plane = geom.height * geom.width;
            for (c, bv) in self.value(b).data().iter().enumerate() {
                y[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += *bv);
            }
        }
        let out = Tensor::new([co, geom.height, geom.width], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                geom,
                in_channels: ci,
            },
            &inputs,
        ))
    }

    /// Resample a `(c, h, w)` value to `(c, th, tw)`.
    pub fn resize(&mut self, src: Var, th: usize, tw: usize, mode: ResizeMode) -> Result<Var> {
        let t = self.value(src);
        let s = t.shape();
        if s.len() != 3 || th == 0 || tw == 0 {
            return Err(Error::geometry("resize", format!("{s:?} -> ({th}, {tw})")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let rows: Taps<F> = Arc::new(resize_taps(h, th, mode));
        let cols: Taps<F> = Arc::new(resize_taps(w, tw, mode));
        let data = resize_planes(t.data(), c, (h, w), &rows, &cols);
        let out = Tensor::new([c, th, tw], data)?;
        Ok(self.push(
            out,
            Op::Resize {
                src,
                channels: c,
                in_hw: (h, w),
                rows,
                cols,
            },
            &[src],
        ))
    }

    pub fn sum(&mut self, src: Var) -> Var {
        let out = Tensor::scalar(self.value(src).sum());
        self.push(out, Op::Sum(src), &[src])
    }

    pub fn mean(&mut self, src: Var) -> Var {
        let t = self.value(src);
        let out = Tensor::scalar(t.sum() / F::lit(t.numel() as f64));
        self.push(out, Op::Mean(src), &[src])
    }

    /// Pixel-mean binary cross-entropy of probabilities `p` against a 0/1
    /// target, with `p` clamped to `[eps, 1 - eps]`.
    pub fn binary_cross_entropy(&mut self, p: Var, target: Arc<[F]>, eps: F) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != target.len() {
            return Err(Error::dim(
                "binary_cross_entropy",
                t.shape(),
                &[target.len()],
            ));
        }
        let one = F::one();
        let total = t
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&pv, &y)| {
                let pc = pv.max(eps).min(one - eps);
                -(y * pc.ln()) - (one - y) * (one - pc).ln()
            })
            .sum::<F>();
        let out = Tensor::scalar(total / F::lit(t.numel() as f64));
        Ok(self.push(out, Op::Bce { p, target, eps }, &[p]))
    }

    /// Soft Dice loss `1 − (2Σpy + ε)/(Σp + Σy + ε)`.
    pub fn dice_loss(&mut self, p: Var, target: Arc<[F]>, eps: F) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != target.len() {
            return Err(Error::dim("dice_loss", t.shape(), &[target.len()]));
        }
        let (inter, sp, sy) = dice_terms(t.data(), &target);
        let out = Tensor::scalar(F::one() - (F::lit(2.0) * inter + eps) / (sp + sy + eps));
        Ok(self.push(out, Op::Dice { p, target, eps }, &[p]))
    }

    /// `x·W + b` for a 2-D `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bcast(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(idx, Tensor::new(node.value.shape(), g)?);
                }
                Op::Param(id) => {
                    out.params.insert(*id, Tensor::new(node.value.shape(), g)?);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn propagate(&self, op: &Op<F>, out: &Tensor<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = self.slot(grads, *v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * tb[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        s[i] += g[i] * ta[i];
                    }
                }
            }
            Op::AddBcast(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let nb = s.len();
                    for (i, gv) in g.iter().enumerate() {
                        s[i % nb] += *gv;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += *g * *k);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += *g);
                }
            }
            Op::Gather { src, index } => {
                if let Some(s) = self.slot(grads, *src) {
                    for (gv, &i) in g.iter().zip(index.iter()) {
                        if i != GATHER_PAD {
                            s[i] += *gv;
                        }
                    }
                }
            }
            &Op::Matmul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                if let Some(s) = self.slot(grads, a) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &tb[bi * k * n..(bi + 1) * k * n];
                        let dst = &mut s[bi * m * k..(bi + 1) * m * k];
                        // dA = G·Bᵀ (NN) or G·B (NT)
                        let sb = if trans_b { row_major(k) } else { transposed(n) };
                        gemm(m, n, k, gs, row_major(n), bs, sb, F::one(), dst);
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &ta[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut s[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // dB (n×k) = Gᵀ·A
                            gemm(n, m, k, gs, transposed(n), as_, row_major(k), F::one(), dst);
                        } else {
                            // dB (k×n) = Aᵀ·G
                            gemm(k, m, n, as_, transposed(k), gs, row_major(n), F::one(), dst);
                        }
                    }
                }
            }
            &Op::Softmax {
                src,
                outer,
                len,
                inner,
            } => {
                if let Some(s) = self.slot(grads, src) {
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot = (0..len).fold(F::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                            for j in 0..len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gelu(src) => {
                let x = self.value(*src).data();
                if let Some(s) = self.slot(grads, *src) {
                    for i in 0..g.len() {
                        s[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let tx = self.value(*x).data();
                let tg = self.value(*gain).data();
                let width = tg.len();
                let rows = mean.len();
                let xhat = |r: usize, j: usize| (tx[r * width + j] - mean[r]) * rstd[r];
                if let Some(s) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..width {
                            s[j] += g[r * width + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..width {
                            s[j] += g[r * width + j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let nf = F::lit(width as f64);
                    for r in 0..rows {
                        let mut sum_d = F::zero();
                        let mut sum_dx = F::zero();
                        for j in 0..width {
                            let d = g[r * width + j] * tg[j];
                            sum_d += d;
                            sum_dx += d * xhat(r, j);
                        }
                        let (md, mdx) = (sum_d / nf, sum_dx / nf);
                        for j in 0..width {
                            let d = g[r * width + j] * tg[j];
                            s[r * width + j] += rstd[r] * (d - md - xhat(r, j) * mdx);
                        }
                    }
                }
            }
            &Op::Conv2d {
                x,
                w,
                bias,
                geom,
                out_channels: co,
            } => {
                let (ckk, p) = (geom.col_rows(), geom.col_cols());
                if let Some(b) = bias {
                    if let Some(s) = self.slot(grads, b) {
                        for c in 0..co {
                            s[c] += g[c * p..(c + 1) * p].iter().copied().sum::<F>();
                        }
                    }
                }
                if self.requires_grad(w) {
                    let col = im2col(self.value(x).data(), &geom);
                    let s = self.slot(grads, w).expect("requires grad");
                    gemm(
                        co,
                        p,
                        ckk,
                        g,
                        row_major(p),
                        &col,
                        transposed(p),
                        F::one(),
                        s,
                    );
                }
                if self.requires_grad(x) {
                    let mut dcol = vec![F::zero(); ckk * p];
                    let tw = self.value(w).data();
                    gemm(
                        ckk,
                        co,
                        p,
                        tw,
                        transposed(ckk),
                        g,
                        row_major(p),
                        F::zero(),
                        &mut dcol,
                    );
                    let s = self.slot(grads, x).expect("requires grad");
                    col2im(&dcol, &geom, s);
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                bias,
                geom,
                in_channels: ci,
            } => {
                let co = geom.channels;
                let plane = geom.height * geom.width;
                if let Some(b) = bias {
                    if let Some(s) = self.slot(grads, b) {
                        for c in 0..co {
                            s[c] += g[c * plane..(c + 1) * plane].iter().copied().sum::<F>();
                        }
                    }
                }
                if !self.requires_grad(x) && !self.requires_grad(w) {
                    return;
                }
                let (ckk, hw) = (geom.col_rows(), geom.col_cols());
                let dcols = im2col(g, &geom);
                if self.requires_grad(x) {
                    let tw = self.value(w).data();
                    let s = self.slot(grads, x).expect("requires grad");
                    gemm(
                        ci,
                        ckk,
                        hw,
                        tw,
                        row_major(ckk),
                        &dcols,
                        row_major(hw),
                        F::one(),
                        s,
                    );
                }
                if self.requires_grad(w) {
                    let tx = self.value(x).data();
                    let s = self.slot(grads, w).expect("requires grad");
                    gemm(
                        ci,
                        hw,
                        ckk,
                        tx,
                        row_major(hw),
                        &dcols,
                        transposed(hw),
                        F::one(),
                        s,
                    );
                }
            }
            Op::Resize {
                src,
                channels,
                in_hw,
                rows,
                cols,
            } => {
                if let Some(s) = self.slot(grads, *src) {
                    resize_planes_adjoint(g, *channels, *in_hw, rows, cols, s);
                }
            }
            Op::Sum(src) => {
                if let Some(s) = self.slot(grads, *src) {
                    s.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(src) => {
                if let Some(s) = self.slot(grads, *src) {
                    let k = g[0] / F::lit(s.len() as f64);
                    s.iter_mut().for_each(|v| *v += k);
                }
            }
            Op::Bce { p, target, eps } => {
                let tp = self.value(*p).data();
                if let Some(s) = self.slot(grads, *p) {
                    let one = F::one();
                    let scale = g[0] / F::lit(tp.len() as f64);
                    for i in 0..tp.len() {
                        let pv = tp[i];
                        if pv < *eps || pv > one - *eps {
                            continue;
                        }
                        let y = target[i];
                        s[i] += scale * (-(y / pv) + (one - y) / (one - pv));
                    }
                }
            }
            Op::Dice { p, target, eps } => {
                let tp = self.value(*p).data();
                if let Some(s) = self.slot(grads, *p) {
                    let (inter, sp, sy) = dice_terms(tp, target);
                    let two = F::lit(2.0);
                    let num = two * inter + *eps;
                    let den = sp + sy + *eps;
                    for i in 0..tp.len() {
                        s[i] += g[0] * -(two * target[i] * den - num) / (den * den);
                    }
                }
            }
        }
    }
}

fn dice_terms<F: Scalar>(p: &[F], y: &[F]) -> (F, F, F) {
    p.iter().zip(y).fold(
        (F::zero(), F::zero(), F::zero()),
        |(i, sp, sy), (&pv, &yv)| (i + pv * yv, sp + pv, sy + yv),
    )
}

/// Flat gather index implementing an axis permutation.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if axes.len() != nd
        || axes
            .iter()
            .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::Contract(format!(
            "invalid permutation {axes:?} for shape {shape:?}"
        )));
    }
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; nd];
    for _ in 0..numel {
        index.push(
            counter
                .iter()
                .zip(axes)
                .map(|(&c, &a)| c * in_strides[a])
                .sum(),
        );
        for d in (0..nd).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok((index, out_shape))
}
