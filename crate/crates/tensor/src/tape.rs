//! Reverse-mode differentiation by operation recording.
//!
//! Every primitive evaluates eagerly and appends a node to the tape. Nodes are
//! stored in creation order, which is a topological order, so [`Tape::backward`]
//! is a single reverse sweep.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs has the shape of the last axis of lhs.
    Row,
    /// rhs has the shape of lhs with the last axis collapsed to 1.
    Col,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Lookup {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Max {
        a: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    Pick {
        a: Var,
        idx: Vec<usize>,
    },
    CausalMask(Var),
    Unfold {
        a: Var,
        width: usize,
    },
}

/// Primitive names as they appear in diagnostics.
pub mod prim {
    pub const MATMUL: &str = "matmul";
    pub const ADD: &str = "add";
    pub const MUL: &str = "mul";
    pub const SOFTMAX: &str = "softmax";
    pub const LOG_SOFTMAX: &str = "log_softmax";
    pub const LAYER_NORM: &str = "layer_norm";
    pub const EMBEDDING: &str = "embedding_lookup";
    pub const CONCAT: &str = "concat";
    pub const SLICE: &str = "slice";
    pub const MAX: &str = "max_over_axis";
    pub const TRANSPOSE: &str = "transpose";
    pub const RESHAPE: &str = "reshape";
    pub const PERMUTE: &str = "permute";
    pub const PICK: &str = "pick";
    pub const CAUSAL_MASK: &str = "causal_mask";
    pub const UNFOLD: &str = "unfold";
}

/// Variance epsilon of [`Tape::layer_norm`], added inside the square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<'s, T: Real> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    store: Option<&'s ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Tape<'s, T> {
    /// A tape in evaluation mode with no parameter store.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Enables dropout, drawing masks from a generator seeded with `seed`.
    pub fn train(mut self, seed: u64) -> Self {
        self.training = true;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        let op = if requires { op } else { Op::Leaf };
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Repeated requests for the same id
    /// return the same node, so every use accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.leaf(store.get(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the value, zeros when none was recorded.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.values[v.0].shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds the gradients of every parameter leaf into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Gradients<T>) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &self.grads[v.0] {
                for (dst, &src) in grads.get_mut(id).iter_mut().zip(g) {
                    *dst = *dst + src;
                }
            }
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    /// Operands are both matrices or both batches of matrices `[batch, r, c]`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb, ta, tb)?;
        let MatDims { batch, m, k, n } = dims;
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
        let (rsa, csa) = op_strides(&sa, ta);
        let (rsb, csb) = op_strides(&sb, tb);
        for bi in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[bi * m * k..],
                rsa,
                csa,
                &bv[bi * k * n..],
                rsb,
                csb,
                T::zero(),
                &mut out[bi * m * n..],
                n as isize,
                1,
            );
        }
        let mut shape = if sa.len() == 3 { vec![batch] } else { vec![] };
        shape.extend([m, n]);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, ta, tb }, req))
    }

    /// Elementwise sum. `b` may also be a row vector over the last axis of `a`,
    /// or `a`'s shape with the last axis collapsed to 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bcast = if sa == sb {
            Broadcast::Same
        } else if !sa.is_empty() && sb == [sa[sa.len() - 1]] {
            Broadcast::Row
        } else if !sa.is_empty()
            && sb.len() == sa.len()
            && sb[sb.len() - 1] == 1
            && sb[..sb.len() - 1] == sa[..sa.len() - 1]
        {
            Broadcast::Col
        } else {
            return Err(shape_err(
                prim::ADD,
                &[&sa, &sb],
                "shapes neither equal nor broadcastable",
            ));
        };
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let cols = *sa.last().unwrap_or(&1);
        let out: Vec<T> = match bcast {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| x + y).collect(),
            Broadcast::Row => av.iter().enumerate().map(|(i, &x)| x + bv[i % cols]).collect(),
            Broadcast::Col => av.iter().enumerate().map(|(i, &x)| x + bv[i / cols]).collect(),
        };
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(sa, out)?, Op::Add { a, b, bcast }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err(
                prim::MUL,
                &[&sa, &sb],
                "elementwise product needs equal shapes",
            ));
        }
        let out = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(sa, out)?, Op::Mul { a, b }, req))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let out = self.values[a.0].map(|x| x * c);
        let req = self.requires[a.0];
        self.push(out, Op::Scale { a, c }, req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| if x > T::zero() { x } else { T::zero() });
        let req = self.requires[a.0];
        self.push(out, Op::Relu(a), req)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| T::one() / (T::one() + (-x).exp()));
        let req = self.requires[a.0];
        self.push(out, Op::Sigmoid(a), req)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| x.tanh());
        let req = self.requires[a.0];
        self.push(out, Op::Tanh(a), req)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = &self.values[a.0];
        let cols = last_dim(prim::SOFTMAX, x.shape())?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let shape = x.shape().to_vec();
        let req = self.requires[a.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), req))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = &self.values[a.0];
        let cols = last_dim(prim::LOG_SOFTMAX, x.shape())?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let shape = x.shape().to_vec();
        let req = self.requires[a.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(a), req))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance,
    /// then applies the optional per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = last_dim(prim::LAYER_NORM, &sx)?;
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [cols] {
                return Err(shape_err(
                    prim::LAYER_NORM,
                    &[&sx, self.shape(p)],
                    "gain and bias must span the last axis",
                ));
            }
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let n = T::from_usize(cols).unwrap();
        let xv = self.values[x.0].data();
        let rows = xv.len() / cols;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.values[g.0].data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o = *o * gv[i % cols]);
        }
        if let Some(b) = bias {
            let bv = self.values[b.0].data();
            out.iter_mut().enumerate().for_each(|(i, o)| *o = *o + bv[i % cols]);
        }
        let req =
            self.requires[x.0] || gain.is_some_and(|g| self.requires[g.0]) || bias.is_some_and(|b| self.requires[b.0]);
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            req,
        ))
    }

    /// Inverted dropout: kept activations are divided by the keep probability.
    /// Identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let n = self.values[a.0].numel();
        let mask: Vec<T> = if rate >= 1.0 {
            vec![T::zero(); n]
        } else {
            let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
            (0..n)
                .map(|_| {
                    if self.rng.random::<f64>() < rate {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        };
        let x = &self.values[a.0];
        let out: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = x.shape().to_vec();
        let req = self.requires[a.0];
        self.push(Tensor::new(shape, out).unwrap(), Op::Dropout { a, mask }, req)
    }

    /// Gathers rows of a matrix: `out[i] = table[ids[i]]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err(prim::EMBEDDING, &[&st], "table must be a matrix"));
        }
        let (rows, cols) = (st[0], st[1]);
        let tv = self.values[table.0].data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: prim::EMBEDDING,
                    index: id,
                    extent: rows,
                });
            }
            out.extend_from_slice(&tv[id * cols..(id + 1) * cols]);
        }
        let req = self.requires[table.0];
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err(prim::CONCAT, &[], "nothing to concatenate"));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let first = &shapes[0];
        let ok = axis < first.len()
            && shapes.iter().all(|s| {
                s.len() == first.len() && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b)
            });
        if !ok {
            let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            return Err(shape_err(
                prim::CONCAT,
                &refs,
                format!("extents differ off axis {axis}"),
            ));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (p, s) in parts.iter().zip(&shapes) {
                let chunk = s[axis] * inner;
                out.extend_from_slice(&self.values[p.0].data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(shape_err(
                prim::SLICE,
                &[&sa],
                format!("range {start}..{} on axis {axis}", start + len),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let av = self.values[a.0].data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * sa[axis] * inner + start * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let req = self.requires[a.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, axis, start }, req))
    }

    /// Maximum along `axis`, which is removed from the shape. Ties resolve to
    /// the first index; the gradient flows to that entry only.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(shape_err(prim::MAX, &[&sa], format!("cannot reduce axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let ext = sa[axis];
        let av = self.values[a.0].data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = av[o * ext * inner + i];
                for j in 1..ext {
                    let v = av[(o * ext + j) * inner + i];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        let req = self.requires[a.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::Max { a, axis, argmax }, req))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err(prim::TRANSPOSE, &[self.shape(a)], "need at least two axes"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if numel(shape) != numel(&sa) {
            return Err(shape_err(prim::RESHAPE, &[&sa, shape], "element counts differ"));
        }
        let out = self.values[a.0].clone().reshaped(shape)?;
        let req = self.requires[a.0];
        Ok(self.push(out, Op::Reshape(a), req))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        let valid = perm.len() == sa.len()
            && perm
                .iter()
                .all(|&p| p < sa.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err(prim::PERMUTE, &[&sa, perm], "not a permutation of the axes"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let out = permute_data(self.values[a.0].data(), &sa, perm);
        let req = self.requires[a.0];
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute { a, perm: perm.to_vec() },
            req,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum();
        let req = self.requires[a.0];
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    /// `out[i] = a[i, idx[i]]` for a matrix `a`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] != idx.len() {
            return Err(shape_err(
                prim::PICK,
                &[&sa, &[idx.len()]],
                "need a matrix with one index per row",
            ));
        }
        let cols = sa[1];
        let av = self.values[a.0].data();
        let mut out = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(TensorError::Index {
                    op: prim::PICK,
                    index: c,
                    extent: cols,
                });
            }
            out.push(av[r * cols + c]);
        }
        let req = self.requires[a.0];
        Ok(self.push(Tensor::vector(out), Op::Pick { a, idx: idx.to_vec() }, req))
    }

    /// Sets entries above the diagonal of the trailing square matrices to -inf.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let r = sa.len();
        if r < 2 || sa[r - 1] != sa[r - 2] {
            return Err(shape_err(prim::CAUSAL_MASK, &[&sa], "trailing axes must be square"));
        }
        let t = sa[r - 1];
        let mut out = self.values[a.0].data().to_vec();
        for mat in out.chunks_mut(t * t) {
            for i in 0..t {
                for v in &mut mat[i * t + i + 1..(i + 1) * t] {
                    *v = T::neg_infinity();
                }
            }
        }
        let req = self.requires[a.0];
        Ok(self.push(Tensor::new(sa, out)?, Op::CausalMask(a), req))
    }

    /// Sliding windows of `width` positions over axis 1 of `[n, len, ch]`,
    /// zero-padded at the end so at least one window exists. Output is
    /// `[n, max(len, width) - width + 1, width * ch]`.
    pub fn unfold(&mut self, a: Var, width: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || width == 0 {
            return Err(shape_err(
                prim::UNFOLD,
                &[&sa],
                format!("need [n, len, ch] and width {width} >= 1"),
            ));
        }
        let (n, len, ch) = (sa[0], sa[1], sa[2]);
        let windows = len.max(width) - width + 1;
        let av = self.values[a.0].data();
        let mut out = vec![T::zero(); n * windows * width * ch];
        for b in 0..n {
            for p in 0..windows {
                for q in 0..width.min(len.saturating_sub(p)) {
                    let src = (b * len + p + q) * ch;
                    let dst = ((b * windows + p) * width + q) * ch;
                    out[dst..dst + ch].copy_from_slice(&av[src..src + ch]);
                }
            }
        }
        let req = self.requires[a.0];
        Ok(self.push(
            Tensor::new(vec![n, windows, width * ch], out)?,
            Op::Unfold { a, width },
            req,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d(root)/d(node) to every node. Leaf gradients accumulate
    /// across calls; intermediate gradients are recomputed each call.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.values[root.0].shape();
        if numel(rs) != 1 {
            return Err(TensorError::NonScalarRoot(rs.to_vec()));
        }
        for (g, op) in self.grads.iter_mut().zip(&self.ops) {
            if !matches!(op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.requires[root.0] {
            return Ok(());
        }
        let mut ctx = Ctx {
            values: &self.values,
            grads: &mut self.grads,
            requires: &self.requires,
        };
        let seed = ctx.acc(root);
        seed[0] = seed[0] + T::one();
        for i in (0..=root.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = ctx.grads[i].take() else { continue };
            backward_node(&mut ctx, &self.ops[i], Var(i), &g);
            ctx.grads[i] = Some(g);
        }
        Ok(())
    }
}

struct Ctx<'a, T> {
    values: &'a [Tensor<T>],
    grads: &'a mut [Option<Vec<T>>],
    requires: &'a [bool],
}

impl<T: Real> Ctx<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn acc(&mut self, v: Var) -> &mut [T] {
        let n = self.values[v.0].numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn val(&self, v: Var) -> &[T] {
        self.values[v.0].data()
    }
}

fn backward_node<T: Real>(ctx: &mut Ctx<'_, T>, op: &Op<T>, me: Var, g: &[T]) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let sa = ctx.values[a.0].shape().to_vec();
            let sb = ctx.values[b.0].shape().to_vec();
            let MatDims { batch, m, k, n } = matmul_dims(&sa, &sb, *ta, *tb).expect("checked in forward");
            let (rsa, csa) = op_strides(&sa, *ta);
            let (rsb, csb) = op_strides(&sb, *tb);
            let nn = n as isize;
            if ctx.wants(*a) {
                let bv = ctx.values[b.0].data();
                let da = ctx.grads[a.0].get_or_insert_with(|| vec![T::zero(); batch * m * k]);
                for bi in 0..batch {
                    // op(dA) += dC · op(B)^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[bi * m * n..],
                        nn,
                        1,
                        &bv[bi * k * n..],
                        csb,
                        rsb,
                        T::one(),
                        &mut da[bi * m * k..],
                        rsa,
                        csa,
                    );
                }
            }
            if ctx.wants(*b) {
                let av = ctx.values[a.0].data();
                let db = ctx.grads[b.0].get_or_insert_with(|| vec![T::zero(); batch * k * n]);
                for bi in 0..batch {
                    // op(dB) += op(A)^T · dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av[bi * m * k..],
                        csa,
                        rsa,
                        &g[bi * m * n..],
                        nn,
                        1,
                        T::one(),
                        &mut db[bi * k * n..],
                        rsb,
                        csb,
                    );
                }
            }
        }
        Op::Add { a, b, bcast } => {
            if ctx.wants(*a) {
                ctx.acc(*a).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
            if ctx.wants(*b) {
                let cols = *ctx.values[a.0].shape().last().unwrap_or(&1);
                let db = ctx.acc(*b);
                match bcast {
                    Broadcast::Same => db.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x),
                    Broadcast::Row => g.iter().enumerate().for_each(|(i, &x)| db[i % cols] = db[i % cols] + x),
                    Broadcast::Col => g.iter().enumerate().for_each(|(i, &x)| db[i / cols] = db[i / cols] + x),
                }
            }
        }
        Op::Mul { a, b } => {
            if ctx.wants(*a) {
                let bv = ctx.values[b.0].data();
                let da = ctx.grads[a.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
                da.iter_mut()
                    .zip(g.iter().zip(bv))
                    .for_each(|(d, (&x, &y))| *d = *d + x * y);
            }
            if ctx.wants(*b) {
                let av = ctx.values[a.0].data();
                let db = ctx.grads[b.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
                db.iter_mut()
                    .zip(g.iter().zip(av))
                    .for_each(|(d, (&x, &y))| *d = *d + x * y);
            }
        }
        Op::Scale { a, c } => {
            let c = *c;
            ctx.acc(*a).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + c * x);
        }
        Op::Relu(a) => {
            let av = ctx.values[a.0].data();
            let da = ctx.grads[a.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((d, &x), &v) in da.iter_mut().zip(g).zip(av) {
                if v > T::zero() {
                    *d = *d + x;
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = ctx.values[me.0].data();
            let da = ctx.grads[a.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((d, &x), &s) in da.iter_mut().zip(g).zip(y) {
                *d = *d + x * s * (T::one() - s);
            }
        }
        Op::Tanh(a) => {
            let y = ctx.values[me.0].data();
            let da = ctx.grads[a.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((d, &x), &t) in da.iter_mut().zip(g).zip(y) {
                *d = *d + x * (T::one() - t * t);
            }
        }
        Op::Softmax(a) => {
            let cols = *ctx.values[me.0].shape().last().unwrap();
            let y = ctx.values[me.0].data();
            let da = ctx.grads[a.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(&x, &s)| x * s).sum();
                for ((d, &x), &s) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = *d + s * (x - dot);
                }
            }
        }
        Op::LogSoftmax(a) => {
            let cols = *ctx.values[me.0].shape().last().unwrap();
            let y = ctx.values[me.0].data();
            let da = ctx.grads[a.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((dr, gr), yr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                let s: T = gr.iter().copied().sum();
                for ((d, &x), &l) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = *d + x - l.exp() * s;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let cols = *ctx.values[x.0].shape().last().unwrap();
            let n = T::from_usize(cols).unwrap();
            if let Some(b) = bias.filter(|b| ctx.wants(*b)) {
                let db = ctx.acc(b);
                g.iter().enumerate().for_each(|(i, &v)| db[i % cols] = db[i % cols] + v);
            }
            if let Some(gn) = gain.filter(|gn| ctx.wants(*gn)) {
                let dg = ctx.acc(gn);
                g.iter()
                    .zip(xhat)
                    .enumerate()
                    .for_each(|(i, (&v, &h))| dg[i % cols] = dg[i % cols] + v * h);
            }
            if ctx.wants(*x) {
                let gv: Vec<T> = match gain {
                    Some(gn) => ctx.val(*gn).to_vec(),
                    None => vec![T::one(); cols],
                };
                let dx = ctx.grads[x.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (r, ((dr, gr), hr)) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(xhat.chunks(cols))
                    .enumerate()
                {
                    let dh: Vec<T> = gr.iter().zip(&gv).map(|(&a, &b)| a * b).collect();
                    let mean_dh = dh.iter().copied().sum::<T>() / n;
                    let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((d, &dhi), &hi) in dr.iter_mut().zip(&dh).zip(hr) {
                        *d = *d + rstd[r] * (dhi - mean_dh - hi * mean_dhh);
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            ctx.acc(*a)
                .iter_mut()
                .zip(g.iter().zip(mask))
                .for_each(|(d, (&x, &m))| *d = *d + x * m);
        }
        Op::Lookup { table, ids } => {
            let cols = ctx.values[table.0].shape()[1];
            let dt = ctx.acc(*table);
            for (i, &id) in ids.iter().enumerate() {
                let dst = &mut dt[id * cols..(id + 1) * cols];
                dst.iter_mut()
                    .zip(&g[i * cols..(i + 1) * cols])
                    .for_each(|(d, &x)| *d = *d + x);
            }
        }
        Op::Concat { parts, axis } => {
            let shape = ctx.values[me.0].shape().to_vec();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let row = shape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let chunk = ctx.values[p.0].shape()[*axis] * inner;
                if ctx.wants(*p) {
                    let dp = ctx.acc(*p);
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        dp[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &x)| *d = *d + x);
                    }
                }
                offset += chunk;
            }
        }
        Op::Slice { a, axis, start } => {
            let sa = ctx.values[a.0].shape().to_vec();
            let len = ctx.values[me.0].shape()[*axis];
            let outer: usize = sa[..*axis].iter().product();
            let inner: usize = sa[axis + 1..].iter().product();
            let da = ctx.acc(*a);
            for o in 0..outer {
                let base = o * sa[*axis] * inner + start * inner;
                da[base..base + len * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                    .for_each(|(d, &x)| *d = *d + x);
            }
        }
        Op::Max { a, axis, argmax } => {
            let sa = ctx.values[a.0].shape().to_vec();
            let inner: usize = sa[axis + 1..].iter().product();
            let ext = sa[*axis];
            let da = ctx.acc(*a);
            for (j, (&x, &am)) in g.iter().zip(argmax).enumerate() {
                let (o, i) = (j / inner, j % inner);
                let idx = (o * ext + am) * inner + i;
                da[idx] = da[idx] + x;
            }
        }
        Op::Reshape(a) => {
            ctx.acc(*a).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
        }
        Op::Permute { a, perm } => {
            let out_shape = ctx.values[me.0].shape().to_vec();
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let back = permute_data(g, &out_shape, &inv);
            ctx.acc(*a).iter_mut().zip(&back).for_each(|(d, &x)| *d = *d + x);
        }
        Op::Sum(a) => {
            let x = g[0];
            ctx.acc(*a).iter_mut().for_each(|d| *d = *d + x);
        }
        Op::Pick { a, idx } => {
            let cols = ctx.values[a.0].shape()[1];
            let da = ctx.acc(*a);
            for (r, (&c, &x)) in idx.iter().zip(g).enumerate() {
                da[r * cols + c] = da[r * cols + c] + x;
            }
        }
        Op::CausalMask(a) => {
            let t = *ctx.values[a.0].shape().last().unwrap();
            let da = ctx.acc(*a);
            for (dm, gm) in da.chunks_mut(t * t).zip(g.chunks(t * t)) {
                for i in 0..t {
                    for j in 0..=i {
                        dm[i * t + j] = dm[i * t + j] + gm[i * t + j];
                    }
                }
            }
        }
        Op::Unfold { a, width } => {
            let sa = ctx.values[a.0].shape().to_vec();
            let (n, len, ch) = (sa[0], sa[1], sa[2]);
            let width = *width;
            let windows = len.max(width) - width + 1;
            let da = ctx.acc(*a);
            for b in 0..n {
                for p in 0..windows {
                    for q in 0..width.min(len.saturating_sub(p)) {
                        let dst = (b * len + p + q) * ch;
                        let src = ((b * windows + p) * width + q) * ch;
                        da[dst..dst + ch]
                            .iter_mut()
                            .zip(&g[src..src + ch])
                            .for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<MatDims> {
    let bad = |detail: &str| shape_err(prim::MATMUL, &[sa, sb], detail);
    if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
        return Err(bad("operands must both be matrices or both be batches of matrices"));
    }
    let batch = if sa.len() == 3 {
        if sa[0] != sb[0] {
            return Err(bad("batch extents differ"));
        }
        sa[0]
    } else {
        1
    };
    let r = sa.len();
    let (m, k) = if ta {
        (sa[r - 1], sa[r - 2])
    } else {
        (sa[r - 2], sa[r - 1])
    };
    let (kb, n) = if tb {
        (sb[r - 1], sb[r - 2])
    } else {
        (sb[r - 2], sb[r - 1])
    };
    if k != kb {
        return Err(bad("inner dimensions differ"));
    }
    Ok(MatDims { batch, m, k, n })
}

/// Row and column strides of `op(x)` for a row-major matrix (or batch of them).
fn op_strides(shape: &[usize], transposed: bool) -> (isize, isize) {
    let cols = shape[shape.len() - 1] as isize;
    if transposed {
        (1, cols)
    } else {
        (cols, 1)
    }
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(shape_err(op, &[shape], "need a non-empty last axis")),
    }
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
