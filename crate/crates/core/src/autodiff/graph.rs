//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op together with whatever activations
//! its backward rule needs. [`Graph::backward`] walks the tape once in exact
//! reverse order, accumulating vector-Jacobian products into each input and
//! finally into the [`ParamStore`] gradients. Nodes that do not depend on a
//! trainable leaf never receive a gradient, so parameters with no path to the
//! loss keep a gradient of exactly zero.

use super::param::{ParamId, ParamStore};
use super::tensor::{split_axis, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Log-argument clamp shared by every binary cross-entropy term.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
        scale: T,
    },
    SumAll(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GruCell {
        x: Var,
        h: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        r: Vec<T>,
        z: Vec<T>,
        n: Vec<T>,
        ghn: Vec<T>,
    },
    GradReverse {
        x: Var,
        alpha: T,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
        mask: Option<Vec<T>>,
        count: T,
    },
    AbsCosine {
        a: Var,
        b: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(_) => "sum_all",
            Op::Conv { .. } => "conv",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::GruCell { .. } => "gru_cell",
            Op::GradReverse { .. } => "grad_reverse",
            Op::Bce { .. } => "bce",
            Op::AbsCosine { .. } => "abs_cosine",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the trainable leaves after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::variable`] or [`Graph::param`];
    /// `None` when no path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    check_finite: bool,
    no_grad: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            check_finite: false,
            no_grad: false,
        }
    }

    /// A graph for inference: parameters enter as constants and nothing is
    /// differentiable.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::new()
        }
    }

    /// Fail with [`Error::NonFinite`] as soon as any op produces NaN or inf.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf whose gradient is reported through [`Gradients`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let rg = !self.no_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; backward accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let rg = !self.no_grad;
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    /// `x[..., j] + b[j]` for a bias vector `b` over the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().ok_or_else(|| shape_err("add_bias on scalar"))?;
        if self.shape(b) != [n] {
            return Err(shape_err(format!(
                "add_bias: bias {:?} for input {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (e, &bj) in row.iter_mut().zip(&bias) {
                *e = *e + bj;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(v, Op::AddBias(x, b), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.tanh());
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// Identity on values; scales the upstream gradient by `-alpha`.
    pub fn grad_reverse(&mut self, x: Var, alpha: T) -> Result<Var> {
        if alpha < T::zero() {
            return Err(Error::Config("grad_reverse requires alpha >= 0".into()));
        }
        let v = self.value(x).clone();
        let rg = self.rg(&[x]);
        self.push(v, Op::GradReverse { x, alpha }, rg)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let v = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    // ---- reductions --------------------------------------------------------

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let mut v = self.value(x).clone();
        let d = v.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for t in 0..len {
                    mx = mx.max(d[base + t * inner]);
                }
                let mut s = T::zero();
                for t in 0..len {
                    let e = (d[base + t * inner] - mx).exp();
                    d[base + t * inner] = e;
                    s = s + e;
                }
                for t in 0..len {
                    d[base + t * inner] = d[base + t * inner] / s;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax { x, axis }, rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let scale = if mean {
            T::one() / T::from_f64(len as f64)
        } else {
            T::one()
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let row = &src[(o * len + t) * inner..(o * len + t + 1) * inner];
                for (acc, &e) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + e;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|e| *e = *e * scale);
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let v = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::SumAxis { x, axis, scale }, rg)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum over `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::SumAll(x), rg)
    }

    // ---- convolution and pooling -------------------------------------------

    /// Stride-1 "same" 2-D convolution: x `[N, Cin, H, W]`,
    /// w `[Cout, Cin, KH, KW]` (odd kernel sizes), b `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err(format!("conv2d: input {sx:?} kernel {sw:?}")));
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
        };
        let out_shape = [geom.n, geom.cout, geom.h, geom.w];
        self.conv(x, w, b, geom, &out_shape)
    }

    /// Stride-1 "same" 1-D convolution: x `[N, Cin, L]`, w `[Cout, Cin, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(shape_err(format!("conv1d: input {sx:?} kernel {sw:?}")));
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: 1,
            cout: sw[0],
            kh: sw[2],
            kw: 1,
        };
        let out_shape = [geom.n, geom.cout, geom.h];
        self.conv(x, w, b, geom, &out_shape)
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, g: ConvGeom, out_shape: &[usize]) -> Result<Var> {
        if g.kh % 2 == 0 || g.kw % 2 == 0 {
            return Err(shape_err("convolution kernels must have odd extent"));
        }
        if self.shape(b) != [g.cout] {
            return Err(shape_err(format!("conv bias {:?}, expected [{}]", self.shape(b), g.cout)));
        }
        let plane = g.plane();
        let patch = g.patch();
        let mut out = vec![T::zero(); g.n * g.cout * plane];
        let mut cols = vec![T::zero(); patch * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for n in 0..g.n {
            im2col(&xv[n * g.cin * plane..(n + 1) * g.cin * plane], &g, &mut cols);
            let dst = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
            for (c, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(bv[c]);
            }
            T::gemm(
                g.cout,
                patch,
                plane,
                wv,
                patch as isize,
                1,
                &cols,
                plane as isize,
                1,
                T::one(),
                dst,
                plane as isize,
                1,
            );
        }
        let v = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x, w, b]);
        self.push(v, Op::Conv { x, w, b, geom: g }, rg)
    }

    /// Non-overlapping max pooling over the last two axes of `[N, C, H, W]`;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || ph == 0 || pw == 0 || s[2] < ph || s[3] < pw {
            return Err(shape_err(format!("max_pool2d({ph},{pw}) on {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / ph, w / pw);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * ph * w + ox * pw;
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let idx = base + (oy * ph + dy) * w + ox * pw + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::MaxPool2d { x, argmax }, rg)
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat of nothing"))?).to_vec();
        let (outer, _, inner) = split_axis(&first, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        let rg = self.rg(xs);
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `len` entries of `axis` starting at `start`; the axis is kept.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis(&shape, axis)?;
        if start + len > full || len == 0 {
            return Err(shape_err(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len)));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let v = Tensor::new(&s, out)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Slice { x, axis, start }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out = permute_data(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let v = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[x]);
        self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    // ---- recurrent ---------------------------------------------------------

    /// One GRU step (gate order r, z, n):
    /// x `[N, I]`, h `[N, H]`, w_ih `[I, 3H]`, w_hh `[H, 3H]`, biases `[3H]`.
    ///
    /// r = σ(x·W_ir + b_ir + h·W_hr + b_hr), z likewise,
    /// n = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn)),
    /// h' = (1 − z) ⊙ n + z ⊙ h.
    pub fn gru_cell(&mut self, x: Var, h: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Result<Var> {
        let (sx, sh) = (self.shape(x).to_vec(), self.shape(h).to_vec());
        if sx.len() != 2 || sh.len() != 2 || sx[0] != sh[0] {
            return Err(shape_err(format!("gru_cell: x {sx:?} h {sh:?}")));
        }
        let (nb, ni, nh) = (sx[0], sx[1], sh[1]);
        let g3 = 3 * nh;
        if self.shape(w_ih) != [ni, g3]
            || self.shape(w_hh) != [nh, g3]
            || self.shape(b_ih) != [g3]
            || self.shape(b_hh) != [g3]
        {
            return Err(shape_err(format!(
                "gru_cell weights: w_ih {:?} w_hh {:?} b_ih {:?} b_hh {:?} for I={ni} H={nh}",
                self.shape(w_ih),
                self.shape(w_hh),
                self.shape(b_ih),
                self.shape(b_hh)
            )));
        }
        let mut gi = vec![T::zero(); nb * g3];
        let mut gh = vec![T::zero(); nb * g3];
        for row in 0..nb {
            gi[row * g3..(row + 1) * g3].copy_from_slice(self.value(b_ih).data());
            gh[row * g3..(row + 1) * g3].copy_from_slice(self.value(b_hh).data());
        }
        T::gemm(nb, ni, g3, self.value(x).data(), ni as isize, 1, self.value(w_ih).data(), g3 as isize, 1, T::one(), &mut gi, g3 as isize, 1);
        T::gemm(nb, nh, g3, self.value(h).data(), nh as isize, 1, self.value(w_hh).data(), g3 as isize, 1, T::one(), &mut gh, g3 as isize, 1);
        let hv = self.value(h).data();
        let mut r = vec![T::zero(); nb * nh];
        let mut z = vec![T::zero(); nb * nh];
        let mut n = vec![T::zero(); nb * nh];
        let mut ghn = vec![T::zero(); nb * nh];
        let mut out = vec![T::zero(); nb * nh];
        for row in 0..nb {
            let gi = &gi[row * g3..(row + 1) * g3];
            let gh = &gh[row * g3..(row + 1) * g3];
            for j in 0..nh {
                let k = row * nh + j;
                r[k] = sigmoid(gi[j] + gh[j]);
                z[k] = sigmoid(gi[nh + j] + gh[nh + j]);
                ghn[k] = gh[2 * nh + j];
                n[k] = (gi[2 * nh + j] + r[k] * ghn[k]).tanh();
                out[k] = (T::one() - z[k]) * n[k] + z[k] * hv[k];
            }
        }
        let v = Tensor::new(&[nb, nh], out)?;
        let rg = self.rg(&[x, h, w_ih, w_hh, b_ih, b_hh]);
        self.push(
            v,
            Op::GruCell {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                r,
                z,
                n,
                ghn,
            },
            rg,
        )
    }

    // ---- losses ------------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `pred` against `target`
    /// over entries whose mask is nonzero. Log arguments are clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`; the gradient is evaluated at the clamped
    /// probability. A mask with no active entry yields exactly 0.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Var> {
        if target.shape() != self.shape(pred) {
            return Err(shape_err(format!(
                "bce target {:?} vs prediction {:?}",
                target.shape(),
                self.shape(pred)
            )));
        }
        if let Some(m) = mask {
            if m.shape() != target.shape() {
                return Err(shape_err(format!("bce mask {:?} vs target {:?}", m.shape(), target.shape())));
            }
        }
        let p = self.value(pred).data();
        let y = target.data();
        let mut total = 0.0f64;
        let mut count = 0.0f64;
        for i in 0..p.len() {
            let w = mask.map_or(1.0, |m| m.data()[i].to_f64());
            if w == 0.0 {
                continue;
            }
            let pc = p[i].to_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let yi = y[i].to_f64();
            total -= w * (yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln());
            count += w;
        }
        let value = if count > 0.0 { total / count } else { 0.0 };
        let v = Tensor::scalar(T::from_f64(value));
        let rg = self.rg(&[pred]) && count > 0.0;
        self.push(
            v,
            Op::Bce {
                pred,
                target: y.to_vec(),
                mask: mask.map(|m| m.data().to_vec()),
                count: T::from_f64(count),
            },
            rg,
        )
    }

    /// `|cos(a, b)|` of two tensors viewed as flat vectors.
    pub fn abs_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(format!("abs_cosine: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (c, na, nb) = cosine_parts(self.value(a).data(), self.value(b).data());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateWeights("zero-norm weight vector".into()));
        }
        let v = Tensor::scalar(T::from_f64(c.abs()));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::AbsCosine { a, b }, rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients of [`Graph::variable`] leaves are returned.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        self.backward_scaled(loss, T::one(), store)
    }

    /// Same as [`Graph::backward`] with the seed gradient set to `seed`.
    pub fn backward_scaled(&mut self, loss: Var, seed: T, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward on non-scalar {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), seed));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    store.get_mut(*id).grad.add_assign(&g);
                    grads[i] = Some(g);
                }
                op => self.backprop(op, &node.value, g, &mut grads),
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, T::one()));
                self.acc(grads, *b, |d| axpy(d, gd, T::one()));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, gd, T::one()));
                self.acc(grads, *b, |d| axpy(d, gd, -T::one()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * va[i];
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| axpy(d, gd, *c)),
            Op::GradReverse { x, alpha } => {
                let k = -*alpha;
                self.acc(grads, *x, |d| axpy(d, gd, k));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, |d| axpy(d, gd, T::one()));
                self.acc(grads, *b, |d| {
                    for row in gd.chunks(d.len()) {
                        axpy(d, row, T::one());
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] = d[i] + gd[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if y[i] > T::zero() {
                            d[i] = d[i] + gd[i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G · Bᵀ
                self.acc(grads, *a, |d| {
                    T::gemm(m, n, k, gd, n as isize, 1, vb, 1, n as isize, T::one(), d, k as isize, 1)
                });
                // dB = Aᵀ · G
                self.acc(grads, *b, |d| {
                    T::gemm(k, m, n, va, 1, k as isize, gd, n as isize, 1, T::one(), d, n as isize, 1)
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis).expect("checked in forward");
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for t in 0..len {
                                let j = base + t * inner;
                                dot = dot + gd[j] * y[j];
                            }
                            for t in 0..len {
                                let j = base + t * inner;
                                d[j] = d[j] + y[j] * (gd[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::SumAxis { x, axis, scale } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis).expect("checked in forward");
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for t in 0..len {
                            let dst = &mut d[(o * len + t) * inner..(o * len + t + 1) * inner];
                            axpy(dst, src, *scale);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let s = gd[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|e| *e = *e + s));
            }
            Op::Conv { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, gd, grads),
            Op::MaxPool2d { x, argmax } => {
                self.acc(grads, *x, |d| {
                    for (&src, &gv) in argmax.iter().zip(gd) {
                        d[src] = d[src] + gv;
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis).expect("checked in forward");
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    self.acc(grads, v, |d| {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            axpy(
                                &mut d[o * len * inner..(o + 1) * len * inner],
                                &gd[from..from + len * inner],
                                T::one(),
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis).expect("checked in forward");
                let len = out.shape()[*axis];
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        axpy(
                            &mut d[to..to + len * inner],
                            &gd[o * len * inner..(o + 1) * len * inner],
                            T::one(),
                        );
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, gd, T::one())),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(gd, out.shape(), &inverse);
                self.acc(grads, *x, |d| axpy(d, &back, T::one()));
            }
            Op::GruCell {
                x,
                h,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                r,
                z,
                n,
                ghn,
            } => {
                let (nb, ni) = (self.shape(*x)[0], self.shape(*x)[1]);
                let nh = self.shape(*h)[1];
                let g3 = 3 * nh;
                let hv = self.value(*h).data();
                let mut dgi = vec![T::zero(); nb * g3];
                let mut dgh = vec![T::zero(); nb * g3];
                let mut dh_direct = vec![T::zero(); nb * nh];
                for row in 0..nb {
                    for j in 0..nh {
                        let k = row * nh + j;
                        let dout = gd[k];
                        let dz = dout * (hv[k] - n[k]);
                        let dn = dout * (T::one() - z[k]);
                        dh_direct[k] = dout * z[k];
                        let dan = dn * (T::one() - n[k] * n[k]);
                        let dr = dan * ghn[k];
                        let dar = dr * r[k] * (T::one() - r[k]);
                        let daz = dz * z[k] * (T::one() - z[k]);
                        let base = row * g3;
                        dgi[base + j] = dar;
                        dgi[base + nh + j] = daz;
                        dgi[base + 2 * nh + j] = dan;
                        dgh[base + j] = dar;
                        dgh[base + nh + j] = daz;
                        dgh[base + 2 * nh + j] = dan * r[k];
                    }
                }
                let (xv, wih, whh) = (
                    self.value(*x).data(),
                    self.value(*w_ih).data(),
                    self.value(*w_hh).data(),
                );
                self.acc(grads, *x, |d| {
                    T::gemm(nb, g3, ni, &dgi, g3 as isize, 1, wih, 1, g3 as isize, T::one(), d, ni as isize, 1)
                });
                self.acc(grads, *h, |d| {
                    axpy(d, &dh_direct, T::one());
                    T::gemm(nb, g3, nh, &dgh, g3 as isize, 1, whh, 1, g3 as isize, T::one(), d, nh as isize, 1)
                });
                self.acc(grads, *w_ih, |d| {
                    T::gemm(ni, nb, g3, xv, 1, ni as isize, &dgi, g3 as isize, 1, T::one(), d, g3 as isize, 1)
                });
                self.acc(grads, *w_hh, |d| {
                    T::gemm(nh, nb, g3, hv, 1, nh as isize, &dgh, g3 as isize, 1, T::one(), d, g3 as isize, 1)
                });
                self.acc(grads, *b_ih, |d| {
                    for row in dgi.chunks(g3) {
                        axpy(d, row, T::one());
                    }
                });
                self.acc(grads, *b_hh, |d| {
                    for row in dgh.chunks(g3) {
                        axpy(d, row, T::one());
                    }
                });
            }
            Op::Bce {
                pred,
                target,
                mask,
                count,
            } => {
                let p = self.value(*pred).data();
                let s = gd[0] / *count;
                let eps = T::from_f64(BCE_EPS);
                self.acc(grads, *pred, |d| {
                    for i in 0..d.len() {
                        let w = mask.as_ref().map_or(T::one(), |m| m[i]);
                        if w == T::zero() {
                            continue;
                        }
                        let pc = p[i].max(eps).min(T::one() - eps);
                        d[i] = d[i] + s * w * (pc - target[i]) / (pc * (T::one() - pc));
                    }
                });
            }
            Op::AbsCosine { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (c, na, nb) = cosine_parts(va, vb);
                let sign = if c > 0.0 {
                    1.0
                } else if c < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let s = gd[0].to_f64() * sign;
                let inv = 1.0 / (na * nb);
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        let gi = vb[i].to_f64() * inv - c * va[i].to_f64() / (na * na);
                        d[i] = d[i] + T::from_f64(s * gi);
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        let gi = va[i].to_f64() * inv - c * vb[i].to_f64() / (nb * nb);
                        d[i] = d[i] + T::from_f64(s * gi);
                    }
                });
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, g: &ConvGeom, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let plane = g.plane();
        let patch = g.patch();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        self.acc(grads, b, |d| {
            for n in 0..g.n {
                for (c, dc) in d.iter_mut().enumerate() {
                    let row = &gd[(n * g.cout + c) * plane..(n * g.cout + c + 1) * plane];
                    *dc = row.iter().fold(*dc, |acc, &e| acc + e);
                }
            }
        });
        if !need_x && !need_w {
            return;
        }
        let mut cols = vec![T::zero(); patch * plane];
        let mut dw = vec![T::zero(); g.cout * patch];
        let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        for n in 0..g.n {
            let go = &gd[n * g.cout * plane..(n + 1) * g.cout * plane];
            if need_w {
                im2col(&xv[n * g.cin * plane..(n + 1) * g.cin * plane], g, &mut cols);
                // dW += G_n · colsᵀ
                T::gemm(g.cout, plane, patch, go, plane as isize, 1, &cols, 1, plane as isize, T::one(), &mut dw, patch as isize, 1);
            }
            if need_x {
                // dcols = Wᵀ · G_n
                T::gemm(patch, g.cout, plane, wv, 1, patch as isize, go, plane as isize, 1, T::zero(), &mut cols, plane as isize, 1);
                col2im_add(&cols, g, &mut dx[n * g.cin * plane..(n + 1) * g.cin * plane]);
            }
        }
        if need_w {
            self.acc(grads, w, |d| axpy(d, &dw, T::one()));
        }
        if need_x {
            self.acc(grads, x, |d| axpy(d, &dx, T::one()));
        }
    }

    /// Adds into the gradient slot of `v` when `v` is differentiable.
    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], k: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + k * s;
    }
}

/// (cosine, ‖a‖, ‖b‖) accumulated in f64.
fn cosine_parts<T: Scalar>(a: &[T], b: &[T]) -> (f64, f64, f64) {
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    let c = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
    (c, na, nb)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w) = (g.h as isize, g.w as isize);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = g.plane();
    for c in 0..g.cin {
        let src = &x[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ki as isize - ph;
                let dx = kj as isize - pw;
                for y in 0..h {
                    let sy = y + dy;
                    let drow = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (xx, d) in drow.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *d = if sx < 0 || sx >= w { T::zero() } else { srow[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w) = (g.h as isize, g.w as isize);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let plane = g.plane();
    for c in 0..g.cin {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ki as isize - ph;
                let ddx = kj as isize - pw;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx + ddx;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let d = &mut dst[(sy * w + sx) as usize];
                        *d = *d + src[(y * w + xx) as usize];
                    }
                }
            }
        }
    }
}

/// Row-major permutation: output axis `i` takes input axis `perm[i]`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
