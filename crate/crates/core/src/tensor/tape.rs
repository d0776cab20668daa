//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its output value and the rule needed to
//! push gradients back to its inputs. Nodes are recorded in topological order, so
//! [`Tape::backward`] simply walks them in reverse.
//!
//! Gradients flow only into nodes that (transitively) depend on a leaf created with
//! [`Tape::leaf`]. Leaves created with [`Tape::constant`] never materialize a gradient
//! buffer, which is how the trainer freezes one network while updating the other.
//!
//! Leaf gradients accumulate across calls to `backward` until [`Tape::zero_grad`]:
//! running `backward` twice on the same loss doubles every leaf gradient.

use super::kernels::{self, Conv2dOptions, ConvGeom};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    ConcatChannels(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Ln(Var),
    Sum(Var),
    Mean(Var),
    ChannelSums(Var),
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf: receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been materialized.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_materialized(&self, v: Var) -> bool {
        self.grad(v).is_some()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn dims4(&self, v: Var, op: &str) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .map_err(|_| shape_err!("{op}: expected [B,C,H,W], got {:?}", self.value(v).shape()))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("{op}: operand shapes differ: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn unary(&mut self, input: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.derived(out, op, &[input])
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        name: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derived(out, op, &[a, b]))
    }

    // ---- operations ------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        opts: Conv2dOptions,
    ) -> Result<Var> {
        let xd = self.dims4(input, "conv2d input")?;
        let wd = self.dims4(weight, "conv2d weight")?;
        let geom = ConvGeom::new(xd, wd, opts)?;
        if self.value(bias).shape() != [geom.cout] {
            return Err(shape_err!(
                "conv2d: bias shape {:?} does not match {} output channels",
                self.value(bias).shape(),
                geom.cout
            ));
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = Tensor::new([geom.batch, geom.cout, geom.ho, geom.wo], data)?;
        Ok(self.derived(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    pub fn upsample2x_nearest(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "upsample2x")?;
        let data = kernels::upsample2x_forward(self.value(input).data(), [b, c, h, w]);
        let out = Tensor::new([b, c, 2 * h, 2 * w], data)?;
        Ok(self.derived(out, Op::Upsample2x(input), &[input]))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2d: extents must be even, got {h}x{w}"));
        }
        let (data, argmax) = kernels::maxpool2x2_forward(self.value(input).data(), [b, c, h, w]);
        let out = Tensor::new([b, c, h / 2, w / 2], data)?;
        Ok(self.derived(out, Op::MaxPool2x2 { input, argmax }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Op::Relu(input), |v| v.max(T::zero()))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Op::Sigmoid(input), kernels::sigmoid)
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let dims = self.dims4(input, "softmax_channels")?;
        if dims[1] < 2 {
            return Err(shape_err!(
                "softmax_channels: need at least 2 channels, got {}",
                dims[1]
            ));
        }
        let data = kernels::softmax_channels_forward(self.value(input).data(), dims);
        let out = Tensor::new(dims, data)?;
        Ok(self.derived(out, Op::SoftmaxChannels(input), &[input]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.dims4(a, "concat_channels")?;
        let [bb, cb, hb, wb] = self.dims4(b, "concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err!(
                "concat_channels: batch/spatial mismatch {:?} vs {:?}",
                [ba, ca, ha, wa],
                [bb, cb, hb, wb]
            ));
        }
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ba * (pa + pb));
        for n in 0..ba {
            data.extend_from_slice(&xa[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&xb[n * pb..(n + 1) * pb]);
        }
        let out = Tensor::new([ba, ca + cb, ha, wa], data)?;
        Ok(self.derived(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), "div", |p, q| p / q)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        self.unary(input, Op::Affine { input, scale }, |v| scale * v + shift)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Var {
        self.unary(input, Op::Clamp { input, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn ln(&mut self, input: Var) -> Var {
        self.unary(input, Op::Ln(input), |v| v.ln())
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: T = self.value(input).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: T = x.data().iter().copied().sum();
        let m = s / T::of(x.numel() as f64);
        self.derived(Tensor::scalar(m), Op::Mean(input), &[input])
    }

    /// Sums a `[B,C,H,W]` tensor over batch and space, leaving `[C]`.
    pub fn channel_sums(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "channel_sums")?;
        let x = self.value(input).data();
        let plane = h * w;
        let mut out = vec![T::zero(); c];
        for n in 0..b {
            for (k, o) in out.iter_mut().enumerate() {
                let base = (n * c + k) * plane;
                *o = *o + x[base..base + plane].iter().copied().sum::<T>();
            }
        }
        let out = Tensor::new([c], out)?;
        Ok(self.derived(out, Op::ChannelSums(input), &[input]))
    }

    /// Spatial mean: `[B,C,H,W]` → `[B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "global_avg_pool")?;
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let data = self
            .value(input)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new([b, c], data)?;
        Ok(self.derived(out, Op::GlobalAvgPool(input), &[input]))
    }

    /// Affine map `x · W + b` for `x: [B,F]`, `W: [F,O]`, `b: [O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        let (&[bt, f], &[wf, o], &[bo]) = (xs, ws, bs) else {
            return Err(shape_err!(
                "dense: expected x[B,F], W[F,O], b[O]; got {xs:?}, {ws:?}, {bs:?}"
            ));
        };
        if f != wf || o != bo {
            return Err(shape_err!(
                "dense: incompatible shapes x{xs:?}, W{ws:?}, b{bs:?}"
            ));
        }
        let mut data = vec![T::zero(); bt * o];
        T::gemm(
            bt,
            f,
            o,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut data,
            false,
        );
        let bias_v = self.value(bias).data();
        for row in data.chunks_exact_mut(o) {
            row.iter_mut().zip(bias_v).for_each(|(v, &bv)| *v = *v + bv);
        }
        let out = Tensor::new([bt, o], data)?;
        Ok(self.derived(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    /// Gathers rows along axis 0 (batch samples, or entries of a vector).
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let n = x.shape()[0];
        if rows.is_empty() {
            return Err(shape_err!("select_rows: empty selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err!(
                "select_rows: row {bad} out of range for extent {n}"
            ));
        }
        let stride = x.numel() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&x.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(
            out,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
            &[input],
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into every trainable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<T>>> = Vec::new();
        scratch.resize_with(loss.0 + 1, || None);
        scratch[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = scratch[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                add_into(&mut self.grads[id], g);
                continue;
            }
            for (input, grad) in self.input_grads(id, &g) {
                add_into(&mut scratch[input.0], grad);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut out = Vec::new();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [self.wants(*input), self.wants(*weight), self.wants(*bias)];
                let grads = kernels::conv2d_backward(geom, val(*input), val(*weight), g, need);
                for (v, gr) in [
                    (*input, grads.input),
                    (*weight, grads.weight),
                    (*bias, grads.bias),
                ] {
                    if let Some(gr) = gr {
                        out.push((v, gr));
                    }
                }
            }
            Op::Upsample2x(x) => {
                let dims = self.nodes[x.0].value.dims4().expect("checked in forward");
                out.push((*x, kernels::upsample2x_backward(g, dims)));
            }
            Op::MaxPool2x2 { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                out.push((*input, dx));
            }
            Op::Relu(x) => {
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let dx = y
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                out.push((*x, dx));
            }
            Op::SoftmaxChannels(x) => {
                let dims = node.value.dims4().expect("checked in forward");
                out.push((*x, kernels::softmax_channels_backward(y, g, dims)));
            }
            Op::ConcatChannels(a, b) => {
                let [bt, ca, h, w] = self.nodes[a.0].value.dims4().expect("checked");
                let cb = self.nodes[b.0].value.dims4().expect("checked")[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let (mut ga, mut gb) = (Vec::with_capacity(bt * pa), Vec::with_capacity(bt * pb));
                for n in 0..bt {
                    let row = &g[n * (pa + pb)..(n + 1) * (pa + pb)];
                    ga.extend_from_slice(&row[..pa]);
                    gb.extend_from_slice(&row[pa..]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                out.push((*a, g.iter().zip(xb).map(|(&gv, &q)| gv * q).collect()));
                out.push((*b, g.iter().zip(xa).map(|(&gv, &p)| gv * p).collect()));
            }
            Op::Div(a, b) => {
                let xb = val(*b);
                out.push((*a, g.iter().zip(xb).map(|(&gv, &q)| gv / q).collect()));
                let gb = g
                    .iter()
                    .zip(y)
                    .zip(xb)
                    .map(|((&gv, &r), &q)| -gv * r / q)
                    .collect();
                out.push((*b, gb));
            }
            Op::Affine { input, scale } => {
                out.push((*input, g.iter().map(|&gv| gv * *scale).collect()));
            }
            Op::Clamp { input, lo, hi } => {
                let dx = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v < *lo || v > *hi { T::zero() } else { gv })
                    .collect();
                out.push((*input, dx));
            }
            Op::Ln(x) => {
                out.push((*x, val(*x).iter().zip(g).map(|(&v, &gv)| gv / v).collect()));
            }
            Op::Sum(x) => {
                out.push((*x, vec![g[0]; val(*x).len()]));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                out.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
            Op::ChannelSums(x) => {
                let [b, c, h, w] = self.nodes[x.0].value.dims4().expect("checked");
                let plane = h * w;
                let mut dx = Vec::with_capacity(b * c * plane);
                for _ in 0..b {
                    for &gv in g.iter().take(c) {
                        dx.extend(std::iter::repeat(gv).take(plane));
                    }
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.nodes[x.0].value.dims4().expect("checked");
                let plane = h * w;
                let inv = T::one() / T::of(plane as f64);
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * inv).take(plane))
                    .collect();
                out.push((*x, dx));
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (bt, f) = {
                    let s = self.nodes[input.0].value.shape();
                    (s[0], s[1])
                };
                let o = self.nodes[bias.0].value.numel();
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); bt * f];
                    T::gemm(bt, o, f, g, false, val(*weight), true, &mut dx, false);
                    out.push((*input, dx));
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); f * o];
                    T::gemm(f, bt, o, val(*input), true, g, false, &mut dw, false);
                    out.push((*weight, dw));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks_exact(o) {
                        db.iter_mut().zip(row).for_each(|(d, &gv)| *d = *d + gv);
                    }
                    out.push((*bias, db));
                }
            }
            Op::SelectRows { input, rows } => {
                let x = &self.nodes[input.0].value;
                let stride = x.numel() / x.shape()[0];
                let mut dx = vec![T::zero(); x.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dx[r * stride..(r + 1) * stride];
                    dst.iter_mut()
                        .zip(&g[k * stride..(k + 1) * stride])
                        .for_each(|(d, &gv)| *d = *d + gv);
                }
                out.push((*input, dx));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        out
    }

    /// Gradient of a leaf as a tensor, or zeros if none has been materialized.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Checks that a scalar value is finite, naming `what` on failure.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<T> {
        let x = self.value(v).item()?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Numerical(format!("{what} is not finite ({x})")))
        }
    }
}
