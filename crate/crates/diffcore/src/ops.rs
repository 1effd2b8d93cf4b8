//! Differentiable primitives on [`Var`].

use std::sync::Arc;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::sparse::SparseLinear;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this variable is recorded on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf_arc(self.value(), false)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        Ok(self.tape.push(a.zip_map(&b, f), op(self.id, other.id)))
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    /// Elementwise maximum; ties select `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "maximum",
            Op::Maximum,
            |a, b| if a >= b { a } else { b },
        )
    }

    /// Elementwise minimum; ties select `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "minimum",
            Op::Minimum,
            |a, b| if a <= b { a } else { b },
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::Shift(self.id), |v| v + c)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(mismatch("add_const", &a, c));
        }
        Ok(self
            .tape
            .push(a.zip_map(c, |x, y| x + y), Op::Shift(self.id)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, c: Tensor) -> Result<Var<'t>> {
        self.mul_const_arc(Arc::new(c))
    }

    pub fn mul_const_arc(self, c: Arc<Tensor>) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(mismatch("mul_const", &a, &c));
        }
        let v = a.zip_map(&c, |x, y| x * y);
        Ok(self.tape.push(v, Op::MulConst(self.id, c)))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), |v| {
            v.max(0.0) + (-v.abs()).exp().ln_1p()
        })
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Broadcasts a single-element value to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.len() != 1 {
            return Err(invalid(
                "expand",
                format!("source has shape {:?}", a.shape()),
            ));
        }
        Ok(self
            .tape
            .push(Tensor::full(shape, a.item()), Op::Expand(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let v = (*a).clone().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(invalid(
                "sum_axis",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &a.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(self
            .tape
            .push(Tensor::new(out_shape, out)?, Op::SumAxis(self.id, axis)))
    }

    /// Inserts a new axis of length `n` at position `axis`, repeating values.
    pub fn broadcast_axis(self, axis: usize, n: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis > shape.len() {
            return Err(invalid(
                "broadcast_axis",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &a.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.insert(axis, n);
        Ok(self.tape.push(
            Tensor::new(out_shape, out)?,
            Op::BroadcastAxis(self.id, axis),
        ))
    }

    /// Picks flat elements by index into a 1-d result. Indices may repeat.
    pub fn gather(self, indices: Vec<usize>) -> Result<Var<'t>> {
        self.gather_arc(Arc::new(indices))
    }

    pub fn gather_arc(self, indices: Arc<Vec<usize>>) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.len()) {
            return Err(invalid("gather", format!("index {bad} out of {}", a.len())));
        }
        let v: Vec<f64> = indices.iter().map(|&i| a.data()[i]).collect();
        Ok(self
            .tape
            .push(Tensor::from_vec(v), Op::Gather(self.id, indices)))
    }

    /// Adds each element into `out[indices[i]]` of a zero tensor of `shape`.
    pub fn scatter_add(self, indices: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        self.scatter_add_arc(Arc::new(indices), shape)
    }

    pub fn scatter_add_arc(self, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.len() != indices.len() {
            return Err(invalid(
                "scatter_add",
                format!("{} values for {} indices", a.len(), indices.len()),
            ));
        }
        let mut out = Tensor::zeros(shape);
        let n = out.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(invalid("scatter_add", format!("index {bad} out of {n}")));
        }
        for (&i, &v) in indices.iter().zip(a.data()) {
            out.data_mut()[i] += v;
        }
        Ok(self.tape.push(out, Op::ScatterAdd(self.id, indices)))
    }

    /// Maximum element as a 0-d value; ties resolve to the lowest flat index.
    pub fn max(self) -> Result<Var<'t>> {
        let (i, _) = self
            .value()
            .argmax()
            .ok_or_else(|| invalid("max", "empty tensor"))?;
        self.gather(vec![i])?.reshape(&[])
    }

    /// Minimum element as a 0-d value; ties resolve to the lowest flat index.
    pub fn min(self) -> Result<Var<'t>> {
        let (i, _) = self
            .value()
            .argmin()
            .ok_or_else(|| invalid("min", "empty tensor"))?;
        self.gather(vec![i])?.reshape(&[])
    }

    /// Applies a fixed sparse map (or its transpose) to each trailing block
    /// of the flattened value; the result is 1-d.
    pub fn linear(self, map: SparseLinear, transposed: bool) -> Result<Var<'t>> {
        self.linear_arc(Arc::new(map), transposed)
    }

    pub fn linear_arc(self, map: Arc<SparseLinear>, transposed: bool) -> Result<Var<'t>> {
        let out = map.apply(self.value().data(), transposed)?;
        Ok(self
            .tape
            .push(Tensor::from_vec(out), Op::Linear(self.id, map, transposed)))
    }

    /// Bilinear resize of the two trailing axes.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(invalid("resize_bilinear", format!("shape {shape:?}")));
        }
        let (ih, iw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        if (ih, iw) == (oh, ow) {
            return Ok(self);
        }
        let map = crate::sparse::bilinear_resize_map(ih, iw, oh, ow);
        self.linear(map, false)?.reshape(&out_shape)
    }

    /// Concatenates the flattened values into one 1-d value.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        Ok(first.tape.push(
            Tensor::from_vec(data),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// `self: [N, Cin, H, W]` convolved with `weight: [Cout, Cin, K, K]`.
    pub fn conv2d(self, weight: Var<'t>, geom: ConvGeom) -> Result<Var<'t>> {
        let v = conv::conv2d(&self.value(), &weight.value(), geom)?;
        Ok(self.tape.push(v, Op::Conv2d(self.id, weight.id, geom)))
    }

    /// Input-gradient of a convolution, with `self` the output gradient.
    pub fn conv2d_input_grad(
        self,
        weight: Var<'t>,
        geom: ConvGeom,
        input_hw: (usize, usize),
    ) -> Result<Var<'t>> {
        let v = conv::conv2d_input_grad(&self.value(), &weight.value(), geom, input_hw)?;
        Ok(self
            .tape
            .push(v, Op::ConvInputGrad(self.id, weight.id, geom)))
    }

    /// Kernel-gradient of a convolution, with `self` the convolution input.
    pub fn conv2d_weight_grad(
        self,
        out_grad: Var<'t>,
        geom: ConvGeom,
        kernel: usize,
    ) -> Result<Var<'t>> {
        let v = conv::conv2d_weight_grad(&self.value(), &out_grad.value(), geom, kernel)?;
        Ok(self
            .tape
            .push(v, Op::ConvWeightGrad(self.id, out_grad.id, geom)))
    }

    /// Adds a per-channel bias `[C]` to an `[N, C, H, W]` value.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        let bshape = bias.shape();
        if shape.len() != 4 || bshape != [shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: shape,
                rhs: bshape,
            });
        }
        let planes = bias
            .broadcast_axis(1, shape[2] * shape[3])?
            .broadcast_axis(0, shape[0])?
            .reshape(&shape)?;
        self.add(planes)
    }
}
