use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    MeanAbs,
    MeanSq,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AreaDown2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Sigmoid(Var),
    Elu(Var),
    Concat(Vec<Var>),
    AvgPool3(Var),
    Reduce(Var, Reduction),
    StopGrad,
    SampleRows {
        src: Var,
        disp: Var,
        sign: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::AreaDown2(_) => "area_downsample",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Elu(_) => "elu",
            Op::Concat(_) => "concat_channels",
            Op::AvgPool3(_) => "avg_pool3x3",
            Op::Reduce(..) => "reduce",
            Op::StopGrad => "stop_gradient",
            Op::SampleRows { .. } => "sample_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// Constant offset applied by `Affine` (kept out of `Op` so the enum stays `T`-free).
    offset: T,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the reverse insertion order is a valid reverse topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    leaf_grads: HashMap<Var, Vec<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            offset: T::zero(),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Leaf holding `value`. Only leaves created with `requires_grad` collect
    /// gradients (readable through [`Graph::grad`]).
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Binds a parameter as a leaf. Repeated binds of the same id return the
    /// same node, so parameters shared between sub-networks accumulate into
    /// one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != ws.w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ws,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {ws} does not fit input {xs} with padding {padding}"),
            ));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: ws,
                    right: bs,
                });
            }
        }
        let geom = ConvGeom {
            input: xs,
            c_out: ws.n,
            k: ws.h,
            stride,
            pad: padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(geom.output(), out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be ≥ 1"));
        }
        let s = self.shape(x);
        let out = kernels::upsample_nearest_forward(s, self.value(x).data(), factor);
        let value = Tensor::from_vec(Shape::new(s.n, s.c, s.h * factor, s.w * factor), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    /// 2×2 box average with stride 2.
    pub fn area_downsample(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::invalid(
                "area_downsample",
                format!("spatial dims of {s} must be even and positive"),
            ));
        }
        let out = kernels::area_down2_forward(s, self.value(x).data());
        let value = Tensor::from_vec(Shape::new(s.n, s.c, s.h / 2, s.w / 2), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AreaDown2(x), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: name,
                left: sa,
                right: sb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(sa, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale·x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let (s, o) = (T::of(scale), T::of(offset));
        let value = Tensor::from_vec(
            self.shape(x),
            self.value(x).data().iter().map(|&v| s * v + o).collect(),
        )
        .expect("same element count");
        let rg = self.rg(x);
        let v = self.push(value, Op::Affine { x, scale }, rg);
        self.nodes[v.0].offset = o;
        v
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let value = Tensor::from_vec(
            self.shape(x),
            self.value(x).data().iter().map(|&v| f(v)).collect(),
        )
        .expect("same element count");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v >= T::zero() { v } else { v.exp() - T::one() },
            Op::Elu(x),
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: s0,
                    right: s,
                });
            }
            c += s.c;
        }
        let out_shape = s0.with_channels(c);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &x in xs {
                let s = self.shape(x);
                let per = s.c * s.plane();
                data.extend_from_slice(&self.value(x).data()[n * per..(n + 1) * per]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            Tensor::from_vec(out_shape, data)?,
            Op::Concat(xs.to_vec()),
            rg,
        ))
    }

    pub fn avg_pool3x3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h < 3 || s.w < 3 {
            return Err(Error::invalid(
                "avg_pool3x3",
                format!("input {s} is smaller than the 3x3 window"),
            ));
        }
        let out = kernels::avg_pool3_forward(s, self.value(x).data());
        let value = Tensor::from_vec(Shape::new(s.n, s.c, s.h - 2, s.w - 2), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool3(x), rg))
    }

    pub fn reduce(&mut self, x: Var, kind: Reduction) -> Result<Var> {
        let data = self.value(x).data();
        if data.is_empty() {
            return Err(Error::invalid("reduce", "empty tensor"));
        }
        let count = T::of(data.len() as f64);
        let sum: T = match kind {
            Reduction::Mean => data.iter().copied().sum(),
            Reduction::MeanAbs => data.iter().map(|v| v.abs()).sum(),
            Reduction::MeanSq => data.iter().map(|&v| v * v).sum(),
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(sum / count), Op::Reduce(x, kind), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Mean)
    }

    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::MeanAbs)
    }

    pub fn mean_sq(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::MeanSq)
    }

    /// Identity forward; nothing flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Samples each row of `src` at column `x + sign·disp(x)` with linear
    /// interpolation and edge clamping. `disp` is single-channel.
    pub fn sample_rows(&mut self, src: Var, disp: Var, sign: f64) -> Result<Var> {
        let (ss, ds) = (self.shape(src), self.shape(disp));
        if ds.c != 1 || (ss.n, ss.h, ss.w) != (ds.n, ds.h, ds.w) {
            return Err(Error::ShapeMismatch {
                op: "warp",
                left: ds,
                right: ss,
            });
        }
        let out = kernels::sample_rows_forward(
            ss,
            self.value(src).data(),
            self.value(disp).data(),
            T::of(sign),
        );
        let rg = self.rg(src) || self.rg(disp);
        Ok(self.push(
            Tensor::from_vec(ss, out)?,
            Op::SampleRows { src, disp, sign },
            rg,
        ))
    }

    /// Accumulated gradient of a `requires_grad` input leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v).map(|g| g.as_slice())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Back-propagates from a scalar `loss`, accumulating into input-leaf
    /// gradients and into the trainable parameters of `params`.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        self.backward_impl(loss, Some(params))
    }

    /// As [`Graph::backward`] for graphs that bind no parameters.
    pub fn backward_inputs(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, None)
    }

    fn backward_impl(&mut self, loss: Var, mut params: Option<&mut ParamStore<T>>) -> Result<()> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: ls,
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !self.rg(loss) {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);

        let nodes = &self.nodes;
        fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.shape().numel();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Input => {
                    let slot = self
                        .leaf_grads
                        .entry(Var(i))
                        .or_insert_with(|| vec![T::zero(); g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += *v;
                    }
                }
                Op::Param(id) => {
                    if let Some(store) = params.as_deref_mut() {
                        store.get_mut(*id).accumulate_grad(&g);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let xv = nodes[x.0].value.data();
                    let wv = nodes[w.0].value.data();
                    let mut dx = slot(nodes, &mut grads, *x).map(std::mem::take);
                    let mut dw = slot(nodes, &mut grads, *w).map(std::mem::take);
                    let mut db = b.and_then(|b| slot(nodes, &mut grads, b).map(std::mem::take));
                    kernels::conv2d_backward(
                        geom,
                        xv,
                        wv,
                        &g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(d) = dx {
                        grads[x.0] = Some(d);
                    }
                    if let Some(d) = dw {
                        grads[w.0] = Some(d);
                    }
                    if let (Some(d), Some(b)) = (db, b) {
                        grads[b.0] = Some(d);
                    }
                }
                Op::Upsample { x, factor } => {
                    let s = nodes[x.0].value.shape();
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        kernels::upsample_nearest_backward(s, &g, *factor, dx);
                    }
                }
                Op::AreaDown2(x) => {
                    let s = nodes[x.0].value.shape();
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        kernels::area_down2_backward(s, &g, dx);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(d) = slot(nodes, &mut grads, v) {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(d) = slot(nodes, &mut grads, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += *g);
                    }
                    if let Some(d) = slot(nodes, &mut grads, *b) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= *g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(d) = slot(nodes, &mut grads, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += *g * *y;
                        }
                    }
                    if let Some(d) = slot(nodes, &mut grads, *b) {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(av) {
                            *d += *g * *x;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(d) = slot(nodes, &mut grads, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += *g / *y;
                        }
                    }
                    if let Some(d) = slot(nodes, &mut grads, *b) {
                        for (((d, g), x), y) in d.iter_mut().zip(&g).zip(av).zip(bv) {
                            *d -= *g * *x / (*y * *y);
                        }
                    }
                }
                Op::Affine { x, scale } => {
                    let s = T::of(*scale);
                    if let Some(d) = slot(nodes, &mut grads, *x) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += *g * s);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    if let Some(d) = slot(nodes, &mut grads, *x) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += *g * *y * (T::one() - *y);
                        }
                    }
                }
                Op::Elu(x) => {
                    let (xv, y) = (nodes[x.0].value.data(), node.value.data());
                    if let Some(d) = slot(nodes, &mut grads, *x) {
                        for (((d, g), xv), y) in d.iter_mut().zip(&g).zip(xv).zip(y) {
                            let slope = if *xv >= T::zero() { T::one() } else { *y + T::one() };
                            *d += *g * slope;
                        }
                    }
                }
                Op::Concat(xs) => {
                    let s = node.value.shape();
                    let per_out = s.c * s.plane();
                    let mut c_off = 0;
                    for &x in xs {
                        let xs_ = nodes[x.0].value.shape();
                        let per = xs_.c * xs_.plane();
                        if let Some(d) = slot(nodes, &mut grads, x) {
                            for n in 0..s.n {
                                let src = &g[n * per_out + c_off * s.plane()..][..per];
                                for (d, g) in d[n * per..(n + 1) * per].iter_mut().zip(src) {
                                    *d += *g;
                                }
                            }
                        }
                        c_off += xs_.c;
                    }
                }
                Op::AvgPool3(x) => {
                    let s = nodes[x.0].value.shape();
                    if let Some(dx) = slot(nodes, &mut grads, *x) {
                        kernels::avg_pool3_backward(s, &g, dx);
                    }
                }
                Op::Reduce(x, kind) => {
                    let xv = nodes[x.0].value.data();
                    let scale = g[0] / T::of(xv.len() as f64);
                    if let Some(d) = slot(nodes, &mut grads, *x) {
                        match kind {
                            Reduction::Mean => d.iter_mut().for_each(|d| *d += scale),
                            Reduction::MeanAbs => {
                                for (d, v) in d.iter_mut().zip(xv) {
                                    if *v > T::zero() {
                                        *d += scale;
                                    } else if *v < T::zero() {
                                        *d -= scale;
                                    }
                                }
                            }
                            Reduction::MeanSq => {
                                let two = T::of(2.0);
                                for (d, v) in d.iter_mut().zip(xv) {
                                    *d += scale * two * *v;
                                }
                            }
                        }
                    }
                }
                Op::StopGrad => {}
                Op::SampleRows { src, disp, sign } => {
                    let s = nodes[src.0].value.shape();
                    let mut dsrc = slot(nodes, &mut grads, *src).map(std::mem::take);
                    let mut ddisp = slot(nodes, &mut grads, *disp).map(std::mem::take);
                    kernels::sample_rows_backward(
                        s,
                        nodes[src.0].value.data(),
                        nodes[disp.0].value.data(),
                        T::of(*sign),
                        &g,
                        dsrc.as_deref_mut(),
                        ddisp.as_deref_mut(),
                    );
                    if let Some(d) = dsrc {
                        grads[src.0] = Some(d);
                    }
                    if let Some(d) = ddisp {
                        grads[disp.0] = Some(d);
                    }
                }
            }
        }
        Ok(())
    }
}
