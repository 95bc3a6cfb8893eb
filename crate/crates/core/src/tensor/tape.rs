use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::{ParamKey, Parameter, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

enum Op<T: Real> {
    Leaf,
    Param(ParamKey),
    Conv {
        x: Option<usize>,
        w: Option<usize>,
        b: Option<usize>,
        xv: Arc<Tensor<T>>,
        wv: Arc<Tensor<T>>,
        geom: ConvGeometry,
    },
    Upsample { x: usize, ins: Shape },
    AvgPool { x: usize, ins: Shape },
    Blur { x: usize, ins: Shape, kernel: Vec<T> },
    Map { x: usize, kind: MapKind, saved: Option<Arc<Tensor<T>>> },
    Binary {
        a: Option<usize>,
        b: Option<usize>,
        kind: BinKind,
        av: Arc<Tensor<T>>,
        bv: Arc<Tensor<T>>,
        out: Shape,
    },
    GlobalAvgPool { x: usize, ins: Shape },
    Concat { parts: Vec<(Option<usize>, usize)>, out: Shape },
    Narrow { x: usize, start: usize, ins: Shape },
    Sum { x: usize, ins: Shape },
    LowerBound { x: usize, bound: T, xv: Arc<Tensor<T>> },
    NegLog2Sum { x: usize, xv: Arc<Tensor<T>> },
    Custom { inputs: Vec<Option<usize>>, backward: CustomBackward<T> },
}

#[derive(Clone, Copy, Debug)]
enum MapKind {
    LeakyRelu,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Scale(f64),
    AddScalar,
    Pow(f64),
    Square,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct State<T: Real> {
    nodes: Vec<Op<T>>,
    done: bool,
}

/// Ordered record of executed operations.
///
/// A recording tape keeps every op whose inputs require gradients; an
/// inference tape records nothing, so intermediates are freed as soon as
/// their [`Var`] handles drop.
pub struct Tape<T: Real> {
    recording: bool,
    state: RefCell<State<T>>,
}

/// A tensor value, optionally attached to a tape node.
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape,
            id: self.id,
            value: Arc::clone(&self.value),
        }
    }
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={:?}, {:?})", self.id, self.value)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            recording: true,
            state: RefCell::new(State {
                nodes: Vec::new(),
                done: false,
            }),
        }
    }

    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>) -> usize {
        let mut st = self.state.borrow_mut();
        st.nodes.push(op);
        st.nodes.len() - 1
    }

    /// Untracked value.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value: Arc::new(value),
        }
    }

    /// Tracked leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.recording.then(|| self.push(Op::Leaf));
        Var {
            tape: self,
            id,
            value: Arc::new(value),
        }
    }

    pub fn param(&self, p: &Parameter<T>) -> Var<'_, T> {
        let id = self.recording.then(|| self.push(Op::Param(p.key())));
        Var {
            tape: self,
            id,
            value: p.shared(),
        }
    }

    fn emit<'t>(
        &'t self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Option<usize>],
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Var<'t, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = self.recording && inputs.iter().any(Option::is_some);
        let id = tracked.then(|| self.push(op()));
        Ok(Var {
            tape: self,
            id,
            value: Arc::new(value),
        })
    }

    pub fn concat_channels<'t>(&'t self, parts: &[&Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
            .shape();
        let mut channels = 0;
        for p in parts {
            let s = p.shape();
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::shape("concat_channels", format!("{s} vs {first}")));
            }
            channels += s.c;
        }
        let out = first.with_channels(channels);
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..out.n {
            for p in parts {
                let per = p.shape().c * p.shape().plane();
                data.extend_from_slice(&p.value.data()[n * per..(n + 1) * per]);
            }
        }
        let value = Tensor::from_vec(out, data)?;
        let ids: Vec<Option<usize>> = parts.iter().map(|p| p.id).collect();
        let meta: Vec<(Option<usize>, usize)> = parts.iter().map(|p| (p.id, p.shape().c)).collect();
        self.emit("concat_channels", value, &ids, || Op::Concat { parts: meta, out })
    }

    /// Record an op with a caller-supplied adjoint. `backward` maps the
    /// output gradient to one optional gradient per input, in order.
    pub fn custom<'t>(
        &'t self,
        name: &'static str,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'t, T>> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        let ids2 = ids.clone();
        self.emit(name, value, &ids, move || Op::Custom {
            inputs: ids2,
            backward: Box::new(backward),
        })
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.shape() != Shape::scalar() {
            return Err(Error::NonScalarLoss(loss.shape()));
        }
        let mut nodes = {
            let mut st = self.state.borrow_mut();
            if st.done {
                return Err(Error::BackwardTwice);
            }
            st.done = true;
            std::mem::take(&mut st.nodes)
        };
        let mut out = Gradients {
            by_node: HashMap::new(),
            by_param: HashMap::new(),
        };
        let Some(root) = loss.id else {
            return Ok(out);
        };
        nodes.truncate(root + 1);
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::scalar(T::one()));

        while let Some(op) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_op(op, id, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: Option<usize>, g: Tensor<T>) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn map_derivative<T: Real>(kind: MapKind, saved: Option<&Tensor<T>>, g: &Tensor<T>) -> Tensor<T> {
    let d = |f: &dyn Fn(T) -> T| -> Tensor<T> {
        let s = saved.expect("map op saved its operand");
        let data = g.data().iter().zip(s.data()).map(|(gv, sv)| *gv * f(*sv)).collect();
        Tensor::from_vec(g.shape(), data).expect("same shape")
    };
    match kind {
        MapKind::LeakyRelu => d(&|x| if x > T::zero() { T::one() } else { T::of(LEAKY_SLOPE) }),
        MapKind::Relu => d(&|x| if x > T::zero() { T::one() } else { T::zero() }),
        // saved = output
        MapKind::Sigmoid => d(&|y| y * (T::one() - y)),
        MapKind::Tanh => d(&|y| T::one() - y * y),
        MapKind::Softplus => d(&|x| sigmoid(x)),
        MapKind::Scale(f) => g.map(|v| v * T::of(f)),
        MapKind::AddScalar => g.clone(),
        MapKind::Pow(p) => d(&|x| {
            if x > T::zero() {
                T::of(p) * x.powf(T::of(p - 1.0))
            } else {
                T::zero()
            }
        }),
        MapKind::Square => d(&|x| T::of(2.0) * x),
    }
}

fn backprop_op<T: Real>(
    op: Op<T>,
    id: usize,
    g: Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
    out: &mut Gradients<T>,
) -> Result<()> {
    match op {
        Op::Leaf => {
            out.by_node.insert(id, g);
        }
        Op::Param(key) => {
            match out.by_param.get_mut(&key) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    out.by_param.insert(key, g.clone());
                }
            }
            out.by_node.insert(id, g);
        }
        Op::Conv { x, w, b, xv, wv, geom } => {
            let r = kernels::conv2d_backward(
                xv.data(),
                xv.shape(),
                wv.data(),
                &geom,
                g.data(),
                (x.is_some(), w.is_some(), b.is_some()),
            );
            if let Some(dx) = r.dx {
                accumulate(grads, x, Tensor::from_vec(xv.shape(), dx)?);
            }
            if let Some(dw) = r.dw {
                accumulate(grads, w, Tensor::from_vec(wv.shape(), dw)?);
            }
            if let Some(db) = r.db {
                accumulate(grads, b, Tensor::from_vec(Shape::new(1, geom.cout, 1, 1), db)?);
            }
        }
        Op::Upsample { x, ins } => {
            accumulate(grads, Some(x), Tensor::from_vec(ins, kernels::upsample2x_adjoint(g.data(), ins))?);
        }
        Op::AvgPool { x, ins } => {
            accumulate(grads, Some(x), Tensor::from_vec(ins, kernels::avg_pool2x2_adjoint(g.data(), ins))?);
        }
        Op::Blur { x, ins, kernel } => {
            accumulate(
                grads,
                Some(x),
                Tensor::from_vec(ins, kernels::blur_valid_adjoint(g.data(), ins, &kernel))?,
            );
        }
        Op::Map { x, kind, saved } => {
            accumulate(grads, Some(x), map_derivative(kind, saved.as_deref(), &g));
        }
        Op::Binary { a, b, kind, av, bv, out: os } => {
            let (sa, sb) = (av.shape(), bv.shape());
            let mut ga = a.map(|_| vec![T::zero(); os.numel()]);
            let mut gb = b.map(|_| vec![T::zero(); os.numel()]);
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            kernels::for_each_broadcast(sa, sb, os, |o, ia, ib| {
                let gv = gd[o];
                let (da, db) = match kind {
                    BinKind::Add => (gv, gv),
                    BinKind::Sub => (gv, -gv),
                    BinKind::Mul => (gv * bd[ib], gv * ad[ia]),
                    BinKind::Div => (gv / bd[ib], -gv * ad[ia] / (bd[ib] * bd[ib])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[o] = da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[o] = db;
                }
            });
            if let Some(ga) = ga {
                accumulate(grads, a, Tensor::from_vec(sa, kernels::reduce_to(&ga, os, sa))?);
            }
            if let Some(gb) = gb {
                accumulate(grads, b, Tensor::from_vec(sb, kernels::reduce_to(&gb, os, sb))?);
            }
        }
        Op::GlobalAvgPool { x, ins } => {
            let inv = T::of(1.0 / ins.plane() as f64);
            let dx = Tensor::from_fn(ins, |n, c, _, _| g.at(n, c, 0, 0) * inv);
            accumulate(grads, Some(x), dx);
        }
        Op::Concat { parts, out: os } => {
            let mut offset = 0;
            for (pid, c) in parts {
                if pid.is_some() {
                    let s = os.with_channels(c);
                    let part = Tensor::from_fn(s, |n, ch, h, w| g.at(n, offset + ch, h, w));
                    accumulate(grads, pid, part);
                }
                offset += c;
            }
        }
        Op::Narrow { x, start, ins } => {
            let len = g.shape().c;
            let dx = Tensor::from_fn(ins, |n, c, h, w| {
                if c >= start && c < start + len {
                    g.at(n, c - start, h, w)
                } else {
                    T::zero()
                }
            });
            accumulate(grads, Some(x), dx);
        }
        Op::Sum { x, ins } => {
            accumulate(grads, Some(x), Tensor::full(ins, g.data()[0]));
        }
        Op::LowerBound { x, bound, xv } => {
            // Pass the gradient where the bound is inactive, or where it pushes upward.
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(gv, xv)| if *xv >= bound || *gv < T::zero() { *gv } else { T::zero() })
                .collect();
            accumulate(grads, Some(x), Tensor::from_vec(xv.shape(), data)?);
        }
        Op::NegLog2Sum { x, xv } => {
            let gv = g.data()[0];
            let ln2 = T::of(std::f64::consts::LN_2);
            accumulate(grads, Some(x), xv.map(|p| -gv / (p * ln2)));
        }
        Op::Custom { inputs, backward } => {
            let gs = backward(&g);
            debug_assert_eq!(gs.len(), inputs.len());
            for (pid, gi) in inputs.into_iter().zip(gs) {
                if let Some(gi) = gi {
                    accumulate(grads, pid, gi);
                }
            }
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        Var {
            tape: self.tape,
            id: None,
            value: Arc::clone(&self.value),
        }
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }

    pub(crate) fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn conv2d(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let ins = self.shape();
        let ws = weight.shape();
        let geom = ConvGeometry {
            cout: ws.n,
            cin: ws.c,
            kh: ws.h,
            kw: ws.w,
            stride,
            pad,
        };
        if ws.c != ins.c {
            return Err(Error::shape(
                "conv2d",
                format!("input {ins} vs weight {ws} (channel mismatch)"),
            ));
        }
        if geom.output_shape(ins).is_none() {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} stride {stride} pad {pad} on input {ins}", ws.h, ws.w),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::shape("conv2d", format!("bias {} for {} outputs", b.shape(), ws.n)));
            }
        }
        let (data, outs) = kernels::conv2d_forward(
            self.value.data(),
            ins,
            weight.value.data(),
            bias.map(|b| b.value.data()),
            &geom,
        );
        let value = Tensor::from_vec(outs, data)?;
        let (x, w, b) = (self.id, weight.id, bias.and_then(|b| b.id));
        let (xv, wv) = (self.shared(), weight.shared());
        self.tape.emit("conv2d", value, &[x, w, b], || Op::Conv { x, w, b, xv, wv, geom })
    }

    pub fn upsample2x(&self) -> Result<Var<'t, T>> {
        let ins = self.shape();
        let (data, outs) = kernels::upsample2x(self.value.data(), ins);
        let x = self.id;
        self.tape
            .emit("upsample2x", Tensor::from_vec(outs, data)?, &[x], || Op::Upsample { x: x.unwrap(), ins })
    }

    pub fn avg_pool2x2(&self) -> Result<Var<'t, T>> {
        let ins = self.shape();
        if ins.h < 2 || ins.w < 2 {
            return Err(Error::shape("avg_pool2x2", format!("input {ins}")));
        }
        let (data, outs) = kernels::avg_pool2x2(self.value.data(), ins);
        let x = self.id;
        self.tape
            .emit("avg_pool2x2", Tensor::from_vec(outs, data)?, &[x], || Op::AvgPool { x: x.unwrap(), ins })
    }

    /// Depthwise separable filtering with `kernel` along both axes, valid borders.
    pub fn blur_valid(&self, kernel: &[f64]) -> Result<Var<'t, T>> {
        let ins = self.shape();
        if ins.h < kernel.len() || ins.w < kernel.len() || kernel.is_empty() {
            return Err(Error::shape("blur_valid", format!("{}-tap kernel on {ins}", kernel.len())));
        }
        let k: Vec<T> = kernel.iter().map(|v| T::of(*v)).collect();
        let (data, outs) = kernels::blur_valid(self.value.data(), ins, &k);
        let x = self.id;
        self.tape.emit("blur_valid", Tensor::from_vec(outs, data)?, &[x], || Op::Blur {
            x: x.unwrap(),
            ins,
            kernel: k,
        })
    }

    fn map(&self, name: &'static str, kind: MapKind, f: impl Fn(T) -> T, save: Save) -> Result<Var<'t, T>> {
        let value = self.value.map(f);
        let x = self.id;
        let saved = match save {
            Save::Nothing => None,
            Save::Input => Some(self.shared()),
            Save::Output => Some(Arc::new(value.clone())),
        };
        self.tape.emit(name, value, &[x], || Op::Map {
            x: x.unwrap(),
            kind,
            saved,
        })
    }

    pub fn leaky_relu(&self) -> Result<Var<'t, T>> {
        let slope = T::of(LEAKY_SLOPE);
        self.map("leaky_relu", MapKind::LeakyRelu, |v| if v > T::zero() { v } else { v * slope }, Save::Input)
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.map("relu", MapKind::Relu, |v| v.max(T::zero()), Save::Input)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.map("sigmoid", MapKind::Sigmoid, sigmoid, Save::Output)
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.map("tanh", MapKind::Tanh, |v| v.tanh(), Save::Output)
    }

    pub fn softplus(&self) -> Result<Var<'t, T>> {
        self.map("softplus", MapKind::Softplus, softplus, Save::Input)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t, T>> {
        let f = T::of(factor);
        self.map("scale", MapKind::Scale(factor), |v| v * f, Save::Nothing)
    }

    pub fn add_scalar(&self, offset: f64) -> Result<Var<'t, T>> {
        let o = T::of(offset);
        self.map("add_scalar", MapKind::AddScalar, |v| v + o, Save::Nothing)
    }

    /// `x^p` for `x > 0`, zero otherwise (used on clamped, non-negative inputs).
    pub fn powf(&self, p: f64) -> Result<Var<'t, T>> {
        let pt = T::of(p);
        self.map(
            "powf",
            MapKind::Pow(p),
            |v| if v > T::zero() { v.powf(pt) } else { T::zero() },
            Save::Input,
        )
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        self.map("square", MapKind::Square, |v| v * v, Save::Input)
    }

    fn binary(&self, other: &Var<'t, T>, name: &'static str, kind: BinKind, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let os = kernels::broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa} with {sb}")))?;
        let mut data = vec![T::zero(); os.numel()];
        let (ad, bd) = (self.value.data(), other.value.data());
        kernels::for_each_broadcast(sa, sb, os, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
        let value = Tensor::from_vec(os, data)?;
        let (a, b) = (self.id, other.id);
        let (av, bv) = (self.shared(), other.shared());
        self.tape.emit(name, value, &[a, b], || Op::Binary {
            a,
            b,
            kind,
            av,
            bv,
            out: os,
        })
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", BinKind::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", BinKind::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", BinKind::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "div", BinKind::Div, |a, b| a / b)
    }

    /// Per-channel spatial mean, shape `(N, C, 1, 1)`.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let ins = self.shape();
        if ins.plane() == 0 {
            return Err(Error::shape("global_avg_pool", format!("input {ins}")));
        }
        let inv = T::of(1.0 / ins.plane() as f64);
        let mut data = Vec::with_capacity(ins.n * ins.c);
        for n in 0..ins.n {
            for c in 0..ins.c {
                data.push(self.value.plane(n, c).iter().copied().sum::<T>() * inv);
            }
        }
        let x = self.id;
        self.tape.emit(
            "global_avg_pool",
            Tensor::from_vec(Shape::new(ins.n, ins.c, 1, 1), data)?,
            &[x],
            || Op::GlobalAvgPool { x: x.unwrap(), ins },
        )
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let ins = self.shape();
        if start + len > ins.c || len == 0 {
            return Err(Error::shape("narrow_channels", format!("[{start}, {}) of {ins}", start + len)));
        }
        let value = Tensor::from_fn(ins.with_channels(len), |n, c, h, w| self.value.at(n, start + c, h, w));
        let x = self.id;
        self.tape
            .emit("narrow_channels", value, &[x], || Op::Narrow { x: x.unwrap(), start, ins })
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let ins = self.shape();
        let total = self.value.data().iter().fold(0.0f64, |acc, v| acc + v.f64());
        let x = self.id;
        self.tape
            .emit("sum", Tensor::scalar(T::of(total)), &[x], || Op::Sum { x: x.unwrap(), ins })
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.shape().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// `max(x, bound)`; the gradient still flows where it would raise `x`.
    pub fn lower_bound(&self, bound: f64) -> Result<Var<'t, T>> {
        let b = T::of(bound);
        let value = self.value.map(|v| v.max(b));
        let x = self.id;
        let xv = self.shared();
        self.tape.emit("lower_bound", value, &[x], || Op::LowerBound {
            x: x.unwrap(),
            bound: b,
            xv,
        })
    }

    /// `-sum(log2 p)`: information content in bits of a probability tensor.
    pub fn neg_log2_sum(&self) -> Result<Var<'t, T>> {
        let mut bits = 0.0f64;
        for p in self.value.data() {
            let p = p.f64();
            if !(p > 0.0 && p <= 1.0 + 1e-6) {
                return Err(Error::ZeroProbability(p));
            }
            bits -= p.log2();
        }
        let x = self.id;
        let xv = self.shared();
        self.tape
            .emit("neg_log2_sum", Tensor::scalar(T::of(bits)), &[x], || Op::NegLog2Sum { x: x.unwrap(), xv })
    }
}

enum Save {
    Nothing,
    Input,
    Output,
}

/// Result of a reverse sweep.
pub struct Gradients<T: Real> {
    by_node: HashMap<usize, Tensor<T>>,
    by_param: HashMap<ParamKey, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked leaf created with [`Tape::input`] or [`Tape::param`].
    pub fn wrt(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.by_node.get(&id))
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.by_param.get(&key)
    }

    /// Move the gradient into `p.grad`; parameters the loss never reached get zeros.
    pub fn assign(&mut self, p: &mut Parameter<T>) {
        let g = self
            .by_param
            .remove(&p.key())
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        p.grad = Some(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let tape = Tape::<f64>::new();
        let s = Shape::new(1, 1, 2, 2);
        let w = Parameter::new("w", t(s, &[0.1, 0.2, 0.3, 0.4]));
        let x = t(s, &[1.0, -2.0, 3.0, 5.0]);
        let loss = tape.param(&w).mul(&tape.constant(x.clone())).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.param(w.key()).unwrap(), &x);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let used = Parameter::new("used", Tensor::scalar(2.0));
        let mut unused = Parameter::new("unused", Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
        let _ = tape.param(&unused);
        let loss = tape.param(&used).square().unwrap().sum().unwrap();
        let mut g = tape.backward(&loss).unwrap();
        g.assign(&mut unused);
        assert_eq!(unused.grad.unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(3.0));
        let loss = x.square().unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(matches!(tape.backward(&x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.input(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let y = x.sigmoid().unwrap().sum().unwrap();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(0.0));
        let one = tape.constant(Tensor::scalar(1.0));
        let err = one.div(&x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "div" }));
    }

    #[test]
    fn activations_match_reference_values() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(t(Shape::new(1, 1, 1, 2), &[-1.0, 0.0]));
        assert_eq!(x.leaky_relu().unwrap().value().data(), &[-0.01, 0.0]);
        assert_eq!(x.sigmoid().unwrap().value().data()[1], 0.5);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let tape = Tape::<f64>::new();
        let x = tape.input(Tensor::scalar(0.0));
        let loss = x.sigmoid().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let tape = Tape::<f64>::new();
        let x = tape.input(t(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 5.0, 7.0]));
        let p = x.global_avg_pool().unwrap();
        assert_eq!(p.value().data(), &[4.0]);
        let g = tape.backward(&p.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let tape = Tape::<f64>::new();
        let w = Parameter::new("w", Tensor::scalar(3.0));
        let a = tape.param(&w);
        let b = tape.param(&w);
        let loss = a.mul(&b).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.param(w.key()).unwrap().data(), &[6.0]);
    }
}
