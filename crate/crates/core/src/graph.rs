//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation is evaluated eagerly and appended to the tape; `backward`
//! walks the tape in reverse. Nodes whose inputs do not require gradients
//! are never differentiated, which is how frozen networks pass gradients to
//! their inputs without accumulating parameter gradients.

use crate::error::{Error, Result};
use crate::kernels::conv::{conv3d_backward, conv3d_forward, ConvGeometry};
use crate::kernels::norm::{group_norm_backward, group_norm_forward, GroupStats};
use crate::tensor::{Real, Tensor};

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    GroupNorm { x: Var, gain: Var, shift: Var, groups: usize, stats: GroupStats },
    Silu(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Affine(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SliceChannels { x: Var, start: usize, len: usize },
    SliceTime { x: Var, start: usize, len: usize },
    ConcatTime(Vec<Var>),
    ChannelToTime { x: Var, factor: usize },
    Upsample2x(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu(_) => "silu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Clamp(..) => "clamp",
            Op::Affine(..) => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::SliceChannels { .. } => "slice_channels",
            Op::SliceTime { .. } => "slice_time",
            Op::ConcatTime(_) => "concat_time",
            Op::ChannelToTime { .. } => "channel_to_time",
            Op::Upsample2x(_) => "upsample2x",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, .. } => vec![*x, *w, *b],
            Op::GroupNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Silu(x)
            | Op::LeakyRelu(x, _)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Exp(x)
            | Op::Square(x)
            | Op::Clamp(x, ..)
            | Op::Affine(x, ..)
            | Op::Upsample2x(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::SliceChannels { x, .. } | Op::SliceTime { x, .. } | Op::ChannelToTime { x, .. } => {
                vec![*x]
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatTime(xs) => xs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf value. `requires_grad` leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor<T>, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(|v| T::of_f64(f(v.as_f64())));
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        self.push(value, op)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let value = conv3d_forward(self.value(x), self.value(w), self.value(b), &geom)?;
        self.push(value, Op::Conv3d { x, w, b, geom })
    }

    pub fn group_norm(&mut self, x: Var, gain: Var, shift: Var, groups: usize, eps: f64) -> Result<Var> {
        let (value, stats) =
            group_norm_forward(self.value(x), groups, self.value(gain), self.value(shift), eps)?;
        self.push(
            value,
            Op::GroupNorm {
                x,
                gain,
                shift,
                groups,
                stats,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu(x), silu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// `scale * x + offset`
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let (s, o) = (T::of_f64(scale), T::of_f64(offset));
        let value = self.value(x).map(|v| s * v + o);
        self.push(value, Op::Affine(x, scale))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Channels `[start, start + len)` of the innermost axis.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::contract("slice_channels", "scalar input"))?;
        if start + len > c {
            return Err(Error::contract(
                "slice_channels",
                format!("channels {}..{} out of {}", start, start + len, c),
            ));
        }
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push(value, Op::SliceChannels { x, start, len })
    }

    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_time(start, len)?;
        self.push(value, Op::SliceTime { x, start, len })
    }

    pub fn concat_time(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_time(&parts)?;
        self.push(value, Op::ConcatTime(xs.to_vec()))
    }

    /// Unfolds `factor` channel groups into time: `(B,T,H,W,factor·C)` becomes
    /// `(B, 1 + (T-1)·factor, H, W, C)`. Frame 0 keeps only its last channel
    /// group; every later frame `j` expands to frames `1+(j-1)·factor ..= j·factor`.
    pub fn channel_to_time(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [b, t, h, w, fc] = self.value(x).dims5()?;
        if factor == 0 || fc % factor != 0 {
            return Err(Error::contract(
                "channel_to_time",
                format!("{} channels not divisible by factor {}", fc, factor),
            ));
        }
        if t == 0 {
            return Err(Error::contract("channel_to_time", "no frames"));
        }
        let c = fc / factor;
        let to = 1 + (t - 1) * factor;
        let hw = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * to * hw * c);
        for bi in 0..b {
            for ot in 0..to {
                let (ft, g) = channel_to_time_source(ot, factor);
                let base = (bi * t + ft) * hw * fc;
                for p in 0..hw {
                    let off = base + p * fc + g * c;
                    data.extend_from_slice(&src[off..off + c]);
                }
            }
        }
        let value = Tensor::from_vec(&[b, to, h, w, c], data)?;
        self.push(value, Op::ChannelToTime { x, factor })
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, t, h, w, c] = self.value(x).dims5()?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * t * 4 * h * w * c);
        for bt in 0..b * t {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let off = ((bt * h + y / 2) * w + xx / 2) * c;
                    data.extend_from_slice(&src[off..off + c]);
                }
            }
        }
        let value = Tensor::from_vec(&[b, t, 2 * h, 2 * w, c], data)?;
        self.push(value, Op::Upsample2x(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::of_f64(s)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::of_f64(s / n)), Op::Mean(x))
    }

    /// `mean(|a - b|)`
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// `mean((a - b)²)`
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d)?;
        self.mean(d)
    }

    /// Reverse pass from a scalar `loss`. Gradients exist for every node on a
    /// path from a `requires_grad` leaf to `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            for (input, g) in self.local_grads(node, &gy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: format!("{} (backward)", node.op.name()),
                    });
                }
                accumulate(&mut grads[input.0], g);
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, gy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        let elementwise = |x: Var, f: &dyn Fn(f64, f64) -> f64| -> Result<Vec<(Var, Tensor<T>)>> {
            let xv = self.value(x);
            let data = xv
                .data()
                .iter()
                .zip(y.data())
                .zip(gy.data())
                .map(|((&xi, &yi), &gi)| T::of_f64(gi.as_f64() * f(xi.as_f64(), yi.as_f64())))
                .collect();
            Ok(vec![(x, Tensor::from_vec(xv.shape(), data)?)])
        };
        match &node.op {
            Op::Leaf => Ok(vec![]),
            Op::Conv3d { x, w, b, geom } => {
                let need_params = self.needs(*w) || self.needs(*b);
                let g = conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    geom,
                    gy,
                    self.needs(*x),
                    need_params,
                )?;
                let mut out = vec![];
                if let Some(gx) = g.input {
                    out.push((*x, gx));
                }
                if let Some(gw) = g.weight {
                    out.push((*w, gw));
                }
                if let Some(gb) = g.bias {
                    out.push((*b, gb));
                }
                Ok(out)
            }
            Op::GroupNorm {
                x,
                gain,
                shift,
                groups,
                stats,
            } => {
                let g = group_norm_backward(self.value(*x), *groups, self.value(*gain), stats, gy)?;
                Ok(vec![(*x, g.input), (*gain, g.gain), (*shift, g.shift)])
            }
            Op::Silu(x) => elementwise(*x, &|v, _| {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 + v * (1.0 - s))
            }),
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                elementwise(*x, &move |v, _| if v > 0.0 { 1.0 } else { slope })
            }
            Op::Relu(x) => elementwise(*x, &|v, _| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::Abs(x) => elementwise(*x, &|v, _| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Exp(x) => elementwise(*x, &|_, y| y),
            Op::Square(x) => elementwise(*x, &|v, _| 2.0 * v),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                elementwise(*x, &move |v, _| if v >= lo && v <= hi { 1.0 } else { 0.0 })
            }
            Op::Affine(x, scale) => {
                let s = T::of_f64(*scale);
                Ok(vec![(*x, gy.map(|g| g * s))])
            }
            Op::Add(a, b) => Ok(vec![(*a, gy.clone()), (*b, gy.clone())]),
            Op::Sub(a, b) => Ok(vec![(*a, gy.clone()), (*b, gy.map(|g| -g))]),
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = gy.data().iter().zip(bv.data()).map(|(&g, &v)| g * v).collect();
                let gb = gy.data().iter().zip(av.data()).map(|(&g, &v)| g * v).collect();
                Ok(vec![
                    (*a, Tensor::from_vec(av.shape(), ga)?),
                    (*b, Tensor::from_vec(bv.shape(), gb)?),
                ])
            }
            Op::SliceChannels { x, start, len } => {
                let shape = self.shape(*x);
                let c = *shape.last().unwrap();
                let mut g = vec![T::zero(); self.value(*x).numel()];
                for (dst, src) in g.chunks_exact_mut(c).zip(gy.data().chunks_exact(*len)) {
                    dst[*start..*start + *len].copy_from_slice(src);
                }
                Ok(vec![(*x, Tensor::from_vec(shape, g)?)])
            }
            Op::SliceTime { x, start, len } => {
                let [b, t, h, w, c] = self.value(*x).dims5()?;
                let frame = h * w * c;
                let mut g = vec![T::zero(); b * t * frame];
                for bi in 0..b {
                    let dst = (bi * t + start) * frame;
                    let src = bi * len * frame;
                    g[dst..dst + len * frame].copy_from_slice(&gy.data()[src..src + len * frame]);
                }
                Ok(vec![(*x, Tensor::from_vec(self.shape(*x), g)?)])
            }
            Op::ConcatTime(xs) => {
                let mut start = 0;
                let mut out = vec![];
                for &x in xs {
                    let len = self.shape(x)[1];
                    out.push((x, gy.slice_time(start, len)?));
                    start += len;
                }
                Ok(out)
            }
            Op::ChannelToTime { x, factor } => {
                let [b, t, h, w, fc] = self.value(*x).dims5()?;
                let c = fc / factor;
                let to = 1 + (t - 1) * factor;
                let hw = h * w;
                let mut g = vec![T::zero(); b * t * hw * fc];
                let src = gy.data();
                for bi in 0..b {
                    for ot in 0..to {
                        let (ft, grp) = channel_to_time_source(ot, *factor);
                        let base = (bi * t + ft) * hw * fc;
                        let sbase = (bi * to + ot) * hw * c;
                        for p in 0..hw {
                            let off = base + p * fc + grp * c;
                            g[off..off + c].copy_from_slice(&src[sbase + p * c..sbase + (p + 1) * c]);
                        }
                    }
                }
                Ok(vec![(*x, Tensor::from_vec(self.shape(*x), g)?)])
            }
            Op::Upsample2x(x) => {
                let [b, t, h, w, c] = self.value(*x).dims5()?;
                let mut g = vec![T::zero(); b * t * h * w * c];
                let src = gy.data();
                for bt in 0..b * t {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let s = ((bt * 2 * h + yy) * 2 * w + xx) * c;
                            let d = ((bt * h + yy / 2) * w + xx / 2) * c;
                            for k in 0..c {
                                g[d + k] += src[s + k];
                            }
                        }
                    }
                }
                Ok(vec![(*x, Tensor::from_vec(self.shape(*x), g)?)])
            }
            Op::Sum(x) => Ok(vec![(*x, Tensor::full(self.shape(*x), gy.item()))]),
            Op::Mean(x) => {
                let n = T::of_f64(self.value(*x).numel().max(1) as f64);
                Ok(vec![(*x, Tensor::full(self.shape(*x), gy.item() / n))])
            }
        }
    }
}

/// Source `(frame, channel group)` of output frame `ot` under channel→time unfolding.
fn channel_to_time_source(ot: usize, factor: usize) -> (usize, usize) {
    if ot == 0 {
        (0, factor - 1)
    } else {
        (1 + (ot - 1) / factor, (ot - 1) % factor)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_gradient_is_all_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_vec(&[2, 2], vec![-3.0, 0.5, 7.0, 1e3]).unwrap(), true);
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let c = g.input(Tensor::full(&[2], 4.0));
        let p = g.mul(x, c).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn channel_to_time_keeps_first_frame_unexpanded() {
        let mut g = Graph::<f32>::new();
        // 3 frames, 1×1 spatial, 2 groups of 1 channel: values encode (frame, group).
        let data = vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0];
        let x = g.input(Tensor::from_vec(&[1, 3, 1, 1, 2], data).unwrap());
        let y = g.channel_to_time(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[1.0, 10.0, 11.0, 20.0, 21.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1], 1000.0));
        match g.exp(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("expected non-finite error, got {:?}", other.map(|_| ())),
        }
    }
}
