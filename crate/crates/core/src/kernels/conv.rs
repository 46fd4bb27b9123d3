//! 3D convolution over `(B, T, H, W, C)` video tensors via im2col + GEMM.
//!
//! Weights are stored as `(out_ch, in_ch, k_t, k_h, k_w)`. Temporal padding is
//! causal: `k_t - 1` frames are prepended, either copies of frame 0 or zeros, so
//! the last temporal tap is aligned with the output frame's own input frame.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How missing frames before frame 0 are synthesized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalPad {
    /// Prepend `k_t - 1` copies of frame 0.
    ReflectFirstFrame,
    /// Prepend `k_t - 1` zero frames.
    Zero,
    /// No temporal padding.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    /// `(s_t, s_h, s_w)`
    pub stride: [usize; 3],
    /// Symmetric zero padding `(p_h, p_w)`.
    pub pad_hw: [usize; 2],
    pub temporal: TemporalPad,
}

impl ConvGeometry {
    pub fn new(stride: [usize; 3], pad_hw: [usize; 2], temporal: TemporalPad) -> Self {
        ConvGeometry {
            stride,
            pad_hw,
            temporal,
        }
    }

    /// Stride 1, "same" spatial padding for an odd square kernel, reflect-first-frame in time.
    pub fn same(k: usize) -> Self {
        ConvGeometry::new([1, 1, 1], [k / 2, k / 2], TemporalPad::ReflectFirstFrame)
    }

    fn temporal_pad(&self, kt: usize) -> usize {
        match self.temporal {
            TemporalPad::None => 0,
            _ => kt - 1,
        }
    }
}

/// A convolution layer's weights plus its geometry.
#[derive(Clone, Debug)]
pub struct ConvKernel3D<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
}

impl<T: Real> ConvKernel3D<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, geometry: ConvGeometry) -> Result<Self> {
        KernelDims::of(&weight, &bias)?;
        Ok(ConvKernel3D {
            weight,
            bias,
            geometry,
        })
    }

    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d_forward(input, &self.weight, &self.bias, &self.geometry)
    }

    /// True when the kernel has no temporal extent or stride, i.e. it acts per frame.
    pub fn is_per_frame(&self) -> bool {
        self.weight.shape()[2] == 1 && self.geometry.stride[0] == 1
    }
}

#[derive(Clone, Copy, Debug)]
struct KernelDims {
    cout: usize,
    cin: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

impl KernelDims {
    fn of<T: Real>(weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Self> {
        let &[cout, cin, kt, kh, kw] = weight.shape() else {
            return Err(Error::contract(
                "conv3d",
                format!("weight must be rank-5 (out,in,kt,kh,kw), got {:?}", weight.shape()),
            ));
        };
        if bias.shape() != [cout] {
            return Err(Error::contract(
                "conv3d",
                format!("bias shape {:?} does not match {} output channels", bias.shape(), cout),
            ));
        }
        if kt == 0 || kh == 0 || kw == 0 {
            return Err(Error::contract("conv3d", "kernel extents must be positive"));
        }
        Ok(KernelDims {
            cout,
            cin,
            kt,
            kh,
            kw,
        })
    }

    fn k(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug)]
struct Plan {
    b: usize,
    t: usize,
    h: usize,
    w: usize,
    to: usize,
    ho: usize,
    wo: usize,
    pad_t: usize,
    k: KernelDims,
    g: ConvGeometry,
}

impl Plan {
    fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        g: &ConvGeometry,
    ) -> Result<Self> {
        let k = KernelDims::of(weight, bias)?;
        let [b, t, h, w, c] = input.dims5()?;
        if c != k.cin {
            return Err(Error::contract(
                "conv3d",
                format!("input has {} channels, kernel expects {}", c, k.cin),
            ));
        }
        if g.stride.contains(&0) {
            return Err(Error::contract("conv3d", "strides must be positive"));
        }
        let pad_t = g.temporal_pad(k.kt);
        let out_extent = |n: usize, pad: usize, kk: usize, s: usize, axis: &str| {
            if n + pad < kk {
                Err(Error::contract(
                    "conv3d",
                    format!("{} extent {} (+{} padding) smaller than kernel {}", axis, n, pad, kk),
                ))
            } else {
                Ok((n + pad - kk) / s + 1)
            }
        };
        let to = out_extent(t, pad_t, k.kt, g.stride[0], "time")?;
        let ho = out_extent(h, 2 * g.pad_hw[0], k.kh, g.stride[1], "height")?;
        let wo = out_extent(w, 2 * g.pad_hw[1], k.kw, g.stride[2], "width")?;
        Ok(Plan {
            b,
            t,
            h,
            w,
            to,
            ho,
            wo,
            pad_t,
            k,
            g: *g,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k.kt == 1
            && self.k.kh == 1
            && self.k.kw == 1
            && self.g.stride == [1, 1, 1]
            && self.g.pad_hw == [0, 0]
    }

    fn m(&self) -> usize {
        self.to * self.ho * self.wo
    }

    fn in_frame(&self) -> usize {
        self.h * self.w * self.k.cin
    }

    /// Source frame of temporal tap `kt` for output frame `ot`, `None` for a zero frame.
    fn source_frame(&self, ot: usize, kt: usize) -> Option<usize> {
        let padded = ot * self.g.stride[0] + kt;
        if padded >= self.pad_t {
            Some(padded - self.pad_t)
        } else {
            match self.g.temporal {
                TemporalPad::ReflectFirstFrame => Some(0),
                _ => None,
            }
        }
    }

    fn source_row(&self, o: usize, kk: usize, pad: usize, s: usize, n: usize) -> Option<usize> {
        let p = o * s + kk;
        if p < pad || p - pad >= n {
            None
        } else {
            Some(p - pad)
        }
    }

    /// Fills `col` (`M × K`, row-major) for batch item `bi`.
    fn im2col<T: Real>(&self, x: &[T], bi: usize, col: &mut [T]) {
        let cin = self.k.cin;
        let kdim = self.k.k();
        let xb = &x[bi * self.t * self.in_frame()..(bi + 1) * self.t * self.in_frame()];
        let mut row = 0;
        for ot in 0..self.to {
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let dst = &mut col[row * kdim..(row + 1) * kdim];
                    let mut off = 0;
                    for kt in 0..self.k.kt {
                        let frame = self.source_frame(ot, kt);
                        for kh in 0..self.k.kh {
                            let y = self.source_row(oh, kh, self.g.pad_hw[0], self.g.stride[1], self.h);
                            for kw in 0..self.k.kw {
                                let xx = self.source_row(ow, kw, self.g.pad_hw[1], self.g.stride[2], self.w);
                                let seg = &mut dst[off..off + cin];
                                match (frame, y, xx) {
                                    (Some(f), Some(y), Some(xx)) => {
                                        let src = ((f * self.h + y) * self.w + xx) * cin;
                                        seg.copy_from_slice(&xb[src..src + cin]);
                                    }
                                    _ => seg.fill(T::zero()),
                                }
                                off += cin;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds `col` gradients back into the input gradient for batch item `bi`.
    fn col2im<T: Real>(&self, col: &[T], bi: usize, dx: &mut [T]) {
        let cin = self.k.cin;
        let kdim = self.k.k();
        let frame_len = self.in_frame();
        let dxb = &mut dx[bi * self.t * frame_len..(bi + 1) * self.t * frame_len];
        let mut row = 0;
        for ot in 0..self.to {
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let src = &col[row * kdim..(row + 1) * kdim];
                    let mut off = 0;
                    for kt in 0..self.k.kt {
                        let frame = self.source_frame(ot, kt);
                        for kh in 0..self.k.kh {
                            let y = self.source_row(oh, kh, self.g.pad_hw[0], self.g.stride[1], self.h);
                            for kw in 0..self.k.kw {
                                let xx = self.source_row(ow, kw, self.g.pad_hw[1], self.g.stride[2], self.w);
                                if let (Some(f), Some(y), Some(xx)) = (frame, y, xx) {
                                    let dst = ((f * self.h + y) * self.w + xx) * cin;
                                    for (d, s) in dxb[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                                        *d += *s;
                                    }
                                }
                                off += cin;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Reorders `(out, in, kt, kh, kw)` weights into a `K × N` matrix with
/// `K = (kt, kh, kw, in)` and `N = out`.
fn weight_matrix<T: Real>(weight: &Tensor<T>, k: &KernelDims) -> Vec<T> {
    let kdim = k.k();
    let taps = k.kt * k.kh * k.kw;
    let w = weight.data();
    let mut wt = vec![T::zero(); kdim * k.cout];
    for co in 0..k.cout {
        for ci in 0..k.cin {
            for tap in 0..taps {
                wt[(tap * k.cin + ci) * k.cout + co] = w[(co * k.cin + ci) * taps + tap];
            }
        }
    }
    wt
}

fn output_shape(p: &Plan) -> [usize; 5] {
    [p.b, p.to, p.ho, p.wo, p.k.cout]
}

pub fn conv3d_output_shape<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<[usize; 5]> {
    Ok(output_shape(&Plan::new(input, weight, bias, g)?))
}

pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let p = Plan::new(input, weight, bias, g)?;
    let wt = weight_matrix(weight, &p.k);
    let (m, kdim, n) = (p.m(), p.k.k(), p.k.cout);
    let mut out = vec![T::zero(); p.b * m * n];
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias.data());
    }
    let mut col = if p.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); m * kdim]
    };
    for bi in 0..p.b {
        let a: &[T] = if p.is_pointwise() {
            &input.data()[bi * m * kdim..(bi + 1) * m * kdim]
        } else {
            p.im2col(input.data(), bi, &mut col);
            &col
        };
        let c = &mut out[bi * m * n..(bi + 1) * m * n];
        T::gemm(
            m,
            kdim,
            n,
            T::one(),
            a,
            kdim as isize,
            1,
            &wt,
            n as isize,
            1,
            T::one(),
            c,
            n as isize,
            1,
        );
    }
    Tensor::from_vec(&output_shape(&p), out)
}

/// Gradients of a convolution. Each requested gradient is returned in the
/// layout of the corresponding forward argument.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeometry,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let p = Plan::new(input, weight, bias, g)?;
    if grad_out.shape() != output_shape(&p) {
        return Err(Error::contract(
            "conv3d_backward",
            format!("gradient shape {:?} != output {:?}", grad_out.shape(), output_shape(&p)),
        ));
    }
    let (m, kdim, n) = (p.m(), p.k.k(), p.k.cout);
    let wt = weight_matrix(weight, &p.k);
    let dy = grad_out.data();

    let mut dwt = if need_params { vec![T::zero(); kdim * n] } else { Vec::new() };
    let mut db = if need_params { vec![T::zero(); n] } else { Vec::new() };
    let mut dx = if need_input { vec![T::zero(); input.numel()] } else { Vec::new() };
    let mut col = vec![T::zero(); if p.is_pointwise() { 0 } else { m * kdim }];
    let mut dcol = vec![T::zero(); if need_input && !p.is_pointwise() { m * kdim } else { 0 }];

    for bi in 0..p.b {
        let dyb = &dy[bi * m * n..(bi + 1) * m * n];
        if need_params {
            let a: &[T] = if p.is_pointwise() {
                &input.data()[bi * m * kdim..(bi + 1) * m * kdim]
            } else {
                p.im2col(input.data(), bi, &mut col);
                &col
            };
            // dW^T (K×N) += col^T (K×M) · dY (M×N)
            T::gemm(
                kdim,
                m,
                n,
                T::one(),
                a,
                1,
                kdim as isize,
                dyb,
                n as isize,
                1,
                T::one(),
                &mut dwt,
                n as isize,
                1,
            );
            for row in dyb.chunks_exact(n) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += *v;
                }
            }
        }
        if need_input {
            // dcol (M×K) = dY (M×N) · W (N×K)
            if p.is_pointwise() {
                let dst = &mut dx[bi * m * kdim..(bi + 1) * m * kdim];
                T::gemm(
                    m,
                    n,
                    kdim,
                    T::one(),
                    dyb,
                    n as isize,
                    1,
                    &wt,
                    1,
                    n as isize,
                    T::zero(),
                    dst,
                    kdim as isize,
                    1,
                );
            } else {
                T::gemm(
                    m,
                    n,
                    kdim,
                    T::one(),
                    dyb,
                    n as isize,
                    1,
                    &wt,
                    1,
                    n as isize,
                    T::zero(),
                    &mut dcol,
                    kdim as isize,
                    1,
                );
                p.col2im(&dcol, bi, &mut dx);
            }
        }
    }

    let weight_grad = if need_params {
        let taps = p.k.kt * p.k.kh * p.k.kw;
        let mut dw = vec![T::zero(); weight.numel()];
        for co in 0..n {
            for ci in 0..p.k.cin {
                for tap in 0..taps {
                    dw[(co * p.k.cin + ci) * taps + tap] = dwt[(tap * p.k.cin + ci) * n + co];
                }
            }
        }
        Some(Tensor::from_vec(weight.shape(), dw)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::from_vec(input.shape(), dx)?) } else { None },
        weight: weight_grad,
        bias: if need_params { Some(Tensor::from_vec(bias.shape(), db)?) } else { None },
    })
}
