//! Dense row-major tensors. Video data uses the rank-5 layout
//! `(batch, time, height, width, channel)` with channels innermost.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar element type: `f32` for training and inference, `f64` for gradient checks.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a · b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices sized for the given extents and strides;
        // `check_gemm_extents` asserts that in debug builds.
        debug_assert!(check_gemm_extents(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc));
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn of_f64(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(check_gemm_extents(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc));
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn of_f64(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_extents(
    m: usize,
    k: usize,
    n: usize,
    alen: usize,
    rsa: isize,
    csa: isize,
    blen: usize,
    rsb: isize,
    csb: isize,
    clen: usize,
    rsc: isize,
    csc: isize,
) -> bool {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs
        }
    };
    (k == 0 || (last(m, k, rsa, csa) as usize) < alen && (last(k, n, rsb, csb) as usize) < blen)
        && (last(m, n, rsc, csc) as usize) < clen
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of_f64(z * std)
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::of_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::contract(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of_f64(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of_f64(self.data.len().max(1) as f64)
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::contract(
                "max_abs_diff",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::contract(
                "mse",
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum::<f64>()
            / n)
    }

    /// Extents of a rank-5 video tensor as `[B, T, H, W, C]`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape[..] {
            [b, t, h, w, c] => Ok([b, t, h, w, c]),
            _ => Err(Error::contract(
                "dims5",
                format!("expected rank-5 (B,T,H,W,C), got {:?}", self.shape),
            )),
        }
    }

    /// Frames `[start, start + len)` of a rank-5 tensor.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<Self> {
        let [b, t, h, w, c] = self.dims5()?;
        if start + len > t {
            return Err(Error::contract(
                "slice_time",
                format!("frames {}..{} out of range for {} frames", start, start + len, t),
            ));
        }
        let frame = h * w * c;
        let mut data = Vec::with_capacity(b * len * frame);
        for bi in 0..b {
            let base = (bi * t + start) * frame;
            data.extend_from_slice(&self.data[base..base + len * frame]);
        }
        Ok(Tensor {
            shape: vec![b, len, h, w, c],
            data,
        })
    }

    /// Picks the given frame indices (in order) of a rank-5 tensor.
    pub fn gather_time(&self, indices: &[usize]) -> Result<Self> {
        let [b, t, h, w, c] = self.dims5()?;
        let frame = h * w * c;
        let mut data = Vec::with_capacity(b * indices.len() * frame);
        for bi in 0..b {
            for &i in indices {
                if i >= t {
                    return Err(Error::contract(
                        "gather_time",
                        format!("frame {} out of range for {} frames", i, t),
                    ));
                }
                let base = (bi * t + i) * frame;
                data.extend_from_slice(&self.data[base..base + frame]);
            }
        }
        Ok(Tensor {
            shape: vec![b, indices.len(), h, w, c],
            data,
        })
    }

    /// Concatenates rank-5 tensors along the time axis.
    pub fn concat_time(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_time", "no tensors to concatenate"))?;
        let [b, _, h, w, c] = first.dims5()?;
        let mut total = 0;
        for p in parts {
            let [pb, pt, ph, pw, pc] = p.dims5()?;
            if (pb, ph, pw, pc) != (b, h, w, c) {
                return Err(Error::contract(
                    "concat_time",
                    format!("incompatible shapes {:?} and {:?}", first.shape, p.shape),
                ));
            }
            total += pt;
        }
        let frame = h * w * c;
        let mut data = Vec::with_capacity(b * total * frame);
        for bi in 0..b {
            for p in parts {
                let pt = p.shape[1];
                let base = bi * pt * frame;
                data.extend_from_slice(&p.data[base..base + pt * frame]);
            }
        }
        Ok(Tensor {
            shape: vec![b, total, h, w, c],
            data,
        })
    }

    /// Copies a spatial window `[h0, h0+hh) × [w0, w0+ww)` of a rank-5 tensor.
    pub fn crop_hw(&self, h0: usize, hh: usize, w0: usize, ww: usize) -> Result<Self> {
        let [b, t, h, w, c] = self.dims5()?;
        if h0 + hh > h || w0 + ww > w {
            return Err(Error::contract(
                "crop_hw",
                format!("window {}+{} x {}+{} exceeds {}x{}", h0, hh, w0, ww, h, w),
            ));
        }
        let mut data = Vec::with_capacity(b * t * hh * ww * c);
        for bt in 0..b * t {
            for y in h0..h0 + hh {
                let row = ((bt * h + y) * w + w0) * c;
                data.extend_from_slice(&self.data[row..row + ww * c]);
            }
        }
        Ok(Tensor {
            shape: vec![b, t, hh, ww, c],
            data,
        })
    }
}

impl<T: Real> std::ops::Index<[usize; 5]> for Tensor<T> {
    type Output = T;

    fn index(&self, idx: [usize; 5]) -> &T {
        let s = &self.shape;
        let flat = (((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]) * s[4] + idx[4];
        &self.data[flat]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn time_slicing_and_concat_are_inverse() {
        let data: Vec<f64> = (0..2 * 5 * 2 * 2 * 3).map(|x| x as f64).collect();
        let t = Tensor::from_vec(&[2, 5, 2, 2, 3], data).unwrap();
        let a = t.slice_time(0, 2).unwrap();
        let b = t.slice_time(2, 3).unwrap();
        assert_eq!(Tensor::concat_time(&[&a, &b]).unwrap(), t);
        let g = t.gather_time(&[4, 0]).unwrap();
        assert_eq!(g[[1, 0, 1, 1, 2]], t[[1, 4, 1, 1, 2]]);
        assert_eq!(g[[0, 1, 0, 0, 0]], t[[0, 0, 0, 0, 0]]);
    }

    #[test]
    fn crop_hw_window() {
        let data: Vec<f32> = (0..4 * 4).map(|x| x as f32).collect();
        let t = Tensor::from_vec(&[1, 1, 4, 4, 1], data).unwrap();
        let c = t.crop_hw(1, 2, 2, 2).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
    }
}
