//! Zero-padded strided convolution, parametric activations, and the isometry
//! regularizer, each with its reverse-mode gradient.

mod net;

pub use net::{
    batch_gradients, dynamic_partition, mimoconv_backward, mimoconv_forward, Block, ConvNetConfig, ConvNetGrads, ConvNetParams,
    ForwardTrace, InferenceMode,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor3;

/// Weights `W[o][i][ky][kx]` of a `C_o×C_i×k×k` convolution with odd `k`,
/// zero padding `⌊k/2⌋` and a positive stride.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
}

impl ConvKernel {
    pub fn new(c_out: usize, c_in: usize, k: usize, stride: usize, weights: Vec<f64>) -> Result<Self> {
        if c_out == 0 || c_in == 0 {
            return Err(Error::InvalidDimension("kernel needs at least one channel".into()));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidDimension(format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidParameter("stride must be positive".into()));
        }
        check_len(c_out * c_in * k * k, weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("kernel weights must be finite".into()));
        }
        Ok(Self {
            c_out,
            c_in,
            k,
            stride,
            weights,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize) -> Result<Self> {
        Self::new(c_out, c_in, k, stride, vec![0.0; c_out * c_in * k * k])
    }

    /// Identity across channels at the spatial center (`C_i = C_o`).
    pub fn dirac(c: usize, k: usize) -> Result<Self> {
        let mut w = Self::zeros(c, c, k, 1)?;
        let m = k / 2;
        for o in 0..c {
            let i = w.idx(o, o, m, m);
            w.weights[i] = 1.0;
        }
        Ok(w)
    }

    /// He-style Gaussian init with variance `2 / (C_i k²)`.
    pub fn random(s: &mut Stream, c_out: usize, c_in: usize, k: usize, stride: usize) -> Result<Self> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self::new(c_out, c_in, k, stride, rng::gaussian_vec(s, c_out * c_in * k * k, std))
    }

    #[inline]
    pub fn idx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.c_in + i) * self.k + ky) * self.k + kx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.idx(o, i, ky, kx)]
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.k) / self.stride + 1, (w + 2 * p - self.k) / self.stride + 1)
    }

    /// Swaps the two channel axes.
    pub fn transposed(&self) -> ConvKernel {
        let mut t = ConvKernel {
            c_out: self.c_in,
            c_in: self.c_out,
            k: self.k,
            stride: self.stride,
            weights: vec![0.0; self.weights.len()],
        };
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let dst = t.idx(i, o, ky, kx);
                        t.weights[dst] = self.get(o, i, ky, kx);
                    }
                }
            }
        }
        t
    }
}

/// Maps kernel tap `t` at output position `o` to an input coordinate.
#[inline]
fn tap(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + t).checked_sub(pad)?;
    (i < len).then_some(i)
}

/// Patch matrix with one row per `(i, ky, kx)` and one column per output pixel.
fn im2col(x: &Tensor3, w: &ConvKernel, ho: usize, wo: usize) -> DMatrix<f64> {
    let (s, p, k) = (w.stride, w.pad(), w.k);
    let mut cols = DMatrix::zeros(w.c_in * k * k, ho * wo);
    for i in 0..w.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (i * k + ky) * k + kx;
                for oy in 0..ho {
                    let Some(iy) = tap(oy, ky, s, p, x.height) else { continue };
                    for ox in 0..wo {
                        if let Some(ix) = tap(ox, kx, s, p, x.width) {
                            cols[(row, oy * wo + ox)] = x.get(i, iy, ix);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the input grid.
fn col2im(cols: &DMatrix<f64>, w: &ConvKernel, shape: [usize; 3], ho: usize, wo: usize) -> Tensor3 {
    let (s, p, k) = (w.stride, w.pad(), w.k);
    let mut x = Tensor3::zeros(shape[0], shape[1], shape[2]);
    for i in 0..w.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (i * k + ky) * k + kx;
                for oy in 0..ho {
                    let Some(iy) = tap(oy, ky, s, p, x.height) else { continue };
                    for ox in 0..wo {
                        if let Some(ix) = tap(ox, kx, s, p, x.width) {
                            let at = x.idx(i, iy, ix);
                            x.data[at] += cols[(row, oy * wo + ox)];
                        }
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix(w: &ConvKernel) -> DMatrix<f64> {
    DMatrix::from_row_slice(w.c_out, w.c_in * w.k * w.k, &w.weights)
}

/// Cross-correlation `y[o,p] = Σ_{i,ky,kx} W[o,i,ky,kx] · x[i, p·s + (ky,kx) − ⌊k/2⌋]`.
pub fn conv2d(x: &Tensor3, w: &ConvKernel) -> Result<Tensor3> {
    check_len(w.c_in, x.channels)?;
    let (ho, wo) = w.output_size(x.height, x.width);
    let y = weight_matrix(w) * im2col(x, w, ho, wo);
    // `y` is column-major c_out × pixels; transpose into channel planes.
    Tensor3::from_vec(w.c_out, ho, wo, y.transpose().as_slice().to_vec())
}

/// Gradients of `⟨g, conv2d(x, w)⟩` with respect to `x` and to `w`.
pub fn conv2d_backward(x: &Tensor3, w: &ConvKernel, g: &Tensor3) -> Result<(Tensor3, ConvKernel)> {
    check_len(w.c_in, x.channels)?;
    let (ho, wo) = w.output_size(x.height, x.width);
    if g.shape() != [w.c_out, ho, wo] {
        return Err(Error::InvalidDimension(format!(
            "output gradient {:?} does not match {:?}",
            g.shape(),
            [w.c_out, ho, wo]
        )));
    }
    let cols = im2col(x, w, ho, wo);
    let gm = DMatrix::from_row_slice(w.c_out, ho * wo, &g.data);
    let gw = &gm * cols.transpose();
    let gcols = weight_matrix(w).transpose() * &gm;
    let gx = col2im(&gcols, w, x.shape(), ho, wo);
    let gw = ConvKernel {
        weights: gw.transpose().as_slice().to_vec(),
        ..w.clone()
    };
    Ok((gx, gw))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    /// `max(x, 0) + b·min(x, 0)`, `b ∈ [−1, 1]`.
    PRelu,
    /// `max(x, b)`.
    SRelu,
}

/// An activation with one parameter per feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationParam {
    pub kind: ActivationKind,
    pub b: Vec<f64>,
}

impl ActivationParam {
    /// Default initial parameters: 0.5 for pReLU, −1 for sReLU.
    pub fn init(kind: ActivationKind, channels: usize) -> Self {
        let b0 = match kind {
            ActivationKind::Relu => 0.0,
            ActivationKind::PRelu => 0.5,
            ActivationKind::SRelu => -1.0,
        };
        Self {
            kind,
            b: vec![b0; channels],
        }
    }

    pub fn constant(kind: ActivationKind, channels: usize, b: f64) -> Self {
        Self {
            kind,
            b: vec![b; channels],
        }
    }

    /// Projects pReLU parameters onto `[−1, 1]`; other kinds are untouched.
    pub fn clamp(&mut self) {
        if self.kind == ActivationKind::PRelu {
            self.b.iter_mut().for_each(|b| *b = b.clamp(-1.0, 1.0));
        }
    }
}

pub fn activation(x: &Tensor3, p: &ActivationParam) -> Result<Tensor3> {
    check_len(x.channels, p.b.len())?;
    let hw = x.spatial();
    let mut y = x.clone();
    for (c, b) in p.b.iter().enumerate() {
        let plane = &mut y.data[c * hw..(c + 1) * hw];
        match p.kind {
            ActivationKind::Relu => plane.iter_mut().for_each(|v| *v = v.max(0.0)),
            ActivationKind::PRelu => plane.iter_mut().for_each(|v| *v = v.max(0.0) + b * v.min(0.0)),
            ActivationKind::SRelu => plane.iter_mut().for_each(|v| *v = v.max(*b)),
        }
    }
    Ok(y)
}

/// Gradients of `⟨g, activation(x, p)⟩` with respect to `x` and `b`.
pub fn activation_backward(x: &Tensor3, p: &ActivationParam, g: &Tensor3) -> Result<(Tensor3, Vec<f64>)> {
    check_len(x.channels, p.b.len())?;
    if x.shape() != g.shape() {
        return Err(Error::InvalidDimension("gradient shape differs from input".into()));
    }
    let hw = x.spatial();
    let mut gx = Tensor3::zeros(x.channels, x.height, x.width);
    let mut gb = vec![0.0; p.b.len()];
    for (c, b) in p.b.iter().enumerate() {
        let r = c * hw..(c + 1) * hw;
        for ((o, xv), gv) in gx.data[r.clone()].iter_mut().zip(&x.data[r.clone()]).zip(&g.data[r]) {
            match p.kind {
                ActivationKind::Relu => *o = if *xv > 0.0 { *gv } else { 0.0 },
                ActivationKind::PRelu => {
                    if *xv > 0.0 {
                        *o = *gv;
                    } else {
                        *o = b * gv;
                        gb[c] += gv * xv;
                    }
                }
                ActivationKind::SRelu => {
                    if *xv > *b {
                        *o = *gv;
                    } else {
                        gb[c] += gv;
                    }
                }
            }
        }
    }
    Ok((gx, gb))
}

/// `V` with every tap moved by `(dy, dx)`: column `(r, q)` holds `V[·, r, q + (dy, dx)]`,
/// zero where that tap falls outside the kernel.
fn shifted(v: &ConvKernel, dy: isize, dx: isize) -> DMatrix<f64> {
    let k = v.k as isize;
    DMatrix::from_fn(v.c_out, v.c_in * v.k * v.k, |a, col| {
        let (r, q) = (col / (v.k * v.k), col % (v.k * v.k));
        let (y, x) = ((q / v.k) as isize + dy, (q % v.k) as isize + dx);
        if (0..k).contains(&y) && (0..k).contains(&x) {
            v.get(a, r, y as usize, x as usize)
        } else {
            0.0
        }
    })
}

/// Self-correlation `O[a,b,c,d] = Σ_{r,s,t} W[a,r,s+c−m,t+d−m] · W[b,r,s,t]`,
/// `m = ⌊k/2⌋`, with out-of-range taps read as zero. Result is `C_o×C_o×k×k`.
pub fn conv_self_correlation(w: &ConvKernel) -> ConvKernel {
    let (co, k, m) = (w.c_out, w.k, w.pad() as isize);
    let mut out = ConvKernel {
        c_out: co,
        c_in: co,
        k,
        stride: 1,
        weights: vec![0.0; co * co * k * k],
    };
    let wt = weight_matrix(w).transpose();
    for c in 0..k {
        for d in 0..k {
            let o = shifted(w, c as isize - m, d as isize - m) * &wt;
            for a in 0..co {
                for b in 0..co {
                    let i = out.idx(a, b, c, d);
                    out.weights[i] = o[(a, b)];
                }
            }
        }
    }
    out
}

/// The kernel the isometry penalty acts on: `W` when `C_i > C_o`, else `Wᵀ`.
fn isometry_operand(w: &ConvKernel) -> (ConvKernel, bool) {
    if w.c_in > w.c_out {
        (w.clone(), false)
    } else {
        (w.transposed(), true)
    }
}

/// Residual `Conv(V,V) − δ` for the chosen operand `V`.
fn isometry_residual(v: &ConvKernel) -> ConvKernel {
    let mut r = conv_self_correlation(v);
    let m = v.pad();
    for a in 0..v.c_out {
        let i = r.idx(a, a, m, m);
        r.weights[i] -= 1.0;
    }
    r
}

/// `(γ/2)·‖Conv(V,V) − δ‖_F²`.
pub fn isometry_loss(w: &ConvKernel, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter("γ must be ≥ 0".into()));
    }
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let (v, _) = isometry_operand(w);
    let r = isometry_residual(&v);
    Ok(0.5 * gamma * r.weights.iter().map(|e| e * e).sum::<f64>())
}

/// Gradient of [`isometry_loss`] with respect to `W`.
pub fn isometry_loss_grad(w: &ConvKernel, gamma: f64) -> Result<ConvKernel> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter("γ must be ≥ 0".into()));
    }
    let (v, transposed) = isometry_operand(w);
    let mut gv = ConvKernel {
        weights: vec![0.0; v.weights.len()],
        ..v.clone()
    };
    if gamma > 0.0 {
        let e = isometry_residual(&v);
        let (co, m) = (v.c_out, v.pad() as isize);
        // ∂O[a,b,δ]/∂V[x,r,q] = [a=x]·V[b,r,q−δ] + [b=x]·V[a,r,q+δ]
        let mut g = DMatrix::<f64>::zeros(co, v.c_in * v.k * v.k);
        for c in 0..v.k {
            for d in 0..v.k {
                let (dy, dx) = (c as isize - m, d as isize - m);
                let ed = DMatrix::from_fn(co, co, |a, b| e.get(a, b, c, d));
                g += &ed * shifted(&v, -dy, -dx);
                g += ed.transpose() * shifted(&v, dy, dx);
            }
        }
        gv.weights = (g.transpose() * gamma).as_slice().to_vec();
    }
    Ok(if transposed { gv.transposed() } else { gv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_tensor(seed: u64, c: usize, h: usize, w: usize) -> Tensor3 {
        let mut s = rng::stream(seed, 0);
        Tensor3::from_vec(c, h, w, rng::gaussian_vec(&mut s, c * h * w, 1.0)).unwrap()
    }

    fn random_kernel(seed: u64, co: usize, ci: usize, k: usize, stride: usize) -> ConvKernel {
        let mut s = rng::stream(seed, 1);
        ConvKernel::random(&mut s, co, ci, k, stride).unwrap()
    }

    /// Six nested loops over an explicitly zero-padded copy of the input.
    fn conv_oracle(x: &Tensor3, w: &ConvKernel) -> Tensor3 {
        let p = w.k / 2;
        let (hp, wp) = (x.height + 2 * p, x.width + 2 * p);
        let mut padded = vec![0.0; x.channels * hp * wp];
        for c in 0..x.channels {
            for y in 0..x.height {
                for xx in 0..x.width {
                    padded[(c * hp + y + p) * wp + xx + p] = x.get(c, y, xx);
                }
            }
        }
        let ho = (hp - w.k) / w.stride + 1;
        let wo = (wp - w.k) / w.stride + 1;
        let mut y = Tensor3::zeros(w.c_out, ho, wo);
        for o in 0..w.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..w.c_in {
                        for ky in 0..w.k {
                            for kx in 0..w.k {
                                acc += w.get(o, i, ky, kx)
                                    * padded[(i * hp + oy * w.stride + ky) * wp + ox * w.stride + kx];
                            }
                        }
                    }
                    let idx = y.idx(o, oy, ox);
                    y.data[idx] = acc;
                }
            }
        }
        y
    }

    /// Self-correlation as a full 2D cross-correlation of zero-padded kernels, cropped to k×k.
    fn self_correlation_oracle(w: &ConvKernel) -> Vec<f64> {
        let k = w.k as isize;
        let m = k / 2;
        let at = |a: usize, r: usize, y: isize, x: isize| {
            if (0..k).contains(&y) && (0..k).contains(&x) {
                w.get(a, r, y as usize, x as usize)
            } else {
                0.0
            }
        };
        let mut out = Vec::new();
        for a in 0..w.c_out {
            for b in 0..w.c_out {
                for c in 0..k {
                    for d in 0..k {
                        let mut acc = 0.0;
                        for r in 0..w.c_in {
                            for y in -k..2 * k {
                                for x in -k..2 * k {
                                    acc += at(a, r, y + c - m, x + d - m) * at(b, r, y, x);
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
    }

    #[test]
    fn conv_identity_examples() {
        let x = random_tensor(1, 1, 5, 5);
        let one = ConvKernel::new(1, 1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &one).unwrap(), x);

        let x = random_tensor(2, 3, 4, 6);
        assert_eq!(conv2d(&x, &ConvKernel::dirac(3, 3).unwrap()).unwrap(), x);
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let x = random_tensor(3, 2, 4, 4);
        let w = random_kernel(4, 3, 2, 3, 1);
        let got = conv2d(&x, &w).unwrap();
        assert!(max_abs_diff(&got.data, &conv_oracle(&x, &w).data) < 1e-12);

        for (stride, k, h) in [(2, 3, 7), (2, 5, 8), (3, 3, 9)] {
            let x = random_tensor(5 + h as u64, 2, h, h + 1);
            let w = random_kernel(6 + k as u64, 2, 2, k, stride);
            let got = conv2d(&x, &w).unwrap();
            let want = conv_oracle(&x, &w);
            assert_eq!(got.shape(), want.shape());
            assert!(max_abs_diff(&got.data, &want.data) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_kernels() {
        let x = random_tensor(1, 2, 4, 4);
        assert!(conv2d(&x, &random_kernel(1, 2, 3, 3, 1)).is_err());
        assert!(ConvKernel::zeros(1, 1, 2, 1).is_err());
        assert!(ConvKernel::zeros(1, 1, 3, 0).is_err());
        assert!(ConvKernel::new(1, 1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let h = 1e-6;
        for stride in [1, 2] {
            let x = random_tensor(10 + stride as u64, 2, 5, 5);
            let w = random_kernel(11, 3, 2, 3, stride);
            let g = random_tensor(12, 3, w.output_size(5, 5).0, w.output_size(5, 5).1);
            let f = |x: &Tensor3, w: &ConvKernel| crate::tensor::dot(&conv2d(x, w).unwrap().data, &g.data);
            let (gx, gw) = conv2d_backward(&x, &w, &g).unwrap();
            for i in 0..x.data.len() {
                let (mut a, mut b) = (x.clone(), x.clone());
                a.data[i] += h;
                b.data[i] -= h;
                assert!(rel_err(gx.data[i], (f(&a, &w) - f(&b, &w)) / (2.0 * h)) < 1e-6);
            }
            for i in 0..w.weights.len() {
                let (mut a, mut b) = (w.clone(), w.clone());
                a.weights[i] += h;
                b.weights[i] -= h;
                assert!(rel_err(gw.weights[i], (f(&x, &a) - f(&x, &b)) / (2.0 * h)) < 1e-6);
            }
        }
    }

    #[test]
    fn activation_examples() {
        let x = random_tensor(20, 2, 3, 3);
        let lin = ActivationParam::constant(ActivationKind::PRelu, 2, 1.0);
        assert_eq!(activation(&x, &lin).unwrap(), x);

        let p0 = ActivationParam::constant(ActivationKind::PRelu, 2, 0.0);
        let relu = ActivationParam::init(ActivationKind::Relu, 2);
        assert_eq!(activation(&x, &p0).unwrap(), activation(&x, &relu).unwrap());

        let mut s = rng::stream(21, 0);
        let wide = Tensor3::from_vec(2, 4, 4, rng::uniform_vec(&mut s, 32, -10.0, 10.0)).unwrap();
        let sr = ActivationParam::constant(ActivationKind::SRelu, 2, -1e6);
        assert_eq!(activation(&wide, &sr).unwrap(), wide);

        assert!(activation(&x, &ActivationParam::init(ActivationKind::PRelu, 3)).is_err());
    }

    #[test]
    fn activation_init_and_clamp() {
        assert_eq!(ActivationParam::init(ActivationKind::PRelu, 2).b, vec![0.5, 0.5]);
        assert_eq!(ActivationParam::init(ActivationKind::SRelu, 1).b, vec![-1.0]);
        let mut p = ActivationParam {
            kind: ActivationKind::PRelu,
            b: vec![-3.0, 0.2, 7.0],
        };
        p.clamp();
        assert_eq!(p.b, vec![-1.0, 0.2, 1.0]);
        let mut s = ActivationParam::constant(ActivationKind::SRelu, 1, -5.0);
        s.clamp();
        assert_eq!(s.b, vec![-5.0]);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let h = 1e-6;
        let mut s = rng::stream(30, 0);
        // Keep every input at least 10h away from each kink.
        let mut x = Tensor3::from_vec(2, 3, 3, rng::uniform_vec(&mut s, 18, -2.0, 2.0)).unwrap();
        for kind in [ActivationKind::Relu, ActivationKind::PRelu, ActivationKind::SRelu] {
            let p = ActivationParam {
                kind,
                b: vec![0.3, -0.4],
            };
            let kink = |c: usize| if kind == ActivationKind::SRelu { p.b[c] } else { 0.0 };
            for c in 0..2 {
                for v in &mut x.data[c * 9..(c + 1) * 9] {
                    if (*v - kink(c)).abs() < 10.0 * h {
                        *v += 1e-3;
                    }
                }
            }
            let g = random_tensor(31, 2, 3, 3);
            let f = |x: &Tensor3, p: &ActivationParam| crate::tensor::dot(&activation(x, p).unwrap().data, &g.data);
            let (gx, gb) = activation_backward(&x, &p, &g).unwrap();
            for i in 0..x.data.len() {
                let (mut a, mut b) = (x.clone(), x.clone());
                a.data[i] += h;
                b.data[i] -= h;
                assert!(rel_err(gx.data[i], (f(&a, &p) - f(&b, &p)) / (2.0 * h)) < 1e-6);
            }
            for c in 0..2 {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.b[c] += h;
                b.b[c] -= h;
                assert!(rel_err(gb[c], (f(&x, &a) - f(&x, &b)) / (2.0 * h)) < 1e-6, "{kind:?}");
            }
        }
    }

    #[test]
    fn self_correlation_examples() {
        let dirac = ConvKernel::dirac(4, 3).unwrap();
        assert_eq!(conv_self_correlation(&dirac), dirac);

        let w = random_kernel(40, 3, 2, 3, 1);
        let want = self_correlation_oracle(&w);
        assert!(max_abs_diff(&conv_self_correlation(&w).weights, &want) < 1e-12);

        let w5 = random_kernel(41, 2, 3, 5, 1);
        assert!(max_abs_diff(&conv_self_correlation(&w5).weights, &self_correlation_oracle(&w5)) < 1e-12);
    }

    #[test]
    fn isometry_examples() {
        assert_eq!(isometry_loss(&ConvKernel::dirac(5, 3).unwrap(), 1.0).unwrap(), 0.0);
        assert_eq!(isometry_loss(&random_kernel(1, 3, 2, 3, 1), 0.0).unwrap(), 0.0);
        assert!(isometry_loss(&random_kernel(1, 3, 2, 3, 1), -1.0).is_err());

        // C_i = 8 < C_o = 16, so the penalty acts on the transposed kernel.
        let w = random_kernel(50, 16, 8, 3, 1);
        let gamma = 1e-4;
        let o = self_correlation_oracle(&w.transposed());
        let (k, m) = (3, 1);
        let mut sq = 0.0;
        for a in 0..8 {
            for b in 0..8 {
                for c in 0..k {
                    for d in 0..k {
                        let target = if a == b && c == m && d == m { 1.0 } else { 0.0 };
                        let e = o[((a * 8 + b) * k + c) * k + d] - target;
                        sq += e * e;
                    }
                }
            }
        }
        let want = 0.5 * gamma * sq;
        assert!((isometry_loss(&w, gamma).unwrap() - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn isometry_zero_iff_isometric_on_constructed_kernels() {
        // A channel permutation at the center tap is isometric.
        let mut perm = ConvKernel::zeros(3, 3, 3, 1).unwrap();
        for (o, i) in [(0, 2), (1, 0), (2, 1)] {
            let idx = perm.idx(o, i, 1, 1);
            perm.weights[idx] = 1.0;
        }
        assert!(isometry_loss(&perm, 1.0).unwrap() == 0.0);
        let r = isometry_residual(&isometry_operand(&perm).0);
        assert!(r.weights.iter().all(|e| e.abs() < 1e-12));

        // Off-center taps break it.
        let mut shifted = perm.clone();
        let idx = shifted.idx(0, 2, 0, 1);
        shifted.weights[idx] = 0.5;
        assert!(isometry_loss(&shifted, 1.0).unwrap() > 1e-3);
    }

    #[test]
    fn isometry_gradient_matches_finite_differences() {
        let h = 1e-5;
        for (co, ci) in [(3, 2), (2, 3), (3, 3)] {
            let w = random_kernel(60 + co as u64, co, ci, 3, 1);
            let g = isometry_loss_grad(&w, 0.7).unwrap();
            for i in 0..w.weights.len() {
                let (mut a, mut b) = (w.clone(), w.clone());
                a.weights[i] += h;
                b.weights[i] -= h;
                let fd = (isometry_loss(&a, 0.7).unwrap() - isometry_loss(&b, 0.7).unwrap()) / (2.0 * h);
                assert!(rel_err(g.weights[i], fd) < 1e-6, "{co}x{ci} [{i}]: {} vs {fd}", g.weights[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn self_correlation_is_quadratic(seed in any::<u64>(), lambda in -3.0f64..3.0) {
            let w = random_kernel(seed, 2, 3, 3, 1);
            let mut scaled = w.clone();
            scaled.weights.iter_mut().for_each(|v| *v *= lambda);
            let a = conv_self_correlation(&w);
            let b = conv_self_correlation(&scaled);
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x * lambda * lambda - y).abs() < 1e-10 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn isometry_loss_is_non_negative(seed in any::<u64>(), gamma in 0.0f64..10.0) {
            let w = random_kernel(seed, 3, 2, 3, 1);
            prop_assert!(isometry_loss(&w, gamma).unwrap() >= 0.0);
        }

        #[test]
        fn conv_is_linear_in_input(seed in any::<u64>(), a in -2.0f64..2.0) {
            let x = random_tensor(seed, 2, 4, 4);
            let y = random_tensor(seed ^ 1, 2, 4, 4);
            let w = random_kernel(seed, 2, 2, 3, 1);
            let mut mix = x.clone();
            mix.data.iter_mut().zip(&y.data).for_each(|(m, v)| *m = a * *m + v);
            let lhs = conv2d(&mix, &w).unwrap();
            let (cx, cy) = (conv2d(&x, &w).unwrap(), conv2d(&y, &w).unwrap());
            for i in 0..lhs.data.len() {
                prop_assert!((lhs.data[i] - (a * cx.data[i] + cy.data[i])).abs() < 1e-10);
            }
        }
    }
}
