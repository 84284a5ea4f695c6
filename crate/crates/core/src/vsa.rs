//! Binding keys, binding/unbinding operators, superposition and retrieval.
//!
//! Two binding families are provided:
//!
//! * MAP-style Hadamard binding with bipolar keys (`a ⊙ x`), self-inverse
//!   because `a ⊙ a = 1`.
//! * HRR circular convolution (`a * x`), applied position-wise to the channel
//!   fiber of an image tensor, with matrix (MBAT) unbinding.

use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{dot, norm, Matrix, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    /// Entries in {−1, +1}.
    Bipolar,
    /// Real-valued entries, drawn as N(0, 1/D) when generated.
    Gaussian,
}

/// A binding or unbinding key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyVector {
    kind: KeyKind,
    entries: Vec<f64>,
}

impl KeyVector {
    /// Wraps explicit entries. Bipolar keys are validated entry by entry.
    pub fn from_entries(kind: KeyKind, entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidDimension("key of dimension 0".into()));
        }
        match kind {
            KeyKind::Bipolar if entries.iter().any(|v| *v != 1.0 && *v != -1.0) => Err(
                Error::InvalidParameter("bipolar key entries must be ±1".into()),
            ),
            KeyKind::Gaussian if entries.iter().any(|v| !v.is_finite()) => {
                Err(Error::InvalidParameter("key entries must be finite".into()))
            }
            _ => Ok(Self { kind, entries }),
        }
    }

    /// The all-ones bipolar key; binding with it is the identity.
    pub fn ones(dim: usize) -> Result<Self> {
        Self::from_entries(KeyKind::Bipolar, vec![1.0; dim])
    }

    /// The one-hot real key `δ_i`; circular convolution with `δ_i` shifts by `i`.
    pub fn delta(dim: usize, i: usize) -> Result<Self> {
        if i >= dim {
            return Err(Error::InvalidParameter(format!("delta index {i} ≥ {dim}")));
        }
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        Self::from_entries(KeyKind::Gaussian, e)
    }

    pub fn kind(&self) -> KeyKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }
}

/// Draws a key from sub-stream 0 of `seed`.
pub fn gen_key(seed: u64, dim: usize, kind: KeyKind) -> Result<KeyVector> {
    if dim == 0 {
        return Err(Error::InvalidDimension("key dimension must be ≥ 1".into()));
    }
    Ok(gen_key_from(&mut rng::stream(seed, 0), dim, kind))
}

/// Draws a key from an already-positioned stream.
pub fn gen_key_from(stream: &mut Stream, dim: usize, kind: KeyKind) -> KeyVector {
    let entries = match kind {
        KeyKind::Bipolar => rng::bipolar_vec(stream, dim),
        KeyKind::Gaussian => rng::gaussian_vec(stream, dim, 1.0 / (dim as f64).sqrt()),
    };
    KeyVector { kind, entries }
}

/// `count` keys drawn from consecutive sub-streams of `seed`.
pub fn gen_keys(seed: u64, count: usize, dim: usize, kind: KeyKind) -> Result<Vec<KeyVector>> {
    if dim == 0 {
        return Err(Error::InvalidDimension("key dimension must be ≥ 1".into()));
    }
    Ok((0..count as u64)
        .map(|i| gen_key_from(&mut rng::stream(seed, i), dim, kind))
        .collect())
}

/// Hadamard (MAP) binding `key ⊙ x`.
pub fn bind_hadamard(key: &KeyVector, x: &[f64]) -> Result<Vec<f64>> {
    check_len(key.dim(), x.len())?;
    Ok(key.entries.iter().zip(x).map(|(a, v)| a * v).collect())
}

/// Hadamard unbinding. The same elementwise product as binding: an exact
/// inverse for bipolar keys, a plain rescaling for real-valued keys.
pub fn unbind_hadamard(key: &KeyVector, y: &[f64]) -> Result<Vec<f64>> {
    bind_hadamard(key, y)
}

/// Circular convolution `out_d = Σ_j a_j · x_{(d−j) mod D}`, direct O(D²) sum.
pub fn circular_convolve(a: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), x.len())?;
    let d = a.len();
    let mut out = vec![0.0; d];
    for (j, aj) in a.iter().enumerate() {
        if *aj == 0.0 {
            continue;
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o += aj * x[(k + d - j) % d];
        }
    }
    Ok(out)
}

/// Circular correlation `out_d = Σ_j a_j · y_{(d+j) mod D}`, the HRR
/// approximate inverse of [`circular_convolve`].
pub fn circular_correlate(a: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), y.len())?;
    let d = a.len();
    let mut out = vec![0.0; d];
    for (j, aj) in a.iter().enumerate() {
        if *aj == 0.0 {
            continue;
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o += aj * y[(k + j) % d];
        }
    }
    Ok(out)
}

/// FFT path for [`circular_convolve`]; agrees with the direct sum to ~1e-12
/// on unit-scale inputs.
pub fn circular_convolve_fft(a: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_len(a.len(), x.len())?;
    let d = a.len();
    if d == 0 {
        return Ok(Vec::new());
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(d);
    let inv = planner.plan_fft_inverse(d);
    let spectrum = |v: &[f64], fft: &Arc<dyn rustfft::Fft<f64>>| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|r| Complex::new(*r, 0.0)).collect();
        fft.process(&mut buf);
        buf
    };
    let fa = spectrum(a, &fwd);
    let mut prod: Vec<Complex<f64>> = spectrum(x, &fwd)
        .into_iter()
        .zip(fa)
        .map(|(p, q)| p * q)
        .collect();
    inv.process(&mut prod);
    Ok(prod.into_iter().map(|c| c.re / d as f64).collect())
}

/// Position-wise HRR: every channel fiber `x[:, y, x]` is circularly
/// convolved with `key`. Commutes with cyclic spatial shifts.
pub fn bind_pwhrr(key: &KeyVector, x: &Tensor3) -> Result<Tensor3> {
    check_len(key.dim(), x.channels)?;
    let d = x.channels;
    let hw = x.spatial();
    let a = key.entries();
    let mut out = Tensor3::zeros(x.channels, x.height, x.width);
    // out[c, p] = Σ_j a_j x[(c − j) mod D, p]; whole channel planes at a time.
    for (j, aj) in a.iter().enumerate() {
        if *aj == 0.0 {
            continue;
        }
        for c in 0..d {
            let src = (c + d - j) % d;
            let (s, o) = (&x.data[src * hw..(src + 1) * hw], c * hw);
            out.data[o..o + hw]
                .iter_mut()
                .zip(s)
                .for_each(|(ov, sv)| *ov += aj * sv);
        }
    }
    Ok(out)
}

/// Adjoint of [`bind_pwhrr`] with respect to its tensor argument: position-wise
/// circular correlation with `key`.
pub fn pwhrr_adjoint(key: &KeyVector, g: &Tensor3) -> Result<Tensor3> {
    check_len(key.dim(), g.channels)?;
    let d = g.channels;
    let hw = g.spatial();
    let mut out = Tensor3::zeros(g.channels, g.height, g.width);
    for (j, aj) in key.entries().iter().enumerate() {
        if *aj == 0.0 {
            continue;
        }
        for c in 0..d {
            let src = (c + j) % d;
            let (s, o) = (&g.data[src * hw..(src + 1) * hw], c * hw);
            out.data[o..o + hw]
                .iter_mut()
                .zip(s)
                .for_each(|(ov, sv)| *ov += aj * sv);
        }
    }
    Ok(out)
}

/// A square MBAT unbinding matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbindMatrix {
    matrix: Matrix,
}

impl UnbindMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows != matrix.cols || matrix.rows == 0 {
            return Err(Error::InvalidDimension(format!(
                "unbind matrix must be square and non-empty, got {}×{}",
                matrix.rows, matrix.cols
            )));
        }
        if matrix.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("unbind matrix has non-finite entries".into()));
        }
        Ok(Self { matrix })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(Matrix::identity(dim))
    }

    /// Gaussian N(0, 1/D) entries from sub-stream 0 of `seed`.
    pub fn random(seed: u64, dim: usize) -> Result<Self> {
        let mut s = rng::stream(seed, 0);
        let data = rng::gaussian_vec(&mut s, dim * dim, 1.0 / (dim as f64).sqrt());
        Self::new(Matrix::from_vec(dim, dim, data)?)
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.matrix
    }
}

/// MBAT unbinding `m · h`.
pub fn unbind_mbat(m: &UnbindMatrix, h: &[f64]) -> Result<Vec<f64>> {
    check_len(m.dim(), h.len())?;
    m.matrix.matvec(h)
}

/// The circulant matrix `C` with `C · x = a * x`.
pub fn circulant_matrix(a: &[f64]) -> Matrix {
    let d = a.len();
    let mut m = Matrix::zeros(d, d);
    for r in 0..d {
        for c in 0..d {
            m.set(r, c, a[(r + d - c) % d]);
        }
    }
    m
}

/// The circular-correlation unbinder `Cᵀ` (HRR's approximate inverse) as an
/// MBAT matrix.
pub fn correlation_unbinder(key: &KeyVector) -> Result<UnbindMatrix> {
    UnbindMatrix::new(circulant_matrix(key.entries()).transpose())
}

/// The exact inverse of the key's circulant, found by solving `C · X = I`.
pub fn circulant_inverse(key: &KeyVector) -> Result<UnbindMatrix> {
    let d = key.dim();
    let c = circulant_matrix(key.entries());
    let cm = DMatrix::from_row_slice(d, d, &c.data);
    let inv = cm
        .lu()
        .solve(&DMatrix::<f64>::identity(d, d))
        .ok_or_else(|| Error::InvalidParameter("key circulant is singular".into()))?;
    let mut data = Vec::with_capacity(d * d);
    for r in 0..d {
        for col in 0..d {
            data.push(inv[(r, col)]);
        }
    }
    UnbindMatrix::new(Matrix::from_vec(d, d, data)?)
}

/// Orthonormalizes real keys (modified Gram–Schmidt), keeping their kind.
pub fn orthonormalize(keys: &[KeyVector]) -> Result<Vec<KeyVector>> {
    let mut out: Vec<KeyVector> = Vec::with_capacity(keys.len());
    for k in keys {
        let mut v = k.entries.clone();
        for q in &out {
            let p = dot(&v, &q.entries);
            v.iter_mut().zip(&q.entries).for_each(|(a, b)| *a -= p * b);
        }
        let n = norm(&v);
        if n < 1e-12 {
            return Err(Error::ZeroNorm("orthonormalize (linearly dependent keys)"));
        }
        v.iter_mut().for_each(|a| *a /= n);
        out.push(KeyVector {
            kind: KeyKind::Gaussian,
            entries: v,
        });
    }
    Ok(out)
}

/// Things that can be superposed by elementwise addition.
pub trait Superposable: Clone {
    fn same_shape(&self, other: &Self) -> bool;
    fn add_into(&mut self, other: &Self);
}

impl Superposable for Vec<f64> {
    fn same_shape(&self, other: &Self) -> bool {
        self.len() == other.len()
    }
    fn add_into(&mut self, other: &Self) {
        self.iter_mut().zip(other).for_each(|(a, b)| *a += b);
    }
}

impl Superposable for Tensor3 {
    fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }
    fn add_into(&mut self, other: &Self) {
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

/// An elementwise sum of (usually bound) items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Superposition<T> {
    pub payload: T,
    pub channel_count: usize,
    pub key_family_seed: u64,
}

impl<T> Superposition<T> {
    pub fn with_key_seed(mut self, seed: u64) -> Self {
        self.key_family_seed = seed;
        self
    }
}

/// Sums `items` left to right; the result is bit-stable for a fixed order.
pub fn superpose<T: Superposable>(items: &[T]) -> Result<Superposition<T>> {
    let (first, rest) = items.split_first().ok_or(Error::Empty("superpose"))?;
    let mut payload = first.clone();
    for item in rest {
        if !payload.same_shape(item) {
            return Err(Error::InvalidDimension("superposed items differ in shape".into()));
        }
        payload.add_into(item);
    }
    Ok(Superposition {
        payload,
        channel_count: items.len(),
        key_family_seed: 0,
    })
}

/// Result of comparing a superposition against a dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct Cleanup {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Scores every dictionary entry by `⟨s, key ⊙ Ω_j⟩` and returns the argmax
/// (lowest index on ties).
pub fn dictionary_cleanup(s: &[f64], key: &KeyVector, dictionary: &[Vec<f64>]) -> Result<Cleanup> {
    if dictionary.is_empty() {
        return Err(Error::Empty("dictionary"));
    }
    check_len(key.dim(), s.len())?;
    let mut scores = Vec::with_capacity(dictionary.len());
    for omega in dictionary {
        let bound = bind_hadamard(key, omega)?;
        scores.push(dot(s, &bound));
    }
    let mut index = 0;
    for (j, sc) in scores.iter().enumerate() {
        if *sc > scores[index] {
            index = j;
        }
    }
    Ok(Cleanup { index, scores })
}

/// Orthonormality penalty on binding keys:
/// `μ/C(N,2) · Σ_{i<j} cos²(a_i, a_j) + μ/N · Σ_i (‖a_i‖ − 1)²`.
pub fn key_orthogonality_loss(keys: &[KeyVector], mu: f64) -> Result<f64> {
    if keys.is_empty() {
        return Err(Error::Empty("key_orthogonality_loss keys"));
    }
    if mu < 0.0 {
        return Err(Error::InvalidParameter("μ must be ≥ 0".into()));
    }
    let d = keys[0].dim();
    for k in keys {
        check_len(d, k.dim())?;
    }
    let norms: Vec<f64> = keys.iter().map(|k| norm(k.entries())).collect();
    if norms.contains(&0.0) {
        return Err(Error::ZeroNorm("key_orthogonality_loss"));
    }
    let n = keys.len();
    let mut pair = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c = dot(keys[i].entries(), keys[j].entries()) / (norms[i] * norms[j]);
            pair += c * c;
        }
    }
    let pairs = n * (n - 1) / 2;
    let pair_term = if pairs == 0 { 0.0 } else { mu * pair / pairs as f64 };
    let norm_term = mu / n as f64 * norms.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
    Ok(pair_term + norm_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;
    use proptest::prelude::*;

    fn real(v: &[f64]) -> KeyVector {
        KeyVector::from_entries(KeyKind::Gaussian, v.to_vec()).unwrap()
    }

    #[test]
    fn gen_key_is_deterministic_and_bipolar() {
        let a = gen_key(7, 4, KeyKind::Bipolar).unwrap();
        let b = gen_key(7, 4, KeyKind::Bipolar).unwrap();
        assert_eq!(a, b);
        assert!(a.entries().iter().all(|v| *v == 1.0 || *v == -1.0));
        assert!(matches!(gen_key(7, 0, KeyKind::Gaussian), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn gaussian_key_moments() {
        // D = 10^4 entries of N(0, 1/D): mean has σ = 1/D, the sample variance
        // has relative standard error √(2/(D−1)) ≈ 1.4%.
        let d = 10_000;
        let k = gen_key(7, d, KeyKind::Gaussian).unwrap();
        let mean = k.entries().iter().sum::<f64>() / d as f64;
        let var = k.entries().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1) as f64;
        assert!(mean.abs() < 4.0 / d as f64, "mean {mean}");
        assert!((var * d as f64 - 1.0).abs() < 0.05, "var·D {}", var * d as f64);
    }

    #[test]
    fn independent_bipolar_keys_are_quasi_orthogonal() {
        // Hoeffding: P(|cos| ≥ 0.05) ≤ 2·exp(−10^4·0.0025/2) ≈ 7.5e-6 per pair.
        let mut hits = 0;
        for s in 0..200u64 {
            let a = gen_key(2 * s + 7, 10_000, KeyKind::Bipolar).unwrap();
            let b = gen_key(2 * s + 8, 10_000, KeyKind::Bipolar).unwrap();
            if cosine(a.entries(), b.entries()).unwrap().abs() >= 0.05 {
                hits += 1;
            }
        }
        assert_eq!(hits, 0);
    }

    #[test]
    fn hadamard_examples() {
        let ones = KeyVector::ones(3).unwrap();
        assert_eq!(bind_hadamard(&ones, &[1.5, -2.0, 3.0]).unwrap(), vec![1.5, -2.0, 3.0]);
        let k = KeyVector::from_entries(KeyKind::Bipolar, vec![1.0, -1.0]).unwrap();
        assert_eq!(bind_hadamard(&k, &[2.0, 3.0]).unwrap(), vec![2.0, -3.0]);
        assert!(bind_hadamard(&k, &[1.0]).is_err());
        let g = real(&[0.5, 2.0]);
        assert_eq!(unbind_hadamard(&g, &[4.0, 1.0]).unwrap(), vec![2.0, 2.0]);
        assert!(KeyVector::from_entries(KeyKind::Bipolar, vec![1.0, 0.5]).is_err());
    }

    #[test]
    fn circular_examples() {
        assert_eq!(circular_convolve(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![11.0, 10.0]);
        assert_eq!(circular_correlate(&[1.0, 2.0], &[11.0, 10.0]).unwrap(), vec![31.0, 32.0]);
        let x = [1.0, 2.0, 3.0, 4.0];
        let d0 = KeyVector::delta(4, 0).unwrap();
        let d1 = KeyVector::delta(4, 1).unwrap();
        assert_eq!(circular_convolve(d0.entries(), &x).unwrap(), x.to_vec());
        assert_eq!(circular_convolve(d1.entries(), &x).unwrap(), vec![4.0, 1.0, 2.0, 3.0]);
        assert_eq!(circular_correlate(d0.entries(), &x).unwrap(), x.to_vec());
        assert!(circular_convolve(&[1.0], &x).is_err());
        assert!(circular_correlate(&[1.0], &x).is_err());
    }

    #[test]
    fn correlation_residual_has_unit_relative_energy() {
        // For a unit-norm Gaussian key, corr(a, a * x) = x + Σ_{lag≠0} r_lag·shift(x)
        // where the autocorrelations r_lag are ~N(0, 1/D). The residual energy is
        // therefore ≈ ‖x‖² at every D.
        for d in [64usize, 256, 1024] {
            let mut errs: Vec<f64> = (0..32u64)
                .map(|s| {
                    let mut st = rng::stream(100 + s, d as u64);
                    let mut a = rng::gaussian_vec(&mut st, d, 1.0);
                    let n = norm(&a);
                    a.iter_mut().for_each(|v| *v /= n);
                    let x = rng::gaussian_vec(&mut st, d, 1.0);
                    let r = circular_correlate(&a, &circular_convolve(&a, &x).unwrap()).unwrap();
                    let e: Vec<f64> = r.iter().zip(&x).map(|(p, q)| p - q).collect();
                    norm(&e) / norm(&x)
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            assert!((0.6..1.4).contains(&errs[16]), "D={d}: {}", errs[16]);
        }
    }

    #[test]
    fn pwhrr_examples() {
        let key = real(&[1.0, 2.0]);
        let x = Tensor3::from_vec(2, 1, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(bind_pwhrr(&key, &x).unwrap().data, vec![11.0, 10.0]);

        let mut st = rng::stream(3, 0);
        let t = Tensor3::from_vec(4, 3, 5, rng::gaussian_vec(&mut st, 60, 1.0)).unwrap();
        let id = KeyVector::delta(4, 0).unwrap();
        assert_eq!(bind_pwhrr(&id, &t).unwrap(), t);

        let fiber = [0.3, -1.0, 2.0, 0.5];
        let mut c = Tensor3::zeros(4, 3, 3);
        for y in 0..3 {
            for xx in 0..3 {
                c.set_fiber(y, xx, &fiber);
            }
        }
        let k = gen_key(4, 4, KeyKind::Gaussian).unwrap();
        let b = bind_pwhrr(&k, &c).unwrap();
        let expect = circular_convolve(k.entries(), &fiber).unwrap();
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(b.fiber(y, xx), expect);
            }
        }
        assert!(bind_pwhrr(&real(&[1.0, 0.0, 0.0]), &c).is_err());
    }

    #[test]
    fn pwhrr_adjoint_matches_inner_products() {
        let mut st = rng::stream(9, 0);
        let k = gen_key(9, 6, KeyKind::Gaussian).unwrap();
        let x = Tensor3::from_vec(6, 2, 3, rng::gaussian_vec(&mut st, 36, 1.0)).unwrap();
        let g = Tensor3::from_vec(6, 2, 3, rng::gaussian_vec(&mut st, 36, 1.0)).unwrap();
        let lhs = dot(&bind_pwhrr(&k, &x).unwrap().data, &g.data);
        let rhs = dot(&x.data, &pwhrr_adjoint(&k, &g).unwrap().data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn mbat_examples() {
        let h = vec![1.0, -2.0, 0.5];
        assert_eq!(unbind_mbat(&UnbindMatrix::identity(3).unwrap(), &h).unwrap(), h);
        let m = UnbindMatrix::random(4, 3).unwrap();
        let a = unbind_mbat(&m, &h).unwrap();
        let scaled: Vec<f64> = h.iter().map(|v| 2.5 * v).collect();
        let b = unbind_mbat(&m, &scaled).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((2.5 * p - q).abs() < 1e-12);
        }
        assert!(unbind_mbat(&m, &[1.0]).is_err());
        assert!(UnbindMatrix::new(Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn circulant_inverse_undoes_pwhrr() {
        let d = 16;
        let key = gen_key(21, d, KeyKind::Gaussian).unwrap();
        let inv = circulant_inverse(&key).unwrap();
        let mut st = rng::stream(22, 0);
        let x = Tensor3::from_vec(d, 2, 2, rng::gaussian_vec(&mut st, d * 4, 1.0)).unwrap();
        let b = bind_pwhrr(&key, &x).unwrap();
        for y in 0..2 {
            for xx in 0..2 {
                let r = unbind_mbat(&inv, &b.fiber(y, xx)).unwrap();
                let e: Vec<f64> = r.iter().zip(x.fiber(y, xx)).map(|(p, q)| p - q).collect();
                assert!(norm(&e) < 1e-8);
            }
        }
        // The correlation unbinder is Cᵀ.
        let c = correlation_unbinder(&key).unwrap();
        let v: Vec<f64> = (0..d).map(|i| i as f64).collect();
        let lhs = unbind_mbat(&c, &v).unwrap();
        let rhs = circular_correlate(key.entries(), &v).unwrap();
        for (p, q) in lhs.iter().zip(&rhs) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn superpose_examples() {
        let x = vec![1.0, -2.0, 3.5];
        let s = superpose(std::slice::from_ref(&x)).unwrap();
        assert_eq!(s.payload, x);
        assert_eq!(s.channel_count, 1);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(superpose(&[x.clone(), neg]).unwrap().payload, vec![0.0; 3]);
        assert!(superpose::<Vec<f64>>(&[]).is_err());
        assert!(superpose(&[x, vec![1.0]]).is_err());

        let mut st = rng::stream(5, 0);
        let items: Vec<Vec<f64>> = (0..3).map(|_| rng::gaussian_vec(&mut st, 32, 1.0)).collect();
        let s = superpose(&items).unwrap();
        for i in 0..32 {
            let mut acc = 0.0;
            for it in &items {
                acc += it[i];
            }
            assert!((s.payload[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn cleanup_examples() {
        let d = 64;
        let a = gen_key(1, d, KeyKind::Bipolar).unwrap();
        let mut st = rng::stream(2, 0);
        let x = rng::gaussian_vec(&mut st, d, 1.0);
        let s = bind_hadamard(&a, &x).unwrap();
        let r = dictionary_cleanup(&s, &a, std::slice::from_ref(&x)).unwrap();
        assert_eq!(r.scores[0], dot(&x, &x));

        let other = rng::gaussian_vec(&mut st, d, 1.0);
        let dict = vec![other, x.clone()];
        let r1 = dictionary_cleanup(&s, &a, &dict).unwrap();
        let s2: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let r2 = dictionary_cleanup(&s2, &a, &dict).unwrap();
        assert_eq!(r1.index, r2.index);
        for (p, q) in r1.scores.iter().zip(&r2.scores) {
            assert!((2.0 * p - q).abs() < 1e-12);
        }
        assert!(dictionary_cleanup(&s, &a, &[]).is_err());

        let tie = dictionary_cleanup(&[1.0, 1.0], &KeyVector::ones(2).unwrap(), &[vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap();
        assert_eq!(tie.index, 0);
    }

    #[test]
    fn cleanup_retrieves_from_three_way_superposition() {
        // D = 1024, N = 3 bipolar-bound unit values: the wrong-index margin is
        // O(1) against noise O(1/√D), so misses should essentially never occur.
        let d = 1024;
        let trials = 10_000u64;
        let mut correct = 0;
        for t in 0..trials {
            let mut st = rng::stream(77, t);
            let keys: Vec<KeyVector> = (0..3).map(|_| gen_key_from(&mut st, d, KeyKind::Bipolar)).collect();
            let vals: Vec<Vec<f64>> = (0..3).map(|_| rng::unit_sphere(&mut st, d)).collect();
            let bound: Vec<Vec<f64>> = keys.iter().zip(&vals).map(|(k, v)| bind_hadamard(k, v).unwrap()).collect();
            let s = superpose(&bound).unwrap().payload;
            let k = (t % 3) as usize;
            if dictionary_cleanup(&s, &keys[k], &vals).unwrap().index == k {
                correct += 1;
            }
        }
        assert!(correct as f64 >= 0.99 * trials as f64, "{correct}/{trials}");
    }

    #[test]
    fn key_loss_examples() {
        let e0 = real(&[1.0, 0.0, 0.0]);
        let e1 = real(&[0.0, 1.0, 0.0]);
        assert_eq!(key_orthogonality_loss(&[e0.clone(), e1], 0.1).unwrap(), 0.0);
        assert!((key_orthogonality_loss(&[e0.clone(), e0.clone()], 0.1).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(key_orthogonality_loss(std::slice::from_ref(&e0), 0.3).unwrap(), 0.0);
        assert!(key_orthogonality_loss(&[e0, real(&[0.0, 0.0, 0.0])], 0.1).is_err());
        assert!(key_orthogonality_loss(&[], 0.1).is_err());
    }

    #[test]
    fn key_loss_matches_double_loop() {
        let keys = gen_keys(31, 4, 64, KeyKind::Gaussian).unwrap();
        let mu = 0.1;
        let mut pair = 0.0;
        let mut count = 0.0;
        let mut normt = 0.0;
        for i in 0..4 {
            let ai = keys[i].entries();
            let ni = ai.iter().map(|v| v * v).sum::<f64>().sqrt();
            normt += (ni - 1.0) * (ni - 1.0);
            for j in 0..4 {
                if j <= i {
                    continue;
                }
                let aj = keys[j].entries();
                let nj = aj.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut ip = 0.0;
                for k in 0..64 {
                    ip += ai[k] * aj[k];
                }
                pair += (ip / (ni * nj)).powi(2);
                count += 1.0;
            }
        }
        let oracle = mu * pair / count + mu * normt / 4.0;
        assert!((key_orthogonality_loss(&keys, mu).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn orthonormalized_keys_have_zero_loss() {
        let keys = orthonormalize(&gen_keys(8, 3, 16, KeyKind::Gaussian).unwrap()).unwrap();
        assert!(key_orthogonality_loss(&keys, 1.0).unwrap() < 1e-24);
    }

    proptest! {
        #[test]
        fn bipolar_round_trip_is_exact(seed in any::<u64>(), xs in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let k = gen_key(seed, xs.len(), KeyKind::Bipolar).unwrap();
            let back = unbind_hadamard(&k, &bind_hadamard(&k, &xs).unwrap()).unwrap();
            prop_assert_eq!(back, xs);
        }

        #[test]
        fn convolution_is_commutative_and_fft_agrees(
            a in prop::collection::vec(-1.0f64..1.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut st = rng::stream(seed, 0);
            let x = rng::uniform_vec(&mut st, a.len(), -1.0, 1.0);
            let ax = circular_convolve(&a, &x).unwrap();
            let xa = circular_convolve(&x, &a).unwrap();
            let fast = circular_convolve_fft(&a, &x).unwrap();
            for i in 0..a.len() {
                prop_assert!((ax[i] - xa[i]).abs() < 1e-12);
                prop_assert!((ax[i] - fast[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn convolution_is_bilinear(seed in any::<u64>(), alpha in -3.0f64..3.0, d in 1usize..24) {
            let mut st = rng::stream(seed, 1);
            let a = rng::gaussian_vec(&mut st, d, 1.0);
            let x = rng::gaussian_vec(&mut st, d, 1.0);
            let y = rng::gaussian_vec(&mut st, d, 1.0);
            let comb: Vec<f64> = x.iter().zip(&y).map(|(p, q)| alpha * p + q).collect();
            let lhs = circular_convolve(&a, &comb).unwrap();
            let cx = circular_convolve(&a, &x).unwrap();
            let cy = circular_convolve(&a, &y).unwrap();
            for i in 0..d {
                prop_assert!((lhs[i] - (alpha * cx[i] + cy[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn pwhrr_commutes_with_cyclic_shifts(seed in any::<u64>(), dy in 0usize..5, dx in 0usize..5) {
            let mut st = rng::stream(seed, 2);
            let key = gen_key_from(&mut st, 6, KeyKind::Gaussian);
            let t = Tensor3::from_vec(6, 4, 3, rng::gaussian_vec(&mut st, 72, 1.0)).unwrap();
            let a = bind_pwhrr(&key, &t.roll(dy, dx)).unwrap();
            let b = bind_pwhrr(&key, &t).unwrap().roll(dy, dx);
            for (p, q) in a.data.iter().zip(&b.data) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn superpose_is_bit_stable_for_fixed_order(seed in any::<u64>(), n in 1usize..6) {
            let mut st = rng::stream(seed, 3);
            let items: Vec<Vec<f64>> = (0..n).map(|_| rng::gaussian_vec(&mut st, 17, 1.0)).collect();
            prop_assert_eq!(superpose(&items).unwrap(), superpose(&items).unwrap());
        }

        #[test]
        fn key_loss_nonnegative(seed in any::<u64>(), n in 1usize..5) {
            let keys = gen_keys(seed, n, 8, KeyKind::Gaussian).unwrap();
            prop_assert!(key_orthogonality_loss(&keys, 0.1).unwrap() >= 0.0);
        }
    }
}
