//! Softmax attention, its random-feature linearization (FAVOR+), and the
//! same computation carried out over an M×N grid of bound channels.

mod features;
pub mod fidelity;
mod layer;
mod superposed;

pub use features::{
    build_feature_map, relu_kernel_closed_form, relu_kernel_g, relu_kernel_monte_carlo,
    relu_kernel_monte_carlo_reduced, FeatureKind, FeatureMapSpec, RowSampling,
};
pub use layer::{mimoformer_layer, mimoformer_layer_with_keys, LayerKeys, LayerMode, LayerParams};
pub use superposed::{
    bind_grid, favor_plus_s, favor_s_budget, joint_normalize, unbind_attention_only, ChannelGrid,
    FavorSOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Floor applied to attention denominators before division.
pub const DENOM_FLOOR: f64 = 1e-12;

/// Running count of scalar multiplications (divisions included).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub multiplies: u64,
}

impl OpCount {
    pub fn add(&mut self, n: usize) {
        self.multiplies += n as u64;
    }
}

/// Keys, queries and values of one attention head, each L×D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionInstance {
    pub keys: Matrix,
    pub queries: Matrix,
    pub values: Matrix,
}

impl AttentionInstance {
    pub fn new(keys: Matrix, queries: Matrix, values: Matrix) -> Result<Self> {
        let (l, d) = (keys.rows, keys.cols);
        if l == 0 || d == 0 {
            return Err(Error::InvalidDimension("attention needs L, D ≥ 1".into()));
        }
        for m in [&queries, &values] {
            if m.rows != l || m.cols != d {
                return Err(Error::InvalidDimension(format!(
                    "expected {l}×{d} token arrays, got {}×{}",
                    m.rows, m.cols
                )));
            }
        }
        if [&keys, &queries, &values]
            .iter()
            .any(|m| m.data.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidParameter("token arrays must be finite".into()));
        }
        Ok(Self { keys, queries, values })
    }

    pub fn len(&self) -> usize {
        self.keys.rows
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.cols
    }
}

/// Attention weights `softmax_j(⟨k_j, q_i⟩/√D)`, one row per query.
pub fn softmax_weights(inst: &AttentionInstance) -> Matrix {
    let (l, d) = (inst.len(), inst.dim());
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = Matrix::zeros(l, l);
    for i in 0..l {
        let q = inst.queries.row(i);
        let logits: Vec<f64> = (0..l)
            .map(|j| crate::tensor::dot(inst.keys.row(j), q) * scale)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            w.set(i, j, e / total);
        }
    }
    w
}

/// `o_i = Σ_j v_j exp(⟨k_j,q_i⟩/√D) / Σ_l exp(⟨k_l,q_i⟩/√D)`.
pub fn exact_softmax_attention(inst: &AttentionInstance) -> Matrix {
    softmax_weights(inst)
        .matmul(&inst.values)
        .expect("weights are L×L and values L×D")
}

/// FAVOR+ output with bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FavorOutput {
    pub output: Matrix,
    /// Unnormalized numerators `A·φ(q_i)`, L×D.
    pub numerator: Matrix,
    /// Denominators `C·φ(q_i)` before flooring.
    pub denominator: Vec<f64>,
    /// Whether any denominator fell below [`DENOM_FLOOR`].
    pub floored: bool,
    pub ops: OpCount,
}

/// Linear attention `o_i = A·φ(q_i) / (C·φ(q_i))` with `A = Σ_j v_j φ(k_j)ᵀ`
/// and `C = Σ_j φ(k_j)ᵀ`, each built once.
pub fn favor_plus(inst: &AttentionInstance, fm: &FeatureMapSpec) -> Result<FavorOutput> {
    if fm.d != inst.dim() {
        return Err(Error::DimensionMismatch {
            expected: fm.d,
            found: inst.dim(),
        });
    }
    let (l, d, r) = (inst.len(), inst.dim(), fm.r);
    let mut ops = OpCount::default();
    let phi_k = fm.features_rows(&inst.keys, &mut ops)?;
    // A is D×R, C has length R.
    let mut a = Matrix::zeros(d, r);
    let mut c = vec![0.0; r];
    for j in 0..l {
        let f = phi_k.row(j);
        let v = inst.values.row(j);
        for (p, vp) in v.iter().enumerate() {
            a.row_mut(p).iter_mut().zip(f).for_each(|(x, y)| *x += vp * y);
        }
        c.iter_mut().zip(f).for_each(|(x, y)| *x += y);
    }
    ops.add(l * d * r);

    let mut numerator = Matrix::zeros(l, d);
    let mut output = Matrix::zeros(l, d);
    let mut denominator = Vec::with_capacity(l);
    let mut floored = false;
    for i in 0..l {
        let f = fm.features_counted(inst.queries.row(i), &mut ops)?;
        let num = a.matvec(&f)?;
        let den = crate::tensor::dot(&c, &f);
        ops.add(d * r + r + d);
        if den < DENOM_FLOOR {
            floored = true;
        }
        let safe = den.max(DENOM_FLOOR);
        numerator.row_mut(i).copy_from_slice(&num);
        output
            .row_mut(i)
            .iter_mut()
            .zip(&num)
            .for_each(|(o, n)| *o = n / safe);
        denominator.push(den);
    }
    Ok(FavorOutput {
        output,
        numerator,
        denominator,
        floored,
        ops,
    })
}
