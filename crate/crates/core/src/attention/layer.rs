//! A transformer block whose attention runs in superposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Grid, Matrix};
use crate::vsa::{gen_key_from, KeyKind, KeyVector};

use super::{
    bind_grid, build_feature_map, favor_plus_s, joint_normalize, unbind_attention_only,
    AttentionInstance, ChannelGrid, FeatureKind, FeatureMapSpec, RowSampling,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Channels are unbound right after attention; projection and MLP run per channel.
    AttOnly,
    /// Projection and MLP run on the superposed stream; channels are unbound at the output.
    AttMlp,
}

/// Weights of one block. Projections map rows: `y = x·Wᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Position of the block in the stack; selects its key sets.
    pub index: u64,
    pub heads: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// Hidden × E.
    pub w_1: Matrix,
    /// E × hidden.
    pub w_2: Matrix,
    /// Shared by all heads, dimension E / heads.
    pub feature_map: FeatureMapSpec,
}

impl LayerParams {
    /// Gaussian weights with variance `1/fan_in` and a ReLU feature map.
    pub fn random(seed: u64, e: usize, heads: usize, hidden: usize, r: usize) -> Result<Self> {
        if heads == 0 || e % heads != 0 {
            return Err(Error::InvalidDimension(format!("E = {e} is not divisible by {heads} heads")));
        }
        let mut s = rng::stream(seed, 1);
        let mut dense = |rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, rng::gaussian_vec(&mut s, rows * cols, 1.0 / (cols as f64).sqrt()))
        };
        Ok(Self {
            index: 0,
            heads,
            w_q: dense(e, e)?,
            w_k: dense(e, e)?,
            w_v: dense(e, e)?,
            w_o: dense(e, e)?,
            w_1: dense(hidden, e)?,
            w_2: dense(e, hidden)?,
            feature_map: build_feature_map(seed, r, e / heads, FeatureKind::ReluMap, RowSampling::OrthogonalBlocks)?,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.rows
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    fn validate(&self) -> Result<()> {
        let e = self.width();
        if self.heads == 0 || e % self.heads != 0 {
            return Err(Error::InvalidDimension(format!("E = {e} is not divisible by {} heads", self.heads)));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.rows != e || w.cols != e {
                return Err(Error::InvalidDimension("projections must be E×E".into()));
            }
        }
        if self.w_1.cols != e || self.w_2.rows != e || self.w_2.cols != self.w_1.rows {
            return Err(Error::InvalidDimension("MLP weights do not match E".into()));
        }
        if self.feature_map.d != self.head_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.head_dim(),
                found: self.feature_map.d,
            });
        }
        Ok(())
    }
}

/// The two frozen bipolar key sets of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerKeys {
    /// Per head, an M×N grid of head-dimension keys used inside attention.
    pub binding: Vec<Grid<KeyVector>>,
    /// M×N grid of E-dimensional keys for the skip path and output unbinding.
    pub unbinding: Grid<KeyVector>,
}

impl LayerKeys {
    /// Keys for block `layer`, drawn from `derive_seed(seed, layer)`.
    pub fn draw(seed: u64, layer: u64, rows: usize, cols: usize, heads: usize, e: usize) -> Result<Self> {
        if heads == 0 || e % heads != 0 {
            return Err(Error::InvalidDimension(format!("E = {e} is not divisible by {heads} heads")));
        }
        let base = rng::derive_seed(seed, layer);
        let binding = (0..heads as u64)
            .map(|h| {
                let mut s = rng::stream(base, h);
                Grid::from_fn(rows, cols, |_, _| gen_key_from(&mut s, e / heads, KeyKind::Bipolar))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut s = rng::stream(base, u64::MAX);
        let unbinding = Grid::from_fn(rows, cols, |_, _| gen_key_from(&mut s, e, KeyKind::Bipolar))?;
        Ok(Self { binding, unbinding })
    }

    /// All-ones keys, under which binding is the identity.
    pub fn ones(rows: usize, cols: usize, heads: usize, e: usize) -> Result<Self> {
        let dh = e / heads;
        Ok(Self {
            binding: (0..heads)
                .map(|_| Grid::from_fn(rows, cols, |_, _| KeyVector::ones(dh)).and_then(collect_grid))
                .collect::<Result<Vec<_>>>()?,
            unbinding: Grid::from_fn(rows, cols, |_, _| KeyVector::ones(e)).and_then(collect_grid)?,
        })
    }
}

fn collect_grid(g: Grid<Result<KeyVector>>) -> Result<Grid<KeyVector>> {
    let (rows, cols) = (g.rows, g.cols);
    Grid::from_cells(rows, cols, g.cells.into_iter().collect::<Result<Vec<_>>>()?)
}

fn project(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    x.matmul(&w.transpose())
}

fn columns(x: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(x.rows, width);
    for i in 0..x.rows {
        out.row_mut(i).copy_from_slice(&x.row(i)[start..start + width]);
    }
    out
}

fn bind_rows(x: &Matrix, key: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows {
        out.row_mut(i).iter_mut().zip(key).for_each(|(v, a)| *v *= a);
    }
    out
}

/// `h + W_2·ReLU(W_1·h)`, row by row.
fn residual_mlp(h: &Matrix, params: &LayerParams) -> Result<Matrix> {
    let mut hidden = project(h, &params.w_1)?;
    hidden.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut out = project(&hidden, &params.w_2)?;
    out.data.iter_mut().zip(&h.data).for_each(|(o, x)| *o += x);
    Ok(out)
}

/// Runs one block on an M×N grid of L×E token arrays, with keys drawn from
/// `(seed, params.index)`.
pub fn mimoformer_layer(tokens: &Grid<Matrix>, params: &LayerParams, mode: LayerMode, seed: u64) -> Result<Grid<Matrix>> {
    let keys = LayerKeys::draw(seed, params.index, tokens.rows, tokens.cols, params.heads, params.width())?;
    mimoformer_layer_with_keys(tokens, params, mode, &keys)
}

/// As [`mimoformer_layer`] with explicit key sets.
pub fn mimoformer_layer_with_keys(
    tokens: &Grid<Matrix>,
    params: &LayerParams,
    mode: LayerMode,
    keys: &LayerKeys,
) -> Result<Grid<Matrix>> {
    params.validate()?;
    let (rows, cols, e, dh) = (tokens.rows, tokens.cols, params.width(), params.head_dim());
    let l = tokens.cells[0].rows;
    for x in &tokens.cells {
        if x.rows != l || x.cols != e {
            return Err(Error::InvalidDimension(format!("tokens must be {l}×{e}")));
        }
    }
    if keys.binding.len() != params.heads {
        return Err(Error::DimensionMismatch {
            expected: params.heads,
            found: keys.binding.len(),
        });
    }
    for k in keys.unbinding.cells.iter() {
        crate::error::check_len(e, k.dim())?;
    }
    if keys.unbinding.rows != rows || keys.unbinding.cols != cols {
        return Err(Error::InvalidDimension("key grid shape mismatch".into()));
    }

    let q = tokens.map(|x| project(x, &params.w_q));
    let k = tokens.map(|x| project(x, &params.w_k));
    let v = tokens.map(|x| project(x, &params.w_v));
    let collect = |g: Grid<Result<Matrix>>| -> Result<Grid<Matrix>> {
        Grid::from_cells(g.rows, g.cols, g.cells.into_iter().collect::<Result<Vec<_>>>()?)
    };
    let (q, k, v) = (collect(q)?, collect(k)?, collect(v)?);

    // Per-cell (AttOnly) or per-column (AttMlp) attention outputs, heads concatenated.
    let mut per_cell = Grid::from_fn(rows, cols, |_, _| Matrix::zeros(l, e))?;
    let mut per_column = vec![Matrix::zeros(l, e); cols];
    for (h, head_keys) in keys.binding.iter().enumerate() {
        let lo = h * dh;
        let cells = Grid::from_fn(rows, cols, |m, n| {
            AttentionInstance::new(
                columns(k.get(m, n), lo, dh),
                columns(q.get(m, n), lo, dh),
                columns(v.get(m, n), lo, dh),
            )
        })?;
        let cells = Grid::from_cells(rows, cols, cells.cells.into_iter().collect::<Result<Vec<_>>>()?)?;
        let grid = ChannelGrid::new(cells, head_keys.clone())?;
        let out = favor_plus_s(&bind_grid(&grid), &params.feature_map)?;
        match mode {
            LayerMode::AttOnly => {
                let att = unbind_attention_only(&out.numerators, &out.denominators, head_keys)?;
                for (dst, src) in per_cell.cells.iter_mut().zip(&att.cells) {
                    for i in 0..l {
                        dst.row_mut(i)[lo..lo + dh].copy_from_slice(src.row(i));
                    }
                }
            }
            LayerMode::AttMlp => {
                let att = joint_normalize(&out.numerators, &out.denominators)?;
                for (dst, src) in per_column.iter_mut().zip(&att) {
                    for i in 0..l {
                        dst.row_mut(i)[lo..lo + dh].copy_from_slice(src.row(i));
                    }
                }
            }
        }
    }

    match mode {
        LayerMode::AttOnly => {
            let outs = per_cell
                .cells
                .iter()
                .zip(&tokens.cells)
                .map(|(att, x)| {
                    let mut h = project(att, &params.w_o)?;
                    h.data.iter_mut().zip(&x.data).for_each(|(o, xi)| *o += xi);
                    residual_mlp(&h, params)
                })
                .collect::<Result<Vec<_>>>()?;
            Grid::from_cells(rows, cols, outs)
        }
        LayerMode::AttMlp => {
            let mut streams = Vec::with_capacity(cols);
            for (n, att) in per_column.iter().enumerate() {
                let mut h = project(att, &params.w_o)?;
                for m in 0..rows {
                    let skip = bind_rows(tokens.get(m, n), keys.unbinding.get(m, n).entries());
                    h.data.iter_mut().zip(&skip.data).for_each(|(o, s)| *o += s);
                }
                streams.push(residual_mlp(&h, params)?);
            }
            Grid::from_fn(rows, cols, |m, n| bind_rows(&streams[n], keys.unbinding.get(m, n).entries()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::favor_plus;

    fn tokens(seed: u64, rows: usize, cols: usize, l: usize, e: usize) -> Grid<Matrix> {
        let mut s = rng::stream(seed, 0);
        Grid::from_fn(rows, cols, |_, _| Matrix::from_vec(l, e, rng::gaussian_vec(&mut s, l * e, 0.5)).unwrap()).unwrap()
    }

    /// Plain single-channel block assembled from favor_plus per head.
    fn performer_layer(x: &Matrix, p: &LayerParams) -> Matrix {
        let (q, k, v) = (project(x, &p.w_q).unwrap(), project(x, &p.w_k).unwrap(), project(x, &p.w_v).unwrap());
        let dh = p.head_dim();
        let mut att = Matrix::zeros(x.rows, p.width());
        for h in 0..p.heads {
            let inst = AttentionInstance::new(columns(&k, h * dh, dh), columns(&q, h * dh, dh), columns(&v, h * dh, dh)).unwrap();
            let o = favor_plus(&inst, &p.feature_map).unwrap().output;
            for i in 0..x.rows {
                att.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(o.row(i));
            }
        }
        let mut h = project(&att, &p.w_o).unwrap();
        h.data.iter_mut().zip(&x.data).for_each(|(o, xi)| *o += xi);
        residual_mlp(&h, p).unwrap()
    }

    #[test]
    fn single_channel_matches_performer_block() {
        let p = LayerParams::random(1, 16, 2, 32, 32).unwrap();
        let x = tokens(2, 1, 1, 6, 16);
        let keys = LayerKeys::ones(1, 1, 2, 16).unwrap();
        let reference = performer_layer(x.get(0, 0), &p);
        for mode in [LayerMode::AttOnly, LayerMode::AttMlp] {
            let out = mimoformer_layer_with_keys(&x, &p, mode, &keys).unwrap();
            for (a, b) in out.get(0, 0).data.iter().zip(&reference.data) {
                assert!((a - b).abs() < 1e-12, "{mode:?}");
            }
        }
    }

    #[test]
    fn identity_projection_and_zero_mlp_give_attention_plus_skip() {
        let mut p = LayerParams::random(3, 8, 1, 4, 16).unwrap();
        p.w_o = Matrix::identity(8);
        p.w_1 = Matrix::zeros(4, 8);
        p.w_2 = Matrix::zeros(8, 4);
        let x = tokens(4, 2, 2, 5, 8);
        let keys = LayerKeys::draw(9, 0, 2, 2, 1, 8).unwrap();
        let out = mimoformer_layer_with_keys(&x, &p, LayerMode::AttOnly, &keys).unwrap();

        let grid = ChannelGrid::new(
            Grid::from_fn(2, 2, |m, n| {
                let c = x.get(m, n);
                AttentionInstance::new(project(c, &p.w_k).unwrap(), project(c, &p.w_q).unwrap(), project(c, &p.w_v).unwrap())
                    .unwrap()
            })
            .unwrap(),
            keys.binding[0].clone(),
        )
        .unwrap();
        let s = favor_plus_s(&bind_grid(&grid), &p.feature_map).unwrap();
        let att = unbind_attention_only(&s.numerators, &s.denominators, &keys.binding[0]).unwrap();
        for (cell, (a, xi)) in out.cells.iter().zip(att.cells.iter().zip(&x.cells)) {
            for ((o, a), xv) in cell.data.iter().zip(&a.data).zip(&xi.data) {
                assert!((o - (a + xv)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn keys_are_per_layer_and_deterministic() {
        let a = LayerKeys::draw(5, 0, 2, 2, 2, 8).unwrap();
        assert_eq!(a, LayerKeys::draw(5, 0, 2, 2, 2, 8).unwrap());
        assert_ne!(a, LayerKeys::draw(5, 1, 2, 2, 2, 8).unwrap());
        assert_ne!(a.binding[0], a.binding[1]);
    }

    #[test]
    fn layer_output_is_deterministic_and_finite() {
        let p = LayerParams::random(6, 16, 2, 32, 16).unwrap();
        let x = tokens(7, 2, 2, 4, 16);
        for mode in [LayerMode::AttOnly, LayerMode::AttMlp] {
            let a = mimoformer_layer(&x, &p, mode, 11).unwrap();
            assert_eq!(a, mimoformer_layer(&x, &p, mode, 11).unwrap());
            assert!(a.cells.iter().flat_map(|m| &m.data).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn shape_errors() {
        let p = LayerParams::random(6, 16, 2, 32, 16).unwrap();
        let x = tokens(7, 2, 2, 4, 12);
        assert!(mimoformer_layer(&x, &p, LayerMode::AttOnly, 1).is_err());
        assert!(LayerParams::random(1, 10, 3, 8, 8).is_err());
        let x = tokens(7, 2, 2, 4, 16);
        let keys = LayerKeys::draw(1, 0, 2, 2, 2, 8).unwrap();
        assert!(mimoformer_layer_with_keys(&x, &p, LayerMode::AttMlp, &keys).is_err());
    }

    fn mode_gap(seed: u64, e: usize) -> f64 {
        let params = LayerParams::random(seed, e, 1, 2 * e, 64).unwrap();
        let mut s = rng::stream(seed, 77);
        let x = Grid::from_fn(2, 2, |_, _| {
            Matrix::from_vec(8, e, rng::gaussian_vec(&mut s, 8 * e, 1.0 / (e as f64).sqrt())).unwrap()
        })
        .unwrap();
        let a = mimoformer_layer(&x, &params, LayerMode::AttOnly, seed).unwrap();
        let b = mimoformer_layer(&x, &params, LayerMode::AttMlp, seed).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (p, q) in a.cells.iter().zip(&b.cells) {
            for (u, v) in p.data.iter().zip(&q.data) {
                num += (u - v) * (u - v);
                den += u * u;
            }
        }
        (num / den).sqrt()
    }

    // Measured flat near 1.23 on random weights: bound cross-talk in the
    // superposed skip and MLP has norm comparable to the signal at every E.
    #[test]
    #[ignore = "stated trend does not hold for untrained weights; see README"]
    fn att_mlp_gap_shrinks_with_width() {
        let medians: Vec<f64> = [64usize, 256, 512]
            .iter()
            .map(|&e| crate::attention::fidelity::median((0..8).map(|s| mode_gap(s, e)).collect()))
            .collect();
        assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
    }
}
