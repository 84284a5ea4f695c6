//! Attention over an M×N grid of channels that share one feature pass.
//!
//! Cell `(m, n)` carries its own keys, queries and values, bound with the
//! bipolar key `a^{(m,n)}`. Keys are superposed along each row, queries along
//! each column, and values over the whole row, so a single value–key product
//! `A_s` serves every column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Grid, Matrix};
use crate::vsa::{KeyKind, KeyVector};

use super::{AttentionInstance, FeatureMapSpec, OpCount, DENOM_FLOOR};

/// Per-cell attention instances plus the per-cell binding keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelGrid {
    pub cells: Grid<AttentionInstance>,
    pub keys: Grid<KeyVector>,
}

impl ChannelGrid {
    pub fn new(cells: Grid<AttentionInstance>, keys: Grid<KeyVector>) -> Result<Self> {
        if cells.rows != keys.rows || cells.cols != keys.cols {
            return Err(Error::InvalidDimension("cell and key grids differ in shape".into()));
        }
        let (l, d) = (cells.cells[0].len(), cells.cells[0].dim());
        for inst in &cells.cells {
            if inst.len() != l || inst.dim() != d {
                return Err(Error::InvalidDimension("grid cells must share (L, D)".into()));
            }
        }
        for k in &keys.cells {
            if k.kind() != KeyKind::Bipolar {
                return Err(Error::InvalidParameter("grid keys must be bipolar".into()));
            }
            crate::error::check_len(d, k.dim())?;
        }
        Ok(Self { cells, keys })
    }

    /// Rows of the grid (M).
    pub fn rows(&self) -> usize {
        self.cells.rows
    }

    /// Columns of the grid (N).
    pub fn cols(&self) -> usize {
        self.cells.cols
    }

    pub fn seq_len(&self) -> usize {
        self.cells.cells[0].len()
    }

    pub fn dim(&self) -> usize {
        self.cells.cells[0].dim()
    }
}

fn bind_rows(m: &Matrix, key: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows {
        out.row_mut(i).iter_mut().zip(key).for_each(|(v, a)| *v *= a);
    }
    out
}

/// Multiplies every key, query and value token of cell `(m, n)` by `a^{(m,n)}`.
pub fn bind_grid(grid: &ChannelGrid) -> ChannelGrid {
    let mut cells = grid.cells.clone();
    for (inst, key) in cells.cells.iter_mut().zip(&grid.keys.cells) {
        let a = key.entries();
        inst.keys = bind_rows(&inst.keys, a);
        inst.queries = bind_rows(&inst.queries, a);
        inst.values = bind_rows(&inst.values, a);
    }
    ChannelGrid {
        cells,
        keys: grid.keys.clone(),
    }
}

/// Superposed numerators and per-channel denominators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FavorSOutput {
    /// `S^{(n)}`, one L×D matrix per column.
    pub numerators: Vec<Matrix>,
    /// `B^{(m,n)}`, a length-L vector per cell.
    pub denominators: Grid<Vec<f64>>,
    pub ops: OpCount,
}

fn sum_rows<'a>(mats: impl Iterator<Item = &'a Matrix>, l: usize, d: usize) -> Matrix {
    let mut out = Matrix::zeros(l, d);
    for m in mats {
        out.data.iter_mut().zip(&m.data).for_each(|(o, v)| *o += v);
    }
    out
}

/// Runs the shared-computation pass over an already bound grid.
///
/// Row `m` contributes `φ(Σ_w k^{(m,w)})` once, paired with the row's value
/// sum in `A_s` and alone in `C_s^{(m)}`. Column `n` contributes
/// `φ(Σ_t q^{(t,n)})` once, reused for `S^{(n)}` and every `B^{(m,n)}`.
pub fn favor_plus_s(bound: &ChannelGrid, fm: &FeatureMapSpec) -> Result<FavorSOutput> {
    let (rows, cols, l, d, r) = (bound.rows(), bound.cols(), bound.seq_len(), bound.dim(), fm.r);
    if fm.d != d {
        return Err(Error::DimensionMismatch { expected: fm.d, found: d });
    }
    let mut ops = OpCount::default();

    let mut a_s = Matrix::zeros(d, r);
    let mut c_s: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for m in 0..rows {
        let row_cells = (0..cols).map(|w| bound.cells.get(m, w));
        let k_sum = sum_rows(row_cells.clone().map(|c| &c.keys), l, d);
        let v_sum = sum_rows(row_cells.map(|c| &c.values), l, d);
        let phi = fm.features_rows(&k_sum, &mut ops)?;
        let mut c = vec![0.0; r];
        for j in 0..l {
            let f = phi.row(j);
            for (p, vp) in v_sum.row(j).iter().enumerate() {
                a_s.row_mut(p).iter_mut().zip(f).for_each(|(x, y)| *x += vp * y);
            }
            c.iter_mut().zip(f).for_each(|(x, y)| *x += y);
        }
        ops.add(l * d * r);
        c_s.push(c);
    }

    let mut numerators = Vec::with_capacity(cols);
    let mut denominators = Grid::from_fn(rows, cols, |_, _| Vec::with_capacity(l))?;
    for n in 0..cols {
        let q_sum = sum_rows((0..rows).map(|t| &bound.cells.get(t, n).queries), l, d);
        let phi = fm.features_rows(&q_sum, &mut ops)?;
        let mut s = Matrix::zeros(l, d);
        for i in 0..l {
            let f = phi.row(i);
            s.row_mut(i).copy_from_slice(&a_s.matvec(f)?);
            for (m, c) in c_s.iter().enumerate() {
                denominators.get_mut(m, n).push(crate::tensor::dot(c, f));
            }
        }
        ops.add(l * d * r + rows * l * r);
        numerators.push(s);
    }
    Ok(FavorSOutput {
        numerators,
        denominators,
        ops,
    })
}

/// The asymptotic multiply budget
/// `LMD(R+N) + LND(R+M) + LNDR + LMNR` for an M×N grid.
pub fn favor_s_budget(m: usize, n: usize, l: usize, d: usize, r: usize) -> u64 {
    let (m, n, l, d, r) = (m as u64, n as u64, l as u64, d as u64, r as u64);
    l * m * d * (r + n) + l * n * d * (r + m) + l * n * d * r + l * m * n * r
}

fn check_shapes(numerators: &[Matrix], denominators: &Grid<Vec<f64>>) -> Result<(usize, usize)> {
    if numerators.len() != denominators.cols {
        return Err(Error::DimensionMismatch {
            expected: denominators.cols,
            found: numerators.len(),
        });
    }
    let (l, d) = (numerators[0].rows, numerators[0].cols);
    for s in numerators {
        if s.rows != l || s.cols != d {
            return Err(Error::InvalidDimension("numerators differ in shape".into()));
        }
    }
    for b in &denominators.cells {
        crate::error::check_len(l, b.len())?;
    }
    Ok((l, d))
}

/// `o_i^{(m,n)} = S_i^{(n)} ⊙ a^{(m,n)} / B_i^{(m,n)}` with the denominator
/// floored at [`DENOM_FLOOR`].
pub fn unbind_attention_only(
    numerators: &[Matrix],
    denominators: &Grid<Vec<f64>>,
    keys: &Grid<KeyVector>,
) -> Result<Grid<Matrix>> {
    let (l, d) = check_shapes(numerators, denominators)?;
    if keys.rows != denominators.rows || keys.cols != denominators.cols {
        return Err(Error::InvalidDimension("key grid shape mismatch".into()));
    }
    Grid::from_fn(denominators.rows, denominators.cols, |m, n| {
        let a = keys.get(m, n).entries();
        let b = denominators.get(m, n);
        let s = &numerators[n];
        let mut out = Matrix::zeros(l, d);
        for i in 0..l {
            let den = b[i].max(DENOM_FLOOR);
            out.row_mut(i)
                .iter_mut()
                .zip(s.row(i).iter().zip(a))
                .for_each(|(o, (x, k))| *o = x * k / den);
        }
        out
    })
}

/// `S̄_i^{(n)} = S_i^{(n)} / Σ_m B_i^{(m,n)}`, still superposed over rows.
pub fn joint_normalize(numerators: &[Matrix], denominators: &Grid<Vec<f64>>) -> Result<Vec<Matrix>> {
    let (l, _) = check_shapes(numerators, denominators)?;
    Ok(numerators
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let mut out = s.clone();
            for i in 0..l {
                let total: f64 = (0..denominators.rows).map(|m| denominators.get(m, n)[i]).sum();
                let den = total.max(DENOM_FLOOR);
                out.row_mut(i).iter_mut().for_each(|v| *v /= den);
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{build_feature_map, favor_plus, FeatureKind, RowSampling};
    use crate::rng;
    use crate::vsa::gen_keys;

    fn random_grid(seed: u64, m: usize, n: usize, l: usize, d: usize) -> ChannelGrid {
        let mut s = rng::stream(seed, 0);
        let cells = Grid::from_fn(m, n, |_, _| {
            let mut mat = || Matrix::from_vec(l, d, rng::gaussian_vec(&mut s, l * d, 0.4)).unwrap();
            AttentionInstance::new(mat(), mat(), mat()).unwrap()
        })
        .unwrap();
        let keys = Grid::from_cells(m, n, gen_keys(seed ^ 0xabc, m * n, d, KeyKind::Bipolar).unwrap()).unwrap();
        ChannelGrid::new(cells, keys).unwrap()
    }

    fn ones_grid(inst: AttentionInstance) -> ChannelGrid {
        let d = inst.dim();
        ChannelGrid::new(
            Grid::from_cells(1, 1, vec![inst]).unwrap(),
            Grid::from_cells(1, 1, vec![KeyVector::ones(d).unwrap()]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn bind_grid_examples() {
        let g = random_grid(1, 2, 2, 3, 4);
        let ones = ChannelGrid::new(g.cells.clone(), g.keys.map(|_| KeyVector::ones(4).unwrap())).unwrap();
        assert_eq!(bind_grid(&ones).cells, g.cells);
        assert_eq!(bind_grid(&bind_grid(&g)).cells, g.cells);
        let b = bind_grid(&g);
        let expect = crate::vsa::bind_hadamard(g.keys.get(1, 0), g.cells.get(1, 0).values.row(2)).unwrap();
        assert_eq!(b.cells.get(1, 0).values.row(2), expect.as_slice());
    }

    #[test]
    fn degenerate_grid_is_favor_plus() {
        let g = random_grid(2, 1, 1, 6, 4);
        let inst = g.cells.get(0, 0).clone();
        let fm = build_feature_map(3, 32, 4, FeatureKind::PositiveSoftmaxMap, RowSampling::Iid).unwrap();
        let single = ones_grid(inst.clone());
        let out = favor_plus_s(&bind_grid(&single), &fm).unwrap();
        let reference = favor_plus(&inst, &fm).unwrap();
        assert_eq!(out.numerators[0], reference.numerator);
        assert_eq!(out.denominators.get(0, 0), &reference.denominator);
        let o = unbind_attention_only(&out.numerators, &out.denominators, &single.keys).unwrap();
        for (a, b) in o.get(0, 0).data.iter().zip(&reference.output.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_map_denominators_are_positive() {
        let g = random_grid(4, 2, 3, 5, 8);
        let fm = build_feature_map(5, 16, 8, FeatureKind::PositiveSoftmaxMap, RowSampling::OrthogonalBlocks).unwrap();
        let out = favor_plus_s(&bind_grid(&g), &fm).unwrap();
        assert!(out.denominators.cells.iter().flatten().all(|b| *b > 0.0));
    }

    #[test]
    fn unbinding_is_linear_in_values() {
        let g = random_grid(6, 2, 2, 4, 8);
        let fm = build_feature_map(7, 16, 8, FeatureKind::ReluMap, RowSampling::Iid).unwrap();
        let base = favor_plus_s(&bind_grid(&g), &fm).unwrap();
        let mut scaled = g.clone();
        for c in scaled.cells.cells.iter_mut() {
            c.values.scale(3.0);
        }
        let out = favor_plus_s(&bind_grid(&scaled), &fm).unwrap();
        assert_eq!(out.denominators, base.denominators);
        let o1 = unbind_attention_only(&base.numerators, &base.denominators, &g.keys).unwrap();
        let o3 = unbind_attention_only(&out.numerators, &out.denominators, &g.keys).unwrap();
        for (a, b) in o1.cells.iter().flat_map(|m| &m.data).zip(o3.cells.iter().flat_map(|m| &m.data)) {
            assert!((3.0 * a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn shared_pass_matches_per_channel_recomputation() {
        // Straight-line route: every channel rebuilds its own sums and products
        // from the bound tokens, with no shared A_s or query features.
        let (m_rows, n_cols, l, d) = (2, 2, 5, 8);
        let g = random_grid(8, m_rows, n_cols, l, d);
        let fm = build_feature_map(9, 24, d, FeatureKind::PositiveSoftmaxMap, RowSampling::Iid).unwrap();
        let bound = bind_grid(&g);
        let out = favor_plus_s(&bound, &fm).unwrap();
        let fast = unbind_attention_only(&out.numerators, &out.denominators, &g.keys).unwrap();
        for m in 0..m_rows {
            for n in 0..n_cols {
                let a = g.keys.get(m, n).entries();
                for i in 0..l {
                    let mut q = vec![0.0; d];
                    for t in 0..m_rows {
                        for p in 0..d {
                            q[p] += bound.cells.get(t, n).queries.get(i, p);
                        }
                    }
                    let fq = fm.features(&q).unwrap();
                    let mut num = vec![0.0; d];
                    let mut den = 0.0;
                    for j in 0..l {
                        let mut k = vec![0.0; d];
                        for w in 0..n_cols {
                            for p in 0..d {
                                k[p] += bound.cells.get(m, w).keys.get(j, p);
                            }
                        }
                        let weight: f64 = fm.features(&k).unwrap().iter().zip(&fq).map(|(x, y)| x * y).sum();
                        den += weight;
                        for u in 0..m_rows {
                            let mut ku = vec![0.0; d];
                            for w in 0..n_cols {
                                for p in 0..d {
                                    ku[p] += bound.cells.get(u, w).keys.get(j, p);
                                }
                            }
                            let wu: f64 = fm.features(&ku).unwrap().iter().zip(&fq).map(|(x, y)| x * y).sum();
                            for qq in 0..n_cols {
                                for p in 0..d {
                                    num[p] += wu * bound.cells.get(u, qq).values.get(j, p);
                                }
                            }
                        }
                    }
                    for p in 0..d {
                        let expect = num[p] * a[p] / den;
                        assert!((fast.get(m, n).get(i, p) - expect).abs() < 1e-10, "({m},{n},{i},{p})");
                    }
                }
            }
        }
    }

    #[test]
    fn joint_normalize_examples() {
        let g = random_grid(10, 1, 2, 4, 8);
        let fm = build_feature_map(11, 16, 8, FeatureKind::PositiveSoftmaxMap, RowSampling::Iid).unwrap();
        let out = favor_plus_s(&bind_grid(&g), &fm).unwrap();
        let joint = joint_normalize(&out.numerators, &out.denominators).unwrap();
        let ones = g.keys.map(|_| KeyVector::ones(8).unwrap());
        let per = unbind_attention_only(&out.numerators, &out.denominators, &ones).unwrap();
        for n in 0..2 {
            assert_eq!(&joint[n], per.get(0, n));
        }

        let s = vec![Matrix::from_vec(1, 2, vec![6.0, -3.0]).unwrap()];
        let b = Grid::from_cells(3, 1, vec![vec![1.5], vec![1.5], vec![1.5]]).unwrap();
        assert_eq!(joint_normalize(&s, &b).unwrap()[0].data, vec![6.0 / 4.5, -3.0 / 4.5]);

        let g = random_grid(12, 3, 2, 4, 8);
        let out = favor_plus_s(&bind_grid(&g), &fm).unwrap();
        let joint = joint_normalize(&out.numerators, &out.denominators).unwrap();
        for n in 0..2 {
            for i in 0..4 {
                let total = out.denominators.get(0, n)[i] + out.denominators.get(1, n)[i] + out.denominators.get(2, n)[i];
                for p in 0..8 {
                    assert!((joint[n].get(i, p) - out.numerators[n].get(i, p) / total).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn op_count_beats_independent_runs() {
        let (l, d, r) = (64, 16, 64);
        let g = random_grid(13, 2, 2, l, d);
        let fm = build_feature_map(14, r, d, FeatureKind::ReluMap, RowSampling::Iid).unwrap();
        let shared = favor_plus_s(&bind_grid(&g), &fm).unwrap().ops.multiplies;
        let single: u64 = g.cells.cells.iter().map(|c| favor_plus(c, &fm).unwrap().ops.multiplies).sum();
        assert!((shared as f64) <= 0.75 * single as f64, "{shared} vs {single}");
        assert!(shared <= 4 * favor_s_budget(2, 2, l, d, r));
    }

    #[test]
    fn mismatched_inputs_error() {
        let g = random_grid(15, 2, 2, 3, 4);
        let fm = build_feature_map(1, 8, 5, FeatureKind::ReluMap, RowSampling::Iid).unwrap();
        assert!(favor_plus_s(&g, &fm).is_err());
        let bad_keys = Grid::from_cells(1, 1, vec![KeyVector::ones(4).unwrap()]).unwrap();
        assert!(ChannelGrid::new(g.cells.clone(), bad_keys).is_err());
        let gaussian = g.keys.map(|k| KeyVector::from_entries(KeyKind::Gaussian, k.entries().to_vec()).unwrap());
        assert!(ChannelGrid::new(g.cells.clone(), gaussian).is_err());
    }
}
