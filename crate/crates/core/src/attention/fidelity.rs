//! Seeded fidelity sweeps shared by the tests, the acceptance suite and the CLI.

use rayon::prelude::*;
use serde::Serialize;

use super::{
    bind_grid, build_feature_map, exact_softmax_attention, favor_plus, favor_plus_s, relu_kernel_closed_form,
    relu_kernel_monte_carlo_reduced, unbind_attention_only, AttentionInstance, ChannelGrid, FeatureKind, RowSampling,
};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{dot, Grid, Matrix};
use crate::vsa::{gen_keys, KeyKind};

/// Keys and queries drawn uniformly from the unit ball, values from U[0.5, 1.5].
pub fn ball_instance(seed: u64, l: usize, d: usize) -> Result<AttentionInstance> {
    let mut s = rng::stream(seed, 0);
    let ball = |s: &mut Stream| {
        let mut m = Matrix::zeros(l, d);
        for i in 0..l {
            let r = rng::uniform_vec(s, 1, 0.0, 1.0)[0];
            let u = rng::unit_sphere(s, d);
            m.row_mut(i).iter_mut().zip(&u).for_each(|(o, v)| *o = r * v);
        }
        m
    };
    let keys = ball(&mut s);
    let queries = ball(&mut s);
    let values = Matrix::from_vec(l, d, rng::uniform_vec(&mut s, l * d, 0.5, 1.5))?;
    AttentionInstance::new(keys, queries, values)
}

/// Key and query norm used by [`sphere_instance`]: `c·D^{1/4}`, which keeps the
/// positive feature variance `exp(‖x‖²/√D)` fixed as `D` grows.
pub const SPHERE_SCALE: f64 = 1.5;

/// Keys and queries on the sphere of radius `SPHERE_SCALE·D^{1/4}`, values from U[0.5, 1.5].
pub fn sphere_instance(s: &mut Stream, l: usize, d: usize) -> Result<AttentionInstance> {
    let radius = SPHERE_SCALE * (d as f64).powf(0.25);
    let sphere = |s: &mut Stream| {
        let mut m = Matrix::zeros(l, d);
        for i in 0..l {
            let u = rng::unit_sphere(s, d);
            m.row_mut(i).iter_mut().zip(&u).for_each(|(o, v)| *o = radius * v);
        }
        m
    };
    let keys = sphere(s);
    let queries = sphere(s);
    let values = Matrix::from_vec(l, d, rng::uniform_vec(s, l * d, 0.5, 1.5))?;
    AttentionInstance::new(keys, queries, values)
}

/// Largest entrywise relative deviation of `approx` from `exact`.
pub fn max_relative_deviation(approx: &Matrix, exact: &Matrix) -> f64 {
    approx
        .data
        .iter()
        .zip(&exact.data)
        .map(|(a, e)| ((a - e) / e).abs())
        .fold(0.0, f64::max)
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    /// The swept parameter (`R` or `D`).
    pub param: usize,
    pub median: f64,
    pub samples: Vec<f64>,
}

/// FAVOR+ against exact softmax attention over feature counts `rs`.
/// Instance `s` and its feature map use seeds `seed + s` and `seed + 1000 + s`.
pub fn favor_r_sweep(rs: &[usize], seeds: u64, l: usize, d: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if seeds == 0 {
        return Err(Error::InvalidParameter("at least one seed".into()));
    }
    rs.iter()
        .map(|&r| {
            let samples = (0..seeds)
                .map(|s| {
                    let inst = ball_instance(seed + s, l, d)?;
                    let exact = exact_softmax_attention(&inst);
                    let fm = build_feature_map(
                        seed + 1000 + s,
                        r,
                        d,
                        FeatureKind::PositiveSoftmaxMap,
                        RowSampling::OrthogonalBlocks,
                    )?;
                    Ok(max_relative_deviation(&favor_plus(&inst, &fm)?.output, &exact))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SweepRow { param: r, median: median(samples.clone()), samples })
        })
        .collect()
}

/// Relative L2 deviation of every unbound FAVOR+S channel from FAVOR+ run on
/// that channel alone with the same feature map, pooled over the grid.
pub fn favor_s_deviation(grid: &ChannelGrid, r: usize, fm_seed: u64) -> Result<f64> {
    let fm = build_feature_map(fm_seed, r, grid.dim(), FeatureKind::PositiveSoftmaxMap, RowSampling::OrthogonalBlocks)?;
    let out = favor_plus_s(&bind_grid(grid), &fm)?;
    let unbound = unbind_attention_only(&out.numerators, &out.denominators, &grid.keys)?;
    let (mut num, mut den) = (0.0, 0.0);
    for m in 0..grid.rows() {
        for n in 0..grid.cols() {
            let oracle = favor_plus(grid.cells.get(m, n), &fm)?.output;
            let diff: Vec<f64> = unbound.get(m, n).data.iter().zip(&oracle.data).map(|(a, b)| a - b).collect();
            num += dot(&diff, &diff);
            den += dot(&oracle.data, &oracle.data);
        }
    }
    Ok((num / den).sqrt())
}

/// FAVOR+S fidelity over dimensions `dims` on an `m×n` grid of [`sphere_instance`]s.
/// Family `f` draws instances from `stream(seed + f, D)`, bipolar keys from
/// `seed + 1000 + f` and the feature map from `seed + 2000 + f`.
pub fn favor_s_d_sweep(
    dims: &[usize],
    (m, n): (usize, usize),
    families: u64,
    l: usize,
    r: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if families == 0 {
        return Err(Error::InvalidParameter("at least one seed family".into()));
    }
    dims.iter()
        .map(|&d| {
            let samples = (0..families)
                .map(|f| {
                    let mut s = rng::stream(seed + f, d as u64);
                    let mut cells = Vec::with_capacity(m * n);
                    for _ in 0..m * n {
                        cells.push(sphere_instance(&mut s, l, d)?);
                    }
                    let keys = gen_keys(seed + 1000 + f, m * n, d, KeyKind::Bipolar)?;
                    let grid = ChannelGrid::new(Grid::from_cells(m, n, cells)?, Grid::from_cells(m, n, keys)?)?;
                    favor_s_deviation(&grid, r, seed + 2000 + f)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SweepRow { param: d, median: median(samples.clone()), samples })
        })
        .collect()
}

/// Pairs `(x, y)` in `D` dimensions whose cosines are evenly spaced over
/// `[−0.99, 0.99]`, with norms drawn from U[0.5, 2].
pub fn kernel_pairs(count: usize, d: usize, seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if count < 2 || d < 2 {
        return Err(Error::InvalidParameter("need at least 2 pairs in at least 2 dimensions".into()));
    }
    let mut s = rng::stream(seed, 0);
    Ok((0..count)
        .map(|i| {
            let rho = -0.99 + 1.98 * i as f64 / (count - 1) as f64;
            let x = rng::unit_sphere(&mut s, d);
            let mut z = rng::unit_sphere(&mut s, d);
            let p = dot(&z, &x);
            z.iter_mut().zip(&x).for_each(|(a, b)| *a -= p * b);
            let zn = crate::tensor::norm(&z);
            let c = (1.0 - rho * rho).sqrt();
            let ns = rng::uniform_vec(&mut s, 2, 0.5, 2.0);
            let y = x.iter().zip(&z).map(|(a, b)| ns[1] * (rho * a + c * b / zn)).collect();
            (x.iter().map(|a| ns[0] * a).collect(), y)
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelCheckRow {
    pub rho: f64,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub relative_error: f64,
}

/// Closed-form ReLU kernel against the variance-reduced Monte Carlo estimate
/// with `samples` draws, pair `i` on seed `seed + 1 + i`.
pub fn relu_kernel_check(count: usize, d: usize, samples: u64, seed: u64) -> Result<Vec<KernelCheckRow>> {
    kernel_pairs(count, d, seed)?
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let closed_form = relu_kernel_closed_form(x, y)?;
            let monte_carlo = relu_kernel_monte_carlo_reduced(x, y, samples, seed + 1 + i as u64)?;
            let rho = dot(x, y) / (crate::tensor::norm(x) * crate::tensor::norm(y));
            Ok(KernelCheckRow { rho, closed_form, monte_carlo, relative_error: (monte_carlo / closed_form - 1.0).abs() })
        })
        .collect()
}

/// True when the medians strictly decrease along the sweep.
pub fn strictly_decreasing(rows: &[SweepRow]) -> bool {
    rows.windows(2).all(|w| w[1].median < w[0].median)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn sphere_instance_has_scaled_norms() {
        let mut s = rng::stream(3, 0);
        let inst = sphere_instance(&mut s, 4, 16).unwrap();
        let want = SPHERE_SCALE * 2.0;
        for i in 0..4 {
            assert!((crate::tensor::norm(inst.keys.row(i)) - want).abs() < 1e-12);
            assert!((crate::tensor::norm(inst.queries.row(i)) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_with_ones_key_has_zero_deviation() {
        let mut s = rng::stream(5, 0);
        let cells = Grid::from_cells(1, 1, vec![sphere_instance(&mut s, 6, 8).unwrap()]).unwrap();
        let keys = Grid::from_cells(1, 1, vec![crate::vsa::KeyVector::ones(8).unwrap()]).unwrap();
        let grid = ChannelGrid::new(cells, keys).unwrap();
        assert!(favor_s_deviation(&grid, 64, 9).unwrap() < 1e-12);
    }

    #[test]
    fn sweeps_reject_empty_seed_sets() {
        assert!(favor_r_sweep(&[16], 0, 4, 4, 0).is_err());
        assert!(favor_s_d_sweep(&[8], (2, 2), 0, 4, 16, 0).is_err());
    }

    #[test]
    fn kernel_pairs_span_the_cosine_range() {
        let pairs = kernel_pairs(5, 8, 1).unwrap();
        let rhos: Vec<f64> =
            pairs.iter().map(|(x, y)| dot(x, y) / (crate::tensor::norm(x) * crate::tensor::norm(y))).collect();
        for (r, want) in rhos.iter().zip([-0.99, -0.495, 0.0, 0.495, 0.99]) {
            assert!((r - want).abs() < 1e-12, "{r} vs {want}");
        }
        assert!(kernel_pairs(1, 8, 1).is_err());
    }

    #[test]
    fn kernel_check_is_close_at_moderate_samples() {
        let rows = relu_kernel_check(3, 6, 20_000, 2).unwrap();
        assert!(rows.iter().all(|r| r.relative_error < 0.1), "{rows:?}");
    }

    #[test]
    fn sweeps_are_deterministic() {
        let a = favor_s_d_sweep(&[16], (2, 2), 2, 4, 64, 7).unwrap();
        let b = favor_s_d_sweep(&[16], (2, 2), 2, 4, 64, 7).unwrap();
        assert_eq!(a[0].samples, b[0].samples);
    }
}
