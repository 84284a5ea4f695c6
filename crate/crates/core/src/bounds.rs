//! Closed-form concentration bounds and the Monte Carlo estimators that
//! check them.
//!
//! Every estimator runs each trial on its own sub-stream `(seed, trial)` so
//! trials can be fanned out across threads; violation counts are integer sums
//! and therefore independent of scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{dot, Grid};

/// Outcome of one bound-versus-simulation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Closed-form bound, clamped to 1.
    pub bound: f64,
    /// `violations / trials`.
    pub empirical: f64,
    pub trials: u64,
    pub violations: u64,
    pub config: Value,
    pub seed: u64,
}

impl BoundReport {
    fn new(bound: f64, violations: u64, trials: u64, config: Value, seed: u64) -> Self {
        Self {
            bound,
            empirical: violations as f64 / trials as f64,
            trials,
            violations,
            config,
            seed,
        }
    }

    /// Binomial standard error of the empirical frequency.
    pub fn standard_error(&self) -> f64 {
        let p = self.empirical;
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    /// `empirical ≤ bound + 3·SE`.
    pub fn dominated(&self) -> bool {
        self.empirical <= self.bound + 3.0 * self.standard_error()
    }
}

/// Counts trials for which `event` fires, each trial on stream `(seed, t)`.
pub fn count_events<F>(trials: u64, seed: u64, event: F) -> u64
where
    F: Fn(&mut Stream) -> bool + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| event(&mut rng::stream(seed, t)) as u64)
        .sum()
}

fn check_trials(trials: u64) -> Result<()> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be ≥ 1".into()));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("α must be finite and ≥ 0, got {alpha}")));
    }
    Ok(())
}

/// `min(1, 2·exp(−D·α²/2))`, the chance that two random bipolar vectors have
/// `|cos| ≥ α`.
pub fn hoeffding_orthogonality_bound(d: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if d == 0 {
        return Err(Error::InvalidDimension("D must be ≥ 1".into()));
    }
    Ok((2.0 * (-(d as f64) * alpha * alpha / 2.0).exp()).min(1.0))
}

/// Draws pairs of independent bipolar vectors and counts `|cos| ≥ α`.
pub fn estimate_interference_probability(
    d: usize,
    alpha: f64,
    trials: u64,
    seed: u64,
) -> Result<BoundReport> {
    check_trials(trials)?;
    let bound = hoeffding_orthogonality_bound(d, alpha)?;
    let violations = count_events(trials, seed, |s| {
        // For bipolar vectors ‖x‖‖y‖ = D exactly.
        let ip: f64 = (0..d).map(|_| rng::rademacher(s) * rng::rademacher(s)).sum();
        (ip / d as f64).abs() >= alpha
    });
    Ok(BoundReport::new(
        bound,
        violations,
        trials,
        json!({"kind": "hoeffding", "d": d, "alpha": alpha}),
        seed,
    ))
}

fn check_cleanup_inputs(values: &[Vec<f64>], omega: &[f64], k: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("cleanup values"));
    }
    if k >= values.len() {
        return Err(Error::InvalidParameter(format!("channel {k} out of range")));
    }
    for v in values {
        check_len(omega.len(), v.len())?;
    }
    let signal = dot(&values[k], omega);
    if signal == 0.0 {
        return Err(Error::UndefinedBound("⟨x_k, Ω⟩ = 0"));
    }
    Ok(signal)
}

/// `2·exp(−α²⟨x_k,Ω⟩² / (2·Σ_{i≠k} ‖x_i ⊙ Ω‖²))`, clamped to 1. Zero
/// interference mass (including N = 1) gives 0.
pub fn cleanup_noise_bound(values: &[Vec<f64>], omega: &[f64], k: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let signal = check_cleanup_inputs(values, omega, k)?;
    let mass: f64 = values
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, x)| x.iter().zip(omega).map(|(a, b)| (a * b).powi(2)).sum::<f64>())
        .sum();
    if mass == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * (-alpha * alpha * signal * signal / (2.0 * mass)).exp()).min(1.0))
}

/// Resamples bipolar keys per trial and counts
/// `⟨Σ_i a_i ⊙ x_i, a_k ⊙ Ω⟩ ∉ [1−α, 1+α]·⟨x_k, Ω⟩`.
pub fn estimate_cleanup_distortion(
    values: &[Vec<f64>],
    omega: &[f64],
    k: usize,
    alpha: f64,
    trials: u64,
    seed: u64,
) -> Result<BoundReport> {
    check_trials(trials)?;
    let bound = cleanup_noise_bound(values, omega, k, alpha)?;
    let signal = dot(&values[k], omega);
    let d = omega.len();
    let violations = count_events(trials, seed, |s| {
        let keys: Vec<Vec<f64>> = values.iter().map(|_| rng::bipolar_vec(s, d)).collect();
        let mut sup = vec![0.0; d];
        for (a, x) in keys.iter().zip(values) {
            sup.iter_mut().zip(a.iter().zip(x)).for_each(|(o, (ai, xi))| *o += ai * xi);
        }
        let probe: Vec<f64> = keys[k].iter().zip(omega).map(|(a, w)| a * w).collect();
        (dot(&sup, &probe) - signal).abs() > alpha * signal.abs()
    });
    Ok(BoundReport::new(
        bound,
        violations,
        trials,
        json!({"kind": "cleanup", "d": d, "n": values.len(), "k": k, "alpha": alpha}),
        seed,
    ))
}

/// The four tail bounds on inter-channel distortion of one superposed
/// key–query inner product, each clamped to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FavorSBounds {
    /// `Σ_w √(Σ_t 1/Ξ)`.
    pub per_key_column: f64,
    /// `Σ_t √(Σ_w 1/Ξ)`.
    pub per_query_row: f64,
    /// `Σ 1/Ξ`.
    pub chebyshev: f64,
    /// `2·Σ exp(−Ξ / (2(NM−1)²))`.
    pub union_hoeffding: f64,
}

impl FavorSBounds {
    pub fn min(&self) -> f64 {
        self.per_key_column
            .min(self.per_query_row)
            .min(self.chebyshev)
            .min(self.union_hoeffding)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.per_key_column, self.per_query_row, self.chebyshev, self.union_hoeffding]
    }
}

fn check_favor_s_inputs(kbar: &Grid<Vec<f64>>, qbar: &Grid<Vec<f64>>, u: usize, n: usize) -> Result<f64> {
    if kbar.rows != qbar.rows || kbar.cols != qbar.cols {
        return Err(Error::InvalidDimension("key and query grids differ in shape".into()));
    }
    if u >= kbar.rows || n >= kbar.cols {
        return Err(Error::InvalidParameter(format!("cell ({u}, {n}) out of range")));
    }
    let d = kbar.get(0, 0).len();
    for v in kbar.cells.iter().chain(&qbar.cells) {
        check_len(d, v.len())?;
    }
    let signal = dot(kbar.get(u, n), qbar.get(u, n));
    if signal == 0.0 {
        return Err(Error::UndefinedBound("⟨k̄, q̄⟩ = 0 on the intended channel"));
    }
    Ok(signal)
}

/// Bounds on the probability that `⟨Σ_w k^{(u,w)}, Σ_t q^{(t,n)}⟩` leaves
/// `[1−α, 1+α]·⟨k̄^{(u,n)}, q̄^{(u,n)}⟩` when every cell is bound with an
/// independent bipolar key. `kbar` and `qbar` are M×N grids of unbound vectors.
pub fn favor_s_interference_bounds(
    kbar: &Grid<Vec<f64>>,
    qbar: &Grid<Vec<f64>>,
    u: usize,
    n: usize,
    alpha: f64,
) -> Result<FavorSBounds> {
    check_alpha(alpha)?;
    let signal = check_favor_s_inputs(kbar, qbar, u, n)?;
    let (m_rows, n_cols) = (kbar.rows, kbar.cols);
    let num = alpha * alpha * signal * signal;
    let cross = (n_cols * m_rows - 1) as f64;

    // inv_xi[w][t] = 1/Ξ for key column w and query row t; the diagonal
    // (w, t) = (n, u) is excluded.
    let mut inv_xi = vec![vec![None; m_rows]; n_cols];
    for (w, row) in inv_xi.iter_mut().enumerate() {
        for (t, cell) in row.iter_mut().enumerate() {
            if (w, t) == (n, u) {
                continue;
            }
            let mass: f64 = kbar
                .get(u, w)
                .iter()
                .zip(qbar.get(t, n))
                .map(|(a, b)| (a * b).powi(2))
                .sum();
            *cell = Some(mass / num);
        }
    }
    let terms = || inv_xi.iter().flatten().flatten().copied();

    let per_key_column: f64 = inv_xi
        .iter()
        .map(|row| row.iter().flatten().sum::<f64>().sqrt())
        .sum();
    let per_query_row: f64 = (0..m_rows)
        .map(|t| inv_xi.iter().filter_map(|row| row[t]).sum::<f64>().sqrt())
        .sum();
    let chebyshev: f64 = terms().sum();
    let union_hoeffding: f64 = terms()
        .map(|inv| {
            // 1/Ξ = 0 means Ξ = ∞ and a vanishing term.
            if inv == 0.0 {
                0.0
            } else {
                2.0 * (-1.0 / (inv * 2.0 * cross * cross)).exp()
            }
        })
        .sum();
    Ok(FavorSBounds {
        per_key_column: per_key_column.min(1.0),
        per_query_row: per_query_row.min(1.0),
        chebyshev: chebyshev.min(1.0),
        union_hoeffding: union_hoeffding.min(1.0),
    })
}

/// Draws fresh bipolar channel keys per trial and counts distortion of the
/// superposed key–query inner product; the bound is the minimum of the four.
pub fn estimate_favor_s_distortion(
    kbar: &Grid<Vec<f64>>,
    qbar: &Grid<Vec<f64>>,
    u: usize,
    n: usize,
    alpha: f64,
    trials: u64,
    seed: u64,
) -> Result<BoundReport> {
    check_trials(trials)?;
    let bounds = favor_s_interference_bounds(kbar, qbar, u, n, alpha)?;
    let signal = dot(kbar.get(u, n), qbar.get(u, n));
    let d = kbar.get(0, 0).len();
    let violations = count_events(trials, seed, |s| {
        let keys: Vec<Vec<f64>> = (0..kbar.len()).map(|_| rng::bipolar_vec(s, d)).collect();
        let key = |m: usize, c: usize| &keys[m * kbar.cols + c];
        let mut ksum = vec![0.0; d];
        for w in 0..kbar.cols {
            let (a, kb) = (key(u, w), kbar.get(u, w));
            ksum.iter_mut().zip(a.iter().zip(kb)).for_each(|(o, (x, y))| *o += x * y);
        }
        let mut qsum = vec![0.0; d];
        for t in 0..kbar.rows {
            let (a, qb) = (key(t, n), qbar.get(t, n));
            qsum.iter_mut().zip(a.iter().zip(qb)).for_each(|(o, (x, y))| *o += x * y);
        }
        (dot(&ksum, &qsum) - signal).abs() > alpha * signal.abs()
    });
    Ok(BoundReport::new(
        bounds.min(),
        violations,
        trials,
        json!({
            "kind": "favor_s",
            "d": d,
            "m": kbar.rows,
            "n": kbar.cols,
            "cell": [u, n],
            "alpha": alpha,
            "bounds": bounds.as_array(),
        }),
        seed,
    ))
}

/// Empirical moments of `‖X ⊙ Y‖²` for a fixed unit `X` and uniform unit `Y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HadamardNormStats {
    pub mean_sq_norm: f64,
    /// Empirical `P{‖X⊙Y‖² ≤ (1+β)/D}`.
    pub markov_lhs: f64,
}

const CHUNK: u64 = 1024;

/// Samples `‖X ⊙ Y‖²` where `X` is a unit vector drawn once from the seed and
/// `Y` is uniform on the sphere per trial. The float mean is reduced over
/// fixed-size chunks in order, so it is bit-stable for any thread count.
pub fn hadamard_norm_stats(d: usize, trials: u64, seed: u64, beta: f64) -> Result<HadamardNormStats> {
    let (sum, hits) = hadamard_norm_samples(d, trials, seed, beta)?;
    Ok(HadamardNormStats {
        mean_sq_norm: sum / trials as f64,
        markov_lhs: hits as f64 / trials as f64,
    })
}

/// Sum of `‖X⊙Y‖²` and the count of samples at or below `(1+β)/D`.
fn hadamard_norm_samples(d: usize, trials: u64, seed: u64, beta: f64) -> Result<(f64, u64)> {
    check_trials(trials)?;
    if d == 0 {
        return Err(Error::InvalidDimension("D must be ≥ 1".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter("β must be > 0".into()));
    }
    let x = rng::unit_sphere(&mut rng::stream(seed, u64::MAX), d);
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let threshold = (1.0 + beta) / d as f64;
    let chunks = trials.div_ceil(CHUNK);
    let partial: Vec<(f64, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sum = 0.0;
            let mut hits = 0;
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let y = rng::unit_sphere(&mut rng::stream(seed, t), d);
                let z: f64 = x2.iter().zip(&y).map(|(a, b)| a * b * b).sum();
                sum += z;
                hits += (z <= threshold) as u64;
            }
            (sum, hits)
        })
        .collect();
    Ok(partial
        .iter()
        .fold((0.0, 0), |(s, h), (ps, ph)| (s + ps, h + ph)))
}

/// The Markov corollary as a bound report: the event `‖X⊙Y‖² > (1+β)/D` has
/// probability at most `1/(1+β)`.
pub fn estimate_hadamard_markov(d: usize, beta: f64, trials: u64, seed: u64) -> Result<BoundReport> {
    let (sum, hits) = hadamard_norm_samples(d, trials, seed, beta)?;
    let violations = trials - hits;
    Ok(BoundReport::new(
        1.0 / (1.0 + beta),
        violations,
        trials,
        json!({"kind": "hadamard_markov", "d": d, "beta": beta, "mean_sq_norm": sum / trials as f64}),
        seed,
    ))
}

/// Which bound/estimator pair a sweep exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Hoeffding,
    Cleanup,
    FavorS,
    HadamardMarkov,
}

impl std::str::FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hoeffding" => Ok(Self::Hoeffding),
            "cleanup" => Ok(Self::Cleanup),
            "favor-s" | "favor_s" => Ok(Self::FavorS),
            "hadamard" | "hadamard-markov" | "hadamard_markov" => Ok(Self::HadamardMarkov),
            other => Err(Error::InvalidParameter(format!("unknown bound kind {other:?}"))),
        }
    }
}

/// Fixed test vectors for the cleanup sweep: four unit values with `Ω = x_0`.
pub fn cleanup_instance(d: usize, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut s = rng::stream(seed, u64::MAX - 1);
    let values: Vec<Vec<f64>> = (0..n).map(|_| rng::unit_sphere(&mut s, d)).collect();
    let omega = values[0].clone();
    (values, omega)
}

/// Fixed unit key/query grids whose intended cell (0, 0) has cosine 0.6.
pub fn favor_s_instance(d: usize, m: usize, n: usize, seed: u64) -> Result<(Grid<Vec<f64>>, Grid<Vec<f64>>)> {
    let mut s = rng::stream(seed, u64::MAX - 2);
    let kbar = Grid::from_fn(m, n, |_, _| rng::unit_sphere(&mut s, d))?;
    let mut qbar = Grid::from_fn(m, n, |_, _| rng::unit_sphere(&mut s, d))?;
    // Replace q̄(0,0) by 0.6·k̄ + 0.8·(unit vector orthogonal to k̄).
    let k0 = kbar.get(0, 0).clone();
    let mut z = rng::unit_sphere(&mut s, d);
    let p = dot(&z, &k0);
    z.iter_mut().zip(&k0).for_each(|(a, b)| *a -= p * b);
    let zn = crate::tensor::norm(&z);
    *qbar.get_mut(0, 0) = k0.iter().zip(&z).map(|(a, b)| 0.6 * a + 0.8 * b / zn).collect();
    Ok((kbar, qbar))
}

/// Runs one estimator per `(D, α)` pair. `α` is ignored by the Hadamard kind,
/// which uses `β = α`.
pub fn sweep(kind: BoundKind, dims: &[usize], alphas: &[f64], trials: u64, seed: u64) -> Result<Vec<BoundReport>> {
    let mut out = Vec::with_capacity(dims.len() * alphas.len());
    for &d in dims {
        for &alpha in alphas {
            let cfg_seed = rng::derive_seed(seed, d as u64);
            let report = match kind {
                BoundKind::Hoeffding => estimate_interference_probability(d, alpha, trials, cfg_seed)?,
                BoundKind::Cleanup => {
                    let (values, omega) = cleanup_instance(d, 4, cfg_seed);
                    estimate_cleanup_distortion(&values, &omega, 0, alpha, trials, cfg_seed)?
                }
                BoundKind::FavorS => {
                    let (kbar, qbar) = favor_s_instance(d, 2, 2, cfg_seed)?;
                    estimate_favor_s_distortion(&kbar, &qbar, 0, 0, alpha, trials, cfg_seed)?
                }
                BoundKind::HadamardMarkov => estimate_hadamard_markov(d, alpha, trials, cfg_seed)?,
            };
            out.push(report);
        }
    }
    Ok(out)
}
