//! Synthetic classification task, combined loss, plain SGD over superposed
//! channels, finite-difference gradient checks and dynamic-mode evaluation.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{
    dynamic_partition, isometry_loss, isometry_loss_grad, mimoconv_backward, ActivationKind,
    ConvNetConfig, ConvNetGrads, ConvNetParams, ForwardTrace, InferenceMode,
};
use crate::error::{check_len, Error, Result};
use crate::rng;
use crate::tensor::Tensor3;
use crate::vsa::key_orthogonality_loss;

/// Labelled `1×H×W` images: one random template per class plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub sigma: f64,
    pub templates: Vec<Tensor3>,
    pub samples: Vec<Tensor3>,
    pub labels: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(seed: u64, num_classes: usize, samples_per_class: usize, sigma: f64, height: usize, width: usize) -> Result<Self> {
        if num_classes < 2 || samples_per_class == 0 {
            return Err(Error::InvalidParameter("need ≥ 2 classes and ≥ 1 sample per class".into()));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidParameter("σ must be ≥ 0".into()));
        }
        let mut s = rng::stream(seed, 20);
        let hw = height * width;
        let templates = (0..num_classes)
            .map(|_| Tensor3::from_vec(1, height, width, rng::gaussian_vec(&mut s, hw, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::with_capacity(num_classes * samples_per_class);
        let mut labels = Vec::with_capacity(num_classes * samples_per_class);
        for _ in 0..samples_per_class {
            for (c, t) in templates.iter().enumerate() {
                let mut x = t.clone();
                x.data.iter_mut().zip(rng::gaussian_vec(&mut s, hw, sigma)).for_each(|(a, n)| *a += n);
                samples.push(x);
                labels.push(c);
            }
        }
        Ok(Self {
            seed,
            num_classes,
            samples_per_class,
            sigma,
            templates,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per superposition channel per step.
    pub batch_size: usize,
    pub lr: f64,
    /// Isometry coefficient.
    pub gamma: f64,
    /// Key orthogonality coefficient.
    pub mu: f64,
    pub channels: usize,
    pub seed: u64,
    pub classes: usize,
    pub samples_per_class: usize,
    pub sigma: f64,
    /// Probability that a step is a fast-mode step; the rest replicate one
    /// input over every channel.
    pub fast_fraction: f64,
    /// Steps between metric records (a final record is always written).
    pub eval_every: usize,
    pub dim: usize,
    pub blocks: usize,
    pub activation: ActivationKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 0.05,
            gamma: 1e-4,
            mu: 0.1,
            channels: 2,
            seed: 0,
            classes: 4,
            samples_per_class: 16,
            sigma: 0.1,
            fast_fraction: 0.8,
            eval_every: 100,
            dim: 64,
            blocks: 3,
            activation: ActivationKind::PRelu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("channels", self.channels),
            ("samples_per_class", self.samples_per_class),
            ("eval_every", self.eval_every),
            ("dim", self.dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        if !(self.lr >= 0.0 && self.gamma >= 0.0 && self.mu >= 0.0 && self.sigma >= 0.0) {
            return Err(Error::InvalidParameter("lr, γ, μ and σ must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.fast_fraction) {
            return Err(Error::InvalidParameter("fast_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn net(&self) -> ConvNetConfig {
        ConvNetConfig {
            channels: self.channels,
            dim: self.dim,
            blocks: self.blocks,
            classes: self.classes,
            activation: self.activation,
            ..ConvNetConfig::default()
        }
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        let net = self.net();
        SyntheticTask::new(
            rng::derive_seed(self.seed, 1),
            self.classes,
            self.samples_per_class,
            self.sigma,
            net.height,
            net.width,
        )
    }
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidParameter(format!("label {label} out of range")));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let loss = m + z.ln() - logits[label];
    let mut g: Vec<f64> = logits.iter().map(|v| (v - m).exp() / z).collect();
    g[label] -= 1.0;
    Ok((loss, g))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub isometry: f64,
    pub key_orthogonality: f64,
    pub total: f64,
}

/// Regularizer terms: isometry over every convolution plus the key penalty.
pub fn regularizers(params: &ConvNetParams, gamma: f64, mu: f64) -> Result<(f64, f64)> {
    let mut iso = isometry_loss(&params.first_conv, gamma)?;
    for b in &params.trunk {
        iso += isometry_loss(&b.conv, gamma)?;
    }
    Ok((iso, key_orthogonality_loss(&params.bind_keys, mu)?))
}

/// Mean cross-entropy over channels plus the regularizers.
pub fn total_loss(logits: &[Vec<f64>], labels: &[usize], params: &ConvNetParams, gamma: f64, mu: f64) -> Result<LossBreakdown> {
    check_len(logits.len(), labels.len())?;
    if logits.is_empty() {
        return Err(Error::Empty("total_loss channels"));
    }
    let mut ce = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        ce += cross_entropy(z, y)?.0;
    }
    ce /= logits.len() as f64;
    let (iso, key) = regularizers(params, gamma, mu)?;
    Ok(LossBreakdown {
        cross_entropy: ce,
        isometry: iso,
        key_orthogonality: key,
        total: ce + iso + key,
    })
}

/// Adds the isometry gradients of every convolution to `grads`.
fn add_regularizer_grads(params: &ConvNetParams, gamma: f64, grads: &mut ConvNetGrads) -> Result<()> {
    if gamma == 0.0 {
        return Ok(());
    }
    let g = isometry_loss_grad(&params.first_conv, gamma)?;
    add_into(grads, "first_conv", &g.weights);
    for (l, b) in params.trunk.iter().enumerate() {
        let g = isometry_loss_grad(&b.conv, gamma)?;
        add_into(grads, &format!("trunk.{l}.conv"), &g.weights);
    }
    Ok(())
}

fn add_into(grads: &mut ConvNetGrads, name: &str, g: &[f64]) {
    if let Some(dst) = grads.get_mut(name) {
        dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// Loss and gradient of [`total_loss`] for one channel tuple.
pub fn loss_and_grad(
    inputs: &[Tensor3],
    labels: &[usize],
    params: &ConvNetParams,
    gamma: f64,
    mu: f64,
) -> Result<(LossBreakdown, ConvNetGrads)> {
    let trace = ForwardTrace::run(inputs, params)?;
    let loss = total_loss(&trace.logits, labels, params, gamma, mu)?;
    let n = labels.len() as f64;
    let dl = trace
        .logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| cross_entropy(z, y).map(|(_, g)| g.into_iter().map(|v| v / n).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut grads = mimoconv_backward(params, &trace, &dl)?;
    add_regularizer_grads(params, gamma, &mut grads)?;
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
}

/// Central-difference check of [`loss_and_grad`] on every coordinate.
pub fn grad_check(
    params: &ConvNetParams,
    inputs: &[Tensor3],
    labels: &[usize],
    gamma: f64,
    mu: f64,
    h: f64,
) -> Result<GradCheckReport> {
    grad_check_sampled(params, inputs, labels, gamma, mu, h, usize::MAX)
}

/// As [`grad_check`], visiting at most `per_group` evenly spaced coordinates
/// of each parameter group. Relative errors use `max(|a|, |n|, 1e-8)`.
pub fn grad_check_sampled(
    params: &ConvNetParams,
    inputs: &[Tensor3],
    labels: &[usize],
    gamma: f64,
    mu: f64,
    h: f64,
    per_group: usize,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("step h must be positive".into()));
    }
    let (_, grads) = loss_and_grad(inputs, labels, params, gamma, mu)?;
    let f = |p: &ConvNetParams| -> Result<f64> {
        let logits = crate::conv::mimoconv_forward(inputs, p)?;
        Ok(total_loss(&logits, labels, p, gamma, mu)?.total)
    };
    let mut groups = Vec::new();
    for (gi, (name, analytic)) in grads.groups.iter().enumerate() {
        let len = analytic.len();
        let step = if per_group >= len { 1 } else { len.div_ceil(per_group.max(1)) };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in (0..len).step_by(step) {
            let (mut a, mut b) = (params.clone(), params.clone());
            a.groups_mut()[gi].1[i] += h;
            b.groups_mut()[gi].1[i] -= h;
            let fd = (f(&a)? - f(&b)?) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
        groups.push(GroupError {
            group: name.clone(),
            checked,
            max_rel_error: worst,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { groups, max_rel_error })
}

/// Smallest distance of any trunk pre-activation from its activation's kink.
pub fn kink_margin(params: &ConvNetParams, inputs: &[Tensor3]) -> Result<f64> {
    let trace = ForwardTrace::run(inputs, params)?;
    let mut margin = f64::INFINITY;
    for (z, b) in trace.pre_acts.iter().zip(&params.trunk) {
        let hw = z.spatial();
        for c in 0..z.channels {
            let kink = match b.act.kind {
                ActivationKind::SRelu => b.act.b[c],
                _ => 0.0,
            };
            for v in &z.data[c * hw..(c + 1) * hw] {
                margin = margin.min((v - kink).abs());
            }
        }
    }
    Ok(margin)
}

/// One metric line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Fast-mode training-set accuracy of each channel.
    pub channel_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub final_loss: LossBreakdown,
    pub final_accuracy: Vec<f64>,
    pub fast_steps: usize,
    pub slow_steps: usize,
}

impl TrainMetrics {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ConvNetParams,
    pub task: SyntheticTask,
    pub metrics: TrainMetrics,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fast-mode accuracy of every channel: channel `c` sees sample `(j + c·⌈len/N⌉) mod len`
/// in the `j`-th forward pass, so each channel visits every sample once.
pub fn channel_accuracy(params: &ConvNetParams, task: &SyntheticTask) -> Result<Vec<f64>> {
    let n = params.channels();
    let len = task.len();
    let shift = len.div_ceil(n);
    let hits: Vec<Vec<bool>> = (0..len)
        .into_par_iter()
        .map(|j| {
            let idx: Vec<usize> = (0..n).map(|c| (j + c * shift) % len).collect();
            let inputs: Vec<Tensor3> = idx.iter().map(|&i| task.samples[i].clone()).collect();
            let logits = crate::conv::mimoconv_forward(&inputs, params)?;
            Ok(idx.iter().zip(&logits).map(|(&i, z)| argmax(z) == task.labels[i]).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|c| hits.iter().filter(|h| h[c]).count() as f64 / len as f64)
        .collect())
}

/// One SGD update, `θ ← θ − lr·g`, followed by the pReLU projection.
pub fn sgd_step(params: &mut ConvNetParams, grads: &ConvNetGrads, lr: f64) {
    for ((_, p), (_, g)) in params.groups_mut().into_iter().zip(&grads.groups) {
        p.iter_mut().zip(g).for_each(|(a, b)| *a -= lr * b);
    }
    params.clamp();
}

/// Trains a fresh network on the configured synthetic task.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = cfg.task()?;
    let mut params = ConvNetParams::init(&cfg.net(), rng::derive_seed(cfg.seed, 2))?;
    let mut s = rng::stream(cfg.seed, 30);
    let n = cfg.channels;
    let mut records = Vec::new();
    let (mut fast_steps, mut slow_steps) = (0, 0);
    let mut last = LossBreakdown::default();
    for step in 0..cfg.steps {
        let fast = cfg.fast_fraction >= 1.0 || s.random::<f64>() < cfg.fast_fraction;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx: Vec<usize> = if fast {
                (0..n).map(|_| s.random_range(0..task.len())).collect()
            } else {
                vec![s.random_range(0..task.len()); n]
            };
            batch.push(idx.iter().map(|&i| task.samples[i].clone()).collect::<Vec<_>>());
            labels.push(idx.iter().map(|&i| task.labels[i]).collect::<Vec<_>>());
        }
        if fast {
            fast_steps += 1;
        } else {
            slow_steps += 1;
        }
        let bs = cfg.batch_size as f64;
        let per: Vec<(f64, ConvNetGrads)> = batch
            .par_iter()
            .zip(&labels)
            .map(|(x, y)| {
                let (l, g) = loss_and_grad(x, y, &params, 0.0, 0.0)?;
                Ok((l.cross_entropy, g))
            })
            .collect::<Result<_>>()?;
        let mut grads = ConvNetGrads::zeros_like(&params);
        let mut ce = 0.0;
        for (l, g) in &per {
            ce += l;
            grads.add_assign(g);
        }
        grads.scale(1.0 / bs);
        ce /= bs;
        add_regularizer_grads(&params, cfg.gamma, &mut grads)?;
        let (iso, key) = regularizers(&params, cfg.gamma, cfg.mu)?;
        last = LossBreakdown {
            cross_entropy: ce,
            isometry: iso,
            key_orthogonality: key,
            total: ce + iso + key,
        };
        if !last.total.is_finite() {
            return Err(Error::NonFinite { step });
        }
        sgd_step(&mut params, &grads, cfg.lr);
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            records.push(MetricRecord {
                step: step + 1,
                loss: last,
                channel_accuracy: channel_accuracy(&params, &task)?,
            });
        }
    }
    let final_accuracy = records.last().map(|r| r.channel_accuracy.clone()).unwrap_or_default();
    Ok(TrainOutcome {
        params,
        task,
        metrics: TrainMetrics {
            seed: cfg.seed,
            records,
            final_loss: last,
            final_accuracy,
            fast_steps,
            slow_steps,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracy {
    pub mode: InferenceMode,
    pub inputs_per_pass: usize,
    pub accuracy: f64,
}

/// Accuracy of one parameter set under each channel partition. Samples are
/// taken in order, `mode.inputs(N)` per pass, wrapping at the end.
pub fn dynamic_eval(params: &ConvNetParams, task: &SyntheticTask, modes: &[InferenceMode]) -> Result<Vec<ModeAccuracy>> {
    let n = params.channels();
    let len = task.len();
    modes
        .iter()
        .map(|&mode| {
            let k = mode.inputs(n);
            let assign = mode.assignment(n);
            let passes = len.div_ceil(k);
            let preds: Vec<Vec<(usize, usize)>> = (0..passes)
                .into_par_iter()
                .map(|p| {
                    let idx: Vec<usize> = (0..k).map(|j| (p * k + j) % len).collect();
                    let inputs: Vec<Tensor3> = idx.iter().map(|&i| task.samples[i].clone()).collect();
                    let out = dynamic_partition(&inputs, &assign, params)?;
                    Ok(idx.iter().zip(&out).map(|(&i, z)| (i, argmax(z))).collect())
                })
                .collect::<Result<_>>()?;
            let mut correct = vec![None; len];
            for (i, y) in preds.into_iter().flatten() {
                correct[i].get_or_insert(y == task.labels[i]);
            }
            let hits = correct.iter().filter(|c| **c == Some(true)).count();
            Ok(ModeAccuracy {
                mode,
                inputs_per_pass: k,
                accuracy: hits as f64 / len as f64,
            })
        })
        .collect()
}
