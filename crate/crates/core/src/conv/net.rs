//! A small superposed convolutional network: per-input first convolution,
//! position-wise binding, a shared residual trunk, pooling, per-channel
//! matrix unbinding and a shared linear classifier.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{activation, activation_backward, conv2d, conv2d_backward, ActivationKind, ActivationParam, ConvKernel};
use crate::error::{check_len, Error, Result};
use crate::rng;
use crate::tensor::{Matrix, Tensor3};
use crate::vsa::{bind_pwhrr, correlation_unbinder, gen_keys, pwhrr_adjoint, KeyKind, KeyVector, UnbindMatrix};

/// Shape hyperparameters for [`ConvNetParams::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetConfig {
    /// Superposition channels `N`.
    pub channels: usize,
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Feature maps `D` at binding (also `D_o` at unbinding).
    pub dim: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub classes: usize,
    pub activation: ActivationKind,
}

impl Default for ConvNetConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            input_channels: 1,
            height: 8,
            width: 8,
            dim: 64,
            blocks: 3,
            kernel: 3,
            classes: 4,
            activation: ActivationKind::PRelu,
        }
    }
}

/// One residual block: `x + act(conv(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub conv: ConvKernel,
    pub act: ActivationParam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetParams {
    pub first_conv: ConvKernel,
    pub trunk: Vec<Block>,
    /// Frozen; one per channel, dimension `first_conv.c_out`.
    pub bind_keys: Vec<KeyVector>,
    pub unbind: Vec<UnbindMatrix>,
    /// `classes × D_o`; logits are `W·y + b`.
    pub classifier: Matrix,
    pub classifier_bias: Vec<f64>,
}

impl ConvNetParams {
    /// Random weights, Gaussian binding keys and correlation unbinders.
    pub fn init(cfg: &ConvNetConfig, seed: u64) -> Result<Self> {
        if cfg.channels == 0 || cfg.classes == 0 || cfg.dim == 0 {
            return Err(Error::InvalidParameter("channels, classes and dim must be positive".into()));
        }
        let mut s = rng::stream(seed, 10);
        let first_conv = ConvKernel::random(&mut s, cfg.dim, cfg.input_channels, cfg.kernel, 1)?;
        let mut trunk = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let mut conv = ConvKernel::random(&mut s, cfg.dim, cfg.dim, cfg.kernel, 1)?;
            // Damp the residual branch so the stack starts near identity.
            let damp = 1.0 / (2.0 * cfg.blocks as f64).sqrt();
            conv.weights.iter_mut().for_each(|w| *w *= damp);
            trunk.push(Block {
                conv,
                act: ActivationParam::init(cfg.activation, cfg.dim),
            });
        }
        let bind_keys = gen_keys(rng::derive_seed(seed, 11), cfg.channels, cfg.dim, KeyKind::Gaussian)?;
        let unbind = bind_keys.iter().map(correlation_unbinder).collect::<Result<Vec<_>>>()?;
        let classifier = Matrix::from_vec(
            cfg.classes,
            cfg.dim,
            rng::gaussian_vec(&mut s, cfg.classes * cfg.dim, 1.0 / (cfg.dim as f64).sqrt()),
        )?;
        let p = Self {
            first_conv,
            trunk,
            bind_keys,
            unbind,
            classifier,
            classifier_bias: vec![0.0; cfg.classes],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.bind_keys.len()
    }

    pub fn classes(&self) -> usize {
        self.classifier.rows
    }

    /// Feature count entering the unbinding matrices.
    pub fn unbind_dim(&self) -> usize {
        self.trunk.last().map_or(self.first_conv.c_out, |b| b.conv.c_out)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.first_conv.c_out;
        if self.bind_keys.is_empty() {
            return Err(Error::Empty("binding keys"));
        }
        for k in &self.bind_keys {
            check_len(d, k.dim())?;
        }
        check_len(self.bind_keys.len(), self.unbind.len())?;
        let mut c = d;
        for (l, b) in self.trunk.iter().enumerate() {
            if b.conv.c_in != c || b.conv.c_out != c || b.conv.stride != 1 {
                return Err(Error::InvalidDimension(format!(
                    "trunk block {l} must map {c} channels to {c} at stride 1 for its residual"
                )));
            }
            check_len(c, b.act.b.len())?;
            c = b.conv.c_out;
        }
        for u in &self.unbind {
            check_len(c, u.dim())?;
        }
        check_len(c, self.classifier.cols)?;
        check_len(self.classifier.rows, self.classifier_bias.len())?;
        Ok(())
    }

    /// Projects pReLU parameters back onto `[−1, 1]`.
    pub fn clamp(&mut self) {
        self.trunk.iter_mut().for_each(|b| b.act.clamp());
    }

    /// Named views of every trainable tensor, in a fixed order.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut g: Vec<(String, &[f64])> = vec![("first_conv".into(), &self.first_conv.weights)];
        for (l, b) in self.trunk.iter().enumerate() {
            g.push((format!("trunk.{l}.conv"), &b.conv.weights));
            g.push((format!("trunk.{l}.act"), &b.act.b));
        }
        for (i, u) in self.unbind.iter().enumerate() {
            g.push((format!("unbind.{i}"), &u.matrix().data));
        }
        g.push(("classifier.weight".into(), &self.classifier.data));
        g.push(("classifier.bias".into(), &self.classifier_bias));
        g
    }

    /// Mutable counterpart of [`groups`](Self::groups), same order.
    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut g: Vec<(String, &mut [f64])> = vec![("first_conv".into(), &mut self.first_conv.weights)];
        for (l, b) in self.trunk.iter_mut().enumerate() {
            g.push((format!("trunk.{l}.conv"), &mut b.conv.weights));
            g.push((format!("trunk.{l}.act"), &mut b.act.b));
        }
        for (i, u) in self.unbind.iter_mut().enumerate() {
            g.push((format!("unbind.{i}"), &mut u.matrix_mut().data));
        }
        g.push(("classifier.weight".into(), &mut self.classifier.data));
        g.push(("classifier.bias".into(), &mut self.classifier_bias));
        g
    }
}

/// Gradients laid out like [`ConvNetParams::groups`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetGrads {
    pub groups: Vec<(String, Vec<f64>)>,
}

impl ConvNetGrads {
    pub fn zeros_like(p: &ConvNetParams) -> Self {
        Self {
            groups: p.groups().into_iter().map(|(n, v)| (n, vec![0.0; v.len()])).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ConvNetGrads) {
        for ((_, a), (_, b)) in self.groups.iter_mut().zip(&other.groups) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, g) in &mut self.groups {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.groups.iter_mut().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Vec<Tensor3>,
    /// Input of each trunk block; the last entry is the trunk output.
    pub block_inputs: Vec<Tensor3>,
    /// `conv(x)` of each block, before the activation.
    pub pre_acts: Vec<Tensor3>,
    pub pooled: Vec<f64>,
    pub unbound: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn run(inputs: &[Tensor3], params: &ConvNetParams) -> Result<Self> {
        params.validate()?;
        check_len(params.channels(), inputs.len())?;
        let mut s: Option<Tensor3> = None;
        for (x, key) in inputs.iter().zip(&params.bind_keys) {
            let bound = bind_pwhrr(key, &conv2d(x, &params.first_conv)?)?;
            match s.as_mut() {
                None => s = Some(bound),
                Some(acc) => acc.add_assign(&bound)?,
            }
        }
        let mut x = s.expect("at least one channel");
        let mut block_inputs = Vec::with_capacity(params.trunk.len() + 1);
        let mut pre_acts = Vec::with_capacity(params.trunk.len());
        for b in &params.trunk {
            let z = conv2d(&x, &b.conv)?;
            let mut next = activation(&z, &b.act)?;
            next.add_assign(&x)?;
            block_inputs.push(x);
            pre_acts.push(z);
            x = next;
        }
        let hw = x.spatial() as f64;
        let pooled: Vec<f64> = (0..x.channels)
            .map(|c| x.data[c * x.spatial()..(c + 1) * x.spatial()].iter().sum::<f64>() / hw)
            .collect();
        block_inputs.push(x);
        let mut unbound = Vec::with_capacity(inputs.len());
        let mut logits = Vec::with_capacity(inputs.len());
        for u in &params.unbind {
            let y = u.matrix().matvec(&pooled)?;
            let mut z = params.classifier.matvec(&y)?;
            z.iter_mut().zip(&params.classifier_bias).for_each(|(a, b)| *a += b);
            unbound.push(y);
            logits.push(z);
        }
        Ok(Self {
            inputs: inputs.to_vec(),
            block_inputs,
            pre_acts,
            pooled,
            unbound,
            logits,
        })
    }
}

/// Runs the network on exactly `N` inputs and returns one logit vector per channel.
pub fn mimoconv_forward(inputs: &[Tensor3], params: &ConvNetParams) -> Result<Vec<Vec<f64>>> {
    Ok(ForwardTrace::run(inputs, params)?.logits)
}

/// Gradient of `Σ_i ⟨dlogits[i], logits[i]⟩` with respect to every trainable group.
pub fn mimoconv_backward(params: &ConvNetParams, trace: &ForwardTrace, dlogits: &[Vec<f64>]) -> Result<ConvNetGrads> {
    check_len(params.channels(), dlogits.len())?;
    let mut grads = ConvNetGrads::zeros_like(params);
    let dout = params.unbind_dim();
    let mut dpooled = vec![0.0; dout];
    for (i, dz) in dlogits.iter().enumerate() {
        check_len(params.classes(), dz.len())?;
        let y = &trace.unbound[i];
        {
            let gw = grads.get_mut("classifier.weight").expect("group");
            for (r, dzr) in dz.iter().enumerate() {
                for (c, yc) in y.iter().enumerate() {
                    gw[r * dout + c] += dzr * yc;
                }
            }
        }
        grads
            .get_mut("classifier.bias")
            .expect("group")
            .iter_mut()
            .zip(dz)
            .for_each(|(a, b)| *a += b);
        let dy = params.classifier.matvec_t(dz)?;
        {
            let gu = grads.get_mut(&format!("unbind.{i}")).expect("group");
            for (r, dyr) in dy.iter().enumerate() {
                for (c, pc) in trace.pooled.iter().enumerate() {
                    gu[r * dout + c] += dyr * pc;
                }
            }
        }
        let dp = params.unbind[i].matrix().matvec_t(&dy)?;
        dpooled.iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
    }

    let last = trace.block_inputs.last().expect("trunk output");
    let hw = last.spatial();
    let mut dx = Tensor3::zeros(last.channels, last.height, last.width);
    for (c, g) in dpooled.iter().enumerate() {
        dx.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = g / hw as f64);
    }
    for (l, b) in params.trunk.iter().enumerate().rev() {
        let (dz, db) = activation_backward(&trace.pre_acts[l], &b.act, &dx)?;
        let (dxin, dw) = conv2d_backward(&trace.block_inputs[l], &b.conv, &dz)?;
        *grads.get_mut(&format!("trunk.{l}.conv")).expect("group") = dw.weights;
        *grads.get_mut(&format!("trunk.{l}.act")).expect("group") = db;
        dx.add_assign(&dxin)?;
    }

    let gfirst = grads.get_mut("first_conv").expect("group");
    for (x, key) in trace.inputs.iter().zip(&params.bind_keys) {
        let dfirst = pwhrr_adjoint(key, &dx)?;
        let (_, dw) = conv2d_backward(x, &params.first_conv, &dfirst)?;
        gfirst.iter_mut().zip(&dw.weights).for_each(|(a, b)| *a += b);
    }
    Ok(grads)
}

/// How `N` channels are shared among distinct inputs at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// `N` inputs, one channel each.
    Fast,
    /// `⌈N/2⌉` inputs on consecutive channel pairs.
    Normal,
    /// One input replicated on every channel.
    Slow,
}

impl InferenceMode {
    /// Input index served by each channel.
    pub fn assignment(self, n: usize) -> Vec<usize> {
        match self {
            Self::Fast => (0..n).collect(),
            Self::Normal => (0..n).map(|c| c / 2).collect(),
            Self::Slow => vec![0; n],
        }
    }

    pub fn inputs(self, n: usize) -> usize {
        match self {
            Self::Fast => n,
            Self::Normal => n.div_ceil(2),
            Self::Slow => 1,
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Self::Fast),
            "normal" => Ok(Self::Normal),
            "slow" => Ok(Self::Slow),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode {other:?} (expected fast, normal or slow)"
            ))),
        }
    }
}

/// Places `inputs[assignment[c]]` on channel `c` and averages each input's
/// logits over the channels it occupies.
pub fn dynamic_partition(inputs: &[Tensor3], assignment: &[usize], params: &ConvNetParams) -> Result<Vec<Vec<f64>>> {
    check_len(params.channels(), assignment.len())?;
    if inputs.is_empty() {
        return Err(Error::Empty("dynamic_partition inputs"));
    }
    let mut counts = vec![0usize; inputs.len()];
    for &a in assignment {
        if a >= inputs.len() {
            return Err(Error::InvalidParameter(format!("channel assigned to missing input {a}")));
        }
        counts[a] += 1;
    }
    if let Some(i) = counts.iter().position(|c| *c == 0) {
        return Err(Error::InvalidParameter(format!("input {i} has no channel")));
    }
    let placed: Vec<Tensor3> = assignment.iter().map(|&a| inputs[a].clone()).collect();
    let logits = mimoconv_forward(&placed, params)?;
    let mut out = vec![vec![0.0; params.classes()]; inputs.len()];
    for (&a, z) in assignment.iter().zip(&logits) {
        out[a].iter_mut().zip(z).for_each(|(o, v)| *o += v / counts[a] as f64);
    }
    Ok(out)
}

/// Forward and backward over a batch of channel-input tuples in parallel,
/// summing gradients in index order so the result does not depend on the
/// worker count. `dloss` maps a trace to its logit gradients and loss.
pub fn batch_gradients<F>(batch: &[Vec<Tensor3>], params: &ConvNetParams, dloss: F) -> Result<(f64, ConvNetGrads)>
where
    F: Fn(usize, &ForwardTrace) -> (f64, Vec<Vec<f64>>) + Sync,
{
    let parts: Vec<(f64, ConvNetGrads)> = batch
        .par_iter()
        .enumerate()
        .map(|(b, inputs)| {
            let trace = ForwardTrace::run(inputs, params)?;
            let (loss, dl) = dloss(b, &trace);
            Ok((loss, mimoconv_backward(params, &trace, &dl)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConvNetGrads::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss, total))
}
