//! Multiply–accumulate accounting for superposed convolutional networks and
//! superposed linear-attention transformers.
//!
//! One MAC is one multiply and one add. Biases, nonlinearities, pooling and
//! normalizing divisions are free. Counts are integers per forward pass; a
//! component shared by several superposed samples carries the number of
//! samples it is amortized over, and only presentation divides.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names accepted by [`preset_names`] consumers.
pub const PRESETS: [&str; 2] = ["mimoconv-cifar100", "mimoformer-text"];

pub fn preset_names() -> &'static [&'static str] {
    &PRESETS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MacUnit {
    #[serde(rename = "MMAC")]
    Mmac,
    #[serde(rename = "GMAC")]
    Gmac,
}

impl MacUnit {
    pub fn scale(self) -> f64 {
        match self {
            MacUnit::Mmac => 1e6,
            MacUnit::Gmac => 1e9,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MacUnit::Mmac => "MMAC",
            MacUnit::Gmac => "GMAC",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacComponent {
    pub name: String,
    /// MACs in one forward pass.
    pub macs: u128,
    /// Samples sharing that pass.
    pub amortized_over: u64,
}

impl MacComponent {
    pub fn per_sample(&self) -> f64 {
        self.macs as f64 / self.amortized_over as f64
    }
}

/// Per-sample cost split into named components; `total` is their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub unit: MacUnit,
    pub components: Vec<MacComponent>,
    /// Per-sample MACs, unscaled.
    pub total: f64,
}

impl MacReport {
    fn new(unit: MacUnit, components: Vec<MacComponent>) -> Self {
        let total = components.iter().map(MacComponent::per_sample).sum();
        MacReport { unit, components, total }
    }

    pub fn component(&self, name: &str) -> Option<&MacComponent> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Per-sample count of `name` in the report's unit.
    pub fn scaled(&self, name: &str) -> Option<f64> {
        self.component(name).map(|c| c.per_sample() / self.unit.scale())
    }

    pub fn scaled_total(&self) -> f64 {
        self.total / self.unit.scale()
    }
}

fn comp(name: &str, macs: u128, amortized_over: u64) -> MacComponent {
    MacComponent { name: name.into(), macs, amortized_over }
}

/// `a.total / b.total`.
pub fn speedup(a: &MacReport, b: &MacReport) -> Result<f64> {
    if a.unit != b.unit {
        return Err(Error::InvalidParameter("reports use different units".into()));
    }
    Ok(a.total / b.total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Main,
    /// Projection on a residual branch; must land on the current main-path shape.
    Shortcut,
}

/// One convolution with zero padding `⌊k/2⌋`; `height`, `width` are its input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub role: LayerRole,
}

impl ConvLayerSpec {
    pub fn main(c_in: usize, c_out: usize, k: usize, stride: usize, (height, width): (usize, usize)) -> Self {
        ConvLayerSpec { c_in, c_out, k, stride, height, width, role: LayerRole::Main }
    }

    pub fn shortcut(c_in: usize, c_out: usize, stride: usize, (height, width): (usize, usize)) -> Self {
        ConvLayerSpec { c_in, c_out, k: 1, stride, height, width, role: LayerRole::Shortcut }
    }

    pub fn output_size(&self) -> (usize, usize) {
        let p = self.k / 2;
        ((self.height + 2 * p - self.k) / self.stride + 1, (self.width + 2 * p - self.k) / self.stride + 1)
    }

    /// `C_i·C_o·k²·H'·W'`.
    pub fn macs(&self) -> u128 {
        let (h, w) = self.output_size();
        [self.c_in, self.c_out, self.k, self.k, h, w].iter().map(|&v| v as u128).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvArchSpec {
    /// Input `(channels, H, W)`.
    pub input: (usize, usize, usize),
    pub first: ConvLayerSpec,
    pub trunk: Vec<ConvLayerSpec>,
    /// Binding dimension `D`, equal to the first layer's output channels.
    pub dim: usize,
    /// Unbinding dimension `D_o`, equal to the trunk's output channels.
    pub unbind_dim: usize,
    pub classes: usize,
    pub channels: usize,
}

impl ConvArchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDimension(m));
        if self.channels == 0 || self.classes == 0 || self.dim == 0 || self.unbind_dim == 0 {
            return bad("channels, classes and dimensions must be positive".into());
        }
        let layers = std::iter::once(&self.first).chain(&self.trunk);
        if let Some(l) = layers.clone().find(|l| l.k % 2 == 0 || l.stride == 0 || l.c_in == 0 || l.c_out == 0) {
            return bad(format!("layer {l:?} needs odd k, positive stride and channels"));
        }
        if self.first.role != LayerRole::Main {
            return bad("first layer cannot be a shortcut".into());
        }
        let (c, h, w) = self.input;
        if (self.first.c_in, self.first.height, self.first.width) != (c, h, w) {
            return bad(format!("first layer input does not match {:?}", self.input));
        }
        if self.first.c_out != self.dim {
            return bad(format!("first layer emits {} channels, binding needs {}", self.first.c_out, self.dim));
        }
        let mut shape = (self.first.c_out, self.first.output_size());
        for l in &self.trunk {
            match l.role {
                LayerRole::Main => {
                    if (l.c_in, (l.height, l.width)) != shape {
                        return bad(format!("trunk layer {l:?} does not follow shape {shape:?}"));
                    }
                    shape = (l.c_out, l.output_size());
                }
                LayerRole::Shortcut => {
                    if (l.c_out, l.output_size()) != shape {
                        return bad(format!("shortcut {l:?} does not land on shape {shape:?}"));
                    }
                }
            }
        }
        if shape.0 != self.unbind_dim {
            return bad(format!("trunk emits {} channels, unbinding needs {}", shape.0, self.unbind_dim));
        }
        Ok(())
    }
}

/// First layer, binding, unbinding and classifier are paid per sample; the
/// trunk runs once for all `N` superposed samples.
pub fn macs_mimoconv(spec: &ConvArchSpec) -> Result<MacReport> {
    spec.validate()?;
    let (h, w) = spec.first.output_size();
    let (d, d_o) = (spec.dim as u128, spec.unbind_dim as u128);
    Ok(MacReport::new(
        MacUnit::Mmac,
        vec![
            comp("first_layer", spec.first.macs(), 1),
            comp("binding", d * d * (h * w) as u128, 1),
            comp("trunk", spec.trunk.iter().map(ConvLayerSpec::macs).sum(), spec.channels as u64),
            comp("unbinding", d_o * d_o, 1),
            comp("classifier", d_o * spec.classes as u128, 1),
        ],
    ))
}

/// A 28-layer, width-10 wide residual network on 32×32×3 images with `D = 64`
/// and 100 classes.
pub fn mimoconv_cifar100(channels: usize) -> ConvArchSpec {
    let mut trunk = Vec::new();
    let (mut c, mut size) = (64, (32, 32));
    for (stage, width) in [160, 320, 640].into_iter().enumerate() {
        for block in 0..4 {
            let stride = if block == 0 && stage > 0 { 2 } else { 1 };
            let a = ConvLayerSpec::main(c, width, 3, stride, size);
            let b = ConvLayerSpec::main(width, width, 3, 1, a.output_size());
            trunk.push(a);
            trunk.push(b);
            if block == 0 {
                trunk.push(ConvLayerSpec::shortcut(c, width, stride, size));
            }
            c = width;
            size = b.output_size();
        }
    }
    ConvArchSpec {
        input: (3, 32, 32),
        first: ConvLayerSpec::main(3, 64, 3, 1, (32, 32)),
        trunk,
        dim: 64,
        unbind_dim: 640,
        classes: 100,
        channels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformerMode {
    /// Softmax attention.
    Baseline,
    /// Linear attention with positive random features, one sample per pass.
    Performer,
    /// Superposed attention; projections and MLPs per sample.
    AttOnly,
    /// Superposed attention and MLPs.
    AttMlp,
}

impl TransformerMode {
    pub fn name(self) -> &'static str {
        match self {
            TransformerMode::Baseline => "baseline",
            TransformerMode::Performer => "performer",
            TransformerMode::AttOnly => "att",
            TransformerMode::AttMlp => "att+mlp",
        }
    }

    fn superposed(self) -> bool {
        matches!(self, TransformerMode::AttOnly | TransformerMode::AttMlp)
    }
}

impl FromStr for TransformerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TransformerMode::Baseline),
            "performer" => Ok(TransformerMode::Performer),
            "att" | "att-only" => Ok(TransformerMode::AttOnly),
            "att+mlp" | "att-mlp" => Ok(TransformerMode::AttMlp),
            other => Err(Error::InvalidParameter(format!(
                "unknown mode {other:?}; expected baseline, performer, att or att+mlp"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerArchSpec {
    pub seq_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Random features per head.
    pub features: usize,
    /// Side of the square `N×M` channel grid.
    pub grid: usize,
    pub classes: usize,
    pub mode: TransformerMode,
}

impl TransformerArchSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.seq_len, self.layers, self.heads, self.head_dim, self.embed, self.hidden, self.classes];
        if dims.contains(&0) || self.grid == 0 {
            return Err(Error::InvalidDimension("transformer sizes must be positive".into()));
        }
        if self.heads * self.head_dim != self.embed {
            return Err(Error::InvalidDimension(format!(
                "{} heads of width {} do not make E = {}",
                self.heads, self.head_dim, self.embed
            )));
        }
        if self.mode != TransformerMode::Baseline && self.features == 0 {
            return Err(Error::InvalidDimension("linear attention needs R > 0".into()));
        }
        if !self.mode.superposed() && self.grid != 1 {
            return Err(Error::InvalidParameter(format!("{} mode has no channel grid", self.mode.name())));
        }
        Ok(())
    }
}

/// Per-sample GMAC breakdown into projections, attention, bind/unbind, MLPs and readout.
///
/// Projections are the Q, K, V maps with bias, `(3E² + E)·L` per layer.
/// Baseline attention is `QKᵀ`, `AV` and the output map, `2L²E + LE²`.
/// Linear attention per head and token spends `DR + R` on each feature map,
/// `DR` to accumulate `φ(k)vᵀ`, `R` to accumulate `φ(k)`, `DR` to read it with
/// `φ(q)` and `R` for the normalizer; the output map is `E²`. On an `N×N`
/// grid a pass builds `N` key and `N` query feature maps and `N` key
/// summaries shared by all `N²` samples. Without superposed MLPs every
/// sample needs its own normalizer and output map; with them only the `N`
/// row sums do, and the MLP runs once per grid column.
pub fn macs_mimoformer(spec: &TransformerArchSpec) -> Result<MacReport> {
    spec.validate()?;
    let l = spec.seq_len as u128;
    let layers = spec.layers as u128;
    let (e, dh, heads, hidden) = (spec.embed as u128, spec.head_dim as u128, spec.heads as u128, spec.hidden as u128);
    let r = spec.features as u128;
    let n = spec.grid as u128;
    let samples = (n * n) as u64;

    let projections = (3 * e * e + e) * l * layers;
    let mlp = (2 * e * hidden + e) * l * layers;
    let readout = e * hidden + hidden * spec.classes as u128;

    let linear_attention = |channels: u128, outputs: u128| {
        let features = 2 * channels * (dh * r + r);
        let accumulate = channels * (dh * r + r);
        let read = channels * dh * r;
        let normalizer = outputs * r;
        (heads * (features + accumulate + read + normalizer) + outputs * e * e) * l * layers
    };

    let components = match spec.mode {
        TransformerMode::Baseline => vec![
            comp("projections", projections, 1),
            comp("attention", (2 * l * l * e + l * e * e) * layers, 1),
            comp("bind_unbind", 0, 1),
            comp("mlp", mlp, 1),
            comp("readout", readout, 1),
        ],
        TransformerMode::Performer => vec![
            comp("projections", projections, 1),
            comp("attention", linear_attention(1, 1), 1),
            comp("bind_unbind", 0, 1),
            comp("mlp", mlp, 1),
            comp("readout", readout, 1),
        ],
        TransformerMode::AttOnly => vec![
            comp("projections", projections, 1),
            comp("attention", linear_attention(n, n * n), samples),
            comp("bind_unbind", 4 * l * e * layers, 1),
            comp("mlp", mlp, 1),
            comp("readout", readout, 1),
        ],
        TransformerMode::AttMlp => vec![
            comp("projections", projections, 1),
            comp("attention", linear_attention(n, n), samples),
            comp("bind_unbind", 5 * l * e * layers, 1),
            comp("mlp", mlp, n as u64),
            comp("readout", readout, 1),
        ],
    };
    Ok(MacReport::new(MacUnit::Gmac, components))
}

/// Six layers, eight 64-wide heads, `E = 512`, hidden width 2048, `R = 256`,
/// sequences of 4096 tokens and two classes.
pub fn mimoformer_text(mode: TransformerMode, grid: usize) -> TransformerArchSpec {
    TransformerArchSpec {
        seq_len: 4096,
        layers: 6,
        heads: 8,
        head_dim: 64,
        embed: 512,
        hidden: 2048,
        features: 256,
        grid,
        classes: 2,
        mode,
    }
}

fn format_value(v: f64) -> String {
    if v != 0.0 && v.abs() < 0.1 {
        format!("{v:.3}")
    } else {
        format!("{v:.2}")
    }
}

/// Aligned table with one row per labelled report and one column per component.
pub fn format_table(rows: &[(String, MacReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut header: Vec<String> = vec!["config".into()];
    header.extend(first.components.iter().map(|c| c.name.clone()));
    header.push("total".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, rep)| {
            let mut row = vec![label.clone()];
            row.extend(rep.components.iter().map(|c| format_value(c.per_sample() / rep.unit.scale())));
            row.push(format_value(rep.scaled_total()));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| std::iter::once(&header).chain(&body).map(|r| r.get(i).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut out = format!("per-sample {}\n", first.unit.label());
    for row in std::iter::once(&header).chain(&body) {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
