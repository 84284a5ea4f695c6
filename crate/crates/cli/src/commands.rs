//! Subcommand bodies.

use std::path::Path;

use serde::Serialize;
use serde_json::json;
use superpose::attention::fidelity::{favor_r_sweep, favor_s_d_sweep, relu_kernel_check, strictly_decreasing};
use superpose::bounds::{sweep, BoundKind};
use superpose::container::Checkpoint;
use superpose::conv::{ActivationKind, InferenceMode};
use superpose::macs::{
    format_table, macs_mimoconv, macs_mimoformer, mimoconv_cifar100, mimoformer_text, speedup, MacReport,
    TransformerMode, PRESETS,
};
use superpose::train::{dynamic_eval, train_toy, TrainConfig};

use crate::manifest::{resolve_out, tag, write_jsonl, RunManifest};
use crate::{ActivationArg, AttentionArgs, BoundKindArg, BoundsArgs, CheckArg, EvalArgs, Failure, MacsArgs, TrainArgs};

/// Tolerance of the kernel check.
const KERNEL_TOLERANCE: f64 = 0.01;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(Failure::runtime)?;
    for r in rows {
        w.serialize(r).map_err(Failure::runtime)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn bounds(a: &BoundsArgs) -> Result<(), Failure> {
    if a.dims.is_empty() || a.dims.contains(&0) {
        return Err(Failure::Usage("--dims needs positive dimensions".into()));
    }
    let kind = match a.kind {
        BoundKindArg::Hoeffding => BoundKind::Hoeffding,
        BoundKindArg::Cleanup => BoundKind::Cleanup,
        BoundKindArg::FavorS => BoundKind::FavorS,
        BoundKindArg::Hadamard => BoundKind::HadamardMarkov,
    };
    let alphas: Vec<f64> = if !a.alpha.is_empty() {
        a.alpha.clone()
    } else if !a.alpha_deg.is_empty() {
        a.alpha_deg.iter().map(|d| d.to_radians().cos()).collect()
    } else if kind == BoundKind::HadamardMarkov {
        vec![1.0]
    } else {
        vec![70f64.to_radians().cos()]
    };
    let out = resolve_out(a.common.out.as_deref(), "bounds.jsonl")?;
    let reference = RunManifest::reference(&out);
    let reports = sweep(kind, &a.dims, &alphas, a.trials, a.common.seed)?;

    println!("{:>6}  {:>8}  {:>12}  {:>12}  {:>9}", "D", "alpha", "bound", "empirical", "dominated");
    let mut rows = Vec::with_capacity(reports.len());
    let mut failed = 0;
    for r in &reports {
        let alpha = r.config.get("alpha").or_else(|| r.config.get("beta")).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
        let d = r.config.get("d").and_then(|v| v.as_u64()).unwrap_or(0);
        println!("{d:>6}  {alpha:>8.4}  {:>12.6e}  {:>12.6e}  {:>9}", r.bound, r.empirical, r.dominated());
        failed += usize::from(!r.dominated());
        let mut v = serde_json::to_value(r).map_err(Failure::runtime)?;
        v["kind"] = serde_json::to_value(a.kind).map_err(Failure::runtime)?;
        v["dominated"] = r.dominated().into();
        rows.push(tag(v, &reference));
    }
    write_jsonl(&out, &rows)?;
    let mut m = RunManifest::new("bounds", a, a.common.seed, a.common.workers as usize)?;
    m.outputs.push(out.clone());
    m.write(&out)?;
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} of {} cells exceed bound + 3 SE", reports.len())));
    }
    Ok(())
}

#[derive(Serialize)]
struct KernelRow {
    pair: usize,
    rho: f64,
    closed_form: f64,
    monte_carlo: f64,
    relative_error: f64,
    manifest: String,
}

#[derive(Serialize)]
struct SweepCsvRow {
    config: String,
    param: usize,
    seeds: usize,
    median_relative_error: f64,
    manifest: String,
}

pub fn attention(a: &AttentionArgs) -> Result<(), Failure> {
    let seed = a.common.seed;
    let (default_name, check) = match a.check {
        CheckArg::Kernel => ("attention_kernel.csv", "kernel"),
        CheckArg::Favor => ("attention_favor.csv", "favor"),
        CheckArg::FavorS => ("attention_favor_s.csv", "favor-s"),
    };
    let out = resolve_out(a.common.out.as_deref(), default_name)?;
    let reference = RunManifest::reference(&out);
    let verdict = match a.check {
        CheckArg::Kernel => {
            let rows = relu_kernel_check(a.pairs, a.dim, a.trials, seed)?;
            println!("{:>4}  {:>7}  {:>12}  {:>12}  {:>9}", "pair", "rho", "closed", "monte_carlo", "rel_err");
            for (i, r) in rows.iter().enumerate() {
                println!(
                    "{i:>4}  {:>7.3}  {:>12.6e}  {:>12.6e}  {:>9.3e}",
                    r.rho, r.closed_form, r.monte_carlo, r.relative_error
                );
            }
            let worst = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
            let csv: Vec<KernelRow> = rows
                .iter()
                .enumerate()
                .map(|(pair, r)| KernelRow {
                    pair,
                    rho: r.rho,
                    closed_form: r.closed_form,
                    monte_carlo: r.monte_carlo,
                    relative_error: r.relative_error,
                    manifest: reference.clone(),
                })
                .collect();
            write_csv(&out, &csv)?;
            println!("max relative error {worst:.3e} (tolerance {KERNEL_TOLERANCE})");
            (worst < KERNEL_TOLERANCE).then_some(()).ok_or(format!("max relative error {worst:.3e} ≥ {KERNEL_TOLERANCE}"))
        }
        CheckArg::Favor | CheckArg::FavorS => {
            let (rows, config, seeds) = if let CheckArg::Favor = a.check {
                let seeds = a.seeds.unwrap_or(8);
                let rows = favor_r_sweep(&a.features, seeds, a.seq_len, a.dim, seed)?;
                (rows, format!("L={},D={}", a.seq_len, a.dim), seeds)
            } else {
                let seeds = a.seeds.unwrap_or(16);
                let rows = favor_s_d_sweep(&a.dims, a.grid, seeds, a.seq_len, a.r, seed)?;
                (rows, format!("grid={}x{},L={},R={}", a.grid.0, a.grid.1, a.seq_len, a.r), seeds)
            };
            let param = if let CheckArg::Favor = a.check { "R" } else { "D" };
            println!("{param:>6}  {:>14}", "median_rel_err");
            for r in &rows {
                println!("{:>6}  {:>14.6e}", r.param, r.median);
            }
            let csv: Vec<SweepCsvRow> = rows
                .iter()
                .map(|r| SweepCsvRow {
                    config: config.clone(),
                    param: r.param,
                    seeds: seeds as usize,
                    median_relative_error: r.median,
                    manifest: reference.clone(),
                })
                .collect();
            write_csv(&out, &csv)?;
            strictly_decreasing(&rows).then_some(()).ok_or(format!("medians do not strictly decrease in {param}"))
        }
    };
    let mut m = RunManifest::new(&format!("attention {check}"), a, seed, a.common.workers as usize)?;
    m.outputs.push(out.clone());
    m.write(&out)?;
    verdict.map_err(Failure::Verification)
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = TrainConfig {
        steps: a.steps as usize,
        batch_size: a.batch_size,
        lr: a.lr,
        gamma: a.gamma,
        mu: a.mu,
        channels: a.channels as usize,
        seed: a.common.seed,
        classes: a.classes,
        samples_per_class: a.samples_per_class,
        sigma: a.sigma,
        fast_fraction: a.fast_fraction,
        eval_every: a.eval_every,
        dim: a.dim,
        blocks: a.blocks,
        activation: match a.activation {
            ActivationArg::Relu => ActivationKind::Relu,
            ActivationArg::Prelu => ActivationKind::PRelu,
            ActivationArg::Srelu => ActivationKind::SRelu,
        },
    };
    cfg.validate()?;
    let out = resolve_out(a.common.out.as_deref(), "metrics.jsonl")?;
    let checkpoint = match &a.checkpoint {
        Some(p) => resolve_out(Some(p), "")?,
        None => out.with_file_name("checkpoint.bin"),
    };
    let reference = RunManifest::reference(&out);

    let outcome = train_toy(&cfg)?;
    let rows = outcome
        .metrics
        .records
        .iter()
        .map(|r| serde_json::to_value(r).map(|v| tag(v, &reference)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::runtime)?;
    write_jsonl(&out, &rows)?;
    let mut container = Checkpoint { config: cfg.clone(), params: outcome.params }.to_container()?;
    container.meta["manifest"] = reference.clone().into();
    container.save(&checkpoint)?;

    let m = &outcome.metrics;
    println!("steps {} (fast {}, slow {})", cfg.steps, m.fast_steps, m.slow_steps);
    println!("final loss {:.6}", m.final_loss.total);
    for (c, acc) in m.final_accuracy.iter().enumerate() {
        println!("channel {c} accuracy {:.4}", acc);
    }
    let mut manifest = RunManifest::new("train", &cfg, cfg.seed, a.common.workers as usize)?;
    manifest.outputs = vec![out.clone(), checkpoint];
    manifest.write(&out)?;
    Ok(())
}

pub fn eval_dynamic(a: &EvalArgs) -> Result<(), Failure> {
    let modes = a.modes.iter().map(|m| m.parse::<InferenceMode>()).collect::<Result<Vec<_>, _>>()?;
    if modes.is_empty() {
        return Err(Failure::Usage("--modes needs at least one mode".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| match e {
        superpose::Error::Io(e) => Failure::Runtime(format!("{}: {e}", a.checkpoint.display())),
        other => other.into(),
    })?;
    let task = ck.config.task()?;
    let out = resolve_out(a.common.out.as_deref(), "eval_dynamic.jsonl")?;
    let reference = RunManifest::reference(&out);
    let results = dynamic_eval(&ck.params, &task, &modes)?;
    println!("{:>7}  {:>15}  {:>8}", "mode", "inputs_per_pass", "accuracy");
    let mut rows = Vec::with_capacity(results.len());
    for r in &results {
        let name = serde_json::to_value(r.mode).map_err(Failure::runtime)?;
        println!("{:>7}  {:>15}  {:>8.4}", name.as_str().unwrap_or("?"), r.inputs_per_pass, r.accuracy);
        let mut v = serde_json::to_value(r).map_err(Failure::runtime)?;
        v["checkpoint"] = a.checkpoint.display().to_string().into();
        rows.push(tag(v, &reference));
    }
    write_jsonl(&out, &rows)?;
    let mut m = RunManifest::new("eval-dynamic", a, a.common.seed, a.common.workers as usize)?;
    m.outputs.push(out.clone());
    m.write(&out)?;
    Ok(())
}

fn preset_list() -> String {
    PRESETS.join(", ")
}

pub fn macs(a: &MacsArgs) -> Result<(), Failure> {
    let Some(preset) = a.preset.as_deref() else {
        return Err(Failure::Usage(format!("--preset is required; available presets: {}", preset_list())));
    };
    let (reference_report, rows): (MacReport, Vec<(String, MacReport)>) = match preset {
        "mimoconv-cifar100" => {
            if a.mode.is_some() || a.grid.is_some() {
                return Err(Failure::Usage("--mode and --grid apply to mimoformer-text only".into()));
            }
            let channels = if a.channels.is_empty() { vec![1, 2, 4] } else { a.channels.clone() };
            let rows = channels
                .iter()
                .map(|&n| Ok((format!("N={n}"), macs_mimoconv(&mimoconv_cifar100(n))?)))
                .collect::<Result<Vec<_>, superpose::Error>>()?;
            (macs_mimoconv(&mimoconv_cifar100(1))?, rows)
        }
        "mimoformer-text" => {
            if !a.channels.is_empty() {
                return Err(Failure::Usage("--channels applies to mimoconv-cifar100 only; use --grid".into()));
            }
            let mode: TransformerMode = a.mode.as_deref().unwrap_or("att+mlp").parse()?;
            let side = match a.grid {
                Some((m, n)) if m != n => return Err(Failure::Usage(format!("grid {m}x{n} must be square"))),
                Some((m, _)) => m,
                None if matches!(mode, TransformerMode::AttOnly | TransformerMode::AttMlp) => 2,
                None => 1,
            };
            let performer = macs_mimoformer(&mimoformer_text(TransformerMode::Performer, 1))?;
            let mut rows = vec![
                ("baseline".to_string(), macs_mimoformer(&mimoformer_text(TransformerMode::Baseline, 1))?),
                ("performer".to_string(), performer.clone()),
            ];
            if !matches!(mode, TransformerMode::Baseline | TransformerMode::Performer) {
                rows.push((
                    format!("{} {side}x{side}", mode.name()),
                    macs_mimoformer(&mimoformer_text(mode, side))?,
                ));
            }
            (performer, rows)
        }
        other => {
            return Err(Failure::Usage(format!("unknown preset {other:?}; available presets: {}", preset_list())));
        }
    };
    print!("{}", format_table(&rows));
    let out = resolve_out(a.common.out.as_deref(), "macs.json")?;
    let reference = RunManifest::reference(&out);
    let json_rows = rows
        .iter()
        .map(|(label, r)| {
            Ok(json!({
                "label": label,
                "report": r,
                "total_scaled": r.scaled_total(),
                "speedup_vs_reference": speedup(&reference_report, r)?,
            }))
        })
        .collect::<Result<Vec<_>, superpose::Error>>()?;
    let doc = json!({ "preset": preset, "rows": json_rows, "manifest": reference });
    let text = serde_json::to_string_pretty(&doc).map_err(Failure::runtime)?;
    std::fs::write(&out, text + "\n").map_err(io_err(&out))?;
    let mut m = RunManifest::new("macs", a, a.common.seed, a.common.workers as usize)?;
    m.outputs.push(out.clone());
    m.write(&out)?;
    Ok(())
}
