use std::fs;
use std::path::Path;

use ldfc::dataset::{evaluate, load_dataset};
use ldfc::ir::{load_model, save_model, ForwardMode, NetworkGraph, Pool};
use ldfc::precondition::{afcle, bias_absorption, fold_buffers, fuse_batchnorm, AfcleConfig};
use ldfc::prune::{baseline_budgets, prune_network, BaselineMethod, PruneConfig};
use ldfc::quantize::{quantize_pipeline, QuantConfig};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::cli::{
    Command, EvalArgs, EvalMode, InspectArgs, PreconditionArgs, PruneArgs, PruneMethod, QuantizeArgs, ReplayArgs,
    StrArgs,
};
use crate::error::{CliError, Result};
use crate::manifest::{FileKind, Recorder, RunManifest};
use crate::{report, sweep};

pub fn execute(command: &Command, rec: &mut Recorder) -> Result<()> {
    match command {
        Command::Inspect(a) => inspect(a, rec),
        Command::Precondition(a) => precondition(a, rec),
        Command::Quantize(a) => quantize(a, rec),
        Command::Prune(a) => prune(a, rec),
        Command::Eval(a) => eval(a, rec),
        Command::Sweep(a) => sweep::run(a, rec),
        Command::Report(a) => report::run(a, rec),
        Command::Replay(a) => replay(a, rec),
    }
}

pub fn load(path: &Path, rec: &mut Recorder) -> Result<NetworkGraph> {
    rec.input(path, FileKind::Model)?;
    rec.time("load", || Ok(load_model(path)?))
}

fn save(graph: &NetworkGraph, path: &Path, rec: &mut Recorder) -> Result<()> {
    rec.time("save", || Ok(save_model(graph, path)?))?;
    rec.output(path, FileKind::Model)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::file(path, e))
}

fn write_report(path: Option<&Path>, kind: &str, body: &impl Serialize, rec: &mut Recorder) -> Result<()> {
    let Some(path) = path else {
        return Ok(());
    };
    let mut value = serde_json::to_value(body).expect("reports serialize");
    if let Value::Object(map) = &mut value {
        map.insert("kind".into(), Value::String(kind.into()));
    }
    write_json(path, &value)?;
    rec.output(path, FileKind::Report)
}

fn pool_name(pool: &Option<Pool>) -> String {
    match pool {
        None => "-".into(),
        Some(Pool::Global) => "global".into(),
        Some(Pool::Avg { kernel, stride }) => format!("avg{}x{}/{}", kernel[0], kernel[1], stride[0]),
    }
}

pub fn summary(graph: &NetworkGraph) -> Result<Value> {
    let shapes = graph.shapes()?;
    let blocks: Vec<Value> = graph
        .blocks
        .iter()
        .zip(&shapes)
        .map(|(b, s)| {
            let [kh, kw] = b.conv.kernel();
            json!({
                "id": b.id,
                "predecessors": b.predecessors.iter().map(|&p| graph.blocks[p].id.clone()).collect::<Vec<_>>(),
                "combine": b.combine,
                "pool": pool_name(&b.pool),
                "kernel": [kh, kw],
                "stride": b.conv.stride,
                "padding": b.conv.padding,
                "groups": b.conv.groups,
                "input": s.conv_input,
                "output": s.output,
                "parameters": b.parameter_count(),
                "weights": b.conv.weight.len(),
                "zero_weights": b.conv.weight.data().iter().filter(|&&w| w == 0.0).count(),
                "batchnorm": b.batchnorm.is_some(),
                "activation": b.activation.name(),
                "buffers": if b.eq.is_identity() { "identity" } else { "non-identity" },
                "weight_quant": b.weight_quant,
                "act_quant": b.act_quant,
                "str": b.str_state,
            })
        })
        .collect();
    Ok(json!({
        "input_shape": graph.input_shape,
        "blocks": blocks,
        "parameters": graph.parameter_count(),
        "weights": graph.weight_count(),
        "sparsity": graph.sparsity(),
        "buffers": if graph.buffers_are_identity() { "identity" } else { "non-identity" },
        "batchnorm_blocks": graph.blocks.iter().filter(|b| b.batchnorm.is_some()).count(),
    }))
}

fn inspect(a: &InspectArgs, rec: &mut Recorder) -> Result<()> {
    let g = load(&a.model, rec)?;
    let s = summary(&g)?;
    if a.json {
        say!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        return Ok(());
    }
    say!("input {:?}, {} blocks", g.input_shape, g.blocks.len());
    say!(
        "{:<12} {:<14} {:<8} {:<10} {:>6} {:<14} {:<14} {:>9} {:<3} {:<9} {:<12}",
        "block",
        "from",
        "pool",
        "conv",
        "groups",
        "input",
        "output",
        "params",
        "bn",
        "act",
        "buffers"
    );
    for (b, v) in g.blocks.iter().zip(s["blocks"].as_array().expect("blocks array")) {
        let [kh, kw] = b.conv.kernel();
        let from = if b.predecessors.is_empty() {
            "input".to_string()
        } else {
            b.predecessors
                .iter()
                .map(|&p| g.blocks[p].id.as_str())
                .collect::<Vec<_>>()
                .join("+")
        };
        say!(
            "{:<12} {:<14} {:<8} {:<10} {:>6} {:<14} {:<14} {:>9} {:<3} {:<9} {:<12}",
            b.id,
            from,
            pool_name(&b.pool),
            format!("{kh}x{kw}/{}", b.conv.stride[0]),
            b.conv.groups,
            format!("{}", v["input"]),
            format!("{}", v["output"]),
            b.parameter_count(),
            if b.batchnorm.is_some() { "yes" } else { "no" },
            b.activation.name(),
            v["buffers"].as_str().unwrap_or("?"),
        );
    }
    say!(
        "parameters {}, weights {}, sparsity {:.4}, buffers {}",
        g.parameter_count(),
        g.weight_count(),
        g.sparsity(),
        s["buffers"].as_str().unwrap_or("?")
    );
    Ok(())
}

fn precondition(a: &PreconditionArgs, rec: &mut Recorder) -> Result<()> {
    let mut g = load(&a.input, rec)?;
    let fused = rec.time("fuse", || Ok(fuse_batchnorm(&mut g)?))?;
    let equalization = if a.no_afcle {
        None
    } else {
        let cfg = AfcleConfig {
            eps_stop: a.eps_stop,
            max_sweeps: a.max_sweeps,
        };
        let r = rec.time("afcle", || Ok(afcle(&mut g, &cfg)?))?;
        info!("equalization: {} sweeps, converged {}", r.sweeps, r.converged);
        Some(r)
    };
    let absorption = if a.absorb {
        Some(rec.time("bias_absorption", || Ok(bias_absorption(&mut g)?))?)
    } else {
        None
    };
    if a.fold {
        rec.time("fold", || {
            fold_buffers(&mut g);
            Ok(())
        })?;
    }
    save(&g, &a.output, rec)?;
    let body = json!({
        "fused_blocks": fused,
        "equalization": equalization,
        "absorption": absorption,
        "folded": a.fold,
        "buffers": if g.buffers_are_identity() { "identity" } else { "non-identity" },
    });
    write_report(a.report.as_deref(), "precondition", &body, rec)?;
    say!(
        "preconditioned {} blocks ({} fused){}",
        g.blocks.len(),
        fused,
        equalization
            .as_ref()
            .map(|r| format!(", {} equalization sweeps", r.sweeps))
            .unwrap_or_default()
    );
    Ok(())
}

fn quantize(a: &QuantizeArgs, rec: &mut Recorder) -> Result<()> {
    let g = load(&a.input, rec)?;
    let cfg = QuantConfig {
        bits: a.bits,
        grid_steps: a.grid_steps,
        calib_batch: a.calib_batch,
        seed: a.seed.unwrap_or(0),
        bias_absorption: !a.no_bias_absorption,
        afcle: AfcleConfig::default(),
    };
    let (q, report) = rec.time("quantize", || Ok(quantize_pipeline(&g, &cfg)?))?;
    for st in &report.stages {
        rec.record(&format!("quantize/{}", st.stage), st.millis);
    }
    save(&q, &a.output, rec)?;
    write_report(a.report.as_deref(), "quantize", &report, rec)?;
    say!(
        "quantized {} blocks to {} bits ({} sites)",
        q.blocks.len(),
        a.bits,
        report.sites.len()
    );
    Ok(())
}

pub fn prune_config(s: &StrArgs, seed: u64) -> PruneConfig {
    PruneConfig {
        s0: s.s0,
        lambda: s.lambda,
        iterations: s.iters,
        batch: s.batch,
        lr: s.lr,
        horizon: s.horizon,
        seed,
        loss_grad_to_s: !s.no_s_loss_grad,
        afcle: AfcleConfig::default(),
    }
}

fn prune(a: &PruneArgs, rec: &mut Recorder) -> Result<()> {
    let g = load(&a.input, rec)?;
    let method = match a.method {
        PruneMethod::Str => None,
        PruneMethod::Global => Some(BaselineMethod::Global),
        PruneMethod::Uniform => Some(BaselineMethod::Uniform),
        PruneMethod::Erk => Some(BaselineMethod::Erk),
    };
    match method {
        None => {
            if a.target_sparsity.is_some() {
                return Err(CliError::Usage(
                    "--target-sparsity applies to the magnitude baselines; STR sparsity follows from --s0 and --lambda"
                        .into(),
                ));
            }
            let cfg = prune_config(&a.str, a.seed.unwrap_or(0));
            let (p, report) = rec.time("prune", || Ok(prune_network(&g, &cfg)?))?;
            for l in &report.layers {
                rec.record(&format!("prune/{}", l.block), l.millis);
            }
            save(&p, &a.output, rec)?;
            write_report(
                a.report.as_deref(),
                "prune",
                &json!({ "method": "str", "str": report }),
                rec,
            )?;
            say!(
                "pruned {} layers: total sparsity {:.4}, mean layer loss {:.3e}",
                report.layers.len(),
                report.total_sparsity,
                report.mean_loss
            );
        }
        Some(m) => {
            let target = a.target_sparsity.ok_or_else(|| {
                CliError::Usage(format!(
                    "--method {} needs --target-sparsity",
                    format!("{m:?}").to_lowercase()
                ))
            })?;
            let (p, report) = rec.time("prune", || Ok(baseline_budgets(&g, target, m)?))?;
            save(&p, &a.output, rec)?;
            write_report(
                a.report.as_deref(),
                "prune",
                &json!({ "method": report.method, "baseline": report }),
                rec,
            )?;
            say!("{} baseline: sparsity {:.4}", report.method, report.achieved_sparsity);
        }
    }
    Ok(())
}

pub fn forward_mode(mode: EvalMode) -> ForwardMode {
    match mode {
        EvalMode::Float => ForwardMode::Float,
        EvalMode::Quant => ForwardMode::QuantSim,
        EvalMode::Str => ForwardMode::Str,
    }
}

fn eval(a: &EvalArgs, rec: &mut Recorder) -> Result<()> {
    let g = load(&a.model, rec)?;
    rec.input(&a.dataset, FileKind::Dataset)?;
    let ds = rec.time("load_dataset", || Ok(load_dataset(&a.dataset)?))?;
    let r = rec.time("evaluate", || Ok(evaluate(&g, &ds, forward_mode(a.mode))?))?;
    let body = json!({ "mode": a.mode, "result": r });
    if a.json {
        say!("{}", serde_json::to_string_pretty(&body).expect("result serializes"));
    } else {
        say!("accuracy {:.4} ({}/{})", r.accuracy, r.correct, r.total);
        for c in &r.per_class {
            say!("  class {:>3}: {:.4} ({}/{})", c.label, c.accuracy, c.correct, c.total);
        }
    }
    if let Some(out) = &a.output {
        write_json(out, &body)?;
        rec.output(out, FileKind::Report)?;
    }
    Ok(())
}

fn replay(a: &ReplayArgs, rec: &mut Recorder) -> Result<()> {
    rec.input(&a.manifest, FileKind::Manifest)?;
    let original = RunManifest::load(&a.manifest)?;
    if matches!(original.invocation, Command::Replay(_)) {
        return Err(CliError::Usage("a replay manifest cannot itself be replayed".into()));
    }
    for input in &original.inputs {
        let now = crate::manifest::FileRecord::of(&input.path, input.kind)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Replay(format!(
                "input {} changed since the recorded run",
                input.path.display()
            )));
        }
    }
    let command = match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
            original.invocation.redirect_outputs(dir)
        }
        None => original.invocation.clone(),
    };
    let mut inner = Recorder::default();
    execute(&command, &mut inner)?;
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for (before, after) in original.outputs.iter().zip(&inner.outputs) {
        if !before.kind.deterministic() {
            continue;
        }
        compared += 1;
        if before.sha256 != after.sha256 {
            mismatches.push(after.path.display().to_string());
        }
    }
    if original.outputs.len() != inner.outputs.len() {
        mismatches.push(format!(
            "{} outputs recorded, {} produced",
            original.outputs.len(),
            inner.outputs.len()
        ));
    }
    rec.timings.extend(inner.timings);
    rec.outputs.extend(inner.outputs);
    if !mismatches.is_empty() {
        return Err(CliError::Replay(mismatches.join(", ")));
    }
    say!(
        "replayed '{}': {compared} deterministic outputs byte-identical",
        original.command
    );
    Ok(())
}
