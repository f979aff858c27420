use std::path::{Path, PathBuf};
use std::time::Instant;

use intlower::engine::report::{input_qp, run_int_dequantized};
use intlower::engine::{compare_paths, exec_fakequant, exec_float, ExecReport, PathKind};
use intlower::export::{export_model, BundleManifest};
use intlower::fixtures::{self, random_inputs};
use intlower::fuse::fuse_graph;
use intlower::ir::{load_model, load_tensors, save_model, save_tensors};
use intlower::quant::calibrate_graph;
use intlower::sparsity::prune_graph;
use intlower::{Graph, Tensor};
use serde_json::{json, Map, Value};
use tracing::info;

use crate::args::{Command, Knobs, SparsityArgs};
use crate::config::{resolve, PipelineConfig};
use crate::error::{io, CliError};

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{}: no such file or directory", path.display())))
    }
}

fn load(path: &Path) -> Result<Graph, CliError> {
    require(path)?;
    Ok(load_model(path)?)
}

fn save(g: &Graph, path: &Path) -> Result<(), CliError> {
    save_model(g, path)?;
    info!(stage = "save", path = %path.display(), nodes = g.nodes.len(), "wrote graph");
    Ok(())
}

fn config(model: &Path, out: &Path, knobs: &Knobs, sparsity: Option<&SparsityArgs>) -> Result<PipelineConfig, CliError> {
    let mut flags = knobs.to_json();
    flags.insert("model".into(), json!(model));
    flags.insert("out".into(), json!(out));
    if let Some(s) = sparsity {
        if s.given() && s.mode.is_none() {
            return Err(CliError::Usage("--n, --m and --sparsity need --mode".into()));
        }
        s.merge_into(&mut flags);
    }
    resolve(flags, knobs.config.as_deref())
}

fn input_shape(g: &Graph) -> Result<Vec<usize>, CliError> {
    let name = match g.inputs.as_slice() {
        [one] => one,
        _ => return Err(CliError::Config(format!("expected one graph input, found {}", g.inputs.len()))),
    };
    g.edge_shape(name)
        .map(<[usize]>::to_vec)
        .ok_or_else(|| CliError::Config(format!("graph input '{name}' has no shape")))
}

fn calibration_data(cfg: &PipelineConfig, g: &Graph) -> Result<Vec<Tensor>, CliError> {
    match &cfg.calib_data {
        Some(dir) => {
            require(dir)?;
            Ok(load_tensors(dir)?)
        }
        None => {
            let mut shape = input_shape(g)?;
            shape[0] = cfg.calib_batch_size;
            Ok(random_inputs(cfg.seed, &shape, cfg.calib_batches))
        }
    }
}

fn verification_data(cfg: &PipelineConfig, g: &Graph) -> Result<Vec<Tensor>, CliError> {
    match &cfg.verify.data {
        Some(dir) => {
            require(dir)?;
            Ok(load_tensors(dir)?)
        }
        None => Ok(random_inputs(cfg.seed.wrapping_add(1), &input_shape(g)?, cfg.verify.samples)),
    }
}

pub fn calibrate(g: &Graph, cfg: &PipelineConfig) -> Result<Graph, CliError> {
    let t = Instant::now();
    let data = calibration_data(cfg, g)?;
    let (annotated, report) = calibrate_graph(g, &data, &cfg.quant)?;
    info!(
        stage = "calibrate",
        batches = report.batches,
        edges = report.annotated_edges,
        weights = report.annotated_weights,
        degenerate = report.degenerate.len(),
        ms = t.elapsed().as_millis() as u64,
        "calibrated"
    );
    for r in &report.rounding {
        info!(stage = "calibrate", node = %r.node, nearest_mse = r.nearest_mse, learned_mse = r.learned_mse, "learned rounding");
    }
    Ok(annotated)
}

pub fn prune(g: &mut Graph, cfg: &PipelineConfig) -> Result<(), CliError> {
    let Some(s) = &cfg.sparsity else { return Ok(()) };
    for layer in prune_graph(g, s)? {
        info!(stage = "prune", node = %layer.node, sparsity = layer.sparsity, "pruned");
    }
    Ok(())
}

pub fn fuse(g: &Graph, cfg: &PipelineConfig) -> Result<Graph, CliError> {
    let t = Instant::now();
    let fused = fuse_graph(g, &cfg.fuse)?;
    info!(stage = "fuse", nodes = fused.nodes.len(), ms = t.elapsed().as_millis() as u64, "lowered");
    Ok(fused)
}

pub fn verify(reference: &Graph, fused: &Graph, cfg: &PipelineConfig) -> Result<ExecReport, CliError> {
    let data = verification_data(cfg, reference)?;
    let report = compare_paths(reference, fused, &data).map_err(|e| CliError::Verify(e.to_string()))?;
    info!(
        stage = "verify",
        samples = report.samples,
        max_layer_lsb = report.max_layer_lsb,
        argmax_agreement = report.argmax_agreement,
        float_ops = report.int_float_ops,
        "compared"
    );
    Ok(report)
}

fn check_report(report: &ExecReport, cfg: &PipelineConfig) -> Result<(), CliError> {
    let v = &cfg.verify;
    if report.within(v.max_lsb, v.min_agreement) {
        return Ok(());
    }
    let worst = report
        .layers
        .iter()
        .max_by(|a, b| a.max_abs_lsb.total_cmp(&b.max_abs_lsb))
        .map(|l| format!(" (worst edge '{}')", l.edge))
        .unwrap_or_default();
    Err(CliError::Verify(format!(
        "max layer divergence {} LSB (limit {}){worst}, argmax agreement {:.4} (limit {}), {} float ops",
        report.max_layer_lsb, v.max_lsb, report.argmax_agreement, v.min_agreement, report.int_float_ops
    )))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    let mut text = serde_json::to_vec_pretty(v).expect("report serializes");
    text.push(b'\n');
    std::fs::write(path, text).map_err(|e| io(path, e))
}

pub fn export(fused: &Graph, cfg: &PipelineConfig, dir: &Path) -> Result<BundleManifest, CliError> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let m = export_model(fused, dir, &cfg.export)?;
    info!(stage = "export", path = %dir.display(), layers = m.layers.len(), "bundle written");
    Ok(m)
}

fn summary(report: &ExecReport) -> Value {
    json!({
        "samples": report.samples,
        "max_layer_lsb": report.max_layer_lsb,
        "argmax_agreement": report.argmax_agreement,
        "float_ops": report.int_float_ops,
    })
}

fn pipeline(cfg: &PipelineConfig) -> Result<(), CliError> {
    let mut g = load(&cfg.model)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| io(&cfg.out, e))?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    if cfg.sparsity.is_some() {
        prune(&mut g, cfg)?;
        save(&g, &cfg.out.join("pruned"))?;
    }
    let annotated = calibrate(&g, cfg)?;
    save(&annotated, &cfg.out.join("annotated"))?;
    let fused = fuse(&annotated, cfg)?;
    save(&fused, &cfg.out.join("fused"))?;
    let report = verify(&annotated, &fused, cfg)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    check_report(&report, cfg)?;
    export(&fused, cfg, &cfg.out.join("bundle"))?;
    println!("{}", json!({"status": "ok", "out": cfg.out, "verify": summary(&report)}));
    Ok(())
}

fn run(model: &Path, input: &Path, out: Option<&PathBuf>) -> Result<(), CliError> {
    let g = load(model)?;
    require(input)?;
    let inputs = load_tensors(input)?;
    let kind = PathKind::of(&g);
    let mut outputs = Vec::with_capacity(inputs.len());
    for x in &inputs {
        let y = match kind {
            PathKind::Float => exec_float(&g, x)?,
            PathKind::FakeQuant => exec_fakequant(&g, x)?,
            PathKind::Int => {
                if input_qp(&g, &g.inputs[0]).is_none() {
                    return Err(CliError::Config("lowered graph has no input quantization".into()));
                }
                let (_, float_ops, mut ys) = run_int_dequantized(&g, x)?;
                if float_ops != 0 {
                    return Err(CliError::Verify(format!("integer path executed {float_ops} float operations")));
                }
                ys.remove(0)
            }
        };
        outputs.push(y);
    }
    let argmax: Vec<Vec<usize>> = outputs.iter().map(Tensor::argmax_rows).collect();
    if let Some(dir) = out {
        save_tensors(dir, &outputs)?;
    }
    println!("{}", json!({"path": kind, "outputs": outputs.len(), "argmax": argmax}));
    Ok(())
}

fn fixture(kind: &str, seed: u64, spread: f64, out: &Path, calib: Option<&PathBuf>, batches: usize, batch: usize) -> Result<(), CliError> {
    let g = match kind {
        "cnn" => fixtures::cnn3(seed),
        "vit" => fixtures::vit_block(seed, fixtures::VitSpec::default()),
        _ => fixtures::gamma_spread_cnn(seed, spread),
    };
    save(&g, out)?;
    if let Some(dir) = calib {
        let mut shape = input_shape(&g)?;
        shape[0] = batch;
        save_tensors(dir, &random_inputs(seed.wrapping_add(1000), &shape, batches))?;
    }
    Ok(())
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Calibrate { model, out, knobs } => {
            let cfg = config(&model, &out, &knobs, None)?;
            let annotated = calibrate(&load(&cfg.model)?, &cfg)?;
            save(&annotated, &cfg.out)
        }
        Command::Prune {
            model,
            out,
            sparsity,
            knobs,
        } => {
            let cfg = config(&model, &out, &knobs, Some(&sparsity))?;
            if cfg.sparsity.is_none() {
                return Err(CliError::Usage("prune needs --mode nm|elementwise or a sparsity section".into()));
            }
            let mut g = load(&cfg.model)?;
            prune(&mut g, &cfg)?;
            save(&g, &cfg.out)
        }
        Command::Fuse { model, out, knobs } => {
            let cfg = config(&model, &out, &knobs, None)?;
            let fused = fuse(&load(&cfg.model)?, &cfg)?;
            save(&fused, &cfg.out)
        }
        Command::Verify {
            reference,
            model,
            report,
            knobs,
        } => {
            let cfg = config(&model, Path::new("."), &knobs, None)?;
            let reference = load(&reference)?;
            let r = verify(&reference, &load(&cfg.model)?, &cfg)?;
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            let outcome = check_report(&r, &cfg);
            let status = if outcome.is_ok() { "ok" } else { "failed" };
            println!("{}", json!({"status": status, "verify": summary(&r)}));
            outcome
        }
        Command::Export { model, out, knobs } => {
            let cfg = config(&model, &out, &knobs, None)?;
            export(&load(&cfg.model)?, &cfg, &cfg.out).map(|_| ())
        }
        Command::Run { model, input, out } => run(&model, &input, out.as_ref()),
        Command::Pipeline {
            model,
            out,
            sparsity,
            knobs,
        } => {
            let mut flags: Map<String, Value> = knobs.to_json();
            if let Some(m) = model {
                flags.insert("model".into(), json!(m));
            }
            if let Some(o) = out {
                flags.insert("out".into(), json!(o));
            }
            if sparsity.given() && sparsity.mode.is_none() {
                return Err(CliError::Usage("--n, --m and --sparsity need --mode".into()));
            }
            sparsity.merge_into(&mut flags);
            let cfg = resolve(flags, knobs.config.as_deref())?;
            info!(stage = "pipeline", model = %cfg.model.display(), out = %cfg.out.display(), seed = cfg.seed, "starting");
            pipeline(&cfg)
        }
        Command::Fixture {
            kind,
            seed,
            spread,
            out,
            calib_out,
            calib_batches,
            calib_batch_size,
        } => fixture(&kind, seed, spread, &out, calib_out.as_ref(), calib_batches, calib_batch_size),
    }
}
