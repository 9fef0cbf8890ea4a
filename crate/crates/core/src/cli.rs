//! `mapex <command> --config <file> [--key value ...] --out <dir>`

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{export_dataset, generate, import_dataset, normalize_dataset, Dataset, MultiModalSample};
use crate::error::{MapexError, Result};
use crate::eval::{
    dropout_sweep, expert_size_sweep, few_shot_eval, finetune, knn_probe, routing_sweep, topk_sweep, write_sweep_csv,
    ProbeResult, SweepContext, PROBE_HEADER,
};
use crate::io::{load_checkpoint, save_checkpoint, CheckpointMeta, RunConfig};
use crate::model::{MapexModel, ModelConfig};
use crate::pretrain::{model_grad_check, pretrain, write_metrics_csv};
use crate::prune::{prune, verify_equivalence, PruneSpec};

pub const COMMANDS: [&str; 8] = ["generate", "pretrain", "prune", "knn", "finetune", "sweep", "fewshot", "verify"];

pub const USAGE: &str = "usage: mapex <generate|pretrain|prune|knn|finetune|sweep|fewshot|verify> \
[--config <file>] [--key value ...] [--out <dir>]";

/// Tolerances used by `verify`.
pub const VERIFY_GRAD_TOL: f64 = 1e-4;
pub const VERIFY_PRUNE_TOL: f64 = 1e-9;

#[derive(Debug, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub overrides: Vec<(String, String)>,
}

pub fn parse_args(args: &[String]) -> std::result::Result<Invocation, String> {
    let command = args.first().ok_or("missing command")?.clone();
    if !COMMANDS.contains(&command.as_str()) {
        return Err(format!("unknown command {command:?}"));
    }
    let mut inv = Invocation { command, config: None, out: PathBuf::from("out"), overrides: Vec::new() };
    let mut rest = args[1..].iter();
    while let Some(flag) = rest.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| format!("expected --key, found {flag:?}"))?;
        let value = rest.next().ok_or_else(|| format!("{flag} needs a value"))?;
        match key {
            "config" => inv.config = Some(PathBuf::from(value)),
            "out" => inv.out = PathBuf::from(value),
            _ => inv.overrides.push((key.to_string(), value.clone())),
        }
    }
    Ok(inv)
}

/// Runs one command; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let inv = match parse_args(args) {
        Ok(inv) => inv,
        Err(msg) => {
            eprintln!("{msg}\n{USAGE}");
            return 2;
        }
    };
    match execute(&inv) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("mapex {}: {e}", inv.command);
            1
        }
    }
}

/// Runs a parsed invocation and returns its one-line summary.
pub fn execute(inv: &Invocation) -> Result<String> {
    let cfg = RunConfig::load(inv.config.as_deref(), &inv.overrides)?;
    fs::create_dir_all(&inv.out)?;
    fs::write(inv.out.join("config.txt"), cfg.echo())?;
    let out = inv.out.as_path();
    match inv.command.as_str() {
        "generate" => cmd_generate(&cfg, out),
        "pretrain" => cmd_pretrain(&cfg, out),
        "prune" => cmd_prune(&cfg, out),
        "knn" => cmd_knn(&cfg, out),
        "finetune" => cmd_finetune(&cfg, out),
        "sweep" => cmd_sweep(&cfg, out),
        "fewshot" => cmd_fewshot(&cfg, out),
        "verify" => cmd_verify(&cfg),
        other => Err(MapexError::config("command", format!("unknown command {other}"))),
    }
}

/// Normalized dataset from `data_dir` when set, else generated from the data keys.
fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let raw = match cfg.get("data_dir") {
        "" => generate(&cfg.data_config())?,
        dir => import_dataset(Path::new(dir))?,
    };
    Ok(normalize_dataset(&raw)?.0)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&str> {
    match cfg.get("checkpoint") {
        "" => Err(MapexError::config("checkpoint", "this command needs --checkpoint <file.mpx>")),
        p => Ok(p),
    }
}

/// The checkpoint named in the config, or a fresh model from the config seed when none is given.
fn model_for_probe(cfg: &RunConfig) -> Result<MapexModel> {
    match cfg.get("checkpoint") {
        "" => MapexModel::new(cfg.model_config(), cfg.u64("seed")),
        p => {
            let (mut model, _) = load_checkpoint(Path::new(p))?;
            model.live_routing |= cfg.flag("live_routing");
            Ok(model)
        }
    }
}

fn probe_modalities(cfg: &RunConfig, model: &MapexModel) -> Vec<usize> {
    match cfg.list("probe_modalities") {
        v if v.is_empty() => model.modality_ids(),
        v => v,
    }
}

fn write_probe_csv(path: &Path, rows: &[ProbeResult]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{PROBE_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = generate(&cfg.data_config())?;
    let dir = out.join("data");
    export_dataset(&data, &dir)?;
    Ok(format!(
        "generate: {} train / {} val / {} test samples, {} modalities -> {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.num_modalities(),
        dir.display()
    ))
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = dataset(cfg)?;
    let seed = cfg.u64("seed");
    let mut model = MapexModel::new(cfg.model_config(), seed)?;
    let pc = cfg.pretrain_config();
    let report = pretrain(&mut model, &data.train, &data.val, &pc)?;
    let path = out.join("model.mpx");
    save_checkpoint(&model, &CheckpointMeta { step: pc.steps, seed }, &path)?;
    let mut w = BufWriter::new(File::create(out.join("metrics.csv"))?);
    write_metrics_csv(&mut w, &report.metrics)?;
    w.flush()?;
    let mut v = BufWriter::new(File::create(out.join("val_curve.csv"))?);
    writeln!(v, "step,val_rec_loss")?;
    for (step, loss) in &report.val_curve {
        writeln!(v, "{step},{loss}")?;
    }
    v.flush()?;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let spread = report.final_spread().into_iter().fold(0.0, f64::max);
    Ok(format!(
        "pretrain: {} steps, val L_rec {} -> {}, max utilization spread {spread:.4}, {} params -> {}",
        pc.steps,
        fmt(report.initial_val()),
        fmt(report.final_val()),
        model.param_count(),
        path.display()
    ))
}

fn cmd_prune(cfg: &RunConfig, out: &Path) -> Result<String> {
    let (full, meta) = load_checkpoint(Path::new(checkpoint_path(cfg)?))?;
    let spec = cfg.prune_spec();
    let pruned = prune(&full, &spec)?;
    let path = out.join("pruned.mpx");
    save_checkpoint(&pruned, &meta, &path)?;
    let kept: Vec<String> = pruned.layout().experts.iter().map(|e| e.len().to_string()).collect();
    Ok(format!(
        "prune: modalities {:?} k={} keeps [{}] experts per layer, {} -> {} params -> {}",
        spec.modalities,
        spec.k,
        kept.join(","),
        full.param_count(),
        pruned.param_count(),
        path.display()
    ))
}

fn cmd_knn(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = dataset(cfg)?;
    let model = model_for_probe(cfg)?;
    let modalities = probe_modalities(cfg, &model);
    let mut r = knn_probe(&model, &data, &modalities, cfg.uint("knn_k"))?;
    r.checkpoint = cfg.get("checkpoint").to_string();
    r.seed = cfg.u64("seed");
    write_probe_csv(&out.join("knn.csv"), std::slice::from_ref(&r))?;
    Ok(format!("knn: k={} modalities {:?} accuracy {:.4}", r.k, r.modalities, r.accuracy))
}

fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = dataset(cfg)?;
    let model = model_for_probe(cfg)?;
    let modalities = probe_modalities(cfg, &model);
    let ft = cfg.finetune_config();
    let outcome = finetune(&model, &data, &modalities, &ft)?;
    let mut r = outcome.result;
    r.checkpoint = cfg.get("checkpoint").to_string();
    write_probe_csv(&out.join("finetune.csv"), std::slice::from_ref(&r))?;
    Ok(format!(
        "finetune: {} head, modalities {:?}, best epoch {}, test accuracy {:.4}",
        if ft.frozen { "frozen-encoder" } else { "full" },
        r.modalities,
        outcome.best_epoch,
        r.accuracy
    ))
}

fn cmd_fewshot(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = dataset(cfg)?;
    let model = model_for_probe(cfg)?;
    let modalities = probe_modalities(cfg, &model);
    let ft = cfg.finetune_config();
    let mut rows = Vec::new();
    for k_shot in cfg.list("k_shots") {
        for seed in cfg.u64_list("sweep_seeds") {
            let mut r = few_shot_eval(&model, &data, &modalities, k_shot, seed, &ft)?;
            r.checkpoint = cfg.get("checkpoint").to_string();
            rows.push(r);
        }
    }
    write_probe_csv(&out.join("fewshot.csv"), &rows)?;
    let means: Vec<String> = cfg
        .list("k_shots")
        .iter()
        .map(|&k| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.k_shot == Some(k)).map(|r| r.accuracy).collect();
            format!("{k}-shot {:.4}", acc.iter().sum::<f64>() / acc.len().max(1) as f64)
        })
        .collect();
    Ok(format!("fewshot: {} runs, mean accuracy {}", rows.len(), means.join(", ")))
}

fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = dataset(cfg)?;
    let ctx = SweepContext {
        dataset: &data,
        model: cfg.model_config(),
        pretrain: cfg.pretrain_config(),
        knn_k: cfg.uint("knn_k"),
        seeds: cfg.u64_list("sweep_seeds"),
    };
    let kind = cfg.get("sweep_kind");
    let rows = match kind {
        "routing" => routing_sweep(&ctx)?,
        "topk" => topk_sweep(&ctx, &cfg.list("sweep_topk"))?,
        "dropout" => dropout_sweep(&ctx)?,
        "expert_size" => {
            let budget = ctx.model.experts * ctx.model.expert_hidden;
            let mut pairs = Vec::new();
            for e in cfg.list("sweep_experts") {
                if e == 0 || budget % e != 0 {
                    return Err(MapexError::config("sweep_experts", format!("{e} does not divide experts·hidden = {budget}")));
                }
                pairs.push((e, budget / e));
            }
            expert_size_sweep(&ctx, &pairs)?
        }
        other => {
            return Err(MapexError::config("sweep_kind", format!("{other:?} is not routing, topk, dropout or expert_size")))
        }
    };
    let path = out.join("sweep.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(format!("sweep: {kind}, {} rows -> {}", rows.len(), path.display()))
}

/// Prune specs exercised by `verify`: single modalities first, then growing modality sets,
/// with `k` cycling through `top_k..=experts` (below `top_k` pruning changes the routing by design).
pub fn verify_specs(config: &ModelConfig, count: usize) -> Vec<PruneSpec> {
    let m = config.num_modalities();
    (0..count)
        .map(|i| {
            let size = 1 + (i / m) % m;
            let modalities: Vec<usize> = (0..size).map(|o| (i + o) % m).collect();
            let k = config.top_k + i % (config.experts - config.top_k + 1);
            PruneSpec::new(&modalities, k)
        })
        .collect()
}

fn cmd_verify(cfg: &RunConfig) -> Result<String> {
    let seed = cfg.u64("seed");
    let tiny = ModelConfig { modalities: cfg.modality_specs(), ..ModelConfig::tiny() };
    let grad = model_grad_check(&tiny, seed, 1e-5, 12)?;
    if !(grad.max_rel_error < VERIFY_GRAD_TOL) {
        return Err(MapexError::Numeric(format!(
            "gradient check failed: relative error {:.3e} at {} [{}]",
            grad.max_rel_error, grad.param, grad.index
        )));
    }

    let model = MapexModel::new(cfg.model_config(), seed)?;
    let data = generate(&cfg.data_config())?;
    let probe: Vec<&MultiModalSample> = data.test.iter().take(cfg.uint("verify_probes")).collect();
    let specs = verify_specs(&model.config, cfg.uint("verify_specs"));
    let mut worst: f64 = 0.0;
    for spec in &specs {
        let pruned = prune(&model, spec)?;
        let diff = verify_equivalence(&model, &pruned, &probe, &spec.modalities)?;
        if !(diff <= VERIFY_PRUNE_TOL) {
            return Err(MapexError::Numeric(format!(
                "pruning equivalence failed for modalities {:?} k={}: max abs diff {diff:.3e}",
                spec.modalities, spec.k
            )));
        }
        worst = worst.max(diff);
    }
    Ok(format!(
        "verify: ok, gradient rel error {:.2e} over {} coordinates, pruning max diff {worst:.2e} over {} specs x {} probes",
        grad.max_rel_error,
        grad.coordinates,
        specs.len(),
        probe.len()
    ))
}
