//! The `webxfer` command line: dataset generation, training, evaluation,
//! ablations and embedding export.
//!
//! Every command writes `manifest.json` next to its outputs with the resolved
//! configuration and where each value came from (default, file or flag).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{KeyValueConfig, KeyValues};
use crate::datagen::{generate, load_bags, par_map, save_bags, GenConfig, ProposalBag};
use crate::embedding::{export_embedding, foreground_points};
use crate::error::{Error, Result};
use crate::eval::evaluate_with;
use crate::trainer::{metrics_csv, train_isolated, TrainConfig, TrainMode, TrainState, Trainer};

pub const WEB_FILE: &str = "web.bags";
pub const TARGET_FILE: &str = "target.bags";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "webxfer", version, about = "Zero-annotation detection on synthetic proposal bags")]
pub struct Cli {
    /// Worker threads for generation and ablation runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate web and target bags.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on target bags.
    Eval(EvalArgs),
    /// Train every ablation variant over several seeds.
    Ablate(AblateArgs),
    /// Export a 2-D PCA embedding of foreground proposal features.
    Embed(EmbedArgs),
}

#[derive(Args, Debug)]
pub struct OutArgs {
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding `web.bags` and `target.bags`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (checkpoint is still written).
    #[arg(long)]
    pub stop_after_epoch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    /// NMS threshold; defaults to the checkpoint's setting.
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Score with the detection head even if pseudo-label streams exist.
    #[arg(long)]
    pub wsd_only: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
    /// Training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Subset of variants to run (default: all).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
    /// Number of exported points, split evenly between domains.
    #[arg(long, default_value_t = 400)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// One ablation setting: stream count and adaptation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub st_streams: usize,
    pub da: bool,
    pub fa: bool,
}

pub const VARIANTS: [Variant; 7] = [
    Variant { name: "WSD", st_streams: 0, da: false, fa: false },
    Variant { name: "WSD+DA", st_streams: 0, da: true, fa: true },
    Variant { name: "WSD+DA+ST", st_streams: 1, da: true, fa: true },
    Variant { name: "WSD+DA+2ST", st_streams: 2, da: true, fa: true },
    Variant { name: "WSD+DA+3ST", st_streams: 3, da: true, fa: true },
    Variant { name: "WSD+3ST", st_streams: 3, da: false, fa: false },
    Variant { name: "WSD+DA(w/o.FA)+3ST", st_streams: 3, da: true, fa: false },
];

impl Variant {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            num_st_streams: self.st_streams,
            enable_da: self.da,
            enable_fa: self.fa,
            mode: TrainMode::Simultaneous,
            ..base.clone()
        }
    }
}

/// A resolved config value and its origin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resolved {
    pub key: String,
    pub value: String,
    pub source: &'static str,
}

/// Applies defaults, then the config file, then `--set`/`--seed` flags.
pub fn resolve_config<T: KeyValueConfig>(mut cfg: T, args: &ConfigArgs) -> Result<(T, Vec<Resolved>)> {
    let mut sources: Vec<(String, &'static str)> = Vec::new();
    let mark = |sources: &mut Vec<(String, &'static str)>, key: &str, src: &'static str| {
        sources.retain(|(k, _)| k != key);
        sources.push((key.to_string(), src));
    };
    if let Some(path) = &args.config {
        let kv = KeyValues::read(path)?;
        cfg.apply(&kv, path)?;
        for (k, _, _) in &kv.entries {
            mark(&mut sources, k, "file");
        }
    }
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
        mark(&mut sources, k.trim(), "flag");
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
        mark(&mut sources, "seed", "flag");
    }
    cfg.validate()?;
    let resolved = cfg
        .to_pairs()
        .into_iter()
        .map(|(k, v)| Resolved {
            source: sources
                .iter()
                .find(|(s, _)| s == k)
                .map(|(_, src)| *src)
                .unwrap_or("default"),
            key: k.to_string(),
            value: v,
        })
        .collect();
    Ok((cfg, resolved))
}

fn resolved_json(resolved: &[Resolved]) -> Value {
    Value::Array(
        resolved
            .iter()
            .map(|r| json!({ "key": r.key, "value": r.value, "source": r.source }))
            .collect(),
    )
}

/// Creates `dir` and refuses to clobber any of `files` unless `force`.
pub fn prepare_out(out: &OutArgs, files: &[&str]) -> Result<()> {
    std::fs::create_dir_all(&out.out).map_err(|e| Error::io(&out.out, e))?;
    if !out.force {
        for f in files {
            let p = out.out.join(f);
            if p.exists() {
                return Err(Error::Overwrite(p));
            }
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, manifest: Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Input(e.to_string()))?;
    write_text(&dir.join(MANIFEST_FILE), &(text + "\n"))
}

fn load_dataset(dir: &Path) -> Result<(Vec<ProposalBag>, Vec<ProposalBag>)> {
    Ok((load_bags(&dir.join(WEB_FILE))?, load_bags(&dir.join(TARGET_FILE))?))
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let (cfg, resolved) = resolve_config(GenConfig::default(), &args.cfg)?;
    prepare_out(&args.out, &[WEB_FILE, TARGET_FILE, MANIFEST_FILE])?;
    let (web, target) = generate(&cfg)?;
    save_bags(&args.out.out.join(WEB_FILE), &web)?;
    save_bags(&args.out.out.join(TARGET_FILE), &target)?;
    write_manifest(
        &args.out.out,
        json!({
            "command": "gen",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config": resolved_json(&resolved),
            "outputs": [WEB_FILE, TARGET_FILE],
            "counts": { "web": web.len(), "target": target.len() },
        }),
    )
}

/// Outcome of `cmd_train`, for callers that want more than the files.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub routed_to: &'static str,
    pub state: TrainState,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainRun> {
    let (base, resumed) = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            (ck.config.clone(), Some(ck))
        }
        None => (TrainConfig::default(), None),
    };
    let (cfg, resolved) = resolve_config(base, &args.cfg)?;
    prepare_out(&args.out, &[CHECKPOINT_FILE, METRICS_FILE, MANIFEST_FILE])?;
    let (web, target) = load_dataset(&args.data)?;

    let (routed_to, state, extra) = match cfg.mode {
        TrainMode::Isolated => {
            if resumed.is_some() || args.stop_after_epoch.is_some() {
                return Err(Error::Config(
                    "--resume and --stop-after-epoch apply to simultaneous mode only".into(),
                ));
            }
            let out = train_isolated(&web, &target, &cfg)?;
            let stage2_web = out
                .access_log
                .iter()
                .filter(|a| a.stage == 2 && a.domain == crate::datagen::Domain::Web)
                .count();
            let stage2_target = out.access_log.iter().filter(|a| a.stage == 2).count() - stage2_web;
            let state = TrainState {
                velocity: out.params.zeros_like(),
                params: out.params,
                epochs_done: cfg.epochs,
                pairs_done: 0,
                history: out.history,
            };
            let extra = json!({ "stage2_web_accesses": stage2_web, "stage2_target_accesses": stage2_target });
            ("train_isolated", state, extra)
        }
        TrainMode::Simultaneous => {
            let mut trainer = match resumed {
                Some(ck) => {
                    ck.ensure_compatible(&cfg)?;
                    Trainer::resume(&web, &target, cfg.clone(), ck.state)?
                }
                None => Trainer::new(&web, &target, cfg.clone())?,
            };
            let stop = args.stop_after_epoch.unwrap_or(cfg.epochs);
            trainer.run_until(stop)?;
            let finished = trainer.is_finished();
            ("train", trainer.into_state(), json!({ "finished": finished }))
        }
    };

    save_checkpoint(&args.out.out.join(CHECKPOINT_FILE), &cfg, &state)?;
    write_text(&args.out.out.join(METRICS_FILE), &metrics_csv(&state.history))?;
    write_manifest(
        &args.out.out,
        json!({
            "command": "train",
            "routed_to": routed_to,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config": resolved_json(&resolved),
            "data": args.data,
            "resumed_from": args.resume,
            "epochs_done": state.epochs_done,
            "outputs": [CHECKPOINT_FILE, METRICS_FILE],
            "details": extra,
        }),
    )?;
    Ok(TrainRun { routed_to, state })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<crate::eval::EvalReport> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let nms_iou = args.nms_iou.unwrap_or(ck.config.nms_iou);
    if !(nms_iou > 0.0 && nms_iou < 1.0) {
        return Err(Error::Config(format!("nms_iou must lie in (0, 1), got {nms_iou}")));
    }
    prepare_out(&args.out, &["eval.csv", "eval.json", MANIFEST_FILE])?;
    let target = load_bags(&args.data.join(TARGET_FILE))?;
    let report = evaluate_with(&ck.state.params, &target, nms_iou, args.wsd_only)?;
    report.write(&args.out.out.join("eval.csv"), &args.out.out.join("eval.json"))?;
    write_manifest(
        &args.out.out,
        json!({
            "command": "eval",
            "version": env!("CARGO_PKG_VERSION"),
            "checkpoint": args.checkpoint,
            "data": args.data,
            "nms_iou": nms_iou,
            "score_source": report.score_source.to_string(),
            "outputs": ["eval.csv", "eval.json"],
        }),
    )?;
    Ok(report)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: Option<u64>,
    pub map: f64,
    pub corloc: f64,
}

/// Trains every `(variant, seed)` combination; rows come back in variant
/// order, seeds inner, followed by one mean row per variant.
pub fn run_ablation(
    web: &[ProposalBag],
    target: &[ProposalBag],
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (*v, s)))
        .collect();
    let results = par_map(jobs.len(), |i| {
        let (v, seed) = jobs[i];
        let cfg = TrainConfig { seed, ..v.apply(base) };
        let mut trainer = Trainer::new(web, target, cfg.clone())?;
        trainer.run_until(cfg.epochs)?;
        let last = trainer.state().history.last().cloned();
        let last = last.ok_or_else(|| Error::Input("training produced no epochs".into()))?;
        Ok(AblationRow {
            variant: v.name.to_string(),
            seed: Some(seed),
            map: last.map,
            corloc: last.corloc,
        })
    });
    let rows: Vec<AblationRow> = results.into_iter().collect::<Result<_>>()?;
    let mut out = rows.clone();
    for v in variants {
        let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v.name).collect();
        let n = mine.len() as f64;
        out.push(AblationRow {
            variant: v.name.to_string(),
            seed: None,
            map: mine.iter().map(|r| r.map).sum::<f64>() / n,
            corloc: mine.iter().map(|r| r.corloc).sum::<f64>() / n,
        });
    }
    Ok(out)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,map,corloc\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        s.push_str(&format!("{},{seed},{},{}\n", r.variant, r.map, r.corloc));
    }
    s
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let (base, resolved) = resolve_config(TrainConfig::default(), &args.cfg)?;
    if args.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let variants: Vec<Variant> = if args.variants.is_empty() {
        VARIANTS.to_vec()
    } else {
        args.variants
            .iter()
            .map(|name| {
                VARIANTS
                    .iter()
                    .find(|v| v.name == name)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("unknown variant {name:?}")))
            })
            .collect::<Result<_>>()?
    };
    prepare_out(&args.out, &["ablation.csv", MANIFEST_FILE])?;
    let (web, target) = load_dataset(&args.data)?;
    let rows = run_ablation(&web, &target, &base, &variants, &args.seeds)?;
    write_text(&args.out.out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_manifest(
        &args.out.out,
        json!({
            "command": "ablate",
            "version": env!("CARGO_PKG_VERSION"),
            "seeds": args.seeds,
            "variants": variants.iter().map(|v| v.name).collect::<Vec<_>>(),
            "config": resolved_json(&resolved),
            "data": args.data,
            "outputs": ["ablation.csv"],
        }),
    )?;
    Ok(rows)
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    prepare_out(&args.out, &["embedding.csv", MANIFEST_FILE])?;
    let (web, target) = load_dataset(&args.data)?;
    let (feats, labels) = foreground_points(&ck.state.params, &web, &target, args.samples, args.seed)?;
    let proj = export_embedding(&feats, &labels, &args.out.out.join("embedding.csv"))?;
    write_manifest(
        &args.out.out,
        json!({
            "command": "embed",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": args.seed,
            "samples": args.samples,
            "checkpoint": args.checkpoint,
            "data": args.data,
            "explained_variance": proj.variances,
            "degenerate": proj.degenerate,
            "outputs": ["embedding.csv"],
        }),
    )
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    set_threads(cli.threads)?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(a).map(|_| ()),
        Command::Embed(a) => cmd_embed(a),
    }
}
