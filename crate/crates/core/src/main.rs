use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use promptmil::data::{generate_synthetic_dataset, load_dataset, write_dataset, Dataset, SyntheticSpec};
use promptmil::harness::{
    dataset_digest, emit_score_map, evaluate_logits, few_shot_split, run_ablation, run_seeds, split_digest, sweep_shots,
    train, Experiment, RunOptions, RunReport, TrainOptions, Variant, CSV_HEADER,
};
use promptmil::model::PromptedMil;
use promptmil::npcgp::predict;
use promptmil::params::ParamStore;
use promptmil::{FewShotSplit, ModelConfig, Scale};

#[derive(Parser)]
#[command(name = "promptmil", version, about = "Few-shot bag classification with prompt tuning and graph propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Model configuration (TOML); unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Clone)]
struct SeedArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Training bags per category.
    #[arg(long, default_value_t = 16)]
    shots: usize,
    /// Optimizer step cap per seed.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Drop this many best and worst seeds from an extra trimmed mean.
    #[arg(long, default_value_t = 0)]
    trim: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-scale dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Generator spec (TOML); unknown keys are rejected.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override one spec key, e.g. `--set context_mode=true`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Zero-shot patch selection for every bag (or the listed ones).
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "bag")]
        bags: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model on a few-shot split drawn with the configured seed.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a trained run directory, or train and evaluate over seeds.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare component toggles on identical splits.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variants: `full`, `baseline`, or `key=value` joined by `+`.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,mhpt=off,isgpt=off,npcgp=off,cross=off,graph=knn-coord,graph=knn-feat,baseline"
        )]
        variants: Vec<String>,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Repeat multi-seed runs over a list of shot counts.
    SweepShots {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "16,8,4,2,1")]
        shot_list: Vec<usize>,
        #[command(flatten)]
        seeds: SeedArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-instance score map of one bag under a trained run.
    Heatmap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        bag: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "low")]
        scale: String,
        /// Category to score; defaults to the predicted one.
        #[arg(long)]
        category: Option<usize>,
        #[arg(long, default_value_t = 16)]
        cell_px: u32,
    },
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: Vec<String>,
    config: Option<&'a ModelConfig>,
    dataset: Option<String>,
    dataset_hash: Option<String>,
    outputs: Vec<String>,
    /// SHA-256 over the output files, in listed order.
    content_hash: String,
    status: String,
    wall_clock_secs: f64,
}

fn parse_pair(raw: &str) -> Result<(&str, &str)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .with_context(|| format!("override `{raw}` is not KEY=VALUE"))
}

fn load_config(args: &ConfigArgs) -> Result<ModelConfig> {
    let mut cfg = match &args.config {
        Some(path) => ModelConfig::load(path)?,
        None => ModelConfig::default(),
    };
    for raw in &args.sets {
        let (k, v) = parse_pair(raw)?;
        cfg.set(k, v)?;
    }
    Ok(cfg.validate()?)
}

/// Applies `key=value` overrides to any serde table, rejecting unknown keys.
fn with_overrides<T: Serialize + DeserializeOwned>(value: &T, sets: &[String]) -> Result<T> {
    let mut table = toml::Table::try_from(value)?;
    for raw in sets {
        let (k, v) = parse_pair(raw)?;
        if !table.contains_key(k) {
            bail!("unknown key `{k}`");
        }
        let parsed = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.to_string(), parsed);
    }
    Ok(table.try_into()?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: Option<&ModelConfig>,
    dataset: Option<(&Path, &Dataset)>,
    outputs: &[PathBuf],
    status: &str,
    start: Instant,
) -> Result<()> {
    let mut h = Sha256::new();
    for p in outputs {
        h.update(fs::read(p).with_context(|| format!("hashing {}", p.display()))?);
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        args: std::env::args().skip(1).collect(),
        config,
        dataset: dataset.map(|(p, _)| p.display().to_string()),
        dataset_hash: dataset.map(|(_, d)| dataset_digest(d)),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        content_hash: hex::encode(h.finalize()),
        status: status.to_string(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join("run_manifest.json"), &manifest)
}

fn write_reports(out: &Path, name: &str, reports: &[RunReport]) -> Result<Vec<PathBuf>> {
    let csv = out.join(format!("{name}.csv"));
    let mut text = format!("{CSV_HEADER}\n");
    for r in reports {
        for row in r.csv_rows() {
            text.push_str(&row);
            text.push('\n');
        }
    }
    fs::write(&csv, text)?;
    let json = out.join(format!("{name}.json"));
    write_json(&json, &reports)?;
    for r in reports {
        println!(
            "{:<24} auc {:.4}±{:.4}  f1 {:.4}±{:.4}  acc {:.4}±{:.4}  ({}/{} seeds){}",
            r.variant,
            r.mean.auc,
            r.std.auc,
            r.mean.f1,
            r.std.f1,
            r.mean.acc,
            r.std.acc,
            r.completed,
            r.requested,
            r.trimmed.map_or(String::new(), |t| format!("  trimmed auc {:.4}", t.auc)),
        );
    }
    Ok(vec![csv, json])
}

fn reports_status(reports: &[RunReport]) -> &'static str {
    if reports.iter().all(|r| r.completed == r.requested) {
        "ok"
    } else {
        "seed failures"
    }
}

fn run_options(s: &SeedArgs) -> RunOptions {
    RunOptions {
        trim: s.trim,
        max_steps: s.max_steps,
    }
}

/// Rebuilds the model of a `train` run directory.
fn load_run(run: &Path, dataset: &Dataset) -> Result<(PromptedMil, FewShotSplit)> {
    let cfg = ModelConfig::load(run.join("config.toml"))?.validate()?;
    let split: FewShotSplit = read_json(&run.join("split.json"))?;
    let store: ParamStore = read_json(&run.join("params.json"))?;
    let mut model = PromptedMil::for_dataset(cfg, dataset)?;
    model.load_params(store)?;
    Ok((model, split))
}

fn execute(cli: Cli) -> Result<&'static str> {
    let start = Instant::now();
    match cli.command {
        Command::GenData { out, spec, sets } => {
            let base = match spec {
                Some(p) => toml::from_str(&fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => SyntheticSpec::default(),
            };
            let spec = with_overrides(&base, &sets)?;
            let (dataset, _) = generate_synthetic_dataset(&spec)?;
            write_dataset(&dataset, &out)?;
            println!("{} bags written to {}", dataset.bags.len(), out.display());
            let outputs = vec![out.join("dataset.json")];
            write_manifest(&out, "gen-data", None, Some((&out, &dataset)), &outputs, "ok", start)?;
            Ok("ok")
        }
        Command::Select { data, out, bags, cfg } => {
            let cfg = load_config(&cfg)?;
            let dataset = load_dataset(&data)?;
            let model = PromptedMil::for_dataset(cfg.clone(), &dataset)?;
            fs::create_dir_all(&out)?;
            let mut text = String::from("bag_id,category,rank,instance,x,y,prob\n");
            for bag in dataset.bags.iter().filter(|b| bags.is_empty() || bags.contains(&b.bag_id)) {
                let prepared = model.prepare(bag)?;
                let coords = &bag.view(Scale::Low)?.coords;
                for (k, ranked) in prepared.selection.per_category.iter().enumerate() {
                    for (rank, &i) in ranked.iter().enumerate() {
                        let [x, y] = coords[i];
                        let p = prepared.selection.probs[[i, k]];
                        text.push_str(&format!("{},{k},{rank},{i},{x},{y},{p}\n", bag.bag_id));
                    }
                }
            }
            let csv = out.join("selection.csv");
            fs::write(&csv, text)?;
            write_manifest(&out, "select", Some(&cfg), Some((&data, &dataset)), &[csv], "ok", start)?;
            Ok("ok")
        }
        Command::Train { data, out, shots, max_steps, cfg } => {
            let cfg = load_config(&cfg)?;
            let dataset = load_dataset(&data)?;
            let split = few_shot_split(&dataset.bags, cfg.num_classes, shots, cfg.seed)?;
            let mut model = PromptedMil::for_dataset(cfg.clone(), &dataset)?;
            let frozen = model.frozen_digest();
            let bags = split
                .train_ids
                .iter()
                .map(|id| model.prepare(dataset.bag(id).expect("split ids come from the dataset")))
                .collect::<promptmil::Result<Vec<_>>>()?;
            let opts = TrainOptions {
                max_steps,
                ..TrainOptions::from_config(&cfg)
            };
            let report = train(&mut model, &bags, &opts)?;
            if model.frozen_digest() != frozen {
                bail!("frozen tower parameters changed during training");
            }
            if let Some(leak) = split.test_ids.iter().find(|id| report.seen_ids.contains(*id)) {
                bail!("test bag `{leak}` reached a gradient step");
            }
            fs::create_dir_all(&out)?;
            let paths = ["params.json", "history.csv", "split.json", "config.toml", "train.json"].map(|f| out.join(f));
            write_json(&paths[0], &model.store)?;
            let mut history = String::from("epoch,mean_loss\n");
            for (e, l) in report.epoch_losses.iter().enumerate() {
                history.push_str(&format!("{e},{l}\n"));
            }
            fs::write(&paths[1], history)?;
            write_json(&paths[2], &split)?;
            fs::write(&paths[3], cfg.to_toml_string())?;
            write_json(&paths[4], &report)?;
            println!(
                "trained {} steps over {} epochs (split {}), final loss {:.6}",
                report.steps,
                report.epochs,
                &split_digest(&split)[..12],
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
            write_manifest(&out, "train", Some(&cfg), Some((&data, &dataset)), &paths, "ok", start)?;
            Ok("ok")
        }
        Command::Eval { data, out, run, seeds, cfg } => {
            let dataset = load_dataset(&data)?;
            fs::create_dir_all(&out)?;
            match run {
                Some(run) => {
                    let (model, split) = load_run(&run, &dataset)?;
                    let bags = split
                        .test_ids
                        .iter()
                        .map(|id| {
                            dataset
                                .bag(id)
                                .ok_or_else(|| anyhow::anyhow!("test bag `{id}` missing from the dataset"))
                                .and_then(|b| Ok(model.prepare(b)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let logits = model.logits(&bags)?;
                    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
                    let metrics = evaluate_logits(&logits, &labels)?;
                    let mut text = String::from("bag_id,label,prediction");
                    for k in 0..model.cfg.num_classes {
                        text.push_str(&format!(",overall_{k}"));
                    }
                    text.push('\n');
                    for (b, t) in bags.iter().zip(&logits) {
                        text.push_str(&format!("{},{},{}", b.bag_id, b.label, predict(t)));
                        for v in &t.overall {
                            text.push_str(&format!(",{v}"));
                        }
                        text.push('\n');
                    }
                    let preds = out.join("predictions.csv");
                    fs::write(&preds, text)?;
                    let mcsv = out.join("metrics.csv");
                    fs::write(&mcsv, format!("auc,f1,acc\n{},{},{}\n", metrics.auc, metrics.f1, metrics.acc))?;
                    println!("auc {:.4}  f1 {:.4}  acc {:.4}", metrics.auc, metrics.f1, metrics.acc);
                    let cfg = model.cfg.clone();
                    write_manifest(&out, "eval", Some(&cfg), Some((&data, &dataset)), &[preds, mcsv], "ok", start)?;
                    Ok("ok")
                }
                None => {
                    let cfg = load_config(&cfg)?;
                    let exp = Experiment::new(&cfg, &dataset)?;
                    let report = run_seeds(&exp, &cfg, "full", &seeds.seeds, seeds.shots, &run_options(&seeds))?;
                    let reports = [report];
                    let outputs = write_reports(&out, "eval", &reports)?;
                    let status = reports_status(&reports);
                    write_manifest(&out, "eval", Some(&cfg), Some((&data, &dataset)), &outputs, status, start)?;
                    Ok(status)
                }
            }
        }
        Command::Ablate { data, out, variants, seeds, cfg } => {
            let cfg = load_config(&cfg)?;
            let variants = variants.iter().map(|v| v.parse()).collect::<promptmil::Result<Vec<Variant>>>()?;
            let dataset = load_dataset(&data)?;
            fs::create_dir_all(&out)?;
            let exp = Experiment::new(&cfg, &dataset)?;
            let reports = run_ablation(&exp, &cfg, &variants, &seeds.seeds, seeds.shots, &run_options(&seeds))?;
            let outputs = write_reports(&out, "ablation", &reports)?;
            let status = reports_status(&reports);
            write_manifest(&out, "ablate", Some(&cfg), Some((&data, &dataset)), &outputs, status, start)?;
            Ok(status)
        }
        Command::SweepShots { data, out, shot_list, seeds, cfg } => {
            let cfg = load_config(&cfg)?;
            let dataset = load_dataset(&data)?;
            fs::create_dir_all(&out)?;
            let exp = Experiment::new(&cfg, &dataset)?;
            let reports = sweep_shots(&exp, &cfg, &shot_list, &seeds.seeds, &run_options(&seeds))?;
            let outputs = write_reports(&out, "sweep", &reports)?;
            let status = reports_status(&reports);
            write_manifest(&out, "sweep-shots", Some(&cfg), Some((&data, &dataset)), &outputs, status, start)?;
            Ok(status)
        }
        Command::Heatmap { data, run, bag, out, scale, category, cell_px } => {
            let dataset = load_dataset(&data)?;
            let (model, _) = load_run(&run, &dataset)?;
            let scale: Scale = scale.parse()?;
            let raw = dataset.bag(&bag).with_context(|| format!("no bag `{bag}` in {}", data.display()))?;
            let prepared = model.prepare(raw)?;
            let category = match category {
                Some(k) => k,
                None => predict(&model.logits(std::slice::from_ref(&prepared))?[0]),
            };
            let (coords, scores) = model.instance_scores(&prepared, scale, category)?;
            fs::create_dir_all(&out)?;
            let png = out.join(format!("{bag}_{scale}_{category}.png"));
            let csv = out.join(format!("{bag}_{scale}_{category}.csv"));
            emit_score_map(&coords, &scores, &png, &csv, cell_px)?;
            println!("score map for {bag} ({scale}, category {category}) written to {}", png.display());
            let cfg = model.cfg.clone();
            write_manifest(&out, "heatmap", Some(&cfg), Some((&data, &dataset)), &[png, csv], "ok", start)?;
            Ok("ok")
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok("ok") => ExitCode::SUCCESS,
        Ok(status) => {
            eprintln!("finished with {status}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
