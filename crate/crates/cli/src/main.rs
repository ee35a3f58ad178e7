use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use winstack::arbitration::{
    arbitrate_recording, arbitrate_sessions, read_recording_decisions, write_recording_decisions, write_session_decisions, ArbitrationMethod,
    SessionMethod,
};
use winstack::corpus::{build_corpus, class_weights, read_manifest, write_manifest, Corpus, InclusionPolicy, Label};
use winstack::dataset::TrainingSet;
use winstack::encodings::{encode, fit_spec, EncodingSpec, MetaInput};
use winstack::evaluation::{evaluate, Granularity};
use winstack::experiment::{run_experiment, run_sweep, ExperimentConfig, MethodSpec, SourceConfig};
use winstack::explain::{attribution_summary, background_sample, explain_all, write_attributions, ShapleyMethod};
use winstack::firststage::{ingest_outputs, simulate, write_outputs, OutputsMap};
use winstack::meta_ann::{grid_search_ann, AnnHyper};
use winstack::meta_gbt::{cv_select_depth, train_gbt, GbtConfig};
use winstack::{io, par, AnnModel, GbtModel, WindowOutputs};

#[derive(Parser)]
#[command(name = "winstack", version, about = "Window-stacking arbitration experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "WINSTACK_WORKERS")]
    workers: Option<usize>,
}

/// Where first-stage outputs come from when a subcommand needs data.
/// Without flags the config source is used.
#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    outputs: Option<PathBuf>,
    /// Inclusion preset for `--manifest`: tuab, autotuab, permissive.
    #[arg(long, default_value = "permissive")]
    policy: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic manifest and first-stage outputs into `--out`.
    Synth,
    /// Fit one meta-model on every admitted recording.
    TrainMeta {
        /// `ann:<encoding>` or `gbt:<encoding>`.
        #[arg(long)]
        method: String,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Apply a baseline or a model file to first-stage outputs.
    Arbitrate {
        /// `mean` or `geomean`; ignored when `--model` is given.
        #[arg(long, default_value = "mean")]
        method: String,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Also write session decisions with this method (`mean`, `geomean`, `none`).
        #[arg(long)]
        stage3: Option<String>,
        #[arg(long)]
        sessions_out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score a decisions table against the manifest's labels.
    Eval {
        #[arg(long)]
        decisions: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Shapley attributions for a tree model.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// Recordings to explain; defaults to the config's explain.instances, or 10.
        #[arg(long)]
        instances: Option<usize>,
        /// Sampled permutations; 0 requests exact enumeration.
        #[arg(long)]
        permutations: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Full pipeline: every method, every repeat, reports and manifest.
    Experiment,
    /// Window length/stride grid of full experiments.
    Sweep,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.common.workers {
        cfg.workers = w;
    }
    let out = cli.common.out.clone();
    let workers = cfg.workers;
    par::with_workers(workers, move || dispatch(cli.command, cfg, out))
}

fn dispatch(command: Command, cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    match command {
        Command::Synth => synth(&cfg, &out.unwrap_or_else(|| "synth".into())),
        Command::TrainMeta { method, data } => train_meta(&cfg, &method, &data, &out.unwrap_or_else(|| "model.json".into())),
        Command::Arbitrate {
            method,
            model,
            stage3,
            sessions_out,
            data,
        } => arbitrate(&cfg, &method, model.as_deref(), stage3.as_deref(), sessions_out, &data, &out.unwrap_or_else(|| "decisions.csv".into())),
        Command::Eval { decisions, data } => eval(&cfg, &decisions, &data, out.as_deref()),
        Command::Explain {
            model,
            instances,
            permutations,
            data,
        } => explain(&cfg, &model, instances, permutations, &data, &out.unwrap_or_else(|| "attributions".into())),
        Command::Experiment => {
            let dir = run_dir(&cfg, out);
            let outcome = run_experiment(&cfg, &dir)?;
            println!("{:<20} {:<10} {:<24} {:>8} {:>8} {:>8}", "method", "level", "subset", "acc", "sens", "spec");
            for row in &outcome.summary {
                println!(
                    "{:<20} {:<10} {:<24} {:>8.4} {:>8} {:>8}",
                    row.method,
                    row.granularity.as_str(),
                    row.subset,
                    row.accuracy_mean,
                    fmt_opt(row.sensitivity_mean),
                    fmt_opt(row.specificity_mean)
                );
            }
            println!("artifacts in {}", outcome.run_dir.display());
            Ok(())
        }
        Command::Sweep => {
            let dir = run_dir(&cfg, out);
            for row in run_sweep(&cfg, &dir)? {
                println!(
                    "L={:<6} S={:<6} {:<20} acc {:.4} ± {:.4}",
                    row.window_length, row.stride, row.method, row.accuracy_mean, row.accuracy_std
                );
            }
            println!("artifacts in {}", dir.display());
            Ok(())
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn run_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn synth(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let SourceConfig::Synthetic(base) = &cfg.source else {
        bail!("`synth` needs a synthetic source in the config");
    };
    let synth = winstack::SynthConfig {
        seed: cfg.seed,
        ..base.clone()
    };
    let data = simulate(&synth, &cfg.windowing)?;
    std::fs::create_dir_all(dir)?;
    write_manifest(&dir.join("manifest.csv"), &data.corpus.to_descriptors())?;
    write_outputs(&dir.join("outputs.csv"), &data.outputs)?;
    let counts = data.corpus.counts();
    println!(
        "{} recordings in {} sessions written to {}",
        data.corpus.n_recordings(),
        counts.sessions,
        dir.display()
    );
    Ok(())
}

/// Corpus plus outputs for every recording that has them.
fn load_data(cfg: &ExperimentConfig, args: &DataArgs) -> Result<(Corpus, OutputsMap)> {
    let (corpus, outputs) = match (&args.manifest, &args.outputs, &cfg.source) {
        (Some(m), Some(o), _) => (
            build_corpus(&cfg.name, &read_manifest(m)?, InclusionPolicy::preset(&args.policy)?)?,
            ingest_outputs(o, &cfg.windowing)?,
        ),
        (None, None, SourceConfig::Files { manifest, outputs, policy }) => (
            build_corpus(&cfg.name, &read_manifest(manifest)?, InclusionPolicy::preset(policy)?)?,
            ingest_outputs(outputs, &cfg.windowing)?,
        ),
        (None, None, SourceConfig::Synthetic(base)) => {
            let data = simulate(
                &winstack::SynthConfig {
                    seed: cfg.seed,
                    ..base.clone()
                },
                &cfg.windowing,
            )?;
            (data.corpus, data.outputs)
        }
        _ => bail!("--manifest and --outputs must be given together"),
    };
    let keep: BTreeSet<String> = corpus
        .recordings()
        .filter(|r| outputs.get(&r.recording_id).is_some_and(|o| !o.is_empty()))
        .map(|r| r.recording_id.clone())
        .collect();
    Ok((corpus.subset(&keep), outputs))
}

fn labelled<'a>(corpus: &'a Corpus, outputs: &'a OutputsMap) -> Vec<(&'a winstack::Recording, &'a WindowOutputs)> {
    corpus.recordings().map(|r| (r, &outputs[&r.recording_id])).collect()
}

fn train_meta(cfg: &ExperimentConfig, method: &str, args: &DataArgs, out: &Path) -> Result<()> {
    let (corpus, outputs) = load_data(cfg, args)?;
    let rows = labelled(&corpus, &outputs);
    let kind = match MethodSpec::parse(method)? {
        MethodSpec::Ann(k) | MethodSpec::Gbt(k) => k,
        _ => bail!("`train-meta` fits `ann:<encoding>` or `gbt:<encoding>`, not `{method}`"),
    };
    let mut spec: EncodingSpec = fit_spec(rows.iter().map(|(_, o)| *o), kind, cfg.encoding.bins);
    spec.max_windows = spec.max_windows.max(cfg.windowing.max_windows());
    spec.pad_value = cfg.encoding.pad_value;
    let inputs = rows.iter().map(|(_, o)| encode(o, &spec)).collect::<winstack::Result<Vec<MetaInput>>>()?;
    let labels: Vec<Label> = rows.iter().map(|(r, _)| r.label).collect();
    let groups: Vec<String> = rows.iter().map(|(r, _)| r.patient_id.clone()).collect();
    let weights = class_weights(&labels)?;
    let set = TrainingSet::new(&inputs, &labels).with_groups(&groups);
    if method.starts_with("ann") {
        let hyper = AnnHyper {
            seed: cfg.seed,
            ..cfg.ann.hyper
        };
        let (model, report) = grid_search_ann(set, &weights, &cfg.ann.grid, &hyper, &spec)?;
        let best = &report.cells[report.best];
        log::info!(
            "selected {} hidden layers x {} ({:?}), validation accuracy {:?}",
            best.hidden_layers,
            best.hidden_width,
            best.activation,
            best.validation_accuracy
        );
        model.save(out)?;
    } else {
        let config = GbtConfig {
            seed: cfg.seed,
            ..cfg.gbt.config.clone()
        };
        let model = if cfg.gbt.cross_validate {
            let cv = cv_select_depth(set, &weights, &config, &spec)?;
            for row in &cv.table {
                log::info!("depth {:>3}: CV accuracy {:.4}", row.depth, row.mean_accuracy);
            }
            log::info!("selected depth {}", cv.best_depth);
            cv.model
        } else {
            train_gbt(set, &weights, &config, spec)?
        };
        model.save(out)?;
    }
    println!("model written to {}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<ArbitrationMethod> {
    match GbtModel::load(path) {
        Ok(m) => Ok(ArbitrationMethod::MetaGbt(Box::new(m))),
        Err(gbt_err) => match AnnModel::load(path) {
            Ok(m) => Ok(ArbitrationMethod::MetaAnn(Box::new(m))),
            Err(ann_err) => bail!("{} is neither a tree model ({gbt_err}) nor a network model ({ann_err})", path.display()),
        },
    }
}

fn arbitrate(
    cfg: &ExperimentConfig,
    method: &str,
    model: Option<&Path>,
    stage3: Option<&str>,
    sessions_out: Option<PathBuf>,
    args: &DataArgs,
    out: &Path,
) -> Result<()> {
    let (corpus, outputs) = load_data(cfg, args)?;
    let method = match model {
        Some(path) => load_model(path)?,
        None => match method {
            "mean" => ArbitrationMethod::Mean,
            "geomean" => ArbitrationMethod::Geomean,
            other => bail!("unknown baseline `{other}`; pass --model for meta-models"),
        },
    };
    let rows = labelled(&corpus, &outputs);
    let decisions = par::try_map(&rows, |(_, o)| arbitrate_recording(o, &method))?;
    write_recording_decisions(out, &decisions)?;
    println!("{} recording decisions ({}) written to {}", decisions.len(), method.name(), out.display());
    if let Some(s3) = stage3 {
        let s3 = SessionMethod::parse(s3)?;
        let by_id: BTreeMap<String, _> = decisions.into_iter().map(|d| (d.recording_id.clone(), d)).collect();
        let sessions = arbitrate_sessions(&corpus, &by_id, s3)?;
        let path = sessions_out.unwrap_or_else(|| out.with_extension("sessions.csv"));
        write_session_decisions(&path, &sessions)?;
        println!("{} session decisions written to {}", sessions.len(), path.display());
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, decisions: &Path, args: &DataArgs, out: Option<&Path>) -> Result<()> {
    let truth: BTreeMap<String, Label> = match &args.manifest {
        Some(m) => read_manifest(m)?.into_iter().map(|d| (d.recording_id, d.label)).collect(),
        None => {
            let (corpus, _) = load_data(cfg, args)?;
            corpus.recordings().map(|r| (r.recording_id.clone(), r.label)).collect()
        }
    };
    let decisions = read_recording_decisions(decisions)?;
    let mut pred = Vec::with_capacity(decisions.len());
    let mut gold = Vec::with_capacity(decisions.len());
    for d in &decisions {
        let Some(&t) = truth.get(&d.recording_id) else {
            bail!("recording {} has no label in the manifest", d.recording_id);
        };
        pred.push(d.label);
        gold.push(t);
    }
    let report = evaluate(&pred, &gold, Granularity::Recording)?;
    println!(
        "n {}  accuracy {:.4}  sensitivity {}  specificity {}",
        report.n,
        report.accuracy,
        fmt_opt(report.sensitivity),
        fmt_opt(report.specificity)
    );
    if let Some(path) = out {
        io::write_json(path, &report)?;
    }
    Ok(())
}

fn explain(
    cfg: &ExperimentConfig,
    model_path: &Path,
    instances: Option<usize>,
    permutations: Option<usize>,
    args: &DataArgs,
    dir: &Path,
) -> Result<()> {
    let model = GbtModel::load(model_path)?;
    let (corpus, outputs) = load_data(cfg, args)?;
    let rows: Vec<(String, MetaInput)> = labelled(&corpus, &outputs)
        .into_iter()
        .map(|(r, o)| Ok((r.recording_id.clone(), encode(o, &model.encoding_spec)?)))
        .collect::<winstack::Result<_>>()?;
    let all: Vec<MetaInput> = rows.iter().map(|(_, x)| x.clone()).collect();
    let background = background_sample(&all, cfg.explain.background, cfg.seed);
    let n = instances.unwrap_or(if cfg.explain.instances > 0 { cfg.explain.instances } else { 10 });
    let chosen: Vec<(String, MetaInput)> = rows.into_iter().take(n).collect();
    let method = match permutations.unwrap_or(cfg.explain.permutations) {
        0 => ShapleyMethod::Exact,
        p => ShapleyMethod::Sampled { permutations: p },
    };
    let attributions = explain_all(&model, &chosen, &background, method, cfg.seed)?;
    std::fs::create_dir_all(dir)?;
    write_attributions(&dir.join("attributions.csv"), &attributions)?;
    let summary = attribution_summary(&attributions)?;
    io::write_json(&dir.join("attribution_summary.json"), &summary)?;
    let mut ranked = summary.positions.clone();
    ranked.sort_by_key(|p| p.rank);
    for p in ranked.iter().take(5) {
        println!("rank {:>2}: position {:>3}  mean |phi| {:.4}", p.rank, p.position, p.mean_abs_phi);
    }
    println!("{} attributions written to {}", attributions.len(), dir.display());
    Ok(())
}
