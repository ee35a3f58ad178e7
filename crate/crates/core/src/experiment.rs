//! Configuration-driven runs: data, split, every arbitration method, all
//! three stages, and a hashed manifest of the artifacts written.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arbitration::{
    arbitrate_recording, arbitrate_sessions, session_to_recording_labels, write_recording_decisions, ArbitrationMethod,
    RecordingDecision, SessionMethod,
};
use crate::corpus::{build_corpus, class_weights, read_manifest, split_by_patient, Corpus, InclusionPolicy, Label, Recording};
use crate::dataset::TrainingSet;
use crate::encodings::{encode, fit_spec, EncodingKind, EncodingSpec, MetaInput};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, evaluate_windows, length_histogram, multi_recording_subset, per_position_accuracy, EvalReport, Granularity,
};
use crate::explain::{attribution_summary, background_sample, explain_all, write_attributions, ShapleyMethod};
use crate::firststage::{bayes_optimal_arbiter, ingest_outputs, simulate, OutputsMap, SynthConfig, WindowOutputs};
use crate::meta_ann::{grid_search_ann, AnnGrid};
use crate::meta_ann::{predict_ann, window_importance, AnnHyper, AnnModel};
use crate::meta_gbt::{cv_select_depth, predict_gbt, train_gbt, GbtConfig, GbtModel};
use crate::windower::WindowingConfig;
use crate::{io, par, rng};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    /// Simulated corpus; the corpus is redrawn for every repeat.
    Synthetic(SynthConfig),
    /// A recording manifest plus first-stage outputs, filtered by an
    /// inclusion preset (`tuab`, `autotuab`, `permissive`).
    Files {
        manifest: PathBuf,
        outputs: PathBuf,
        #[serde(default = "default_policy")]
        policy: String,
    },
}

fn default_policy() -> String {
    "permissive".into()
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Synthetic(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingParams {
    pub bins: usize,
    pub pad_value: f64,
}

impl Default for EncodingParams {
    fn default() -> Self {
        Self { bins: 10, pad_value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnSection {
    pub grid: AnnGrid,
    pub hyper: AnnHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtSection {
    /// Select `max_depth` by cross-validation over `config.depth_grid`;
    /// otherwise train once at `config.max_depth`.
    pub cross_validate: bool,
    pub config: GbtConfig,
}

impl Default for GbtSection {
    fn default() -> Self {
        Self {
            cross_validate: true,
            config: GbtConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSection {
    /// Test recordings to attribute per tree model; 0 disables attribution.
    pub instances: usize,
    pub permutations: usize,
    pub background: usize,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            instances: 0,
            permutations: 1000,
            background: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub window_lengths: Vec<f64>,
    /// Strides to pair with every length; empty means stride = length.
    pub strides: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub repeats: usize,
    pub test_fraction: f64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// `no_arbitration`, `mean`, `geomean`, `ann:<encoding>`,
    /// `gbt:<encoding>`, `oracle`.
    pub methods: Vec<String>,
    /// Session-level methods applied on top of each recording-level method.
    pub stage3: Vec<String>,
    /// Default run directory when none is given on the command line.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub source: SourceConfig,
    pub windowing: WindowingConfig,
    pub encoding: EncodingParams,
    pub ann: AnnSection,
    pub gbt: GbtSection,
    pub explain: ExplainSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            repeats: 5,
            test_fraction: 0.1,
            workers: 0,
            methods: vec!["no_arbitration".into(), "mean".into(), "geomean".into(), "gbt:raw".into()],
            stage3: vec!["mean".into(), "geomean".into()],
            output_dir: None,
            source: SourceConfig::default(),
            windowing: WindowingConfig::default(),
            encoding: EncodingParams::default(),
            ann: AnnSection::default(),
            gbt: GbtSection::default(),
            explain: ExplainSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        self.windowing.validate()?;
        let methods = self.parsed_methods()?;
        if matches!(self.source, SourceConfig::Files { .. }) && methods.contains(&MethodSpec::Oracle) {
            return Err(Error::Config("the oracle needs a synthetic source".into()));
        }
        self.parsed_stage3()?;
        if let SourceConfig::Synthetic(s) = &self.source {
            s.validate()?;
        }
        if methods.iter().any(|m| matches!(m, MethodSpec::Gbt(_))) {
            self.gbt.config.validate()?;
        }
        Ok(())
    }

    pub fn parsed_methods(&self) -> Result<Vec<MethodSpec>> {
        self.methods.iter().map(|m| MethodSpec::parse(m)).collect()
    }

    fn parsed_stage3(&self) -> Result<Vec<SessionMethod>> {
        let parsed = self
            .stage3
            .iter()
            .map(|m| SessionMethod::parse(m))
            .collect::<Result<Vec<_>>>()?;
        Ok(parsed.into_iter().filter(|m| *m != SessionMethod::None).collect())
    }

    fn check_paths(&self) -> Result<()> {
        if let SourceConfig::Files { manifest, outputs, .. } = &self.source {
            for p in [manifest, outputs] {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    NoArbitration,
    Mean,
    Geomean,
    Ann(EncodingKind),
    Gbt(EncodingKind),
    Oracle,
}

impl MethodSpec {
    pub fn parse(text: &str) -> Result<Self> {
        match text.split_once(':') {
            Some(("ann", enc)) => Ok(MethodSpec::Ann(EncodingKind::parse(enc)?)),
            Some(("gbt", enc)) => Ok(MethodSpec::Gbt(EncodingKind::parse(enc)?)),
            None => match text {
                "no_arbitration" => Ok(MethodSpec::NoArbitration),
                "mean" => Ok(MethodSpec::Mean),
                "geomean" => Ok(MethodSpec::Geomean),
                "oracle" => Ok(MethodSpec::Oracle),
                _ => Err(Error::Config(format!("unknown method `{text}`"))),
            },
            _ => Err(Error::Config(format!("unknown method `{text}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            MethodSpec::NoArbitration => "no_arbitration".into(),
            MethodSpec::Mean => "mean".into(),
            MethodSpec::Geomean => "geomean".into(),
            MethodSpec::Ann(k) => format!("ann:{}", k.as_str()),
            MethodSpec::Gbt(k) => format!("gbt:{}", k.as_str()),
            MethodSpec::Oracle => "oracle".into(),
        }
    }

    fn file_stem(&self) -> String {
        self.name().replace(':', "_")
    }
}

/// One evaluated (method, granularity, subset) cell of one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub repeat: usize,
    pub method: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

impl MethodReport {
    pub fn subset(&self) -> &str {
        self.report.subset_tag.as_deref().unwrap_or("all")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub granularity: Granularity,
    pub subset: String,
    pub repeats: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub sensitivity_mean: Option<f64>,
    pub specificity_mean: Option<f64>,
    pub n_total: usize,
}

#[derive(Debug, Clone, Serialize)]
struct PerRepeatRow<'a> {
    repeat: usize,
    method: &'a str,
    granularity: Granularity,
    subset: &'a str,
    n: usize,
    tp: usize,
    fp: usize,
    tn: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    accuracy: f64,
    sensitivity: Option<f64>,
    specificity: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct PositionRow {
    repeat: usize,
    position: usize,
    n: usize,
    accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct AnnGridRow {
    repeat: usize,
    method: String,
    hidden_layers: usize,
    hidden_width: usize,
    activation: String,
    params: usize,
    validation_accuracy: f64,
    selected: bool,
}

#[derive(Debug, Clone, Serialize)]
struct CvTableRow {
    repeat: usize,
    method: String,
    depth: usize,
    mean_accuracy: f64,
    fold_accuracy: String,
    selected: bool,
}

#[derive(Debug, Clone, Serialize)]
struct ImportanceRow {
    position: usize,
    importance: f64,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryPositionRow {
    position: usize,
    rank: usize,
    mean_abs_phi: f64,
    high_value_phi_variance: Option<f64>,
    low_value_phi_variance: Option<f64>,
    asymmetry: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct RepeatResult {
    reports: Vec<MethodReport>,
    positions: Vec<PositionRow>,
    grids: Vec<AnnGridRow>,
    cv: Vec<CvTableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: String,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub summary: Vec<SummaryRow>,
    pub reports: Vec<MethodReport>,
    pub manifest: RunManifest,
}

impl ExperimentOutcome {
    pub fn row(&self, method: &str, granularity: Granularity, subset: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.granularity == granularity && r.subset == subset)
    }
}

/// Runs every repeat into `out`. On failure an error manifest listing the
/// partial artifacts is still written before the error is returned.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    let result = config
        .validate()
        .and_then(|_| config.check_paths())
        .and_then(|_| par::with_workers(config.workers, || execute(config, out)));
    match result {
        Ok((summary, reports)) => {
            let manifest = write_manifest(out, config, None)?;
            Ok(ExperimentOutcome {
                run_dir: out.to_path_buf(),
                summary,
                reports,
                manifest,
            })
        }
        Err(e) => {
            if let Err(m) = write_manifest(out, config, Some(&e)) {
                log::error!("could not write the error manifest: {m}");
            }
            Err(e)
        }
    }
}

fn write_manifest(out: &Path, config: &ExperimentConfig, error: Option<&Error>) -> Result<RunManifest> {
    let mut artifacts = Vec::new();
    if out.exists() {
        collect_artifacts(out, out, &mut artifacts)?;
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = RunManifest {
        status: if error.is_some() { "error" } else { "ok" }.into(),
        error: error.map(|e| e.to_string()),
        config: config.clone(),
        artifacts,
    };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn collect_artifacts(root: &Path, dir: &Path, acc: &mut Vec<Artifact>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_artifacts(root, &path, acc)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            if rel == Path::new(MANIFEST_FILE) {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            acc.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: io::sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
    }
    Ok(())
}

/// Corpus and first-stage outputs; every corpus recording has outputs.
struct RunData {
    corpus: Corpus,
    outputs: OutputsMap,
    synth: Option<SynthConfig>,
}

fn load_data(config: &ExperimentConfig, repeat_seed: u64) -> Result<RunData> {
    match &config.source {
        SourceConfig::Synthetic(base) => {
            let synth = SynthConfig {
                seed: rng::derive_seed(repeat_seed, "synth"),
                ..base.clone()
            };
            let data = simulate(&synth, &config.windowing)?;
            Ok(RunData {
                corpus: data.corpus,
                outputs: data.outputs,
                synth: Some(synth),
            })
        }
        SourceConfig::Files {
            manifest,
            outputs,
            policy,
        } => {
            let records = read_manifest(manifest)?;
            let corpus = build_corpus(&config.name, &records, InclusionPolicy::preset(policy)?)?;
            let outputs = ingest_outputs(outputs, &config.windowing)?;
            let with_outputs: BTreeSet<String> = corpus
                .recordings()
                .filter(|r| outputs.get(&r.recording_id).is_some_and(|o| !o.is_empty()))
                .map(|r| r.recording_id.clone())
                .collect();
            let missing = corpus.n_recordings() - with_outputs.len();
            if missing > 0 {
                log::warn!("{missing} admitted recordings have no first-stage windows and are left out");
            }
            Ok(RunData {
                corpus: corpus.subset(&with_outputs),
                outputs,
                synth: None,
            })
        }
    }
}

fn execute(config: &ExperimentConfig, out: &Path) -> Result<(Vec<SummaryRow>, Vec<MethodReport>)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let methods = config.parsed_methods()?;
    let stage3 = config.parsed_stage3()?;
    let results = par::try_map_range(config.repeats, |r| run_repeat(config, &methods, &stage3, r, out))?;

    let reports: Vec<MethodReport> = results.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    let summary = summarise(&reports);
    io::write_csv(&out.join("summary.csv"), &summary)?;
    let per_repeat: Vec<PerRepeatRow> = reports
        .iter()
        .map(|m| PerRepeatRow {
            repeat: m.repeat,
            method: &m.method,
            granularity: m.report.granularity,
            subset: m.subset(),
            n: m.report.n,
            tp: m.report.matrix.tp,
            fp: m.report.matrix.fp,
            tn: m.report.matrix.tn,
            fn_: m.report.matrix.fn_,
            accuracy: m.report.accuracy,
            sensitivity: m.report.sensitivity,
            specificity: m.report.specificity,
        })
        .collect();
    io::write_csv(&out.join("per_repeat.csv"), &per_repeat)?;
    let positions: Vec<&PositionRow> = results.iter().flat_map(|r| &r.positions).collect();
    io::write_csv(&out.join("positions.csv"), &positions)?;
    let grids: Vec<&AnnGridRow> = results.iter().flat_map(|r| &r.grids).collect();
    if !grids.is_empty() {
        io::write_csv(&out.join("ann_grid.csv"), &grids)?;
    }
    let cv: Vec<&CvTableRow> = results.iter().flat_map(|r| &r.cv).collect();
    if !cv.is_empty() {
        io::write_csv(&out.join("gbt_cv.csv"), &cv)?;
    }
    io::write_json(&out.join("report.json"), &reports)?;
    Ok((summary, reports))
}

/// Mean metrics per (method, granularity, subset) over repeats, in the
/// order cells first appear.
pub fn summarise(reports: &[MethodReport]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, Granularity, String)> = Vec::new();
    let mut cells: BTreeMap<(String, Granularity, String), Vec<&EvalReport>> = BTreeMap::new();
    for m in reports {
        let key = (m.method.clone(), m.report.granularity, m.subset().to_string());
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        cells.entry(key).or_default().push(&m.report);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &cells[&key];
            let n = rs.len() as f64;
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let mean = acc.iter().sum::<f64>() / n;
            let std = if rs.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let avg = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            SummaryRow {
                method: key.0,
                granularity: key.1,
                subset: key.2,
                repeats: rs.len(),
                accuracy_mean: mean,
                accuracy_std: std,
                sensitivity_mean: avg(rs.iter().filter_map(|r| r.sensitivity).collect()),
                specificity_mean: avg(rs.iter().filter_map(|r| r.specificity).collect()),
                n_total: rs.iter().map(|r| r.n).sum(),
            }
        })
        .collect()
}

struct Prepared<'a> {
    train: Vec<(&'a Recording, &'a WindowOutputs)>,
    test: Vec<(&'a Recording, &'a WindowOutputs)>,
    test_corpus: Corpus,
}

fn prepare<'a>(data: &'a RunData, config: &ExperimentConfig, repeat_seed: u64) -> Result<Prepared<'a>> {
    let split = split_by_patient(&data.corpus, config.test_fraction, rng::derive_seed(repeat_seed, "split"))?;
    let pair = |r: &'a Recording| -> Result<(&'a Recording, &'a WindowOutputs)> {
        let o = data
            .outputs
            .get(&r.recording_id)
            .ok_or_else(|| Error::Invalid(format!("no first-stage outputs for recording {}", r.recording_id)))?;
        Ok((r, o))
    };
    let train = data
        .corpus
        .recordings()
        .filter(|r| split.train.contains(&r.recording_id))
        .map(pair)
        .collect::<Result<Vec<_>>>()?;
    let test = data
        .corpus
        .recordings()
        .filter(|r| split.test.contains(&r.recording_id))
        .map(pair)
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        train,
        test,
        test_corpus: data.corpus.subset(&split.test),
    })
}

fn spec_for(kind: EncodingKind, train: &[(&Recording, &WindowOutputs)], config: &ExperimentConfig) -> EncodingSpec {
    let mut spec = fit_spec(train.iter().map(|(_, o)| *o), kind, config.encoding.bins);
    // Size positional encodings for the longest sequence the windowing can
    // produce, so no test recording overflows.
    spec.max_windows = spec.max_windows.max(config.windowing.max_windows());
    spec.pad_value = config.encoding.pad_value;
    spec
}

struct Encoded {
    inputs: Vec<MetaInput>,
    labels: Vec<Label>,
    groups: Vec<String>,
}

fn encode_set(rows: &[(&Recording, &WindowOutputs)], spec: &EncodingSpec) -> Result<Encoded> {
    let inputs = rows.iter().map(|(_, o)| encode(o, spec)).collect::<Result<Vec<_>>>()?;
    Ok(Encoded {
        inputs,
        labels: rows.iter().map(|(r, _)| r.label).collect(),
        groups: rows.iter().map(|(r, _)| r.patient_id.clone()).collect(),
    })
}

fn run_repeat(config: &ExperimentConfig, methods: &[MethodSpec], stage3: &[SessionMethod], repeat: usize, out: &Path) -> Result<RepeatResult> {
    let repeat_seed = rng::derive_seed(config.seed, &format!("repeat_{repeat}"));
    let data = load_data(config, repeat_seed)?;
    let prep = prepare(&data, config, repeat_seed)?;
    let dir = out.join(format!("repeat_{repeat}"));
    log::info!(
        "repeat {repeat}: {} train / {} test recordings",
        prep.train.len(),
        prep.test.len()
    );

    let mut result = RepeatResult::default();
    let test_rows: Vec<(&WindowOutputs, Label)> = prep.test.iter().map(|(r, o)| (*o, r.label)).collect();
    result.positions = per_position_accuracy(&test_rows, config.windowing.max_windows())
        .into_iter()
        .map(|p| PositionRow {
            repeat,
            position: p.position,
            n: p.n,
            accuracy: p.accuracy,
        })
        .collect();
    if repeat == 0 {
        io::write_csv(&out.join("length_histogram.csv"), &length_histogram(&data.corpus, &config.windowing))?;
    }

    let weights = class_weights(&prep.train.iter().map(|(r, _)| r.label).collect::<Vec<_>>())?;
    for method in methods {
        let name = method.name();
        let decisions: Vec<RecordingDecision> = match method {
            MethodSpec::NoArbitration => {
                let report = evaluate_windows(&test_rows)?;
                result.reports.push(MethodReport {
                    repeat,
                    method: name,
                    report,
                });
                continue;
            }
            MethodSpec::Mean => apply(&prep.test, &ArbitrationMethod::Mean)?,
            MethodSpec::Geomean => apply(&prep.test, &ArbitrationMethod::Geomean)?,
            MethodSpec::Oracle => {
                let synth = data.synth.as_ref().ok_or_else(|| Error::Config("the oracle needs a synthetic source".into()))?;
                prep.test
                    .iter()
                    .map(|(r, o)| {
                        let p = bayes_optimal_arbiter(o, synth, &config.windowing)?;
                        Ok(RecordingDecision {
                            recording_id: r.recording_id.clone(),
                            p_abnormal: p,
                            label: crate::arbitration::decide(p),
                            method: "oracle".into(),
                        })
                    })
                    .collect::<Result<_>>()?
            }
            MethodSpec::Ann(kind) => {
                let spec = spec_for(*kind, &prep.train, config);
                let enc = encode_set(&prep.train, &spec)?;
                let hyper = AnnHyper {
                    seed: rng::derive_seed(repeat_seed, &name),
                    ..config.ann.hyper
                };
                let set = TrainingSet::new(&enc.inputs, &enc.labels).with_groups(&enc.groups);
                let (model, report) = grid_search_ann(set, &weights, &config.ann.grid, &hyper, &spec)?;
                for (i, c) in report.cells.iter().enumerate() {
                    result.grids.push(AnnGridRow {
                        repeat,
                        method: name.clone(),
                        hidden_layers: c.hidden_layers,
                        hidden_width: c.hidden_width,
                        activation: format!("{:?}", c.activation).to_lowercase(),
                        params: c.params,
                        validation_accuracy: c.validation_accuracy,
                        selected: i == report.best,
                    });
                }
                if model.architecture.hidden_layers == 0 && *kind == EncodingKind::RawProb {
                    let rows: Vec<ImportanceRow> = window_importance(&model)?
                        .importance
                        .into_iter()
                        .enumerate()
                        .map(|(position, importance)| ImportanceRow { position, importance })
                        .collect();
                    io::write_csv(&dir.join(format!("importance_{}.csv", method.file_stem())), &rows)?;
                }
                let decisions = apply(&prep.test, &ArbitrationMethod::MetaAnn(Box::new(model.clone())))?;
                let path = dir.join(format!("model_{}.json", method.file_stem()));
                model.save(&path)?;
                check_round_trip_ann(&path, &prep.test, &decisions)?;
                decisions
            }
            MethodSpec::Gbt(kind) => {
                let spec = spec_for(*kind, &prep.train, config);
                let enc = encode_set(&prep.train, &spec)?;
                let gbt_cfg = GbtConfig {
                    seed: rng::derive_seed(repeat_seed, &name),
                    ..config.gbt.config.clone()
                };
                let set = TrainingSet::new(&enc.inputs, &enc.labels).with_groups(&enc.groups);
                let model = if config.gbt.cross_validate {
                    let cv = cv_select_depth(set, &weights, &gbt_cfg, &spec)?;
                    for row in &cv.table {
                        result.cv.push(CvTableRow {
                            repeat,
                            method: name.clone(),
                            depth: row.depth,
                            mean_accuracy: row.mean_accuracy,
                            fold_accuracy: row.fold_accuracy.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
                            selected: row.depth == cv.best_depth,
                        });
                    }
                    cv.model
                } else {
                    train_gbt(set, &weights, &gbt_cfg, spec.clone())?
                };
                let decisions = apply(&prep.test, &ArbitrationMethod::MetaGbt(Box::new(model.clone())))?;
                let path = dir.join(format!("model_{}.json", method.file_stem()));
                model.save(&path)?;
                check_round_trip_gbt(&path, &prep.test, &decisions)?;
                if config.explain.instances > 0 {
                    explain_model(config, &model, &enc.inputs, &prep.test, repeat_seed, &dir, method)?;
                }
                decisions
            }
        };
        write_recording_decisions(&dir.join(format!("decisions_{}.csv", method.file_stem())), &decisions)?;
        stage_reports(&mut result.reports, repeat, &name, &decisions, &prep, stage3)?;
    }
    Ok(result)
}

fn apply(rows: &[(&Recording, &WindowOutputs)], method: &ArbitrationMethod) -> Result<Vec<RecordingDecision>> {
    par::try_map(rows, |(_, o)| arbitrate_recording(o, method))
}

fn round_trip_mismatch(path: &Path, id: &str) -> Error {
    Error::Invalid(format!(
        "model file {} does not reproduce the in-run prediction for {id}",
        path.display()
    ))
}

fn check_round_trip_ann(path: &Path, rows: &[(&Recording, &WindowOutputs)], decisions: &[RecordingDecision]) -> Result<()> {
    let loaded = AnnModel::load(path)?;
    for ((_, o), d) in rows.iter().zip(decisions) {
        let p = predict_ann(&loaded, &encode(o, &loaded.encoding_spec)?)?.1;
        if p.to_bits() != d.p_abnormal.to_bits() {
            return Err(round_trip_mismatch(path, &d.recording_id));
        }
    }
    Ok(())
}

fn check_round_trip_gbt(path: &Path, rows: &[(&Recording, &WindowOutputs)], decisions: &[RecordingDecision]) -> Result<()> {
    let loaded = GbtModel::load(path)?;
    for ((_, o), d) in rows.iter().zip(decisions) {
        let p = predict_gbt(&loaded, &encode(o, &loaded.encoding_spec)?)?;
        if p.to_bits() != d.p_abnormal.to_bits() {
            return Err(round_trip_mismatch(path, &d.recording_id));
        }
    }
    Ok(())
}

fn explain_model(
    config: &ExperimentConfig,
    model: &GbtModel,
    train_inputs: &[MetaInput],
    test: &[(&Recording, &WindowOutputs)],
    repeat_seed: u64,
    dir: &Path,
    method: &MethodSpec,
) -> Result<()> {
    let seed = rng::derive_seed(repeat_seed, &format!("explain:{}", method.name()));
    let background = background_sample(train_inputs, config.explain.background, seed);
    let instances = test
        .iter()
        .take(config.explain.instances)
        .map(|(r, o)| Ok((r.recording_id.clone(), encode(o, &model.encoding_spec)?)))
        .collect::<Result<Vec<_>>>()?;
    let how = if model.input_len <= 10 {
        ShapleyMethod::Exact
    } else {
        ShapleyMethod::Sampled {
            permutations: config.explain.permutations,
        }
    };
    let attributions = explain_all(model, &instances, &background, how, seed)?;
    let stem = method.file_stem();
    write_attributions(&dir.join(format!("attributions_{stem}.csv")), &attributions)?;
    let summary = attribution_summary(&attributions)?;
    let rows: Vec<SummaryPositionRow> = summary
        .positions
        .iter()
        .map(|p| SummaryPositionRow {
            position: p.position,
            rank: p.rank,
            mean_abs_phi: p.mean_abs_phi,
            high_value_phi_variance: p.high_value_phi_variance,
            low_value_phi_variance: p.low_value_phi_variance,
            asymmetry: p.asymmetry(),
        })
        .collect();
    io::write_csv(&dir.join(format!("attribution_summary_{stem}.csv")), &rows)
}

fn stage_reports(
    acc: &mut Vec<MethodReport>,
    repeat: usize,
    method: &str,
    decisions: &[RecordingDecision],
    prep: &Prepared<'_>,
    stage3: &[SessionMethod],
) -> Result<()> {
    let truth: Vec<Label> = prep.test.iter().map(|(r, _)| r.label).collect();
    let predicted: Vec<Label> = decisions.iter().map(|d| d.label).collect();
    let mut push = |report: EvalReport| {
        acc.push(MethodReport {
            repeat,
            method: method.to_string(),
            report,
        })
    };
    push(evaluate(&predicted, &truth, Granularity::Recording)?);

    let by_id: BTreeMap<String, RecordingDecision> = decisions.iter().map(|d| (d.recording_id.clone(), d.clone())).collect();
    let truth_of: BTreeMap<&str, Label> = prep.test.iter().map(|(r, _)| (r.recording_id.as_str(), r.label)).collect();
    let multi = multi_recording_subset(&prep.test_corpus);
    let multi_ids: BTreeSet<&str> = multi.corpus.recordings().map(|r| r.recording_id.as_str()).collect();
    if !multi_ids.is_empty() {
        let (p, t): (Vec<Label>, Vec<Label>) = decisions
            .iter()
            .filter(|d| multi_ids.contains(d.recording_id.as_str()))
            .map(|d| (d.label, truth_of[d.recording_id.as_str()]))
            .unzip();
        push(evaluate(&p, &t, Granularity::Recording)?.tagged("multi"));
    }

    for &s3 in stage3 {
        let sessions = arbitrate_sessions(&prep.test_corpus, &by_id, s3)?;
        let session_truth: Vec<Label> = prep.test_corpus.sessions.iter().map(|s| s.label).collect();
        let session_pred: Vec<Label> = sessions.iter().map(|s| s.label).collect();
        let tag = format!("stage3:{}", s3.as_str());
        push(evaluate(&session_pred, &session_truth, Granularity::Session)?.tagged(tag.clone()));

        let inherited = session_to_recording_labels(&sessions, &prep.test_corpus)?;
        let (p, t): (Vec<Label>, Vec<Label>) = inherited.iter().map(|(id, l)| (*l, truth_of[id.as_str()])).unzip();
        push(evaluate(&p, &t, Granularity::Recording)?.tagged(tag.clone()));
        if !multi_ids.is_empty() {
            let (p, t): (Vec<Label>, Vec<Label>) = inherited
                .iter()
                .filter(|(id, _)| multi_ids.contains(id.as_str()))
                .map(|(id, l)| (*l, truth_of[id.as_str()]))
                .unzip();
            push(evaluate(&p, &t, Granularity::Recording)?.tagged(format!("multi+{tag}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window_length: f64,
    pub stride: f64,
    pub method: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub sensitivity_mean: Option<f64>,
    pub specificity_mean: Option<f64>,
    pub n_total: usize,
}

/// One sub-run per (length, stride) cell under `out/L{length}_S{stride}`,
/// plus `sweep.csv` with one recording-level row per cell and method.
pub fn run_sweep(config: &ExperimentConfig, out: &Path) -> Result<Vec<SweepRow>> {
    config.validate()?;
    if !matches!(config.source, SourceConfig::Synthetic(_)) {
        return Err(Error::Unsupported("window sweeps re-simulate first-stage outputs and need a synthetic source".into()));
    }
    if config.sweep.window_lengths.is_empty() {
        return Err(Error::Config("sweep.window_lengths is empty".into()));
    }
    let mut cells = Vec::new();
    for &l in &config.sweep.window_lengths {
        if config.sweep.strides.is_empty() {
            cells.push((l, l));
        } else {
            cells.extend(config.sweep.strides.iter().map(|&s| (l, s)));
        }
    }
    let outcomes = par::with_workers(config.workers, || {
        par::try_map(&cells, |&(l, s)| {
            let sub = ExperimentConfig {
                windowing: WindowingConfig {
                    window_length: l,
                    stride: s,
                    ..config.windowing
                },
                // The pool is already sized; sub-runs share it.
                workers: 0,
                ..config.clone()
            };
            let run = execute(&sub, &out.join(format!("L{l}_S{s}")))?;
            Ok(((l, s), run.0))
        })
    })?;
    let rows: Vec<SweepRow> = outcomes
        .iter()
        .flat_map(|((l, s), summary)| {
            summary
                .iter()
                .filter(|r| r.subset == "all" && r.granularity != Granularity::Session)
                .map(move |r| SweepRow {
                    window_length: *l,
                    stride: *s,
                    method: r.method.clone(),
                    accuracy_mean: r.accuracy_mean,
                    accuracy_std: r.accuracy_std,
                    sensitivity_mean: r.sensitivity_mean,
                    specificity_mean: r.specificity_mean,
                    n_total: r.n_total,
                })
        })
        .collect();
    io::write_csv(&out.join("sweep.csv"), &rows)?;
    write_manifest(out, config, None)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            repeats: 2,
            methods: vec!["mean".into()],
            source: SourceConfig::Synthetic(SynthConfig {
                n_patients: 60,
                ..SynthConfig::default()
            }),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn method_names_parse() {
        for name in ["no_arbitration", "mean", "geomean", "ann:raw", "gbt:hybrid", "gbt:histogram", "oracle"] {
            assert_eq!(MethodSpec::parse(name).unwrap().name(), name);
        }
        assert!(MethodSpec::parse("gbt:zigzag").is_err());
        assert!(MethodSpec::parse("median").is_err());
    }

    #[test]
    fn toml_defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            name = "t"
            methods = ["mean", "oracle"]
            [source]
            kind = "synthetic"
            n_patients = 40
            [windowing]
            window_length = 120.0
            stride = 60.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.repeats, 5);
        assert_eq!(cfg.windowing.head_trim, 60.0);
        assert_eq!(cfg.gbt.config.depth_grid, vec![5, 10, 15, 20, 25]);
        match cfg.source {
            SourceConfig::Synthetic(s) => assert_eq!((s.n_patients, s.event_density), (40, 0.15)),
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::from_toml("repeats = 0").is_err());
        assert!(ExperimentConfig::from_toml("methods = [\"oracle\"]\n[source]\nkind = \"files\"\nmanifest = \"m\"\noutputs = \"o\"").is_err());
    }

    #[test]
    fn mean_only_run_has_no_models() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small(), dir.path()).unwrap();
        assert_eq!(out.manifest.status, "ok");
        assert!(out.manifest.artifacts.iter().all(|a| !a.path.contains("model_")));
        assert!(out.row("mean", Granularity::Recording, "all").is_some());
        assert_eq!(out.row("mean", Granularity::Recording, "all").unwrap().repeats, 2);
    }

    #[test]
    fn failing_run_leaves_error_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            test_fraction: 1.5,
            ..small()
        };
        assert!(run_experiment(&cfg, dir.path()).is_err());
        let m: RunManifest = io::read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.status, "error");
        assert!(m.error.unwrap().contains("test fraction"));
    }
}
