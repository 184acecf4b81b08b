//! The `stressformer` command line: argument parsing, subcommand dispatch,
//! output layout under `--out-dir`, and the append-only run manifest.
//!
//! Layout:
//! ```text
//! <out>/streams/SYN_<M>.csv         synthetic streams (synth)
//! <out>/datasets/<M>.json           split raw windows + train stats (synth, ingest, train)
//! <out>/checkpoints/<M>.ckpt.json   trained weights (train)
//! <out>/checkpoints/<M>.train.json  per-epoch history (train)
//! <out>/embeddings/<M>.csv          pooled test-split embeddings (embed)
//! <out>/reports/*.csv, *.json       tables (train, cross-eval, variance, project, report)
//! <out>/manifests.jsonl             one line per artifact-producing command
//! ```

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    cluster_separation, extract_embeddings, project_2d, separation_csv, variance_csv, variance_rows, VarianceRow,
};
use crate::checkpoint::{file_sha256, Checkpoint};
use crate::config::{ConfigError, Overrides, RunConfig};
use crate::data::{
    load_streams, prepare, synth_dataset, synth_family, Modality, PreparedModality, SynthSpec,
};
use crate::eval::{experiment_a, experiment_b_from_dir, table1_csv, CrossModalMatrix, ModalitySummary};
use crate::train::{TrainError, TrainRunRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const MANIFEST_FILE: &str = "manifests.jsonl";

#[derive(Debug, Parser)]
#[command(name = "stressformer", version, about = "Patch-transformer stress classifiers for physiological signals")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML config with flat dotted keys, e.g. `train.epochs = 50`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restrict the command to one modality (ECG, EDA, EMG, RESP, TEMP, ACC_C1..3).
    #[arg(long, global = true)]
    pub modality: Option<Modality>,
    /// Directory of converted `<subject>_<modality>.csv` streams.
    #[arg(long, global = true, env = "STRESS_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true)]
    pub window_len: Option<usize>,
    #[arg(long, global = true)]
    pub patch_len: Option<usize>,
    /// Run independent modalities and cross-modal pairs in parallel.
    #[arg(long, global = true)]
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate synthetic sinusoid datasets.
    Synth,
    /// Window, split and normalize converted streams from --data-dir.
    Ingest,
    /// Train and test one classifier per modality.
    Train,
    /// Test every checkpoint on every modality's test split.
    CrossEval,
    /// Export pooled test-split embeddings.
    Embed,
    /// Per-class in-class variance of embeddings and raw windows.
    Variance,
    /// Two-axis principal-component projection and class separation.
    Project,
    /// Assemble the summary tables from earlier outputs.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Train => "train",
            Command::CrossEval => "cross-eval",
            Command::Embed => "embed",
            Command::Variance => "variance",
            Command::Project => "project",
            Command::Report => "report",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::data(e)
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub modality: Option<Modality>,
    pub data_dir: Option<String>,
    pub parallel: bool,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub version: String,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub exit_code: i32,
}

/// Reads every manifest line under `out_dir`.
pub fn read_manifests(out_dir: &Path) -> std::io::Result<Vec<RunManifest>> {
    let text = fs::read_to_string(out_dir.join(MANIFEST_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

struct Ctx {
    command: Command,
    g: GlobalArgs,
    cfg: RunConfig,
    started: DateTime<Utc>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    fn dir(&self, name: &str) -> Result<PathBuf, Failure> {
        let d = self.g.out_dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Failure::data(format!("cannot create {}: {e}", d.display())))?;
        Ok(d)
    }

    fn sub(&self, name: &str) -> PathBuf {
        self.g.out_dir.join(name)
    }

    fn input(&mut self, path: PathBuf) {
        if !self.inputs.contains(&path) {
            self.inputs.push(path);
        }
    }

    fn output(&mut self, path: PathBuf) {
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
    }

    /// Atomic write through a temporary sibling.
    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> CmdResult {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
        self.output(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> CmdResult {
        let bytes = serde_json::to_vec_pretty(value).map_err(Failure::data)?;
        self.write(path, &bytes)
    }

    fn selected(&self, available: &[Modality]) -> Vec<Modality> {
        match self.g.modality {
            Some(m) => vec![m],
            None => available.to_vec(),
        }
    }

    fn dataset_path(&self, m: Modality) -> PathBuf {
        self.sub("datasets").join(format!("{m}.json"))
    }

    fn checkpoint_path(&self, m: Modality) -> PathBuf {
        self.sub("checkpoints").join(Checkpoint::file_name(m))
    }

    /// Modalities with a dataset file on disk, in canonical order.
    fn datasets_on_disk(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.dataset_path(*m).is_file())
            .collect()
    }

    fn load_dataset(&mut self, m: Modality) -> Result<PreparedModality, Failure> {
        let path = self.dataset_path(m);
        let p = PreparedModality::load(&path).map_err(|e| {
            Failure::data(format!("{e} (run `synth` or `ingest` to create {m} data)"))
        })?;
        self.input(path);
        Ok(p)
    }

    fn load_datasets(&mut self) -> Result<Vec<PreparedModality>, Failure> {
        let mods = self.selected(&self.datasets_on_disk());
        if mods.is_empty() {
            return Err(Failure::data(format!(
                "no datasets under {}; run `synth` or `ingest` first",
                self.sub("datasets").display()
            )));
        }
        mods.into_iter().map(|m| self.load_dataset(m)).collect()
    }

    fn load_checkpoint(&mut self, m: Modality) -> Result<Checkpoint, Failure> {
        let path = self.checkpoint_path(m);
        let c = Checkpoint::load(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        self.input(path);
        Ok(c)
    }

    fn manifest(&self, exit_code: i32) -> RunManifest {
        let inputs = self
            .inputs
            .iter()
            .filter_map(|p| {
                file_sha256(p).ok().map(|sha256| InputHash {
                    path: p.display().to_string(),
                    sha256,
                })
            })
            .collect();
        RunManifest {
            command: self.command.name().into(),
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            modality: self.g.modality,
            data_dir: self.g.data_dir.as_ref().map(|d| d.display().to_string()),
            parallel: self.g.parallel,
            inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            started: self.started,
            finished: Utc::now(),
            exit_code,
        }
    }

    fn append_manifest(&self, exit_code: i32) -> std::io::Result<()> {
        fs::create_dir_all(&self.g.out_dir)?;
        let mut line = serde_json::to_string(&self.manifest(exit_code)).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.g.out_dir.join(MANIFEST_FILE))?;
        f.write_all(line.as_bytes())
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn dispatch(cli: Cli) -> CmdResult {
    let overrides = Overrides {
        seed: cli.global.seed,
        window_len: cli.global.window_len,
        patch_len: cli.global.patch_len,
    };
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides)?;
    let mut ctx = Ctx {
        command: cli.command,
        g: cli.global,
        cfg,
        started: Utc::now(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    if let Some(c) = ctx.g.config.clone() {
        ctx.input(c);
    }
    let result = match cli.command {
        Command::Synth => synth(&mut ctx),
        Command::Ingest => ingest(&mut ctx).map(|_| ()),
        Command::Train => train(&mut ctx),
        Command::CrossEval => cross_eval(&mut ctx),
        Command::Embed => embed(&mut ctx),
        Command::Variance => variance(&mut ctx),
        Command::Project => project(&mut ctx),
        Command::Report => report(&mut ctx),
    };
    if !ctx.outputs.is_empty() {
        let code = result.as_ref().err().map_or(EXIT_OK, |f| f.code);
        ctx.append_manifest(code)
            .map_err(|e| Failure::data(format!("cannot append manifest: {e}")))?;
    }
    result
}

/// Per-modality generator seed derived from the run seed.
fn synth_seed(seed: u64, m: Modality) -> u64 {
    let idx = Modality::ALL.iter().position(|x| *x == m).unwrap_or(0) as u64;
    seed ^ (idx + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn synth(ctx: &mut Ctx) -> CmdResult {
    let s = ctx.cfg.synth.clone();
    let mods = ctx.selected(&s.modalities);
    let streams_dir = ctx.dir("streams")?;
    let datasets_dir = ctx.dir("datasets")?;
    for m in mods {
        // Listed modalities alternate between the generator families.
        let family = s
            .modalities
            .iter()
            .position(|x| *x == m)
            .unwrap_or_else(|| Modality::ALL.iter().position(|x| *x == m).unwrap_or(0));
        let spec = SynthSpec {
            modality: m,
            classes: synth_family(family),
            n_windows: s.n_windows,
            window_len: s.window_len,
            sample_rate: s.sample_rate,
            noise_std: s.noise_std,
            seed: synth_seed(ctx.cfg.seed, m),
        };
        let ds = synth_dataset(&spec).map_err(Failure::data)?;
        let stream = ds.to_stream("SYN", s.sample_rate).map_err(Failure::data)?;
        let stream_path = streams_dir.join(stream.file_name());
        let tmp = stream_path.with_extension("tmp");
        stream.write(&tmp).map_err(Failure::data)?;
        fs::rename(&tmp, &stream_path).map_err(Failure::data)?;
        ctx.output(stream_path);
        let (prepared, _) =
            prepare(m, &[stream], s.window_len, s.window_len, &ctx.cfg.split_spec()).map_err(Failure::data)?;
        let json = serde_json::to_vec(&prepared).map_err(Failure::data)?;
        ctx.write(datasets_dir.join(format!("{m}.json")), &json)?;
        info!("{m}: {} train / {} test synthetic windows", prepared.train.len(), prepared.test.len());
    }
    Ok(())
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::data(format!("cannot read data dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Ingests streams from `--data-dir`, writing one dataset file per modality found.
fn ingest(ctx: &mut Ctx) -> Result<Vec<PreparedModality>, Failure> {
    let dir = ctx
        .g
        .data_dir
        .clone()
        .ok_or_else(|| Failure::usage("ingest needs --data-dir or STRESS_DATA_DIR"))?;
    let streams = load_streams(&dir, ctx.g.modality).map_err(Failure::data)?;
    if streams.is_empty() {
        return Err(Failure::data(format!("no matching streams in {}", dir.display())));
    }
    for p in csv_files(&dir)? {
        ctx.input(p);
    }
    let present: Vec<Modality> = Modality::ALL
        .into_iter()
        .filter(|m| streams.iter().any(|s| s.modality == *m))
        .collect();
    let out = ctx.dir("datasets")?;
    let mut prepared = Vec::new();
    let mut errors = Vec::new();
    for m in present {
        match prepare(m, &streams, ctx.cfg.data.window_len, ctx.cfg.stride(), &ctx.cfg.split_spec()) {
            Ok((p, _)) => {
                let json = serde_json::to_vec(&p).map_err(Failure::data)?;
                ctx.write(out.join(format!("{m}.json")), &json)?;
                info!("{m}: {} train / {} test windows", p.train.len(), p.test.len());
                prepared.push(p);
            }
            Err(e) => {
                warn!("{m}: {e}");
                errors.push(format!("{m}: {e}"));
            }
        }
    }
    if !errors.is_empty() {
        return Err(Failure::data(errors.join("; ")));
    }
    Ok(prepared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentAReport {
    pub summaries: Vec<ModalitySummary>,
    pub records: Vec<TrainRunRecord>,
}

fn train(ctx: &mut Ctx) -> CmdResult {
    let datasets = if ctx.g.data_dir.is_some() {
        ingest(ctx)?
    } else {
        ctx.load_datasets()?
    };
    let ckpt_dir = ctx.dir("checkpoints")?;
    let cfg = ctx.cfg.clone();
    let result = experiment_a(&datasets, |w| cfg.model_config(w), &cfg.train_config(), Some(&ckpt_dir), ctx.g.parallel);
    for (m, r) in &result.runs {
        if r.is_ok() {
            ctx.output(ckpt_dir.join(Checkpoint::file_name(*m)));
            ctx.output(ckpt_dir.join(format!("{m}.train.json")));
        }
    }
    let report = ExperimentAReport {
        summaries: result.summaries(),
        records: result
            .runs
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok().map(|run| run.record.clone()))
            .collect(),
    };
    let reports = ctx.dir("reports")?;
    let table = table1_csv(&report.summaries);
    ctx.write(reports.join("table1.csv"), table.as_bytes())?;
    ctx.write_json(reports.join("experiment_a.json"), &report)?;
    print!("{table}");

    let failures: Vec<(Modality, &TrainError)> =
        result.runs.iter().filter_map(|(m, r)| r.as_ref().err().map(|e| (*m, e))).collect();
    if failures.is_empty() {
        return Ok(());
    }
    let numeric = failures.iter().any(|(_, e)| matches!(e, TrainError::NonFiniteLoss { .. }));
    let message = failures.iter().map(|(m, e)| format!("{m}: {e}")).collect::<Vec<_>>().join("; ");
    Err(Failure {
        code: if numeric { EXIT_NUMERIC } else { EXIT_DATA },
        message,
    })
}

fn write_cross_tables(ctx: &mut Ctx, matrix: &CrossModalMatrix) -> CmdResult {
    let reports = ctx.dir("reports")?;
    ctx.write(reports.join("cross_modal.csv"), matrix.to_csv(|_| true).as_bytes())?;
    ctx.write_json(reports.join("cross_modal.json"), matrix)?;
    ctx.write(reports.join("table2.csv"), matrix.to_csv(|t| !t.is_accelerometer()).as_bytes())?;
    ctx.write(reports.join("table3.csv"), matrix.to_csv(|t| t.is_accelerometer()).as_bytes())?;
    Ok(())
}

fn cross_eval(ctx: &mut Ctx) -> CmdResult {
    let targets = ctx.load_datasets()?;
    for t in &targets {
        let p = ctx.checkpoint_path(t.modality);
        if p.is_file() {
            ctx.input(p);
        }
    }
    let matrix = experiment_b_from_dir(&ctx.sub("checkpoints"), &targets, ctx.g.parallel);
    write_cross_tables(ctx, &matrix)?;
    print!("{}", matrix.to_csv(|_| true));
    let failed: Vec<String> = matrix
        .failures()
        .filter(|e| matches!(e.outcome, crate::eval::PairOutcome::Failed { .. }))
        .map(|e| format!("{}->{}: {}", e.source, e.target, e.status()))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::data(failed.join("; ")))
    }
}

/// Test-split embeddings for every selected modality with a checkpoint.
fn with_embeddings(
    ctx: &mut Ctx,
    mut each: impl FnMut(&mut Ctx, &PreparedModality, crate::analysis::EmbeddingSet) -> CmdResult,
) -> CmdResult {
    let datasets = ctx.load_datasets()?;
    let mut errors = Vec::new();
    for p in &datasets {
        let step = ctx.load_checkpoint(p.modality).and_then(|ckpt| {
            let set = extract_embeddings(&ckpt, &p.raw_test()).map_err(|e| Failure::data(format!("{}: {e}", p.modality)))?;
            each(ctx, p, set)
        });
        if let Err(f) = step {
            warn!("{}", f.message);
            errors.push(f.message);
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Failure::data(errors.join("; ")))
    }
}

fn embed(ctx: &mut Ctx) -> CmdResult {
    let dir = ctx.dir("embeddings")?;
    with_embeddings(ctx, |ctx, p, set| ctx.write(dir.join(format!("{}.csv", p.modality)), set.to_csv().as_bytes()))
}

fn variance(ctx: &mut Ctx) -> CmdResult {
    let mut rows: Vec<VarianceRow> = Vec::new();
    let res = with_embeddings(ctx, |_, p, set| {
        rows.extend(variance_rows(&set, &p.raw_test()));
        Ok(())
    });
    if !rows.is_empty() {
        let reports = ctx.dir("reports")?;
        ctx.write(reports.join("variance.csv"), variance_csv(&rows).as_bytes())?;
        ctx.write_json(reports.join("variance.json"), &rows)?;
        print!("{}", variance_csv(&rows));
    }
    res
}

fn project(ctx: &mut Ctx) -> CmdResult {
    let reports = ctx.dir("reports")?;
    with_embeddings(ctx, |ctx, p, set| {
        let m = p.modality;
        let proj = project_2d(&set).map_err(|e| Failure::data(format!("{m}: {e}")))?;
        ctx.write(reports.join(format!("projection_{m}.csv")), proj.to_csv().as_bytes())?;
        let coords: Vec<Vec<f64>> = proj.coords.iter().map(|c| c.to_vec()).collect();
        let sep = cluster_separation(&coords, &proj.labels).map_err(|e| Failure::data(format!("{m}: {e}")))?;
        ctx.write(reports.join(format!("separation_{m}.csv")), separation_csv(&sep).as_bytes())?;
        info!("{m}: explained variance {:.4} / {:.4}", proj.explained[0], proj.explained[1]);
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub table1: Option<Vec<ModalitySummary>>,
    pub cross_modal: Option<CrossModalMatrix>,
    pub variance: Option<Vec<VarianceRow>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(ctx: &mut Ctx, path: PathBuf) -> Result<Option<T>, Failure> {
    if !path.is_file() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let v = serde_json::from_slice(&bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    ctx.input(path);
    Ok(Some(v))
}

fn report(ctx: &mut Ctx) -> CmdResult {
    let reports = ctx.sub("reports");
    let a: Option<ExperimentAReport> = read_json(ctx, reports.join("experiment_a.json"))?;
    let b: Option<CrossModalMatrix> = read_json(ctx, reports.join("cross_modal.json"))?;
    let v: Option<Vec<VarianceRow>> = read_json(ctx, reports.join("variance.json"))?;
    if a.is_none() && b.is_none() && v.is_none() {
        return Err(Failure::data(format!(
            "nothing to report under {}; run train, cross-eval or variance first",
            reports.display()
        )));
    }
    if let Some(a) = &a {
        ctx.write(reports.join("table1.csv"), table1_csv(&a.summaries).as_bytes())?;
    }
    if let Some(b) = &b {
        write_cross_tables(ctx, b)?;
    }
    if let Some(v) = &v {
        ctx.write(reports.join("table4.csv"), variance_csv(v).as_bytes())?;
    }
    let full = FullReport {
        table1: a.map(|a| a.summaries),
        cross_modal: b,
        variance: v,
    };
    ctx.write_json(reports.join("report.json"), &full)?;
    Ok(())
}
