//! Same-modality training runs (experiment A) and cross-modality reuse of
//! their checkpoints (experiment B), plus the comma-separated reports.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{apply_stats, Modality, PreparedModality};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricSet};
use crate::model::ModelConfig;
use crate::train::{confusion, train_modality, TrainConfig, TrainError, TrainRunRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
}

/// Evaluates a checkpoint on raw windows, normalizing them with the checkpoint's stats.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, target: &PreparedModality) -> Result<Evaluation, String> {
    if ckpt.model_config.window_len != target.window_len {
        return Err(format!(
            "window length {} incompatible with checkpoint window length {}",
            target.window_len, ckpt.model_config.window_len
        ));
    }
    let model = ckpt.to_model().map_err(|e| e.to_string())?;
    let ds = apply_stats(&target.raw_test(), &ckpt.normalization);
    let cm = confusion(&model, &ds).map_err(|e| e.to_string())?;
    let metrics = compute_metrics(&cm).map_err(|e| e.to_string())?;
    Ok(Evaluation { confusion: cm, metrics })
}

#[derive(Debug)]
pub struct ModalityRun {
    pub checkpoint: Checkpoint,
    pub record: TrainRunRecord,
    pub test: Evaluation,
}

#[derive(Debug)]
pub struct ExperimentA {
    pub runs: Vec<(Modality, Result<ModalityRun, TrainError>)>,
}

/// Trains and tests one model per modality, building each architecture from
/// that modality's window length. A failure in one modality is recorded in
/// its entry and does not stop the others.
pub fn experiment_a(
    datasets: &[PreparedModality],
    model_cfg: impl Fn(usize) -> ModelConfig + Sync,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
    parallel: bool,
) -> ExperimentA {
    let run = |p: &PreparedModality| -> (Modality, Result<ModalityRun, TrainError>) {
        let cfg = model_cfg(p.window_len);
        let res = train_modality(p, &cfg, train_cfg, out_dir).and_then(|(checkpoint, record)| {
            let test = evaluate_checkpoint(&checkpoint, p).map_err(TrainError::Config)?;
            Ok(ModalityRun {
                checkpoint,
                record,
                test,
            })
        });
        if let Err(e) = &res {
            warn!("{}: training failed: {e}", p.modality);
        }
        (p.modality, res)
    };
    let runs = if parallel {
        datasets.par_iter().map(run).collect()
    } else {
        datasets.iter().map(run).collect()
    };
    ExperimentA { runs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub modality: Modality,
    pub evaluation: Option<Evaluation>,
    pub error: Option<String>,
}

impl ExperimentA {
    pub fn summaries(&self) -> Vec<ModalitySummary> {
        self.runs
            .iter()
            .map(|(m, r)| ModalitySummary {
                modality: *m,
                evaluation: r.as_ref().ok().map(|run| run.test.clone()),
                error: r.as_ref().err().map(|e| e.to_string()),
            })
            .collect()
    }
}

fn f(x: f64) -> String {
    format!("{x:.6}")
}

/// Table columns: `modality,accuracy,precision,recall` (weighted averages).
/// Failed modalities keep their row with empty metric cells.
pub fn table1_csv(summaries: &[ModalitySummary]) -> String {
    let mut out = String::from("modality,accuracy,precision,recall\n");
    for s in summaries {
        match &s.evaluation {
            Some(e) => {
                let m = &e.metrics;
                let _ = writeln!(out, "{},{},{},{}", s.modality, f(m.accuracy), f(m.weighted_precision), f(m.weighted_recall));
            }
            None => {
                let _ = writeln!(out, "{},,,", s.modality);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PairOutcome {
    Evaluated(Evaluation),
    Incompatible { source_window_len: usize, target_window_len: usize },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEntry {
    pub source: Modality,
    pub target: Modality,
    pub outcome: PairOutcome,
}

impl CrossEntry {
    pub fn metrics(&self) -> Option<&MetricSet> {
        match &self.outcome {
            PairOutcome::Evaluated(e) => Some(&e.metrics),
            _ => None,
        }
    }

    pub fn status(&self) -> String {
        match &self.outcome {
            PairOutcome::Evaluated(_) => "ok".into(),
            PairOutcome::Incompatible {
                source_window_len,
                target_window_len,
            } => format!("incompatible window length {source_window_len} vs {target_window_len}"),
            PairOutcome::Failed { error } => format!("error: {}", error.replace([',', '\n'], ";")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalMatrix {
    pub modalities: Vec<Modality>,
    /// Row-major over `(source, target)` in `modalities` order.
    pub entries: Vec<CrossEntry>,
}

impl CrossModalMatrix {
    pub fn get(&self, source: Modality, target: Modality) -> Option<&CrossEntry> {
        self.entries.iter().find(|e| e.source == source && e.target == target)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CrossEntry> {
        self.entries
            .iter()
            .filter(|e| !matches!(e.outcome, PairOutcome::Evaluated(_)))
    }

    /// Table columns: `source,target,precision,recall,f1,accuracy,status`,
    /// optionally restricted by target.
    pub fn to_csv(&self, keep_target: impl Fn(Modality) -> bool) -> String {
        let mut out = String::from("source,target,precision,recall,f1,accuracy,status\n");
        for e in self.entries.iter().filter(|e| keep_target(e.target)) {
            match e.metrics() {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},ok",
                        e.source,
                        e.target,
                        f(m.weighted_precision),
                        f(m.weighted_recall),
                        f(m.weighted_f1),
                        f(m.accuracy)
                    );
                }
                None => {
                    let _ = writeln!(out, "{},{},,,,,{}", e.source, e.target, e.status());
                }
            }
        }
        out
    }
}

/// Evaluates every source checkpoint on every target's test split without
/// retraining. `sources` pairs each modality with its loaded checkpoint or
/// the reason it is unavailable.
pub fn experiment_b(
    sources: &[(Modality, Result<Checkpoint, String>)],
    targets: &[PreparedModality],
    parallel: bool,
) -> CrossModalMatrix {
    let pairs: Vec<(usize, usize)> = (0..sources.len())
        .flat_map(|s| (0..targets.len()).map(move |t| (s, t)))
        .collect();
    let eval_pair = |&(si, ti): &(usize, usize)| -> CrossEntry {
        let (source, ckpt) = &sources[si];
        let target = &targets[ti];
        let outcome = match ckpt {
            Err(e) => PairOutcome::Failed { error: e.clone() },
            Ok(c) if c.model_config.window_len != target.window_len => PairOutcome::Incompatible {
                source_window_len: c.model_config.window_len,
                target_window_len: target.window_len,
            },
            Ok(c) => match evaluate_checkpoint(c, target) {
                Ok(e) => PairOutcome::Evaluated(e),
                Err(error) => PairOutcome::Failed { error },
            },
        };
        CrossEntry {
            source: *source,
            target: target.modality,
            outcome,
        }
    };
    let entries = if parallel {
        pairs.par_iter().map(eval_pair).collect()
    } else {
        pairs.iter().map(eval_pair).collect()
    };
    let mut modalities: Vec<Modality> = sources.iter().map(|(m, _)| *m).collect();
    for t in targets {
        if !modalities.contains(&t.modality) {
            modalities.push(t.modality);
        }
    }
    CrossModalMatrix { modalities, entries }
}

/// Loads `<dir>/<MODALITY>.ckpt.json` for every target modality and runs experiment B.
pub fn experiment_b_from_dir(checkpoint_dir: &Path, targets: &[PreparedModality], parallel: bool) -> CrossModalMatrix {
    let sources: Vec<(Modality, Result<Checkpoint, String>)> = targets
        .iter()
        .map(|t| {
            let path = checkpoint_dir.join(Checkpoint::file_name(t.modality));
            let ckpt = Checkpoint::load(&path).map_err(|e| format!("{}: {e}", path.display()));
            (t.modality, ckpt)
        })
        .collect();
    experiment_b(&sources, targets, parallel)
}
