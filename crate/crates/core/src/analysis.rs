//! Embedding-space analytics: pooled embeddings, per-class in-class
//! variance, a deterministic two-axis principal-component projection, and a
//! centroid-distance / spread separation score.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{apply_stats, Modality, WindowedDataset};
use crate::model::{ModelError, Transformer, N_CLASSES};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("window length {got} incompatible with model window length {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("projection needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("data has zero variance in every direction")]
    RankZero,
    #[error("separation needs at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("rows have inconsistent widths")]
    Ragged,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub modality: Modality,
    pub source: String,
}

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// `class,e0,e1,...` per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for i in 0..self.dim() {
            let _ = write!(out, ",e{i}");
        }
        out.push('\n');
        for (row, l) in self.rows.iter().zip(&self.labels) {
            let _ = write!(out, "{l}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Eval-mode pooled embeddings of already-normalized windows.
pub fn embed_with_model(model: &Transformer, ds: &WindowedDataset, source: &str) -> Result<EmbeddingSet> {
    let expected = model.config().window_len;
    if ds.window_len != expected {
        return Err(AnalysisError::WindowLength {
            expected,
            got: ds.window_len,
        });
    }
    let outs = model.forward_many(&ds.samples())?;
    Ok(EmbeddingSet {
        rows: outs.into_iter().map(|o| o.embedding).collect(),
        labels: ds.labels(),
        modality: ds.modality,
        source: source.to_string(),
    })
}

/// Embeddings of raw windows, normalized with the checkpoint's own stats.
pub fn extract_embeddings(ckpt: &Checkpoint, raw: &WindowedDataset) -> Result<EmbeddingSet> {
    let model = ckpt.to_model()?;
    let ds = apply_stats(raw, &ckpt.normalization);
    embed_with_model(&model, &ds, &format!("{}@seed{}", ckpt.modality, ckpt.seed))
}

/// Mean over dimensions of the per-dimension unbiased variance. `None` below two rows.
pub fn mean_dim_variance(rows: &[&[f64]]) -> Option<f64> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let d = rows[0].len();
    if d == 0 {
        return None;
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        total += rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / (n - 1) as f64;
    }
    Some(total / d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVariance {
    pub class: usize,
    pub count: usize,
    /// `None` when the class has fewer than two rows.
    pub variance: Option<f64>,
}

fn by_class<'a>(rows: &'a [Vec<f64>], labels: &[usize], class: usize) -> Vec<&'a [f64]> {
    rows.iter()
        .zip(labels)
        .filter(|(_, &l)| l == class)
        .map(|(r, _)| r.as_slice())
        .collect()
}

pub fn in_class_variance(set: &EmbeddingSet) -> Vec<ClassVariance> {
    (0..N_CLASSES)
        .map(|class| {
            let rows = by_class(&set.rows, &set.labels, class);
            ClassVariance {
                class,
                count: rows.len(),
                variance: mean_dim_variance(&rows),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub modality: Modality,
    pub class: usize,
    pub count: usize,
    pub embedding_variance: Option<f64>,
    /// Same statistic over the raw (un-normalized) window samples.
    pub raw_variance: Option<f64>,
}

pub fn variance_rows(set: &EmbeddingSet, raw: &WindowedDataset) -> Vec<VarianceRow> {
    let raw_rows: Vec<Vec<f64>> = raw.windows.iter().map(|w| w.samples.clone()).collect();
    let raw_labels = raw.labels();
    in_class_variance(set)
        .into_iter()
        .map(|cv| VarianceRow {
            modality: set.modality,
            class: cv.class,
            count: cv.count,
            embedding_variance: cv.variance,
            raw_variance: mean_dim_variance(&by_class(&raw_rows, &raw_labels, cv.class)),
        })
        .collect()
}

/// Columns `modality,class,embedding_variance,raw_variance`; insufficient classes leave cells empty.
pub fn variance_csv(rows: &[VarianceRow]) -> String {
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
    let mut out = String::from("modality,class,embedding_variance,raw_variance\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.modality,
            r.class,
            cell(r.embedding_variance),
            cell(r.raw_variance)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    /// Fraction of total variance captured by each axis, decreasing.
    pub explained: [f64; 2],
    pub axes: [Vec<f64>; 2],
}

impl Projection2D {
    /// Columns `x,y,class`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,class\n");
        for (c, l) in self.coords.iter().zip(&self.labels) {
            let _ = writeln!(out, "{},{},{l}", c[0], c[1]);
        }
        out
    }
}

const POWER_SEED: u64 = 0x2d_70_63_61;
const POWER_MAX_ITERS: usize = 100_000;
const POWER_TOL: f64 = 1e-14;

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    m.chunks(d).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orthogonalize(v: &mut [f64], against: &[&[f64]]) {
    for a in against {
        let dot: f64 = v.iter().zip(*a).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(*a).for_each(|(x, y)| *x -= dot * y);
    }
}

/// Flips `v` so its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let (_, big) = v
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, &x)| if x.abs() > bv.abs() { (i, x) } else { (bi, bv) });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair of symmetric `m` restricted to the complement of `deflate`.
fn power_iteration(m: &[f64], d: usize, deflate: &[&[f64]], rng: &mut ChaCha8Rng, scale: f64) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    orthogonalize(&mut v, deflate);
    let n = norm(&v);
    if n == 0.0 {
        return (0.0, vec![0.0; d]);
    }
    v.iter_mut().for_each(|x| *x /= n);
    let start = v.clone();
    for _ in 0..POWER_MAX_ITERS {
        let mut w = mat_vec(m, &v);
        orthogonalize(&mut w, deflate);
        let wn = norm(&w);
        if wn <= scale * 1e-13 {
            // Remaining spectrum is numerically zero.
            let mut z = start;
            fix_sign(&mut z);
            return (0.0, z);
        }
        w.iter_mut().for_each(|x| *x /= wn);
        let diff = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let flip = v.iter().zip(&w).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        v = w;
        if diff.min(flip) < POWER_TOL {
            break;
        }
    }
    fix_sign(&mut v);
    let mv = mat_vec(m, &v);
    let lambda = v.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    (lambda, v)
}

/// Rows centered on their column means.
pub fn center(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::Ragged);
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect())
}

pub fn project_rows(rows: &[Vec<f64>], labels: &[usize]) -> Result<Projection2D> {
    if rows.len() < 3 {
        return Err(AnalysisError::TooFewRows(rows.len()));
    }
    let centered = center(rows)?;
    let d = centered[0].len();
    let n = centered.len();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(trace > 0.0) || trace < 1e-300 {
        return Err(AnalysisError::RankZero);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let (l1, v1) = power_iteration(&cov, d, &[], &mut rng, trace);
    let (l2, v2) = if d > 1 {
        power_iteration(&cov, d, &[&v1], &mut rng, trace)
    } else {
        (0.0, vec![0.0])
    };
    let coords = centered
        .iter()
        .map(|r| {
            let dot = |v: &[f64]| r.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [dot(&v1), dot(&v2)]
        })
        .collect();
    Ok(Projection2D {
        coords,
        labels: labels.to_vec(),
        explained: [l1 / trace, l2 / trace],
        axes: [v1, v2],
    })
}

pub fn project_2d(set: &EmbeddingSet) -> Result<Projection2D> {
    project_rows(&set.rows, &set.labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub class_a: usize,
    pub class_b: usize,
    pub centroid_distance: f64,
    pub mean_spread: f64,
    /// `centroid_distance / mean_spread`; infinite when the spread is zero
    /// and the centroids differ.
    pub score: f64,
    pub infinite: bool,
}

fn centroid_and_spread(rows: &[&[f64]]) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut c = vec![0.0; d];
    for r in rows {
        c.iter_mut().zip(*r).for_each(|(a, v)| *a += v);
    }
    c.iter_mut().for_each(|a| *a /= n);
    let ms = rows
        .iter()
        .map(|r| r.iter().zip(&c).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum::<f64>()
        / n;
    (c, ms.sqrt())
}

/// Pairwise class separation over any row set (embeddings or projected coordinates).
pub fn cluster_separation(rows: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Separation>> {
    let stats: Vec<(usize, Vec<f64>, f64)> = (0..N_CLASSES)
        .filter_map(|class| {
            let members = by_class(rows, labels, class);
            (!members.is_empty()).then(|| {
                let (c, s) = centroid_and_spread(&members);
                (class, c, s)
            })
        })
        .collect();
    if stats.len() < 2 {
        return Err(AnalysisError::TooFewClasses(stats.len()));
    }
    let mut out = Vec::new();
    for (i, (a, ca, sa)) in stats.iter().enumerate() {
        for (b, cb, sb) in &stats[i + 1..] {
            let dist = ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let spread = (sa + sb) / 2.0;
            let (score, infinite) = if spread > 0.0 {
                (dist / spread, false)
            } else if dist > 0.0 {
                (f64::INFINITY, true)
            } else {
                (0.0, false)
            };
            out.push(Separation {
                class_a: *a,
                class_b: *b,
                centroid_distance: dist,
                mean_spread: spread,
                score,
                infinite,
            });
        }
    }
    Ok(out)
}

/// Columns `class_a,class_b,centroid_distance,mean_spread,score` (`inf` when flagged).
pub fn separation_csv(rows: &[Separation]) -> String {
    let mut out = String::from("class_a,class_b,centroid_distance,mean_spread,score\n");
    for s in rows {
        let score = if s.infinite { "inf".to_string() } else { s.score.to_string() };
        let _ = writeln!(out, "{},{},{},{},{score}", s.class_a, s.class_b, s.centroid_distance, s.mean_spread);
    }
    out
}

/// Mean separation score over finite class pairs.
pub fn mean_separation(rows: &[Separation]) -> f64 {
    let finite: Vec<f64> = rows.iter().filter(|s| !s.infinite).map(|s| s.score).collect();
    if finite.is_empty() {
        return f64::INFINITY;
    }
    finite.iter().sum::<f64>() / finite.len() as f64
}
