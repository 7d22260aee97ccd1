//! Accuracy, PSNR, cross-client feature alignment and CSV exports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hfmds::SyntheticDataset;

/// PSNR reported when the mean squared error is below `1e-10`.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const METRICS_HEADER: &str = "round,accuracy,train_loss,syn_size,psnr,loss_drop,alignment,ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub accuracy: f64,
    pub train_loss: f64,
    pub syn_size: usize,
    pub psnr: Option<f64>,
    pub loss_drop: Option<f64>,
    pub alignment: Option<f64>,
    pub ms: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.accuracy,
            self.train_loss,
            self.syn_size,
            opt(self.psnr),
            opt(self.loss_drop),
            opt(self.alignment),
            self.ms
        )
    }
}

/// Full `metrics.csv` contents, LF line endings.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("accuracy on an empty dataset"));
    }
    let (_, logits) = model.forward(&test.all_inputs()?)?;
    let correct = logits
        .rows()
        .zip(test.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::contract(format!("psnr inputs of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / MSE)` for inputs in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(synthetic: &[f64], real: &[f64]) -> Result<f64> {
    let m = mse(synthetic, real)?;
    Ok(if m < 1e-10 { PSNR_CAP_DB } else { 10.0 * (1.0 / m).log10() })
}

/// Mean per-pair PSNR of a synthetic set against the shard it was paired with.
pub fn dataset_psnr(syn: &SyntheticDataset, shard: &Dataset) -> Result<f64> {
    if syn.is_empty() {
        return Err(Error::contract("dataset_psnr of an empty synthetic set"));
    }
    let mut total = 0.0;
    for s in &syn.samples {
        if s.paired_index >= shard.len() {
            return Err(Error::contract(format!(
                "paired index {} outside shard of {}",
                s.paired_index,
                shard.len()
            )));
        }
        total += psnr(&s.input, shard.input(s.paired_index))?;
    }
    Ok(total / syn.len() as f64)
}

/// Per-client, per-class feature centroids under `model`.
pub fn client_centroids(model: &Model, shards: &[Dataset]) -> Result<Vec<Vec<Option<Vec<f64>>>>> {
    let width = model.feature_dim();
    shards
        .iter()
        .map(|shard| {
            let mut sums = vec![vec![0.0; width]; shard.classes()];
            let mut counts = vec![0usize; shard.classes()];
            if !shard.is_empty() {
                let z = model.features(&shard.all_inputs()?)?;
                for (row, &y) in z.rows().zip(shard.labels()) {
                    sums[y].iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    counts[y] += 1;
                }
            }
            Ok(sums
                .into_iter()
                .zip(counts)
                .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
                .collect())
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean pairwise centroid distance per class, averaged over classes held by
/// at least two clients. `None` when no class is shared.
pub fn alignment_score(centroids: &[Vec<Option<Vec<f64>>>]) -> Option<f64> {
    let classes = centroids.iter().map(Vec::len).max().unwrap_or(0);
    let mut per_class = Vec::new();
    for c in 0..classes {
        let holders: Vec<&[f64]> = centroids
            .iter()
            .filter_map(|client| client.get(c).and_then(|v| v.as_deref()))
            .collect();
        if holders.len() < 2 {
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..holders.len() {
            for j in i + 1..holders.len() {
                sum += euclid(holders[i], holders[j]);
                pairs += 1;
            }
        }
        per_class.push(sum / pairs as f64);
    }
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Writes `z0..z{f-1},label,origin` rows for real (and optionally synthetic) samples.
pub fn export_features(model: &Model, real: &Dataset, synthetic: Option<&SyntheticDataset>, path: &Path) -> Result<()> {
    if real.is_empty() {
        return Err(Error::contract("feature export of an empty dataset"));
    }
    let width = model.feature_dim();
    let mut out = String::new();
    let header: Vec<String> = (0..width).map(|d| format!("z{d}")).collect();
    let _ = writeln!(out, "{},label,origin", header.join(","));
    let mut emit = |features: &crate::tensor::Tensor, labels: &mut dyn Iterator<Item = usize>, origin: &str| {
        for (row, y) in features.rows().zip(labels) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{},{y},{origin}", vals.join(","));
        }
    };
    let z = model.features(&real.all_inputs()?)?;
    emit(&z, &mut real.labels().iter().copied(), "real");
    if let Some(syn) = synthetic.filter(|s| !s.is_empty()) {
        let idx: Vec<usize> = (0..syn.len()).collect();
        let z = model.features(&syn.batch(&idx)?)?;
        emit(&z, &mut syn.samples.iter().map(|s| s.label.class()), "synthetic");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
