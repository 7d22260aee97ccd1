//! Desk-scale datasets and non-IID client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream};
use crate::tensor::Tensor;

/// Labelled rows with inputs in `[0, 1]`.
///
/// `source` maps every row back to its index in the dataset it was cut
/// from, so partitions can be checked for disjointness and coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
    source: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "input dimension must be positive"));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::dim(
                "dataset",
                format!("{} values for {} rows of width {dim}", inputs.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("dataset inputs must be finite"));
        }
        let source = (0..labels.len()).collect();
        Ok(Dataset {
            dim,
            classes,
            inputs,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Row subset in the given order; `source` keeps pointing at the root dataset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            inputs.extend_from_slice(self.input(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            source: idx.iter().map(|&i| self.source[i]).collect(),
        }
    }

    /// `(rows, dim)` tensor of the selected rows.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.input(i));
        }
        Tensor::new(vec![idx.len(), self.dim], data)
    }

    pub fn all_inputs(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.dim], self.inputs.clone())
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim).map(|d| format!("x{d}")).collect();
        header.push("label".into());
        w.write_record(&header).expect("in-memory write");
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.input(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Parses the `x0..x{d-1},label` layout written by [`Dataset::to_csv_string`].
    /// With `classes = None` the class count is one past the largest label.
    pub fn from_csv_str(text: &str, classes: Option<usize>) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
        let dim = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
            Error::Parse("dataset csv needs at least one input column and a label".into())
        })?;
        for (d, name) in header.iter().take(dim).enumerate() {
            if name != format!("x{d}") {
                return Err(Error::Parse(format!("column {d} is `{name}`, expected `x{d}`")));
            }
        }
        if &header[dim] != "label" {
            return Err(Error::Parse("last column must be `label`".into()));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            if rec.len() != dim + 1 {
                return Err(Error::Parse(format!("row with {} fields, expected {}", rec.len(), dim + 1)));
            }
            for field in rec.iter().take(dim) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad number `{field}`")))?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!("non-finite value `{field}`")));
                }
                inputs.push(v);
            }
            let y: usize = rec[dim]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad label `{}`", &rec[dim])))?;
            labels.push(y);
        }
        let inferred = labels.iter().max().map_or(1, |m| m + 1);
        let classes = classes.unwrap_or(inferred);
        Dataset::new(dim, classes, inputs, labels).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        BlobsSpec {
            classes: 6,
            dim: 16,
            per_class: 200,
            spread: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blobs {
    pub train: Dataset,
    pub test: Dataset,
}

/// Class centre: a unit simplex vertex pattern when `classes <= dim`,
/// otherwise the binary code of `class + 1`.
fn blob_mean(class: usize, classes: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| {
            let on = if classes <= dim {
                d % classes == class
            } else {
                ((class + 1) >> d) & 1 == 1
            };
            if on {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn draw_blobs(spec: &BlobsSpec, per_class: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = stream(seed);
    let mut inputs = Vec::with_capacity(spec.classes * per_class * spec.dim);
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for c in 0..spec.classes {
        let mean = blob_mean(c, spec.classes, spec.dim);
        for _ in 0..per_class {
            for &m in &mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs.push(m + spec.spread * noise);
            }
            labels.push(c);
        }
    }
    (inputs, labels)
}

/// Gaussian class clusters, min-max normalised per dimension to `[0, 1]`.
///
/// The test split holds a quarter as many samples per class as the train
/// split (20% of the combined pool), drawn from a derived seed and scaled
/// with the train split's ranges.
pub fn make_blobs(spec: &BlobsSpec, seed: u64) -> Result<Blobs> {
    if spec.classes < 2 {
        return Err(Error::config("dataset.classes", "need at least 2 classes"));
    }
    if spec.dim < 2 {
        return Err(Error::config("dataset.dim", "need at least 2 input dimensions"));
    }
    if spec.per_class < 2 {
        return Err(Error::config("dataset.per_class", "need at least 2 samples per class"));
    }
    if !(spec.spread >= 0.0) || !spec.spread.is_finite() {
        return Err(Error::config("dataset.spread", "spread must be a finite non-negative number"));
    }
    if spec.classes > spec.dim && (spec.dim >= usize::BITS as usize || spec.classes >= (1usize << spec.dim)) {
        return Err(Error::config("dataset.classes", "too many classes for distinct centres"));
    }
    let (mut train, train_labels) = draw_blobs(spec, spec.per_class, derive_seed(seed, "dataset/train", 0));
    let test_per_class = spec.per_class.div_ceil(4);
    let (mut test, test_labels) = draw_blobs(spec, test_per_class, derive_seed(seed, "dataset/test", 0));

    let dim = spec.dim;
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in train.chunks(dim) {
        for d in 0..dim {
            lo[d] = lo[d].min(row[d]);
            hi[d] = hi[d].max(row[d]);
        }
    }
    let scale = |v: &mut f64, d: usize| {
        let range = hi[d] - lo[d];
        *v = if range > 0.0 {
            ((*v - lo[d]) / range).clamp(0.0, 1.0)
        } else {
            0.5
        };
    };
    for buf in [&mut train, &mut test] {
        for row in buf.chunks_mut(dim) {
            for (d, v) in row.iter_mut().enumerate() {
                scale(v, d);
            }
        }
    }
    Ok(Blobs {
        train: Dataset::new(dim, spec.classes, train, train_labels)?,
        test: Dataset::new(dim, spec.classes, test, test_labels)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Dirichlet { concentration: f64 },
    LabelSkew { classes_per_client: usize },
}

impl Default for PartitionScheme {
    fn default() -> Self {
        PartitionScheme::LabelSkew { classes_per_client: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub clients: usize,
    pub seed: u64,
}

pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    match spec.scheme {
        PartitionScheme::Dirichlet { concentration } => {
            partition_dirichlet(dataset, spec.clients, concentration, spec.seed)
        }
        PartitionScheme::LabelSkew { classes_per_client } => {
            partition_label_skew(dataset, spec.clients, classes_per_client, spec.seed)
        }
    }
}

/// Symmetric Dirichlet draw computed in log space so tiny concentrations
/// do not underflow to an all-zero vector.
fn dirichlet<R: Rng + ?Sized>(k: usize, concentration: f64, rng: &mut R) -> Vec<f64> {
    let boosted = concentration < 1.0;
    let shape = if boosted { concentration + 1.0 } else { concentration };
    let gamma = Gamma::new(shape, 1.0).expect("positive gamma shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let mut lg = g.ln();
            if boosted {
                // Gamma(a) = Gamma(a + 1) * U^(1/a)
                let u: f64 = 1.0 - rng.random::<f64>();
                lg += u.ln() / concentration;
            }
            lg
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Splits `total` into integer parts proportional to `weights`; remainders
/// go to the largest fractional parts, ties to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Moves one sample from the largest shard into each empty shard.
fn repair_empty(shards: &mut [Vec<usize>]) {
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("at least one shard");
        if shards[donor].len() < 2 {
            break;
        }
        let moved = shards[donor].pop().expect("donor is nonempty");
        shards[empty].push(moved);
    }
}

fn finish(dataset: &Dataset, mut shards: Vec<Vec<usize>>) -> Vec<Dataset> {
    repair_empty(&mut shards);
    shards
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            dataset.subset(&idx)
        })
        .collect()
}

fn class_indices(dataset: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Per class, allocates that class's samples over clients by a symmetric
/// Dirichlet draw.
pub fn partition_dirichlet(dataset: &Dataset, clients: usize, concentration: f64, seed: u64) -> Result<Vec<Dataset>> {
    if clients < 2 {
        return Err(Error::config("clients", "need at least 2 clients"));
    }
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::config("partition.concentration", "must be a positive finite number"));
    }
    if dataset.len() < clients {
        return Err(Error::config(
            "clients",
            format!("dataset of {} samples cannot cover {clients} clients", dataset.len()),
        ));
    }
    let mut rng = stream(derive_seed(seed, "partition/dirichlet", 0));
    let mut shards = vec![Vec::new(); clients];
    for mut idx in class_indices(dataset) {
        idx.shuffle(&mut rng);
        let props = dirichlet(clients, concentration, &mut rng);
        let counts = largest_remainder(idx.len(), &props);
        let mut rest = idx.as_slice();
        for (shard, n) in shards.iter_mut().zip(counts) {
            let (take, tail) = rest.split_at(n);
            shard.extend_from_slice(take);
            rest = tail;
        }
    }
    Ok(finish(dataset, shards))
}

/// Each client holds `classes_per_client` classes, assigned round-robin over
/// a seeded class permutation; a class's samples are split evenly among the
/// clients holding it.
pub fn partition_label_skew(
    dataset: &Dataset,
    clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<Dataset>> {
    let classes = dataset.classes();
    if clients < 2 {
        return Err(Error::config("clients", "need at least 2 clients"));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::config(
            "partition.classes_per_client",
            format!("must lie in 1..={classes}"),
        ));
    }
    if clients * classes_per_client < classes {
        return Err(Error::config(
            "partition.classes_per_client",
            format!("{clients} clients x {classes_per_client} classes leave some class unassigned"),
        ));
    }
    if dataset.len() < clients {
        return Err(Error::config(
            "clients",
            format!("dataset of {} samples cannot cover {clients} clients", dataset.len()),
        ));
    }
    let mut rng = stream(derive_seed(seed, "partition/label_skew", 0));
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(&mut rng);
    let mut holders = vec![Vec::new(); classes];
    for k in 0..clients {
        for j in 0..classes_per_client {
            holders[perm[(k * classes_per_client + j) % classes]].push(k);
        }
    }
    let mut shards = vec![Vec::new(); clients];
    for (c, mut idx) in class_indices(dataset).into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let owners = &holders[c];
        let counts = largest_remainder(idx.len(), &vec![1.0; owners.len()]);
        let mut rest = idx.as_slice();
        for (&k, n) in owners.iter().zip(counts) {
            let (take, tail) = rest.split_at(n);
            shards[k].extend_from_slice(take);
            rest = tail;
        }
    }
    Ok(finish(dataset, shards))
}
