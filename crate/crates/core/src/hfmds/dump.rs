//! On-disk synthetic dataset dumps.
//!
//! Each client contributes three files to a dump directory:
//! `client_NN.json` (metadata), `client_NN.csv` (synthetic rows) and
//! `client_NN_real.csv` (the client's shard, which `paired_index` points into).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SyntheticDataset, SyntheticLabel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::psnr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpMeta {
    pub client: usize,
    pub round: usize,
    pub syn_size: usize,
    pub mu: f64,
    pub lambda: f64,
    pub model_fingerprint: String,
    pub samples: usize,
    pub input_dim: usize,
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    pub rows_file: String,
    pub real_file: String,
}

impl DumpMeta {
    pub fn parse(text: &str) -> Result<DumpMeta> {
        let meta: DumpMeta = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if meta.initial_losses.len() != meta.samples || meta.final_losses.len() != meta.samples {
            return Err(Error::Parse("loss arrays do not match the sample count".into()));
        }
        for f in [&meta.rows_file, &meta.real_file] {
            if f.is_empty() || f.contains(['/', '\\']) || f.starts_with('.') {
                return Err(Error::Parse(format!("dump file name `{f}` must be a plain file name")));
            }
        }
        Ok(meta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DumpRow {
    pub input: Vec<f64>,
    pub label: usize,
    pub paired_index: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn rows_csv(syn: &SyntheticDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..syn.input_dim).map(|d| format!("x{d}")).collect();
    header.extend(["label", "paired_index", "initial_loss", "final_loss"].map(String::from));
    w.write_record(&header).expect("in-memory write");
    for s in &syn.samples {
        let SyntheticLabel::Hard(label) = s.label else {
            return Err(Error::contract("only hard-labelled synthetic data can be dumped"));
        };
        let mut rec: Vec<String> = s.input.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        rec.push(s.paired_index.to_string());
        rec.push(opt_str(s.initial_loss));
        rec.push(opt_str(s.final_loss));
        w.write_record(&rec).expect("in-memory write");
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8"))
}

/// Writes one client's synthetic dataset and its real shard into `dir`.
pub fn write_dump(
    dir: &Path,
    syn: &SyntheticDataset,
    shard: &Dataset,
    syn_size: usize,
    mu: f64,
    lambda: f64,
) -> Result<Vec<PathBuf>> {
    let client = syn
        .client
        .ok_or_else(|| Error::contract("dump needs a per-client synthetic dataset"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("client_{client:02}");
    let meta = DumpMeta {
        client,
        round: syn.round,
        syn_size,
        mu,
        lambda,
        model_fingerprint: syn.model_fingerprint.clone(),
        samples: syn.len(),
        input_dim: syn.input_dim,
        initial_losses: syn.samples.iter().map(|s| s.initial_loss.unwrap_or(f64::NAN)).collect(),
        final_losses: syn.samples.iter().map(|s| s.final_loss.unwrap_or(f64::NAN)).collect(),
        rows_file: format!("{stem}.csv"),
        real_file: format!("{stem}_real.csv"),
    };
    let meta_path = dir.join(format!("{stem}.json"));
    let rows_path = dir.join(&meta.rows_file);
    let real_path = dir.join(&meta.real_file);
    let json = serde_json::to_string_pretty(&meta).expect("dump metadata serialises") + "\n";
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    std::fs::write(&rows_path, rows_csv(syn)?).map_err(|e| Error::io(&rows_path, e))?;
    shard.write_csv(&real_path)?;
    Ok(vec![meta_path, rows_path, real_path])
}

fn parse_f64(field: &str, allow_empty: bool) -> Result<f64> {
    let field = field.trim();
    if allow_empty && field.is_empty() {
        return Ok(f64::NAN);
    }
    field.parse().map_err(|_| Error::Parse(format!("bad number `{field}`")))
}

/// Parses a synthetic rows file (`x0..x{d-1},label,paired_index,initial_loss,final_loss`).
pub fn parse_dump_csv(text: &str) -> Result<Vec<DumpRow>> {
    const TAIL: [&str; 4] = ["label", "paired_index", "initial_loss", "final_loss"];
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let dim = header
        .len()
        .checked_sub(TAIL.len())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Parse("too few columns in synthetic dump".into()))?;
    for (d, name) in header.iter().take(dim).enumerate() {
        if name != format!("x{d}") {
            return Err(Error::Parse(format!("column {d} is `{name}`, expected `x{d}`")));
        }
    }
    if header.iter().skip(dim).ne(TAIL) {
        return Err(Error::Parse("unexpected trailing columns in synthetic dump".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() != dim + TAIL.len() {
            return Err(Error::Parse(format!("row with {} fields", rec.len())));
        }
        let input = rec
            .iter()
            .take(dim)
            .map(|f| parse_f64(f, false))
            .collect::<Result<Vec<_>>>()?;
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite synthetic input".into()));
        }
        let int = |f: &str| -> Result<usize> {
            f.trim().parse().map_err(|_| Error::Parse(format!("bad index `{f}`")))
        };
        rows.push(DumpRow {
            input,
            label: int(&rec[dim])?,
            paired_index: int(&rec[dim + 1])?,
            initial_loss: parse_f64(&rec[dim + 2], true)?,
            final_loss: parse_f64(&rec[dim + 3], true)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub client: usize,
    pub index: usize,
    pub psnr: f64,
    pub loss_drop: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectReport {
    pub round: Option<usize>,
    pub samples: Vec<SampleReport>,
}

impl InspectReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.psnr))
    }

    pub fn mean_loss_drop(&self) -> Option<f64> {
        mean(self.samples.iter().map(|s| s.loss_drop).filter(|v| v.is_finite()))
    }

    /// Fraction of samples whose loss went down during synthesis.
    pub fn improved_fraction(&self) -> Option<f64> {
        let finite: Vec<f64> = self.samples.iter().map(|s| s.loss_drop).filter(|v| v.is_finite()).collect();
        (!finite.is_empty()).then(|| finite.iter().filter(|&&d| d > 0.0).count() as f64 / finite.len() as f64)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Per-sample PSNR against the paired real row and loss drop, for every
/// client dump found in `dir`.
pub fn inspect_dump(dir: &Path) -> Result<InspectReport> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut metas: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("client_"))
        })
        .collect();
    metas.sort();
    if metas.is_empty() {
        return Err(Error::contract(format!("no client dumps in {}", dir.display())));
    }
    let mut report = InspectReport {
        round: None,
        samples: Vec::new(),
    };
    for meta_path in metas {
        let meta = DumpMeta::parse(&read(&meta_path)?)?;
        report.round = Some(meta.round);
        let rows = parse_dump_csv(&read(&dir.join(&meta.rows_file))?)?;
        let real = Dataset::from_csv_str(&read(&dir.join(&meta.real_file))?, None)?;
        for (i, row) in rows.iter().enumerate() {
            if row.paired_index >= real.len() {
                return Err(Error::contract(format!(
                    "client {}: paired index {} outside shard of {}",
                    meta.client,
                    row.paired_index,
                    real.len()
                )));
            }
            report.samples.push(SampleReport {
                client: meta.client,
                index: i,
                psnr: psnr(&row.input, real.input(row.paired_index))?,
                loss_drop: row.initial_loss - row.final_loss,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hfmds::SyntheticSample;

    fn copy_of_real(shard: &Dataset) -> SyntheticDataset {
        SyntheticDataset {
            samples: (0..shard.len())
                .map(|i| SyntheticSample {
                    input: shard.input(i).to_vec(),
                    label: SyntheticLabel::Hard(shard.labels()[i]),
                    client: 3,
                    round: 20,
                    paired_index: i,
                    initial_loss: Some(2.0),
                    final_loss: Some(0.5),
                })
                .collect(),
            input_dim: shard.dim(),
            feature_dim: 2,
            classes: shard.classes(),
            client: Some(3),
            round: 20,
            model_fingerprint: "abc".into(),
        }
    }

    #[test]
    fn identical_dump_reports_cap() {
        let dir = tempfile::tempdir().unwrap();
        let shard = Dataset::new(2, 2, vec![0.1, 0.2, 0.7, 0.9], vec![0, 1]).unwrap();
        let files = write_dump(dir.path(), &copy_of_real(&shard), &shard, 100, 0.5, 0.5).unwrap();
        assert_eq!(files.len(), 3);
        let report = inspect_dump(dir.path()).unwrap();
        assert_eq!(report.round, Some(20));
        assert_eq!(report.samples.len(), 2);
        assert_eq!(report.mean_psnr(), Some(100.0));
        assert_eq!(report.mean_loss_drop(), Some(1.5));
        assert_eq!(report.improved_fraction(), Some(1.0));
    }

    #[test]
    fn rows_round_trip() {
        let shard = Dataset::new(2, 2, vec![0.1, 0.2, 0.7, 0.9], vec![0, 1]).unwrap();
        let rows = parse_dump_csv(&rows_csv(&copy_of_real(&shard)).unwrap()).unwrap();
        assert_eq!(rows[1].input, vec![0.7, 0.9]);
        assert_eq!((rows[1].label, rows[1].paired_index), (1, 1));
    }

    #[test]
    fn malformed_inputs_are_errors() {
        assert!(parse_dump_csv("").is_err());
        assert!(parse_dump_csv("x0,label,paired_index,initial_loss\n").is_err());
        assert!(parse_dump_csv("x0,label,paired_index,initial_loss,final_loss\nzz,0,0,1,1\n").is_err());
        assert!(DumpMeta::parse("{}").is_err());
        let meta = r#"{"client":0,"round":1,"syn_size":1,"mu":0.5,"lambda":0.5,"model_fingerprint":"",
            "samples":0,"input_dim":1,"initial_losses":[],"final_losses":[],
            "rows_file":"../x.csv","real_file":"r.csv"}"#;
        assert!(DumpMeta::parse(meta).is_err());
    }
}
