use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::run::{BestCheckpoint, ClusterSummary, CurvePoint};
use super::setup::ClientSummary;
use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::evaluation::MetricsReport;
use crate::param::{Block, BlockMap};
use crate::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub client_ids: Vec<usize>,
    pub curves: Vec<CurvePoint>,
    /// Selected global checkpoint; absent for personalized methods.
    pub best: Option<BestCheckpoint>,
    /// Selected checkpoint per client for personalized methods.
    pub client_best: BTreeMap<usize, BestCheckpoint>,
    pub clusters: Option<ClusterSummary>,
    pub cost: CostReport,
    pub sizes: Vec<ClientSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub folds: Vec<FoldReport>,
    pub metrics: MetricsReport,
    /// Hex SHA-256 of the report with this field emptied and the
    /// non-semantic config fields (workers, output_dir) cleared.
    pub content_hash: String,
}

impl RunReport {
    pub fn new(config: ExperimentConfig, folds: Vec<FoldReport>, metrics: MetricsReport) -> Result<Self> {
        let mut r = RunReport {
            algorithm: config.algorithm.id().to_string(),
            seed: config.seed,
            config,
            folds,
            metrics,
            content_hash: String::new(),
        };
        r.content_hash = r.compute_hash()?;
        Ok(r)
    }

    pub fn compute_hash(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.content_hash.clear();
        canon.config.workers = None;
        canon.config.output_dir = None;
        let bytes = serde_json::to_vec(&canon)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Writes curves as one row per round per fold, with one validation
    /// column per client.
    pub fn write_curves_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let ids: Vec<usize> = self.folds.first().map(|f| f.client_ids.clone()).unwrap_or_default();
        let mut header: Vec<String> = [
            "fold",
            "phase",
            "round",
            "participants",
            "train_loss",
            "global_val_loss",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(ids.iter().map(|id| format!("client_{id}_val_loss")));
        out.write_record(&header)?;
        for f in &self.folds {
            for p in &f.curves {
                let mut row = vec![
                    f.fold.to_string(),
                    p.phase.clone(),
                    p.round.to_string(),
                    p.participants.to_string(),
                    p.train_loss.to_string(),
                    p.global_val_loss.to_string(),
                ];
                row.extend(p.client_val_loss.iter().map(|v| v.to_string()));
                out.write_record(&row)?;
            }
        }
        out.flush().map_err(|e| Error::io("curves.csv", e))?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes report.json, metrics.csv, cost.csv, curves.csv and the selected
/// parameter vectors into `dir`. Returns the written paths.
pub fn emit_report(
    report: &RunReport,
    models: &BTreeMap<usize, ParamVector>,
    global: Option<&ParamVector>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let path = dir.join("report.json");
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let path = dir.join("metrics.csv");
    report.metrics.write_csv(create(&path)?)?;
    written.push(path);

    let path = dir.join("cost.csv");
    let costs: Vec<CostReport> = report.folds.iter().map(|f| f.cost.clone()).collect();
    crate::cost::write_csv(&costs, create(&path)?)?;
    written.push(path);

    let path = dir.join("curves.csv");
    report.write_curves_csv(create(&path)?)?;
    written.push(path);

    // models belong to the last fold that ran
    let model_dir = match report.folds.as_slice() {
        [_, .., last] => dir.join(format!("fold_{}", last.fold)),
        _ => dir.to_path_buf(),
    };
    fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
    let alg = &report.algorithm;
    if let Some(g) = global {
        let path = model_dir.join(format!("global_{alg}.params"));
        write_params(g, &path)?;
        written.push(path);
    }
    for (id, w) in models {
        let path = model_dir.join(format!("client_{id}_{alg}.params"));
        write_params(w, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Little-endian: `u64` dim, `u64` block count, then per block `u64` name
/// length, name bytes, `u64` start, `u64` length; then the `f64` values.
pub fn write_params(w: &ParamVector, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * w.dim());
    buf.extend((w.dim() as u64).to_le_bytes());
    buf.extend((w.layout().len() as u64).to_le_bytes());
    for b in w.layout().blocks() {
        buf.extend((b.name.len() as u64).to_le_bytes());
        buf.extend(b.name.as_bytes());
        buf.extend((b.start as u64).to_le_bytes());
        buf.extend((b.len as u64).to_le_bytes());
    }
    for v in w.values() {
        buf.extend(v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<usize> {
        let s = self.take(8)?;
        usize::try_from(u64::from_le_bytes(s.try_into().ok()?)).ok()
    }
}

pub fn read_params(path: &Path) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Config(format!("{}: malformed parameter file ({what})", path.display()));
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let dim = cur.u64().ok_or_else(|| bad("truncated"))?;
    let n_blocks = cur.u64().ok_or_else(|| bad("truncated"))?;
    let mut blocks = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        let n = cur.u64().ok_or_else(|| bad("truncated"))?;
        let name = cur.take(n).ok_or_else(|| bad("truncated"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("block name is not UTF-8"))?;
        let start = cur.u64().ok_or_else(|| bad("truncated"))?;
        let len = cur.u64().ok_or_else(|| bad("truncated"))?;
        blocks.push(Block { name, start, len });
    }
    let raw = dim
        .checked_mul(8)
        .and_then(|n| cur.take(n))
        .ok_or_else(|| bad("truncated"))?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let layout = BlockMap::from_blocks(blocks).map_err(|e| bad(&e.to_string()))?;
    ParamVector::new(values, layout).map_err(|e| bad(&e.to_string()))
}
