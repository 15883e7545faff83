use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric values of one test sample. `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub client_id: usize,
    pub fold: usize,
    pub sample_id: usize,
    pub values: BTreeMap<String, Option<f64>>,
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
    pub undefined: usize,
}

impl Summary {
    fn of(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let undefined = values.len() - defined.len();
        if defined.is_empty() {
            return Self {
                mean: None,
                std: None,
                count: 0,
                undefined,
            };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            count: defined.len(),
            undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<String>,
    pub overall: BTreeMap<String, Summary>,
    pub per_institution: BTreeMap<usize, BTreeMap<String, Summary>>,
    pub samples: Vec<SampleMetrics>,
}

/// Sample-basis aggregation: every test sample counts once overall, and each
/// institution in `clients` gets its own row.
pub fn aggregate_report(samples: Vec<SampleMetrics>, clients: &[usize]) -> MetricsReport {
    let names: BTreeSet<&String> = samples.iter().flat_map(|s| s.values.keys()).collect();
    let metrics: Vec<String> = names.into_iter().cloned().collect();
    let column = |keep: &dyn Fn(&SampleMetrics) -> bool, m: &str| -> Vec<Option<f64>> {
        samples
            .iter()
            .filter(|s| keep(s))
            .map(|s| s.values.get(m).copied().flatten())
            .collect()
    };
    let overall = metrics
        .iter()
        .map(|m| (m.clone(), Summary::of(&column(&|_| true, m))))
        .collect();
    let mut ids: BTreeSet<usize> = clients.iter().copied().collect();
    ids.extend(samples.iter().map(|s| s.client_id));
    let per_institution = ids
        .into_iter()
        .map(|c| {
            let row = metrics
                .iter()
                .map(|m| (m.clone(), Summary::of(&column(&|s| s.client_id == c, m))))
                .collect();
            (c, row)
        })
        .collect();
    MetricsReport {
        metrics,
        overall,
        per_institution,
        samples,
    }
}

impl MetricsReport {
    /// One row per sample: client_id, fold, sample_id, then a column per metric.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["client_id".to_string(), "fold".into(), "sample_id".into()];
        header.extend(self.metrics.iter().cloned());
        out.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.client_id.to_string(), s.fold.to_string(), s.sample_id.to_string()];
            for m in &self.metrics {
                row.push(
                    s.values
                        .get(m)
                        .copied()
                        .flatten()
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                );
            }
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.overall.get(metric).and_then(|s| s.mean)
    }
}
