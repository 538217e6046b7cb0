use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Version written in the first column of every report row.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    /// Spearman correlation between two maps.
    Spearman,
    /// Pointing game outcome, 1 for a hit and 0 for a miss.
    Hit,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Spearman => "spearman",
            Metric::Hit => "hit",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// Which sub-experiment the row belongs to, e.g. a layer or randomisation depth.
    pub group: String,
    pub metric: Metric,
    pub image_id: usize,
    pub class: usize,
    pub value: f64,
}

/// Summary of one `(group, metric)` slice, always recomputed from the records.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub group: String,
    pub metric: Metric,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Mean of per-class hit rates; only for [`Metric::Hit`].
    pub accuracy: Option<f64>,
    pub per_class: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn new(records: Vec<EvalRecord>) -> Self {
        Self { records }
    }

    pub fn push(&mut self, record: EvalRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.records.extend(other.records);
    }

    /// Groups in first-appearance order.
    pub fn groups(&self) -> Vec<(String, Metric)> {
        let mut out: Vec<(String, Metric)> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|(g, m)| g == &r.group && *m == r.metric) {
                out.push((r.group.clone(), r.metric));
            }
        }
        out
    }

    pub fn aggregate(&self, group: &str, metric: Metric) -> Option<Aggregate> {
        let rows: Vec<&EvalRecord> = self.records.iter().filter(|r| r.group == group && r.metric == metric).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.value).sum::<f64>() / n;
        let std = (rows.iter().map(|r| (r.value - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &rows {
            let e = per_class.entry(r.class).or_default();
            e.0 += r.value;
            e.1 += 1;
        }
        let per_class: BTreeMap<usize, f64> = per_class.into_iter().map(|(c, (s, k))| (c, s / k as f64)).collect();
        let accuracy = (metric == Metric::Hit).then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
        Some(Aggregate { group: group.to_string(), metric, count: rows.len(), mean, std, accuracy, per_class })
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        self.groups().iter().filter_map(|(g, m)| self.aggregate(g, *m)).collect()
    }

    /// Mean value of one `(group, metric)` slice.
    pub fn mean(&self, group: &str, metric: Metric) -> Option<f64> {
        self.aggregate(group, metric).map(|a| a.mean)
    }

    pub fn accuracy(&self, group: &str) -> Option<f64> {
        self.aggregate(group, Metric::Hit).and_then(|a| a.accuracy)
    }

    /// CSV with one row per record followed by one aggregate row per group.
    ///
    /// Columns: `schema_version,row,group,metric,image_id,class,value,count,mean,std,accuracy`.
    /// Record rows leave the aggregate columns empty and vice versa.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record([
            "schema_version",
            "row",
            "group",
            "metric",
            "image_id",
            "class",
            "value",
            "count",
            "mean",
            "std",
            "accuracy",
        ])
        .map_err(csv_err)?;
        let v = REPORT_SCHEMA_VERSION.to_string();
        for r in &self.records {
            w.write_record([
                v.as_str(),
                "record",
                &r.group,
                r.metric.name(),
                &r.image_id.to_string(),
                &r.class.to_string(),
                &r.value.to_string(),
                "",
                "",
                "",
                "",
            ])
            .map_err(csv_err)?;
        }
        for a in self.aggregates() {
            w.write_record([
                v.as_str(),
                "aggregate",
                &a.group,
                a.metric.name(),
                "",
                "",
                "",
                &a.count.to_string(),
                &a.mean.to_string(),
                &a.std.to_string(),
                &a.accuracy.map(|x| x.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}
