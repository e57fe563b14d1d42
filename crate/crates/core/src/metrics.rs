//! Metrics persistence: append-only delimiter-separated rows plus the
//! summary derived from them.
//!
//! One row per observation, header `round,client,domain,split,metric,value,
//! seed`, LF line endings. Values print with shortest round-trip float
//! formatting, so identical runs produce byte-identical files. The summary
//! is a pure function of the parsed rows: everything it reports can be
//! recomputed from the metrics file alone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::federation::RoundRecord;

pub const HEADER: &str = "round,client,domain,split,metric,value,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: u64,
    pub client: usize,
    pub domain: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl MetricRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round, self.client, self.domain, self.split, self.metric, self.value, self.seed
        )
    }
}

/// Flatten a round record into metric rows (train losses, test accuracies,
/// communication counts). Wall-clock duration is intentionally omitted so
/// reruns stay byte-identical.
pub fn rows_from_record(record: &RoundRecord, seed: u64) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for client in &record.clients {
        for (name, value) in &client.train_losses {
            rows.push(MetricRow {
                round: record.round,
                client: client.client,
                domain: client.domain.clone(),
                split: "train".into(),
                metric: name.clone(),
                value: *value,
                seed,
            });
        }
        for (domain, accuracy) in &client.accuracies {
            rows.push(MetricRow {
                round: record.round,
                client: client.client,
                domain: domain.clone(),
                split: "test".into(),
                metric: "accuracy".into(),
                value: *accuracy,
                seed,
            });
        }
        if client.params_down > 0 || client.params_up > 0 {
            for (metric, value) in [
                ("params_up", client.params_up),
                ("params_down", client.params_down),
                ("bytes_up", client.bytes_up),
                ("bytes_down", client.bytes_down),
            ] {
                rows.push(MetricRow {
                    round: record.round,
                    client: client.client,
                    domain: client.domain.clone(),
                    split: "comm".into(),
                    metric: metric.into(),
                    value: value as f64,
                    seed,
                });
            }
        }
    }
    rows
}

/// Append-only writer. Rows are buffered per round and written as one
/// chunk, then flushed, so a crash never leaves a partial row behind.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        out.write_all(HEADER.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn write_rows(&mut self, rows: &[MetricRow]) -> Result<()> {
        let mut chunk = String::new();
        for row in rows {
            chunk.push_str(&row.to_line());
            chunk.push('\n');
        }
        self.out.write_all(chunk.as_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parse a metrics file, with line numbers in every diagnostic. An eighth
/// `strategy` column (added by merge tooling) is accepted and returned.
pub fn parse_metrics(text: &str, file: &str) -> Result<(Vec<MetricRow>, Vec<Option<String>>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        file: file.into(),
        line: 1,
        message: "empty metrics file".into(),
    })?;
    let has_strategy = match header.trim_end() {
        h if h == HEADER => false,
        h if h == format!("{HEADER},strategy") => true,
        other => {
            return Err(Error::Parse {
                file: file.into(),
                line: 1,
                message: format!("unexpected header '{other}'"),
            })
        }
    };
    let mut rows = Vec::new();
    let mut strategies = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let expected = if has_strategy { 8 } else { 7 };
        if cells.len() != expected {
            return Err(Error::Parse {
                file: file.into(),
                line: line_no,
                message: format!("expected {expected} columns, found {}", cells.len()),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            file: file.into(),
            line: line_no,
            message: format!("bad {what}"),
        };
        rows.push(MetricRow {
            round: cells[0].parse().map_err(|_| parse_err("round"))?,
            client: cells[1].parse().map_err(|_| parse_err("client"))?,
            domain: cells[2].to_string(),
            split: cells[3].to_string(),
            metric: cells[4].to_string(),
            value: cells[5].parse().map_err(|_| parse_err("value"))?,
            seed: cells[6].parse().map_err(|_| parse_err("seed"))?,
        });
        strategies.push(if has_strategy {
            Some(cells[7].to_string())
        } else {
            None
        });
    }
    Ok((rows, strategies))
}

pub fn parse_metrics_file(path: &Path) -> Result<(Vec<MetricRow>, Vec<Option<String>>)> {
    let text = std::fs::read_to_string(path)?;
    parse_metrics(&text, &path.display().to_string())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: 0.0, std: 0.0, n: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    MeanStd { mean, std: var.sqrt(), n }
}

/// Final-accuracy summary across seeds: per-domain and average accuracy in
/// percentage points, mean plus standard deviation over seeds.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Summary {
    pub strategy: String,
    pub final_round: u64,
    pub per_domain: BTreeMap<String, MeanStd>,
    pub average: MeanStd,
    pub seeds: Vec<u64>,
}

/// Compute the summary from metric rows. Only `split == "test"` accuracy
/// rows at the last evaluated round of each seed count.
pub fn summarize(rows: &[MetricRow], strategy: &str) -> Result<Summary> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return Err(Error::config("no metric rows to summarize"));
    }
    let mut per_domain_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut averages = Vec::new();
    let mut final_round = 0;
    for &seed in &seeds {
        let last_round = rows
            .iter()
            .filter(|r| r.seed == seed && r.split == "test" && r.metric == "accuracy")
            .map(|r| r.round)
            .max()
            .ok_or_else(|| Error::config(format!("seed {seed}: no accuracy rows")))?;
        final_round = final_round.max(last_round);
        let mut domain_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for row in rows.iter().filter(|r| {
            r.seed == seed && r.round == last_round && r.split == "test" && r.metric == "accuracy"
        }) {
            domain_values
                .entry(row.domain.clone())
                .or_default()
                .push(row.value * 100.0);
        }
        let mut domain_means = Vec::new();
        for (domain, values) in domain_values {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            per_domain_values.entry(domain).or_default().push(mean);
            domain_means.push(mean);
        }
        averages.push(domain_means.iter().sum::<f64>() / domain_means.len() as f64);
    }
    Ok(Summary {
        strategy: strategy.to_string(),
        final_round,
        per_domain: per_domain_values
            .into_iter()
            .map(|(domain, values)| (domain, mean_std(&values)))
            .collect(),
        average: mean_std(&averages),
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for seed in [1u64, 2] {
            for round in [1u64, 2] {
                for (client, domain) in [(0usize, "a"), (1, "b")] {
                    rows.push(MetricRow {
                        round,
                        client,
                        domain: domain.into(),
                        split: "test".into(),
                        metric: "accuracy".into(),
                        value: 0.5 + 0.1 * round as f64 + 0.01 * seed as f64,
                        seed,
                    });
                }
            }
        }
        rows
    }

    #[test]
    fn write_parse_roundtrip() {
        let rows = sample_rows();
        let mut buf = Vec::new();
        {
            let mut writer = MetricsWriter::new(&mut buf).unwrap();
            writer.write_rows(&rows).unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let (parsed, strategies) = parse_metrics(&text, "mem").unwrap();
        assert_eq!(parsed, rows);
        assert!(strategies.iter().all(|s| s.is_none()));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = format!("{HEADER}\n1,0,a,test,accuracy,0.5,1\n1,0,a,test\n");
        let err = parse_metrics(&text, "mem").unwrap_err();
        assert!(err.to_string().contains("mem:3"), "{err}");
    }

    #[test]
    fn summary_uses_final_round_and_percent_scale() {
        let rows = sample_rows();
        let summary = summarize(&rows, "fedavg").unwrap();
        assert_eq!(summary.final_round, 2);
        assert_eq!(summary.seeds, vec![1, 2]);
        // Final round values: 0.71/0.72 per domain for seeds 1/2.
        assert!((summary.average.mean - 71.5).abs() < 1e-9);
        assert_eq!(summary.per_domain.len(), 2);
        assert_eq!(summary.average.n, 2);
    }

    #[test]
    fn summary_is_pure_function_of_rows() {
        let rows = sample_rows();
        assert_eq!(summarize(&rows, "x").unwrap(), summarize(&rows, "x").unwrap());
    }

    #[test]
    fn strategy_column_variant_is_accepted() {
        let text = format!("{HEADER},strategy\n1,0,a,test,accuracy,0.5,1,fedavg\n");
        let (rows, strategies) = parse_metrics(&text, "mem").unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(strategies[0].as_deref(), Some("fedavg"));
    }
}
