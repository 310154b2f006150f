//! Mean / std / Δ tables in CSV and aligned text.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use clspool::metrics::aggregate_seeds;

use crate::experiment::RunOutcome;

/// Column order; only metrics present in the runs are shown.
pub const METRIC_ORDER: [&str; 5] = ["mcc", "accuracy", "f1", "spearman", "pearson"];

pub const BASELINE: &str = "baseline";

pub fn metric_label(m: &str) -> &str {
    match m {
        "mcc" => "MCC",
        "accuracy" => "Acc.",
        "f1" => "F1",
        "spearman" => "Sp.",
        "pearson" => "Pr.",
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population std; `None` with a single seed.
    pub std: Option<f64>,
}

impl Cell {
    pub fn from_values(values: Vec<f64>) -> Cell {
        match aggregate_seeds(&values) {
            Ok(a) => Cell {
                values,
                mean: a.mean,
                std: Some(a.std),
            },
            Err(_) => Cell {
                mean: values[0],
                values,
                std: None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub label: String,
    /// Metric name → cell; empty when any seed failed.
    pub cells: BTreeMap<String, Cell>,
    pub failed_seeds: Vec<u64>,
}

impl Row {
    pub fn failed(&self) -> bool {
        !self.failed_seeds.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    /// Header of the row-label column.
    pub row_header: String,
    pub metrics: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<Row>,
    /// Best variant mean minus baseline mean, per metric.
    pub delta: Option<BTreeMap<String, f64>>,
    pub notice: Option<String>,
}

impl Table {
    /// Groups outcomes by label (first-seen order). `labels[i]` names
    /// `outcomes[i]`'s row.
    pub fn build(
        title: &str,
        row_header: &str,
        labels: &[String],
        outcomes: &[RunOutcome],
        seeds: &[u64],
        with_delta: bool,
    ) -> Table {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&RunOutcome>> = BTreeMap::new();
        for (label, o) in labels.iter().zip(outcomes) {
            if !groups.contains_key(label) {
                order.push(label.clone());
            }
            groups.entry(label.clone()).or_default().push(o);
        }
        let mut present: Vec<String> = Vec::new();
        let mut rows = Vec::new();
        for label in order {
            let runs = &groups[&label];
            let failed_seeds: Vec<u64> = runs
                .iter()
                .filter(|o| o.result.is_err())
                .map(|o| o.seed)
                .collect();
            let mut cells = BTreeMap::new();
            if failed_seeds.is_empty() {
                let records: Vec<_> = runs.iter().filter_map(|o| o.result.as_ref().ok()).collect();
                for m in METRIC_ORDER {
                    if records.iter().all(|r| r.eval.contains_key(m)) && !records.is_empty() {
                        let values = records.iter().map(|r| r.eval[m]).collect();
                        cells.insert(m.to_string(), Cell::from_values(values));
                        if !present.iter().any(|p| p == m) {
                            present.push(m.to_string());
                        }
                    }
                }
            }
            rows.push(Row {
                label,
                cells,
                failed_seeds,
            });
        }
        let metrics: Vec<String> = METRIC_ORDER
            .iter()
            .filter(|m| present.iter().any(|p| p == *m))
            .map(|m| m.to_string())
            .collect();

        let (delta, notice) = if with_delta {
            compute_delta(&rows, &metrics)
        } else {
            (None, None)
        };
        Table {
            title: title.to_string(),
            row_header: row_header.to_string(),
            metrics,
            seeds: seeds.to_vec(),
            rows,
            delta,
            notice,
        }
    }

    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(Row::failed)
    }
}

fn compute_delta(
    rows: &[Row],
    metrics: &[String],
) -> (Option<BTreeMap<String, f64>>, Option<String>) {
    let Some(base) = rows.iter().find(|r| r.label == BASELINE) else {
        return (
            None,
            Some("no baseline head in this comparison; Δ row omitted".into()),
        );
    };
    if base.failed() {
        return (
            None,
            Some("baseline runs failed; Δ row omitted".into()),
        );
    }
    let mut delta = BTreeMap::new();
    for m in metrics {
        let best = rows
            .iter()
            .filter(|r| r.label != BASELINE)
            .filter_map(|r| r.cells.get(m).map(|c| c.mean))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
        if let (Some(best), Some(b)) = (best, base.cells.get(m)) {
            delta.insert(m.clone(), best - b.mean);
        }
    }
    if delta.is_empty() {
        return (None, Some("no successful variant heads; Δ row omitted".into()));
    }
    (Some(delta), None)
}

fn seed_list(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn render_grid(header: &[String], body: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in body {
        for (i, c) in row.iter().enumerate().take(cols) {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header) + "\n";
    let rule: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

fn header(t: &Table) -> Vec<String> {
    std::iter::once(t.row_header.clone())
        .chain(t.metrics.iter().map(|m| metric_label(m).to_string()))
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Means ×100 per row and metric, with a closing Δ row.
pub fn render_means(t: &Table) -> String {
    let mut body: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            std::iter::once(r.label.clone())
                .chain(t.metrics.iter().map(|m| match r.cells.get(m) {
                    Some(c) => pct(c.mean),
                    None if r.failed() => "FAILED".into(),
                    None => "-".into(),
                }))
                .collect()
        })
        .collect();
    if let Some(delta) = &t.delta {
        body.push(
            std::iter::once("Δ".to_string())
                .chain(t.metrics.iter().map(|m| match delta.get(m) {
                    Some(d) => format!("{:+.2}", 100.0 * d),
                    None => "-".into(),
                }))
                .collect(),
        );
    }
    let mut out = format!(
        "{} (mean over seeds {}, ×100)\n",
        t.title,
        seed_list(&t.seeds)
    );
    out.push_str(&render_grid(&header(t), &body));
    if let Some(n) = &t.notice {
        let _ = writeln!(out, "note: {n}");
    }
    for r in t.rows.iter().filter(|r| r.failed()) {
        let _ = writeln!(
            out,
            "note: {} failed for seed(s) {}",
            r.label,
            seed_list(&r.failed_seeds)
        );
    }
    out
}

/// Population standard deviations ×100 per row and metric.
pub fn render_stds(t: &Table) -> String {
    let body: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            std::iter::once(r.label.clone())
                .chain(t.metrics.iter().map(|m| match r.cells.get(m) {
                    Some(Cell { std: Some(s), .. }) => pct(*s),
                    Some(_) => "n/a".into(),
                    None if r.failed() => "FAILED".into(),
                    None => "-".into(),
                }))
                .collect()
        })
        .collect();
    let mut out = format!(
        "{} (population std over seeds {}, ×100)\n",
        t.title,
        seed_list(&t.seeds)
    );
    out.push_str(&render_grid(&header(t), &body));
    out
}

fn num(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One line per (row, metric): `label,metric,mean,std,values`; values are
/// `;`-separated in seed order. Δ lines use the label `delta`.
pub fn to_csv(t: &Table) -> String {
    let mut out = format!("{},metric,mean,std,values\n", t.row_header);
    for r in &t.rows {
        for m in &t.metrics {
            match r.cells.get(m) {
                Some(c) => {
                    let values: Vec<String> = c.values.iter().map(f64::to_string).collect();
                    let _ = writeln!(
                        out,
                        "{},{m},{},{},{}",
                        csv_field(&r.label),
                        c.mean,
                        num(c.std),
                        values.join(";")
                    );
                }
                None => {
                    let _ = writeln!(out, "{},{m},,,failed", csv_field(&r.label));
                }
            }
        }
    }
    if let Some(delta) = &t.delta {
        for m in &t.metrics {
            if let Some(d) = delta.get(m) {
                let _ = writeln!(out, "delta,{m},{d},,");
            }
        }
    }
    out
}

/// Quotes fields containing commas (head specs do).
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::RunRecord;
    use clspool::heads::HeadKind;

    fn outcome(head: &str, seed: u64, acc: Option<f64>) -> RunOutcome {
        RunOutcome {
            head: head.parse().unwrap_or(HeadKind::Baseline),
            seed,
            result: match acc {
                Some(a) => Ok(RunRecord {
                    task: "t".into(),
                    head: head.into(),
                    seed,
                    metric: "accuracy".into(),
                    eval: [("accuracy".to_string(), a)].into(),
                    train: BTreeMap::new(),
                    train_examples: 1,
                    eval_examples: 1,
                    steps: 1,
                    final_loss: 0.0,
                    num_parameters: 1,
                    wall_seconds: 0.0,
                    config: BTreeMap::new(),
                }),
                None => Err("boom".into()),
            },
        }
    }

    fn table(runs: &[(&str, u64, Option<f64>)]) -> Table {
        let outcomes: Vec<_> = runs.iter().map(|&(h, s, a)| outcome(h, s, a)).collect();
        let labels: Vec<String> = runs.iter().map(|r| r.0.to_string()).collect();
        Table::build("t", "head", &labels, &outcomes, &[1, 2], true)
    }

    #[test]
    fn delta_is_best_variant_minus_baseline() {
        let t = table(&[
            ("baseline", 1, Some(0.5)),
            ("baseline", 2, Some(0.7)),
            ("mha:h=4", 1, Some(0.8)),
            ("mha:h=4", 2, Some(0.8)),
            ("maxcls:k=3", 1, Some(0.9)),
            ("maxcls:k=3", 2, Some(0.5)),
        ]);
        let d = t.delta.as_ref().unwrap()["accuracy"];
        assert_eq!(d, 0.8 - 0.6);
        let std = t.row("baseline").unwrap().cells["accuracy"].std.unwrap();
        assert!((std - 0.1).abs() < 1e-12);
        let text = render_means(&t);
        assert!(text.contains("Δ"));
        assert!(text.contains("+20.00"));
    }

    #[test]
    fn missing_baseline_omits_delta_with_notice() {
        let t = table(&[("mha:h=4", 1, Some(0.8)), ("maxcls:k=3", 1, Some(0.9))]);
        assert!(t.delta.is_none());
        assert!(render_means(&t).contains("Δ row omitted"));
    }

    #[test]
    fn failures_are_marked() {
        let t = table(&[
            ("baseline", 1, Some(0.5)),
            ("mha:h=4", 1, None),
        ]);
        assert!(t.any_failed());
        assert!(render_means(&t).contains("FAILED"));
        assert!(to_csv(&t).contains("mha:h=4,accuracy,,,failed"));
    }

    #[test]
    fn single_seed_has_no_std() {
        let t = table(&[("baseline", 1, Some(0.5)), ("mha:h=4", 1, Some(0.75))]);
        assert_eq!(t.row("baseline").unwrap().cells["accuracy"].std, None);
        assert!(render_stds(&t).contains("n/a"));
    }

    #[test]
    fn csv_quotes_commas() {
        assert_eq!(csv_field("maxseq+mha:k=3,h=4"), "\"maxseq+mha:k=3,h=4\"");
        assert_eq!(csv_field("baseline"), "baseline");
    }
}
