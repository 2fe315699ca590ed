//! Plot-ready CSV tables from sweep runs.
//!
//! For every x axis in {params, flops, sparsity} and every metric present in
//! the runs there is one `series,x,y` table (`<x>__<metric>.csv`) holding one
//! point per cell (means over repeats), sorted by x. Series are method tags.
//! `gap.csv` pairs each sparse cell with its dense baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::RunnerError;
use crate::experiment::RunRecord;
use crate::sweep::{metric_value, SweepRun};

pub const X_AXES: [&str; 3] = ["params", "flops", "sparsity"];
pub const PLOT_METRICS: [&str; 7] = ["clean_accuracy", "ece", "nll", "fgsm_accuracy", "ood_auc", "noise_auc", "grad_flow_norm"];

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory csv");
        for r in &self.rows {
            w.write_record(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

struct CellPoints<'a> {
    method: &'a str,
    group: &'a str,
    records: Vec<&'a RunRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn by_cell(runs: &[SweepRun]) -> Vec<CellPoints<'_>> {
    let mut order = Vec::new();
    let mut map: BTreeMap<&str, CellPoints> = BTreeMap::new();
    for r in runs {
        let Some(rec) = &r.record else { continue };
        map.entry(&r.cell_id)
            .or_insert_with(|| {
                order.push(r.cell_id.as_str());
                CellPoints { method: &rec.tag.method, group: &r.group, records: Vec::new() }
            })
            .records
            .push(rec);
    }
    order.into_iter().map(|id| map.remove(id).unwrap()).collect()
}

/// Builds every table; metrics absent from any run of a cell are skipped
/// for that cell, and metrics absent everywhere get no table.
pub fn emit_plot_data(runs: &[SweepRun]) -> Vec<Table> {
    let cells = by_cell(runs);
    let mut tables = Vec::new();
    for x in X_AXES {
        for metric in PLOT_METRICS {
            let mut points: Vec<(f64, &str, f64)> = cells
                .iter()
                .filter_map(|c| {
                    let ys: Option<Vec<f64>> = c.records.iter().map(|r| metric_value(r, metric)).collect();
                    let ys = ys?;
                    let xm = mean(c.records.iter().map(|r| metric_value(r, x).expect("x axes are always present")));
                    Some((xm, c.method, mean(ys.into_iter())))
                })
                .collect();
            if points.is_empty() {
                continue;
            }
            points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
            tables.push(Table {
                name: format!("{x}__{metric}"),
                header: vec!["series".into(), "x".into(), "y".into()],
                rows: points.into_iter().map(|(xv, s, y)| vec![s.to_string(), xv.to_string(), y.to_string()]).collect(),
            });
        }
    }
    tables.push(gap_table(&cells));
    tables
}

fn gap_table(cells: &[CellPoints]) -> Table {
    let acc = |c: &CellPoints| mean(c.records.iter().map(|r| r.metrics.clean_accuracy));
    let dense: BTreeMap<&str, f64> = cells.iter().filter(|c| c.method == "dense").map(|c| (c.group, acc(c))).collect();
    let mut rows: Vec<(String, f64, Vec<String>)> = cells
        .iter()
        .filter(|c| c.method != "dense")
        .filter_map(|c| {
            let d = *dense.get(c.group)?;
            let s = acc(c);
            let key = c.group.parse::<f64>().unwrap_or(f64::NAN);
            Some((c.method.to_string(), key, vec![c.method.to_string(), c.group.to_string(), d.to_string(), s.to_string(), (d - s).to_string()]))
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Table {
        name: "gap".into(),
        header: ["series", "group", "dense_accuracy", "sparse_accuracy", "gap"].iter().map(|s| s.to_string()).collect(),
        rows: rows.into_iter().map(|r| r.2).collect(),
    }
}

pub fn write_tables(tables: &[Table], dir: &Path) -> Result<(), RunnerError> {
    fs::create_dir_all(dir).map_err(RunnerError::io(dir))?;
    for t in tables {
        let path = dir.join(format!("{}.csv", t.name));
        fs::write(&path, t.to_csv()).map_err(RunnerError::io(path))?;
    }
    Ok(())
}
