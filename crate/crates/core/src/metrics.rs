//! RMSE, anomaly correlation and report tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_io::GridField;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Describes the ACC variant in every report.
pub const ACC_NOTE: &str = "ACC: centered anomaly correlation per variable, spatially pooled over all \
frames, anomalies relative to the training-split per-cell mean; no latitude weighting";

/// Per-cell, per-variable mean of the training split, layout `[y][x][var]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub ny: usize,
    pub nx: usize,
    pub names: Vec<String>,
    pub mean: Vec<f64>,
}

impl Climatology {
    pub fn from_training<T: Scalar>(train: &GridField<T>) -> Self {
        let n = train.frame_len();
        let mut mean = vec![0.0; n];
        for t in 0..train.nt() {
            for (m, v) in mean.iter_mut().zip(train.frame(t)) {
                *m += v.f64();
            }
        }
        let nt = train.nt().max(1) as f64;
        for m in &mut mean {
            *m /= nt;
        }
        Climatology {
            ny: train.ny(),
            nx: train.nx(),
            names: train.names().to_vec(),
            mean,
        }
    }

    fn check<T: Scalar>(&self, field: &GridField<T>) -> Result<()> {
        if field.ny() != self.ny || field.nx() != self.nx || field.names() != self.names.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "climatology",
                left: vec![self.ny, self.nx, self.names.len()],
                right: vec![field.ny(), field.nx(), field.nvars()],
            });
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(op: &'static str, a: &GridField<T>, b: &GridField<T>) -> Result<()> {
    if a.dims() != b.dims() || a.names() != b.names() {
        let (t1, y1, x1, h1) = a.dims();
        let (t2, y2, x2, h2) = b.dims();
        return Err(Error::ShapeMismatch {
            op,
            left: vec![t1, y1, x1, h1],
            right: vec![t2, y2, x2, h2],
        });
    }
    Ok(())
}

/// Root mean squared error per variable. `mask` selects grid cells
/// (`[y][x]`, true = counted) and applies to every frame.
pub fn rmse<T: Scalar>(pred: &GridField<T>, truth: &GridField<T>, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    check_pair("rmse", pred, truth)?;
    let (nt, ny, nx, h) = pred.dims();
    if let Some(m) = mask {
        if m.len() != ny * nx {
            return Err(Error::ShapeMismatch {
                op: "rmse mask",
                left: vec![ny, nx],
                right: vec![m.len()],
            });
        }
    }
    let mut ss = vec![0.0; h];
    let mut count = 0usize;
    for t in 0..nt {
        let (p, o) = (pred.frame(t), truth.frame(t));
        for cell in 0..ny * nx {
            if mask.is_some_and(|m| !m[cell]) {
                continue;
            }
            count += 1;
            for v in 0..h {
                let d = p[cell * h + v].f64() - o[cell * h + v].f64();
                ss[v] += d * d;
            }
        }
    }
    if count == 0 {
        return Err(Error::config("rmse over an empty selection"));
    }
    Ok(ss.into_iter().map(|s| (s / count as f64).sqrt()).collect())
}

/// Anomaly correlation of one variable; `degenerate` when either anomaly
/// field is identically zero, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccValue {
    pub value: f64,
    pub degenerate: bool,
}

pub fn acc<T: Scalar>(pred: &GridField<T>, truth: &GridField<T>, clim: &Climatology) -> Result<Vec<AccValue>> {
    check_pair("acc", pred, truth)?;
    clim.check(pred)?;
    let h = pred.nvars();
    let (mut fo, mut ff, mut oo) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
    for t in 0..pred.nt() {
        let (p, o) = (pred.frame(t), truth.frame(t));
        for (i, c) in clim.mean.iter().enumerate() {
            let v = i % h;
            let fa = p[i].f64() - c;
            let oa = o[i].f64() - c;
            fo[v] += fa * oa;
            ff[v] += fa * fa;
            oo[v] += oa * oa;
        }
    }
    Ok((0..h)
        .map(|v| {
            if ff[v] == 0.0 || oo[v] == 0.0 {
                AccValue {
                    value: 0.0,
                    degenerate: true,
                }
            } else {
                AccValue {
                    value: (fo[v] / (ff[v] * oo[v]).sqrt()).clamp(-1.0, 1.0),
                    degenerate: false,
                }
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMetrics {
    pub name: String,
    pub rmse: f64,
    pub acc: Option<AccValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub step: usize,
    pub variables: Vec<VariableMetrics>,
}

/// Per-variable metrics with optional per-horizon breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub variables: Vec<VariableMetrics>,
    pub horizons: Vec<HorizonMetrics>,
    pub note: String,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn variable_metrics<T: Scalar>(pred: &GridField<T>, truth: &GridField<T>, clim: Option<&Climatology>, mask: Option<&[bool]>) -> Result<Vec<VariableMetrics>> {
    let r = rmse(pred, truth, mask)?;
    let a = match clim {
        Some(c) => Some(acc(pred, truth, c)?),
        None => None,
    };
    Ok(pred
        .names()
        .iter()
        .enumerate()
        .map(|(v, name)| VariableMetrics {
            name: name.clone(),
            rmse: r[v],
            acc: a.as_ref().map(|a| a[v]),
        })
        .collect())
}

impl MetricReport {
    /// Whole-field metrics.
    pub fn evaluate<T: Scalar>(label: &str, pred: &GridField<T>, truth: &GridField<T>, clim: Option<&Climatology>) -> Result<Self> {
        Ok(MetricReport {
            label: label.to_string(),
            variables: variable_metrics(pred, truth, clim, None)?,
            horizons: Vec::new(),
            note: ACC_NOTE.to_string(),
        })
    }

    /// Metrics over stacked forecasts where frame `k` of each block of
    /// `horizon` frames is step `k + 1`.
    pub fn evaluate_forecast<T: Scalar>(label: &str, pred: &GridField<T>, truth: &GridField<T>, horizon: usize, clim: Option<&Climatology>) -> Result<Self> {
        check_pair("evaluate_forecast", pred, truth)?;
        if horizon == 0 || pred.nt() % horizon != 0 {
            return Err(Error::config(format!(
                "{} frames do not split into blocks of horizon {horizon}",
                pred.nt()
            )));
        }
        let mut report = Self::evaluate(label, pred, truth, clim)?;
        let blocks = pred.nt() / horizon;
        for step in 0..horizon {
            let pick = |f: &GridField<T>| -> Result<GridField<T>> {
                let parts = (0..blocks)
                    .map(|b| f.frames(b * horizon + step..b * horizon + step + 1))
                    .collect::<Result<Vec<_>>>()?;
                GridField::concat_frames(&parts)
            };
            report.horizons.push(HorizonMetrics {
                step: step + 1,
                variables: variable_metrics(&pick(pred)?, &pick(truth)?, clim, None)?,
            });
        }
        Ok(report)
    }

    pub fn average_rmse(&self) -> f64 {
        mean(self.variables.iter().map(|v| v.rmse))
    }

    /// Mean ACC over variables, `None` when ACC was not computed.
    pub fn average_acc(&self) -> Option<f64> {
        if self.variables.iter().any(|v| v.acc.is_none()) || self.variables.is_empty() {
            return None;
        }
        Some(mean(self.variables.iter().filter_map(|v| v.acc.map(|a| a.value))))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Wire<'a> {
            #[serde(flatten)]
            report: &'a MetricReport,
            average_rmse: f64,
            average_acc: Option<f64>,
        }
        Ok(serde_json::to_string_pretty(&Wire {
            report: self,
            average_rmse: self.average_rmse(),
            average_acc: self.average_acc(),
        })?)
    }
}

/// Percentage change of one metric; `None` when the base is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub name: String,
    pub rmse_pct: Option<f64>,
    pub acc_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub base: String,
    pub plus: String,
    pub variables: Vec<ImprovementRow>,
    pub average: ImprovementRow,
}

/// RMSE improvement `(base − plus)/base·100`.
pub fn rmse_improvement(base: f64, plus: f64) -> Option<f64> {
    (base != 0.0).then(|| (base - plus) / base * 100.0)
}

/// ACC improvement `(plus − base)/base·100`.
pub fn acc_improvement(base: f64, plus: f64) -> Option<f64> {
    (base != 0.0).then(|| (plus - base) / base * 100.0)
}

pub fn improvement(base: &MetricReport, plus: &MetricReport) -> Result<Improvement> {
    let names = |r: &MetricReport| r.variables.iter().map(|v| v.name.clone()).collect::<Vec<_>>();
    if names(base) != names(plus) || base.horizons.len() != plus.horizons.len() {
        return Err(Error::config("reports cover different variables or horizons"));
    }
    let acc_pct = |b: Option<AccValue>, p: Option<AccValue>| match (b, p) {
        (Some(b), Some(p)) if !b.degenerate && !p.degenerate => acc_improvement(b.value, p.value),
        _ => None,
    };
    let variables = base
        .variables
        .iter()
        .zip(&plus.variables)
        .map(|(b, p)| ImprovementRow {
            name: b.name.clone(),
            rmse_pct: rmse_improvement(b.rmse, p.rmse),
            acc_pct: acc_pct(b.acc, p.acc),
        })
        .collect();
    let average = ImprovementRow {
        name: "avg".into(),
        rmse_pct: rmse_improvement(base.average_rmse(), plus.average_rmse()),
        acc_pct: match (base.average_acc(), plus.average_acc()) {
            (Some(b), Some(p)) => acc_improvement(b, p),
            _ => None,
        },
    };
    Ok(Improvement {
        base: base.label.clone(),
        plus: plus.label.clone(),
        variables,
        average,
    })
}

fn cell(v: Option<f64>, pct: bool) -> String {
    match v {
        Some(x) if pct => format!("{x:.2}%"),
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

/// Aligned text table: one row per report, `RMSE↓ ACC↑` column pairs per
/// variable plus the average, and an `Improv` row when given.
pub fn render_table(reports: &[&MetricReport], improv: Option<&Improvement>) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut header = vec!["model".to_string()];
    for v in first.variables.iter().map(|v| v.name.as_str()).chain(["avg"]) {
        header.push(format!("{v} RMSE↓"));
        header.push(format!("{v} ACC↑"));
    }
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.label.clone()];
        for v in &r.variables {
            row.push(cell(Some(v.rmse), false));
            row.push(match v.acc {
                Some(a) if a.degenerate => "0 (flag)".into(),
                a => cell(a.map(|a| a.value), false),
            });
        }
        row.push(cell(Some(r.average_rmse()), false));
        row.push(cell(r.average_acc(), false));
        rows.push(row);
    }
    if let Some(imp) = improv {
        let mut row = vec!["Improv".to_string()];
        for v in imp.variables.iter().chain([&imp.average]) {
            row.push(cell(v.rmse_pct, true));
            row.push(cell(v.acc_pct, true));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r.get(c).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (s, &w))| {
                let pad = w - s.chars().count();
                if i == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  "));
    }
    let _ = writeln!(out, "# {}", first.note);
    out
}
