//! Continual-learning metrics over accuracy matrices.
//!
//! `a[i][j]` is the test accuracy on task `j` after training finished on task
//! `i`. Task counts passed to the metric functions (`t`) are 1-based: `t = 3`
//! means "after the third task".
//!
//! Text format: one matrix row per line, entries separated by whitespace
//! and/or commas. A row may carry either all `T` entries or only its
//! lower-triangular prefix (`i` entries on row `i`), in which case the rest is
//! zero-filled. Blank lines and lines starting with `#` are skipped. Matrices
//! are emitted with four decimals, comma separated.

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Square matrix of accuracies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    size: usize,
    data: Vec<f64>,
}

fn check_accuracy(v: f64) -> std::result::Result<(), String> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("accuracy {v} outside [0, 1]"))
    }
}

impl AccuracyMatrix {
    pub fn zeros(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Input("accuracy matrix needs at least one task".into()));
        }
        Ok(Self {
            size,
            data: vec![0.0; size * size],
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::zeros(rows.len())?;
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != m.size {
                return Err(Error::Input(format!(
                    "row {i} has {} entries, expected {}",
                    row.len(),
                    m.size
                )));
            }
            for (j, v) in row.into_iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    /// Number of tasks `T`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Entry at 0-based `(row, col)`.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.size && col < self.size, "index out of range");
        self.data[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if row >= self.size || col >= self.size {
            return Err(Error::Input(format!(
                "index ({row}, {col}) out of range for {} tasks",
                self.size
            )));
        }
        check_accuracy(value).map_err(Error::Input)?;
        self.data[row * self.size + col] = value;
        Ok(())
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.size..(row + 1) * self.size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.size)
    }
}

/// Per-task accuracy during the first updates of each task: `a_tb[t][b]`,
/// `b = 0..=beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BShotCurve {
    beta: usize,
    rows: Vec<Vec<f64>>,
}

impl BShotCurve {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Input("b-shot curve needs at least one task".into()));
        };
        if first.is_empty() {
            return Err(Error::Input("b-shot curve rows need at least one entry".into()));
        }
        let width = first.len();
        for (t, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Input(format!(
                    "b-shot row {t} has {} entries, expected {width}",
                    row.len()
                )));
            }
            for &v in row {
                check_accuracy(v).map_err(Error::Input)?;
            }
        }
        Ok(Self {
            beta: width - 1,
            rows,
        })
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// The first `beta + 1` shots of every task.
    pub fn truncate(&self, beta: usize) -> Result<Self> {
        if beta > self.beta {
            return Err(Error::Input(format!(
                "curve records shots up to b = {}, cannot evaluate beta = {beta}",
                self.beta
            )));
        }
        Self::new(self.rows.iter().map(|r| r[..=beta].to_vec()).collect())
    }
}

fn check_t(m: &AccuracyMatrix, t: usize, min: usize) -> Result<()> {
    if t < min || t > m.size() {
        return Err(Error::Input(format!(
            "task count {t} outside [{min}, {}]",
            m.size()
        )));
    }
    Ok(())
}

/// `A_t = (1/t) Σ_{j ≤ t} a[t][j]`.
pub fn average_accuracy(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    check_t(m, t, 1)?;
    let row = m.row(t - 1);
    Ok(row[..t].iter().sum::<f64>() / t as f64)
}

/// `F_t = (1/(t−1)) Σ_{j < t} (max_{j ≤ l < t} a[l][j] − a[t][j])`.
///
/// The max only ranges over rows recorded after task `j` was learned.
pub fn forgetting(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::Input(format!("forgetting needs t >= 2, got {t}")));
    }
    check_t(m, t, 2)?;
    let last = t - 1;
    let total: f64 = (0..last)
        .map(|j| {
            let best = (j..last).map(|l| m.get(l, j)).fold(f64::NEG_INFINITY, f64::max);
            best - m.get(last, j)
        })
        .sum();
    Ok(total / (t - 1) as f64)
}

/// Long-term remembering: `−(1/(T−1)) Σ_{j<T} (T−j)·min(0, a[T][j] − a[j][j])`.
pub fn ltr(m: &AccuracyMatrix) -> Result<f64> {
    let size = m.size();
    if size < 2 {
        return Err(Error::Input(format!("LTR needs at least 2 tasks, got {size}")));
    }
    let last = size - 1;
    let total: f64 = (0..last)
        .map(|j| (size - (j + 1)) as f64 * (m.get(last, j) - m.get(j, j)).min(0.0))
        .sum();
    // +0.0 turns a -0.0 from "no drops" into a plain zero
    Ok(-total / (size - 1) as f64 + 0.0)
}

/// Learning-curve area: mean over `b = 0..=beta` of the task-averaged b-shot
/// accuracy.
pub fn lca(curve: &BShotCurve) -> f64 {
    let tasks = curve.tasks() as f64;
    let z_sum: f64 = (0..=curve.beta())
        .map(|b| curve.rows().iter().map(|r| r[b]).sum::<f64>() / tasks)
        .sum();
    z_sum / (curve.beta() + 1) as f64
}

/// Average accuracy after every task: `[A_1, ..., A_T]`.
pub fn accuracy_trend(m: &AccuracyMatrix) -> Vec<f64> {
    (1..=m.size())
        .map(|t| average_accuracy(m, t).expect("t within range"))
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_row(line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|tok| !tok.is_empty())
        .map(|tok| {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric token {tok:?}"),
            })?;
            check_accuracy(v).map_err(|msg| Error::Parse { line: line_no, msg })?;
            Ok(v)
        })
        .collect()
}

pub fn parse_matrix(text: &str) -> Result<AccuracyMatrix> {
    let lines: Vec<(usize, &str)> = data_lines(text).collect();
    if lines.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no matrix rows".into(),
        });
    }
    let size = lines.len();
    let mut m = AccuracyMatrix::zeros(size)?;
    for (i, &(line_no, line)) in lines.iter().enumerate() {
        let row = parse_row(line_no, line)?;
        if row.len() != size && row.len() != i + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "row {} has {} entries, expected {size} (or {} lower-triangular)",
                    i + 1,
                    row.len(),
                    i + 1
                ),
            });
        }
        for (j, v) in row.into_iter().enumerate() {
            m.set(i, j, v)?;
        }
    }
    Ok(m)
}

/// Comma-separated rows with four decimals, zero-padded upper triangle.
pub fn emit_matrix(m: &AccuracyMatrix) -> String {
    emit_matrix_with(m, ",")
}

pub fn emit_matrix_with(m: &AccuracyMatrix, sep: &str) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&cells.join(sep));
        out.push('\n');
    }
    out
}

/// Long-form curves table: the `A_t` trend and the b-shot accuracies.
pub fn emit_curves(trend: &[f64], curve: Option<&BShotCurve>) -> String {
    let mut out = String::from("series,t,b,value\n");
    for (t, a) in trend.iter().enumerate() {
        out.push_str(&format!("average_accuracy,{},,{a:.4}\n", t + 1));
    }
    if let Some(curve) = curve {
        for (t, row) in curve.rows().iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                out.push_str(&format!("bshot,{},{b},{v:.4}\n", t + 1));
            }
        }
    }
    out
}

/// Reads a b-shot curve either from the long-form curves table written by
/// [`emit_curves`] or from a plain table of `T` rows with `beta + 1` entries.
pub fn parse_bshot_curve(text: &str) -> Result<BShotCurve> {
    let lines: Vec<(usize, &str)> = data_lines(text).collect();
    let Some(&(_, first)) = lines.first() else {
        return Err(Error::Parse {
            line: 1,
            msg: "empty curve file".into(),
        });
    };
    if !first.starts_with("series") {
        let rows = lines
            .iter()
            .map(|&(n, l)| parse_row(n, l))
            .collect::<Result<Vec<_>>>()?;
        return BShotCurve::new(rows);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &(line_no, line) in &lines[1..] {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        if fields[0] != "bshot" {
            continue;
        }
        let bad = |what: &str| Error::Parse {
            line: line_no,
            msg: format!("invalid {what}"),
        };
        let t: usize = fields[1].parse().map_err(|_| bad("task index"))?;
        let b: usize = fields[2].parse().map_err(|_| bad("shot index"))?;
        let v: f64 = fields[3].parse().map_err(|_| bad("value"))?;
        if t == 0 {
            return Err(bad("task index"));
        }
        if rows.len() < t {
            rows.resize(t, Vec::new());
        }
        let row = &mut rows[t - 1];
        if row.len() != b {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("b-shot entries for task {t} out of order at b = {b}"),
            });
        }
        row.push(v);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: lines[0].0,
            msg: "curves table has no bshot rows".into(),
        });
    }
    BShotCurve::new(rows)
}

/// Summary of one accuracy matrix (and optionally its b-shot curve).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub tasks: usize,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub ltr: Option<f64>,
    pub lca: Option<(usize, f64)>,
    pub trend: Vec<f64>,
}

fn round4(v: f64) -> f64 {
    // formatting then parsing keeps the value identical to the printed text
    format!("{v:.4}").parse().expect("formatted float parses")
}

impl MetricsReport {
    pub fn compute(m: &AccuracyMatrix, curve: Option<&BShotCurve>) -> Self {
        let tasks = m.size();
        Self {
            tasks,
            average_accuracy: average_accuracy(m, tasks).expect("t = T is valid"),
            forgetting: (tasks >= 2).then(|| forgetting(m, tasks).expect("T >= 2")),
            ltr: (tasks >= 2).then(|| ltr(m).expect("T >= 2")),
            lca: curve.map(|c| (c.beta(), lca(c))),
            trend: accuracy_trend(m),
        }
    }

    /// Key-value text with four decimals.
    pub fn to_text(&self) -> String {
        let mut out = format!("T: {}\nA_T: {:.4}\n", self.tasks, self.average_accuracy);
        match self.forgetting {
            Some(f) => out.push_str(&format!("F_T: {f:.4}\n")),
            None => out.push_str("F_T: n/a (needs at least 2 tasks)\n"),
        }
        match self.ltr {
            Some(v) => out.push_str(&format!("LTR: {v:.4}\n")),
            None => out.push_str("LTR: n/a (needs at least 2 tasks)\n"),
        }
        if let Some((beta, v)) = self.lca {
            out.push_str(&format!("LCA_{beta}: {v:.4}\n"));
        }
        out
    }

    /// JSON document with values rounded to four decimals.
    pub fn to_json(&self) -> Value {
        let mut notes = Vec::new();
        if self.tasks < 2 {
            notes.push("F_T and LTR are undefined for a single task");
        }
        if self.lca.is_none() {
            notes.push("no b-shot curve supplied; LCA omitted");
        }
        json!({
            "T": self.tasks,
            "A_T": round4(self.average_accuracy),
            "F_T": self.forgetting.map(round4),
            "LTR": self.ltr.map(round4),
            "LCA_beta": self.lca.map(|(b, _)| b),
            "LCA": self.lca.map(|(_, v)| round4(v)),
            "A_trend": self.trend.iter().copied().map(round4).collect::<Vec<_>>(),
            "notes": notes,
        })
    }
}
