use std::fmt::Write as _;

use super::{harmonic_mean, EvalError, Task};
use crate::dataset::RANK_NAMES;
use crate::losses::RANKS;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AccuracyPair {
    pub macro_avg: Option<f64>,
    pub micro: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReportCell {
    pub seen: AccuracyPair,
    pub unseen: AccuracyPair,
    pub hm: AccuracyPair,
}

/// Accuracies indexed by rank, then task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cells: [[ReportCell; 3]; RANKS],
}

pub const REPORT_CSV_HEADER: &str = "rank,task,seen_macro,seen_micro,unseen_macro,unseen_micro,hm_macro,hm_micro";

fn hm_cell(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if a + b > 0.0 => Some(harmonic_mean(a, b)),
        _ => None,
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn empty() -> Self {
        EvalReport {
            cells: [[ReportCell::default(); 3]; RANKS],
        }
    }

    fn task_slot(task: Task) -> usize {
        Task::ALL.iter().position(|&t| t == task).expect("known task")
    }

    pub fn cell(&self, rank: usize, task: Task) -> &ReportCell {
        &self.cells[rank][Self::task_slot(task)]
    }

    /// Stores seen and unseen accuracies and derives the harmonic means;
    /// a mean is undefined when either side is or both are zero.
    pub fn set(&mut self, rank: usize, task: Task, seen: AccuracyPair, unseen: AccuracyPair) {
        self.cells[rank][Self::task_slot(task)] = ReportCell {
            seen,
            unseen,
            hm: AccuracyPair {
                macro_avg: hm_cell(seen.macro_avg, unseen.macro_avg),
                micro: hm_cell(seen.micro, unseen.micro),
            },
        };
    }

    /// `{rank: {task: {seen|unseen|hm: {macro, micro}}}}` with six
    /// fractional digits and `null` for undefined cells.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n");
        for (r, rank) in RANK_NAMES.iter().enumerate() {
            writeln!(s, "  \"{rank}\": {{").unwrap();
            for (t, task) in Task::ALL.iter().enumerate() {
                let cell = &self.cells[r][t];
                writeln!(s, "    \"{}\": {{", task.name()).unwrap();
                let cols = [("seen", cell.seen), ("unseen", cell.unseen), ("hm", cell.hm)];
                for (c, (name, pair)) in cols.iter().enumerate() {
                    writeln!(
                        s,
                        "      \"{name}\": {{\"macro\": {}, \"micro\": {}}}{}",
                        fmt_value(pair.macro_avg),
                        fmt_value(pair.micro),
                        if c + 1 < cols.len() { "," } else { "" }
                    )
                    .unwrap();
                }
                writeln!(s, "    }}{}", if t + 1 < Task::ALL.len() { "," } else { "" }).unwrap();
            }
            writeln!(s, "  }}{}", if r + 1 < RANKS { "," } else { "" }).unwrap();
        }
        s.push_str("}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| EvalError::Report(e.to_string()))?;
        let mut report = EvalReport::empty();
        for (r, rank) in RANK_NAMES.iter().enumerate() {
            for (t, task) in Task::ALL.iter().enumerate() {
                let get = |col: &str, avg: &str| -> Result<Option<f64>, EvalError> {
                    let x = v
                        .get(rank)
                        .and_then(|x| x.get(task.name()))
                        .and_then(|x| x.get(col))
                        .and_then(|x| x.get(avg))
                        .ok_or_else(|| EvalError::Report(format!("missing {rank}.{}.{col}.{avg}", task.name())))?;
                    if x.is_null() {
                        Ok(None)
                    } else {
                        x.as_f64()
                            .map(Some)
                            .ok_or_else(|| EvalError::Report("accuracy is not a number".into()))
                    }
                };
                let pair = |col: &str| -> Result<AccuracyPair, EvalError> {
                    Ok(AccuracyPair {
                        macro_avg: get(col, "macro")?,
                        micro: get(col, "micro")?,
                    })
                };
                report.cells[r][t] = ReportCell {
                    seen: pair("seen")?,
                    unseen: pair("unseen")?,
                    hm: pair("hm")?,
                };
            }
        }
        Ok(report)
    }

    /// One row per rank and task; empty fields for undefined cells.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for (r, rank) in RANK_NAMES.iter().enumerate() {
            for (t, task) in Task::ALL.iter().enumerate() {
                let c = &self.cells[r][t];
                writeln!(
                    s,
                    "{rank},{},{},{},{},{},{},{}",
                    task.name(),
                    f(c.seen.macro_avg),
                    f(c.seen.micro),
                    f(c.unseen.macro_avg),
                    f(c.unseen.micro),
                    f(c.hm.macro_avg),
                    f(c.hm.micro)
                )
                .unwrap();
            }
        }
        s
    }
}
