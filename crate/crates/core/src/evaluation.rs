//! Error metrics: RMSE, percentage of tick accuracy (PTA) and severe
//! under/over-prediction.
//!
//! A tick is one step on the letter ladder. Predictions are de-centered with
//! the student's prior GPA and rounded to the closest letter before counting
//! ticks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{LetterGrade, Sample};
use crate::error::{Error, Result};
use crate::models::Model;

/// Tick error at or beyond which a prediction counts as severe.
pub const SEVERE_TICKS: usize = 3;

pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("RMSE of an empty list".into()));
    }
    let sse: f64 = pairs.iter().map(|(a, p)| (a - p) * (a - p)).sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

/// De-centers a prediction and rounds it to the closest letter.
pub fn to_letter(predicted_centered: f64, prior_gpa: f64) -> LetterGrade {
    LetterGrade::nearest(predicted_centered + prior_gpa)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TickMetrics {
    pub pta0: f64,
    pub pta1: f64,
    pub pta2: f64,
    pub severe_under: f64,
    pub severe_over: f64,
}

/// PTA0/1/2 and severe-error percentages over `(actual, predicted)` pairs.
pub fn tick_metrics(pairs: &[(LetterGrade, LetterGrade)]) -> Result<TickMetrics> {
    if pairs.is_empty() {
        return Err(Error::Contract("tick metrics of an empty list".into()));
    }
    let mut within = [0usize; SEVERE_TICKS];
    let (mut under, mut over) = (0usize, 0usize);
    for &(actual, predicted) in pairs {
        let signed = predicted.ticks_above(actual);
        let dist = signed.unsigned_abs() as usize;
        for (t, count) in within.iter_mut().enumerate() {
            if dist <= t {
                *count += 1;
            }
        }
        if dist >= SEVERE_TICKS {
            if signed < 0 {
                under += 1;
            } else {
                over += 1;
            }
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / pairs.len() as f64;
    Ok(TickMetrics {
        pta0: pct(within[0]),
        pta1: pct(within[1]),
        pta2: pct(within[2]),
        severe_under: pct(under),
        severe_over: pct(over),
    })
}

/// One evaluated target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub actual_centered: f64,
    pub predicted_centered: f64,
    pub actual_raw: f64,
    /// Prior GPA used to de-center.
    pub reference: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// RMSE on centered grades.
    pub rmse: f64,
    /// RMSE on de-centered grades clamped to `[0, 4]`.
    pub rmse_raw: f64,
    pub pta0: f64,
    pub pta1: f64,
    pub pta2: f64,
    pub severe_under: f64,
    pub severe_over: f64,
}

const KEYS: [&str; 8] = [
    "n",
    "rmse",
    "rmse_raw",
    "pta0",
    "pta1",
    "pta2",
    "severe_under",
    "severe_over",
];

impl EvalReport {
    pub fn from_outcomes(outcomes: &[Outcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Contract("evaluation over zero targets".into()));
        }
        let centered: Vec<(f64, f64)> = outcomes
            .iter()
            .map(|o| (o.actual_centered, o.predicted_centered))
            .collect();
        let raw: Vec<(f64, f64)> = outcomes
            .iter()
            .map(|o| {
                (
                    o.actual_raw,
                    (o.predicted_centered + o.reference).clamp(0.0, 4.0),
                )
            })
            .collect();
        let letters: Vec<(LetterGrade, LetterGrade)> = outcomes
            .iter()
            .map(|o| {
                (
                    LetterGrade::nearest(o.actual_raw),
                    to_letter(o.predicted_centered, o.reference),
                )
            })
            .collect();
        let ticks = tick_metrics(&letters)?;
        Ok(EvalReport {
            n: outcomes.len(),
            rmse: rmse(&centered)?,
            rmse_raw: rmse(&raw)?,
            pta0: ticks.pta0,
            pta1: ticks.pta1,
            pta2: ticks.pta2,
            severe_under: ticks.severe_under,
            severe_over: ticks.severe_over,
        })
    }

    /// Checks PTA monotonicity and that severe errors are exactly the
    /// complement of PTA2.
    pub fn check_invariants(&self) -> Result<()> {
        let tol = 1e-9;
        if !(self.pta0 <= self.pta1 && self.pta1 <= self.pta2) {
            return Err(Error::Contract(format!(
                "PTA not monotone: {} / {} / {}",
                self.pta0, self.pta1, self.pta2
            )));
        }
        let severe = self.severe_under + self.severe_over;
        if (severe - (100.0 - self.pta2)).abs() > tol {
            return Err(Error::Contract(format!(
                "severe errors {severe} do not complement PTA2 {}",
                self.pta2
            )));
        }
        Ok(())
    }

    fn values(&self) -> [f64; 8] {
        [
            self.n as f64,
            self.rmse,
            self.rmse_raw,
            self.pta0,
            self.pta1,
            self.pta2,
            self.severe_under,
            self.severe_over,
        ]
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in KEYS.iter().zip(self.values()) {
            let _ = writeln!(out, "{key}: {value}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut values = [None; 8];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once(':').ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("report line without ':': {line}"),
            })?;
            let slot = KEYS
                .iter()
                .position(|k| *k == key.trim())
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("unknown report key '{}'", key.trim()),
                })?;
            values[slot] = Some(value.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: 0,
                message: format!("{key}: {e}"),
            })?);
        }
        let get = |i: usize| {
            values[i].ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("report is missing '{}'", KEYS[i]),
            })
        };
        Ok(EvalReport {
            n: get(0)? as usize,
            rmse: get(1)?,
            rmse_raw: get(2)?,
            pta0: get(3)?,
            pta1: get(4)?,
            pta2: get(5)?,
            severe_under: get(6)?,
            severe_over: get(7)?,
        })
    }

    /// Single-line JSON record.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Predicts every sample and reports the metrics.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let outcomes = samples
        .iter()
        .map(|s| {
            Ok(Outcome {
                actual_centered: s.actual,
                predicted_centered: model.predict(&s.context)?,
                actual_raw: s.raw,
                reference: s.reference,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_outcomes(&outcomes)?;
    report.check_invariants()?;
    Ok(report)
}
