//! Score regression head: integer scores map to midpoints of `n` equal
//! subintervals of `[0, 1]`, a sigmoid unit over the first encoder output
//! predicts that midpoint, and predictions map back by flooring.

mod model;
mod train;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};

pub use model::{Scorer, ScoringHead};
pub use train::{batch_gradients, train, train_with_dev, Adam, CellResult, Example, TrainOutcome, TrainSpec};

/// Inclusive integer score range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreScale {
    pub min_score: i64,
    pub max_score: i64,
}

impl ScoreScale {
    pub fn new(min_score: i64, max_score: i64) -> Result<Self> {
        if max_score <= min_score {
            return Err(Error::Input(format!("score scale {min_score}:{max_score} needs max > min")));
        }
        Ok(ScoreScale { min_score, max_score })
    }

    /// Number of distinct scores.
    pub fn n(&self) -> usize {
        (self.max_score - self.min_score + 1) as usize
    }

    pub fn contains(&self, s: i64) -> bool {
        (self.min_score..=self.max_score).contains(&s)
    }

    pub fn scores(&self) -> impl Iterator<Item = i64> {
        self.min_score..=self.max_score
    }

    pub fn score_to_unit(&self, s: i64) -> Result<f64> {
        if !self.contains(s) {
            return Err(Error::Input(format!("score {s} outside scale {self}")));
        }
        Ok(((s - self.min_score) as f64 + 0.5) / self.n() as f64)
    }

    pub fn unit_to_score(&self, y: f64) -> Result<i64> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::Input(format!("raw prediction {y} outside [0, 1]")));
        }
        let n = self.n();
        let bin = ((y * n as f64).floor() as usize).min(n - 1);
        Ok(self.min_score + bin as i64)
    }
}

impl std::fmt::Display for ScoreScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.min_score, self.max_score)
    }
}

impl std::str::FromStr for ScoreScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("score scale {s:?} should look like MIN:MAX"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        ScoreScale::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub essay_id: i64,
    pub raw: f64,
    pub score: i64,
}

impl Prediction {
    pub fn new(essay_id: i64, raw: f64, scale: &ScoreScale) -> Result<Self> {
        Ok(Prediction { essay_id, raw, score: scale.unit_to_score(raw)? })
    }
}

/// Row 0 of an `L x H` encoder output.
pub fn pool_first(encoded: &Tensor) -> Result<Vec<f64>> {
    if encoded.shape().len() != 2 || encoded.rows() == 0 {
        return Err(Error::Input("cannot pool an empty sequence".into()));
    }
    Ok(encoded.row(0).to_vec())
}

/// `sigmoid(features . w + b)`.
pub fn head_forward(features: &[f64], weight: &[f64], bias: f64) -> Result<f64> {
    if features.len() != weight.len() {
        return Err(Error::Shape(format!("{} features for a head of width {}", features.len(), weight.len())));
    }
    Ok(kernels::sigmoid(kernels::dot(features, weight) + bias))
}

/// Mean of several models' raw outputs, mapped to a score. The mean is
/// taken as an offset from the first output, so identical members give
/// back that output bit for bit.
pub fn ensemble(raws: &[f64], scale: &ScoreScale) -> Result<(f64, i64)> {
    if raws.is_empty() {
        return Err(Error::Input("cannot ensemble zero predictions".into()));
    }
    if let Some(r) = raws.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Input(format!("raw prediction {r} outside [0, 1]")));
    }
    let base = raws[0];
    let lo = raws.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (base + raws.iter().map(|r| r - base).sum::<f64>() / raws.len() as f64).clamp(lo, hi);
    Ok((mean, scale.unit_to_score(mean)?))
}

/// Averages prediction sets essay by essay. Every set must cover the same
/// essays; output follows the order of the first set.
pub fn ensemble_predictions(sets: &[Vec<Prediction>], scale: &ScoreScale) -> Result<Vec<Prediction>> {
    let first = sets.first().ok_or_else(|| Error::Input("cannot ensemble zero prediction files".into()))?;
    let lookups: Vec<HashMap<i64, f64>> = sets.iter().map(|s| s.iter().map(|p| (p.essay_id, p.raw)).collect()).collect();
    for (i, (set, lookup)) in sets.iter().zip(&lookups).enumerate() {
        if set.len() != first.len() || lookup.len() != set.len() {
            return Err(Error::Data(format!("prediction set {} does not cover the same essays as set 1", i + 1)));
        }
    }
    first
        .iter()
        .map(|p| {
            let raws = lookups
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    l.get(&p.essay_id)
                        .copied()
                        .ok_or_else(|| Error::Data(format!("essay {} missing from prediction set {}", p.essay_id, i + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (raw, score) = ensemble(&raws, scale)?;
            Ok(Prediction { essay_id: p.essay_id, raw, score })
        })
        .collect()
}

pub const PREDICTION_HEADER: &str = "essay_id\traw\tscore";

pub fn predictions_to_tsv(preds: &[Prediction]) -> String {
    let mut s = String::from(PREDICTION_HEADER);
    s.push('\n');
    for p in preds {
        s.push_str(&format!("{}\t{:.6}\t{}\n", p.essay_id, p.raw, p.score));
    }
    s
}

pub fn predictions_from_tsv(text: &str) -> Result<Vec<Prediction>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(PREDICTION_HEADER) {
        return Err(Error::Format(format!("prediction file must start with header {PREDICTION_HEADER:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Format(format!("prediction file line {}: expected essay_id, raw, score", i + 2));
            let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(Prediction {
                essay_id: f[0].parse().map_err(|_| bad())?,
                raw: f[1].parse().map_err(|_| bad())?,
                score: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    crate::io::write_atomic(path, predictions_to_tsv(preds).as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    predictions_from_tsv(&crate::io::read_string(path)?)
}
