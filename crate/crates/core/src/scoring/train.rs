use serde::{Deserialize, Serialize};

use crate::blocks::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, holdout, qwk};
use crate::exec::Exec;
use crate::numerics::{Rng, Tensor};

use super::{ScoreScale, Scorer};

/// Grid and schedule for fitting a [`Scorer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: usize,
    /// Epochs without a development improvement before stopping; 0 never
    /// stops early.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec { learning_rates: vec![1e-3, 3e-4], batch_sizes: vec![8, 16], epochs: 10, patience: 3, seed: 42 }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::Input("training grid needs at least one learning rate and one batch size".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Input("learning rates must be positive".into()));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::Input("batch sizes must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Input("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
pub struct Adam {
    pub lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    pub fn new(lr: f64, params: &impl Params<Tensor>) -> Self {
        let zeros: Vec<Vec<f64>> = params.slots().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam { lr, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut impl Params<Tensor>, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let mut slot = 0;
        let (m, v, lr) = (&mut self.m, &mut self.v, self.lr);
        params.visit_mut(&mut |t| {
            let (g, m, v) = (&grads[slot], &mut m[slot], &mut v[slot]);
            for (i, w) in t.values_mut().iter_mut().enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
            slot += 1;
        });
    }
}

/// A tokenized essay with its gold score.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub essay_id: i64,
    pub ids: Vec<usize>,
    pub score: i64,
}

/// Summary of one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Best development kappa, `-inf` if never defined.
    pub dev_qwk: f64,
    pub best_epoch: usize,
    /// Mean training loss per completed epoch.
    pub losses: Vec<f64>,
}

pub struct TrainOutcome {
    pub scorer: Scorer,
    pub best: CellResult,
    pub cells: Vec<CellResult>,
}

/// Mean squared error over `batch` and its gradient, summed in batch order.
pub fn batch_gradients(scorer: &Scorer, batch: &[&Example], exec: Exec) -> Result<(f64, Vec<Vec<f64>>)> {
    let targets = batch.iter().map(|e| scorer.scale.score_to_unit(e.score)).collect::<Result<Vec<f64>>>()?;
    let parts = exec.map_range(batch.len(), |i| scorer.loss_and_grads(&batch[i].ids, targets[i]));
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f64>>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l * inv;
        match &mut total {
            None => total = Some(g.into_iter().map(|s| s.into_iter().map(|x| x * inv).collect()).collect()),
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(g) {
                    a.iter_mut().zip(s).for_each(|(a, x)| *a += x * inv);
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// Selection key on the development portion: kappa first, then lower
/// squared error. When the gold scores are all equal kappa carries no
/// information and only the error counts.
fn dev_key(scorer: &Scorer, dev: &[&Example], exec: Exec) -> Result<(f64, f64)> {
    let raws = exec.map(dev, |e| scorer.raw(&e.ids));
    let mut pred = Vec::with_capacity(dev.len());
    let mut sq = 0.0;
    for (r, e) in raws.into_iter().zip(dev) {
        let r = r?;
        sq += (r - scorer.scale.score_to_unit(e.score)?).powi(2);
        pred.push(scorer.scale.unit_to_score(r)?);
    }
    let mse = sq / dev.len() as f64;
    let gold: Vec<i64> = dev.iter().map(|e| e.score).collect();
    if gold.iter().all(|&s| s == gold[0]) {
        return Ok((0.0, -mse));
    }
    match qwk(&confusion(&pred, &gold, &scorer.scale)?) {
        Ok(k) => Ok((k, -mse)),
        Err(Error::UndefinedStatistic(_)) => Ok((f64::NEG_INFINITY, -mse)),
        Err(e) => Err(e),
    }
}

fn check_scores(data: &[&Example], scale: &ScoreScale) -> Result<()> {
    if let Some(e) = data.iter().find(|e| !scale.contains(e.score)) {
        return Err(Error::Data(format!("essay {}: score {} outside scale {scale}", e.essay_id, e.score)));
    }
    Ok(())
}

fn fit_cell(
    init: &Scorer,
    train: &[&Example],
    dev: &[&Example],
    lr: f64,
    batch: usize,
    cell: u64,
    spec: &TrainSpec,
    exec: Exec,
) -> Result<(Scorer, CellResult, (f64, f64))> {
    let mut scorer = init.clone();
    let mut adam = Adam::new(lr, &scorer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = Rng::stream(spec.seed, 0x5EED_0000 + cell);
    let mut best = (dev_key(&scorer, dev, exec)?, 0usize, scorer.clone());
    let mut losses = Vec::new();
    for epoch in 1..=spec.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(batch) {
            let items: Vec<&Example> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) = batch_gradients(&scorer, &items, exec)?;
            adam.step(&mut scorer, &grads);
            sum += loss * chunk.len() as f64;
        }
        losses.push(sum / train.len() as f64);
        let k = dev_key(&scorer, dev, exec)?;
        if k > best.0 {
            best = (k, epoch, scorer.clone());
        } else if spec.patience > 0 && epoch - best.1 >= spec.patience {
            break;
        }
    }
    let (key, best_epoch, model) = best;
    Ok((model, CellResult { learning_rate: lr, batch_size: batch, dev_qwk: key.0, best_epoch, losses }, key))
}

/// Grid search over `spec`: every cell starts from the same initial
/// weights, keeps its best epoch by development kappa, and the best cell
/// wins (earliest on ties).
pub fn train_with_dev(
    config: &ModelConfig,
    scale: ScoreScale,
    train: &[&Example],
    dev: &[&Example],
    spec: &TrainSpec,
    exec: Exec,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Input("no training essays".into()));
    }
    check_scores(train, &scale)?;
    check_scores(dev, &scale)?;
    let dev = if dev.is_empty() { train } else { dev };
    let init = Scorer::init(config.clone(), scale, &mut Rng::new(spec.seed))?;
    let mut cells = Vec::new();
    let mut winner: Option<(Scorer, CellResult, (f64, f64))> = None;
    let mut cell = 0;
    for &lr in &spec.learning_rates {
        for &batch in &spec.batch_sizes {
            let (model, result, key) = fit_cell(&init, train, dev, lr, batch, cell, spec, exec)?;
            cell += 1;
            cells.push(result.clone());
            if winner.as_ref().is_none_or(|(_, _, k)| key > *k) {
                winner = Some((model, result, key));
            }
        }
    }
    let (scorer, best, _) = winner.expect("grid is nonempty");
    Ok(TrainOutcome { scorer, best, cells })
}

/// Holds out a seeded 10% of `data` for model selection, then runs
/// [`train_with_dev`]. With fewer than ten essays everything trains and
/// selection uses the training set.
pub fn train(config: &ModelConfig, scale: ScoreScale, data: &[Example], spec: &TrainSpec, exec: Exec) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Input("no training essays".into()));
    }
    let (keep, held) = holdout(data.len(), 0.1, spec.seed);
    let tr: Vec<&Example> = keep.iter().map(|&i| &data[i]).collect();
    let dv: Vec<&Example> = held.iter().map(|&i| &data[i]).collect();
    train_with_dev(config, scale, &tr, &dv, spec, exec)
}
