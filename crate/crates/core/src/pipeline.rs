//! Glue from essay records to trained scorers and fold reports.

use crate::blocks::ModelConfig;
use crate::data::EssayRecord;
use crate::error::Result;
use crate::evaluation::FoldTrainer;
use crate::exec::Exec;
use crate::scoring::{train, train_with_dev, Example, Prediction, ScoreScale, Scorer, TrainOutcome, TrainSpec};
use crate::tokenizer::Vocabulary;

pub fn examples(records: &[&EssayRecord], vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    records.iter().map(|r| Example { essay_id: r.essay_id, ids: vocab.encode(&r.text, max_len), score: r.resolved }).collect()
}

pub fn fit(
    records: &[EssayRecord],
    vocab: &Vocabulary,
    config: &ModelConfig,
    scale: ScoreScale,
    spec: &TrainSpec,
    exec: Exec,
) -> Result<TrainOutcome> {
    let refs: Vec<&EssayRecord> = records.iter().collect();
    train(config, scale, &examples(&refs, vocab, config.max_len), spec, exec)
}

pub fn predict(scorer: &Scorer, vocab: &Vocabulary, records: &[&EssayRecord], exec: Exec) -> Result<Vec<Prediction>> {
    let items: Vec<(i64, Vec<usize>)> =
        records.iter().map(|r| (r.essay_id, vocab.encode(&r.text, scorer.config.max_len))).collect();
    scorer.predict(&items, exec)
}

/// Trains one scorer per fold with the grid in `spec`.
pub struct ScorerTrainer<'v> {
    pub vocab: &'v Vocabulary,
    pub config: ModelConfig,
    pub spec: TrainSpec,
    /// Parallelism inside each fold's training.
    pub exec: Exec,
}

impl FoldTrainer<EssayRecord> for ScorerTrainer<'_> {
    fn fit_predict(
        &self,
        fold: usize,
        train: &[&EssayRecord],
        dev: &[&EssayRecord],
        test: &[&EssayRecord],
        scale: &ScoreScale,
    ) -> Result<Vec<i64>> {
        let max_len = self.config.max_len;
        let tr = examples(train, self.vocab, max_len);
        let dv = examples(dev, self.vocab, max_len);
        let spec = TrainSpec { seed: self.spec.seed.wrapping_add(fold as u64), ..self.spec.clone() };
        let out = train_with_dev(
            &self.config,
            *scale,
            &tr.iter().collect::<Vec<_>>(),
            &dv.iter().collect::<Vec<_>>(),
            &spec,
            self.exec,
        )?;
        Ok(predict(&out.scorer, self.vocab, test, self.exec)?.into_iter().map(|p| p.score).collect())
    }
}
