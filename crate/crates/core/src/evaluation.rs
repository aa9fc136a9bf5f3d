//! Agreement statistics between two raters (human or machine) and the
//! five-fold evaluation protocol.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::Rng;
use crate::scoring::ScoreScale;

pub const NUM_FOLDS: usize = 5;

/// Joint and chance tables for a pair of score sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementTables {
    pub k: usize,
    /// Observed joint proportions, row-major `k x k`.
    pub observed: Vec<f64>,
    /// Outer product of the observed marginals.
    pub expected: Vec<f64>,
    /// `1 - (i - j)^2 / (k - 1)^2`
    pub weights: Vec<f64>,
}

fn check_pairs(a: &[i64], b: &[i64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("score sequences differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Input("no score pairs".into()));
    }
    Ok(())
}

pub fn confusion(a: &[i64], b: &[i64], scale: &ScoreScale) -> Result<AgreementTables> {
    check_pairs(a, b)?;
    let k = scale.n();
    let n = a.len() as f64;
    let mut counts = vec![0u64; k * k];
    for (&x, &y) in a.iter().zip(b) {
        for s in [x, y] {
            if !scale.contains(s) {
                return Err(Error::Input(format!("score {s} outside scale {scale}")));
            }
        }
        counts[(x - scale.min_score) as usize * k + (y - scale.min_score) as usize] += 1;
    }
    let observed: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let mut rows = vec![0.0; k];
    let mut cols = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            rows[i] += counts[i * k + j] as f64;
            cols[j] += counts[i * k + j] as f64;
        }
    }
    let expected = (0..k * k).map(|ij| rows[ij / k] * cols[ij % k] / (n * n)).collect();
    let denom = ((k - 1) * (k - 1)) as f64;
    let weights = (0..k * k)
        .map(|ij| {
            let d = (ij / k) as f64 - (ij % k) as f64;
            1.0 - d * d / denom
        })
        .collect();
    Ok(AgreementTables { k, observed, expected, weights })
}

/// Quadratic weighted kappa, `(p_o - p_e) / (1 - p_e)`.
pub fn qwk(t: &AgreementTables) -> Result<f64> {
    let p_o: f64 = t.weights.iter().zip(&t.observed).map(|(w, x)| w * x).sum();
    let p_e: f64 = t.weights.iter().zip(&t.expected).map(|(w, m)| w * m).sum();
    if p_e >= 1.0 {
        return Err(Error::UndefinedStatistic("kappa is undefined when both raters use a single score".into()));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn mean_var(xs: &[i64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// `(mean(pred) - mean(human)) / sqrt((var(pred) + var(human)) / 2)` with
/// population variances.
pub fn smd(pred: &[i64], human: &[i64]) -> Result<f64> {
    check_pairs(pred, human)?;
    let (mp, vp) = mean_var(pred);
    let (mh, vh) = mean_var(human);
    let pooled = (vp + vh) / 2.0;
    if pooled <= 0.0 {
        return Err(Error::UndefinedStatistic("standardized mean difference needs nonzero variance".into()));
    }
    Ok((mp - mh) / pooled.sqrt())
}

/// Fraction of exact matches.
pub fn acc(pred: &[i64], human: &[i64]) -> Result<f64> {
    check_pairs(pred, human)?;
    Ok(pred.iter().zip(human).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementReport {
    pub qwk: f64,
    pub smd: f64,
    pub acc: f64,
    pub n: usize,
}

pub fn agreement(pred: &[i64], human: &[i64], scale: &ScoreScale) -> Result<AgreementReport> {
    let qwk = qwk(&confusion(pred, human, scale)?)?;
    Ok(AgreementReport { qwk, smd: smd(pred, human)?, acc: acc(pred, human)?, n: pred.len() })
}

/// Assignment of essays to folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: BTreeMap<i64, usize>,
}

/// Membership of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPortions {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` split into `(rest, held_out)` with
/// `floor(n * fraction)` held out.
pub fn holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::stream(seed, 0xDE5).shuffle(&mut idx);
    let k = (n as f64 * fraction).floor() as usize;
    let mut held = idx.split_off(n - k);
    idx.sort_unstable();
    held.sort_unstable();
    (idx, held)
}

impl FoldSplit {
    /// Deals a seeded shuffle of `ids` round-robin into five folds.
    pub fn random(ids: &[i64], seed: u64) -> Self {
        let mut order = ids.to_vec();
        order.sort_unstable();
        Rng::stream(seed, 0xF01D).shuffle(&mut order);
        FoldSplit { folds: order.into_iter().enumerate().map(|(i, id)| (id, i % NUM_FOLDS)).collect() }
    }

    /// Indices into `ids` for fold `fold`: its test members, and the rest
    /// divided into train and a seeded 10% development portion.
    pub fn portions(&self, ids: &[i64], fold: usize, seed: u64) -> Result<FoldPortions> {
        let mut rest = Vec::new();
        let mut test = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            match self.folds.get(id) {
                Some(&f) if f == fold => test.push(i),
                Some(_) => rest.push(i),
                None => return Err(Error::Data(format!("essay {id} has no fold assignment"))),
            }
        }
        let (keep, dev) = holdout(rest.len(), 0.1, seed ^ fold as u64);
        Ok(FoldPortions { train: keep.iter().map(|&i| rest[i]).collect(), dev: dev.iter().map(|&i| rest[i]).collect(), test })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("essay_id\tfold\n");
        for (id, f) in &self.folds {
            s.push_str(&format!("{id}\t{f}\n"));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut folds = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || (i == 0 && line.starts_with("essay_id")) {
                continue;
            }
            let bad = || Error::Format(format!("fold file line {}: expected essay_id<TAB>fold", i + 1));
            let (id, f) = line.split_once('\t').ok_or_else(bad)?;
            let id: i64 = id.trim().parse().map_err(|_| bad())?;
            let f: usize = f.trim().parse().map_err(|_| bad())?;
            if f >= NUM_FOLDS {
                return Err(Error::Format(format!("fold file line {}: fold {f} outside 0..{}", i + 1, NUM_FOLDS - 1)));
            }
            if folds.insert(id, f).is_some() {
                return Err(Error::Format(format!("fold file line {}: essay {id} listed twice", i + 1)));
            }
        }
        Ok(FoldSplit { folds })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FoldSplit::from_tsv(&crate::io::read_string(path)?)
    }
}

/// An item with an id and a gold score.
pub trait Scored {
    fn essay_id(&self) -> i64;
    fn gold(&self) -> i64;
}

/// Produces test-portion scores after fitting on train and selecting on dev.
pub trait FoldTrainer<R>: Sync {
    fn fit_predict(&self, fold: usize, train: &[&R], dev: &[&R], test: &[&R], scale: &ScoreScale) -> Result<Vec<i64>>;
}

#[derive(Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub report: Result<AgreementReport>,
}

#[derive(Debug)]
pub struct KfoldReport {
    pub folds: Vec<FoldOutcome>,
}

impl KfoldReport {
    /// Mean of the fold kappas; undefined if any fold's is.
    pub fn mean_qwk(&self) -> Result<f64> {
        let mut sum = 0.0;
        for f in &self.folds {
            match &f.report {
                Ok(r) => sum += r.qwk,
                Err(e) => return Err(Error::UndefinedStatistic(format!("fold {}: {e}", f.fold))),
            }
        }
        Ok(sum / self.folds.len() as f64)
    }

    fn mean_of(&self, f: impl Fn(&AgreementReport) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.folds.iter().filter_map(|o| o.report.as_ref().ok().map(&f)).collect();
        (vals.len() == self.folds.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `fold qwk smd acc n` rows plus an `AVG` row; undefined values print
    /// as `NA`.
    pub fn to_tsv(&self) -> String {
        let num = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("fold\tqwk\tsmd\tacc\tn\n");
        let mut total = 0;
        for f in &self.folds {
            let r = f.report.as_ref().ok();
            let n = r.map_or(0, |r| r.n);
            total += n;
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                f.fold,
                num(r.map(|r| r.qwk)),
                num(r.map(|r| r.smd)),
                num(r.map(|r| r.acc)),
                if r.is_some() { n.to_string() } else { "NA".into() }
            ));
        }
        s.push_str(&format!(
            "AVG\t{}\t{}\t{}\t{total}\n",
            num(self.mean_qwk().ok()),
            num(self.mean_of(|r| r.smd)),
            num(self.mean_of(|r| r.acc))
        ));
        s
    }
}

/// Trains and scores each of the five folds, in parallel where `exec`
/// allows; outcomes come back in fold order.
pub fn kfold_evaluate<R: Scored + Sync, T: FoldTrainer<R>>(
    records: &[R],
    split: &FoldSplit,
    trainer: &T,
    scale: &ScoreScale,
    seed: u64,
    exec: Exec,
) -> Result<KfoldReport> {
    let ids: Vec<i64> = records.iter().map(Scored::essay_id).collect();
    let portions = (0..NUM_FOLDS).map(|f| split.portions(&ids, f, seed)).collect::<Result<Vec<_>>>()?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &records[i]).collect::<Vec<&R>>();
    let outcomes = exec.map_range(NUM_FOLDS, |fold| {
        let p = &portions[fold];
        let test = pick(&p.test);
        let run = || -> Result<AgreementReport> {
            let pred = trainer.fit_predict(fold, &pick(&p.train), &pick(&p.dev), &test, scale)?;
            let gold: Vec<i64> = test.iter().map(|r| r.gold()).collect();
            agreement(&pred, &gold, scale)
        };
        (fold, run())
    });
    let mut folds = Vec::new();
    for (fold, r) in outcomes {
        match r {
            Ok(rep) => folds.push(FoldOutcome { fold, report: Ok(rep) }),
            Err(e @ Error::UndefinedStatistic(_)) => folds.push(FoldOutcome { fold, report: Err(e) }),
            Err(e) => return Err(e),
        }
    }
    Ok(KfoldReport { folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scale(a: i64, b: i64) -> ScoreScale {
        ScoreScale::new(a, b).unwrap()
    }

    #[test]
    fn diagonal_on_identity() {
        let a = [0, 1, 2, 3, 3];
        let t = confusion(&a, &a, &scale(0, 3)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(t.observed[i * 4 + j] > 0.0, i == j);
            }
        }
        assert_eq!(qwk(&t).unwrap(), 1.0);
    }

    #[test]
    fn tally_example() {
        let t = confusion(&[0, 1, 2, 2], &[0, 1, 2, 1], &scale(0, 2)).unwrap();
        assert_eq!(t.observed, vec![0.25, 0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.25, 0.25]);
        let single = confusion(&[1], &[2], &scale(0, 2)).unwrap();
        assert_eq!(single.observed.iter().filter(|&&x| x == 1.0).count(), 1);
    }

    #[test]
    fn degenerate_marginals_are_undefined() {
        let t = confusion(&[1, 1], &[1, 1], &scale(0, 2)).unwrap();
        assert!(matches!(qwk(&t), Err(Error::UndefinedStatistic(_))));
    }

    #[test]
    fn input_checks() {
        assert!(confusion(&[0, 1], &[0], &scale(0, 2)).is_err());
        assert!(confusion(&[0, 5], &[0, 1], &scale(0, 2)).is_err());
        assert!(acc(&[], &[]).is_err());
    }

    #[test]
    fn smd_examples() {
        let h = [1, 2, 3, 2, 1];
        assert_eq!(smd(&h, &h).unwrap(), 0.0);
        let shifted = [0, 2];
        let base = [-1, 1];
        assert_eq!(smd(&shifted, &base).unwrap(), 1.0);
        assert_eq!(smd(&base, &shifted).unwrap(), -1.0);
        assert!(matches!(smd(&[2, 2], &[2, 2]), Err(Error::UndefinedStatistic(_))));
    }

    #[test]
    fn acc_examples() {
        assert_eq!(acc(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(acc(&[1, 2], &[2, 1]).unwrap(), 0.0);
        assert_eq!(acc(&[1, 2], &[1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn fold_file_round_trip() {
        let ids: Vec<i64> = (100..137).collect();
        let split = FoldSplit::random(&ids, 4);
        assert_eq!(FoldSplit::from_tsv(&split.to_tsv()).unwrap(), split);
        assert!(FoldSplit::from_tsv("1\t7\n").is_err());
        let p = split.portions(&ids, 2, 4).unwrap();
        assert_eq!(p.train.len() + p.dev.len() + p.test.len(), ids.len());
        assert!(split.portions(&[999], 0, 4).is_err());
    }
}
