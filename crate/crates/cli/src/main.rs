use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use essay_core::blocks::count_parameters;
use essay_core::config::RunConfig;
use essay_core::data::{self, EssayRecord, Ingested, PromptCatalog};
use essay_core::evaluation::{agreement, kfold_evaluate, FoldSplit};
use essay_core::exec::Exec;
use essay_core::io::write_atomic;
use essay_core::pipeline::{self, ScorerTrainer};
use essay_core::scoring::{self, Prediction, ScoreScale, Scorer};
use essay_core::tokenizer::Vocabulary;
use essay_core::{Error, Result};

/// Automated essay scoring toolkit.
#[derive(Parser)]
#[command(name = "aes", version, about)]
struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train or apply a byte-level BPE vocabulary.
    #[command(subcommand)]
    Tok(TokCommand),
    /// Fit a scorer with grid search and save it.
    Train(TrainArgs),
    /// Score essays with a saved model.
    Predict(PredictArgs),
    /// Average several prediction files.
    Ensemble(EnsembleArgs),
    /// Agreement between a prediction file and gold scores.
    Eval(EvalArgs),
    /// Five-fold cross-validation.
    Kfold(KfoldArgs),
    /// Count the parameters of a configuration.
    Params(ParamsArgs),
    /// Agreement between the two human raters, per prompt.
    AgreeHuman(AgreeHumanArgs),
    /// Write a synthetic essay corpus with a known scoring rule.
    Synth(SynthArgs),
}

#[derive(Subcommand)]
enum TokCommand {
    /// Learn merges from essays.
    Train(TokTrainArgs),
    /// Print the token ids of a text.
    Encode(TokEncodeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Essay TSV with essay_id, essay_set, essay, rater and resolved columns.
    #[arg(long)]
    data: PathBuf,
    /// Keep only this prompt (1-8).
    #[arg(long)]
    prompt: Option<u8>,
}

#[derive(Args)]
struct TokTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Target vocabulary size, including 4 specials and 256 bytes.
    #[arg(long, default_value_t = 8000)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TokEncodeArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// File whose bytes are encoded; standard input when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file or preset name.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    vocab: PathBuf,
    /// Score range MIN:MAX; defaults to the prompt's resolved range.
    #[arg(long)]
    scale: Option<ScoreScale>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Prediction files to average (repeatable).
    #[arg(long = "pred", required = true)]
    preds: Vec<PathBuf>,
    #[arg(long)]
    scale: ScoreScale,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Gold scores: a prediction file or an `essay_id<TAB>score` file.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    scale: ScoreScale,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct KfoldArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    vocab: PathBuf,
    /// Fold assignments; drawn from the seed when absent.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Save the fold assignments used.
    #[arg(long)]
    folds_out: Option<PathBuf>,
    #[arg(long)]
    scale: Option<ScoreScale>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Config file or preset name.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct AgreeHumanArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 800)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Shape(_) => 2,
        Error::Format(_) | Error::Io(_) => 3,
        Error::Data(_) => 4,
        Error::UndefinedStatistic(_) => 5,
        Error::Contract(_) => 1,
    }
}

fn load_records(args: &DataArgs) -> Result<Vec<EssayRecord>> {
    let Ingested { records, rejections } = data::ingest(&args.data, args.prompt, &PromptCatalog::asap())?;
    for r in &rejections {
        eprintln!("warning: {} line {}: {}", args.data.display(), r.line, r.reason);
    }
    if !rejections.is_empty() {
        eprintln!("warning: {} rows rejected", rejections.len());
    }
    Ok(records)
}

fn prompt_scale(args: &DataArgs, explicit: Option<ScoreScale>) -> Result<ScoreScale> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    let p = args.prompt.ok_or_else(|| Error::Input("pass --prompt or --scale to fix the score range".into()))?;
    Ok(PromptCatalog::asap().get(p)?.resolved)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_gold(path: &Path) -> Result<Vec<(i64, i64)>> {
    let text = essay_core::io::read_string(path)?;
    if text.starts_with(scoring::PREDICTION_HEADER) {
        return Ok(scoring::predictions_from_tsv(&text)?.into_iter().map(|p| (p.essay_id, p.score)).collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with("essay_id")) {
            continue;
        }
        let bad = || Error::Format(format!("{} line {}: expected essay_id<TAB>score", path.display(), i + 1));
        let (id, s) = line.split_once('\t').ok_or_else(bad)?;
        out.push((id.trim().parse().map_err(|_| bad())?, s.trim().parse().map_err(|_| bad())?));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Tok(TokCommand::Train(a)) => {
            let records = load_records(&a.data)?;
            let texts: Vec<&[u8]> = records.iter().map(|r| r.text.as_slice()).collect();
            let vocab = Vocabulary::train(&texts, a.size)?;
            vocab.save(&a.out)?;
            println!("{} tokens, {} merges", vocab.len(), vocab.merges().len());
        }
        Command::Tok(TokCommand::Encode(a)) => {
            let vocab = Vocabulary::load(&a.vocab)?;
            let bytes = match &a.input {
                Some(p) => essay_core::io::read(p)?,
                None => {
                    let mut b = Vec::new();
                    std::io::Read::read_to_end(&mut std::io::stdin(), &mut b)?;
                    b
                }
            };
            let ids = vocab.encode(&bytes, a.max_len.unwrap_or(usize::MAX));
            println!("{}", ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "));
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            let scale = prompt_scale(&a.data, a.scale)?;
            let records = load_records(&a.data)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            check_vocab(&cfg, &vocab)?;
            let out = pipeline::fit(&records, &vocab, &cfg.model, scale, &cfg.train, exec)?;
            out.scorer.save(&a.out)?;
            let b = &out.best;
            println!("lr={} batch={} epoch={} dev_qwk={:.6}", b.learning_rate, b.batch_size, b.best_epoch, b.dev_qwk);
        }
        Command::Predict(a) => {
            let scorer = Scorer::load(&a.model)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let records = load_records(&a.data)?;
            let refs: Vec<&EssayRecord> = records.iter().collect();
            scoring::write_predictions(&a.out, &pipeline::predict(&scorer, &vocab, &refs, exec)?)?;
        }
        Command::Ensemble(a) => {
            let sets = a.preds.iter().map(|p| scoring::read_predictions(p)).collect::<Result<Vec<_>>>()?;
            scoring::write_predictions(&a.out, &scoring::ensemble_predictions(&sets, &a.scale)?)?;
        }
        Command::Eval(a) => {
            let preds: Vec<Prediction> = scoring::read_predictions(&a.pred)?;
            let gold: std::collections::HashMap<i64, i64> = read_gold(&a.gold)?.into_iter().collect();
            let mut p = Vec::new();
            let mut g = Vec::new();
            for pr in &preds {
                let s = gold.get(&pr.essay_id).ok_or_else(|| Error::Data(format!("essay {} has no gold score", pr.essay_id)))?;
                p.push(pr.score);
                g.push(*s);
            }
            let r = agreement(&p, &g, &a.scale)?;
            let text = format!("fold\tqwk\tsmd\tacc\tn\nall\t{:.6}\t{:.6}\t{:.6}\t{}\n", r.qwk, r.smd, r.acc, r.n);
            emit(a.out.as_deref(), &text)?;
        }
        Command::Kfold(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            let scale = prompt_scale(&a.data, a.scale)?;
            let records = load_records(&a.data)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            check_vocab(&cfg, &vocab)?;
            let split = match &a.folds {
                Some(p) => FoldSplit::load(p)?,
                None => FoldSplit::random(&records.iter().map(|r| r.essay_id).collect::<Vec<_>>(), cfg.train.seed),
            };
            if let Some(p) = &a.folds_out {
                split.save(p)?;
            }
            let trainer = ScorerTrainer { vocab: &vocab, config: cfg.model.clone(), spec: cfg.train.clone(), exec };
            let report = kfold_evaluate(&records, &split, &trainer, &scale, cfg.train.seed, exec)?;
            emit(a.out.as_deref(), &report.to_tsv())?;
            report.mean_qwk()?;
        }
        Command::Params(a) => {
            let cfg = RunConfig::load(&a.config)?;
            println!("{}", count_parameters(&cfg.model));
        }
        Command::AgreeHuman(a) => {
            let records = load_records(&a.data)?;
            let catalog = PromptCatalog::asap();
            let mut text = String::from("prompt\tqwk\tsmd\tacc\tn\n");
            let mut undefined = None;
            for pa in data::human_agreement(&records, &catalog) {
                match pa.report {
                    Ok(r) => text += &format!("{}\t{:.6}\t{:.6}\t{:.6}\t{}\n", pa.prompt_id, r.qwk, r.smd.abs(), r.acc, r.n),
                    Err(e @ Error::UndefinedStatistic(_)) => {
                        text += &format!("{}\tNA\tNA\tNA\t{}\n", pa.prompt_id, pa.n);
                        undefined.get_or_insert(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            emit(a.out.as_deref(), &text)?;
            if let Some(e) = undefined {
                return Err(e);
            }
        }
        Command::Synth(a) => {
            write_atomic(&a.out, &data::records_to_tsv(&data::synthetic_corpus(a.n, a.seed)))?;
        }
    }
    Ok(())
}

fn check_vocab(cfg: &RunConfig, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() > cfg.model.vocab_size {
        return Err(Error::Input(format!(
            "vocabulary has {} tokens but the config's vocab_size is {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
