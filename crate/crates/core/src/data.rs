//! Essay records, the ASAP prompt catalog, TSV ingestion and a synthetic
//! corpus with a known scoring rule.

use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::{agreement, AgreementReport, Scored};
use crate::numerics::Rng;
use crate::scoring::ScoreScale;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EssayRecord {
    pub essay_id: i64,
    pub prompt_id: u8,
    /// Raw essay bytes; not required to be UTF-8.
    pub text: Vec<u8>,
    pub rater1: i64,
    pub rater2: i64,
    pub resolved: i64,
}

impl Scored for EssayRecord {
    fn essay_id(&self) -> i64 {
        self.essay_id
    }
    fn gold(&self) -> i64 {
        self.resolved
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptInfo {
    pub prompt_id: u8,
    pub rater: ScoreScale,
    pub resolved: ScoreScale,
    pub training_examples: usize,
}

/// Score ranges and sizes of the eight ASAP prompts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptCatalog {
    pub prompts: Vec<PromptInfo>,
}

const ASAP: [(i64, i64, i64, i64, usize); 8] = [
    (1, 6, 2, 12, 1783),
    (1, 6, 1, 6, 1800),
    (0, 3, 0, 3, 1726),
    (0, 3, 0, 3, 1772),
    (0, 4, 0, 4, 1805),
    (0, 4, 0, 4, 1800),
    (0, 12, 2, 24, 1569),
    (5, 30, 10, 60, 723),
];

impl PromptCatalog {
    pub fn asap() -> Self {
        let prompts = ASAP
            .iter()
            .enumerate()
            .map(|(i, &(rl, rh, sl, sh, n))| PromptInfo {
                prompt_id: i as u8 + 1,
                rater: ScoreScale { min_score: rl, max_score: rh },
                resolved: ScoreScale { min_score: sl, max_score: sh },
                training_examples: n,
            })
            .collect();
        PromptCatalog { prompts }
    }

    pub fn get(&self, prompt_id: u8) -> Result<&PromptInfo> {
        self.prompts.iter().find(|p| p.prompt_id == prompt_id).ok_or_else(|| Error::Input(format!("unknown prompt {prompt_id}")))
    }
}

/// A row that failed validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ingested {
    pub records: Vec<EssayRecord>,
    pub rejections: Vec<Rejection>,
}

const ID_COLS: &[&str] = &["essay_id"];
const PROMPT_COLS: &[&str] = &["essay_set", "prompt_id", "prompt"];
const TEXT_COLS: &[&str] = &["essay", "text"];
const RATER1_COLS: &[&str] = &["rater1_domain1", "rater1"];
const RATER2_COLS: &[&str] = &["rater2_domain1", "rater2"];
const RESOLVED_COLS: &[&str] = &["domain1_score", "resolved"];

fn find_col(header: &[String], names: &[&str]) -> Result<usize> {
    header.iter().position(|h| names.contains(&h.as_str())).ok_or_else(|| Error::Format(format!("missing column {}", names[0])))
}

fn trim_bytes(b: &[u8]) -> &[u8] {
    let b = b.strip_suffix(b"\r").unwrap_or(b);
    b.trim_ascii()
}

/// Parses an ASAP-style TSV held in memory. `prompt` keeps only that
/// prompt's rows; `None` keeps every prompt in the catalog. Bad rows are
/// collected, never fatal.
pub fn ingest_bytes(bytes: &[u8], prompt: Option<u8>, catalog: &PromptCatalog) -> Result<Ingested> {
    let mut lines = bytes.split(|&b| b == b'\n');
    let header_line =
        lines.next().filter(|l| !trim_bytes(l).is_empty()).ok_or_else(|| Error::Format("empty file: no header".into()))?;
    let header: Vec<String> = trim_bytes(header_line)
        .split(|&b| b == b'\t')
        .map(|h| String::from_utf8_lossy(trim_bytes(h)).to_ascii_lowercase())
        .collect();
    let cols = [
        find_col(&header, ID_COLS)?,
        find_col(&header, PROMPT_COLS)?,
        find_col(&header, TEXT_COLS)?,
        find_col(&header, RATER1_COLS)?,
        find_col(&header, RATER2_COLS)?,
        find_col(&header, RESOLVED_COLS)?,
    ];
    let mut out = Ingested::default();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let fields: Vec<&[u8]> = raw.split(|&b| b == b'\t').collect();
        match parse_row(&fields, cols, prompt, catalog) {
            Ok(Some(r)) => out.records.push(r),
            Ok(None) => {}
            Err(reason) => out.rejections.push(Rejection { line, reason }),
        }
    }
    Ok(out)
}

fn parse_row(
    fields: &[&[u8]],
    cols: [usize; 6],
    prompt: Option<u8>,
    catalog: &PromptCatalog,
) -> std::result::Result<Option<EssayRecord>, String> {
    let get = |c: usize, name: &str| fields.get(c).copied().ok_or_else(|| format!("missing {name} field"));
    let int = |c: usize, name: &str| -> std::result::Result<i64, String> {
        let f = trim_bytes(get(c, name)?);
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("{name} {:?} is not an integer", String::from_utf8_lossy(f)))
    };
    let essay_id = int(cols[0], "essay_id")?;
    let set = int(cols[1], "essay_set")?;
    let info = u8::try_from(set)
        .ok()
        .and_then(|p| catalog.get(p).ok())
        .ok_or_else(|| format!("essay {essay_id}: unknown prompt {set}"))?;
    if prompt.is_some_and(|p| p != info.prompt_id) {
        return Ok(None);
    }
    let text = get(cols[2], "essay")?.to_vec();
    let rater1 = int(cols[3], "rater1")?;
    let rater2 = int(cols[4], "rater2")?;
    let resolved = int(cols[5], "resolved")?;
    for (name, v, scale) in
        [("rater1", rater1, info.rater), ("rater2", rater2, info.rater), ("resolved", resolved, info.resolved)]
    {
        if !scale.contains(v) {
            return Err(format!("essay {essay_id}: {name} score {v} outside {scale} for prompt {}", info.prompt_id));
        }
    }
    Ok(Some(EssayRecord { essay_id, prompt_id: info.prompt_id, text, rater1, rater2, resolved }))
}

pub fn ingest(path: &Path, prompt: Option<u8>, catalog: &PromptCatalog) -> Result<Ingested> {
    ingest_bytes(&crate::io::read(path)?, prompt, catalog)
}

/// Writes records in the column layout [`ingest`] reads.
pub fn records_to_tsv(records: &[EssayRecord]) -> Vec<u8> {
    let mut out = b"essay_id\tessay_set\tessay\trater1_domain1\trater2_domain1\tdomain1_score\n".to_vec();
    for r in records {
        out.extend_from_slice(format!("{}\t{}\t", r.essay_id, r.prompt_id).as_bytes());
        out.extend_from_slice(&r.text);
        out.extend_from_slice(format!("\t{}\t{}\t{}\n", r.rater1, r.rater2, r.resolved).as_bytes());
    }
    out
}

/// Everyday words for synthetic essays.
pub const COMMON_WORDS: [&str; 40] = [
    "the", "a", "and", "is", "was", "it", "we", "they", "go", "went", "good", "bad", "big", "small", "day", "home", "school",
    "friend", "fun", "like", "play", "help", "people", "think", "thing", "time", "very", "really", "get", "make", "see", "nice",
    "kid", "dog", "car", "food", "game", "lot", "happy", "sad",
];

/// Advanced vocabulary whose share of an essay sets its richness level.
pub const RICH_WORDS: [&str; 40] = [
    "consequently",
    "meticulous",
    "perspective",
    "substantial",
    "nevertheless",
    "phenomenon",
    "articulate",
    "comprehensive",
    "inevitable",
    "profound",
    "resilient",
    "scrutinize",
    "ambiguous",
    "benevolent",
    "contemplate",
    "elaborate",
    "empirical",
    "fundamental",
    "hypothesis",
    "illuminate",
    "integrity",
    "juxtapose",
    "legitimate",
    "magnitude",
    "narrative",
    "objective",
    "paradigm",
    "quintessential",
    "rhetoric",
    "sophisticated",
    "tangible",
    "unprecedented",
    "versatile",
    "whereas",
    "advocate",
    "catalyst",
    "diligent",
    "eloquent",
    "formidable",
    "genuine",
];

/// Scale of [`synthetic_score`], matching ASAP prompt 3.
pub const SYNTHETIC_SCALE: ScoreScale = ScoreScale { min_score: 0, max_score: 3 };
pub const SYNTHETIC_PROMPT: u8 = 3;
const LONG_WORDS: usize = 20;

/// Length bucket (0 below twenty words, 1 otherwise) plus richness level
/// (0, 1 or 2 by the share of advanced words, cut at 0.2 and 0.55).
pub fn synthetic_score(text: &[u8]) -> i64 {
    let words: Vec<String> = String::from_utf8_lossy(text)
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return 0;
    }
    let rich = words.iter().filter(|w| RICH_WORDS.contains(&w.as_str())).count() as f64 / words.len() as f64;
    let level = if rich >= 0.55 {
        2
    } else if rich >= 0.2 {
        1
    } else {
        0
    };
    i64::from(words.len() >= LONG_WORDS) + level
}

fn synthetic_text(rng: &mut Rng, long: bool, level: usize) -> Vec<u8> {
    let n = if long { 26 + rng.below(9) } else { 8 + rng.below(7) };
    let share = [0.0, 0.3, 0.7][level] + rng.uniform(0.0, 0.1);
    let n_rich = ((n as f64) * share).round() as usize;
    let mut words: Vec<&str> = (0..n)
        .map(|i| if i < n_rich { RICH_WORDS[rng.below(RICH_WORDS.len())] } else { COMMON_WORDS[rng.below(COMMON_WORDS.len())] })
        .collect();
    rng.shuffle(&mut words);
    let mut text = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            text.push(if rng.below(8) == 0 { ',' } else { ' ' });
            if text.ends_with(',') {
                text.push(' ');
            }
        }
        if i == 0 || rng.below(12) == 0 {
            let mut c = w.chars();
            let first = c.next().expect("nonempty word");
            text.extend(first.to_uppercase());
            text.push_str(c.as_str());
        } else {
            text.push_str(w);
        }
    }
    text.push('.');
    text.into_bytes()
}

/// `n` generated essays (ids `1..=n`) for prompt 3. Each essay is drawn for
/// a target length bucket and richness level with a margin from both cut
/// points; the gold score is recomputed from the text by
/// [`synthetic_score`].
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<EssayRecord> {
    let mut rng = Rng::stream(seed, 0x5717);
    (0..n)
        .map(|i| {
            let long = rng.below(2) == 1;
            let level = rng.below(3);
            let text = synthetic_text(&mut rng, long, level);
            let score = synthetic_score(&text);
            EssayRecord {
                essay_id: i as i64 + 1,
                prompt_id: SYNTHETIC_PROMPT,
                text,
                rater1: score,
                rater2: score,
                resolved: score,
            }
        })
        .collect()
}

/// Agreement between the two human raters on one prompt.
#[derive(Debug)]
pub struct PromptAgreement {
    pub prompt_id: u8,
    pub n: usize,
    pub report: Result<AgreementReport>,
}

/// Rater 2 scored against rater 1, per catalog prompt present in
/// `records`, on each prompt's rater scale.
pub fn human_agreement(records: &[EssayRecord], catalog: &PromptCatalog) -> Vec<PromptAgreement> {
    catalog
        .prompts
        .iter()
        .filter_map(|info| {
            let rows: Vec<&EssayRecord> = records.iter().filter(|r| r.prompt_id == info.prompt_id).collect();
            if rows.is_empty() {
                return None;
            }
            let r1: Vec<i64> = rows.iter().map(|r| r.rater1).collect();
            let r2: Vec<i64> = rows.iter().map(|r| r.rater2).collect();
            Some(PromptAgreement { prompt_id: info.prompt_id, n: rows.len(), report: agreement(&r2, &r1, &info.rater) })
        })
        .collect()
}
