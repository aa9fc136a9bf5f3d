//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. `preset = NAME` loads a
//! shipped architecture and later keys override it. `ff_dim` defaults to
//! four times `hidden_dim` and `embed_dim` to `hidden_dim`; any `lsh_*` key
//! switches attention to shared-QK LSH. Unknown keys are errors.

use std::path::Path;

use crate::attention::LshConfig;
use crate::blocks::ModelConfig;
use crate::error::{Error, Result};
use crate::scoring::TrainSpec;

pub const PRESETS: [(&str, &str); 6] = [
    ("bert-base", include_str!("../presets/bert-base.cfg")),
    ("albert-base", include_str!("../presets/albert-base.cfg")),
    ("albert-large", include_str!("../presets/albert-large.cfg")),
    ("electra-small", include_str!("../presets/electra-small.cfg")),
    ("mobilebert", include_str!("../presets/mobilebert.cfg")),
    ("reformer", include_str!("../presets/reformer.cfg")),
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".cfg").unwrap_or(name);
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSpec,
}

#[derive(Default)]
struct Draft {
    vocab_size: Option<usize>,
    embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
    ff_dim: Option<usize>,
    num_layers: Option<usize>,
    num_heads: Option<usize>,
    max_len: Option<usize>,
    bottleneck_dim: Option<usize>,
    share_layers: Option<bool>,
    reversible: Option<bool>,
    num_segments: Option<usize>,
    lsh_hashes: Option<usize>,
    lsh_buckets: Option<usize>,
    lsh_chunk: Option<usize>,
    lsh_seed: Option<u64>,
    train: TrainSpec,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Input(format!("config line {line}: bad value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim(), line)).collect()
}

impl Draft {
    fn apply(&mut self, text: &str, allow_preset: bool) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) =
                content.split_once('=').ok_or_else(|| Error::Input(format!("config line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "preset" if allow_preset => {
                    let t = preset_text(value)
                        .ok_or_else(|| Error::Input(format!("config line {line}: unknown preset {value:?}")))?;
                    self.apply(t, false)?;
                }
                "vocab_size" => self.vocab_size = Some(parse(key, value, line)?),
                "embed_dim" => self.embed_dim = Some(parse(key, value, line)?),
                "hidden_dim" => self.hidden_dim = Some(parse(key, value, line)?),
                "ff_dim" => self.ff_dim = Some(parse(key, value, line)?),
                "num_layers" => self.num_layers = Some(parse(key, value, line)?),
                "num_heads" => self.num_heads = Some(parse(key, value, line)?),
                "max_len" => self.max_len = Some(parse(key, value, line)?),
                "bottleneck_dim" => self.bottleneck_dim = Some(parse(key, value, line)?),
                "share_layers" => self.share_layers = Some(parse(key, value, line)?),
                "reversible" => self.reversible = Some(parse(key, value, line)?),
                "num_segments" => self.num_segments = Some(parse(key, value, line)?),
                "lsh_hashes" => self.lsh_hashes = Some(parse(key, value, line)?),
                "lsh_buckets" => self.lsh_buckets = Some(parse(key, value, line)?),
                "lsh_chunk" => self.lsh_chunk = Some(parse(key, value, line)?),
                "lsh_seed" => self.lsh_seed = Some(parse(key, value, line)?),
                "learning_rates" => self.train.learning_rates = parse_list(key, value, line)?,
                "batch_sizes" => self.train.batch_sizes = parse_list(key, value, line)?,
                "epochs" => self.train.epochs = parse(key, value, line)?,
                "patience" => self.train.patience = parse(key, value, line)?,
                "seed" => self.train.seed = parse(key, value, line)?,
                _ => return Err(Error::Input(format!("config line {line}: unknown key {key:?}"))),
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<RunConfig> {
        let need = |v: Option<usize>, k: &str| v.ok_or_else(|| Error::Input(format!("config is missing {k}")));
        let hidden = need(self.hidden_dim, "hidden_dim")?;
        let any_lsh =
            self.lsh_hashes.is_some() || self.lsh_buckets.is_some() || self.lsh_chunk.is_some() || self.lsh_seed.is_some();
        let model = ModelConfig {
            vocab_size: need(self.vocab_size, "vocab_size")?,
            embed_dim: self.embed_dim.unwrap_or(hidden),
            hidden_dim: hidden,
            ff_dim: self.ff_dim.unwrap_or(4 * hidden),
            num_layers: need(self.num_layers, "num_layers")?,
            num_heads: need(self.num_heads, "num_heads")?,
            max_len: need(self.max_len, "max_len")?,
            bottleneck_dim: self.bottleneck_dim.unwrap_or(0),
            share_layers: self.share_layers.unwrap_or(false),
            reversible: self.reversible.unwrap_or(false),
            lsh: any_lsh.then(|| LshConfig {
                num_hashes: self.lsh_hashes.unwrap_or(2),
                num_buckets: self.lsh_buckets.unwrap_or(8),
                chunk_size: self.lsh_chunk.unwrap_or(32),
                seed: self.lsh_seed.unwrap_or(0),
            }),
            num_segments: self.num_segments.unwrap_or(1),
        };
        model.validate()?;
        self.train.validate()?;
        Ok(RunConfig { model, train: self.train })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut d = Draft::default();
        d.apply(text, true)?;
        d.finish()
    }

    /// Reads `path`, or a shipped preset when `path` does not exist and
    /// names one (with or without `.cfg`).
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(t) = preset_text(name) {
                return RunConfig::parse(t);
            }
        }
        RunConfig::parse(&crate::io::read_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = format!(
            "vocab_size = {}\nembed_dim = {}\nhidden_dim = {}\nff_dim = {}\nnum_layers = {}\nnum_heads = {}\nmax_len = {}\n\
             bottleneck_dim = {}\nshare_layers = {}\nreversible = {}\nnum_segments = {}\n",
            m.vocab_size,
            m.embed_dim,
            m.hidden_dim,
            m.ff_dim,
            m.num_layers,
            m.num_heads,
            m.max_len,
            m.bottleneck_dim,
            m.share_layers,
            m.reversible,
            m.num_segments
        );
        if let Some(l) = &m.lsh {
            s += &format!(
                "lsh_hashes = {}\nlsh_buckets = {}\nlsh_chunk = {}\nlsh_seed = {}\n",
                l.num_hashes, l.num_buckets, l.chunk_size, l.seed
            );
        }
        let t = &self.train;
        let list = |v: &[String]| v.join(", ");
        s += &format!(
            "learning_rates = {}\nbatch_sizes = {}\nepochs = {}\npatience = {}\nseed = {}\n",
            list(&t.learning_rates.iter().map(|x| x.to_string()).collect::<Vec<_>>()),
            list(&t.batch_sizes.iter().map(|x| x.to_string()).collect::<Vec<_>>()),
            t.epochs,
            t.patience,
            t.seed
        );
        s
    }
}
