//! Flat key=value configuration files for the training stages.
//!
//! Schema: one `key=value` per line; `#` starts a comment; blank lines
//! ignored. Unknown keys are rejected outright so typos cannot fall
//! back to defaults silently. Keys prefixed `split_` document dataset
//! split sizes and are collected verbatim.
//!
//! Pretraining keys: `mode=pretrain`, `epochs`, `lr`, `eta_min`,
//! `schedule` (comma list of `start:batch:patch`), `seed`,
//! `weight_decay`, `pearson` (bool). Fine-tuning keys:
//! `mode=finetune`, `steps`, `batch_size`, `lr`, `eta_min`,
//! `lambda1..3`, `desired_q` (`-inf` disables early stop), `seed`,
//! `weight_decay`. Both accept the network keys `net_levels`,
//! `net_base_channels`, `net_blocks`, `net_heads` (comma lists),
//! `net_expansion`, `net_shuffle_factor`, `net_reorder_groups`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, UieError};
use crate::loss::LossWeights;
use crate::net::NetworkConfig;
use crate::train::{FinetuneConfig, PretrainConfig, ScheduleStage};

/// Key=value accessor that tracks which keys were consumed, so the
/// caller can reject leftovers.
pub struct KvReader {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl KvReader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UieError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(UieError::Config(format!("line {}: empty key", lineno + 1)));
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(UieError::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
        }
        Ok(Self { map, used: BTreeSet::new() })
    }

    /// Raw value, marking the key consumed.
    pub fn take(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    /// Parse the value if present; a present-but-unparseable value is
    /// a hard error, never a silent default.
    pub fn take_parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                UieError::Config(format!("key {key:?}: cannot parse value {raw:?}"))
            }),
        }
    }

    /// Consume every key sharing a prefix, parsed as u64 counts.
    pub fn take_prefixed_counts(&mut self, prefix: &str) -> Result<BTreeMap<String, u64>> {
        let keys: Vec<String> =
            self.map.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let mut out = BTreeMap::new();
        for key in keys {
            let raw = self.take(&key).unwrap();
            let n = raw.parse::<u64>().map_err(|_| {
                UieError::Config(format!("key {key:?}: cannot parse count {raw:?}"))
            })?;
            out.insert(key, n);
        }
        Ok(out)
    }

    /// Error on any key that was never consumed.
    pub fn finish(self) -> Result<()> {
        let leftover: Vec<&String> =
            self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        if leftover.is_empty() {
            Ok(())
        } else {
            Err(UieError::Config(format!(
                "unknown key(s): {}",
                leftover.iter().map(|k| format!("{k:?}")).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

/// Parse `start:batch:patch,start:batch:patch,...`.
pub fn parse_schedule(s: &str) -> Result<Vec<ScheduleStage>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() != 3 {
            return Err(UieError::Config(format!(
                "schedule stage {part:?}: want start:batch:patch"
            )));
        }
        let parse = |f: &str, what: &str| -> Result<usize> {
            f.trim().parse().map_err(|_| {
                UieError::Config(format!("schedule stage {part:?}: bad {what} {f:?}"))
            })
        };
        out.push(ScheduleStage {
            start_epoch: parse(fields[0], "start epoch")?,
            batch_size: parse(fields[1], "batch size")?,
            patch_size: parse(fields[2], "patch size")?,
        });
    }
    Ok(out)
}

pub fn render_schedule(schedule: &[ScheduleStage]) -> String {
    schedule
        .iter()
        .map(|s| format!("{}:{}:{}", s.start_epoch, s.batch_size, s.patch_size))
        .collect::<Vec<_>>()
        .join(",")
}

fn take_usize_list(kv: &mut KvReader, key: &str) -> Result<Option<Vec<usize>>> {
    match kv.take(key) {
        None => Ok(None),
        Some(raw) => raw
            .split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| {
                    UieError::Config(format!("key {key:?}: bad list entry {p:?}"))
                })
            })
            .collect::<Result<Vec<usize>>>()
            .map(Some),
    }
}

/// Returns the network plus whether any `net_*` key was actually
/// present (callers distinguish explicit topology from the default).
fn take_network(kv: &mut KvReader) -> Result<(NetworkConfig, bool)> {
    let mut net = NetworkConfig::default();
    let mut explicit = false;
    if let Some(v) = kv.take_parse("net_levels")? {
        net.levels = v;
        explicit = true;
        // keep the per-level lists consistent when only the level
        // count is given
        net.blocks_per_level = vec![2; v];
        net.heads_per_level = (0..v).map(|i| 1 << i).collect();
    }
    if let Some(v) = kv.take_parse("net_base_channels")? {
        net.base_channels = v;
        explicit = true;
    }
    if let Some(v) = take_usize_list(kv, "net_blocks")? {
        net.blocks_per_level = v;
        explicit = true;
    }
    if let Some(v) = take_usize_list(kv, "net_heads")? {
        net.heads_per_level = v;
        explicit = true;
    }
    if let Some(v) = kv.take_parse("net_expansion")? {
        net.crgfn_expansion = v;
        explicit = true;
    }
    if let Some(v) = kv.take_parse("net_shuffle_factor")? {
        net.shuffle_factor = v;
        explicit = true;
    }
    if let Some(v) = kv.take_parse("net_reorder_groups")? {
        net.reorder_groups = v;
        explicit = true;
    }
    net.validate()?;
    Ok((net, explicit))
}

fn render_network(net: &NetworkConfig) -> String {
    let list = |v: &[usize]| {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    };
    format!(
        "net_levels={}\nnet_base_channels={}\nnet_blocks={}\nnet_heads={}\nnet_expansion={}\nnet_shuffle_factor={}\nnet_reorder_groups={}\n",
        net.levels,
        net.base_channels,
        list(&net.blocks_per_level),
        list(&net.heads_per_level),
        net.crgfn_expansion,
        net.shuffle_factor,
        net.reorder_groups
    )
}

fn render_splits(splits: &BTreeMap<String, u64>) -> String {
    splits.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn expect_mode(kv: &mut KvReader, want: &str) -> Result<()> {
    match kv.take("mode") {
        Some(m) if m == want => Ok(()),
        Some(m) => Err(UieError::Config(format!("mode {m:?} where {want:?} expected"))),
        None => Err(UieError::Config("missing required key \"mode\"".into())),
    }
}

/// A parsed pretraining config file.
#[derive(Clone, Debug)]
pub struct PretrainFile {
    pub config: PretrainConfig,
    pub net: NetworkConfig,
    /// True when the file spelled out any `net_*` key itself.
    pub net_explicit: bool,
    /// Documented dataset split sizes (keys keep their `split_` prefix).
    pub splits: BTreeMap<String, u64>,
}

pub fn parse_pretrain_config(text: &str) -> Result<PretrainFile> {
    let mut kv = KvReader::parse(text)?;
    expect_mode(&mut kv, "pretrain")?;
    let mut config = PretrainConfig::default();
    if let Some(v) = kv.take_parse("epochs")? {
        config.epochs = v;
        config.schedule = crate::train::desk_schedule(v);
    }
    if let Some(v) = kv.take_parse("lr")? {
        config.lr = v;
    }
    if let Some(v) = kv.take_parse("eta_min")? {
        config.eta_min = v;
    }
    if let Some(raw) = kv.take("schedule") {
        config.schedule = parse_schedule(&raw)?;
    }
    if let Some(v) = kv.take_parse("seed")? {
        config.seed = v;
    }
    if let Some(v) = kv.take_parse("weight_decay")? {
        config.weight_decay = v;
    }
    if let Some(v) = kv.take_parse("pearson")? {
        config.use_pearson = v;
    }
    let (net, net_explicit) = take_network(&mut kv)?;
    let splits = kv.take_prefixed_counts("split_")?;
    kv.finish()?;
    config.validate()?;
    Ok(PretrainFile { config, net, net_explicit, splits })
}

pub fn load_pretrain_config(path: &Path) -> Result<PretrainFile> {
    let text = std::fs::read_to_string(path).map_err(|e| UieError::io(path, e))?;
    parse_pretrain_config(&text)
}

/// Render a pretraining file so that parsing the result reproduces
/// `f` exactly. The `mode=` line must stay first: checkpoint
/// consumers dispatch on it.
pub fn render_pretrain_config(f: &PretrainFile) -> String {
    let c = &f.config;
    format!(
        "mode=pretrain\nepochs={}\nlr={}\neta_min={}\nschedule={}\nseed={}\nweight_decay={}\npearson={}\n{}{}",
        c.epochs,
        c.lr,
        c.eta_min,
        render_schedule(&c.schedule),
        c.seed,
        c.weight_decay,
        c.use_pearson,
        render_network(&f.net),
        render_splits(&f.splits)
    )
}

/// A parsed fine-tuning config file.
#[derive(Clone, Debug)]
pub struct FinetuneFile {
    pub config: FinetuneConfig,
    pub net: NetworkConfig,
    /// True when the file spelled out any `net_*` key itself.
    pub net_explicit: bool,
    pub splits: BTreeMap<String, u64>,
}

pub fn parse_finetune_config(text: &str) -> Result<FinetuneFile> {
    let mut kv = KvReader::parse(text)?;
    expect_mode(&mut kv, "finetune")?;
    let mut config = FinetuneConfig::default();
    if let Some(v) = kv.take_parse("steps")? {
        config.steps = v;
    }
    if let Some(v) = kv.take_parse("batch_size")? {
        config.batch_size = v;
    }
    if let Some(v) = kv.take_parse("lr")? {
        config.lr = v;
    }
    if let Some(v) = kv.take_parse("eta_min")? {
        config.eta_min = v;
    }
    let mut weights = LossWeights::default();
    if let Some(v) = kv.take_parse("lambda1")? {
        weights.lambda1 = v;
    }
    if let Some(v) = kv.take_parse("lambda2")? {
        weights.lambda2 = v;
    }
    if let Some(v) = kv.take_parse("lambda3")? {
        weights.lambda3 = v;
    }
    config.weights = weights;
    if let Some(v) = kv.take_parse("desired_q")? {
        config.desired_q = v;
    }
    if let Some(v) = kv.take_parse("seed")? {
        config.seed = v;
    }
    if let Some(v) = kv.take_parse("weight_decay")? {
        config.weight_decay = v;
    }
    let (net, net_explicit) = take_network(&mut kv)?;
    let splits = kv.take_prefixed_counts("split_")?;
    kv.finish()?;
    config.validate()?;
    Ok(FinetuneFile { config, net, net_explicit, splits })
}

pub fn load_finetune_config(path: &Path) -> Result<FinetuneFile> {
    let text = std::fs::read_to_string(path).map_err(|e| UieError::io(path, e))?;
    parse_finetune_config(&text)
}

/// Render a fine-tuning file so that parsing the result reproduces
/// `f` exactly. The `mode=` line must stay first.
pub fn render_finetune_config(f: &FinetuneFile) -> String {
    let c = &f.config;
    format!(
        "mode=finetune\nsteps={}\nbatch_size={}\nlr={}\neta_min={}\nlambda1={}\nlambda2={}\nlambda3={}\ndesired_q={}\nseed={}\nweight_decay={}\n{}{}",
        c.steps,
        c.batch_size,
        c.lr,
        c.eta_min,
        c.weights.lambda1,
        c.weights.lambda2,
        c.weights.lambda3,
        c.desired_q,
        c.seed,
        c.weight_decay,
        render_network(&f.net),
        render_splits(&f.splits)
    )
}
