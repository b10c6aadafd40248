//! Flat `key = value` configuration files. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::cache_engine::KbInit;
use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::trainer::{FitConfig, LossWeights};

/// Parsed `key = value` pairs with their line numbers.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::InvalidArgument(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    /// Fails on any key outside `known`.
    pub fn expect_keys(&self, known: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::InvalidArgument(format!("line {line}: unknown key {k}")));
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidArgument(format!("line {line}: bad value {v:?} for {key}"))),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => parse_bool(v)
                .map(Some)
                .ok_or_else(|| Error::InvalidArgument(format!("line {line}: bad boolean {v:?} for {key}"))),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| Error::InvalidArgument(format!("line {line}: bad list {v:?} for {key}"))),
        }
    }

    pub fn bool_list(&self, key: &str) -> Result<Option<Vec<bool>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| parse_bool(s.trim()))
                .collect::<Option<Vec<_>>>()
                .map(Some)
                .ok_or_else(|| Error::InvalidArgument(format!("line {line}: bad boolean list {v:?} for {key}"))),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

/// `30`, `29.97` or `30000/1001`.
pub fn parse_fps(v: &str) -> Result<(u16, u16)> {
    let bad = || Error::InvalidArgument(format!("bad frame rate {v:?}"));
    let (n, d) = match v.split_once('/') {
        Some((n, d)) => (n.trim().parse::<u16>().map_err(|_| bad())?, d.trim().parse::<u16>().map_err(|_| bad())?),
        None => {
            if let Ok(n) = v.parse::<u16>() {
                (n, 1)
            } else {
                let f: f64 = v.parse().map_err(|_| bad())?;
                let n = (f * 1000.0).round();
                if !(1.0..=65535.0).contains(&n) {
                    return Err(bad());
                }
                (n as u16, 1000)
            }
        }
    };
    if n == 0 || d == 0 {
        return Err(bad());
    }
    Ok((n, d))
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "micro" => Ok(ModelConfig::micro()),
        _ => Err(Error::InvalidArgument(format!("unknown model preset {name:?} (desk, micro)"))),
    }
}

/// Every encoder setting. See `docs/config.md` for the key reference.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeConfig {
    pub model: String,
    pub model_seed: u64,
    pub weights: Option<PathBuf>,
    pub fps: (u16, u16),
    pub q: u32,
    pub residual_bps: u64,
    pub residual_rank_reduction: usize,
    pub noise_seed: u64,
    pub scene_cut_factor: f64,
    pub fit: FitConfig,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            model: "desk".into(),
            model_seed: 0,
            weights: None,
            fps: (30, 1),
            q: 12,
            residual_bps: 0,
            residual_rank_reduction: 0,
            noise_seed: 0,
            scene_cut_factor: 4.0,
            fit: FitConfig::default(),
        }
    }
}

pub const ENCODE_KEYS: &[&str] = &[
    "model",
    "model_seed",
    "weights",
    "fps",
    "rank",
    "q",
    "group_len",
    "cache_ratio",
    "kv_cache",
    "kb_init",
    "residual_bps",
    "residual_rank_reduction",
    "lr",
    "momentum",
    "phase1_iters",
    "phase2_iters",
    "mse_weight",
    "freq_weight",
    "init_std",
    "seed",
    "noise_seed",
    "scene_cut_factor",
];

impl EncodeConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        kv.expect_keys(ENCODE_KEYS)?;
        let mut c = Self::default();
        if let Some(v) = kv.raw("model") {
            preset(v)?;
            c.model = v.into();
        }
        c.model_seed = kv.get("model_seed")?.unwrap_or(c.model_seed);
        c.weights = kv.raw("weights").map(PathBuf::from);
        if let Some(v) = kv.raw("fps") {
            c.fps = parse_fps(v)?;
        }
        c.q = kv.get("q")?.unwrap_or(c.q);
        c.residual_bps = kv.get("residual_bps")?.unwrap_or(0);
        c.residual_rank_reduction = kv.get("residual_rank_reduction")?.unwrap_or(0);
        c.noise_seed = kv.get("noise_seed")?.unwrap_or(0);
        c.scene_cut_factor = kv.get("scene_cut_factor")?.unwrap_or(c.scene_cut_factor);
        let f = &mut c.fit;
        f.rank = kv.get("rank")?.unwrap_or(f.rank);
        f.group_len = kv.get("group_len")?.unwrap_or(f.group_len);
        f.ratio = kv.get("cache_ratio")?.unwrap_or(f.ratio);
        f.kv_cache = kv.bool("kv_cache")?.unwrap_or(f.kv_cache);
        f.lr = kv.get("lr")?.unwrap_or(f.lr);
        f.momentum = kv.get("momentum")?.unwrap_or(f.momentum);
        f.phase1_iters = kv.get("phase1_iters")?.unwrap_or(f.phase1_iters);
        f.phase2_iters = kv.get("phase2_iters")?.unwrap_or(f.phase2_iters);
        f.weights = LossWeights {
            mse: kv.get("mse_weight")?.unwrap_or(f.weights.mse),
            freq: kv.get("freq_weight")?.unwrap_or(f.weights.freq),
        };
        f.init_std = kv.get("init_std")?.unwrap_or(f.init_std);
        f.seed = kv.get("seed")?.unwrap_or(f.seed);
        f.kb_init = match kv.raw("kb_init") {
            None | Some("ones") => KbInit::OnesZeros,
            Some("random") => KbInit::Random { seed: f.seed },
            Some(v) => return Err(Error::InvalidArgument(format!("kb_init must be ones or random, got {v:?}"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if !(1..=24).contains(&self.q) {
            return Err(Error::InvalidArgument(format!("q = {} outside 1..=24", self.q)));
        }
        if !(self.scene_cut_factor > 0.0) {
            return Err(Error::InvalidArgument("scene_cut_factor must be positive".into()));
        }
        if self.fit.group_len > u16::MAX as usize || self.fit.rank > u16::MAX as usize {
            return Err(Error::InvalidArgument("group_len and rank must fit in 16 bits".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let text = "\
# comment
model = micro
model_seed = 3
fps = 30000/1001
rank = 2   # trailing
q = 10
group_len = 3
cache_ratio = 0.25
kv_cache = false
kb_init = random
residual_bps = 5000
residual_rank_reduction = 1
lr = 4
momentum = 0.5
phase1_iters = 10
phase2_iters = 5
mse_weight = 2
freq_weight = 0
init_std = 0.1
seed = 9
noise_seed = 8
scene_cut_factor = 3
weights = w.bin
";
        let c = EncodeConfig::parse(text).unwrap();
        assert_eq!(c.model, "micro");
        assert_eq!(c.fps, (30000, 1001));
        assert_eq!(c.fit.rank, 2);
        assert!(!c.fit.kv_cache);
        assert_eq!(c.fit.kb_init, KbInit::Random { seed: 9 });
        assert_eq!(c.fit.weights, LossWeights { mse: 2.0, freq: 0.0 });
        assert_eq!(c.weights, Some(PathBuf::from("w.bin")));
        assert_eq!(c.noise_seed, 8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(EncodeConfig::parse("nope = 1").is_err());
        assert!(EncodeConfig::parse("rank").is_err());
        assert!(EncodeConfig::parse("rank = x").is_err());
        assert!(EncodeConfig::parse("rank = 1\nrank = 2").is_err());
        assert!(EncodeConfig::parse("cache_ratio = 2").is_err());
        assert!(EncodeConfig::parse("model = big").is_err());
        assert_eq!(EncodeConfig::parse("").unwrap(), EncodeConfig::default());
    }

    #[test]
    fn fps_forms() {
        assert_eq!(parse_fps("30").unwrap(), (30, 1));
        assert_eq!(parse_fps("29.97").unwrap(), (29970, 1000));
        assert!(parse_fps("0").is_err());
        assert!(parse_fps("a/b").is_err());
    }
}
