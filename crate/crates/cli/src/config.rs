//! Run configuration: a key-value file, `--set` overrides, then flags.

use std::path::{Path, PathBuf};

use spsr_core::data::PairSamplerConfig;
use spsr_core::kv::KvMap;
use spsr_core::train::{Ablation, TrainConfig};
use spsr_core::{Error, Result};

/// Namespaces a run config may use. `run.` is free-form and only echoed.
const NAMESPACES: &[&str] = &[
    "model.",
    "disc.",
    "loss.",
    "train.",
    "schedule.",
    "data.",
    "run.",
];
const LOSS_KEYS: &[&str] = &["beta_img", "gamma_img", "beta_gm", "gamma_gm", "beta_gb"];

#[derive(Debug, Default)]
pub struct ConfigSources<'a> {
    pub file: Option<&'a Path>,
    pub sets: &'a [String],
    pub data_dir: Option<&'a Path>,
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: PairSamplerConfig,
    /// Keys kept verbatim for the echoed config.
    pub raw: KvMap,
}

impl RunConfig {
    pub fn resolve(src: &ConfigSources) -> Result<Self> {
        let mut map = match src.file {
            Some(p) => KvMap::load(p)?,
            None => KvMap::new(),
        };
        for s in src.sets {
            map.apply_assignment(s)?;
        }
        if let Some(dir) = src.data_dir {
            map.set("data.hr_dir", dir.display());
        }
        if let Some(seed) = src.seed {
            map.set("seed", seed);
        }
        if let Some(a) = src.ablation {
            map.set("train.ablation", a);
        }
        Self::from_map(map)
    }

    pub fn from_map(mut map: KvMap) -> Result<Self> {
        if let Some((key, _)) = map
            .iter()
            .find(|(k, _)| *k != "seed" && !NAMESPACES.iter().any(|ns| k.starts_with(ns)))
        {
            return Err(Error::Config(format!(
                "unknown key {key:?}; keys are `seed` or start with one of {}",
                NAMESPACES.join(", ")
            )));
        }
        map.check_known("loss.", LOSS_KEYS)?;
        let seed: u64 = map.parse_or("seed", 0)?;
        let data = PairSamplerConfig::from_kv(&map, "data.", seed)?;
        // the image discriminator sees whole HR crops
        if !map.contains("disc.input_size") {
            map.set("disc.input_size", data.hr_patch());
        }
        let train = TrainConfig::from_kv(&map)?;
        let raw = map.iter().filter(|(k, _)| k.starts_with("run.")).fold(
            KvMap::new(),
            |mut m, (k, v)| {
                m.set(k, v);
                m
            },
        );
        Ok(RunConfig { train, data, raw })
    }
}

/// Absolute form of `p`, resolved against the working directory.
pub fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
}
