use std::path::PathBuf;
use unitcraft::scenegen::{GenConfig, Hidden, HintTiming, Verbosity};
use unitcraft::training::{TrainConfig, SEED_ENV};
use unitcraft::{Error, Result};

pub const DEFAULT_SEED: u64 = 19980417;

/// Everything a verb can be configured with. Flags are applied first, then
/// the config file, then `UNITCRAFT_SEED`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus_dir: Option<PathBuf>,
    pub store_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_dir: Option<PathBuf>,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            corpus_dir: None,
            store_dir: None,
            checkpoint_dir: None,
            log_dir: None,
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            seed: DEFAULT_SEED,
        };
        c.set_seed(DEFAULT_SEED);
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("bad value for {key}: {v}"))
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gen.rng_seed = seed;
        self.train.rollout.seed = seed;
        self.train.model.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let g = &mut self.gen;
        match key {
            "seed" => self.set_seed(parse(key, value)?),
            "corpus_dir" => self.corpus_dir = Some(value.into()),
            "store_dir" => self.store_dir = Some(value.into()),
            "checkpoint_dir" => self.checkpoint_dir = Some(value.into()),
            "log_dir" => self.log_dir = Some(value.into()),
            "wall_density" => g.wall_density = parse(key, value)?,
            "sessions_per_layout" => g.sessions_per_layout = parse(key, value)?,
            "max_retries" => g.max_retries = parse(key, value)?,
            "final_stop" => g.final_stop = parse(key, value)?,
            "hidden_fraction" => g.hidden = Hidden::Fraction(parse(key, value)?),
            "width" => g.width = range(key, value)?,
            "height" => g.height = range(key, value)?,
            "verbosity" => {
                g.verbosity = match value {
                    "terse" => Verbosity::Terse,
                    "chatty" => Verbosity::Chatty,
                    _ => return Err(format!("bad verbosity {value}")),
                }
            }
            "hint_timing" => {
                g.hint_timing = match value {
                    "upfront" => HintTiming::Upfront,
                    "stepwise" => HintTiming::Stepwise,
                    _ => return Err(format!("bad hint_timing {value}")),
                }
            }
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", v.trim()).map_err(Error::Config)?;
        }
        Ok(())
    }

    /// Creates every configured directory.
    pub fn ensure_dirs(&self) -> Result<()> {
        for d in [&self.corpus_dir, &self.store_dir, &self.checkpoint_dir, &self.log_dir]
            .into_iter()
            .flatten()
        {
            std::fs::create_dir_all(d)?;
        }
        Ok(())
    }
}

fn range(key: &str, v: &str) -> std::result::Result<(i32, i32), String> {
    match v.split_once("..") {
        Some((a, b)) => Ok((parse(key, a.trim())?, parse(key, b.trim())?)),
        None => {
            let x = parse(key, v)?;
            Ok((x, x))
        }
    }
}
