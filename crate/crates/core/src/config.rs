//! Run configuration as flat `key = value` text.
//!
//! Later sources override earlier ones: defaults, then a config file, then
//! command-line flags. Every key that differs from its default is listed by
//! [`RunConfig::overrides`] so reports can echo it.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::benchdata::{AugmentSpec, SyntheticWorldSpec};
use crate::confenc::EncoderConfig;
use crate::error::{Error, Result};
use crate::metafeat::ExtractorConfig;
use crate::metrics::Method;
use crate::protocol::{MethodFlags, ServerSettings};
use crate::ranker::{LossSettings, RankLoss, RankerSpec};
use crate::space::SpaceKind;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub space: SpaceKind,
    pub hidden: usize,
    pub lr: f64,
    pub lr_trans: f64,
    pub batch_size: usize,
    pub n_iters: usize,
    pub n_trans: usize,
    pub lambda_sim: f64,
    pub alpha: f64,
    pub lambda_reg: f64,
    pub sampling_ratio: [f64; 3],
    pub exploration: f64,
    pub budget: usize,
    pub pool_size: usize,
    pub warmup_triplets: usize,
    pub warmup_steps: usize,
    pub xi: f64,
    pub gin_dropout: f64,
    /// Images per meta-feature extraction.
    pub image_batch: usize,
    pub use_labels: bool,
    pub datasets: usize,
    pub images_per_dataset: usize,
    pub latent_dim: usize,
    pub noise: f64,
    pub world_seed: u64,
    pub augment: bool,
    pub augment_max: usize,
    pub seed: u64,
    pub seeds: usize,
    pub parallel_seeds: usize,
    pub methods: Vec<Method>,
    pub transcripts: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = SyntheticWorldSpec::default();
        let loss = LossSettings::default();
        Self {
            space: SpaceKind::Hpo,
            hidden: 64,
            lr: 1e-4,
            lr_trans: 1e-4,
            batch_size: 4,
            n_iters: 50,
            n_trans: 20,
            lambda_sim: loss.lambda_sim,
            alpha: loss.alpha,
            lambda_reg: loss.lambda_reg,
            sampling_ratio: [5.0, 1.0, 1.0],
            exploration: 0.5,
            budget: 4,
            pool_size: 200,
            warmup_triplets: 3000,
            warmup_steps: 1500,
            xi: 0.1,
            gin_dropout: 0.2,
            image_batch: 32,
            use_labels: true,
            datasets: world.datasets,
            images_per_dataset: world.images_per_dataset,
            latent_dim: world.latent_dim,
            noise: world.noise,
            world_seed: world.seed,
            augment: true,
            augment_max: AugmentSpec::default().max_datasets.unwrap_or(0),
            seed: 0,
            seeds: 20,
            parallel_seeds: 1,
            methods: vec![Method::Random, Method::full()],
            transcripts: false,
        }
    }
}

pub const KEYS: [&str; 32] = [
    "space",
    "hidden",
    "lr",
    "lr_trans",
    "batch_size",
    "n_iters",
    "n_trans",
    "lambda_sim",
    "alpha",
    "lambda_reg",
    "sampling_ratio",
    "exploration",
    "budget",
    "pool_size",
    "warmup_triplets",
    "warmup_steps",
    "xi",
    "gin_dropout",
    "image_batch",
    "use_labels",
    "datasets",
    "images_per_dataset",
    "latent_dim",
    "noise",
    "world_seed",
    "augment",
    "augment_max",
    "seed",
    "seeds",
    "parallel_seeds",
    "methods",
    "transcripts",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "space" => self.space = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_trans" => self.lr_trans = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "n_iters" => self.n_iters = parse(key, v)?,
            "n_trans" => self.n_trans = parse(key, v)?,
            "lambda_sim" => self.lambda_sim = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda_reg" => self.lambda_reg = parse(key, v)?,
            "sampling_ratio" => {
                let parts: Vec<f64> = v.split(':').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                self.sampling_ratio = parts
                    .try_into()
                    .map_err(|_| Error::InvalidConfig(format!("`{key}`: expected a:b:c, got `{v}`")))?;
            }
            "exploration" => self.exploration = parse(key, v)?,
            "budget" => self.budget = parse(key, v)?,
            "pool_size" => self.pool_size = parse(key, v)?,
            "warmup_triplets" => self.warmup_triplets = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "xi" => self.xi = parse(key, v)?,
            "gin_dropout" => self.gin_dropout = parse(key, v)?,
            "image_batch" => self.image_batch = parse(key, v)?,
            "use_labels" => self.use_labels = parse_bool(key, v)?,
            "datasets" => self.datasets = parse(key, v)?,
            "images_per_dataset" => self.images_per_dataset = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "world_seed" => self.world_seed = parse(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "augment_max" => self.augment_max = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "seeds" => self.seeds = parse(key, v)?,
            "parallel_seeds" => self.parallel_seeds = parse(key, v)?,
            "methods" => {
                self.methods = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "transcripts" => self.transcripts = parse_bool(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "space" => self.space.to_string(),
            "hidden" => self.hidden.to_string(),
            "lr" => self.lr.to_string(),
            "lr_trans" => self.lr_trans.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "n_iters" => self.n_iters.to_string(),
            "n_trans" => self.n_trans.to_string(),
            "lambda_sim" => self.lambda_sim.to_string(),
            "alpha" => self.alpha.to_string(),
            "lambda_reg" => self.lambda_reg.to_string(),
            "sampling_ratio" => self.sampling_ratio.map(|r| r.to_string()).join(":"),
            "exploration" => self.exploration.to_string(),
            "budget" => self.budget.to_string(),
            "pool_size" => self.pool_size.to_string(),
            "warmup_triplets" => self.warmup_triplets.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "xi" => self.xi.to_string(),
            "gin_dropout" => self.gin_dropout.to_string(),
            "image_batch" => self.image_batch.to_string(),
            "use_labels" => self.use_labels.to_string(),
            "datasets" => self.datasets.to_string(),
            "images_per_dataset" => self.images_per_dataset.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "noise" => self.noise.to_string(),
            "world_seed" => self.world_seed.to_string(),
            "augment" => self.augment.to_string(),
            "augment_max" => self.augment_max.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => self.seeds.to_string(),
            "parallel_seeds" => self.parallel_seeds.to_string(),
            "methods" => self.methods.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            "transcripts" => self.transcripts.to_string(),
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
                line: i + 1,
                reason: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS.iter() {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    /// Keys whose value differs from the default.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let d = Self::default();
        KEYS.iter()
            .filter_map(|k| {
                let (a, b) = (self.get(k).ok()?, d.get(k).ok()?);
                (a != b).then(|| (k.to_string(), a))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden == 0 || self.batch_size == 0 || self.image_batch == 0 {
            return bad("hidden, batch_size and image_batch must be positive".into());
        }
        if self.budget == 0 || self.budget > self.pool_size {
            return bad(format!("budget {} must be in 1..=pool_size {}", self.budget, self.pool_size));
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return bad(format!("exploration {} must lie in [0, 1]", self.exploration));
        }
        if self.sampling_ratio.iter().any(|r| !(*r >= 0.0)) || self.sampling_ratio.iter().sum::<f64>() <= 0.0 {
            return bad("sampling_ratio needs non-negative parts with a positive sum".into());
        }
        if !(self.lr > 0.0) || !(self.lr_trans > 0.0) || !(self.xi > 0.0) {
            return bad("lr, lr_trans and xi must be positive".into());
        }
        if self.seeds == 0 || self.parallel_seeds == 0 {
            return bad("seeds and parallel_seeds must be positive".into());
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        self.world_spec().validate()
    }

    pub fn ranker_spec(&self) -> Result<RankerSpec> {
        RankerSpec::new(
            self.space,
            ExtractorConfig {
                hidden: self.hidden,
                use_labels: self.use_labels,
                batch_size: self.image_batch,
                ..ExtractorConfig::default()
            },
            EncoderConfig {
                hidden: self.hidden,
                gin_dropout: self.gin_dropout,
            },
        )
    }

    pub fn server_settings(&self) -> Result<ServerSettings> {
        self.validate()?;
        Ok(ServerSettings {
            ranker: self.ranker_spec()?,
            loss: LossSettings {
                rank: RankLoss::Ndcg,
                lambda_sim: self.lambda_sim,
                alpha: self.alpha,
                lambda_reg: self.lambda_reg,
            },
            lr: self.lr,
            lr_trans: self.lr_trans,
            batch_size: self.batch_size,
            n_iters: self.n_iters,
            n_trans: self.n_trans,
            sampling_ratio: self.sampling_ratio,
            exploration: self.exploration,
            budget: self.budget,
            pool_size: self.pool_size,
            warmup_triplets: self.warmup_triplets,
            warmup_steps: self.warmup_steps,
            xi: self.xi,
            flags: MethodFlags::default(),
        })
    }

    pub fn world_spec(&self) -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            datasets: self.datasets,
            images_per_dataset: self.images_per_dataset,
            latent_dim: self.latent_dim,
            noise: self.noise,
            seed: self.world_seed,
        }
    }

    pub fn augment_spec(&self) -> Option<AugmentSpec> {
        self.augment.then(|| AugmentSpec {
            max_datasets: (self.augment_max > 0).then_some(self.augment_max),
            ..AugmentSpec::default()
        })
    }

    /// Seeds of the suite, consecutive from `seed`.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_ranker_table() {
        let c = RunConfig::default();
        assert_eq!(c.hidden, 64);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.batch_size, 4);
        assert_eq!((c.n_iters, c.n_trans), (50, 20));
        assert_eq!((c.lambda_sim, c.alpha, c.lambda_reg), (0.03, 0.5, 1e4));
        assert_eq!(c.sampling_ratio, [5.0, 1.0, 1.0]);
        assert_eq!(c.exploration, 0.5);
        assert_eq!(c.budget, 4);
        assert_eq!(c.warmup_triplets, 3000);
        assert_eq!(c.seeds, 20);
        assert!(c.overrides().is_empty());
        c.server_settings().unwrap();
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let c = RunConfig::from_text("# tuned\nhidden = 16\nsampling_ratio=1:0:1\nmethods = random,no-si+no-triplet\n\n").unwrap();
        assert_eq!(c.hidden, 16);
        assert_eq!(c.sampling_ratio, [1.0, 0.0, 1.0]);
        assert_eq!(c.methods.len(), 2);
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let keys: Vec<String> = c.overrides().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["hidden", "sampling_ratio", "methods"]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(RunConfig::from_text("hidden = 4\nbogus = 1"), Err(Error::Malformed { line: 2, .. })));
        assert!(matches!(RunConfig::from_text("no equals sign"), Err(Error::Malformed { line: 1, .. })));
        assert!(RunConfig::from_text("budget = 300").unwrap().validate().is_err());
    }
}
