//! Precedence: built-in defaults < config file < command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use bws_core::dataio::config::ConfigFile;
use bws_core::dataio::manifest::RunManifest;
use bws_core::losses::LossWeights;
use bws_core::pipeline::TrainConfig;
use bws_core::{Error, Result};

use crate::args::{Common, TrainOpts};

pub const TRAIN_KEYS: [&str; 21] = [
    "seed", "epochs", "lr", "weight-decay", "batch", "alpha", "beta", "gamma", "n-samples", "t-infer", "latent-dim", "dropout",
    "sigma-xy", "sigma-int", "crf-crop", "prior-z", "normalize-pce", "optimizer", "precision", "base-width", "depth",
];

pub struct Resolver {
    file: Option<ConfigFile>,
    /// Resolved `(key, value)` pairs, echoed into the manifest.
    pub echo: Vec<(String, String)>,
}

impl Resolver {
    /// Loads `--config` and rejects keys outside `known` and `out-dir`/`config`.
    pub fn new(common: &Common, known: &[&str]) -> Result<Self> {
        let file = match &common.config {
            Some(p) => {
                let f = ConfigFile::load(p)?;
                let mut all: Vec<&str> = known.to_vec();
                all.push("out-dir");
                f.reject_unknown(&all)?;
                Some(f)
            }
            None => None,
        };
        Ok(Self { file, echo: Vec::new() })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match &self.file {
            Some(f) => f.get(key),
            None => Ok(None),
        }
    }

    pub fn get<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.echo.push((key.into(), v.to_string()));
        Ok(v)
    }

    /// Boolean switch: set by the flag, else by the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let v = flag || self.from_file(key)?.unwrap_or(false);
        self.echo.push((key.into(), v.to_string()));
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: &Option<PathBuf>) -> Result<PathBuf> {
        self.optional_path(key, flag)?.ok_or_else(|| Error::config(format!("--{key} is required")))
    }

    pub fn optional_path(&mut self, key: &str, flag: &Option<PathBuf>) -> Result<Option<PathBuf>> {
        let v = match flag {
            Some(p) => Some(p.clone()),
            None => self.from_file::<String>(key)?.map(PathBuf::from),
        };
        if let Some(p) = &v {
            self.echo.push((key.into(), p.display().to_string()));
        }
        Ok(v)
    }

    pub fn out_dir(&mut self, common: &Common) -> Result<PathBuf> {
        Ok(self.optional_path("out-dir", &common.out_dir)?.unwrap_or_else(|| PathBuf::from(".")))
    }

    pub fn train_config(&mut self, common: &Common, o: &TrainOpts) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let crop = self.get("crf-crop", o.crf_crop, 0)?;
        let cfg = TrainConfig {
            seed: self.get("seed", common.seed, d.seed)?,
            epochs: self.get("epochs", o.epochs, d.epochs)?,
            lr: self.get("lr", o.lr, d.lr)?,
            weight_decay: self.get("weight-decay", o.weight_decay, d.weight_decay)?,
            batch: self.get("batch", o.batch, d.batch)?,
            weights: LossWeights {
                alpha: self.get("alpha", o.alpha, d.weights.alpha)?,
                beta: self.get("beta", o.beta, d.weights.beta)?,
                gamma: self.get("gamma", o.gamma, d.weights.gamma)?,
            },
            n_samples: self.get("n-samples", o.n_samples, d.n_samples)?,
            t_infer: self.get("t-infer", o.t_infer, d.t_infer)?,
            latent_dim: self.get("latent-dim", o.latent_dim, d.latent_dim)?,
            dropout: self.get("dropout", o.dropout, d.dropout)?,
            crf: bws_core::losses::CrfConfig {
                sigma_xy: self.get("sigma-xy", o.sigma_xy, d.crf.sigma_xy)?,
                sigma_int: self.get("sigma-int", o.sigma_int, d.crf.sigma_int)?,
                crop: (crop > 0).then_some(crop),
                ..d.crf
            },
            prior_z: self.switch("prior-z", o.prior_z)?,
            normalize_pce: self.switch("normalize-pce", o.normalize_pce)?,
            optimizer: self.get("optimizer", o.optimizer.clone(), d.optimizer.to_string())?.parse()?,
            precision: self.get("precision", o.precision.clone(), d.precision.to_string())?.parse()?,
            base_width: self.get("base-width", o.base_width, d.base_width)?,
            depth: self.get("depth", o.depth, d.depth)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn manifest(&self, command: &str, seed: u64) -> RunManifest {
        let mut m = RunManifest::new(command, seed);
        for (k, v) in &self.echo {
            m.config(k, v);
        }
        m
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.join("manifest.txt")
}
