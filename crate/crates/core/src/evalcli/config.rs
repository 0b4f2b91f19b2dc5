//! Run configuration: `[section]` headers and `key = value` lines, `#` comments.
//!
//! Unknown sections or keys are rejected. Keys left out keep their defaults and are
//! listed in an info log line; `run.data` has no default and must be given before any
//! command that reads a dataset.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::crfrnn::CrfRnnParams;
use crate::dataio::SynthConfig;
use crate::densecrf::{product_grid, Truncation};
use crate::emdriver::{PipelineConfig, Variant};
use crate::error::{Error, Result};

/// Every accepted key, by section.
pub const KEYS: &[(&str, &[&str])] = &[
    ("run", &["variant", "seed", "data", "out", "max_recursions", "convergence", "fully_supervised_iters"]),
    ("net", &["depth", "base_channels", "num_labels", "dropout_p", "dropout_blocks"]),
    ("train", &["lr0", "lr_decay", "lr_decay_every", "batch_size", "iters_per_recursion"]),
    ("seeder", &["tau", "beta", "cg_tol", "cg_max_iters"]),
    ("crf", &["w1", "w2", "sigma_alpha", "sigma_beta", "sigma_gamma", "n_mf_iters", "truncation"]),
    ("gridsearch", &["w1", "w2", "sigma_alpha", "sigma_beta", "sigma_gamma"]),
    ("crfrnn", &["w1", "w2", "sigma_alpha", "sigma_beta", "sigma_gamma", "n_unroll", "net_iters_per_cycle", "lr"]),
    ("uncertainty", &["n_passes", "p_threshold"]),
    ("synth", &["n_train", "n_val", "n_test", "size", "noise_sigma", "stroke_width", "min_len", "erosion_radius"]),
];

/// CRF-RNN settings as written in the config; bandwidths default to the width-scaled profile.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RnnSettings {
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub sigma_alpha: Option<f64>,
    pub sigma_beta: Option<f64>,
    pub sigma_gamma: Option<f64>,
    pub n_unroll: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridAxes {
    pub w1: Option<Vec<f64>>,
    pub w2: Option<Vec<f64>>,
    pub sigma_alpha: Option<Vec<f64>>,
    pub sigma_beta: Option<Vec<f64>>,
    pub sigma_gamma: Option<Vec<f64>>,
}

impl GridAxes {
    pub fn is_empty(&self) -> bool {
        *self == GridAxes::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
    pub rnn: RnnSettings,
    pub grid: GridAxes,
    /// Dataset manifest.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// `section.key` names that were set.
    pub given: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineConfig::default(),
            synth: SynthConfig::default(),
            rnn: RnnSettings::default(),
            grid: GridAxes::default(),
            data: None,
            out: None,
            given: Vec::new(),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|t| value(key, t.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = || format!("{}:{}", path.display(), n + 1);
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Config(format!("{}: unknown section [{name}]", at())));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}: expected `key = value`", at())))?;
            let s = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("{}: key outside any section", at())))?;
            cfg.set(&format!("{s}.{}", k.trim()), v.trim())
                .map_err(|e| Error::Config(format!("{}: {}", at(), e.to_string().trim_start_matches("configuration error: "))))?;
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets `section.key`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} is not of the form section.key")))?;
        if !KEYS.iter().any(|(s, ks)| *s == section && ks.contains(&name)) {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        let p = &mut self.pipeline;
        match (section, name) {
            ("run", "variant") => {
                p.variant = Variant::parse(v).ok_or_else(|| Error::Config(format!("unknown variant {v:?}")))?
            }
            ("run", "seed") => {
                p.master_seed = value(key, v)?;
                self.synth.seed = p.master_seed;
            }
            ("run", "data") => self.data = Some(PathBuf::from(v)),
            ("run", "out") => self.out = Some(PathBuf::from(v)),
            ("run", "max_recursions") => p.max_recursions = value(key, v)?,
            ("run", "convergence") => p.convergence = value(key, v)?,
            ("run", "fully_supervised_iters") => p.fully_supervised_iters = Some(value(key, v)?),
            ("net", "depth") => p.net.depth = value(key, v)?,
            ("net", "base_channels") => p.net.base_channels = value(key, v)?,
            ("net", "num_labels") => p.net.num_labels = value(key, v)?,
            ("net", "dropout_p") => p.net.dropout_p = value(key, v)?,
            ("net", "dropout_blocks") => p.net.dropout_blocks = value(key, v)?,
            ("train", "lr0") => p.train.lr0 = value(key, v)?,
            ("train", "lr_decay") => p.train.lr_decay = value(key, v)?,
            ("train", "lr_decay_every") => p.train.lr_decay_every = value(key, v)?,
            ("train", "batch_size") => p.train.batch_size = value(key, v)?,
            ("train", "iters_per_recursion") => p.train.iters_per_recursion = value(key, v)?,
            ("seeder", "tau") => p.seeder.tau = value(key, v)?,
            ("seeder", "beta") => p.seeder.beta = value(key, v)?,
            ("seeder", "cg_tol") => p.seeder.cg_tol = value(key, v)?,
            ("seeder", "cg_max_iters") => p.seeder.cg_max_iters = Some(value(key, v)?),
            ("crf", "w1") => p.crf.w1 = value(key, v)?,
            ("crf", "w2") => p.crf.w2 = value(key, v)?,
            ("crf", "sigma_alpha") => p.crf.sigma_alpha = value(key, v)?,
            ("crf", "sigma_beta") => p.crf.sigma_beta = value(key, v)?,
            ("crf", "sigma_gamma") => p.crf.sigma_gamma = value(key, v)?,
            ("crf", "n_mf_iters") => p.crf.n_mf_iters = value(key, v)?,
            ("crf", "truncation") => {
                p.crf.truncation =
                    Truncation::parse(v).ok_or_else(|| Error::Config(format!("bad value {v:?} for {key}")))?
            }
            ("gridsearch", "w1") => self.grid.w1 = Some(list(key, v)?),
            ("gridsearch", "w2") => self.grid.w2 = Some(list(key, v)?),
            ("gridsearch", "sigma_alpha") => self.grid.sigma_alpha = Some(list(key, v)?),
            ("gridsearch", "sigma_beta") => self.grid.sigma_beta = Some(list(key, v)?),
            ("gridsearch", "sigma_gamma") => self.grid.sigma_gamma = Some(list(key, v)?),
            ("crfrnn", "w1") => self.rnn.w1 = Some(value(key, v)?),
            ("crfrnn", "w2") => self.rnn.w2 = Some(value(key, v)?),
            ("crfrnn", "sigma_alpha") => self.rnn.sigma_alpha = Some(value(key, v)?),
            ("crfrnn", "sigma_beta") => self.rnn.sigma_beta = Some(value(key, v)?),
            ("crfrnn", "sigma_gamma") => self.rnn.sigma_gamma = Some(value(key, v)?),
            ("crfrnn", "n_unroll") => self.rnn.n_unroll = Some(value(key, v)?),
            ("crfrnn", "net_iters_per_cycle") => p.schedule.net_iters_per_cycle = value(key, v)?,
            ("crfrnn", "lr") => p.schedule.rnn_lr = value(key, v)?,
            ("uncertainty", "n_passes") => p.uncertainty.n_passes = value(key, v)?,
            ("uncertainty", "p_threshold") => p.uncertainty.p_threshold = value(key, v)?,
            ("synth", "n_train") => self.synth.n_train = value(key, v)?,
            ("synth", "n_val") => self.synth.n_val = value(key, v)?,
            ("synth", "n_test") => self.synth.n_test = value(key, v)?,
            ("synth", "size") => self.synth.size = value(key, v)?,
            ("synth", "noise_sigma") => self.synth.noise_sigma = value(key, v)?,
            ("synth", "stroke_width") => self.synth.scribbles.stroke_width = value(key, v)?,
            ("synth", "min_len") => self.synth.scribbles.min_len = value(key, v)?,
            ("synth", "erosion_radius") => self.synth.scribbles.erosion_radius = value(key, v)?,
            _ => unreachable!("key table and setter disagree on {key}"),
        }
        if !self.given.iter().any(|g| g == key) {
            self.given.push(key.to_string());
        }
        Ok(())
    }

    /// Logs the keys of `sections` that kept their defaults.
    pub fn log_defaults(&self, sections: &[&str]) {
        for (s, keys) in KEYS.iter().filter(|(s, _)| sections.contains(s)) {
            let defaulted: Vec<&str> = keys
                .iter()
                .filter(|k| !self.given.iter().any(|g| *g == format!("{s}.{k}")))
                .copied()
                .collect();
            if !defaulted.is_empty() {
                log::info!("[{s}] using defaults for {}", defaulted.join(", "));
            }
        }
    }

    pub fn require_data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key run.data (dataset manifest)".into()))
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("missing required key run.out (output directory)".into()))
    }

    /// Pipeline settings with the grid and CRF-RNN sections resolved for images `width` wide.
    pub fn resolved_pipeline(&self, width: usize) -> Result<PipelineConfig> {
        let mut p = self.pipeline.clone();
        if !self.grid.is_empty() {
            let one = |axis: &Option<Vec<f64>>, d: f64| axis.clone().unwrap_or_else(|| vec![d]);
            let c = &p.crf;
            p.crf_grid = product_grid(
                &one(&self.grid.w1, c.w1),
                &one(&self.grid.w2, c.w2),
                &one(&self.grid.sigma_alpha, c.sigma_alpha),
                &one(&self.grid.sigma_beta, c.sigma_beta),
                &one(&self.grid.sigma_gamma, c.sigma_gamma),
                c,
            );
        }
        if self.rnn != RnnSettings::default() || p.variant.uses_rnn() {
            let d = CrfRnnParams::<f32>::for_width(width, p.net.num_labels)?;
            let r = &self.rnn;
            p.rnn = Some(CrfRnnParams::new(
                p.net.num_labels,
                r.w1.unwrap_or(crate::crfrnn::DEFAULT_W1),
                r.w2.unwrap_or(crate::crfrnn::DEFAULT_W2),
                r.sigma_alpha.unwrap_or(d.sigma_alpha),
                r.sigma_beta.unwrap_or(d.sigma_beta),
                r.sigma_gamma.unwrap_or(d.sigma_gamma),
                r.n_unroll.unwrap_or(d.n_unroll),
            )?);
        }
        Ok(p)
    }
}
