//! Hard-EM training loop: seeds grown from scribbles, an M step on the seeds, then
//! alternating E-step relabeling and warm-started M steps until the targets settle.

use std::fmt;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::crfrnn::{self, AlternatingSchedule, CrfRnnParams};
use crate::dataio::formats::{write_bytes, write_labels};
use crate::dataio::{Dataset, Sample};
use crate::densecrf::{self, CrfParams, GridSearchResult};
use crate::error::{Error, Result, ResultExt};
use crate::grid::{Image, LabelMap, UNKNOWN};
use crate::metrics;
use crate::rng;
use crate::seeder::{self, SeedConfig};
use crate::segnet::{self, NetConfig, NetParams, TrainConfig};
use crate::uncertain::{self, UncertaintyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    BaseNoRecursion,
    Base,
    SepCrf,
    CrfRnn,
    Uncertainty,
    SepCrfAndUnc,
    CrfRnnAndUnc,
    FullySupervised,
}

impl Variant {
    /// Report order.
    pub const ALL: [Variant; 8] = [
        Variant::BaseNoRecursion,
        Variant::Base,
        Variant::SepCrf,
        Variant::CrfRnn,
        Variant::Uncertainty,
        Variant::SepCrfAndUnc,
        Variant::CrfRnnAndUnc,
        Variant::FullySupervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaseNoRecursion => "base_no_recursion",
            Variant::Base => "base",
            Variant::SepCrf => "sep_crf",
            Variant::CrfRnn => "crf_rnn",
            Variant::Uncertainty => "uncertainty",
            Variant::SepCrfAndUnc => "sep_crf_and_unc",
            Variant::CrfRnnAndUnc => "crf_rnn_and_unc",
            Variant::FullySupervised => "fully_supervised",
        }
    }

    /// Row title in text reports.
    pub fn title(self) -> &'static str {
        match self {
            Variant::BaseNoRecursion => "Base (no recursion)",
            Variant::Base => "Base",
            Variant::SepCrf => "Base + separate CRF",
            Variant::CrfRnn => "Base + CRF-RNN",
            Variant::Uncertainty => "Base + uncertainty",
            Variant::SepCrfAndUnc => "Base + sep. CRF & unc.",
            Variant::CrfRnnAndUnc => "Base + CRF-RNN & unc.",
            Variant::FullySupervised => "Fully supervised",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.name() == s.to_ascii_lowercase().replace('-', "_"))
    }

    pub fn uses_crf(self) -> bool {
        matches!(self, Variant::SepCrf | Variant::SepCrfAndUnc)
    }

    pub fn uses_rnn(self) -> bool {
        matches!(self, Variant::CrfRnn | Variant::CrfRnnAndUnc)
    }

    pub fn uses_uncertainty(self) -> bool {
        matches!(self, Variant::Uncertainty | Variant::SepCrfAndUnc | Variant::CrfRnnAndUnc)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub master_seed: u64,
    pub net: NetConfig,
    /// `seed` is replaced by one derived from `master_seed`.
    pub train: TrainConfig,
    pub seeder: SeedConfig,
    /// Used when `crf_grid` is empty.
    pub crf: CrfParams,
    /// Searched on the validation split once, before the first relabeling.
    pub crf_grid: Vec<CrfParams>,
    /// Initial layer; `None` uses the width-scaled default profile.
    pub rnn: Option<CrfRnnParams<f32>>,
    pub schedule: AlternatingSchedule,
    /// `seed` is replaced per recursion by one derived from `master_seed`.
    pub uncertainty: UncertaintyConfig,
    pub max_recursions: usize,
    /// Stop when fewer than this fraction of non-seed pixels change label.
    pub convergence: f64,
    /// Training budget of the fully supervised bound; `None` matches the total budget of
    /// the recursive variants.
    pub fully_supervised_iters: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::Base,
            master_seed: 0,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            seeder: SeedConfig::default(),
            crf: CrfParams::default(),
            crf_grid: Vec::new(),
            rnn: None,
            schedule: AlternatingSchedule::default(),
            uncertainty: UncertaintyConfig::default(),
            max_recursions: 3,
            convergence: 0.005,
            fully_supervised_iters: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.seeder.validate(self.net.num_labels)?;
        self.schedule.validate()?;
        if self.variant.uses_crf() {
            for p in std::iter::once(&self.crf).chain(&self.crf_grid) {
                p.validate()?;
            }
        }
        if self.variant.uses_uncertainty() {
            self.uncertainty.validate()?;
            if self.net.dropout_blocks == 0 {
                return Err(Error::Config(format!("variant {} needs dropout blocks", self.variant)));
            }
        }
        if !(0.0..=1.0).contains(&self.convergence) {
            return Err(Error::Config(format!("convergence {} outside [0, 1]", self.convergence)));
        }
        Ok(())
    }

    fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            seed: rng::derive_seed(self.master_seed, "train"),
            ..self.train.clone()
        }
    }
}

/// One row of the metrics ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursionRecord {
    pub recursion: usize,
    /// Fraction of non-seed pixels whose target changed in this recursion's E step.
    pub change_frac: Option<f64>,
    /// False when the E step converged and no M step followed.
    pub trained: bool,
    pub final_loss: Option<f64>,
    /// Validation Dice per foreground label after this recursion.
    pub val_dice: Vec<f64>,
    /// Network checkpoint hashes entering and leaving the M step.
    pub hash_in: String,
    pub hash_out: String,
}

/// Everything carried from one recursion to the next.
#[derive(Debug, Clone)]
pub struct RecursionState {
    pub recursion: usize,
    pub net: NetParams<f32>,
    pub rnn: Option<CrfRnnParams<f32>>,
    pub seeds: Vec<LabelMap>,
    pub targets: Vec<LabelMap>,
    pub records: Vec<RecursionRecord>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub variant: Variant,
    pub state: RecursionState,
    pub crf: Option<CrfParams>,
    pub grid: Option<GridSearchResult>,
    /// Targets of every E step, in order.
    pub target_history: Vec<Vec<LabelMap>>,
}

fn checkpoint(net: &NetParams<f32>, rnn: Option<&CrfRnnParams<f32>>) -> Checkpoint {
    Checkpoint {
        net: net.clone(),
        rnn: rnn.cloned(),
    }
}

/// Hash of the network part of a checkpoint.
pub fn net_hash(net: &NetParams<f32>) -> String {
    checkpoint(net, None).hash()
}

/// Label prediction of the trained model; the CRF-RNN layer is part of the model when present.
pub fn predict_labels(net: &NetParams<f32>, rnn: Option<&CrfRnnParams<f32>>, image: &Image) -> Result<LabelMap> {
    match rnn {
        None => segnet::predict(net, image),
        Some(r) => {
            let out = segnet::forward(net, image, false, &mut rng::stream(0, "deterministic"))?;
            Ok(crfrnn::crfrnn_forward(&out.logits, image, r)?.argmax())
        }
    }
}

/// Per-image, per-foreground-label Dice of the model on samples with masks.
pub fn evaluate(
    net: &NetParams<f32>,
    rnn: Option<&CrfRnnParams<f32>>,
    samples: &[Sample],
    num_labels: usize,
) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::Input(format!("record {} has no mask to evaluate against", s.id)))?;
            let pred = predict_labels(net, rnn, &s.image).context_with(|| format!("record {}", s.id))?;
            (1..num_labels).map(|l| metrics::dice(&pred, mask, l as u8)).collect()
        })
        .collect()
}

fn mean_per_label(scores: &[Vec<f64>], labels: usize) -> Vec<f64> {
    (0..labels)
        .map(|l| {
            if scores.is_empty() {
                f64::NAN
            } else {
                scores.iter().map(|s| s[l]).sum::<f64>() / scores.len() as f64
            }
        })
        .collect()
}

fn val_dice(net: &NetParams<f32>, rnn: Option<&CrfRnnParams<f32>>, ds: &Dataset) -> Result<Vec<f64>> {
    let scores = evaluate(net, rnn, &ds.val, ds.num_labels).context_with(|| "validation".into())?;
    Ok(mean_per_label(&scores, ds.num_labels - 1))
}

fn train_images(ds: &Dataset) -> Vec<Image> {
    ds.train.iter().map(|s| s.image.clone()).collect()
}

fn pairs(ds: &Dataset, targets: &[LabelMap]) -> Vec<(Image, LabelMap)> {
    ds.train.iter().zip(targets).map(|(s, t)| (s.image.clone(), t.clone())).collect()
}

fn check_dataset(ds: &Dataset, cfg: &PipelineConfig) -> Result<()> {
    if ds.train.is_empty() {
        return Err(Error::Input("dataset has no training records".into()));
    }
    if ds.num_labels != cfg.net.num_labels {
        return Err(Error::Config(format!(
            "dataset has {} labels but the net is configured for {}",
            ds.num_labels, cfg.net.num_labels
        )));
    }
    Ok(())
}

fn seeds_for(samples: &[Sample], num_labels: usize, cfg: &SeedConfig) -> Result<Vec<LabelMap>> {
    samples
        .iter()
        .map(|s| match &s.scribbles {
            Some(sc) => seeder::generate_seeds(&s.image, sc, num_labels, cfg).context_with(|| format!("seeding {}", s.id)),
            None => Err(Error::Input(format!("record {} has no scribbles", s.id))),
        })
        .collect()
}

fn metrics_header(num_labels: usize) -> String {
    let mut h = String::from("recursion,variant,change_frac");
    for l in 1..num_labels {
        h.push_str(&format!(",val_dice_{l}"));
    }
    h.push_str(",val_dice_avg,trained,checkpoint_sha256\n");
    h
}

/// Writes `metrics.csv` for `records` under `dir`.
pub fn write_metrics(dir: &Path, variant: Variant, records: &[RecursionRecord], num_labels: usize) -> Result<()> {
    let mut s = metrics_header(num_labels);
    for r in records {
        s.push_str(&format!("{},{},", r.recursion, variant));
        if let Some(c) = r.change_frac {
            s.push_str(&c.to_string());
        }
        for d in &r.val_dice {
            s.push_str(&format!(",{d}"));
        }
        let avg = r.val_dice.iter().sum::<f64>() / r.val_dice.len().max(1) as f64;
        s.push_str(&format!(",{avg},{},{}\n", r.trained, r.hash_out));
    }
    write_bytes(&dir.join("metrics.csv"), s.as_bytes())
}

fn write_recursion(dir: &Path, ds: &Dataset, state: &RecursionState) -> Result<()> {
    let rdir = dir.join(format!("recursion_{}", state.recursion));
    checkpoint(&state.net, state.rnn.as_ref()).write(&rdir.join("checkpoint.ckpt"))?;
    for (s, t) in ds.train.iter().zip(&state.targets) {
        write_labels(&rdir.join("targets").join(format!("{}.pgm", s.id)), t)?;
    }
    Ok(())
}

/// Seeds plus the recursion-0 M step on them (shared by every recursive variant).
pub fn initial_state(ds: &Dataset, cfg: &PipelineConfig, run_dir: Option<&Path>) -> Result<RecursionState> {
    cfg.validate()?;
    check_dataset(ds, cfg)?;
    let seeds = seeds_for(&ds.train, ds.num_labels, &cfg.seeder)?;
    if let Some(dir) = run_dir {
        for (s, z) in ds.train.iter().zip(&seeds) {
            write_labels(&dir.join("seeds").join(format!("{}.pgm", s.id)), z)?;
        }
    }
    let mut net = NetParams::<f32>::init(cfg.net.clone(), &mut rng::stream(cfg.master_seed, "net-init"))?;
    let hash_in = net_hash(&net);
    let report = segnet::train_m_step(&mut net, &pairs(ds, &seeds), &cfg.train_cfg(), "m-step/0")
        .context_with(|| "recursion 0".into())?;
    let record = RecursionRecord {
        recursion: 0,
        change_frac: None,
        trained: cfg.train.iters_per_recursion > 0,
        final_loss: report.losses.last().copied(),
        val_dice: val_dice(&net, None, ds)?,
        hash_in,
        hash_out: net_hash(&net),
    };
    let state = RecursionState {
        recursion: 0,
        net,
        rnn: None,
        targets: seeds.clone(),
        seeds,
        records: vec![record],
    };
    if let Some(dir) = run_dir {
        write_recursion(dir, ds, &state)?;
        write_metrics(dir, cfg.variant, &state.records, ds.num_labels)?;
    }
    Ok(state)
}

/// Relabeling settings resolved before the first E step.
#[derive(Debug, Clone)]
pub struct EStepContext {
    pub crf: Option<CrfParams>,
    pub grid: Option<GridSearchResult>,
}

/// Resolves the separate-CRF parameters, running the grid search on the validation split
/// with the incoming network.
pub fn prepare_estep(ds: &Dataset, cfg: &PipelineConfig, net: &NetParams<f32>) -> Result<EStepContext> {
    if !cfg.variant.uses_crf() {
        return Ok(EStepContext { crf: None, grid: None });
    }
    if cfg.crf_grid.is_empty() {
        return Ok(EStepContext {
            crf: Some(cfg.crf.clone()),
            grid: None,
        });
    }
    let images: Vec<Image> = ds.val.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<LabelMap> = ds
        .val
        .iter()
        .map(|s| s.mask.clone().ok_or_else(|| Error::Input(format!("val record {} has no mask", s.id))))
        .collect::<Result<_>>()?;
    // validation scribbles give seeds when present; otherwise nothing is clamped
    let seeds: Vec<LabelMap> = ds
        .val
        .iter()
        .map(|s| match &s.scribbles {
            Some(sc) => seeder::generate_seeds(&s.image, sc, ds.num_labels, &cfg.seeder),
            None => Ok(LabelMap::unknown(s.image.width(), s.image.height())),
        })
        .collect::<Result<_>>()?;
    let result = densecrf::grid_search(&cfg.crf_grid, &images, &seeds, &masks, net).context_with(|| "grid search".into())?;
    log::info!("grid search picked {:?}", result.best);
    Ok(EStepContext {
        crf: Some(result.best.clone()),
        grid: Some(result),
    })
}

/// New targets for every training image under `cfg.variant`.
pub fn estep(ds: &Dataset, cfg: &PipelineConfig, ctx: &EStepContext, state: &RecursionState) -> Result<Vec<LabelMap>> {
    let images = train_images(ds);
    let r = state.recursion + 1;
    let net = &state.net;
    let base = match cfg.variant {
        Variant::BaseNoRecursion | Variant::FullySupervised => {
            return Err(Error::Config(format!("variant {} has no E step", cfg.variant)));
        }
        Variant::Base | Variant::Uncertainty => {
            let probs = densecrf::network_probs(net, &images)?;
            probs
                .iter()
                .zip(&state.seeds)
                .map(|(p, z)| {
                    let mut l = p.argmax();
                    l.overwrite_with(z);
                    l
                })
                .collect()
        }
        Variant::SepCrf | Variant::SepCrfAndUnc => {
            let crf = ctx.crf.as_ref().ok_or_else(|| Error::Config("separate CRF parameters missing".into()))?;
            densecrf::relabel_dataset(net, &images, &state.seeds, crf)?
        }
        Variant::CrfRnn | Variant::CrfRnnAndUnc => {
            let rnn = state.rnn.as_ref().ok_or_else(|| Error::Config("CRF-RNN layer missing".into()))?;
            crfrnn::relabel_dataset(net, rnn, &images, &state.seeds)?
        }
    };
    let targets = if cfg.variant.uses_uncertainty() {
        let ucfg = UncertaintyConfig {
            seed: rng::derive_seed(cfg.master_seed, &format!("{}/uncertainty/{r}", cfg.variant)),
            ..cfg.uncertainty.clone()
        };
        let gate_base = (cfg.variant != Variant::Uncertainty).then_some(base.as_slice());
        uncertain::mc_relabel_dataset(net, &images, gate_base, &state.seeds, &ucfg)?
    } else {
        base
    };
    for (i, (t, z)) in targets.iter().zip(&state.seeds).enumerate() {
        if let Some(p) = (0..z.len()).find(|&p| z.data()[p] != UNKNOWN && t.data()[p] != z.data()[p]) {
            return Err(Error::numeric("estep", format!("image {i}: seed pixel {p} changed")));
        }
    }
    Ok(targets)
}

/// Runs recursions `state.recursion + 1 ..= max_recursions` (none for the no-recursion baseline).
pub fn continue_from(
    ds: &Dataset,
    cfg: &PipelineConfig,
    mut state: RecursionState,
    run_dir: Option<&Path>,
) -> Result<PipelineResult> {
    cfg.validate()?;
    check_dataset(ds, cfg)?;
    let mut result_ctx = EStepContext { crf: None, grid: None };
    let mut history = Vec::new();
    if cfg.variant != Variant::BaseNoRecursion && state.recursion < cfg.max_recursions {
        let ctx = prepare_estep(ds, cfg, &state.net)?;
        if let (Some(dir), Some(crf)) = (run_dir, &ctx.crf) {
            write_bytes(&dir.join("crf_params.txt"), crf_params_text(crf).as_bytes())?;
        }
        if cfg.variant.uses_rnn() && state.rnn.is_none() {
            let w = ds.train[0].image.width();
            state.rnn = Some(match &cfg.rnn {
                Some(r) => r.clone(),
                None => CrfRnnParams::for_width(w, ds.num_labels)?,
            });
        }
        let train_cfg = cfg.train_cfg();
        while state.recursion < cfg.max_recursions {
            let r = state.recursion + 1;
            let targets = estep(ds, cfg, &ctx, &state).context_with(|| format!("recursion {r} E step"))?;
            let change = (0..targets.len())
                .map(|i| metrics::change_fraction(&state.targets[i], &targets[i], &state.seeds[i]) * count_free(&state.seeds[i]) as f64)
                .sum::<f64>()
                / state.seeds.iter().map(count_free).sum::<usize>().max(1) as f64;
            log::info!("{} recursion {r}: {:.4} of non-seed pixels changed", cfg.variant, change);
            history.push(targets.clone());
            state.targets = targets;
            state.recursion = r;
            let hash_in = net_hash(&state.net);
            let converged = change < cfg.convergence;
            let mut final_loss = None;
            if !converged {
                let data = pairs(ds, &state.targets);
                let stream = format!("{}/m-step/{r}", cfg.variant);
                final_loss = match state.rnn.as_mut() {
                    Some(rnn) => {
                        crfrnn::train_alternating(&mut state.net, rnn, &data, &cfg.schedule, &train_cfg, &stream)
                            .context_with(|| format!("recursion {r} M step"))?
                            .net
                            .losses
                    }
                    None => {
                        segnet::train_m_step(&mut state.net, &data, &train_cfg, &stream)
                            .context_with(|| format!("recursion {r} M step"))?
                            .losses
                    }
                }
                .last()
                .copied();
            }
            state.records.push(RecursionRecord {
                recursion: r,
                change_frac: Some(change),
                trained: !converged,
                final_loss,
                val_dice: val_dice(&state.net, state.rnn.as_ref(), ds)?,
                hash_in,
                hash_out: net_hash(&state.net),
            });
            if let Some(dir) = run_dir {
                write_recursion(dir, ds, &state)?;
                write_metrics(dir, cfg.variant, &state.records, ds.num_labels)?;
            }
            if converged {
                break;
            }
        }
        result_ctx = ctx;
    }
    if let Some(dir) = run_dir {
        write_metrics(dir, cfg.variant, &state.records, ds.num_labels)?;
        checkpoint(&state.net, state.rnn.as_ref()).write(&dir.join("final.ckpt"))?;
    }
    Ok(PipelineResult {
        variant: cfg.variant,
        state,
        crf: result_ctx.crf,
        grid: result_ctx.grid,
        target_history: history,
    })
}

fn count_free(seeds: &LabelMap) -> usize {
    seeds.count_unknown()
}

/// Trains once on the full training masks.
pub fn fully_supervised(ds: &Dataset, cfg: &PipelineConfig, run_dir: Option<&Path>) -> Result<PipelineResult> {
    cfg.validate()?;
    check_dataset(ds, cfg)?;
    let masks: Vec<LabelMap> = ds
        .train
        .iter()
        .map(|s| {
            s.mask
                .clone()
                .ok_or_else(|| Error::Input(format!("fully supervised training needs a mask for {}", s.id)))
        })
        .collect::<Result<_>>()?;
    let mut train = cfg.train_cfg();
    train.iters_per_recursion = cfg
        .fully_supervised_iters
        .unwrap_or(cfg.train.iters_per_recursion * (cfg.max_recursions + 1));
    let mut net = NetParams::<f32>::init(cfg.net.clone(), &mut rng::stream(cfg.master_seed, "net-init"))?;
    let hash_in = net_hash(&net);
    let report = segnet::train_m_step(&mut net, &pairs(ds, &masks), &train, "fully-supervised")?;
    let record = RecursionRecord {
        recursion: 0,
        change_frac: None,
        trained: true,
        final_loss: report.losses.last().copied(),
        val_dice: val_dice(&net, None, ds)?,
        hash_in,
        hash_out: net_hash(&net),
    };
    let state = RecursionState {
        recursion: 0,
        net,
        rnn: None,
        seeds: masks.iter().map(|m| LabelMap::unknown(m.width(), m.height())).collect(),
        targets: masks,
        records: vec![record],
    };
    if let Some(dir) = run_dir {
        write_recursion(dir, ds, &state)?;
        write_metrics(dir, cfg.variant, &state.records, ds.num_labels)?;
        checkpoint(&state.net, None).write(&dir.join("final.ckpt"))?;
    }
    Ok(PipelineResult {
        variant: Variant::FullySupervised,
        state,
        crf: None,
        grid: None,
        target_history: Vec::new(),
    })
}

/// The full framework for `cfg.variant`.
pub fn run_pipeline(ds: &Dataset, cfg: &PipelineConfig, run_dir: Option<&Path>) -> Result<PipelineResult> {
    if cfg.variant == Variant::FullySupervised {
        return fully_supervised(ds, cfg, run_dir);
    }
    let state = initial_state(ds, cfg, run_dir)?;
    continue_from(ds, cfg, state, run_dir)
}

/// The chosen CRF settings as a `[crf]` config section.
pub fn crf_params_text(p: &CrfParams) -> String {
    format!(
        "[crf]\nw1 = {}\nw2 = {}\nsigma_alpha = {}\nsigma_beta = {}\nsigma_gamma = {}\nn_mf_iters = {}\ntruncation = {}\n",
        p.w1, p.w2, p.sigma_alpha, p.sigma_beta, p.sigma_gamma, p.n_mf_iters, p.truncation
    )
}
