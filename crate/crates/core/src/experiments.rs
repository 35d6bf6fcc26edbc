//! Experiment configuration and the commands behind the `semcom` binary.
//!
//! Input paths in a config file are resolved against the file's directory.
//! The output directory is taken from `--out`, then `SEMCOM_OUT`, then the
//! config, and is relative to the working directory.
//!
//! Every random stream is derived from the global seed with
//! [`derive_seed`]: image `k` of `simulate` uses indices `2k` (fading) and
//! `2k+1` (bits); sweep trial `t` at distance index `d` uses
//! `derive_seed(derive_seed(seed, d), t)` split the same way, shared by all
//! allocators so that they see identical fading.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate_avg, allocate_conf, AllocationRequest, Allocator, AvgAllocator, ConfAllocator};
use crate::channel::ChannelEnv;
use crate::derive_seed;
use crate::detection::{
    byte_accounting, extract_crops, load_detections, load_image, resolve_image_path, DetectionSet, DEFAULT_C_MIN,
};
use crate::diffusion::{Checkpoint, CurvePoint, DiffusionAllocator, PolicyConfig, SurrogateEnv, Trainer};
use crate::error::{Error, Result};
use crate::kernels::{self, FeatureMap, GnConvParams, SimamVariant};
use crate::plot::{LinePlot, Series};
use crate::quality::{simulate_transmission, simulate_with_received, MistConfig, SsimParams};
use crate::scene::Scene;
use crate::surrogate::{CurveSettings, RewardSurrogate};

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "SEMCOM_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub channel: ChannelEnv,
    #[serde(default)]
    pub mist: MistBlock,
    #[serde(default)]
    pub ssim: SsimParams,
    #[serde(default)]
    pub allocator: AllocatorBlock,
    pub sweep: Option<SweepBlock>,
    pub diffusion: Option<DiffusionBlock>,
    #[serde(default)]
    pub kernels: KernelsBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub detections: PathBuf,
    pub images: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            detections: PathBuf::from("detections.json"),
            images: PathBuf::from("."),
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MistBlock {
    pub accuracy: f64,
    pub sigma: f64,
    pub c_min: f64,
}

impl Default for MistBlock {
    fn default() -> Self {
        let m = MistConfig::default();
        Self {
            accuracy: m.accuracy,
            sigma: m.sigma,
            c_min: DEFAULT_C_MIN,
        }
    }
}

impl MistBlock {
    pub fn config(&self) -> MistConfig {
        MistConfig {
            accuracy: self.accuracy,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocatorKind {
    #[default]
    Avg,
    Conf,
    Diffusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorBlock {
    pub kind: AllocatorKind,
    pub eta: f64,
    /// Trained policy for `kind = "diffusion"`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for AllocatorBlock {
    fn default() -> Self {
        Self {
            kind: AllocatorKind::Avg,
            eta: 1.0,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub etas: Vec<f64>,
    pub distances: Vec<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionBlock {
    pub episodes: usize,
    pub distance: f64,
    pub total_power: f64,
    /// Training scene; defaults to the first image of `paths.detections`.
    pub detections: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh policy.
    pub resume: Option<PathBuf>,
    /// η grid for the Conf reference line.
    pub reference_etas: Vec<f64>,
    pub surrogate: CurveSettings,
    pub policy: PolicyConfig,
}

impl Default for DiffusionBlock {
    fn default() -> Self {
        Self {
            episodes: 5000,
            distance: 20.0,
            total_power: 4000.0,
            detections: None,
            resume: None,
            reference_etas: (0..=12).map(|k| k as f64 * 0.25).collect(),
            surrogate: CurveSettings::default(),
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelsBlock {
    pub order: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for KernelsBlock {
    fn default() -> Self {
        Self {
            order: 3,
            channels: 8,
            height: 4,
            width: 4,
            lambda: kernels::SIMAM_LAMBDA,
            seed: 7,
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl ExperimentConfig {
    /// Parse TOML text. Relative input paths are resolved against `base`.
    pub fn from_toml(text: &str, origin: &str, base: &Path) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Parse {
                path: origin.to_string(),
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.detections);
        resolve(&mut cfg.paths.images);
        if let Some(c) = cfg.allocator.checkpoint.as_mut() {
            resolve(c);
        }
        if let Some(d) = cfg.diffusion.as_mut() {
            d.detections.as_mut().map(resolve);
            d.resume.as_mut().map(resolve);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, &path.display().to_string(), base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.channel.validate()?;
        self.ssim.validate()?;
        if !(0.0..=1.0).contains(&self.mist.c_min) {
            return Err(Error::Config(format!("c_min {} outside [0, 1]", self.mist.c_min)));
        }
        if !(self.allocator.eta >= 0.0) {
            return Err(Error::Config(format!("eta {} must be >= 0", self.allocator.eta)));
        }
        if let Some(s) = &self.sweep {
            if s.trials == 0 {
                return Err(Error::Config("sweep.trials must be >= 1".into()));
            }
            if s.etas.iter().any(|e| !(*e >= 0.0)) {
                return Err(Error::Config("sweep.etas must be >= 0".into()));
            }
            if s.distances.iter().any(|d| !(*d > 0.0)) {
                return Err(Error::Config("sweep.distances must be positive".into()));
            }
        }
        if let Some(d) = &self.diffusion {
            d.policy.validate()?;
            self.channel.with_distance(d.distance).with_total_power(d.total_power).validate()?;
        }
        Ok(())
    }
}

/// Everything a command needs besides its config.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub dump_crops: bool,
}

impl RunContext {
    /// Output directory: `cli`, else `$SEMCOM_OUT`, else the config's.
    pub fn new(config: ExperimentConfig, seed: Option<u64>, cli_out: Option<PathBuf>, dump_crops: bool) -> Self {
        let out = cli_out
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| config.paths.output.clone());
        Self {
            seed: seed.unwrap_or(config.seed),
            config,
            out,
            dump_crops,
        }
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

/// What a command printed and whether its checks passed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandReport {
    pub lines: Vec<String>,
    pub passed: bool,
}

impl CommandReport {
    fn ok() -> Self {
        Self {
            lines: Vec::new(),
            passed: true,
        }
    }

    fn say(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(csv_err)?
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Detection sets of a file together with their images.
pub fn load_scenes(detections: &Path, images: &Path, c_min: f64) -> Result<Vec<(DetectionSet, RgbImage)>> {
    load_detections(detections, c_min)?
        .into_iter()
        .map(|set| {
            let path = resolve_image_path(images, &set.image_id).ok_or_else(|| {
                Error::io(
                    images.join(&set.image_id),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
                )
            })?;
            let image = load_image(&path)?;
            Ok((set, image))
        })
        .collect()
}

fn allocator_for(ctx: &RunContext) -> Result<Box<dyn Allocator>> {
    let block = &ctx.config.allocator;
    Ok(match block.kind {
        AllocatorKind::Avg => Box::new(AvgAllocator),
        AllocatorKind::Conf => Box::new(ConfAllocator { eta: block.eta }),
        AllocatorKind::Diffusion => {
            let path = block
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("allocator.checkpoint is required for diffusion".into()))?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let trainer = Trainer::from_checkpoint(&Checkpoint::from_json(&text)?)?;
            Box::new(DiffusionAllocator::new(trainer.policy, derive_seed(ctx.seed, u64::MAX)))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummaryRow {
    pub image_id: String,
    pub objects: usize,
    pub total_power_w: f64,
    pub mist: f64,
}

/// Transmit every image once and write per-object tables.
pub fn cmd_simulate(ctx: &RunContext) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let scenes = load_scenes(&cfg.paths.detections, &cfg.paths.images, cfg.mist.c_min)?;
    let mut allocator = allocator_for(ctx)?;
    let dir = ctx.dir("simulate")?;
    let mut report = CommandReport::ok();
    let mut summary = Vec::new();
    for (k, (set, image)) in scenes.iter().enumerate() {
        let scene = Scene::from_image(image, set)?;
        let req = AllocationRequest::new(scene.confidences.clone(), cfg.channel);
        let powers = if scene.is_empty() {
            Vec::new()
        } else {
            let pv = allocator.allocate(&req)?;
            pv.check_budget(cfg.channel.total_power)?;
            pv.powers
        };
        let mut fading = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, 2 * k as u64));
        let mut bits = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, 2 * k as u64 + 1));
        let (tx, received) = simulate_with_received(
            &scene.crops,
            &scene.confidences,
            &powers,
            &cfg.channel,
            &cfg.mist.config(),
            &cfg.ssim,
            &mut fading,
            &mut bits,
        )?;
        let path = dir.join(format!("{}.csv", set.image_id));
        write_text(&path, &tx.sorted_by_confidence().to_csv()?)?;
        if ctx.dump_crops {
            let crop_dir = dir.join("crops").join(&set.image_id);
            fs::create_dir_all(&crop_dir).map_err(|e| Error::io(&crop_dir, e))?;
            for (i, (sent, got)) in scene.crops.iter().zip(&received).enumerate() {
                for (tag, crop) in [("sent", sent), ("received", got)] {
                    let p = crop_dir.join(format!("{i:03}_{tag}.png"));
                    crop.to_image().save(&p).map_err(|source| Error::Image {
                        name: p.display().to_string(),
                        source,
                    })?;
                }
            }
        }
        report.say(format!(
            "{}: {} objects, {:.1} W, MIST {:.4}",
            set.image_id,
            tx.per_object.len(),
            tx.total_power(),
            tx.mist
        ));
        summary.push(SimulateSummaryRow {
            image_id: set.image_id.clone(),
            objects: tx.per_object.len(),
            total_power_w: tx.total_power(),
            mist: tx.mist,
        });
    }
    write_csv(&dir.join("summary.csv"), &summary)?;
    report.say(format!("wrote {}", dir.display()));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub distance: f64,
    pub allocator: String,
    pub eta: f64,
    pub mean_mist: f64,
    pub std_err: f64,
    pub trials: usize,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean MIST of one allocation rule over seeded trials, summed over scenes.
#[allow(clippy::too_many_arguments)]
pub fn sweep_cell(
    scenes: &[Scene],
    env: &ChannelEnv,
    mist: &MistConfig,
    ssim: &SsimParams,
    eta: Option<f64>,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let powers: Vec<Vec<f64>> = scenes
        .iter()
        .map(|s| {
            let req = AllocationRequest::new(s.confidences.clone(), *env);
            match eta {
                Some(e) => allocate_conf(&req, e).powers,
                None => allocate_avg(&req).powers,
            }
        })
        .collect();
    let mut totals = Vec::with_capacity(trials);
    for t in 0..trials {
        let trial_seed = derive_seed(seed, t as u64);
        let mut fading = ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, 0));
        let mut bits = ChaCha8Rng::seed_from_u64(derive_seed(trial_seed, 1));
        let mut total = 0.0;
        for (s, p) in scenes.iter().zip(&powers) {
            total += simulate_transmission(&s.crops, &s.confidences, p, env, mist, ssim, &mut fading, &mut bits)?.mist;
        }
        totals.push(total);
    }
    Ok(mean_and_se(&totals))
}

/// MIST-maximizing η per distance from sweep rows.
pub fn argmax_eta(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut distances: Vec<f64> = rows.iter().map(|r| r.distance).collect();
    distances.sort_by(f64::total_cmp);
    distances.dedup();
    distances
        .into_iter()
        .filter_map(|d| {
            rows.iter()
                .filter(|r| r.distance == d && r.allocator == "conf")
                .max_by(|a, b| a.mean_mist.total_cmp(&b.mean_mist))
                .map(|r| (d, r.eta))
        })
        .collect()
}

/// Grid of mean MIST over η and distance, with the Avg baseline per distance.
pub fn cmd_sweep_eta(ctx: &RunContext) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [sweep] block".into()))?;
    let scenes = load_scenes(&cfg.paths.detections, &cfg.paths.images, cfg.mist.c_min)?
        .iter()
        .map(|(set, img)| Scene::from_image(img, set))
        .collect::<Result<Vec<_>>>()?;
    let mist = cfg.mist.config();
    let mut rows = Vec::new();
    for (di, &d) in sweep.distances.iter().enumerate() {
        let env = cfg.channel.with_distance(d);
        let seed = derive_seed(ctx.seed, di as u64);
        let (m, se) = sweep_cell(&scenes, &env, &mist, &cfg.ssim, None, sweep.trials, seed)?;
        rows.push(SweepRow {
            distance: d,
            allocator: "avg".into(),
            eta: 0.0,
            mean_mist: m,
            std_err: se,
            trials: sweep.trials,
        });
        for &eta in &sweep.etas {
            let (m, se) = sweep_cell(&scenes, &env, &mist, &cfg.ssim, Some(eta), sweep.trials, seed)?;
            rows.push(SweepRow {
                distance: d,
                allocator: "conf".into(),
                eta,
                mean_mist: m,
                std_err: se,
                trials: sweep.trials,
            });
        }
    }
    let dir = ctx.dir("sweep-eta")?;
    write_csv(&dir.join("sweep.csv"), &rows)?;

    let mut series = Vec::new();
    let (lo, hi) = sweep
        .etas
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    for &d in &sweep.distances {
        let pts = rows
            .iter()
            .filter(|r| r.distance == d && r.allocator == "conf")
            .map(|r| (r.eta, r.mean_mist))
            .collect();
        series.push(Series::line(format!("Conf, D = {d} m"), pts));
        if let Some(avg) = rows.iter().find(|r| r.distance == d && r.allocator == "avg") {
            if lo.is_finite() {
                series.push(Series::reference(format!("Avg, D = {d} m"), avg.mean_mist, lo, hi));
            }
        }
    }
    let plot = LinePlot {
        title: "MIST versus η".into(),
        x_label: "η".into(),
        y_label: "mean MIST".into(),
        series,
    };
    write_text(&dir.join("sweep.svg"), &plot.to_svg())?;

    let mut report = CommandReport::ok();
    for r in &rows {
        report.say(format!(
            "D = {:>5} m  {:<4} η = {:<5} MIST {:.4} ± {:.4}",
            r.distance, r.allocator, r.eta, r.mean_mist, r.std_err
        ));
    }
    for (d, eta) in argmax_eta(&rows) {
        report.say(format!("D = {d} m: best η = {eta}"));
    }
    report.say(format!("wrote {}", dir.display()));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub allocator: String,
    pub eta: f64,
    pub mist: f64,
}

/// Avg and Conf scores under a surrogate; the Conf row with the best η is
/// returned separately.
pub fn reference_scores(surrogate: &RewardSurrogate, etas: &[f64]) -> Result<(Vec<ReferenceRow>, ReferenceRow)> {
    let req = AllocationRequest::new(surrogate.confidences.clone(), surrogate.env);
    let mut rows = vec![ReferenceRow {
        allocator: "avg".into(),
        eta: 0.0,
        mist: surrogate.score(&allocate_avg(&req).powers)?,
    }];
    for &eta in etas {
        rows.push(ReferenceRow {
            allocator: "conf".into(),
            eta,
            mist: surrogate.score(&allocate_conf(&req, eta).powers)?,
        });
    }
    let best = rows
        .iter()
        .filter(|r| r.allocator == "conf")
        .max_by(|a, b| a.mist.total_cmp(&b.mist))
        .cloned()
        .unwrap_or_else(|| rows[0].clone());
    Ok((rows, best))
}

/// Trailing mean of the last `window` rewards.
pub fn trailing_mean(curve: &[CurvePoint], window: usize) -> Option<f64> {
    let n = curve.len().min(window);
    (n > 0).then(|| curve[curve.len() - n..].iter().map(|p| p.reward).sum::<f64>() / n as f64)
}

/// First episode at which the trailing `window` mean reaches `level`.
pub fn first_crossing(curve: &[CurvePoint], window: usize, level: f64) -> Option<usize> {
    let mut sum = 0.0;
    for (i, p) in curve.iter().enumerate() {
        sum += p.reward;
        if i >= window {
            sum -= curve[i - window].reward;
        }
        if i + 1 >= window && sum / window as f64 >= level {
            return Some(p.episode);
        }
    }
    None
}

/// Build the reward surrogate for the configured training scene.
pub fn training_surrogate(cfg: &ExperimentConfig, block: &DiffusionBlock) -> Result<RewardSurrogate> {
    let detections = block.detections.as_ref().unwrap_or(&cfg.paths.detections);
    let scenes = load_scenes(detections, &cfg.paths.images, cfg.mist.c_min)?;
    let (set, image) = scenes
        .first()
        .ok_or_else(|| Error::Config(format!("{} has no images", detections.display())))?;
    let crops = extract_crops(image, set)?;
    let env = cfg.channel.with_distance(block.distance).with_total_power(block.total_power);
    RewardSurrogate::build(&crops, &set.confidences(), env, cfg.mist.config(), &cfg.ssim, block.surrogate)
}

/// Train the diffusion policy on one scene and compare it with Avg and the
/// best-η Conf allocation under the same reward surrogate.
pub fn cmd_train_diffusion(ctx: &RunContext) -> Result<CommandReport> {
    cmd_train_diffusion_with(ctx, |_| {})
}

pub fn cmd_train_diffusion_with<F: FnMut(&CurvePoint)>(ctx: &RunContext, on_episode: F) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let block = cfg
        .diffusion
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [diffusion] block".into()))?;
    let surrogate = training_surrogate(cfg, block)?;
    let (refs, best) = reference_scores(&surrogate, &block.reference_etas)?;
    let avg = refs[0].mist;

    let mut trainer = match &block.resume {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Trainer::from_checkpoint(&Checkpoint::from_json(&text)?)?
        }
        None => Trainer::new(block.policy.clone(), ctx.seed)?,
    };
    let env = SurrogateEnv::new(surrogate);
    trainer.train_with(&env, block.episodes, on_episode)?;

    let dir = ctx.dir("train-diffusion")?;
    write_text(&dir.join("checkpoint.json"), &trainer.to_checkpoint().to_json()?)?;
    write_csv(&dir.join("curve.csv"), &trainer.curve)?;
    write_csv(&dir.join("references.csv"), &refs)?;
    let last = trainer.curve.last().map_or(0.0, |p| p.episode as f64);
    let smoothed: Vec<(f64, f64)> = trainer
        .curve
        .iter()
        .enumerate()
        .map(|(i, p)| (p.episode as f64, trailing_mean(&trainer.curve[..=i], 100).unwrap_or(p.reward)))
        .collect();
    let plot = LinePlot {
        title: "Training reward".into(),
        x_label: "episode".into(),
        y_label: "MIST".into(),
        series: vec![
            Series::line("diffusion (100-episode mean)", smoothed),
            Series::reference(format!("Conf, η = {}", best.eta), best.mist, 0.0, last),
            Series::reference("Avg", avg, 0.0, last),
        ],
    };
    write_text(&dir.join("curve.svg"), &plot.to_svg())?;

    let mut report = CommandReport::ok();
    report.say(format!("Avg MIST {avg:.4}; best Conf MIST {:.4} at η = {}", best.mist, best.eta));
    report.say(format!("episodes trained: {}", trainer.episodes_done()));
    if let Some(m) = trailing_mean(&trainer.curve, 100) {
        report.say(format!(
            "final 100-episode mean reward {m:.4} ({:+.2}% vs Avg, {:+.2}% vs Conf)",
            100.0 * (m / avg - 1.0),
            100.0 * (m / best.mist - 1.0)
        ));
    }
    match first_crossing(&trainer.curve, 100, best.mist) {
        Some(ep) => report.say(format!("crosses the Conf reference at episode {ep}")),
        None => report.say("never crosses the Conf reference"),
    }
    report.say(format!("wrote {}", dir.display()));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BytesRow {
    pub image_id: String,
    pub objects: usize,
    pub original_png: u64,
    pub semantic_png: u64,
    pub original_raw: u64,
    pub semantic_raw: u64,
    pub png_reduction: f64,
    pub raw_reduction: f64,
}

/// Byte cost of sending crops instead of whole frames.
pub fn cmd_bytes_report(ctx: &RunContext) -> Result<CommandReport> {
    let cfg = &ctx.config;
    let scenes = load_scenes(&cfg.paths.detections, &cfg.paths.images, cfg.mist.c_min)?;
    let crops = scenes
        .iter()
        .map(|(set, img)| extract_crops(img, set))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<(&str, &RgbImage)> = scenes.iter().map(|(s, i)| (s.image_id.as_str(), i)).collect();
    let rep = byte_accounting(&images, &crops)?;
    let ratio = |o: u64, s: u64| if o == 0 { 0.0 } else { 1.0 - s as f64 / o as f64 };
    let mut rows: Vec<BytesRow> = rep
        .per_image
        .iter()
        .map(|r| BytesRow {
            image_id: r.image_id.clone(),
            objects: r.objects,
            original_png: r.original_bytes,
            semantic_png: r.semantic_bytes,
            original_raw: r.original_raw_bytes,
            semantic_raw: r.semantic_raw_bytes,
            png_reduction: ratio(r.original_bytes, r.semantic_bytes),
            raw_reduction: ratio(r.original_raw_bytes, r.semantic_raw_bytes),
        })
        .collect();
    rows.push(BytesRow {
        image_id: "total".into(),
        objects: rep.per_image.iter().map(|r| r.objects).sum(),
        original_png: rep.original_bytes,
        semantic_png: rep.semantic_bytes,
        original_raw: rep.original_raw_bytes,
        semantic_raw: rep.semantic_raw_bytes,
        png_reduction: rep.reduction_ratio,
        raw_reduction: rep.raw_reduction_ratio,
    });
    let dir = ctx.dir("bytes-report")?;
    write_csv(&dir.join("bytes.csv"), &rows)?;
    let mut report = CommandReport::ok();
    report.say(format!(
        "{} images: PNG {} -> {} bytes ({:.1}% less), raw {} -> {} bytes ({:.1}% less)",
        rep.per_image.len(),
        rep.original_bytes,
        rep.semantic_bytes,
        100.0 * rep.reduction_ratio,
        rep.original_raw_bytes,
        rep.semantic_raw_bytes,
        100.0 * rep.raw_reduction_ratio
    ));
    report.say(format!("wrote {}", dir.display()));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelsReport {
    pub passed: bool,
    pub max_grad_error: Option<f64>,
    pub checks: Vec<KernelCheck>,
}

/// Run the kernel checks. Failures are reported, not returned as errors.
pub fn kernels_report(block: &KernelsBlock) -> KernelsReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(KernelCheck {
            name: name.into(),
            passed,
            detail,
        })
    };

    for (n, c, expect) in [(1, 8, vec![8]), (2, 16, vec![8, 16]), (3, 64, vec![16, 32, 64])] {
        let got = kernels::order_channels(n, c);
        let passed = got.as_ref().is_ok_and(|g| *g == expect);
        push("channel-ledger", passed, format!("n = {n}, C = {c}: {got:?}"));
    }

    let mut max_grad: Option<f64> = None;
    let mut grad = |name: &str, params: Result<GnConvParams>, x: Result<FeatureMap>, limit: f64| {
        let res = params.and_then(|p| x.and_then(|x| kernels::gnconv_grad_check(&p, &x)));
        let (passed, detail) = match res {
            Ok(e) => {
                max_grad = Some(max_grad.map_or(e, |m: f64| m.max(e)));
                (e < limit, format!("max relative error {e:.3e} (limit {limit:e})"))
            }
            Err(e) => (false, e.to_string()),
        };
        checks.push(KernelCheck {
            name: name.into(),
            passed,
            detail,
        });
    };
    let mut rng = ChaCha8Rng::seed_from_u64(block.seed);
    grad(
        "gradient-random-n2",
        GnConvParams::seeded(2, 4, block.seed),
        FeatureMap::random(4, 4, 4, &mut rng),
        1e-4,
    );
    grad(
        "gradient-identity-kernels",
        GnConvParams::seeded(2, 4, block.seed).map(|p| p.with_identity_kernels()),
        FeatureMap::random(4, 4, 4, &mut rng),
        1e-6,
    );
    grad(
        "gradient-configured",
        GnConvParams::seeded(block.order, block.channels, block.seed),
        FeatureMap::random(block.channels.max(1), block.height.max(1), block.width.max(1), &mut rng),
        1e-4,
    );

    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(KernelCheck {
            name: name.into(),
            passed,
            detail,
        })
    };
    let shapes = GnConvParams::seeded(block.order, block.channels, block.seed).and_then(|p| {
        let x = FeatureMap::random(block.channels, block.height, block.width, &mut rng)?;
        Ok((kernels::gnconv(&x, &p)?.shape(), kernels::simam(&x, block.lambda)?.shape(), x.shape()))
    });
    match shapes {
        Ok((g, s, x)) => push("shape-preservation", g == x && s == x, format!("{x:?} -> {g:?}, {s:?}")),
        Err(e) => push("shape-preservation", false, e.to_string()),
    }

    let gate = 1.0 / (1.0 + (-0.5f64).exp());
    let constant = FeatureMap::from_vec(1, 3, 3, vec![1.7; 9]).and_then(|x| kernels::simam(&x, block.lambda));
    match constant {
        Ok(y) => {
            let err = y.values.iter().map(|v| (v - gate * 1.7).abs()).fold(0.0, f64::max);
            push("simam-constant-gate", err <= 1e-9, format!("gate error {err:.2e}"));
        }
        Err(e) => push("simam-constant-gate", false, e.to_string()),
    }
    let zero = FeatureMap::from_vec(2, 3, 3, vec![0.0; 18]).and_then(|x| kernels::simam(&x, block.lambda));
    match zero {
        Ok(y) => push("simam-zero", y.values.iter().all(|v| *v == 0.0), "zero in, zero out".into()),
        Err(e) => push("simam-zero", false, e.to_string()),
    }
    let printed = FeatureMap::random(2, 4, 4, &mut rng).and_then(|x| {
        let a = kernels::simam_with(&x, block.lambda, SimamVariant::Standard)?;
        let b = kernels::simam_with(&x, block.lambda, SimamVariant::Printed)?;
        Ok(a.values.iter().zip(b.values.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
    });
    match printed {
        Ok(d) => push("simam-printed-variant", true, format!("max difference from standard {d:.3e}")),
        Err(e) => push("simam-printed-variant", false, e.to_string()),
    }

    KernelsReport {
        passed: checks.iter().all(|c| c.passed),
        max_grad_error: max_grad,
        checks,
    }
}

pub fn cmd_kernels_check(ctx: &RunContext) -> Result<CommandReport> {
    let rep = kernels_report(&ctx.config.kernels);
    let dir = ctx.dir("kernels-check")?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&rep)?)?;
    let mut report = CommandReport {
        lines: Vec::new(),
        passed: rep.passed,
    };
    for c in &rep.checks {
        report.say(format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    if let Some(e) = rep.max_grad_error {
        report.say(format!("max gradient-check error {e:.3e}"));
    }
    Ok(report)
}
