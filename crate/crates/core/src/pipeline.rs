//! File-level workflows behind the command-line verbs: dataset generation,
//! training runs with checkpoints, evaluation sweeps, inference and the
//! scaling bench.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::checkpoint::{load_checkpoint_checked, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mask::apply_mask;
use crate::metrics::{make_ray_set, ray_counts, voxel_center, MetricsReport, RayCounts, VoxelCounts, RAY_THRESHOLDS_M};
use crate::model::FmOcc;
use crate::scene::{generate_scene, load_scene, save_scene, Scene, SemanticLabelGrid};
use crate::ssm::{ssm_scan, SsmBlockParams};
use crate::train::{mix_seed, EpochEnd, Example, Trainer};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const HASHES_FILE: &str = "hashes.toml";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.fmck";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn scene_file_name(seed: u64) -> String {
    format!("scene_{seed}.fmoc")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub scene_hash: String,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Writes every training and evaluation scene plus the manifest.
pub fn generate_dataset(cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    create_dir(dir)?;
    let train = cfg.data.train_seeds();
    let eval = cfg.data.eval_seeds();
    let seeds: Vec<u64> = train.iter().chain(&eval).copied().collect();
    seeds.par_iter().try_for_each(|&seed| {
        let scene = generate_scene(&cfg.scene, seed)?;
        save_scene(&dir.join(scene_file_name(seed)), &scene)
    })?;
    let manifest = Manifest {
        config_hash: cfg.config_hash(),
        scene_hash: cfg.scene_hash(),
        train_seeds: train,
        eval_seeds: eval,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Loads one split, refusing data generated under a different scene spec.
pub fn load_split(cfg: &RunConfig, dir: &Path, split: Split) -> Result<Vec<(u64, Scene)>> {
    let manifest = Manifest::read(dir)?;
    if manifest.scene_hash != cfg.scene_hash() {
        return Err(Error::Config(format!(
            "data in {} was generated with scene hash {}, but the current config has {}; regenerate with `gen`",
            dir.display(),
            manifest.scene_hash,
            cfg.scene_hash()
        )));
    }
    let wanted = match split {
        Split::Train => cfg.data.train_seeds(),
        Split::Eval => cfg.data.eval_seeds(),
    };
    let missing: Vec<u64> = wanted.iter().copied().filter(|s| !dir.join(scene_file_name(*s)).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingScenes(missing));
    }
    wanted
        .par_iter()
        .map(|&s| {
            let scene = load_scene(&dir.join(scene_file_name(s)))?;
            if scene.labels.dims() != cfg.scene.dims || scene.features.channels() != cfg.scene.channels {
                return Err(Error::contract(format!("scene {s} does not match the configured dims/channels")));
            }
            Ok((s, scene))
        })
        .collect()
}

pub fn build_model(cfg: &RunConfig) -> Result<FmOcc> {
    FmOcc::new(cfg.scene.channels, cfg.scene.num_classes, cfg.model.clone())
}

pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer> {
    Trainer::new(
        build_model(cfg)?,
        cfg.train.clone(),
        cfg.flow.clone(),
        cfg.mask.clone(),
        cfg.optimizer,
        cfg.seed,
    )
}

pub fn checkpoint_of(trainer: &Trainer, cfg: &RunConfig) -> Checkpoint {
    Checkpoint {
        config_hash: cfg.config_hash(),
        params: trainer.params.clone(),
        optimizer: trainer.optimizer.state.clone(),
        state: trainer.state.clone(),
    }
}

pub fn restore_trainer(cfg: &RunConfig, ck: Checkpoint) -> Result<Trainer> {
    let mut t = new_trainer(cfg)?;
    let expected: Vec<&str> = t.params.iter().map(|(n, _)| n).collect();
    let found: Vec<&str> = ck.params.iter().map(|(n, _)| n).collect();
    if expected != found {
        return Err(Error::contract("checkpoint parameters do not match the configured model"));
    }
    t.params = ck.params;
    t.optimizer.state = ck.optimizer;
    t.state = ck.state;
    Ok(t)
}

pub fn train_log_csv(trainer: &Trainer) -> String {
    let mut s = String::from("step,epoch,flow_loss,ce_loss,p_drop\n");
    for r in &trainer.state.history {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.epoch, r.flow_loss, r.ce_loss, r.p_drop);
    }
    s
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

/// Newest checkpoint in a run directory: the final one if present, else the
/// highest-numbered epoch checkpoint.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = checkpoint_dir(run_dir);
    let fin = dir.join(FINAL_CHECKPOINT);
    if fin.is_file() {
        return Some(fin);
    }
    let mut epochs: Vec<PathBuf> = fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".fmck"))
        })
        .collect();
    epochs.sort();
    epochs.pop()
}

/// Trains (or resumes) a run in `run_dir` on the training split of
/// `data_dir`, writing the config snapshot, hashes, step log and
/// checkpoints.
pub fn train_run(cfg: &RunConfig, data_dir: &Path, run_dir: &Path, resume: bool) -> Result<Trainer> {
    cfg.validate()?;
    let scenes = load_split(cfg, data_dir, Split::Train)?;
    let examples: Vec<Example<'_>> = scenes.iter().map(|(s, sc)| (*s, sc)).collect();
    create_dir(&checkpoint_dir(run_dir))?;
    write_file(&run_dir.join(CONFIG_SNAPSHOT), cfg.canonical_text())?;
    write_file(
        &run_dir.join(HASHES_FILE),
        format!("config_hash = \"{}\"\nscene_hash = \"{}\"\n", cfg.config_hash(), cfg.scene_hash()),
    )?;

    let mut trainer = match latest_checkpoint(run_dir).filter(|_| resume) {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            restore_trainer(cfg, load_checkpoint_checked(&path, &cfg.config_hash())?)?
        }
        None => new_trainer(cfg)?,
    };
    let every = cfg.train.checkpoint_every;
    let log_path = run_dir.join(TRAIN_LOG);
    let result = trainer.run(&examples, None, |t, end: EpochEnd| {
        write_file(&log_path, train_log_csv(t))?;
        let ck = checkpoint_of(t, cfg);
        if every > 0 && end.epoch.is_multiple_of(every) {
            save_checkpoint(&checkpoint_dir(run_dir).join(format!("epoch_{:03}.fmck", end.epoch)), &ck)?;
        }
        if end.last {
            save_checkpoint(&checkpoint_dir(run_dir).join(FINAL_CHECKPOINT), &ck)?;
        }
        log::info!("epoch {} done, step {}", end.epoch, t.state.step);
        Ok(())
    });
    if let Err(e) = result {
        // Keep the log of every completed step; checkpoints on disk are untouched.
        write_file(&log_path, train_log_csv(&trainer))?;
        return Err(e);
    }
    write_file(&log_path, train_log_csv(&trainer))?;
    Ok(trainer)
}

pub fn load_trained(cfg: &RunConfig, checkpoint: &Path) -> Result<(FmOcc, ParamStore)> {
    let ck = load_checkpoint_checked(checkpoint, &cfg.config_hash())?;
    let t = restore_trainer(cfg, ck)?;
    Ok((t.model, t.params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMetrics {
    pub seed: u64,
    pub miou: f64,
    pub rayiou_mean: f64,
}

/// Masks each scene's input at `mask_ratio` (seeded per scene, so every
/// model sees the same masks), predicts, and scores against ground truth.
pub fn evaluate(
    cfg: &RunConfig,
    model: &FmOcc,
    params: &ParamStore,
    scenes: &[(u64, Scene)],
    mask_ratio: f64,
) -> Result<(MetricsReport, Vec<SceneMetrics>)> {
    if scenes.is_empty() {
        return Err(Error::contract("no scenes to evaluate"));
    }
    let rays = make_ray_set(cfg.eval.n_azimuth, cfg.eval.n_elevation)?;
    let origin = voxel_center(cfg.scene.ego);
    let steps = cfg.inference_steps();
    let per_scene: Vec<(VoxelCounts, RayCounts)> = scenes
        .par_iter()
        .map(|(seed, scene)| {
            let input = apply_mask(&scene.features, mask_ratio, mix_seed(&[cfg.eval.mask_seed, *seed]))?;
            let pred = model.infer(params, &input, steps)?;
            let vc = VoxelCounts::from_grids(&pred, &scene.labels)?;
            let rc = ray_counts(&pred, &scene.labels, origin, &rays, &RAY_THRESHOLDS_M, scene.voxel_size_m)?;
            Ok((vc, rc))
        })
        .collect::<Result<_>>()?;
    let k = cfg.scene.num_classes;
    let mut vtot = VoxelCounts::new(k);
    let mut rtot = RayCounts::new(k, &RAY_THRESHOLDS_M);
    let mut rows = Vec::with_capacity(scenes.len());
    for ((seed, _), (vc, rc)) in scenes.iter().zip(&per_scene) {
        vtot.merge(vc);
        rtot.merge(rc)?;
        let s = rc.scores();
        rows.push(SceneMetrics {
            seed: *seed,
            miou: vc.miou(),
            rayiou_mean: s.iter().sum::<f64>() / s.len() as f64,
        });
    }
    Ok((MetricsReport::from_counts(&vtot, &rtot)?, rows))
}

pub fn metrics_file_name(mask_ratio: f64) -> String {
    format!("metrics_{mask_ratio:.2}.txt")
}

pub fn per_scene_csv(rows: &[SceneMetrics]) -> String {
    let mut s = String::from("seed,miou,rayiou_mean\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.seed, r.miou, r.rayiou_mean);
    }
    s
}

/// Evaluates a checkpoint at each ratio, writing one metrics document and
/// one per-scene CSV per ratio plus `sweep.csv`.
pub fn eval_run(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    ratios: &[f64],
    out_dir: &Path,
    run_name: &str,
) -> Result<Vec<(f64, MetricsReport)>> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || ratios.is_empty() {
        return Err(Error::contract("mask ratios must be a nonempty list within [0, 1]"));
    }
    let (model, params) = load_trained(cfg, checkpoint)?;
    let scenes = load_split(cfg, data_dir, split)?;
    create_dir(out_dir)?;
    let mut out = Vec::new();
    let mut sweep = String::from("mask_ratio,miou,rayiou_1m,rayiou_2m,rayiou_4m,rayiou_mean\n");
    for &ratio in ratios {
        let (report, rows) = evaluate(cfg, &model, &params, &scenes, ratio)?;
        let doc = report.to_document(&[
            ("run", run_name.to_string()),
            ("mask_ratio", ratio.to_string()),
            ("scenes", scenes.len().to_string()),
            ("n_euler_steps", cfg.inference_steps().to_string()),
        ]);
        write_file(&out_dir.join(metrics_file_name(ratio)), doc)?;
        write_file(&out_dir.join(format!("per_scene_{ratio:.2}.csv")), per_scene_csv(&rows))?;
        let _ = writeln!(
            sweep,
            "{},{},{},{},{},{}",
            ratio, report.miou, report.rayiou_1m, report.rayiou_2m, report.rayiou_4m, report.rayiou_mean
        );
        out.push((ratio, report));
    }
    write_file(&out_dir.join("sweep.csv"), sweep)?;
    Ok(out)
}

/// Predicts labels for one scene file.
pub fn infer_scene(cfg: &RunConfig, checkpoint: &Path, scene_path: &Path, n_steps: usize) -> Result<(Scene, SemanticLabelGrid)> {
    let (model, params) = load_trained(cfg, checkpoint)?;
    let scene = load_scene(scene_path)?;
    let pred = model.infer(&params, &scene.features, n_steps)?;
    Ok((scene, pred))
}

/// Peak-heap instrumentation supplied by the binary.
pub trait MemoryProbe: Sync {
    fn reset_peak(&self);
    fn peak_bytes(&self) -> usize;
}

pub struct NoProbe;

impl MemoryProbe for NoProbe {
    fn reset_peak(&self) {}
    fn peak_bytes(&self) -> usize {
        0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kind: &'static str,
    /// Sequence length for `ssm_scan`, Euler steps for `infer`.
    pub size: usize,
    pub median_seconds: f64,
    pub peak_bytes: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Shortest wall time of one timing sample; fast calls are batched up to it.
const MIN_SAMPLE_SECONDS: f64 = 0.02;

/// Median per-call seconds over `repeats` samples, and peak heap of one call.
fn measure<F: FnMut() -> Result<()>>(repeats: usize, probe: &dyn MemoryProbe, mut f: F) -> Result<(f64, usize)> {
    probe.reset_peak();
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_secs_f64();
    let peak = probe.peak_bytes();
    let batch = ((MIN_SAMPLE_SECONDS / once.max(1e-9)).ceil() as usize).clamp(1, 100_000);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        for _ in 0..batch {
            f()?;
        }
        times.push(start.elapsed().as_secs_f64() / batch as f64);
    }
    Ok((median(times), peak))
}

/// Timing and peak-heap rows for the block-level scan at each configured
/// length and for end-to-end inference at each Euler step count. Runs
/// single-threaded work on the calling thread.
pub fn run_bench(cfg: &RunConfig, probe: &dyn MemoryProbe) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.scene.channels;
    let block = SsmBlockParams::init(c, cfg.model.ssm.state_size, &mut rng);
    let mut rows = Vec::new();
    for &len in &cfg.bench.scan_lengths {
        let x = Tensor::randn(&[len, c], 1.0, &mut rng);
        let (secs, peak) = measure(cfg.bench.repeats, probe, || ssm_scan(&x, &block).map(|_| ()))?;
        rows.push(BenchRow {
            kind: "ssm_scan",
            size: len,
            median_seconds: secs,
            peak_bytes: peak,
        });
    }
    let model = build_model(cfg)?;
    let params = model.init_params(&mut rng)?;
    let scene = generate_scene(&cfg.scene, cfg.data.first_seed)?;
    for &n in &cfg.bench.euler_steps {
        let (secs, peak) = measure(cfg.bench.repeats, probe, || model.infer(&params, &scene.features, n).map(|_| ()))?;
        rows.push(BenchRow {
            kind: "infer",
            size: n,
            median_seconds: secs,
            peak_bytes: peak,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("kind,size,median_seconds,peak_bytes\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.kind, r.size, r.median_seconds, r.peak_bytes);
    }
    s
}
