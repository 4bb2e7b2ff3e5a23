//! Mini-batch training with mask training, flow loss and head loss.
//!
//! Every random draw is seeded from `(run seed, global step, scene seed)`,
//! so a run resumed from a checkpoint replays the uninterrupted run exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, TimeSampling};
use crate::mask::{apply_mask, MaskSchedule};
use crate::model::FmOcc;
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Write a checkpoint after every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 4,
            checkpoint_every: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Schedule position in `[0, E]`, the `e` of the mask ramp.
    pub epoch: f64,
    pub flow_loss: f64,
    pub ce_loss: f64,
    pub p_drop: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub total_epochs: usize,
    pub seed: u64,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(total_epochs: usize, seed: u64) -> Self {
        Self {
            step: 0,
            total_epochs,
            seed,
            history: Vec::new(),
        }
    }
}

/// A training example: the scene seed (for error reports and RNG streams)
/// plus the scene itself.
pub type Example<'a> = (u64, &'a Scene);

/// SplitMix64 finalizer over a list of words.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for w in words {
        h = h.wrapping_add(*w).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const STREAM_MASK: u64 = 1;
const STREAM_TIME: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

struct SceneResult {
    flow: f64,
    ce: f64,
    grads: Vec<Option<Vec<f64>>>,
}

#[allow(clippy::too_many_arguments)]
fn scene_pass(
    model: &FmOcc,
    params: &ParamStore,
    names: &[String],
    flow_cfg: &FlowConfig,
    p_drop: f64,
    run_seed: u64,
    step: u64,
    (scene_seed, scene): Example<'_>,
) -> Result<SceneResult> {
    let v0 = apply_mask(&scene.features, p_drop, mix_seed(&[run_seed, step, scene_seed, STREAM_MASK]))?;
    let t = match flow_cfg.t_sampling {
        TimeSampling::Uniform => ChaCha8Rng::seed_from_u64(mix_seed(&[run_seed, step, scene_seed, STREAM_TIME])).random::<f64>(),
        TimeSampling::Fixed(t) => t,
    };
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let non_finite = |e: Error| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { seed: scene_seed },
        other => other,
    };
    let (flow, ce) = model
        .losses_on(&mut tape, &binding, &v0, &scene.labels, t, flow_cfg.head_on, flow_cfg.n_euler_steps)
        .map_err(non_finite)?;
    let ce_term = tape.scale(ce, flow_cfg.ce_weight).map_err(non_finite)?;
    let loss = match flow {
        Some(f) => {
            let ft = tape.scale(f, flow_cfg.flow_weight).map_err(non_finite)?;
            tape.add(ft, ce_term).map_err(non_finite)?
        }
        None => ce_term,
    };
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFiniteLoss { seed: scene_seed });
    }
    let g = tape.backward(loss).map_err(non_finite)?;
    let grads = names
        .iter()
        .map(|n| Ok(g.get(binding.var(n)?).map(<[f64]>::to_vec)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneResult {
        flow: flow.map_or(0.0, |f| tape.value(f).item()),
        ce: tape.value(ce).item(),
        grads,
    })
}

/// One optimizer update on `batch`. Scenes are evaluated in parallel and
/// their gradients averaged in batch order. Returns the batch-mean
/// `(flow_loss, ce_loss)`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &FmOcc,
    params: &mut ParamStore,
    optimizer: &mut AdamW,
    flow_cfg: &FlowConfig,
    p_drop: f64,
    run_seed: u64,
    step: u64,
    batch: &[Example<'_>],
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::contract("training batch is empty"));
    }
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let frozen: &ParamStore = params;
    let results = batch
        .par_iter()
        .map(|ex| scene_pass(model, frozen, &names, flow_cfg, p_drop, run_seed, step, *ex))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let inv = 1.0 / batch.len() as f64;
    params.zero_grads();
    for (pi, name) in names.iter().enumerate() {
        let p = params.get_mut(name)?;
        if !p.requires_grad() {
            continue;
        }
        let mut sum = vec![0.0; p.numel()];
        for r in &results {
            if let Some(g) = &r.grads[pi] {
                sum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
        }
        sum.iter_mut().for_each(|s| *s *= inv);
        p.accumulate_grad(&sum)?;
    }
    optimizer.step(params)?;
    params.zero_grads();

    let flow = results.iter().map(|r| r.flow).sum::<f64>() * inv;
    let ce = results.iter().map(|r| r.ce).sum::<f64>() * inv;
    Ok((flow, ce))
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FmOcc,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub state: TrainState,
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub mask: MaskSchedule,
}

/// Passed to the epoch hook after each completed pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochEnd {
    pub epoch: usize,
    pub last: bool,
}

impl Trainer {
    pub fn new(
        model: FmOcc,
        train: TrainConfig,
        flow: FlowConfig,
        mask: MaskSchedule,
        optimizer: AdamWConfig,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        flow.validate()?;
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xF1A7])))?;
        Ok(Self {
            model,
            params,
            optimizer: AdamW::new(optimizer),
            state: TrainState::new(train.epochs, seed),
            train,
            flow,
            mask,
        })
    }

    pub fn steps_per_epoch(&self, n_scenes: usize) -> u64 {
        n_scenes.div_ceil(self.train.batch_size) as u64
    }

    pub fn total_steps(&self, n_scenes: usize) -> u64 {
        self.steps_per_epoch(n_scenes) * self.train.epochs as u64
    }

    /// Schedule position of `step`: runs linearly from 0 at the first step
    /// to `E` at the last.
    pub fn schedule_epoch(&self, step: u64, n_scenes: usize) -> f64 {
        let total = self.total_steps(n_scenes);
        if total <= 1 {
            return 0.0;
        }
        self.train.epochs as f64 * step as f64 / (total - 1) as f64
    }

    fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.state.seed, epoch, STREAM_SHUFFLE])));
        order
    }

    /// Trains until the run is complete or `max_steps` further steps have
    /// been taken. `on_epoch_end` runs after every completed pass.
    pub fn run<F>(&mut self, scenes: &[Example<'_>], max_steps: Option<u64>, mut on_epoch_end: F) -> Result<()>
    where
        F: FnMut(&Trainer, EpochEnd) -> Result<()>,
    {
        if scenes.is_empty() {
            return Err(Error::contract("no training scenes"));
        }
        let n = scenes.len();
        let spe = self.steps_per_epoch(n);
        let total = self.total_steps(n);
        let mut budget = max_steps.unwrap_or(u64::MAX);
        while self.state.step < total && budget > 0 {
            let step = self.state.step;
            let epoch = step / spe;
            let pos = (step % spe) as usize;
            let order = self.epoch_order(epoch, n);
            let lo = pos * self.train.batch_size;
            let hi = (lo + self.train.batch_size).min(n);
            let batch: Vec<Example<'_>> = order[lo..hi].iter().map(|&i| scenes[i]).collect();

            let e = self.schedule_epoch(step, n);
            let p_drop = self.mask.p_drop(e, self.train.epochs)?;
            let (flow, ce) = train_step(
                &self.model,
                &mut self.params,
                &mut self.optimizer,
                &self.flow,
                p_drop,
                self.state.seed,
                step,
                &batch,
            )?;
            self.state.history.push(StepRecord {
                step,
                epoch: e,
                flow_loss: flow,
                ce_loss: ce,
                p_drop,
            });
            self.state.step += 1;
            budget -= 1;
            log::debug!("step {step} epoch {e:.3} flow {flow:.5} ce {ce:.5} p_drop {p_drop:.4}");
            if self.state.step.is_multiple_of(spe) {
                let done = (self.state.step / spe) as usize;
                on_epoch_end(
                    self,
                    EpochEnd {
                        epoch: done,
                        last: self.state.step == total,
                    },
                )?;
            }
        }
        Ok(())
    }

    pub fn is_complete(&self, n_scenes: usize) -> bool {
        self.state.step >= self.total_steps(n_scenes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{generate_scene, SceneSpec};
    use crate::ssm::SsmConfig;

    fn spec() -> SceneSpec {
        SceneSpec {
            dims: [8, 8, 2],
            channels: 4,
            num_boxes: 3,
            ego: [4, 4, 1],
            ..Default::default()
        }
    }

    fn model(fmssm: bool) -> FmOcc {
        let cfg = ModelConfig {
            fmssm,
            head_hidden: 8,
            ssm: SsmConfig {
                state_size: 4,
                depth: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        FmOcc::new(4, 6, cfg).unwrap()
    }

    fn trainer(fmssm: bool, flow: FlowConfig, opt: AdamWConfig) -> Trainer {
        let train = TrainConfig {
            epochs: 2,
            batch_size: 2,
            checkpoint_every: 1,
        };
        Trainer::new(model(fmssm), train, flow, MaskSchedule::default(), opt, 9).unwrap()
    }

    fn scenes(n: u64) -> Vec<(u64, Scene)> {
        (0..n).map(|s| (s, generate_scene(&spec(), s).unwrap())).collect()
    }

    #[test]
    fn identical_inputs_give_identical_losses() {
        let data = scenes(2);
        let batch: Vec<Example<'_>> = data.iter().map(|(s, sc)| (*s, sc)).collect();
        let run = || {
            let mut t = trainer(true, FlowConfig::default(), AdamWConfig::default());
            let out = train_step(&t.model, &mut t.params, &mut t.optimizer, &t.flow, 0.1, 5, 3, &batch).unwrap();
            (out, t.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        assert_eq!(pa, pb);
        assert!(a.0 > 0.0 && a.1 > 0.0);
    }

    #[test]
    fn zero_loss_weights_leave_parameters_unchanged() {
        let data = scenes(2);
        let batch: Vec<Example<'_>> = data.iter().map(|(s, sc)| (*s, sc)).collect();
        let flow = FlowConfig {
            flow_weight: 0.0,
            ce_weight: 0.0,
            ..Default::default()
        };
        let opt = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut t = trainer(true, flow.clone(), opt);
        let before = t.params.clone();
        train_step(&t.model, &mut t.params, &mut t.optimizer, &t.flow, 0.2, 1, 0, &batch).unwrap();
        for ((na, a), (nb, b)) in t.params.iter().zip(before.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data(), "{na}");
        }

        // With decoupled decay, a zero gradient shrinks trainable weights by
        // exactly the decay factor.
        let mut t = trainer(true, flow, AdamWConfig::default());
        let before = t.params.clone();
        train_step(&t.model, &mut t.params, &mut t.optimizer, &t.flow, 0.2, 1, 0, &batch).unwrap();
        let decay = 1.0 - 1e-4 * 1e-2;
        for ((_, a), (_, b)) in t.params.iter().zip(before.iter()) {
            let factor = if b.requires_grad() { decay } else { 1.0 };
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y * factor);
            }
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut t = trainer(true, FlowConfig::default(), AdamWConfig::default());
        assert!(train_step(&t.model, &mut t.params, &mut t.optimizer, &t.flow, 0.0, 0, 0, &[]).is_err());
    }

    #[test]
    fn schedule_reaches_both_endpoints() {
        let data = scenes(3);
        let ex: Vec<Example<'_>> = data.iter().map(|(s, sc)| (*s, sc)).collect();
        let mut t = trainer(false, FlowConfig::default(), AdamWConfig::default());
        let mut ends = Vec::new();
        t.run(&ex, None, |_, e| {
            ends.push(e);
            Ok(())
        })
        .unwrap();
        let h = &t.state.history;
        assert_eq!(h.len(), 4);
        assert_eq!((h[0].epoch, h[0].p_drop), (0.0, 0.0));
        assert_eq!((h[3].epoch, h[3].p_drop), (2.0, 0.25));
        assert_eq!(ends.len(), 2);
        assert!(ends[1].last && !ends[0].last);
    }

    #[test]
    fn resumed_run_replays_the_uninterrupted_run() {
        let data = scenes(3);
        let ex: Vec<Example<'_>> = data.iter().map(|(s, sc)| (*s, sc)).collect();
        let mut full = trainer(true, FlowConfig::default(), AdamWConfig::default());
        full.run(&ex, None, |_, _| Ok(())).unwrap();

        let mut first = trainer(true, FlowConfig::default(), AdamWConfig::default());
        first.run(&ex, Some(3), |_, _| Ok(())).unwrap();
        let mut resumed = first.clone();
        resumed.run(&ex, None, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.state.history, full.state.history);
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn overfitting_one_scene_halves_the_flow_loss() {
        let data = scenes(1);
        let batch: Vec<Example<'_>> = vec![(data[0].0, &data[0].1)];
        let flow = FlowConfig {
            head_on: crate::flow::HeadOn::MaskedInput,
            t_sampling: TimeSampling::Fixed(0.5),
            ..Default::default()
        };
        let opt = AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        };
        let mut t = trainer(true, flow, opt);
        let mut losses = Vec::new();
        for step in 0..200 {
            let (f, _) = train_step(&t.model, &mut t.params, &mut t.optimizer, &t.flow, 0.0, 2, step, &batch).unwrap();
            losses.push(f);
        }
        assert!(losses[199] <= 0.5 * losses[10], "{} -> {}", losses[10], losses[199]);
    }
}
