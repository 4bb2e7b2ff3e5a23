//! The full model: label embedding, TPV-SSM velocity network and occupancy
//! head, sharing one [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{euler_integrate, HeadOn};
use crate::head::OccHead;
use crate::scene::{SemanticLabelGrid, VoxelFeatureGrid};
use crate::ssm::{SsmConfig, TpvSsmLayer};
use crate::tpv::{tpv_aggregate_on, tpv_reduce_on, LabelEmbedding};

pub const EMBEDDING_PARAM: &str = "label_emb.table";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `false` trains the head directly on the masked input (the ablation
    /// baseline).
    pub fmssm: bool,
    pub head_hidden: usize,
    pub ssm: SsmConfig,
    pub label_scale: f64,
    pub train_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fmssm: true,
            head_hidden: 32,
            ssm: SsmConfig::default(),
            label_scale: 1.0,
            train_embedding: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmOcc {
    pub channels: usize,
    pub num_classes: usize,
    pub config: ModelConfig,
    pub layer: TpvSsmLayer,
    pub head: OccHead,
}

impl FmOcc {
    pub fn new(channels: usize, num_classes: usize, config: ModelConfig) -> Result<Self> {
        if config.head_hidden == 0 {
            return Err(Error::Config("model.head_hidden must be positive".into()));
        }
        if !(config.label_scale > 0.0) {
            return Err(Error::Config("model.label_scale must be positive".into()));
        }
        let layer = TpvSsmLayer::new(channels, config.ssm.clone())?;
        let head = OccHead::new(channels, config.head_hidden, num_classes);
        Ok(Self {
            channels,
            num_classes,
            config,
            layer,
            head,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let emb = LabelEmbedding::init(self.num_classes, self.channels, self.config.label_scale, rng)?;
        let mut store = ParamStore::new();
        store.insert(EMBEDDING_PARAM, emb.table.with_requires_grad(self.config.train_embedding));
        if self.config.fmssm {
            store.extend(self.layer.init_params(rng))?;
        }
        store.extend(self.head.init_params(rng))?;
        Ok(store)
    }

    pub fn embedding(&self, params: &ParamStore) -> Result<LabelEmbedding> {
        LabelEmbedding::new(params.get(EMBEDDING_PARAM)?.clone(), self.config.label_scale)
    }

    fn check_features(&self, v: &VoxelFeatureGrid) -> Result<()> {
        if v.channels() != self.channels {
            return Err(Error::contract(format!(
                "features have {} channels, model expects {}",
                v.channels(),
                self.channels
            )));
        }
        Ok(())
    }

    fn require_fmssm(&self) -> Result<()> {
        if !self.config.fmssm {
            return Err(Error::contract("model was built without the velocity network"));
        }
        Ok(())
    }

    /// `aggregate(layer(reduce(V_t), t))`.
    pub fn velocity_on(&self, tape: &mut Tape, binding: &Binding, v: Var, t: f64) -> Result<Var> {
        self.require_fmssm()?;
        let planes = tpv_reduce_on(tape, v)?;
        let out = self.layer.forward_on(tape, binding, planes, t)?;
        tpv_aggregate_on(tape, out)
    }

    pub fn predict_velocity(&self, params: &ParamStore, v: &VoxelFeatureGrid, t: f64) -> Result<VoxelFeatureGrid> {
        self.check_features(v)?;
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let x = tape.constant(v.to_tensor());
        let out = self.velocity_on(&mut tape, &binding, x, t)?;
        VoxelFeatureGrid::from_tensor(tape.value(out))
    }

    /// Euler integration recorded on the tape.
    pub fn integrate_on(&self, tape: &mut Tape, binding: &Binding, v0: Var, n_steps: usize) -> Result<Var> {
        if n_steps == 0 {
            return Err(Error::contract("euler integration needs at least one step"));
        }
        let dt = 1.0 / n_steps as f64;
        let mut v = v0;
        for i in 0..n_steps {
            let vel = self.velocity_on(tape, binding, v, i as f64 / n_steps as f64)?;
            let step = tape.scale(vel, dt)?;
            v = tape.add(v, step)?;
        }
        Ok(v)
    }

    /// Features the head sees at inference: the integrated output, or the
    /// input unchanged for the baseline.
    pub fn refine(&self, params: &ParamStore, v0: &VoxelFeatureGrid, n_steps: usize) -> Result<VoxelFeatureGrid> {
        self.check_features(v0)?;
        if !self.config.fmssm {
            return Ok(v0.clone());
        }
        euler_integrate(v0, n_steps, |v, t| self.predict_velocity(params, v, t))
    }

    pub fn infer(&self, params: &ParamStore, features: &VoxelFeatureGrid, n_steps: usize) -> Result<SemanticLabelGrid> {
        let refined = self.refine(params, features, n_steps)?;
        self.head.predict(params, &refined)
    }

    /// Records the training losses for one scene and returns
    /// `(flow_loss, ce_loss)`; the flow loss is `None` for the baseline.
    pub fn losses_on(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        v0: &VoxelFeatureGrid,
        labels: &SemanticLabelGrid,
        t: f64,
        head_on: HeadOn,
        n_steps: usize,
    ) -> Result<(Option<Var>, Var)> {
        self.check_features(v0)?;
        if labels.dims() != v0.dims() {
            return Err(Error::Shape {
                op: "losses",
                lhs: v0.dims().to_vec(),
                rhs: labels.dims().to_vec(),
            });
        }
        let x0 = tape.constant(v0.to_tensor());
        let targets: Vec<usize> = labels.labels().iter().map(|&l| l as usize).collect();
        if !self.config.fmssm {
            let logits = self.head.forward_on(tape, binding, x0)?;
            return Ok((None, tape.softmax_cross_entropy(logits, &targets)?));
        }
        let table = binding.var(EMBEDDING_PARAM)?;
        let x1 = crate::tpv::encode_labels_on(tape, table, labels, self.config.label_scale)?;
        let a = tape.scale(x0, 1.0 - t)?;
        let b = tape.scale(x1, t)?;
        let xt = tape.add(a, b)?;
        let vel = self.velocity_on(tape, binding, xt, t)?;
        let target = tape.sub(x1, x0)?;
        let flow = tape.mse(vel, target)?;

        let head_in = match head_on {
            HeadOn::MaskedInput => x0,
            HeadOn::OneStep => self.integrate_on(tape, binding, x0, 1)?,
            HeadOn::FullIntegration => self.integrate_on(tape, binding, x0, n_steps)?,
        };
        let logits = self.head.forward_on(tape, binding, head_in)?;
        let ce = tape.softmax_cross_entropy(logits, &targets)?;
        Ok((Some(flow), ce))
    }
}

/// Wraps a plain tensor list as a binding, for gradient checks that need the
/// model's parameter names.
pub fn binding_for(names: &[String], vars: &[Var]) -> Binding {
    Binding::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect())
}

/// Deterministic copy of `params` with every tensor resampled from
/// `N(0, std²)`; used to move away from the identity initialization.
pub fn randomized<R: Rng + ?Sized>(params: &ParamStore, std: f64, rng: &mut R) -> ParamStore {
    let mut out = params.clone();
    for (_, t) in out.iter_mut() {
        let r = Tensor::randn(t.shape(), std, rng);
        t.data_mut().copy_from_slice(r.data());
    }
    out
}
