//! Training loop, embedding extraction and the ablation presets.
//!
//! One step is: forward the enabled branches, combine the enabled losses,
//! backpropagate, take an Adam step on the enabled parameter groups, then
//! fold the batch features into the OIM lookup tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{augment_in_place, pk_sample, seeded_rng, AugmentConfig, IdentityIndex, Sample};
use crate::error::{Error, Result};
use crate::eval::{EmbeddingSet, Feature};
use crate::losses::{batch_hard_triplet_graph, combined_loss_graph, LossWeights, OimConfig, OimState, NORM_EPS};
use crate::model::{forward, BranchSet, ModelConfig, ModelParams, ModelVars, ParamGroup};
use crate::scalar::Scalar;
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::tensor::Tensor;

/// Base learning rate used at desk scale.
pub const DESK_LR: f64 = 2e-3;

const INIT_STREAM: u64 = 0;
const EPOCH_STREAM: u64 = 1 << 32;

/// Which of the five supervised branches are on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchMask {
    pub b1_vert: bool,
    pub b2_horz: bool,
    pub b3_chan: bool,
    pub b4_oim_global: bool,
    pub b5_triplet: bool,
}

impl Default for BranchMask {
    fn default() -> Self {
        Self::from_bits([true; 5])
    }
}

impl BranchMask {
    pub const fn from_bits(b: [bool; 5]) -> Self {
        Self {
            b1_vert: b[0],
            b2_horz: b[1],
            b3_chan: b[2],
            b4_oim_global: b[3],
            b5_triplet: b[4],
        }
    }

    pub fn bits(&self) -> [bool; 5] {
        [self.b1_vert, self.b2_horz, self.b3_chan, self.b4_oim_global, self.b5_triplet]
    }

    pub fn branches(&self) -> BranchSet {
        BranchSet {
            vertical: self.b1_vert,
            horizontal: self.b2_horz,
            channel: self.b3_chan,
        }
    }

    /// Groups receiving updates. The backbone trains whenever any loss is on.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let mut g = Vec::new();
        if self.bits().iter().any(|&b| b) {
            g.push(ParamGroup::Backbone);
        }
        for (on, grp) in [
            (self.b1_vert, ParamGroup::Vertical),
            (self.b2_horz, ParamGroup::Horizontal),
            (self.b3_chan, ParamGroup::Channel),
            (self.b4_oim_global, ParamGroup::GlobalFc),
        ] {
            if on {
                g.push(grp);
            }
        }
        g
    }
}

/// The four ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "Our-G")]
    OurG,
    #[serde(rename = "Our-G-B1")]
    OurGB1,
    #[serde(rename = "Our")]
    Our,
    #[serde(rename = "Our/channels")]
    OurNoChannels,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::OurG, Preset::OurGB1, Preset::Our, Preset::OurNoChannels];

    pub fn mask(self) -> BranchMask {
        BranchMask::from_bits(match self {
            Preset::OurG => [false, false, true, true, true],
            Preset::OurGB1 => [true, false, true, true, true],
            Preset::Our => [true; 5],
            Preset::OurNoChannels => [true, true, false, true, true],
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::OurG => "Our-G",
            Preset::OurGB1 => "Our-G-B1",
            Preset::Our => "Our",
            Preset::OurNoChannels => "Our/channels",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub branch_mask: BranchMask,
    pub weights: LossWeights,
    pub p: usize,
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub margin: f64,
    pub descriptor: Feature,
    pub base_lr: f64,
    /// Explicit schedule; when absent the breakpoint sits at two thirds of
    /// `epochs`. See [`TrainConfig::schedule`].
    pub lr: Option<LrSchedule>,
    pub adam: AdamConfig,
    pub oim: OimConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            branch_mask: BranchMask::default(),
            weights: LossWeights::default(),
            p: 8,
            k: 2,
            epochs: 30,
            seed: 0,
            margin: 0.5,
            descriptor: Feature::Oim,
            base_lr: DESK_LR,
            lr: None,
            adam: AdamConfig::default(),
            oim: OimConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.branch_mask.bits();
        if !m.iter().zip(self.weights.0).any(|(&on, w)| on && w > 0.0) {
            return Err(Error::invalid("train: no loss-bearing branch is enabled"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid("train: margin must be finite and >= 0"));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid("train: p and k must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("train: epochs must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("train: base_lr must be positive"));
        }
        if let Some(s) = &self.lr {
            if s.decay_span == 0 || !(s.base > 0.0 && s.base.is_finite()) {
                return Err(Error::invalid("train: lr schedule needs base > 0 and decay_span > 0"));
            }
        }
        self.weights.validate()?;
        self.oim.validate()?;
        self.augment.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        self.lr.unwrap_or_else(|| LrSchedule::scaled_to(self.epochs, self.base_lr))
    }

    /// Copy with every implicit default made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            lr: Some(self.schedule()),
            ..self.clone()
        }
    }

    pub fn with_preset(&self, preset: Preset) -> Self {
        Self {
            branch_mask: preset.mask(),
            ..self.clone()
        }
    }
}

/// Model, optimizer-independent state and the configs that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ModelParams<f32>,
    /// OIM heads 1..4: vertical, horizontal, channel, global.
    pub oim: Vec<OimState<f32>>,
    /// Training identities in label order.
    pub train_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss_total: f64,
    /// `None` for disabled terms.
    pub oim: [Option<f64>; 4],
    pub trp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub oim: [Option<f64>; 4],
    pub trp: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss_total,loss_oim1,loss_oim2,loss_oim3,loss_oim4,loss_trp";

    /// One row per epoch; disabled terms are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{},{}", e.epoch, e.lr, e.loss_total);
            for v in e.oim {
                let _ = write!(s, ",{}", opt(v));
            }
            let _ = writeln!(s, ",{}", opt(e.trp));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn stack_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let s = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for x in samples {
        if x.image.shape() != s.as_slice() {
            return Err(Error::shape("images in a batch differ in shape"));
        }
        data.extend_from_slice(x.image.data());
    }
    Tensor::new([vec![samples.len()], s].concat(), data)
}

fn rows(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let d = t.shape()[1];
    t.data()
        .chunks(d)
        .map(|r| Tensor::vector(r.to_vec()).expect("non-empty row"))
        .collect()
}

/// Initial state for a run: parameters from the seed and zero lookup tables.
pub fn init_model(model_cfg: &ModelConfig, train_cfg: &TrainConfig, train_ids: Vec<u32>) -> Result<TrainedModel> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let mut rng = seeded_rng(train_cfg.seed, INIT_STREAM);
    let params = ModelParams::init(model_cfg, &mut rng)?;
    let dims = model_cfg.descriptor_dims();
    let oim = [dims.vert, dims.horz, dims.chan, dims.oim]
        .into_iter()
        .map(|d| OimState::new(train_ids.len(), d, &train_cfg.oim))
        .collect::<Result<_>>()?;
    Ok(TrainedModel {
        model_cfg: model_cfg.clone(),
        train_cfg: train_cfg.clone(),
        params,
        oim,
        train_ids,
    })
}

/// Trains on the given samples (all treated as training data).
pub fn train(train_set: &[Sample], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(TrainedModel, TrainLog)> {
    train_with_observer(train_set, model_cfg, cfg, |_| {})
}

/// As [`train`], calling `observe` after each batch.
pub fn train_with_observer(
    train_set: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&BatchRecord),
) -> Result<(TrainedModel, TrainLog)> {
    let index = IdentityIndex::new(train_set);
    if index.num_ids() < cfg.p {
        return Err(Error::Dataset(format!(
            "{} training identities, batches need p = {}",
            index.num_ids(),
            cfg.p
        )));
    }
    if train_set.iter().any(|s| s.hw() != model_cfg.backbone.input_hw) {
        return Err(Error::Shape(format!(
            "training images must be {:?}",
            model_cfg.backbone.input_hw
        )));
    }
    let mut state = init_model(model_cfg, cfg, index.ids.clone())?;
    let label_of = |id: u32| index.ids.binary_search(&id).expect("identity in index");
    let schedule = cfg.schedule();
    let mask = cfg.branch_mask;
    let groups = mask.trainable_groups();
    let batches = train_set.len().div_ceil(cfg.p * cfg.k);
    let mut adam = AdamState::<f32>::new(cfg.adam);
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut rng = seeded_rng(cfg.seed, EPOCH_STREAM + epoch as u64);
        let mut sums = [0.0f64; 6];
        for batch in 0..batches {
            let pk = pk_sample(&index, cfg.p, cfg.k, &mut rng)?;
            let mut images: Vec<Sample> = pk.indices.iter().map(|&i| train_set[i].clone()).collect();
            for s in &mut images {
                augment_in_place(&mut s.image, &cfg.augment, &mut rng);
            }
            let targets: Vec<usize> = pk.identities.iter().map(|&id| label_of(id)).collect();
            let refs: Vec<&Sample> = images.iter().collect();
            let record = train_step(&mut state, &mut adam, &groups, &stack_images(&refs)?, &targets, lr)
                .map_err(|e| match e {
                    Error::NonFinite { name } => Error::TrainingAborted {
                        epoch,
                        batch,
                        reason: format!("non-finite value in {name}"),
                    },
                    other => other,
                })?;
            let record = BatchRecord { epoch, batch, ..record };
            sums[0] += record.loss_total;
            for (i, v) in record.oim.iter().enumerate() {
                sums[1 + i] += v.unwrap_or(0.0);
            }
            sums[5] += record.trp.unwrap_or(0.0);
            observe(&record);
            log.batches.push(record);
        }
        let n = batches as f64;
        let bits = mask.bits();
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            loss_total: sums[0] / n,
            oim: std::array::from_fn(|i| bits[i].then(|| sums[1 + i] / n)),
            trp: bits[4].then(|| sums[5] / n),
        });
    }
    Ok((state, log))
}

/// One optimisation step on a prepared batch. `epoch` and `batch` in the
/// returned record are zero; the caller fills them in.
pub fn train_step(
    state: &mut TrainedModel,
    adam: &mut AdamState<f32>,
    groups: &[ParamGroup],
    images: &Tensor<f32>,
    targets: &[usize],
    lr: f64,
) -> Result<BatchRecord> {
    let mut g = Graph::<f32>::new();
    let vars = state.params.bind(&mut g, groups);
    let x = g.constant(images.clone());
    let nodes = build_loss(&mut g, &state.model_cfg, &state.train_cfg, &state.oim, &vars, x, targets)?;
    let LossNodes { total, terms, unit } = nodes;
    let loss_total = g.value(total).item() as f64;
    if !loss_total.is_finite() {
        return Err(Error::NonFinite { name: "loss".into() });
    }

    let mut grads = g.backward(total)?;
    let mut named = Vec::new();
    for &grp in groups {
        let leaves = vars.group_vars(grp);
        let mut i = 0;
        state.params.visit_group(grp, &mut |name, t| {
            let grad = grads.take(leaves[i]).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            named.push((name, grad));
            i += 1;
        });
    }
    adam.begin_step(named.iter().map(|(n, g)| (n.as_str(), g)))?;
    let mut it = named.into_iter();
    let mut result = Ok(());
    for &grp in groups {
        state.params.visit_group_mut(grp, &mut |name, t| {
            let (gname, grad) = it.next().expect("one gradient per parameter");
            debug_assert_eq!(gname, name);
            if result.is_ok() {
                result = adam.apply(name, t, &grad, lr);
            }
        });
    }
    result?;

    let value = |v: Option<Var>| v.map(|v| g.value(v).item() as f64);
    let oim_vals = std::array::from_fn(|i| value(terms[i]));
    let trp = value(terms[4]);
    for (i, u) in unit.iter().enumerate() {
        if let Some(u) = *u {
            state.oim[i].update(&rows(g.value(u)), targets)?;
        }
    }
    Ok(BatchRecord {
        epoch: 0,
        batch: 0,
        lr,
        loss_total,
        oim: oim_vals,
        trp,
    })
}

/// Loss value on a fixed batch without updating anything.
pub fn evaluate_loss(state: &TrainedModel, images: &Tensor<f32>, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let vars = state.params.bind(&mut g, &[]);
    let x = g.constant(images.clone());
    let nodes = build_loss(&mut g, &state.model_cfg, &state.train_cfg, &state.oim, &vars, x, targets)?;
    Ok(g.value(nodes.total).item() as f64)
}

/// Graph nodes of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    /// `[l_oim1, l_oim2, l_oim3, l_oim4, l_trp]`, `None` when masked.
    pub terms: [Option<Var>; 5],
    /// Unit-normalised features fed to each OIM head.
    pub unit: [Option<Var>; 4],
}

/// Forward pass plus the weighted sum of every enabled loss term.
pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    oim: &[OimState<T>],
    vars: &ModelVars,
    images: Var,
    targets: &[usize],
) -> Result<LossNodes> {
    let mask = cfg.branch_mask;
    let fw = forward(g, model_cfg, vars, images, mask.branches())?;
    let heads = [fw.f_vert, fw.f_horz, fw.f_chan, mask.b4_oim_global.then_some(fw.f_oim)];
    let mut unit: [Option<Var>; 4] = [None; 4];
    let mut terms: [Option<Var>; 5] = [None; 5];
    for (i, f) in heads.iter().enumerate() {
        if let Some(f) = *f {
            let u = g.l2_normalize(f, T::lit(NORM_EPS));
            unit[i] = Some(u);
            terms[i] = Some(oim[i].loss_graph(g, u, targets)?);
        }
    }
    if mask.b5_triplet {
        terms[4] = Some(batch_hard_triplet_graph(g, fw.f_trip, targets, T::lit(cfg.margin))?);
    }
    let total = combined_loss_graph(g, terms, &cfg.weights)?;
    Ok(LossNodes { total, terms, unit })
}

pub const EMBED_CHUNK: usize = 32;

/// Descriptors for `samples`, without augmentation. `f_oim` rows are
/// unit-normalised, `f_trip` rows are the raw pooled features.
pub fn embed(
    model_cfg: &ModelConfig,
    params: &ModelParams<f32>,
    samples: &[&Sample],
    which: Feature,
) -> Result<EmbeddingSet> {
    params.check_against(model_cfg)?;
    if samples.is_empty() {
        return Err(Error::invalid("nothing to embed"));
    }
    let mut vectors = Vec::new();
    let mut dim = 0;
    for chunk in samples.chunks(EMBED_CHUNK) {
        let images = stack_images(chunk)?;
        let mut g = Graph::<f32>::new();
        let vars = params.bind(&mut g, &[]);
        let x = g.constant(images);
        let fw = forward(&mut g, model_cfg, &vars, x, BranchSet::NONE)?;
        let out = match which {
            Feature::Oim => g.l2_normalize(fw.f_oim, NORM_EPS as f32),
            Feature::Trip => fw.f_trip,
        };
        let t = g.value(out);
        dim = t.shape()[1];
        vectors.extend(t.data().iter().map(|&v| v as f64));
    }
    EmbeddingSet::new(
        dim,
        vectors,
        samples.iter().map(|s| s.identity as i64).collect(),
        samples.iter().map(|s| s.camera as i64).collect(),
        which,
    )
}
