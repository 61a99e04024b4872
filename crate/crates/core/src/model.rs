//! The five-branch network: a stride-preserving CNN backbone producing a
//! 16x8 grid, vertical and horizontal part sequences and a channel sequence
//! each summarised by a BiGRU, and a global head producing `f_trip`
//! (pooled) and `f_oim` (fully connected).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gru::{bigru_forward, BiGruStack, BiGruVars, GruCellVars, Readout};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial grid every backbone must produce.
pub const GRID_H: usize = 16;
pub const GRID_W: usize = 8;
/// Length of a flattened channel map, `GRID_H * GRID_W`.
pub const CHANNEL_VECTOR_LEN: usize = GRID_H * GRID_W;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// `[height, width]` in pixels.
    pub input_hw: [usize; 2],
    pub stage_channels: Vec<usize>,
    /// One stride per stage; the last must be 1.
    pub stage_strides: Vec<usize>,
    /// Odd square kernel size per stage, padded to keep "same" geometry.
    pub stage_kernels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_hw: [64, 32],
            stage_channels: vec![16, 32, 32],
            stage_strides: vec![2, 2, 1],
            stage_kernels: vec![5, 5, 3],
        }
    }
}

impl BackboneConfig {
    /// Full-resolution layout: 256x128 input onto a 16x8x2048 grid.
    pub fn reference_scale() -> Self {
        Self {
            input_hw: [256, 128],
            stage_channels: vec![64, 256, 1024, 2048],
            stage_strides: vec![2, 4, 2, 1],
            stage_kernels: vec![3, 3, 3, 3],
        }
    }

    /// `(channels, stride, kernel)` per stage.
    pub fn stages(&self) -> impl Iterator<Item = (&usize, &usize, &usize)> {
        self.stage_channels
            .iter()
            .zip(&self.stage_strides)
            .zip(&self.stage_kernels)
            .map(|((c, s), k)| (c, s, k))
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    /// `(height, width, channels)` of the backbone output.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (self.input_hw[0], self.input_hw[1]);
        for (&s, &k) in self.stage_strides.iter().zip(&self.stage_kernels) {
            let p = k / 2;
            if s == 0 || h + 2 * p < k || w + 2 * p < k {
                return Err(Error::invalid("backbone stage cannot be applied"));
            }
            h = (h + 2 * p - k) / s + 1;
            w = (w + 2 * p - k) / s + 1;
        }
        Ok((h, w, self.out_channels()))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.stage_strides.len() != n || self.stage_kernels.len() != n {
            return Err(Error::invalid(
                "backbone: stage_channels, stage_strides and stage_kernels must be non-empty and equally long",
            ));
        }
        if self.stage_channels.contains(&0) || self.stage_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid("backbone: channels must be positive, kernels odd"));
        }
        if self.stage_strides.last() != Some(&1) {
            return Err(Error::invalid("backbone: final stage stride must be 1"));
        }
        let (h, w, _) = self.output_shape()?;
        if (h, w) != (GRID_H, GRID_W) {
            return Err(Error::invalid(format!(
                "backbone maps {:?} to {h}x{w}, need {GRID_H}x{GRID_W}",
                self.input_hw
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Hidden size of the vertical and horizontal BiGRUs.
    pub part_hidden: usize,
    /// Hidden size of the channel BiGRU.
    pub channel_hidden: usize,
    pub gru_layers: usize,
    /// Width of the fully connected global feature `f_oim`.
    pub oim_dim: usize,
    pub readout: Readout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            part_hidden: 32,
            channel_hidden: 16,
            gru_layers: 3,
            oim_dim: 64,
            readout: Readout::FinalStates,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.part_hidden == 0 || self.channel_hidden == 0 || self.gru_layers == 0 || self.oim_dim == 0 {
            return Err(Error::invalid("model: hidden sizes, gru_layers and oim_dim must be positive"));
        }
        Ok(())
    }

    pub fn descriptor_dims(&self) -> DescriptorDims {
        DescriptorDims {
            vert: 2 * self.part_hidden,
            horz: 2 * self.part_hidden,
            chan: 2 * self.channel_hidden,
            trip: self.backbone.out_channels(),
            oim: self.oim_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DescriptorDims {
    pub vert: usize,
    pub horz: usize,
    pub chan: usize,
    pub trip: usize,
    pub oim: usize,
}

/// Trainable parameter groups, one per independently maskable component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Vertical,
    Horizontal,
    Channel,
    GlobalFc,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Vertical,
        ParamGroup::Horizontal,
        ParamGroup::Channel,
        ParamGroup::GlobalFc,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Vertical => "vert",
            ParamGroup::Horizontal => "horz",
            ParamGroup::Channel => "chan",
            ParamGroup::GlobalFc => "fc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub backbone: Vec<ConvStage<T>>,
    pub vert: BiGruStack<T>,
    pub horz: BiGruStack<T>,
    pub chan: BiGruStack<T>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 3;
        let mut backbone = Vec::new();
        for (&c_out, &stride, &k) in cfg.backbone.stages() {
            let bound = (6.0 / (k * k * c_in) as f64).sqrt();
            let kernel = Tensor::from_fn(vec![k, k, c_in, c_out], |_| T::lit(rng.gen_range(-bound..bound)));
            backbone.push(ConvStage {
                kernel,
                bias: Tensor::zeros(vec![c_out]),
                stride,
            });
            c_in = c_out;
        }
        let c = cfg.backbone.out_channels();
        let vert = BiGruStack::init(c, cfg.part_hidden, cfg.gru_layers, rng);
        let horz = BiGruStack::init(c, cfg.part_hidden, cfg.gru_layers, rng);
        let chan = BiGruStack::init(CHANNEL_VECTOR_LEN, cfg.channel_hidden, cfg.gru_layers, rng);
        let bound = 1.0 / (c as f64).sqrt();
        let fc_weight = Tensor::from_fn(vec![c, cfg.oim_dim], |_| T::lit(rng.gen_range(-bound..bound)));
        Ok(Self {
            backbone,
            vert,
            horz,
            chan,
            fc_weight,
            fc_bias: Tensor::zeros(vec![cfg.oim_dim]),
        })
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let reference = ModelParams::<T>::zeros(cfg)?;
        let mine = self.named("");
        let theirs = reference.named("");
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "parameter count {} does not match config ({})",
                mine.len(),
                theirs.len()
            )));
        }
        for ((n, t), (rn, rt)) in mine.iter().zip(&theirs) {
            if n != rn || t.shape() != rt.shape() {
                return Err(Error::Shape(format!(
                    "parameter {n} {:?} does not match config {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 3;
        let mut backbone = Vec::new();
        for (&c_out, &stride, &k) in cfg.backbone.stages() {
            backbone.push(ConvStage {
                kernel: Tensor::zeros(vec![k, k, c_in, c_out]),
                bias: Tensor::zeros(vec![c_out]),
                stride,
            });
            c_in = c_out;
        }
        let c = cfg.backbone.out_channels();
        Ok(Self {
            backbone,
            vert: BiGruStack::zeros(c, cfg.part_hidden, cfg.gru_layers),
            horz: BiGruStack::zeros(c, cfg.part_hidden, cfg.gru_layers),
            chan: BiGruStack::zeros(CHANNEL_VECTOR_LEN, cfg.channel_hidden, cfg.gru_layers),
            fc_weight: Tensor::zeros(vec![c, cfg.oim_dim]),
            fc_bias: Tensor::zeros(vec![cfg.oim_dim]),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let stack = |s: &BiGruStack<T>| {
            let mut out = BiGruStack::<U>::zeros(s.input_dim(), s.hidden_dim(), s.num_layers());
            let src = s.named("");
            let mut i = 0;
            out.visit_mut("", &mut |_, t| {
                *t = src[i].1.cast();
                i += 1;
            });
            out
        };
        ModelParams {
            backbone: self
                .backbone
                .iter()
                .map(|s| ConvStage {
                    kernel: s.kernel.cast(),
                    bias: s.bias.cast(),
                    stride: s.stride,
                })
                .collect(),
            vert: stack(&self.vert),
            horz: stack(&self.horz),
            chan: stack(&self.chan),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
        }
    }

    pub fn visit_group<'a>(&'a self, group: ParamGroup, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        let p = group.prefix();
        match group {
            ParamGroup::Backbone => {
                for (i, s) in self.backbone.iter().enumerate() {
                    f(format!("{p}.s{i}.kernel"), &s.kernel);
                    f(format!("{p}.s{i}.bias"), &s.bias);
                }
            }
            ParamGroup::Vertical => self.vert.visit(p, f),
            ParamGroup::Horizontal => self.horz.visit(p, f),
            ParamGroup::Channel => self.chan.visit(p, f),
            ParamGroup::GlobalFc => {
                f(format!("{p}.weight"), &self.fc_weight);
                f(format!("{p}.bias"), &self.fc_bias);
            }
        }
    }

    pub fn visit_group_mut(&mut self, group: ParamGroup, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let p = group.prefix();
        match group {
            ParamGroup::Backbone => {
                for (i, s) in self.backbone.iter_mut().enumerate() {
                    f(format!("{p}.s{i}.kernel"), &mut s.kernel);
                    f(format!("{p}.s{i}.bias"), &mut s.bias);
                }
            }
            ParamGroup::Vertical => self.vert.visit_mut(p, f),
            ParamGroup::Horizontal => self.horz.visit_mut(p, f),
            ParamGroup::Channel => self.chan.visit_mut(p, f),
            ParamGroup::GlobalFc => {
                f(format!("{p}.weight"), &mut self.fc_weight);
                f(format!("{p}.bias"), &mut self.fc_bias);
            }
        }
    }

    /// Binds parameters into `g`; groups in `trainable` become gradient leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: &[ParamGroup]) -> ModelVars {
        let is = |grp| trainable.contains(&grp);
        let leaf = |g: &mut Graph<T>, t: &Tensor<T>, on: bool| {
            if on {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let bb = is(ParamGroup::Backbone);
        let backbone = self
            .backbone
            .iter()
            .map(|s| (leaf(g, &s.kernel, bb), leaf(g, &s.bias, bb), s.stride))
            .collect();
        let fc = is(ParamGroup::GlobalFc);
        ModelVars {
            backbone,
            vert: self.vert.bind(g, is(ParamGroup::Vertical)),
            horz: self.horz.bind(g, is(ParamGroup::Horizontal)),
            chan: self.chan.bind(g, is(ParamGroup::Channel)),
            fc_weight: leaf(g, &self.fc_weight, fc),
            fc_bias: leaf(g, &self.fc_bias, fc),
        }
    }
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for grp in ParamGroup::ALL {
            self.visit_group(grp, &mut |n, t| {
                f(if prefix.is_empty() { n } else { format!("{prefix}.{n}") }, t)
            });
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for grp in ParamGroup::ALL {
            self.visit_group_mut(grp, &mut |n, t| {
                f(if prefix.is_empty() { n } else { format!("{prefix}.{n}") }, t)
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: Vec<(Var, Var, usize)>,
    pub vert: BiGruVars,
    pub horz: BiGruVars,
    pub chan: BiGruVars,
    pub fc_weight: Var,
    pub fc_bias: Var,
}

impl ModelVars {
    /// Rebuilds the variable layout from leaves given in the order of
    /// [`Parameters::visit`] over `params`.
    pub fn from_leaves<T: Scalar>(params: &ModelParams<T>, leaves: &[Var]) -> Result<Self> {
        let expected = params.named("").len();
        if leaves.len() != expected {
            return Err(Error::invalid(format!("{} leaves for {expected} parameters", leaves.len())));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("length checked");
        let backbone = params.backbone.iter().map(|s| (next(), next(), s.stride)).collect();
        let mut stack = |st: &BiGruStack<T>| BiGruVars {
            layers: st
                .layers
                .iter()
                .map(|l| (cell_from(&mut next, l.forward.hidden_dim()), cell_from(&mut next, l.backward.hidden_dim())))
                .collect(),
        };
        let vert = stack(&params.vert);
        let horz = stack(&params.horz);
        let chan = stack(&params.chan);
        Ok(Self {
            backbone,
            vert,
            horz,
            chan,
            fc_weight: next(),
            fc_bias: next(),
        })
    }

    /// Leaves of one group, in the order of [`ModelParams::visit_group`].
    pub fn group_vars(&self, group: ParamGroup) -> Vec<Var> {
        match group {
            ParamGroup::Backbone => self.backbone.iter().flat_map(|&(k, b, _)| [k, b]).collect(),
            ParamGroup::Vertical => self.vert.all(),
            ParamGroup::Horizontal => self.horz.all(),
            ParamGroup::Channel => self.chan.all(),
            ParamGroup::GlobalFc => vec![self.fc_weight, self.fc_bias],
        }
    }
}

fn cell_from(next: &mut impl FnMut() -> Var, hidden_dim: usize) -> GruCellVars {
    GruCellVars {
        w_z: next(),
        w_r: next(),
        w_h: next(),
        u_z: next(),
        u_r: next(),
        u_h: next(),
        b_z: next(),
        b_r: next(),
        b_h: next(),
        hidden_dim,
    }
}

/// Which sequence branches to evaluate; the global head always runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSet {
    pub vertical: bool,
    pub horizontal: bool,
    pub channel: bool,
}

impl BranchSet {
    pub const ALL: BranchSet = BranchSet {
        vertical: true,
        horizontal: true,
        channel: true,
    };
    pub const NONE: BranchSet = BranchSet {
        vertical: false,
        horizontal: false,
        channel: false,
    };
}

/// The five descriptors of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs<V> {
    pub f_vert: V,
    pub f_horz: V,
    pub f_chan: V,
    pub f_trip: V,
    pub f_oim: V,
}

/// Graph nodes of a (possibly partial) forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub featmap: Var,
    pub f_vert: Option<Var>,
    pub f_horz: Option<Var>,
    pub f_chan: Option<Var>,
    pub f_trip: Var,
    pub f_oim: Var,
}

/// `[N, H, W, 3]` (or `[H, W, 3]`) images to the `[.., 16, 8, C]` grid.
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    vars: &ModelVars,
    images: Var,
) -> Result<Var> {
    let shape = g.shape(images).to_vec();
    let hw3 = &shape[shape.len().saturating_sub(3)..];
    if !(shape.len() == 3 || shape.len() == 4) || hw3 != [cfg.input_hw[0], cfg.input_hw[1], 3] {
        return Err(Error::Shape(format!(
            "backbone expects {}x{}x3 images, got {shape:?}",
            cfg.input_hw[0], cfg.input_hw[1]
        )));
    }
    let mut x = images;
    for &(kernel, bias, stride) in &vars.backbone {
        let p = g.shape(kernel)[0] / 2;
        let c = g.conv2d(x, kernel, (stride, stride), (p, p))?;
        let b = g.add_bias(c, bias)?;
        x = g.relu(b);
    }
    Ok(x)
}

fn grid_dims<T: Scalar>(g: &Graph<T>, featmap: Var) -> Result<(Option<usize>, usize)> {
    match *g.shape(featmap) {
        [GRID_H, GRID_W, c] => Ok((None, c)),
        [n, GRID_H, GRID_W, c] => Ok((Some(n), c)),
        ref s => Err(Error::Shape(format!(
            "feature map must be {GRID_H}x{GRID_W}xC (optionally batched), got {s:?}"
        ))),
    }
}

/// Row means, top to bottom: 16 vectors of `[.., C]`.
pub fn vertical_sequence<T: Scalar>(g: &mut Graph<T>, featmap: Var) -> Result<Vec<Var>> {
    let (n, c) = grid_dims(g, featmap)?;
    let pooled = g.avg_pool2d(featmap, (1, GRID_W))?;
    let (flat, axis): (Vec<usize>, usize) = match n {
        Some(n) => (vec![n, GRID_H, c], 1),
        None => (vec![GRID_H, c], 0),
    };
    let rows = g.reshape(pooled, &flat)?;
    (0..GRID_H).map(|i| g.select(rows, axis, i)).collect()
}

/// Column means, left to right: 8 vectors of `[.., C]`.
pub fn horizontal_sequence<T: Scalar>(g: &mut Graph<T>, featmap: Var) -> Result<Vec<Var>> {
    let (n, c) = grid_dims(g, featmap)?;
    let pooled = g.avg_pool2d(featmap, (GRID_H, 1))?;
    let (flat, axis): (Vec<usize>, usize) = match n {
        Some(n) => (vec![n, GRID_W, c], 1),
        None => (vec![GRID_W, c], 0),
    };
    let cols = g.reshape(pooled, &flat)?;
    (0..GRID_W).map(|j| g.select(cols, axis, j)).collect()
}

/// Each channel's 16x8 map flattened row-major: C vectors of `[.., 128]`.
pub fn channel_sequence<T: Scalar>(g: &mut Graph<T>, featmap: Var) -> Result<Vec<Var>> {
    let (n, c) = grid_dims(g, featmap)?;
    let (perm, flat, axis): (Vec<usize>, Vec<usize>, usize) = match n {
        Some(n) => (vec![0, 3, 1, 2], vec![n, c, CHANNEL_VECTOR_LEN], 1),
        None => (vec![2, 0, 1], vec![c, CHANNEL_VECTOR_LEN], 0),
    };
    let moved = g.permute(featmap, &perm)?;
    let chans = g.reshape(moved, &flat)?;
    (0..c).map(|k| g.select(chans, axis, k)).collect()
}

fn run_branch<T: Scalar>(
    g: &mut Graph<T>,
    stack: &BiGruVars,
    seq: &[Var],
    readout: Readout,
) -> Result<Var> {
    let out = bigru_forward(g, stack, seq)?;
    out.readout(g, readout)
}

/// Forward pass evaluating the selected sequence branches plus the global head.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    images: Var,
    branches: BranchSet,
) -> Result<ForwardVars> {
    let featmap = backbone_forward(g, &cfg.backbone, vars, images)?;
    let f_vert = if branches.vertical {
        let seq = vertical_sequence(g, featmap)?;
        Some(run_branch(g, &vars.vert, &seq, cfg.readout)?)
    } else {
        None
    };
    let f_horz = if branches.horizontal {
        let seq = horizontal_sequence(g, featmap)?;
        Some(run_branch(g, &vars.horz, &seq, cfg.readout)?)
    } else {
        None
    };
    let f_chan = if branches.channel {
        let seq = channel_sequence(g, featmap)?;
        Some(run_branch(g, &vars.chan, &seq, cfg.readout)?)
    } else {
        None
    };
    let f_trip = g.global_avg_pool(featmap)?;
    let f_oim = g.dense(f_trip, vars.fc_weight, vars.fc_bias)?;
    Ok(ForwardVars {
        featmap,
        f_vert,
        f_horz,
        f_chan,
        f_trip,
        f_oim,
    })
}

/// Evaluates all five descriptors for one image or a batch.
pub fn forward_all<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    images: &Tensor<T>,
) -> Result<BranchOutputs<Tensor<T>>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, &[]);
    let x = g.constant(images.clone());
    let f = forward(&mut g, cfg, &vars, x, BranchSet::ALL)?;
    let get = |v: Option<Var>| g.value(v.expect("all branches evaluated")).clone();
    Ok(BranchOutputs {
        f_vert: get(f.f_vert),
        f_horz: get(f.f_horz),
        f_chan: get(f.f_chan),
        f_trip: g.value(f.f_trip).clone(),
        f_oim: g.value(f.f_oim).clone(),
    })
}

fn run_sequence_op<T: Scalar>(
    featmap: &Tensor<T>,
    op: fn(&mut Graph<T>, Var) -> Result<Vec<Var>>,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let x = g.constant(featmap.clone());
    let seq = op(&mut g, x)?;
    Ok(seq.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Value-level helpers over a single `[16, 8, C]` map (or a batch).
pub mod sequences {
    use super::*;

    pub fn vertical<T: Scalar>(featmap: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        run_sequence_op(featmap, vertical_sequence::<T>)
    }

    pub fn horizontal<T: Scalar>(featmap: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        run_sequence_op(featmap, horizontal_sequence::<T>)
    }

    pub fn channel<T: Scalar>(featmap: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        run_sequence_op(featmap, channel_sequence::<T>)
    }

    /// Inverse of [`channel`] for an unbatched map.
    pub fn unflatten_channels<T: Scalar>(seq: &[Tensor<T>]) -> Result<Tensor<T>> {
        let c = seq.len();
        let mut data = vec![T::zero(); CHANNEL_VECTOR_LEN * c];
        for (k, v) in seq.iter().enumerate() {
            if v.len() != CHANNEL_VECTOR_LEN {
                return Err(Error::Shape(format!(
                    "channel vector {k} has {} entries, need {CHANNEL_VECTOR_LEN}",
                    v.len()
                )));
            }
            for (p, &x) in v.data().iter().enumerate() {
                data[p * c + k] = x;
            }
        }
        Tensor::new(vec![GRID_H, GRID_W, c], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_scale_grid() {
        let cfg = BackboneConfig::reference_scale();
        assert_eq!(cfg.output_shape().unwrap(), (16, 8, 2048));
        cfg.validate().unwrap();
    }

    #[test]
    fn desk_default_grid() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.output_shape().unwrap(), (16, 8, 32));
        assert_eq!(cfg.stage_strides.last(), Some(&1));
    }

    #[test]
    fn final_stride_must_be_one() {
        let cfg = BackboneConfig {
            input_hw: [64, 32],
            stage_strides: vec![2, 1, 2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn descriptor_dims_reference_hidden_sizes() {
        let cfg = ModelConfig {
            part_hidden: 256,
            channel_hidden: 128,
            ..Default::default()
        };
        let d = cfg.descriptor_dims();
        assert_eq!((d.vert, d.horz, d.chan), (512, 512, 256));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let img = Tensor::<f32>::zeros(vec![32, 32, 3]);
        assert!(matches!(forward_all(&cfg, &p, &img), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_image_gives_nonnegative_finite_grid() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, &[]);
        let x = g.constant(Tensor::zeros(vec![64, 32, 3]));
        let fm = backbone_forward(&mut g, &cfg.backbone, &vars, x).unwrap();
        assert_eq!(g.shape(fm), &[16, 8, 32]);
        assert!(g.value(fm).data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn sequence_examples() {
        let c = 3;
        let rows = Tensor::<f64>::from_fn(vec![16, 8, c], |i| (i / (8 * c)) as f64);
        let v = sequences::vertical(&rows).unwrap();
        assert_eq!(v.len(), 16);
        for (i, t) in v.iter().enumerate() {
            assert!(t.data().iter().all(|&x| x == i as f64));
        }
        let cols = Tensor::<f64>::from_fn(vec![16, 8, c], |i| ((i / c) % 8) as f64);
        let h = sequences::horizontal(&cols).unwrap();
        assert_eq!(h.len(), 8);
        for (j, t) in h.iter().enumerate() {
            assert!(t.data().iter().all(|&x| x == j as f64));
        }
        let constant = Tensor::<f64>::full(vec![16, 8, c], 0.25);
        assert!(sequences::vertical(&constant).unwrap().iter().all(|t| t.data().iter().all(|&x| x == 0.25)));
        assert!(sequences::horizontal(&constant).unwrap().iter().all(|t| t.data().iter().all(|&x| x == 0.25)));
    }

    #[test]
    fn channel_sequence_roundtrip() {
        let fm = Tensor::<f64>::from_fn(vec![16, 8, 5], |i| (i as f64).sin());
        let seq = sequences::channel(&fm).unwrap();
        assert_eq!(seq.len(), 5);
        assert!(seq.iter().all(|s| s.shape() == [128]));
        assert_eq!(seq[2].data()[0], fm.data()[2]);
        assert_eq!(seq[2].data()[1], fm.data()[5 + 2]);
        assert_eq!(sequences::unflatten_channels(&seq).unwrap(), fm);
    }

    #[test]
    fn channel_sequence_needs_grid() {
        let fm = Tensor::<f64>::zeros(vec![8, 8, 4]);
        assert!(sequences::channel(&fm).is_err());
    }

    #[test]
    fn forward_dims_desk_default() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let img = Tensor::<f32>::from_fn(vec![64, 32, 3], |i| ((i * 7919) % 101) as f32 / 101.0);
        let out = forward_all(&cfg, &p, &img).unwrap();
        assert_eq!(out.f_vert.shape(), &[64]);
        assert_eq!(out.f_horz.shape(), &[64]);
        assert_eq!(out.f_chan.shape(), &[32]);
        assert_eq!(out.f_trip.shape(), &[32]);
        assert_eq!(out.f_oim.shape(), &[64]);
        assert_eq!(out, forward_all(&cfg, &p, &img).unwrap());
    }

    #[test]
    fn check_against_detects_mismatch() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        p.check_against(&cfg).unwrap();
        let other = ModelConfig {
            oim_dim: 16,
            ..Default::default()
        };
        assert!(p.check_against(&other).is_err());
    }
}
