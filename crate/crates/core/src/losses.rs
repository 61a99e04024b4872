//! Identification and metric losses.
//!
//! [`OimState`] is the nonparametric "classifier" of the online instance
//! matching loss: a lookup table of unit identity features plus a circular
//! queue of unit features of unlabeled samples. Gradients flow into the
//! features only; the table is refreshed by [`OimState::update`] after each
//! optimizer step.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norm guard used wherever features are projected onto the unit sphere.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OimConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
}

impl Default for OimConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            momentum: 0.5,
            queue_size: 0,
        }
    }
}

impl OimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("oim temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid("oim momentum must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OimState<T> {
    /// `[L, D]`; row j is the lookup-table column `v_j`.
    lut: Tensor<T>,
    queue: VecDeque<Vec<T>>,
    queue_capacity: usize,
    temperature: T,
    momentum: T,
}

impl<T: Scalar> OimState<T> {
    /// Fresh state with never-updated (zero) columns.
    pub fn new(num_ids: usize, dim: usize, cfg: &OimConfig) -> Result<Self> {
        cfg.validate()?;
        if num_ids == 0 || dim == 0 {
            return Err(Error::invalid("oim state needs at least one identity and dimension"));
        }
        Ok(Self {
            lut: Tensor::zeros(vec![num_ids, dim]),
            queue: VecDeque::new(),
            queue_capacity: cfg.queue_size,
            temperature: T::lit(cfg.temperature),
            momentum: T::lit(cfg.momentum),
        })
    }

    /// State with explicit columns; each nonzero row is normalised.
    pub fn from_columns(columns: Tensor<T>, cfg: &OimConfig) -> Result<Self> {
        cfg.validate()?;
        if columns.ndim() != 2 {
            return Err(Error::shape("oim lookup table must be [L, D]"));
        }
        let d = columns.shape()[1];
        let mut lut = columns;
        for row in lut.data_mut().chunks_mut(d) {
            normalize_in_place(row);
        }
        Ok(Self {
            lut,
            queue: VecDeque::new(),
            queue_capacity: cfg.queue_size,
            temperature: T::lit(cfg.temperature),
            momentum: T::lit(cfg.momentum),
        })
    }

    pub fn num_ids(&self) -> usize {
        self.lut.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.lut.shape()[1]
    }

    pub fn lut(&self) -> &Tensor<T> {
        &self.lut
    }

    pub fn column(&self, j: usize) -> &[T] {
        self.lut.row(j)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn queue_capacity(&self) -> usize {
        self.queue_capacity
    }

    pub fn queue_entries(&self) -> impl Iterator<Item = &[T]> {
        self.queue.iter().map(|v| v.as_slice())
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn config(&self) -> OimConfig {
        OimConfig {
            temperature: self.temperature.as_f64(),
            momentum: self.momentum.as_f64(),
            queue_size: self.queue_capacity,
        }
    }

    /// Replaces the whole table (checkpoint restore).
    pub fn set_lut(&mut self, lut: Tensor<T>) -> Result<()> {
        if lut.shape() != self.lut.shape() {
            return Err(Error::Shape(format!(
                "lookup table {:?} does not match {:?}",
                lut.shape(),
                self.lut.shape()
            )));
        }
        self.lut = lut;
        Ok(())
    }

    /// Replaces the queue contents verbatim, oldest first (checkpoint restore).
    pub fn set_queue(&mut self, entries: Vec<Vec<T>>) -> Result<()> {
        if entries.len() > self.queue_capacity {
            return Err(Error::invalid(format!(
                "{} queue entries exceed capacity {}",
                entries.len(),
                self.queue_capacity
            )));
        }
        if entries.iter().any(|e| e.len() != self.dim()) {
            return Err(Error::shape("oim queue entry has wrong dimension"));
        }
        self.queue = entries.into();
        Ok(())
    }

    /// `[D, L + Q_used]` matrix whose columns are the table then the queue.
    fn scoring_matrix(&self) -> Tensor<T> {
        let (l, d) = (self.num_ids(), self.dim());
        let cols = l + self.queue.len();
        let mut m = vec![T::zero(); d * cols];
        for j in 0..l {
            for (k, &v) in self.lut.row(j).iter().enumerate() {
                m[k * cols + j] = v;
            }
        }
        for (q, entry) in self.queue.iter().enumerate() {
            for (k, &v) in entry.iter().enumerate() {
                m[k * cols + l + q] = v;
            }
        }
        Tensor::new(vec![d, cols], m).expect("scoring matrix shape")
    }

    fn check_feature(&self, f: &[T]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(Error::Shape(format!(
                "oim feature has {} entries, state expects {}",
                f.len(),
                self.dim()
            )));
        }
        let n = f.iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::invalid(format!(
                "oim feature norm {n:.6} is not 1; normalise before scoring"
            )));
        }
        Ok(())
    }

    /// Logits `M^T [v_1..v_L, mu_1..mu_Q]` for `[B, D]` unit features, before
    /// temperature scaling. The state enters as a constant.
    pub fn logits(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let m = g.constant(self.scoring_matrix());
        g.matmul(features, m)
    }

    /// Table probabilities `p` and queue probabilities `r` sharing one
    /// denominator.
    pub fn probabilities(&self, feature: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.check_feature(feature.data())?;
        let mut g = Graph::new();
        let f = g.constant(feature.clone());
        let z = self.logits(&mut g, f)?;
        let p = g.softmax(z, self.temperature);
        let all = g.value(p).data();
        let l = self.num_ids();
        let table = Tensor::vector(all[..l].to_vec())?;
        let queue = (!self.queue.is_empty()).then(|| Tensor::vector(all[l..].to_vec())).transpose()?;
        Ok((table, queue))
    }

    /// `-mean log p_target` as a graph node; `features` is `[B, D]` and unit-norm.
    pub fn loss_graph(&self, g: &mut Graph<T>, features: Var, targets: &[usize]) -> Result<Var> {
        let b = match *g.shape(features) {
            [b, d] if d == self.dim() => b,
            ref s => {
                return Err(Error::Shape(format!(
                    "oim features must be [B, {}], got {s:?}",
                    self.dim()
                )))
            }
        };
        if targets.len() != b {
            return Err(Error::Shape(format!("{} targets for {b} features", targets.len())));
        }
        let l = self.num_ids();
        if let Some(&t) = targets.iter().find(|&&t| t >= l) {
            return Err(Error::invalid(format!("target {t} out of range for {l} identities")));
        }
        let z = self.logits(g, features)?;
        let lp = g.log_softmax(z, self.temperature);
        let cols = l + self.queue.len();
        let picks: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * cols + t).collect();
        let chosen = g.gather(lp, &picks)?;
        let m = g.mean(chosen);
        Ok(g.scale(m, -T::one()))
    }

    /// Value-level loss over a batch of unit features. Does not mutate state.
    pub fn loss(&self, features: &[Tensor<T>], targets: &[usize]) -> Result<T> {
        for f in features {
            self.check_feature(f.data())?;
        }
        let stacked = stack_rows(features)?;
        let mut g = Graph::new();
        let f = g.constant(stacked);
        let v = self.loss_graph(&mut g, f, targets)?;
        Ok(g.value(v).item())
    }

    /// `v_t <- normalize(momentum * v_t + (1 - momentum) * f)` per labeled sample,
    /// applied in batch order.
    pub fn update(&mut self, features: &[Tensor<T>], targets: &[usize]) -> Result<()> {
        if features.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} features for {} targets",
                features.len(),
                targets.len()
            )));
        }
        let (l, d) = (self.num_ids(), self.dim());
        let (gamma, keep) = (self.momentum, T::one() - self.momentum);
        for (f, &t) in features.iter().zip(targets) {
            if t >= l || f.len() != d {
                return Err(Error::invalid(format!("oim update: target {t} or dim {} invalid", f.len())));
            }
            let row = &mut self.lut.data_mut()[t * d..(t + 1) * d];
            for (v, &x) in row.iter_mut().zip(f.data()) {
                *v = gamma * *v + keep * x;
            }
            normalize_in_place(row);
        }
        Ok(())
    }

    /// Pushes unit features of identity-less samples, evicting the oldest
    /// entries beyond the queue capacity.
    pub fn push_unlabeled(&mut self, features: &[Tensor<T>]) -> Result<()> {
        for f in features {
            if f.len() != self.dim() {
                return Err(Error::shape("oim queue entry has wrong dimension"));
            }
            if self.queue_capacity == 0 {
                continue;
            }
            let mut v = f.data().to_vec();
            normalize_in_place(&mut v);
            self.queue.push_back(v);
            while self.queue.len() > self.queue_capacity {
                self.queue.pop_front();
            }
        }
        Ok(())
    }
}

fn normalize_in_place<T: Scalar>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(NORM_EPS));
    v.iter_mut().for_each(|x| *x /= n);
}

/// Unit-sphere projection `v / max(|v|, eps)`.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>, eps: T) -> Tensor<T> {
    let n = v.norm().max(eps);
    v.map(|x| x / n)
}

pub(crate) fn stack_rows<T: Scalar>(rows: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("empty batch"));
    };
    let d = first.len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::shape("rows of different lengths"));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Hardest positive and negative (by index) for every anchor, first index
/// winning ties. `dist` is row-major `[B, B]`.
pub fn hardest_pairs<T: Scalar>(dist: &[T], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    if dist.len() != b * b {
        return Err(Error::shape("distance matrix does not match labels"));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("batch-hard triplet needs at least two identities"));
    }
    (0..b)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                let d = dist[a * b + j];
                if labels[j] == labels[a] {
                    if j != a && pos.is_none_or(|p| d > dist[a * b + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| d < dist[a * b + n]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(n)) => Ok((p, n)),
                _ => Err(Error::invalid(format!(
                    "identity {} has a single sample in the batch",
                    labels[a]
                ))),
            }
        })
        .collect()
}

/// Mean over anchors of `[margin + max d(a, p) - min d(a, n)]_+` on raw
/// Euclidean distances of `[B, D]` embeddings.
pub fn batch_hard_triplet_graph<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    labels: &[usize],
    margin: T,
) -> Result<Var> {
    let b = g.shape(embeddings)[0];
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    let dist = g.pairwise_distance(embeddings, embeddings)?;
    let pairs = hardest_pairs(g.value(dist).data(), labels)?;
    let pos: Vec<usize> = pairs.iter().enumerate().map(|(a, &(p, _))| a * b + p).collect();
    let neg: Vec<usize> = pairs.iter().enumerate().map(|(a, &(_, n))| a * b + n).collect();
    let dp = g.gather(dist, &pos)?;
    let dn = g.gather(dist, &neg)?;
    let gap = g.sub(dp, dn)?;
    let shifted = g.add_scalar(gap, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

pub fn batch_hard_triplet<T: Scalar>(embeddings: &[Tensor<T>], labels: &[usize], margin: T) -> Result<T> {
    let stacked = stack_rows(embeddings)?;
    let mut g = Graph::new();
    let e = g.constant(stacked);
    let v = batch_hard_triplet_graph(&mut g, e, labels, margin)?;
    Ok(g.value(v).item())
}

/// Trade-off weights `[l_oim1, l_oim2, l_oim3, l_oim4, l_trp]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights(pub [f64; 5]);

impl Default for LossWeights {
    fn default() -> Self {
        Self([1.0; 5])
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

pub fn combined_loss<T: Scalar>(oim: [T; 4], trp: T, weights: &LossWeights) -> T {
    let terms = [oim[0], oim[1], oim[2], oim[3], trp];
    terms
        .iter()
        .zip(weights.0)
        .map(|(&l, w)| T::lit(w) * l)
        .fold(T::zero(), |a, b| a + b)
}

/// Weighted sum of whichever terms are present.
pub fn combined_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    terms: [Option<Var>; 5],
    weights: &LossWeights,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (term, w) in terms.into_iter().zip(weights.0) {
        let Some(v) = term else { continue };
        let scaled = g.scale(v, T::lit(w));
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| Error::invalid("no loss term enabled"))
}
