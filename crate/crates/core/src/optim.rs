//! Adam with L2 weight decay, and the step-then-exponential learning-rate
//! schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BASE_LR: f64 = 2e-4;
pub const WEIGHT_DECAY: f64 = 5e-4;

/// Constant `base` through `breakpoint`, then
/// `base * 0.001^((epoch - breakpoint) / decay_span)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base: f64,
    pub breakpoint: usize,
    pub decay_span: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: BASE_LR,
            breakpoint: 100,
            decay_span: 50,
        }
    }
}

impl LrSchedule {
    /// Keeps the 100/50 shape of a 150-epoch run for any length:
    /// breakpoint `floor(2/3 * epochs)`.
    pub fn scaled_to(epochs: usize, base: f64) -> Self {
        let breakpoint = epochs * 2 / 3;
        Self {
            base,
            breakpoint,
            decay_span: (epochs - breakpoint).max(1),
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch <= self.breakpoint {
            self.base
        } else {
            let frac = (epoch - self.breakpoint) as f64 / self.decay_span as f64;
            self.base * 0.001f64.powf(frac)
        }
    }
}

/// Learning rate of the 150-epoch reference schedule.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().lr(epoch)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: WEIGHT_DECAY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    /// One update over `(name, parameter, gradient)` triples. Nothing is
    /// modified if any gradient is non-finite or mis-shaped.
    pub fn step<'a, I>(&mut self, entries: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor<T>, &'a Tensor<T>)>,
    {
        let entries: Vec<_> = entries.into_iter().collect();
        for (name, p, g) in &entries {
            check_shape(name, p, g)?;
        }
        self.begin_step(entries.iter().map(|(n, _, g)| (n.as_str(), &**g)))?;
        for (name, p, g) in entries {
            self.apply(name, p, g, lr)?;
        }
        Ok(())
    }

    /// Checks every gradient of the coming step and advances the step
    /// counter. Follow with one [`AdamState::apply`] per parameter.
    pub fn begin_step<'a, I>(&mut self, grads: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
    {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { name: name.to_string() });
            }
        }
        self.t += 1;
        Ok(())
    }

    /// Updates one parameter for the current step.
    pub fn apply(&mut self, name: String, p: &mut Tensor<T>, g: &Tensor<T>, lr: f64) -> Result<()> {
        check_shape(&name, p, g)?;
        if self.t == 0 {
            return Err(Error::invalid("adam: apply() before begin_step()"));
        }
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, wd, lr) = (T::one(), T::lit(c.eps), T::lit(c.weight_decay), T::lit(lr));
        let bc1 = one - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = one - T::lit(c.beta2.powi(self.t as i32));
        let mom = self.moments.entry(name).or_insert_with(|| Moments {
            m: vec![T::zero(); p.len()],
            v: vec![T::zero(); p.len()],
        });
        for (((theta, &grad), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mom.m.iter_mut())
            .zip(mom.v.iter_mut())
        {
            let gd = grad + wd * *theta;
            *m = b1 * *m + (one - b1) * gd;
            *v = b2 * *v + (one - b2) * gd * gd;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

fn check_shape<T: Scalar>(name: &str, p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "gradient for {name} is {:?}, parameter is {:?}",
            g.shape(),
            p.shape()
        )));
    }
    Ok(())
}
