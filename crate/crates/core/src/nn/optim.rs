//! Parameter update rules.

use super::model::{GradientBundle, MlpModel};
use crate::error::{Error, Result};

/// Momentum buffer for [`sgd_step`].
#[derive(Clone, Debug, Default)]
pub struct Velocity(Option<GradientBundle>);

impl Velocity {
    pub fn new() -> Self {
        Self(None)
    }

    pub fn bundle(&self) -> Option<&GradientBundle> {
        self.0.as_ref()
    }
}

/// Plain or momentum SGD with optional global-norm gradient clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Rescale the parameter gradient to at most this L2 norm.
    pub clip: Option<f64>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            clip: None,
        }
    }

    pub fn step(&self, model: &mut MlpModel, grads: &GradientBundle, velocity: &mut Velocity) -> Result<()> {
        match self.clip {
            Some(max) => {
                if !(max > 0.0) {
                    return Err(Error::config("grad_clip", format!("must be positive, got {max}")));
                }
                let norm = grads.flat().iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    let mut scaled = grads.clone();
                    scaled.scale(max / norm);
                    return sgd_step(model, &scaled, self.lr, self.momentum, velocity);
                }
                sgd_step(model, grads, self.lr, self.momentum, velocity)
            }
            None => sgd_step(model, grads, self.lr, self.momentum, velocity),
        }
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v`.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &GradientBundle,
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::config("lr", format!("must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::config("momentum", format!("must be in [0, 1), got {momentum}")));
    }
    let mut v = match velocity.0.take() {
        Some(mut v) => {
            v.scale(momentum);
            v.add_assign(grads)?;
            v
        }
        None => {
            let mut v = GradientBundle::zeros_like(model);
            v.add_assign(grads)?;
            v
        }
    };
    v.input = None;
    model.zip_update(&v, |p, d| *p -= lr * d)?;
    velocity.0 = Some(v);
    Ok(())
}

/// Adam optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &GradientBundle) -> Result<()> {
        let g = grads.flat();
        if self.m.is_empty() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        if g.len() != self.m.len() {
            return Err(Error::Shape("gradient length changed between Adam steps".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut updates = Vec::with_capacity(g.len());
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(&g) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            updates.push(self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps));
        }
        let mut it = updates.into_iter();
        model.zip_update(grads, |p, _| *p -= it.next().expect("same layout"))
    }
}
