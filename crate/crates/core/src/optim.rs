//! SGD and the gradient clip policies that bound the new-data (`alpha`) and
//! memory (`beta`) updates.

use serde::{Deserialize, Serialize};

use crate::model::{Gradients, MlpModel};
use crate::{Error, Result};

/// How a step's gradient is limited before it is applied.
///
/// `GlobalL2Norm` rescales the joint gradient of all parameters so its norm is
/// at most `threshold`, keeping its direction. `ElementClamp` clamps every
/// entry into `[-threshold, threshold]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ClipPolicy {
    #[default]
    None,
    GlobalL2Norm {
        threshold: f64,
    },
    ElementClamp {
        threshold: f64,
    },
}

impl ClipPolicy {
    pub fn global_norm(threshold: f64) -> Result<Self> {
        Self::check(threshold)?;
        Ok(Self::GlobalL2Norm { threshold })
    }

    pub fn element_clamp(threshold: f64) -> Result<Self> {
        Self::check(threshold)?;
        Ok(Self::ElementClamp { threshold })
    }

    fn check(threshold: f64) -> Result<()> {
        if threshold > 0.0 && threshold.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "clip threshold must be positive and finite, got {threshold}"
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ClipPolicy::None => Ok(()),
            ClipPolicy::GlobalL2Norm { threshold } | ClipPolicy::ElementClamp { threshold } => {
                Self::check(threshold)
            }
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match *self {
            ClipPolicy::None => None,
            ClipPolicy::GlobalL2Norm { threshold } | ClipPolicy::ElementClamp { threshold } => {
                Some(threshold)
            }
        }
    }

    /// Short label used in reports: `none`, `norm0.5`, `clamp0.1`.
    pub fn label(&self) -> String {
        match *self {
            ClipPolicy::None => "none".into(),
            ClipPolicy::GlobalL2Norm { threshold } => format!("norm{threshold}"),
            ClipPolicy::ElementClamp { threshold } => format!("clamp{threshold}"),
        }
    }
}

/// Applies `policy` in place.
pub fn clip_in_place(grads: &mut Gradients, policy: &ClipPolicy) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    match *policy {
        ClipPolicy::None => {}
        ClipPolicy::GlobalL2Norm { threshold } => {
            let norm = grads.norm();
            if norm > threshold {
                grads.scale(threshold / norm);
            }
        }
        ClipPolicy::ElementClamp { threshold } => {
            for s in grads.slices_mut() {
                s.iter_mut()
                    .for_each(|g| *g = g.clamp(-threshold, threshold));
            }
        }
    }
    Ok(())
}

pub fn clip(grads: &Gradients, policy: &ClipPolicy) -> Result<Gradients> {
    let mut out = grads.clone();
    clip_in_place(&mut out, policy)?;
    Ok(out)
}

/// Plain or heavy-ball SGD. One state serves both the new-data and memory steps.
#[derive(Debug, Clone)]
pub struct SgdState {
    lr: f64,
    momentum: f64,
    velocity: Option<Gradients>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> Option<&Gradients> {
        self.velocity.as_ref()
    }

    /// `w -= lr * g`, or with momentum `v = m * v + g; w -= lr * v`.
    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        if !grads.matches(model) {
            return Err(Error::Shape {
                op: "sgd_step",
                left: (grads.d_weights.len(), grads.d_biases.len()),
                right: (model.num_layers(), model.num_layers()),
            });
        }
        let lr = self.lr;
        if self.momentum == 0.0 {
            for (w, g) in model.parameters_mut().zip(grads.slices()) {
                for (x, &d) in w.iter_mut().zip(g) {
                    *x -= lr * d;
                }
            }
            return Ok(());
        }
        let m = self.momentum;
        let velocity = self
            .velocity
            .get_or_insert_with(|| Gradients::zeros_like(model));
        for ((w, v), g) in model
            .parameters_mut()
            .zip(velocity.slices_mut())
            .zip(grads.slices())
        {
            for ((x, vel), &d) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = m * *vel + d;
                *x -= lr * *vel;
            }
        }
        Ok(())
    }
}
