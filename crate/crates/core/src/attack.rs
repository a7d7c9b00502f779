//! Fast gradient sign perturbations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Lmser;
use crate::tensor::{Tape, Tensor};
use crate::training::{objective_on, Objective};

/// Loss whose input gradient drives the attack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// Softmax cross-entropy of the logits alone.
    #[default]
    Cls,
    /// Reconstruction plus weighted label term.
    Joint,
}

impl AttackLoss {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cls" => Some(AttackLoss::Cls),
            "joint" => Some(AttackLoss::Joint),
            _ => None,
        }
    }
}

/// Gradient of the attack loss with respect to the input batch.
/// `joint` is the training objective used when `loss` is `Joint`.
pub fn input_gradient(net: &Lmser, x: &Tensor, labels: &[usize], loss: AttackLoss, joint: &Objective) -> Result<Tensor> {
    if !net.config().supervised {
        return Err(Error::Capability("attacks need a supervised network".into()));
    }
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let state = net.forward_on(&mut tape, &vars, xv, net.config().reflections, None)?;
    let objective = match loss {
        AttackLoss::Cls => Objective::classification(),
        AttackLoss::Joint => *joint,
    };
    let l = objective_on(&mut tape, xv, &state, Some(labels), &objective)?;
    let grads = tape.backward(l)?;
    Ok(grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// `clip(x + ε·sign(∇ₓL), 0, 1)`; zero gradients leave pixels in place.
pub fn fgsm(net: &Lmser, x: &Tensor, labels: &[usize], epsilon: f32, loss: AttackLoss, joint: &Objective) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let g = input_gradient(net, x, labels, loss, joint)?;
    x.zip_map(&g, |xi, gi| {
        let s = if gi > 0.0 {
            1.0
        } else if gi < 0.0 {
            -1.0
        } else {
            0.0
        };
        (xi + epsilon * s).clamp(0.0, 1.0)
    })
}
