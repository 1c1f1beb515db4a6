//! Adversarial losses in non-saturating logistic form, the R1 penalty, and
//! the weighted totals for both players.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, GraphError, Var};
use crate::nets::BoundDisc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_r_d: f64,
    pub lambda_f_d: f64,
    pub lambda_g: f64,
    pub r1_gamma: f64,
    /// R1 is evaluated every this many D-steps with gamma scaled up by the
    /// same factor.
    pub r1_interval: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r_d: 1.0,
            lambda_f_d: 1.0,
            lambda_g: 1.0,
            r1_gamma: 0.1,
            r1_interval: 16,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_r_d", self.lambda_r_d),
            ("lambda_f_d", self.lambda_f_d),
            ("lambda_g", self.lambda_g),
            ("r1_gamma", self.r1_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.r1_interval == 0 {
            return Err("r1_interval must be at least 1".into());
        }
        Ok(())
    }
}

/// `mean(softplus(−real)) + mean(softplus(fake))`.
pub fn d_logistic_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var, GraphError> {
    let nr = g.neg(real_logits)?;
    let sr = g.softplus(nr)?;
    let lr = g.mean(sr)?;
    let sf = g.softplus(fake_logits)?;
    let lf = g.mean(sf)?;
    g.add(lr, lf)
}

/// `mean(softplus(−fake))`, i.e. `−E[log D(G(z))]`.
pub fn g_nonsat_loss(g: &mut Graph, fake_logits: Var) -> Result<Var, GraphError> {
    let nf = g.neg(fake_logits)?;
    let sf = g.softplus(nf)?;
    g.mean(sf)
}

/// `γ/2 · mean over rows of ‖∇ₓ D(x)‖²`, differentiable in the
/// discriminator's weights.
///
/// Returns the penalty and the domain logits of `x`.
pub fn r1_penalty(g: &mut Graph, disc: &BoundDisc, x: Var, gamma: f64) -> Result<(Var, Var), GraphError> {
    let (logits, grad) = disc.domain_with_input_grad(g, x)?;
    Ok((r1_from_input_grad(g, grad, gamma)?, logits))
}

/// `γ/2 · mean over rows of ‖grad_row‖²`.
pub fn r1_from_input_grad(g: &mut Graph, grad: Var, gamma: f64) -> Result<Var, GraphError> {
    let rows = g.value(grad).rows() as f64;
    let sq = g.square(grad)?;
    let total = g.sum(sq)?;
    g.scale(total, 0.5 * gamma / rows)
}

/// Loss parts for the discriminator; contrastive parts are `None` while the
/// queues warm up or when the term is switched off.
#[derive(Clone, Copy, Debug, Default)]
pub struct DParts {
    pub l_d: Option<Var>,
    pub c_r_d: Option<Var>,
    pub c_f_d: Option<Var>,
    pub r1: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GParts {
    pub l_g: Option<Var>,
    pub c_f_g: Option<Var>,
}

fn weighted_sum(g: &mut Graph, terms: &[(Option<Var>, f64)]) -> Result<Var, GraphError> {
    let mut acc: Option<Var> = None;
    for &(term, w) in terms {
        let Some(t) = term else { continue };
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { t } else { g.scale(t, w)? };
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(crate::Tensor::scalar(0.0))))
}

/// `l_d + λʳ·c_r_d + λᶠ·c_f_d + r1`; absent parts count as zero.
pub fn total_d_loss(g: &mut Graph, parts: &DParts, w: &LossWeights) -> Result<Var, GraphError> {
    weighted_sum(
        g,
        &[
            (parts.l_d, 1.0),
            (parts.c_r_d, w.lambda_r_d),
            (parts.c_f_d, w.lambda_f_d),
            (parts.r1, 1.0),
        ],
    )
}

/// `l_g + λ_G·c_f_g`; absent parts count as zero.
pub fn total_g_loss(g: &mut Graph, parts: &GParts, w: &LossWeights) -> Result<Var, GraphError> {
    weighted_sum(g, &[(parts.l_g, 1.0), (parts.c_f_g, w.lambda_g)])
}
