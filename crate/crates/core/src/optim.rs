//! Gradient-ascent optimizers over the policy weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams, VOCAB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `θ ← θ + lr·(g − wd·θ)`.
    Sgd,
    /// Adam moments on the ascent direction with decoupled weight decay.
    AdamW,
}

/// First and second moments of an AdamW run.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: Option<Moments>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: None,
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::AdamW,
            ..Self::sgd(learning_rate, weight_decay)
        }
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(learning_rate, weight_decay),
            OptimizerKind::AdamW => Self::adamw(learning_rate, weight_decay),
        }
    }

    pub fn moments(&self) -> Option<&Moments> {
        self.moments.as_ref()
    }

    /// Restores saved moments; they must match the parameter count.
    pub fn set_moments(&mut self, moments: Option<Moments>, params: &PolicyParams) -> Result<()> {
        if let Some(m) = &moments {
            let n = param_count(params);
            if self.kind != OptimizerKind::AdamW || m.m.len() != n || m.v.len() != n {
                return Err(Error::Integrity(format!(
                    "optimizer state with {} entries does not fit {n} weights",
                    m.m.len()
                )));
            }
        }
        self.moments = moments;
        Ok(())
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &Gradient) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => params.apply_update(grad, self.learning_rate, self.weight_decay),
            OptimizerKind::AdamW => self.adamw_step(params, grad),
        }
    }

    fn adamw_step(&mut self, params: &mut PolicyParams, grad: &Gradient) -> Result<()> {
        let n = param_count(params);
        let n_ctx = params.w_ctx().len();
        let mut dense = vec![0.0; n];
        for (&(b, p), row) in &grad.ctx {
            let o = params.ctx_offset(b, p)?;
            dense[o..o + VOCAB].copy_from_slice(row);
        }
        for (&prev, row) in &grad.big {
            let o = n_ctx + PolicyParams::big_offset(prev)?;
            dense[o..o + VOCAB].copy_from_slice(row);
        }
        let mom = self.moments.get_or_insert_with(|| Moments {
            steps: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        mom.steps += 1;
        let t = mom.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        let (w_ctx, w_big) = params.weights_mut();
        for (i, w) in w_ctx.iter_mut().chain(w_big.iter_mut()).enumerate() {
            let g = dense[i];
            let m = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
            mom.m[i] = m;
            mom.v[i] = v;
            *w = *w * decay + self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        params.finish_update()
    }
}

fn param_count(params: &PolicyParams) -> usize {
    params.w_ctx().len() + params.w_big().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ContextEncoding;
    use crate::toy_env::Token;

    #[test]
    fn sgd_matches_the_closed_form() {
        let mut a = PolicyParams::random(3, 2, 1.0, 4).unwrap();
        let mut b = a.clone();
        let ctx = ContextEncoding { bucket: 1 };
        let (_, grads) = a.logprob_grad(ctx, &[Token::X, Token::Pad]).unwrap();
        let mut g = Gradient::default();
        for x in &grads {
            g.add_scaled(x, 1.0);
        }
        Optimizer::sgd(0.3, 0.1).step(&mut a, &g).unwrap();
        b.apply_update(&g, 0.3, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_adam_step_moves_every_touched_weight_by_lr() {
        let mut p = PolicyParams::zeros(2, 2).unwrap();
        let mut g = Gradient::default();
        g.ctx.insert((1, 0), [0.5, -2.0, 0.0, 1e-3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        g.big.insert(3, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -7.0]);
        let mut opt = Optimizer::adamw(0.05, 0.0);
        opt.step(&mut p, &g).unwrap();
        let row = p.ctx_row_mut(1, 0).unwrap().to_vec();
        assert!((row[0] - 0.05).abs() < 1e-9);
        assert!((row[1] + 0.05).abs() < 1e-9);
        assert_eq!(row[2], 0.0);
        assert!((row[3] - 0.05).abs() < 1e-6);
        assert!((p.big_row_mut(3).unwrap()[9] + 0.05).abs() < 1e-9);
        assert_eq!(p.version(), 1);
        assert_eq!(opt.moments().unwrap().steps, 1);
    }

    #[test]
    fn adam_state_must_fit() {
        let p = PolicyParams::zeros(2, 2).unwrap();
        let mut opt = Optimizer::adamw(0.1, 0.0);
        let bad = Moments {
            steps: 1,
            m: vec![0.0; 3],
            v: vec![0.0; 3],
        };
        assert!(matches!(opt.set_moments(Some(bad), &p), Err(Error::Integrity(_))));
    }
}
