use crate::error::{Error, Result};
use crate::tensor::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, in parameter-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[&Param]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One decoupled-weight-decay Adam update:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    /// Arithmetic is done in f64 and rounded once into each stored value.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Vec<f32>], cfg: &AdamWConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(
                "adamw_step",
                format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.numel() || self.m[p.id].len() != p.numel() {
                return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {} at element {i}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in params.iter_mut().zip(grads) {
            let (m, v) = (&mut self.m[p.id], &mut self.v[p.id]);
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mn = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
                let vn = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let m_hat = mn / bc1;
                let v_hat = vn / bc2;
                let wf = *w as f64;
                *w = (wf - cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * wf)) as f32;
            }
        }
        Ok(())
    }
}
