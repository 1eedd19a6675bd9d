use super::{NumericsError, ParamSlot, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// One AdamW update over every slot, then zeroes the gradients.
///
/// Weight decay is decoupled: `value *= 1 - lr * wd` is applied directly to
/// the parameter (only for slots with `decay` set), never through the moments.
/// Fails before touching anything if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(params: &mut [&mut ParamSlot<T>], cfg: &AdamWConfig) -> Result<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(NumericsError::NonFiniteGradient(bad.name.clone()));
    }
    let mut scale = 1.0;
    if let Some(cap) = cfg.clip_norm {
        let norm =
            params.iter().flat_map(|p| p.grad.data().iter()).map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        if norm > cap {
            scale = cap / norm;
        }
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let eps = T::lit(cfg.eps);
    let scale = T::lit(scale);
    for p in params.iter_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let corr1 = T::lit(1.0 - cfg.beta1.powi(t));
        let corr2 = T::lit(1.0 - cfg.beta2.powi(t));
        let lr = T::lit(cfg.lr);
        let decay = if p.decay { T::lit(1.0 - cfg.lr * cfg.weight_decay) } else { T::one() };
        let ParamSlot { value, grad, adam_m, adam_v, .. } = &mut **p;
        let it = value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(adam_m.data_mut().iter_mut().zip(adam_v.data_mut().iter_mut()));
        for ((w, g), (m, v)) in it {
            let gs = *g * scale;
            *w = *w * decay;
            *m = b1 * *m + one_b1 * gs;
            *v = b2 * *v + one_b2 * gs * gs;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            *g = T::zero();
        }
    }
    Ok(())
}
