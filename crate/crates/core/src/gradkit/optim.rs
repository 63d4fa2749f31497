use serde::{Deserialize, Serialize};

use super::{GradError, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, new_lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr: new_lr },
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr: new_lr, beta1, beta2, eps },
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// Applies one update in place. Parameters without a gradient are left alone.
pub fn optimizer_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Option<Vec<T>>],
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<(), GradError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(GradError::Shape { op: "optimizer_step".into(), left: vec![params.len()], right: vec![grads.len()] });
    }
    state.step += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.len() != p.len() {
            return Err(GradError::Shape { op: "optimizer_step".into(), left: p.shape.clone(), right: vec![g.len()] });
        }
        match *config {
            OptimizerConfig::Sgd { lr } => {
                let lr = T::from_f64_lossy(lr);
                for (w, &gi) in p.data.iter_mut().zip(g) {
                    *w = *w - lr * gi;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let t = state.step as i32;
                let c1 = T::from_f64_lossy(1.0 - beta1.powi(t));
                let c2 = T::from_f64_lossy(1.0 - beta2.powi(t));
                let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for j in 0..g.len() {
                    m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                    v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                    let mhat = m[j] / c1;
                    let vhat = v[j] / c2;
                    p.data[j] = p.data[j] - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn sgd_step() {
        let mut p = one(1.0);
        let mut st = OptimizerState::new(&p);
        optimizer_step(&mut p, &[Some(vec![0.5])], &OptimizerConfig::Sgd { lr: 0.1 }, &mut st).unwrap();
        assert!((p[0].data[0] - 0.95).abs() < 1e-15);
        optimizer_step(&mut p, &[Some(vec![0.0])], &OptimizerConfig::Sgd { lr: 0.1 }, &mut st).unwrap();
        assert!((p[0].data[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = one(0.5);
            let mut st = OptimizerState::new(&p);
            optimizer_step(&mut p, &[Some(vec![g])], &OptimizerConfig::default(), &mut st).unwrap();
            let moved = p[0].data[0] - 0.5;
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-6, "{moved}");
        }
    }
}
