use serde::{Deserialize, Serialize};

use super::{NetError, QParams, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self { config, m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }

    pub fn for_params(config: AdamConfig, params: &QParams<T>) -> Self {
        Self::new(config, params.len())
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(params: &mut QParams<T>, grads: &[T], state: &mut AdamState<T>) -> Result<(), NetError> {
    let n = params.len();
    for len in [grads.len(), state.m.len(), state.v.len()] {
        if len != n {
            return Err(NetError::Shape { expected: n, got: len });
        }
    }
    state.step += 1;
    let c = state.config;
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - c.beta1.powi(step));
    let corr2 = T::from_f64(1.0 - c.beta2.powi(step));
    let lr = T::from_f64(c.lr);
    let eps = T::from_f64(c.eps);
    let theta = params.data_mut();
    for i in 0..n {
        let g = grads[i];
        let m = b1 * state.m[i] + (one - b1) * g;
        let v = b2 * state.v[i] + (one - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / corr1;
        let v_hat = v / corr2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qfunction::NetArch;

    fn params() -> QParams<f64> {
        QParams::init(&NetArch::tiny(), 1).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::for_params(AdamConfig::default(), &p);
        s.m.iter_mut().for_each(|m| *m = 0.5);
        s.v.iter_mut().for_each(|v| *v = 0.25);
        let zeros = vec![0.0; p.len()];
        // moments are non-zero, so the parameters still move; check decay
        adam_step(&mut p, &zeros, &mut s).unwrap();
        assert!(s.m.iter().all(|&m| (m - 0.45).abs() < 1e-15));
        assert!(s.v.iter().all(|&v| (v - 0.25 * 0.999).abs() < 1e-15));

        let mut p = before.clone();
        let mut fresh = AdamState::for_params(AdamConfig::default(), &p);
        adam_step(&mut p, &zeros, &mut fresh).unwrap();
        assert_eq!(p, before);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        let before = p.data().to_vec();
        let mut s = AdamState::for_params(AdamConfig::default(), &p);
        let grads: Vec<f64> = (0..p.len()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        adam_step(&mut p, &grads, &mut s).unwrap();
        for ((after, before), g) in p.data().iter().zip(&before).zip(&grads) {
            let delta = after - before;
            // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + ε)
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15);
            assert!(delta.signum() == -g.signum());
        }
    }

    #[test]
    fn replay_is_bitwise_reproducible() {
        let grads_seq: Vec<Vec<f64>> =
            (0..2).map(|k| (0..params().len()).map(|i| ((i * 7 + k) % 11) as f64 - 5.0).collect()).collect();
        let run = || {
            let mut p = params();
            let mut s = AdamState::for_params(AdamConfig::default(), &p);
            for g in &grads_seq {
                adam_step(&mut p, g, &mut s).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = params();
        let mut s = AdamState::for_params(AdamConfig::default(), &p);
        assert!(matches!(adam_step(&mut p, &[0.0; 3], &mut s), Err(NetError::Shape { .. })));
    }
}
