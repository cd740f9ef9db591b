use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

use super::TrainConfig;

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter in store order.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.1.shape() != g.shape() || m.len() != g.numel() {
            return Err(Error::dim("adam_step", p.1.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("x", Tensor::vector(values));
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(vec![1.0, -2.0]);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &cfg).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(st.m[0], vec![0.0; 2]);
        assert_eq!(st.v[0], vec![0.0; 2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(vec![0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &[Tensor::vector(vec![3.0, -0.5])], &mut st, &cfg).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] + cfg.learning_rate).abs() < 1e-10);
        assert!((x[1] - cfg.learning_rate).abs() < 1e-10);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut p = store(vec![1.5]);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let x = p.get("x").unwrap().data()[0];
            assert!(x * x < prev);
            prev = x * x;
            adam_step(&mut p, &[Tensor::vector(vec![2.0 * x])], &mut st, &cfg).unwrap();
        }
    }
}
