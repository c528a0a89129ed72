use super::model::{ModelParams, ParamGrads};
use crate::error::{shape, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let z: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// One Adam step with decoupled weight decay:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`.
pub fn adam_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.grads.len() != params.tensors().len() || state.m.len() != grads.grads.len() {
        return Err(shape("gradient list does not match parameters"));
    }
    for (p, g) in params.tensors().iter().zip(&grads.grads) {
        if p.shape() != g.shape() {
            return Err(shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(&grads.grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi = *pi * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Architecture, Tensor};

    fn scalar_model(p: f64) -> ModelParams {
        let a = Architecture {
            spatial_maps: 1,
            temporal_filters: 1,
            kernel: 1,
            stride: 1,
            dropout: 0.0,
            domain_hidden: 1,
            proj_hidden: 1,
            proj_dim: 1,
            ..Architecture::new(1, 1, 1, 2)
        };
        let mut m = ModelParams::init(a, 0).unwrap();
        m.get_mut("g.band_fusion").unwrap().data_mut()[0] = p;
        m
    }

    fn grad_on_first(m: &ModelParams, g: f64) -> ParamGrads {
        let mut pg = ParamGrads::zeros_like(m);
        pg.grads[0] = Tensor::new(vec![1, 1], vec![g]).unwrap();
        pg
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let mut m = scalar_model(0.7);
        let before = m.clone();
        let mut s = AdamState::new(&m);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        for _ in 0..3 {
            adam_step(&mut m, &ParamGrads::zeros_like(&before), &mut s, &cfg).unwrap();
        }
        assert_eq!(m, before);
    }

    #[test]
    fn first_step_hand_value() {
        let mut m = scalar_model(1.0);
        let mut s = AdamState::new(&m);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let g = grad_on_first(&m, 1.0);
        adam_step(&mut m, &g, &mut s, &cfg).unwrap();
        let p = m.get("g.band_fusion").unwrap().data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay() {
        let mut m = scalar_model(2.0);
        let mut s = AdamState::new(&m);
        let cfg = AdamConfig { lr: 0.01, weight_decay: 0.001, ..Default::default() };
        let mut expected = 2.0;
        for _ in 0..5 {
            let g = ParamGrads::zeros_like(&m);
            adam_step(&mut m, &g, &mut s, &cfg).unwrap();
            expected *= 1.0 - 0.01 * 0.001;
        }
        let p = m.get("g.band_fusion").unwrap().data()[0];
        assert!((p - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut m = scalar_model(1.0);
        let mut s = AdamState::new(&m);
        let mut g = ParamGrads::zeros_like(&m);
        g.grads[0] = Tensor::zeros(vec![2]);
        assert!(adam_step(&mut m, &g, &mut s, &AdamConfig::default()).is_err());
    }
}
