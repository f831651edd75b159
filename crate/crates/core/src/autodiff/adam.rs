//! Adam with bias correction, operating on a [`ParamStore`] in place.

use thiserror::Error;

use super::unet::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("non-finite gradient for parameter {name} at flat index {index}")]
    NonFiniteGrad { name: String, index: usize },
    #[error("gradient count {got} does not match parameter count {want}")]
    CountMismatch { got: usize, want: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state mirroring the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.get(i).shape().to_vec()).unwrap())
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.get(i).shape().to_vec()).unwrap())
            .collect();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One optimizer step. Gradients must align with the store's order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore<f32>) -> Result<(), AdamError> {
        if grads.len() != params.len() {
            return Err(AdamError::CountMismatch {
                got: grads.len(),
                want: params.len(),
            });
        }
        for i in 0..params.len() {
            let g = grads.get(i);
            if let Some(index) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(AdamError::NonFiniteGrad {
                    name: params.name(i).to_string(),
                    index,
                });
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);

        for i in 0..params.len() {
            let g = grads.get(i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                p[j] = (p[j] as f64 - c.lr * mhat / (vhat.sqrt() + c.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ArchConfig, Buffer, VectorFieldNet};
    use crate::tensor::RngStream;

    fn small_net() -> VectorFieldNet {
        VectorFieldNet::new(
            ArchConfig {
                in_channels_x: 2,
                in_channels_z: 0,
                base_channels: 4,
                channel_mults: vec![1],
                blocks_per_level: 1,
                attn_at_bottom: false,
                time_embed_dim: 8,
                norm_groups: 2,
            },
            3,
        )
    }

    fn grad_fill(net: &VectorFieldNet, fill: f32) -> GradStore<f32> {
        let mut gs = GradStore::zeros_like(net.params());
        for i in 0..gs.len() {
            gs.get_mut(i).data.fill(fill);
        }
        gs
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut net = small_net();
        let before: Vec<Tensor> = (0..net.params().len())
            .map(|i| net.params().get(i).clone())
            .collect();
        let gs = grad_fill(&net, 0.0);
        let mut adam = AdamState::new(AdamConfig::default(), net.params());
        adam.step(net.params_mut(), &gs).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(net.params().get(i), b);
        }
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut net = small_net();
        let before: Vec<Tensor> = (0..net.params().len())
            .map(|i| net.params().get(i).clone())
            .collect();
        let gs = grad_fill(&net, 0.5);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, net.params());
        adam.step(net.params_mut(), &gs).unwrap();
        for i in 0..before.len() {
            for (a, b) in net.params().get(i).data().iter().zip(before[i].data()) {
                let delta = (b - a) as f64;
                assert!((delta - 1e-3).abs() < 1e-6, "delta {delta}");
            }
        }
    }

    #[test]
    fn identical_runs_produce_identical_trajectories() {
        let run = || {
            let mut net = small_net();
            let mut adam = AdamState::new(AdamConfig::default(), net.params());
            let mut rng = RngStream::new(11, 0);
            for _ in 0..5 {
                let x = Tensor::gaussian(vec![2, 2, 2], &mut rng).unwrap();
                let pass = net.forward_pass::<f32>(0.5, &x, None).unwrap();
                let out = pass.output_buffer().clone();
                // d mean(y^2) / dy = 2y/n
                let n = out.numel() as f32;
                let cot = Buffer {
                    shape: out.shape.clone(),
                    data: out.data.iter().map(|&v| 2.0 * v / n).collect(),
                };
                let gs = pass.backward(&cot);
                adam.step(net.params_mut(), &gs).unwrap();
            }
            (0..net.params().len())
                .map(|i| net.params().get(i).clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut net = small_net();
        let mut gs = grad_fill(&net, 1.0);
        gs.get_mut(0).data[0] = f32::NAN;
        let mut adam = AdamState::new(AdamConfig::default(), net.params());
        match adam.step(net.params_mut(), &gs) {
            Err(AdamError::NonFiniteGrad { name, index }) => {
                assert_eq!(name, net.params().name(0));
                assert_eq!(index, 0);
            }
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }
}
