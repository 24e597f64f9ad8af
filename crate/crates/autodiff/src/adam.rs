use crate::error::NnError;
use crate::graph::{Gradients, Graph, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { config, first: zeros(), second: zeros(), step: 0 }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<(), NnError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NnError::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.learning_rate), T::lit(c.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.len() != p.numel() {
                return Err(NnError::Shape(format!("gradient {i} has wrong length")));
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
            if !p.all_finite() {
                return Err(NnError::NonFinite(format!("adam update of parameter {i}")));
            }
        }
        Ok(())
    }
}

/// Backpropagates `loss`, then applies one Adam step to `model`.
///
/// `params` are the nodes returned by [`UNet::bind`] for this graph.
/// Parameters unreachable from `loss` receive a zero gradient.
pub fn backward_and_step<T: Real>(
    graph: &Graph<T>,
    loss: NodeId,
    params: &[NodeId],
    model: &mut UNet<T>,
    opt: &mut AdamState<T>,
) -> Result<Gradients<T>, NnError> {
    let grads = graph.backward(loss)?;
    let flat: Vec<Vec<T>> = params
        .iter()
        .zip(model.params())
        .map(|(&id, p)| grads.get_or_zeros(id, p.numel()))
        .collect();
    opt.update(model.params_mut(), &flat)?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_on_square_moves_by_learning_rate() {
        // f(w) = w², w = 1: g = 2, m̂ = 2, v̂ = 4, Δ = lr · 2 / (2 + eps)
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::new(vec![1], vec![1.0f64]).unwrap()];
        let mut opt = AdamState::new(cfg, &params);
        let mut g = Graph::new();
        let w = g.param(params[0].clone());
        let loss = g.mul(w, w);
        let grads = g.backward(loss).unwrap();
        opt.update(&mut params, &[grads.get(w).unwrap().to_vec()]).unwrap();
        let expected = 1.0 - 1e-4 * 2.0 / (2.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert!((1.0 - params[0].data()[0] - 1e-4).abs() < 1e-11);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn identical_states_step_identically() {
        let params = vec![Tensor::new(vec![3], vec![0.3f32, -0.2, 0.9]).unwrap()];
        let grads = vec![vec![0.5f32, -1.0, 2.0]];
        let (mut p1, mut p2) = (params.clone(), params.clone());
        let mut o1 = AdamState::new(AdamConfig::default(), &params);
        let mut o2 = o1.clone();
        for _ in 0..3 {
            o1.update(&mut p1, &grads).unwrap();
            o2.update(&mut p2, &grads).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(o1, o2);
    }
}
