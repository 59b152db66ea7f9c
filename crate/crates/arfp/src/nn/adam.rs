//! Adaptive-moment gradient updates, one state per parameter group.

use serde::{Deserialize, Serialize};

use super::graph::Grads;
use super::layers::ParamVisit;
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn for_net(net: &dyn ParamVisit) -> AdamState {
        let mut m = Vec::new();
        let mut v = Vec::new();
        net.visit(&mut |t| {
            m.push(Tensor::zeros(&t.shape));
            v.push(Tensor::zeros(&t.shape));
        });
        AdamState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Apply one update. `grads` must be in the network's visit order.
    pub fn apply(&mut self, net: &mut dyn ParamVisit, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let mut idx = 0;
        net.visit_mut(&mut |p| {
            let g = &grads.by_param[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            debug_assert_eq!(p.shape, g.shape, "gradient shape mismatch at {idx}");
            for i in 0..p.data.len() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            idx += 1;
        });
        assert_eq!(idx, grads.by_param.len(), "gradient count mismatch");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{seeded_rng, Dense};

    #[test]
    fn adam_descends_on_a_quadratic() {
        // Minimize (w*x - 1)^2 for scalar w via the graph.
        let mut rng = seeded_rng(3);
        let mut net = Dense::new(&mut rng, 1, 1);
        let mut adam = AdamState::for_net(&net);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let mut g = crate::nn::graph::Graph::new();
            let x = g.input(Tensor::from_vec(&[1], vec![1.0]).unwrap());
            let y = net.fwd(&mut g, x, true);
            let tgt = g.input(Tensor::from_vec(&[1], vec![1.0]).unwrap());
            let d = g.sub(y, tgt);
            let sq = g.mul(d, d);
            let loss = g.sum_all(sq);
            let lv = g.scalar(loss);
            let grads = g.backward(loss);
            adam.apply(&mut net, &grads, 0.05);
            last = lv;
        }
        assert!(last < 1e-3, "loss did not descend: {last}");
    }
}
