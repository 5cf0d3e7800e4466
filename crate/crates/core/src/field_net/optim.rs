use serde::{Deserialize, Serialize};

use super::FieldNet;

/// Linear warmup to `peak` at `warmup` steps, then linear decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step <= self.warmup {
            if self.warmup == 0 {
                self.peak
            } else {
                self.peak * step as f64 / self.warmup as f64
            }
        } else if step >= self.total {
            0.0
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

/// Adam with decoupled weight decay, state shaped like the network.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: FieldNet,
    v: FieldNet,
}

impl AdamW {
    pub fn new(net: &FieldNet, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: net.zeros_like(),
            v: net.zeros_like(),
        }
    }

    pub fn step(&mut self, net: &mut FieldNet, grads: &FieldNet, lr: f64) {
        self.step += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let params = net.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((mut p, g), mut m), mut v) in params
            .into_iter()
            .map(|(_, t)| t)
            .zip(gs.into_iter().map(|(_, t)| t))
            .zip(ms.into_iter().map(|(_, t)| t))
            .zip(vs.into_iter().map(|(_, t)| t))
        {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * (update + wd * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_net::NetDims;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1e-3,
            warmup: 10,
            total: 110,
        };
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(10), 1e-3);
        assert!((s.at(5) - 5e-4).abs() < 1e-18);
        assert!((s.at(60) - 5e-4).abs() < 1e-18);
        assert_eq!(s.at(110), 0.0);
        // continuity around the peak
        assert!((s.at(9) - s.at(11)).abs() < 2e-4);
        for k in 0..110 {
            assert!(s.at(k) <= s.at(10));
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let net = FieldNet::init(NetDims::toy(4, 10, 2), 1);
        let mut moved = net.clone();
        let mut opt = AdamW::new(&net, 0.0);
        let zero = net.zeros_like();
        for _ in 0..3 {
            opt.step(&mut moved, &zero, 1e-2);
        }
        assert_eq!(moved, net);
    }

    #[test]
    fn descends_on_gradient_sign() {
        let net = FieldNet::init(NetDims::toy(4, 10, 2), 1);
        let mut moved = net.clone();
        let mut g = net.zeros_like();
        g.b3.fill(1.0);
        AdamW::new(&net, 0.0).step(&mut moved, &g, 0.1);
        assert!(moved.b3.iter().zip(net.b3.iter()).all(|(a, b)| a < b));
    }
}
