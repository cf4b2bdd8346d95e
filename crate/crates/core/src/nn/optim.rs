//! Adam over any [`Params`] implementor.
//!
//! After every update the weights and both moment buffers are rounded onto
//! the f32 grid. Checkpoints store 32-bit floats, so this keeps the in-memory
//! state exactly representable on disk at every step boundary; a resumed run
//! is then bit-identical to an uninterrupted one.

use super::{ParamRef, Params};

/// Round to the nearest f32-representable value.
pub fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Snap every weight of a network onto the f32 grid (gradients untouched).
/// Run once after initialization so step 0 starts from disk-exact weights.
pub fn snap_params(net: &mut dyn Params) {
    net.visit(&mut |p: ParamRef| {
        for v in p.value {
            *v = snap_f32(*v);
        }
    });
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.5, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from the accumulated gradients. Moment buffers are
    /// created on first use and must keep matching the parameter layout.
    pub fn step(&mut self, net: &mut dyn Params) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        net.visit(&mut |p: ParamRef| {
            if idx == ms.len() {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            assert_eq!(m.len(), p.value.len(), "optimizer state desynced at tensor {idx}");
            for ((w, &g), (mi, vi)) in
                p.value.iter_mut().zip(p.grad.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *mi = snap_f32(*mi);
                *vi = snap_f32(*vi);
                let update = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w = snap_f32(*w - update);
            }
            idx += 1;
        });
        assert_eq!(idx, ms.len(), "optimizer saw fewer tensors than before");
    }

    /// Moment buffers in parameter-visit order, for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.t, &self.m, &self.v)
    }

    /// Restore moment buffers captured by [`Adam::state`].
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::derive_rng;
    use ndarray::arr2;

    fn toy() -> Linear {
        let mut rng = derive_rng(110, "optim.test");
        let mut lin = Linear::new(&mut rng, 2, 2, 0.5, 0.0);
        snap_params(&mut lin);
        lin
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let mut lin = toy();
        let before = lin.w.value.clone();
        let x = arr2(&[[1.0f64, 2.0]]);
        let y = lin.forward(&x);
        // Loss = sum of outputs; gradient of each output is 1.
        let gy = ndarray::Array2::ones(y.raw_dim());
        lin.zero_grad();
        lin.backward(&x, &gy);

        let mut adam = Adam::new(1e-2);
        adam.step(&mut lin);

        // First step: m-hat = g, v-hat = g^2, update = lr * g/(|g|+eps) = lr * sign(g).
        for (w0, (&w1, &g)) in before.iter().zip(lin.w.value.iter().zip(lin.w.grad.iter())) {
            assert!((w1 - snap_f32(w0 - 1e-2 * g.signum())).abs() < 1e-6, "w {w0} -> {w1} (g={g})");
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_weights_untouched() {
        let mut lin = toy();
        let before: Vec<f64> = lin.w.value.iter().copied().collect();
        lin.zero_grad();
        let mut adam = Adam::new(1e-2);
        adam.step(&mut lin);
        adam.step(&mut lin);
        let after: Vec<f64> = lin.w.value.iter().copied().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn state_round_trip_reproduces_trajectory() {
        let run = |split: bool| {
            let mut lin = toy();
            let mut adam = Adam::new(5e-3);
            let x = arr2(&[[0.3f64, -0.7]]);
            for step in 0..6 {
                let y = lin.forward(&x);
                lin.zero_grad();
                lin.backward(&x, &y.mapv(|v| v * 2.0));
                adam.step(&mut lin);
                if split && step == 2 {
                    // Snapshot and restore through the checkpoint surface.
                    let (t, m, v) = adam.state();
                    let (m, v) = (m.to_vec(), v.to_vec());
                    let mut fresh = Adam::new(5e-3);
                    fresh.restore(t, m, v);
                    adam = fresh;
                }
            }
            lin.w.value.iter().copied().collect::<Vec<f64>>()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn weights_and_moments_stay_on_f32_grid() {
        let mut lin = toy();
        let mut adam = Adam::new(2e-4);
        let x = arr2(&[[1.0f64, 1.0], [0.5, -0.25]]);
        for _ in 0..3 {
            let y = lin.forward(&x);
            lin.zero_grad();
            lin.backward(&x, &y);
            adam.step(&mut lin);
        }
        lin.visit(&mut |p: ParamRef| {
            for &v in p.value.iter() {
                assert_eq!(v, snap_f32(v));
            }
        });
        let (_, m, v) = adam.state();
        for buf in m.iter().chain(v.iter()) {
            for &x in buf {
                assert_eq!(x, snap_f32(x));
            }
        }
    }
}
