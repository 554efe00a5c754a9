use crate::params::{ParamId, ParamStore};
use crate::Mat;

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|(_, _, m)| Mat::zeros(m.rows(), m.cols())).collect::<Vec<_>>();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(store), v: zeros(store) }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    pub fn restore(lr: f64, step: u64, m: Vec<Mat>, v: Vec<Mat>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step, m, v }
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// but their moments still decay, matching a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let p = store.value_mut(*id);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for parameter {i}");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
