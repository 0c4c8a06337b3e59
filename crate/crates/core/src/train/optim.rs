//! Heavy-ball SGD with coupled weight decay:
//! `v <- momentum*v + (g + wd*w); w <- w - lr*v`.
//! Momentum 0 and weight decay 0 reduce it to the plain update `w - lr*g`.

use super::layers::Param;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimState {
    fn default() -> OptimState {
        OptimState {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Update one parameter tensor in place from its gradient.
pub fn sgd_step(param: &mut Param, opt: &OptimState) {
    let w = param.value.data_mut();
    let g = param.grad.data();
    let v = param.velocity.data_mut();
    for i in 0..w.len() {
        v[i] = opt.momentum * v[i] + (g[i] + opt.weight_decay * w[i]);
        w[i] -= opt.lr * v[i];
    }
}
