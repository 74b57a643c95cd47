//! Plain gradient descent with classical momentum. Deterministic: velocity
//! buffers are dense and updates run in canonical parameter order.

use crate::model::{ModelParams, ParamVars};
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: Vec::new() }
    }

    /// v ← μ·v + g;  w ← w − lr·v. Parameters without a gradient on the
    /// tape (frozen leaves) are left untouched.
    pub fn step(&mut self, params: &mut ModelParams, tape: &Tape, pv: &ParamVars) {
        if self.velocity.len() != params.len() {
            self.velocity =
                (0..params.len()).map(|i| vec![0.0; params.tensor(i).data().len()]).collect();
        }
        for i in 0..params.len() {
            let Some(g) = tape.grad(pv.vars[i]) else { continue };
            let g = g.to_vec();
            let v = &mut self.velocity[i];
            for (vj, gj) in v.iter_mut().zip(&g) {
                *vj = self.momentum * *vj + gj;
            }
            let lr = self.lr;
            let v = self.velocity[i].clone();
            params.update(i, |w| {
                for (wj, vj) in w.iter_mut().zip(&v) {
                    *wj -= lr * vj;
                }
            });
        }
    }
}
