use crate::nn::StageModels;
use crate::tensor::Scalar;

/// Step decay: `initial / factor^(epoch / every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.every).unwrap_or(0);
        self.initial / self.factor.powi(drops as i32)
    }
}

/// Adam with bias correction.
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new<T: Scalar>(models: &StageModels<T>) -> Self {
        let shapes: Vec<usize> = models.param_slices().iter().map(|p| p.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, models: &mut StageModels<S>, grads: &StageModels<S>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let one = S::one();
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        let step_size = S::of(lr * c1);
        let c2 = S::of(c2);
        let eps = S::of(self.eps);
        for (((p, g), m), v) in models
            .param_slices_mut()
            .into_iter()
            .zip(grads.param_slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] * c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelConfig, Variant};

    #[test]
    fn schedule_divides_by_three_every_twenty_epochs() {
        let s = LrSchedule {
            initial: 1e-4,
            factor: 3.0,
            every: 20,
        };
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(19), 1e-4);
        assert!((s.at(20) - 1e-4 / 3.0).abs() < 1e-18);
        assert!((s.at(39) - 1e-4 / 3.0).abs() < 1e-18);
        assert!((s.at(40) - 1e-4 / 9.0).abs() < 1e-18);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = ModelConfig {
            stages: 1,
            blocks: 1,
            width: 2,
            variant: Variant::M,
            seed: 0,
        };
        let mut m = StageModels::<f64>::init(cfg).unwrap();
        let before = m.clone();
        let mut g = m.zeros_like();
        g.param_slices_mut()[0][0] = 3.0;
        g.param_slices_mut()[0][1] = -0.01;
        let mut opt = Adam::new(&m);
        opt.step(&mut m, &g, 0.1);
        let d0 = before.param_slices()[0][0] - m.param_slices()[0][0];
        let d1 = before.param_slices()[0][1] - m.param_slices()[0][1];
        assert!((d0 - 0.1).abs() < 1e-6);
        assert!((d1 + 0.1).abs() < 1e-4);
        // parameters with zero gradient do not move
        assert_eq!(m.param_slices()[0][2], before.param_slices()[0][2]);
    }
}
