use super::LearnerError;
use crate::config::OptimizerConfig;
use crate::params::{ParamError, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl From<&OptimizerConfig> for OptimizerSettings {
    fn from(c: &OptimizerConfig) -> Self {
        Self {
            lr: c.lr,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on every block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub settings: OptimizerSettings,
    pub velocity: ParameterSet,
}

impl OptimizerState {
    pub fn new(settings: OptimizerSettings, params: &ParameterSet) -> Self {
        Self {
            settings,
            velocity: params.zeros_like(),
        }
    }

    /// `g = grad + wd * p; v = momentum * v + g; p -= lr * v`
    pub fn step(&mut self, params: &mut ParameterSet, grad: &ParameterSet) -> Result<(), LearnerError> {
        if !params.congruent(grad) || !params.congruent(&self.velocity) {
            return Err(ParamError::Incongruent.into());
        }
        let lr = self.settings.lr as f32;
        let momentum = self.settings.momentum as f32;
        let wd = self.settings.weight_decay as f32;
        for ((p, g), v) in params
            .blocks_mut()
            .iter_mut()
            .zip(grad.blocks())
            .zip(self.velocity.blocks_mut())
        {
            for ((pv, &gv), vv) in p.values_mut().iter_mut().zip(g.values()).zip(v.values_mut()) {
                let g = gv + wd * *pv;
                *vv = momentum * *vv + g;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One SGD step returning the updated parameters.
pub fn sgd_step(state: &mut OptimizerState, params: &ParameterSet, grad: &ParameterSet) -> Result<ParameterSet, LearnerError> {
    let mut next = params.clone();
    state.step(&mut next, grad)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Block;

    fn scalar(v: f32) -> ParameterSet {
        ParameterSet::new(vec![Block::new("w", vec![1], vec![v]).unwrap()]).unwrap()
    }

    fn settings(lr: f64, momentum: f64, weight_decay: f64) -> OptimizerSettings {
        OptimizerSettings {
            lr,
            momentum,
            weight_decay,
        }
    }

    #[test]
    fn zero_lr_is_noop() {
        let p = scalar(1.0);
        let mut s = OptimizerState::new(settings(0.0, 0.9, 0.1), &p);
        assert_eq!(sgd_step(&mut s, &p, &scalar(3.0)).unwrap(), p);
    }

    #[test]
    fn first_step_hand_value() {
        let p = scalar(1.0);
        let mut s = OptimizerState::new(settings(0.01, 0.9, 0.0), &p);
        let next = sgd_step(&mut s, &p, &scalar(0.5)).unwrap();
        assert_eq!(next.to_flat(), vec![0.995]);
    }

    #[test]
    fn two_steps_follow_momentum_recursion() {
        // v1 = g, p1 = p0 - lr g; v2 = m g + g, p2 = p1 - lr (1 + m) g
        let (lr, m, g) = (0.1f64, 0.9f64, 0.5f64);
        let p = scalar(2.0);
        let mut s = OptimizerState::new(settings(lr, m, 0.0), &p);
        let p1 = sgd_step(&mut s, &p, &scalar(g as f32)).unwrap();
        let p2 = sgd_step(&mut s, &p1, &scalar(g as f32)).unwrap();
        let expected = 2.0 - lr * g - lr * (1.0 + m) * g;
        assert!((p2.to_flat()[0] as f64 - expected).abs() < 1e-6);
        assert!((s.velocity.to_flat()[0] as f64 - (1.0 + m) * g).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let p = scalar(2.0);
        let mut s = OptimizerState::new(settings(0.1, 0.0, 0.5), &p);
        let next = sgd_step(&mut s, &p, &scalar(0.0)).unwrap();
        assert!((next.to_flat()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn incongruent_rejected() {
        let p = scalar(1.0);
        let mut s = OptimizerState::new(settings(0.1, 0.0, 0.0), &p);
        let other = ParameterSet::new(vec![Block::new("v", vec![1], vec![1.0]).unwrap()]).unwrap();
        assert!(sgd_step(&mut s, &p, &other).is_err());
    }
}
