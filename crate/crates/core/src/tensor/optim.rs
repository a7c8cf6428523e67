use super::{Element, ParamRegistry};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct SgdState<T: Element = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity buffers keyed by parameter name, in registry order.
    pub velocity: Vec<(String, Vec<T>)>,
}

impl<T: Element> SgdState<T> {
    pub fn new(
        registry: &ParamRegistry<T>,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {learning_rate} invalid")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {weight_decay} invalid")));
        }
        let velocity = registry
            .params()
            .iter()
            .map(|p| (p.name.clone(), vec![T::zero(); p.tensor.numel()]))
            .collect();
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        })
    }

    fn check_matches(&self, registry: &ParamRegistry<T>) -> Result<()> {
        let params = registry.params();
        if params.len() != self.velocity.len()
            || params
                .iter()
                .zip(&self.velocity)
                .any(|(p, (n, v))| p.name != *n || p.tensor.numel() != v.len())
        {
            return Err(Error::Training(
                "optimizer state does not mirror the parameter registry".into(),
            ));
        }
        Ok(())
    }

    /// `v ← μ·v + g + λ·w` (λ only where the entry opts in), `w ← w − η·v`,
    /// then clears all gradients.
    pub fn step(&mut self, registry: &ParamRegistry<T>) -> Result<()> {
        self.check_matches(registry)?;
        if let Some(missing) = registry.params().iter().find(|p| p.tensor.grad_ref().is_none()) {
            return Err(Error::Training(format!(
                "parameter {} has no gradient",
                missing.name
            )));
        }
        let lr = T::from_f64_lossy(self.learning_rate);
        let mu = T::from_f64_lossy(self.momentum);
        for (entry, (_, vel)) in registry.params().iter().zip(self.velocity.iter_mut()) {
            let decay = if entry.apply_weight_decay {
                T::from_f64_lossy(self.weight_decay)
            } else {
                T::zero()
            };
            let grad = entry.tensor.grad_ref();
            let grad = grad.as_ref().expect("checked above");
            let mut w = entry.tensor.data_mut();
            for ((wi, vi), gi) in w.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *vi = mu * *vi + *gi + decay * *wi;
                *wi -= lr * *vi;
            }
        }
        registry.zero_grad();
        Ok(())
    }
}

/// Step decay: `lr(epoch) = base · factor^⌊epoch / step⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub step: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.step == 0 {
            return self.base;
        }
        self.base * self.factor.powi((epoch / self.step) as i32)
    }
}
