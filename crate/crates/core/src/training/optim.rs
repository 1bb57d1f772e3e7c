use crate::error::{Error, Result};
use crate::nn::Slot;
use crate::tensor::{lit, Element};

/// Stochastic gradient descent with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<E: Element> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter name, created on first use.
    pub velocity: Vec<(String, Vec<E>)>,
}

impl<E: Element> Sgd<E> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    fn velocity_index(&mut self, name: &str, len: usize) -> usize {
        if let Some(i) = self.velocity.iter().position(|(n, _)| n == name) {
            return i;
        }
        self.velocity.push((name.to_string(), vec![E::zero(); len]));
        self.velocity.len() - 1
    }

    /// Applies one update using the gradients stored on the parameters.
    /// A parameter without a gradient is treated as having a zero gradient.
    /// Nothing is changed if any gradient is non-finite.
    pub fn step(&mut self, params: &[(String, &Slot<E>)], lr: f64) -> Result<()> {
        let grads: Vec<Option<Vec<E>>> = params.iter().map(|(_, s)| s.get().grad()).collect();
        for ((name, _), g) in params.iter().zip(&grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for {name}; step refused"
                    )));
                }
            }
        }
        let (mu, wd, lr): (E, E, E) = (lit(self.momentum), lit(self.weight_decay), lit(lr));
        for ((name, slot), g) in params.iter().zip(grads) {
            let p = slot.get();
            let i = self.velocity_index(name, p.numel());
            let v = &mut self.velocity[i].1;
            if v.len() != p.numel() {
                return Err(Error::dim(format!(
                    "velocity for {name} has {} entries, parameter has {}",
                    v.len(),
                    p.numel()
                )));
            }
            let mut data = p.to_vec();
            for (j, (pj, vj)) in data.iter_mut().zip(v.iter_mut()).enumerate() {
                let gj = g.as_ref().map_or(E::zero(), |g| g[j]);
                *vj = mu * *vj + gj + wd * *pj;
                *pj -= lr * *vj;
            }
            slot.set_data(data)?;
        }
        Ok(())
    }
}
