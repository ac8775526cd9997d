use std::collections::{BTreeMap, BTreeSet};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Momentum SGD: `v ← momentum·v − lr·g`, `p ← p + v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub lr: T,
    pub momentum: T,
    velocity: BTreeMap<String, Vec<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Result<Self> {
        if !(lr >= T::zero()) || !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::Invalid(format!(
                "sgd needs lr >= 0 and momentum in [0, 1), got lr={lr:?} momentum={momentum:?}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
            frozen: BTreeSet::new(),
        })
    }

    /// Exclude entries from updates. Frozen entries need no gradient.
    pub fn freeze<'a>(&mut self, names: impl IntoIterator<Item = &'a str>) {
        self.frozen.extend(names.into_iter().map(str::to_string));
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, p) in params.iter_mut() {
            if self.frozen.contains(name) {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("missing gradient for trainable entry {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); p.numel()]);
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi - self.lr * gi;
                *pi = *pi + *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new(0);
        p.insert("p", Tensor::scalar(v)).unwrap();
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn plain_step() {
        let mut p = store(1.0);
        Sgd::new(0.1, 0.0).unwrap().step(&mut p, &grad(2.0)).unwrap();
        assert!((p.get("p").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = store(3.25);
        let mut opt = Sgd::new(0.5, 0.9).unwrap();
        for _ in 0..3 {
            opt.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("p").unwrap().item(), 3.25);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        // Oracle: iterate the recurrence by hand.
        let (p0, lr, m, g) = (1.5f64, 0.1, 0.9, 0.7);
        let mut v = 0.0;
        let mut want = p0;
        for _ in 0..2 {
            v = m * v - lr * g;
            want += v;
        }
        assert!((want - (p0 - lr * g - (lr * g + m * lr * g))).abs() < 1e-15);

        let mut p = store(p0);
        let mut opt = Sgd::new(lr, m).unwrap();
        opt.step(&mut p, &grad(g)).unwrap();
        opt.step(&mut p, &grad(g)).unwrap();
        assert!((p.get("p").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = store(1.0);
        let err = Sgd::new(0.1, 0.0).unwrap().step(&mut p, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("missing gradient"));
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.freeze(["p"]);
        opt.step(&mut p, &BTreeMap::new()).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::<f32>::new(0.1, 1.0).is_err());
        assert!(Sgd::<f32>::new(-0.1, 0.0).is_err());
    }
}
