use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rand::Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest step tried when a probe crosses a kink.
const MIN_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates sampled per entry; `None` checks every coordinate.
    pub coords_per_entry: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-3,
            tolerance: 1e-3,
            coords_per_entry: Some(16),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±epsilon probe changed a relu sign or pooling
    /// argmax and were probed again with a smaller step.
    pub refined: usize,
    /// Coordinates still straddling a kink at the smallest step.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<EntryReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    /// Every entry had at least one coordinate checked, all within tolerance.
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.checked > 0 && e.max_rel_error <= self.tolerance)
    }
}

/// Compare backprop gradients against central differences for every entry of
/// `params`. `loss` must build the forward pass, registering each parameter
/// with [`Graph::param`], and return a scalar.
pub fn gradient_check<F>(params: &ParamStore<f64>, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |p: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let out = loss(&mut g, p)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("gradient check loss is {v}")));
        }
        Ok((v, g.activation_signature()))
    };

    let mut g = Graph::new();
    let out = loss(&mut g, params)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite(format!("gradient check loss is {}", g.value(out).item())));
    }
    g.backward(out)?;
    let analytic = g.param_grads();
    let base_sig = g.activation_signature();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let numel = params.get(&name)?.numel();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("loss never used parameter {name}")))?;
        let coords: Vec<usize> = match opts.coords_per_entry {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        let mut report = EntryReport {
            name: name.clone(),
            checked: 0,
            refined: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for i in coords {
            let orig = work.get(&name)?.data()[i];
            let mut eps = opts.epsilon;
            let mut numeric = None;
            while eps >= MIN_EPSILON {
                work.get_mut(&name)?.data_mut()[i] = orig + eps;
                let (plus, sig_plus) = eval(&work)?;
                work.get_mut(&name)?.data_mut()[i] = orig - eps;
                let (minus, sig_minus) = eval(&work)?;
                work.get_mut(&name)?.data_mut()[i] = orig;
                if sig_plus == base_sig && sig_minus == base_sig {
                    numeric = Some((plus - minus) / (2.0 * eps));
                    break;
                }
                eps /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            if eps < opts.epsilon {
                report.refined += 1;
            }
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
        entries.push(report);
    }
    Ok(GradCheckReport {
        entries,
        tolerance: opts.tolerance,
    })
}

/// Gradient check of one seeded fully connected layer under the
/// half-squared Euclidean loss, every coordinate probed.
pub fn check_linear(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let mut p = ParamStore::new(seed);
    p.insert("w", rand_t(&[6, 3])?)?;
    p.insert("b", rand_t(&[3])?)?;
    let (x, y) = (rand_t(&[4, 6])?, rand_t(&[4, 3])?);
    gradient_check(
        &p,
        |g, p| {
            let xv = g.constant(x.clone());
            let w = g.param("w", p.get("w")?.clone());
            let b = g.param("b", p.get("b")?.clone());
            let out = g.fully_connected(xv, w, b)?;
            let t = g.constant(y.clone());
            g.euclidean_loss(out, t)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_case() -> (ParamStore<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut p = ParamStore::new(0);
        p.insert("w", rand_t(&[6, 3])).unwrap();
        p.insert("b", rand_t(&[3])).unwrap();
        (p, rand_t(&[4, 6]), rand_t(&[4, 3]))
    }

    #[test]
    fn linear_squared_loss_is_exact() {
        let (p, x, y) = linear_case();
        let report = gradient_check(
            &p,
            |g, p| {
                let xv = g.constant(x.clone());
                let w = g.param("w", p.get("w")?.clone());
                let b = g.param("b", p.get("b")?.clone());
                let out = g.fully_connected(xv, w, b)?;
                let t = g.constant(y.clone());
                g.euclidean_loss(out, t)
            },
            &GradCheckOptions {
                tolerance: 1e-6,
                coords_per_entry: None,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.pass(), "{report:?}");
        assert!(report.max_rel_error() < 1e-6);
        assert_eq!(report.checked(), 21);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Scaling a parameter's value by 2 inside the graph without telling
        // the tape makes the analytic gradient half the true one.
        let (p, x, y) = linear_case();
        let report = gradient_check(
            &p,
            |g, p| {
                let xv = g.constant(x.clone());
                let mut w2 = p.get("w")?.clone();
                w2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
                let _shadow = g.param("w", p.get("w")?.clone());
                let w = g.constant(w2);
                let b = g.param("b", p.get("b")?.clone());
                let out = g.fully_connected(xv, w, b)?;
                let t = g.constant(y.clone());
                g.euclidean_loss(out, t)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.pass());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut p = ParamStore::new(0);
        p.insert("w", Tensor::full([1, 1], f64::NAN)).unwrap();
        p.insert("b", Tensor::zeros([1])).unwrap();
        let err = gradient_check(
            &p,
            |g, p| {
                let x = g.constant(Tensor::full([1, 1], 1.0));
                let w = g.param("w", p.get("w")?.clone());
                let b = g.param("b", p.get("b")?.clone());
                let out = g.fully_connected(x, w, b)?;
                let t = g.constant(Tensor::zeros([1, 1]));
                g.euclidean_loss(out, t)
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
