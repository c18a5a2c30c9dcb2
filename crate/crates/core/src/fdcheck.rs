//! Central-difference gradient oracles.
//!
//! The checker perturbs one parameter tensor through set/eval closures so it
//! never touches the reverse-mode path it is judging. Entries whose true
//! gradient sits below the resolution of central differences (round-off
//! `eps*|f|/h` plus `h^2` truncation, around 1e-10 for unit-scale losses) are
//! held to an absolute bound instead of the relative one.

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings { h: 1e-5, rel_tol: 1e-6, abs_floor: 2e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct FdFailure {
    pub entry: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

impl FdFailure {
    /// True when the measurement agrees within `rel_tol`, or the residual is
    /// below the central-difference noise floor (`abs_floor`).
    pub fn within(&self, rel_tol: f64, abs_floor: f64) -> bool {
        self.rel_err < rel_tol || (self.analytic - self.fd).abs() < abs_floor
    }
}

/// Check `analytic` against central differences at the given entries of a
/// parameter tensor. `set` installs a replacement tensor; `eval` recomputes
/// the scalar objective. The original value is restored before returning.
pub fn check_param_entries(
    param: &Tensor<f64>,
    analytic: &Tensor<f64>,
    entries: &[usize],
    settings: FdSettings,
    set: &mut dyn FnMut(Tensor<f64>),
    eval: &mut dyn FnMut() -> f64,
) -> Vec<FdFailure> {
    assert_eq!(param.shape(), analytic.shape(), "gradient shape mismatch");
    let base = param.data().to_vec();
    let mut failures = Vec::new();
    for &i in entries {
        let mut plus = base.clone();
        plus[i] += settings.h;
        set(Tensor::from_vec(param.shape(), plus));
        let f_plus = eval();

        let mut minus = base.clone();
        minus[i] -= settings.h;
        set(Tensor::from_vec(param.shape(), minus));
        let f_minus = eval();

        let fd = (f_plus - f_minus) / (2.0 * settings.h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / (fd.abs() + 1e-8);
        if rel >= settings.rel_tol && (a - fd).abs() >= settings.abs_floor {
            failures.push(FdFailure { entry: i, analytic: a, fd, rel_err: rel });
        }
    }
    set(Tensor::from_vec(param.shape(), base));
    failures
}

/// Directional derivative check over a whole parameter tensor: perturb along
/// a random unit direction and compare against the analytic projection. Well
/// conditioned even when individual entries carry tiny gradients.
pub fn check_param_directional(
    param: &Tensor<f64>,
    analytic: &Tensor<f64>,
    rng: &mut Rng,
    settings: FdSettings,
    set: &mut dyn FnMut(Tensor<f64>),
    eval: &mut dyn FnMut() -> f64,
) -> FdFailure {
    let base = param.data().to_vec();
    let n = base.len();
    let mut dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for d in &mut dir {
        *d /= norm;
    }

    let plus: Vec<f64> = base.iter().zip(&dir).map(|(&x, &u)| x + settings.h * u).collect();
    set(Tensor::from_vec(param.shape(), plus));
    let f_plus = eval();
    let minus: Vec<f64> = base.iter().zip(&dir).map(|(&x, &u)| x - settings.h * u).collect();
    set(Tensor::from_vec(param.shape(), minus));
    let f_minus = eval();
    set(Tensor::from_vec(param.shape(), base));

    let fd = (f_plus - f_minus) / (2.0 * settings.h);
    let a: f64 = analytic.data().iter().zip(&dir).map(|(&g, &u)| g * u).sum();
    let rel = (a - fd).abs() / (fd.abs() + 1e-8);
    FdFailure { entry: usize::MAX, analytic: a, fd, rel_err: rel }
}

/// Directional check along one random direction evaluated at several step
/// sizes, keeping the best agreement. Piecewise-smooth layers (ReLU, max
/// pooling) put kinks in the objective; a step that straddles one corrupts
/// that measurement and shrinks with h, while a genuinely wrong gradient
/// disagrees at every step size.
pub fn check_param_directional_multi_h(
    param: &Tensor<f64>,
    analytic: &Tensor<f64>,
    rng: &mut Rng,
    hs: &[f64],
    set: &mut dyn FnMut(Tensor<f64>),
    eval: &mut dyn FnMut() -> f64,
) -> FdFailure {
    let tol = FdSettings::default().rel_tol;
    let base = param.data().to_vec();
    let n = base.len();
    let mut dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for d in &mut dir {
        *d /= norm;
    }
    let a: f64 = analytic.data().iter().zip(&dir).map(|(&g, &u)| g * u).sum();

    let mut best: Option<FdFailure> = None;
    for &h in hs {
        let plus: Vec<f64> = base.iter().zip(&dir).map(|(&x, &u)| x + h * u).collect();
        set(Tensor::from_vec(param.shape(), plus));
        let f_plus = eval();
        let minus: Vec<f64> = base.iter().zip(&dir).map(|(&x, &u)| x - h * u).collect();
        set(Tensor::from_vec(param.shape(), minus));
        let f_minus = eval();
        let fd = (f_plus - f_minus) / (2.0 * h);
        let rel = (a - fd).abs() / (fd.abs() + 1e-8);
        let fail = FdFailure { entry: usize::MAX, analytic: a, fd, rel_err: rel };
        let done = fail.rel_err < tol;
        if best.as_ref().map_or(true, |b| fail.rel_err < b.rel_err) {
            best = Some(fail);
        }
        if done {
            break;
        }
    }
    set(Tensor::from_vec(param.shape(), base));
    best.expect("at least one step size")
}

/// Deterministic subsample of entry indices (all of them when small).
pub fn pick_entries(rng: &mut Rng, numel: usize, count: usize) -> Vec<usize> {
    if numel <= count {
        return (0..numel).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        picked.insert(rng.below(numel));
    }
    picked.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        // f(x) = sum(x^2), grad = 2x
        let x = Tensor::from_vec(&[3], vec![0.3, -0.7, 1.2]);
        let analytic = x.map(|v| 2.0 * v);
        let cell = std::cell::RefCell::new(x.clone());
        let mut set = |t: Tensor<f64>| *cell.borrow_mut() = t;
        let mut eval = || cell.borrow().data().iter().map(|v| v * v).sum::<f64>();
        let fails = check_param_entries(
            &x,
            &analytic,
            &[0, 1, 2],
            FdSettings::default(),
            &mut set,
            &mut eval,
        );
        assert!(fails.is_empty(), "{fails:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_vec(&[2], vec![0.5, -0.25]);
        let wrong = x.map(|v| 3.0 * v); // should be 2x
        let cell = std::cell::RefCell::new(x.clone());
        let mut set = |t: Tensor<f64>| *cell.borrow_mut() = t;
        let mut eval = || cell.borrow().data().iter().map(|v| v * v).sum::<f64>();
        let fails =
            check_param_entries(&x, &wrong, &[0, 1], FdSettings::default(), &mut set, &mut eval);
        assert_eq!(fails.len(), 2);
    }
}
