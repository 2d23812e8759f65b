//! Central finite-difference checks of reverse-mode gradients.

use std::fmt;

use crate::autodiff::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that gradients which are
/// analytically zero compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Anything whose scalar loss can be evaluated at perturbed parameters and
/// differentiated analytically.
pub trait GradCheckTarget {
    fn num_tensors(&self) -> usize;
    fn tensor_mut(&mut self, i: usize) -> &mut [f64];
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradient for every tensor, in the same order.
    fn analytic(&mut self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(tensor, entry)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entries, h={:e}: max rel err {:.3e} {} {:e} -> {}",
            self.entries_checked,
            self.step,
            self.max_rel_err,
            if self.passed { "<=" } else { ">" },
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares every analytic gradient entry against
/// `(f(θ+h) - f(θ-h)) / 2h`.
pub fn run_grad_check<T: GradCheckTarget + ?Sized>(
    target: &mut T,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::contract(format!("finite-difference step {h} outside [1e-6, 1e-4]")));
    }
    let f0 = target.loss()?;
    let f1 = target.loss()?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::contract(format!(
            "loss is not deterministic: {f0} vs {f1}"
        )));
    }
    let analytic = target.analytic()?;
    if analytic.len() != target.num_tensors() {
        return Err(Error::contract("analytic gradient count mismatch"));
    }
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut entries = 0;
    for (t, grad) in analytic.iter().enumerate() {
        if grad.len() != target.tensor_mut(t).len() {
            return Err(Error::contract(format!("gradient length mismatch on tensor {t}")));
        }
        for (k, &a) in grad.iter().enumerate() {
            let orig = target.tensor_mut(t)[k];
            target.tensor_mut(t)[k] = orig + h;
            let up = target.loss()?;
            target.tensor_mut(t)[k] = orig - h;
            let down = target.loss()?;
            target.tensor_mut(t)[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            if err > max_rel_err || worst.is_none() {
                max_rel_err = err;
                worst = Some((t, k));
            }
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        entries_checked: entries,
        step: h,
        tol,
        passed: max_rel_err <= tol,
    })
}

struct ClosureTarget<'a, F> {
    params: &'a mut [Tensor],
    f: F,
}

impl<F> ClosureTarget<'_, F>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    fn build(&mut self, track: bool) -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if track {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let loss = (self.f)(&mut g, &vars)?;
        Ok((g, vars, loss))
    }
}

impl<F> GradCheckTarget for ClosureTarget<'_, F>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    fn num_tensors(&self) -> usize {
        self.params.len()
    }

    fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        self.params[i].data_mut()
    }

    fn loss(&mut self) -> Result<f64> {
        let (g, _, loss) = self.build(false)?;
        g.value(loss).item()
    }

    fn analytic(&mut self) -> Result<Vec<Vec<f64>>> {
        let (g, vars, loss) = self.build(true)?;
        let grads = g.backward(loss)?;
        Ok(vars
            .iter()
            .zip(self.params.iter())
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect())
    }
}

/// Gradient check of a scalar function built on a fresh graph from leaves
/// holding `params`.
pub fn grad_check<F>(f: F, params: &mut [Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut target = ClosureTarget { params, f };
    run_grad_check(&mut target, h, tol)
}
