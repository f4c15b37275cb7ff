//! Central finite differences and the reverse-mode gradient audit built on them.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;

use super::graph::{Graph, NodeId};
use super::params::ParamTree;
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};
use crate::rng::KeyedRng;

/// Evaluates `f` once in 64-bit mode and returns the scalar.
pub fn evaluate<F>(f: &F, params: &ParamTree) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<NodeId>,
{
    let mut g = Graph::new(Precision::F64);
    let root = f(&mut g, params)?;
    let v = g.scalar_value(root)?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Reverse-mode gradients of `f` (64-bit), without touching `params.grad`.
pub fn autodiff_grad<F>(f: &F, params: &ParamTree) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<NodeId>,
{
    let mut g = Graph::new(Precision::F64);
    let root = f(&mut g, params)?;
    let mut scratch = params.clone();
    scratch.zero_grads();
    let mut grads = g.forward_backward(root, &mut scratch)?;
    // Parameters the objective never reads have zero gradient.
    for (name, p) in params.iter() {
        grads
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.tensor.shape()));
    }
    Ok(grads)
}

/// Evaluates `f` in `precision`, returning the value as `(hi, lo)`.
fn evaluate_parts<F>(f: &F, params: &ParamTree, precision: Precision) -> Result<(f64, f64)>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<NodeId>,
{
    let mut g = Graph::new(precision);
    let root = f(&mut g, params)?;
    let (hi, lo) = g.scalar_parts(root)?;
    if !hi.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {hi}")));
    }
    Ok((hi, lo))
}

fn central_difference<F>(
    f: &F,
    work: &mut ParamTree,
    name: &str,
    coord: usize,
    h: f64,
    precision: Precision,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<NodeId>,
{
    let orig = work.get(name).unwrap().tensor.data()[coord];
    let (up, down) = (orig + h, orig - h);
    work.get_mut(name).unwrap().tensor.data_mut()[coord] = up;
    let plus = evaluate_parts(f, work, precision);
    work.get_mut(name).unwrap().tensor.data_mut()[coord] = down;
    let minus = evaluate_parts(f, work, precision);
    work.get_mut(name).unwrap().tensor.data_mut()[coord] = orig;
    let ((ph, pl), (mh, ml)) = (plus?, minus?);
    // The realized step `up - down` is exact in f64 and may differ from 2h.
    Ok(((ph - mh) + (pl - ml)) / (up - down))
}

/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of every parameter, in 64-bit.
pub fn finite_diff_grad<F>(f: &F, params: &ParamTree, h: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<NodeId>,
{
    finite_diff_grad_in(f, params, h, Precision::F64)
}

/// [`finite_diff_grad`] with the objective evaluated in `precision`.
pub fn finite_diff_grad_in<F>(
    f: &F,
    params: &ParamTree,
    h: f64,
    precision: Precision,
) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {h}")));
    }
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    let mut out = BTreeMap::new();
    for name in names {
        let shape = params.get(&name).unwrap().tensor.shape().to_vec();
        let n = params.get(&name).unwrap().tensor.numel();
        let mut g = Vec::with_capacity(n);
        for c in 0..n {
            g.push(central_difference(f, &mut work, &name, c, h, precision)?);
        }
        out.insert(name, Tensor::new(shape, g)?);
    }
    Ok(out)
}

/// Which coordinates a gradient check visits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordSelection {
    All,
    /// At most `per_param` coordinates per tensor, drawn without replacement.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub rel_tol: f64,
    pub h: f64,
    pub coords: CoordSelection,
    /// Arithmetic of the finite-difference evaluations. `Extended` removes the
    /// `ulp(f) / h` cancellation floor that 64-bit differences hit on
    /// coordinates with tiny gradients.
    pub oracle: Precision,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-4,
            // small enough that the O(h^2) truncation term stays far below
            // tolerance on high-curvature coordinates; the extended oracle
            // has no cancellation floor to push back
            h: 1e-6,
            coords: CoordSelection::All,
            oracle: Precision::Extended,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub rel_tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error > self.rel_tol)
    }
}

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-12)
}

/// Compares reverse-mode gradients with central differences.
pub fn grad_check<F>(f: &F, params: &ParamTree, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamTree) -> Result<NodeId> + Sync,
{
    if !(opts.rel_tol > 0.0) {
        return Err(Error::Contract("rel_tol must be positive".into()));
    }
    if !(opts.h > 0.0) {
        return Err(Error::Contract(format!("step size must be positive, got {}", opts.h)));
    }
    let ad = autodiff_grad(f, params)?;
    let names: Vec<(usize, &String)> = params.iter().map(|(n, _)| n).enumerate().collect();
    // one working copy per tensor; tensors are checked in parallel
    let checks: Vec<ParamCheck> = names
        .par_iter()
        .map(|&(pi, name)| -> Result<ParamCheck> {
            let n = params.get(name).unwrap().tensor.numel();
            let coords: Vec<usize> = match opts.coords {
                CoordSelection::All => (0..n).collect(),
                CoordSelection::Sample { per_param, seed } if per_param < n => {
                    let mut rng = KeyedRng::new(seed, &[pi as u64]);
                    let mut v = sample(rng.inner(), n, per_param).into_vec();
                    v.sort_unstable();
                    v
                }
                CoordSelection::Sample { .. } => (0..n).collect(),
            };
            let mut work = params.clone();
            let g_ad = ad[name].data();
            let mut worst = (0.0f64, 0usize);
            for &c in &coords {
                let fd = central_difference(f, &mut work, name, c, opts.h, opts.oracle)?;
                let e = relative_error(g_ad[c], fd);
                if e > worst.0 {
                    worst = (e, c);
                }
            }
            Ok(ParamCheck {
                name: name.clone(),
                max_rel_error: worst.0,
                worst_coord: worst.1,
                coords_checked: coords.len(),
            })
        })
        .collect::<Result<_>>()?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    let max_rel_error = worst.map_or(0.0, |w| w.max_rel_error);
    let worst_param = worst.map(|w| w.name.clone());
    Ok(GradCheckReport {
        passed: max_rel_error <= opts.rel_tol,
        params: checks,
        max_rel_error,
        worst_param,
        rel_tol: opts.rel_tol,
    })
}
