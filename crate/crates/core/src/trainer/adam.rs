use std::collections::BTreeMap;

use super::config::AdamConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamTree, Precision, Tensor};

/// First and second moments per parameter, plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every parameter that has an entry in
/// `grads`; parameters without one are left untouched. Nothing is modified if
/// any gradient is non-finite. New values and moments are rounded to
/// `precision` so the state stays representable in it.
pub fn adam_step(
    params: &mut ParamTree,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    cfg: &AdamConfig,
    state: &mut AdamState,
    precision: Precision,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if p.tensor.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.tensor.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in {name}[{i}]",
                g.data()[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).unwrap();
        let shape = g.shape();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape));
        let w = p.tensor.data_mut().iter_mut();
        for (((w, m), v), &g) in w.zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *m = precision.round(cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            *v = precision.round(cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            *w = precision.round(*w - lr * (update + cfg.weight_decay * *w));
        }
    }
    Ok(())
}
