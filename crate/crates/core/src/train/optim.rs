//! AdamW with decoupled weight decay and the polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::catn::AnyTensor;
use crate::tensor::{Scalar, Tensor};

use super::config::OptimConfig;

/// `(lr0 − lr_end)(1 − t/t_max)^p + lr_end`, with `t` clamped to `[0, t_max]`.
pub fn poly_lr(t: f64, c: &OptimConfig) -> f64 {
    let frac = (t / c.max_decay_epoch).clamp(0.0, 1.0);
    if frac >= 1.0 {
        return c.lr_end;
    }
    (c.lr0 - c.lr_end) * (1.0 - frac).powf(c.power) + c.lr_end
}

/// First and second moment buffers, one per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    ids: Vec<ParamId>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let ids: Vec<ParamId> = store.trainable().collect();
        Self {
            step: 0,
            m: ids.iter().map(|&id| vec![F::zero(); store.get(id).len()]).collect(),
            v: ids.iter().map(|&id| vec![F::zero(); store.get(id).len()]).collect(),
            ids,
        }
    }

    /// One update from the gradients held in `store`. Parameters without a
    /// gradient still receive weight decay.
    pub fn update(&mut self, store: &mut ParamStore<F>, lr: f64, c: &OptimConfig) -> Result<()> {
        for &id in &self.ids {
            if let Some(g) = &store.get(id).grad {
                if let Some(k) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of {}[{k}] is {:?}",
                        store.name(id),
                        g[k]
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let bc1 = F::c(1.0 - c.beta1.powi(t));
        let bc2 = F::c(1.0 - c.beta2.powi(t));
        let lr_f = F::c(lr);
        let decay = F::c(1.0 - lr * c.weight_decay);
        let eps = F::c(c.eps);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let grad = p.grad.take();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(F::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] = data[i] * decay - lr_f * mh / (vh.sqrt() + eps);
            }
            if let Some(k) = data.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}[{k}] became non-finite", store.name(id))));
            }
            p.grad = grad.map(|mut g| {
                g.iter_mut().for_each(|x| *x = F::zero());
                g
            });
        }
        Ok(())
    }

    /// Moments as named tensors for checkpointing.
    pub fn to_entries(&self, store: &ParamStore<F>) -> Vec<(String, AnyTensor)> {
        let mut out = Vec::with_capacity(2 * self.ids.len() + 1);
        out.push((
            "step".to_string(),
            AnyTensor::F64(Tensor::new(&[1], vec![self.step as f64]).unwrap()),
        ));
        for (k, &id) in self.ids.iter().enumerate() {
            let shape = store.get(id).shape().to_vec();
            let m = Tensor::new(&shape, self.m[k].clone()).unwrap();
            let v = Tensor::new(&shape, self.v[k].clone()).unwrap();
            out.push((format!("m.{}", store.name(id)), crate::tensor::catn::to_any(&m)));
            out.push((format!("v.{}", store.name(id)), crate::tensor::catn::to_any(&v)));
        }
        out
    }

    pub fn load_entries(&mut self, store: &ParamStore<F>, entries: &[(String, AnyTensor)]) -> Result<()> {
        let find = |name: &str| -> Result<&AnyTensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Input(format!("optimizer state is missing {name}")))
        };
        let step = find("step")?.to::<f64>().data()[0];
        self.step = step as u64;
        for (k, &id) in self.ids.iter().enumerate() {
            for (prefix, buf) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let t = find(&format!("{prefix}.{}", store.name(id)))?;
                if t.shape() != store.get(id).shape() {
                    return Err(Error::dim("optimizer moment", store.get(id).shape(), t.shape()));
                }
                buf.copy_from_slice(t.to::<F>().data());
            }
        }
        Ok(())
    }
}
