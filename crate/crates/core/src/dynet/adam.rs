use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates per parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: IndexMap<String, (Vec<Elem>, Vec<Elem>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[Elem], &[Elem])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every trainable parameter that has a
/// gradient in `grads`. Frozen parameters are skipped even when a gradient
/// is supplied.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &HashMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{name}`")))?;
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.value.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        let (m, v) = state
            .moments
            .entry(name.to_owned())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        if m.len() != g.len() {
            return Err(Error::shape(format!("optimizer state for `{name}` has {} entries, gradient {}", m.len(), g.len())));
        }
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi as f64;
            let m_new = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
            let v_new = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
            *mi = m_new as Elem;
            *vi = v_new as Elem;
            let update = cfg.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as Elem;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: Elem, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value), trainable).unwrap();
        s
    }

    fn grads(g: Elem) -> HashMap<String, Tensor> {
        HashMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1·g, v = 0.001·g², bias-corrected: m̂ = g, v̂ = g²,
        // so the step is lr·g/(|g| + eps).
        let cfg = AdamConfig::default();
        let mut s = store(1.0, true);
        let mut st = AdamState::new();
        adam_step(&mut s, &grads(0.5), &mut st, &cfg).unwrap();
        let want = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((s.tensor("w").unwrap().item() as f64 - want).abs() < 1e-6);
        let (m, v) = st.moments("w").unwrap();
        assert!((m[0] as f64 - 0.05).abs() < 1e-7);
        assert!((v[0] as f64 - 0.00025).abs() < 1e-9);

        // second step with the same gradient: m̂ and v̂ stay at g and g²
        adam_step(&mut s, &grads(0.5), &mut st, &cfg).unwrap();
        let want2 = want - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((s.tensor("w").unwrap().item() as f64 - want2).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = store(0.25, true);
        let mut st = AdamState::new();
        adam_step(&mut s, &grads(0.0), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.tensor("w").unwrap().item(), 0.25);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut s = store(0.25, false);
        let mut st = AdamState::new();
        for _ in 0..10 {
            adam_step(&mut s, &grads(3.0), &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.tensor("w").unwrap().item().to_bits(), (0.25 as Elem).to_bits());
    }

    #[test]
    fn shape_mismatch() {
        let mut s = store(0.25, true);
        let g = HashMap::from([("w".to_string(), Tensor::zeros(vec![2]))]);
        assert!(matches!(
            adam_step(&mut s, &g, &mut AdamState::new(), &AdamConfig::default()),
            Err(Error::Shape(_))
        ));
    }
}
