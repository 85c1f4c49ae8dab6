use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::ParamGroup;

/// Adam moments for every tensor of a fixed group layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
}

impl AdamState {
    pub fn new(groups: &[ParamGroup], lr: f64) -> Self {
        let zeros: Vec<Vec<Vec<f64>>> = groups
            .iter()
            .map(|g| g.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
            .collect();
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every trainable group; clears all
/// gradient slots afterwards.
pub fn adam_step(groups: &mut [ParamGroup], state: &mut AdamState) -> Result<()> {
    if state.m.len() != groups.len()
        || groups
            .iter()
            .zip(&state.m)
            .any(|(g, m)| g.tensors.len() != m.len() || g.tensors.iter().zip(m).any(|(t, mm)| t.len() != mm.len()))
    {
        return Err(Error::InvalidState("optimizer state does not match parameter layout".into()));
    }
    for g in groups.iter().filter(|g| g.trainable) {
        if let Some(i) = g.tensors.iter().position(|t| t.grad().is_none()) {
            return Err(Error::InvalidState(format!(
                "missing gradient for {}/{}",
                g.name,
                g.tensor_names.get(i).map_or("?", String::as_str)
            )));
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (gi, group) in groups.iter_mut().enumerate() {
        if group.trainable {
            for (ti, tensor) in group.tensors.iter_mut().enumerate() {
                let grad = tensor.grad().expect("checked above").to_vec();
                let m = &mut state.m[gi][ti];
                let v = &mut state.v[gi][ti];
                for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                    let g = grad[j];
                    m[j] = b1 * m[j] + (1.0 - b1) * g;
                    v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        group.clear_grads();
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_group(p: f64, trainable: bool) -> ParamGroup {
        let mut g = ParamGroup::new("p");
        g.trainable = trainable;
        g.push("p", Tensor::new(vec![1], vec![p]).unwrap());
        g
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut groups = vec![scalar_group(1.0, true)];
        let mut st = AdamState::new(&groups, 0.1);
        groups[0].tensors[0].accumulate_grad(&[1.0]);
        adam_step(&mut groups, &mut st).unwrap();
        assert!((groups[0].tensors[0].data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(st.step, 1);
        assert!(groups[0].tensors[0].grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut groups = vec![scalar_group(1.0, true)];
        let mut st = AdamState::new(&groups, 0.1);
        groups[0].tensors[0].accumulate_grad(&[0.0]);
        adam_step(&mut groups, &mut st).unwrap();
        assert_eq!(groups[0].tensors[0].data()[0], 1.0);
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut groups = vec![scalar_group(1.0, false), scalar_group(2.0, true)];
        let mut st = AdamState::new(&groups, 0.1);
        for _ in 0..5 {
            groups[0].tensors[0].accumulate_grad(&[3.0]);
            groups[1].tensors[0].accumulate_grad(&[3.0]);
            adam_step(&mut groups, &mut st).unwrap();
        }
        assert_eq!(groups[0].tensors[0].data()[0].to_bits(), 1.0f64.to_bits());
        assert!(groups[1].tensors[0].data()[0] < 2.0);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut groups = vec![scalar_group(1.0, true)];
        let mut st = AdamState::new(&groups, 0.1);
        assert!(matches!(adam_step(&mut groups, &mut st), Err(Error::InvalidState(_))));
        let mut other = vec![scalar_group(1.0, true), scalar_group(1.0, true)];
        other[0].tensors[0].accumulate_grad(&[1.0]);
        other[1].tensors[0].accumulate_grad(&[1.0]);
        assert!(matches!(adam_step(&mut other, &mut st), Err(Error::InvalidState(_))));
    }
}
