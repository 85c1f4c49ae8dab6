use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let size: usize = shape.iter().product();
        if size != data.len() {
            return Err(Error::shape("tensor", format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let size = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; size],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let size = shape.iter().product();
        Self {
            shape,
            data: vec![value; size],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient size mismatch");
        match &mut self.grad {
            Some(slot) => slot.iter_mut().zip(g).for_each(|(s, v)| *s += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows and columns when viewed as a matrix; rank-1 tensors are rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub trainable: bool,
    pub tensors: Vec<Tensor>,
    pub tensor_names: Vec<String>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            trainable: true,
            tensors: Vec::new(),
            tensor_names: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.tensors.push(t);
        self.tensor_names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Parameter values only, for bit-exact comparisons.
    pub fn same_values(&self, other: &ParamGroup) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub per_group: Vec<(String, usize)>,
    pub total: usize,
}

pub fn param_count(groups: &[ParamGroup]) -> ParamCount {
    let per_group: Vec<(String, usize)> = groups.iter().map(|g| (g.name.clone(), g.param_count())).collect();
    let total = per_group.iter().map(|p| p.1).sum();
    ParamCount { per_group, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_count() {
        let mut g = ParamGroup::new("linear");
        g.push("w", Tensor::zeros(vec![4, 3]));
        g.push("b", Tensor::zeros(vec![3]));
        let c = param_count(&[g]);
        assert_eq!(c.total, 15);
        assert_eq!(c.per_group, vec![("linear".to_string(), 15)]);
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert_eq!(Tensor::zeros(vec![5]).matrix_dims(), (1, 5));
    }
}
