//! Named parameter traversal, flattening and the Adam optimizer.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::tensor_file::{DType, TensorFile};
use crate::{Error, Result};

/// A set of named parameter tensors with a fixed traversal order.
///
/// Gradient holders use the same types as the parameters they belong to, so
/// traversal order doubles as the layout of flattened vectors.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>);

    fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, v)| v.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (_, view) in self.named() {
            flat.extend(view.iter().copied());
        }
        flat
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut views = Vec::new();
        self.visit_mut("", &mut views);
        let total: usize = views.iter().map(|(_, v)| v.len()).sum();
        if total != flat.len() {
            return Err(Error::Shape(format!("expected {total} parameters, got {}", flat.len())));
        }
        let mut offset = 0;
        for (_, mut view) in views {
            let n = view.len();
            for (dst, &src) in view.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = src;
            }
            offset += n;
        }
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        let mut views = Vec::new();
        self.visit_mut("", &mut views);
        for (_, mut view) in views {
            view.fill(value);
        }
    }

    fn write_tensors(&self, file: &mut TensorFile) -> Result<()> {
        for (name, view) in self.named() {
            file.push(&name, view.shape(), view.iter().copied().collect(), DType::F64)?;
        }
        Ok(())
    }

    fn read_tensors(&mut self, file: &TensorFile) -> Result<()> {
        let mut views = Vec::new();
        self.visit_mut("", &mut views);
        for (name, mut view) in views {
            let t = file.require(&name)?;
            if t.dims != view.shape() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: file has {:?}, model expects {:?}",
                    t.dims,
                    view.shape()
                )));
            }
            for (dst, &src) in view.iter_mut().zip(&t.data) {
                *dst = src;
            }
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Adam with bias correction, operating on flattened parameter vectors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
