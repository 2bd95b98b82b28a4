use super::tensor::Tensor;
use crate::error::{PdsError, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip_map(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(g.data())
            .map(|(&v, &d)| f(v, d))
            .collect(),
    )
    .unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => relu(v),
            Activation::Swish => v * sigmoid(v),
        }
    }

    pub fn apply_in_place(self, data: &mut [f64]) {
        data.iter_mut().for_each(|v| *v = self.apply(*v));
    }
}

/// `max(v, 0)` that keeps NaN.
fn relu(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    map(x, relu)
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(x, grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// `x * sigmoid(x)`
pub fn swish_forward(x: &Tensor) -> Tensor {
    map(x, |v| v * sigmoid(v))
}

pub fn swish_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(x, grad_out, |v, g| {
        let s = sigmoid(v);
        g * (s + v * s * (1.0 - s))
    })
}

fn glu_half(x: &Tensor) -> Result<usize> {
    let c2 = x.last_dim();
    if x.rank() == 0 || !c2.is_multiple_of(2) {
        return Err(PdsError::config(format!(
            "glu needs an even channel count, got {c2}"
        )));
    }
    Ok(c2 / 2)
}

/// Gated linear unit over the last axis: `glu(a ‖ b) = a * sigmoid(b)`.
pub fn glu_forward(x: &Tensor) -> Result<Tensor> {
    let c = glu_half(x)?;
    let rows = x.len() / (2 * c);
    let mut out = Vec::with_capacity(rows * c);
    for row in x.data().chunks_exact(2 * c) {
        let (a, b) = row.split_at(c);
        out.extend(a.iter().zip(b).map(|(a, b)| a * sigmoid(*b)));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    Tensor::new(shape, out)
}

pub fn glu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let c = glu_half(x)?;
    let mut dx = vec![0.0; x.len()];
    for ((row, drow), g) in x
        .data()
        .chunks_exact(2 * c)
        .zip(dx.chunks_exact_mut(2 * c))
        .zip(grad_out.data().chunks_exact(c))
    {
        for i in 0..c {
            let s = sigmoid(row[c + i]);
            drow[i] = g[i] * s;
            drow[c + i] = g[i] * row[i] * s * (1.0 - s);
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}
