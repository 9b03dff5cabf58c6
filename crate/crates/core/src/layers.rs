//! Minimal dense layers with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `y = x Wᵀ + b` applied to each row of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// He-style normal initialisation, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || normal.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns parameter gradients and the gradient with respect to `x`.
    pub fn backward(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> (LinearGrad, Array2<f64>) {
        let grad = LinearGrad {
            weight: grad_out.t().dot(&x),
            bias: grad_out.sum_axis(Axis(0)),
        };
        (grad, grad_out.dot(&self.weight))
    }

    pub fn apply(&mut self, grad: &LinearGrad, lr: f64) {
        self.weight.scaled_add(-lr, &grad.weight);
        self.bias.scaled_add(-lr, &grad.bias);
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

impl LinearGrad {
    pub fn zeros_like(layer: &Linear) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &LinearGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Zeroes `grad` where the pre-activation was not positive.
pub fn relu_backward(pre: &Array2<f64>, grad: &mut Array2<f64>) {
    ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}
