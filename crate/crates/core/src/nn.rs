//! Small dense-layer building blocks shared by the generator and hypernetwork.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Draws `n` independent standard normal values.
pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Fully connected layer `y = W x + b` with `W` stored as (out, in).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Gaussian weights with the given standard deviation and a constant bias.
    pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize, std: f64, bias: f64) -> Self {
        let weight = Array2::from_shape_simple_fn((outputs, inputs), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Self {
            weight,
            bias: Array1::from_elem(outputs, bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Returns `dL/dx` and accumulates parameter gradients into `grad`.
    pub fn backward(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: Option<&mut Dense>) -> Array1<f64> {
        if let Some(g) = grad {
            let outer = dy
                .view()
                .insert_axis(ndarray::Axis(1))
                .dot(&x.view().insert_axis(ndarray::Axis(0)));
            g.weight += &outer;
            g.bias += &dy;
        }
        self.weight.t().dot(&dy)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 2] {
        [self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
}
