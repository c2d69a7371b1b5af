//! Scalar activations and a caching element-wise activation layer.
//!
//! Hard variants follow the MobileNet-V3 definitions:
//! `hard_sigmoid(x) = relu6(x + 3) / 6`, `h_swish(x) = x * hard_sigmoid(x)`.
//! Gradients at the clip corners take the left-continuous branch, which is
//! what a relu6-based implementation produces.

use ndarray::Array5;

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn hard_sigmoid(x: f64) -> f64 {
    ((x + 3.0).clamp(0.0, 6.0)) / 6.0
}

#[inline]
pub fn hard_sigmoid_grad(x: f64) -> f64 {
    if x > -3.0 && x < 3.0 {
        1.0 / 6.0
    } else {
        0.0
    }
}

#[inline]
pub fn h_swish(x: f64) -> f64 {
    x * hard_sigmoid(x)
}

#[inline]
pub fn h_swish_grad(x: f64) -> f64 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        (2.0 * x + 3.0) / 6.0
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which nonlinearity a layer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    HSwish,
}

impl ActKind {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => relu(x),
            ActKind::HSwish => h_swish(x),
        }
    }

    #[inline]
    pub fn grad(self, x: f64) -> f64 {
        match self {
            ActKind::Relu => relu_grad(x),
            ActKind::HSwish => h_swish_grad(x),
        }
    }
}

/// Element-wise activation over a 5-D feature map.
#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActKind,
    cache_x: Option<Array5<f64>>,
}

impl Activation {
    pub fn new(kind: ActKind) -> Self {
        Activation { kind, cache_x: None }
    }

    pub fn infer(&self, x: &Array5<f64>) -> Array5<f64> {
        x.mapv(|v| self.kind.eval(v))
    }

    pub fn train_fwd(&mut self, x: &Array5<f64>) -> Array5<f64> {
        let y = self.infer(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array5<f64>) -> Array5<f64> {
        let x = self.cache_x.take().expect("backward without train_fwd");
        let kind = self.kind;
        let mut dx = dy.clone();
        dx.zip_mut_with(&x, |g, &v| *g *= kind.grad(v));
        dx
    }
}
