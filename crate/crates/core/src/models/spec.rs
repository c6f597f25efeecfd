use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SoftmaxLinear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::SoftmaxLinear => "softmax-linear",
            ModelKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-linear" => Ok(ModelKind::SoftmaxLinear),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Architecture of a desk-scale classifier.
///
/// `layers` lists the input dimension, any hidden widths and the class count
/// `K` last. Every layer is dense (`W` row-major `out × in`, then bias `b`),
/// and the activation is applied between layers but not after the last one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layers: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn softmax_linear(input_dim: usize, n_classes: usize) -> Result<Self> {
        let spec = Self {
            kind: ModelKind::SoftmaxLinear,
            layers: vec![input_dim, n_classes],
            activation: Activation::Tanh,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(layers: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self {
            kind: ModelKind::Mlp,
            layers,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::invalid("model needs at least input and output sizes"));
        }
        if self.kind == ModelKind::SoftmaxLinear && self.layers.len() != 2 {
            return Err(Error::invalid("softmax-linear has no hidden layers"));
        }
        if self.layers.iter().any(|&w| w == 0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        if self.n_classes() < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layers.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len() - 1
    }

    /// `(fan_in, fan_out)` of dense layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layers[l], self.layers[l + 1])
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_layers())
            .map(|l| {
                let (i, o) = self.layer_shape(l);
                i * o + o
            })
            .sum()
    }

    pub fn layout(&self) -> Layout {
        let mut segments = Vec::with_capacity(self.n_layers());
        let mut offset = 0;
        for l in 0..self.n_layers() {
            let (i, o) = self.layer_shape(l);
            let len = i * o + o;
            segments.push(Segment { layer: l, offset, len });
            offset += len;
        }
        Layout { segments }
    }

    /// Zero parameters.
    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(Arc::new(self.layout()))
    }

    /// Unit-scale initialisation: weights `N(0, 1/fan_in)`, zero biases.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamVector {
        let mut theta = self.zeros();
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = self.layer_shape(l);
            let seg = theta.layout().segments[l];
            let sd = (1.0 / fan_in as f64).sqrt();
            for k in 0..fan_in * fan_out {
                theta.values[seg.offset + k] = sd * rng.standard_normal();
            }
        }
        theta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

/// Partition of the flat parameter index range into per-layer segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    /// A single segment covering `0..n`.
    pub fn flat(n: usize) -> Self {
        Self {
            segments: vec![Segment {
                layer: 0,
                offset: 0,
                len: n,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Segments must be contiguous, in layer order, starting at 0.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.layer != i || s.offset != next {
                return Err(Error::Contract(format!(
                    "segment {i} does not continue the partition at offset {next}"
                )));
            }
            next += s.len;
        }
        Ok(())
    }
}

/// Flat parameter (or gradient) vector with its per-layer segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: DenseVector,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: DenseVector, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::mismatch("ParamVector", layout.len(), values.len()));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: DenseVector::zeros(layout.len()),
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: DenseVector) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    pub fn segment(&self, layer: usize) -> &[f64] {
        let s = self.layout.segments[layer];
        &self.values.as_slice()[s.offset..s.offset + s.len]
    }

    pub fn into_inner(self) -> DenseVector {
        self.values
    }
}

impl Deref for ParamVector {
    type Target = DenseVector;
    fn deref(&self) -> &DenseVector {
        &self.values
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut DenseVector {
        &mut self.values
    }
}
