//! Parameterized building blocks. Internals follow the usual DARTS layout:
//! ReLU, then convolution, then batch norm.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::kernels::ConvGeometry;
use crate::params::{ParamId, ParamStore};

/// A convolution whose weight lives in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv {
    pub geom: ConvGeometry,
    pub weight: ParamId,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeometry,
    ) -> Self {
        let shape = geom.weight_shape(c_in, c_out);
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = store.add_uniform(name, &shape, fan_in, rng);
        Self { geom, weight }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        g.conv2d(x, w, self.geom)
    }
}

/// ReLU, dense k x k convolution, batch norm.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    conv: Conv,
}

impl ReluConvBn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv::new(store, rng, name, c_in, c_out, ConvGeometry::dense(kernel, stride));
        Self { conv }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let r = g.relu(x)?;
        let c = self.conv.forward(g, store, r)?;
        g.batch_norm(c)
    }
}

/// ReLU, depthwise k x k (optionally dilated), pointwise 1 x 1, batch norm.
#[derive(Clone, Debug)]
struct DepthwiseUnit {
    depthwise: Conv,
    pointwise: Conv,
}

impl DepthwiseUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let depthwise = Conv::new(
            store,
            rng,
            &format!("{name}.dw"),
            channels,
            channels,
            ConvGeometry::depthwise(kernel, stride, dilation, channels),
        );
        let pointwise = Conv::new(
            store,
            rng,
            &format!("{name}.pw"),
            channels,
            channels,
            ConvGeometry::dense(1, 1),
        );
        Self { depthwise, pointwise }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let r = g.relu(x)?;
        let d = self.depthwise.forward(g, store, r)?;
        let p = self.pointwise.forward(g, store, d)?;
        g.batch_norm(p)
    }
}

/// Separable convolution: two depthwise units, the first carrying the stride.
#[derive(Clone, Debug)]
pub struct SepConv {
    first: DepthwiseUnit,
    second: DepthwiseUnit,
}

impl SepConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            first: DepthwiseUnit::new(store, rng, &format!("{name}.0"), channels, kernel, stride, 1),
            second: DepthwiseUnit::new(store, rng, &format!("{name}.1"), channels, kernel, 1, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        self.second.forward(g, store, h)
    }
}

/// Dilated convolution: one depthwise unit with dilation 2.
#[derive(Clone, Debug)]
pub struct DilConv {
    unit: DepthwiseUnit,
}

impl DilConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            unit: DepthwiseUnit::new(store, rng, name, channels, kernel, stride, 2),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.unit.forward(g, store, x)
    }
}

/// Stride-2 channel alignment: ReLU, then two 1 x 1 stride-2 convolutions,
/// one on the input and one on the input shifted by one pixel, concatenated
/// and batch-normalized. An output width of 1 uses a single convolution.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    even: Conv,
    odd: Option<Conv>,
}

impl FactorizedReduce {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let geom = ConvGeometry::dense(1, 2);
        if c_out == 1 {
            return Self {
                even: Conv::new(store, rng, &format!("{name}.a"), c_in, 1, geom),
                odd: None,
            };
        }
        let half = c_out / 2;
        Self {
            even: Conv::new(store, rng, &format!("{name}.a"), c_in, half, geom),
            odd: Some(Conv::new(store, rng, &format!("{name}.b"), c_in, c_out - half, geom)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let r = g.relu(x)?;
        let a = self.even.forward(g, store, r)?;
        let out = match &self.odd {
            Some(odd) => {
                let shifted = g.crop(r)?;
                let b = odd.forward(g, store, shifted)?;
                g.concat_channel(&[a, b])?
            }
            None => a,
        };
        g.batch_norm(out)
    }
}

/// Fully connected layer with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.w"), &[fan_out, fan_in], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}
