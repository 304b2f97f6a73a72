//! The adaptive feature fusion (AFF) module, the residual module, and the
//! stem/head convolutions that move images in and out of the feature width.
//!
//! AFF: three two-layer conv branches (1x1, 3x3, 5x5) produce `X1, X3, X5`.
//! Their sum is globally max-pooled and fed to one two-layer fc head per
//! branch; each head's gated output `C_i` rescales its branch channel-wise,
//! and the rescaled branches are summed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LaffError, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::params::{BoundParams, ParamKind, ParamStore};
use crate::tensor::Scalar;

/// How fc head outputs become channel weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    /// Independent sigmoid per branch and channel.
    #[default]
    Sigmoid,
    /// Softmax across the three branches, per channel.
    Softmax,
    /// Raw fc outputs.
    None,
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gate::Sigmoid => "sigmoid",
            Gate::Softmax => "softmax",
            Gate::None => "none",
        })
    }
}

impl FromStr for Gate {
    type Err = LaffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Gate::Sigmoid),
            "softmax" => Ok(Gate::Softmax),
            "none" => Ok(Gate::None),
            other => Err(LaffError::Config(format!("unknown gate '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = store.push_init(
            format!("{name}.weight"),
            ParamKind::Weight,
            &[cout, cin, kernel, kernel],
            fan_in,
            rng,
        )?;
        let bias = store.push_init(format!("{name}.bias"), ParamKind::Bias, &[cout], fan_in, rng)?;
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &BoundParams<T>, x: &Var<T>) -> Result<Var<T>> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), (self.kernel - 1) / 2)
    }

    pub fn weight_count(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout
    }

    /// Multiply-accumulates per output pixel.
    pub fn macs_per_pixel(&self) -> usize {
        self.weight_count()
    }
}

/// Two same-padded convs with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvPair {
    pub first: ConvParams,
    pub second: ConvParams,
}

impl ConvPair {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: ConvParams::new(store, &format!("{name}.0"), width, width, kernel, rng)?,
            second: ConvParams::new(store, &format!("{name}.1"), width, width, kernel, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &BoundParams<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(&h)?;
        self.second.forward(g, p, &h)
    }

    pub fn weight_count(&self) -> usize {
        self.first.weight_count() + self.second.weight_count()
    }

    pub fn macs_per_pixel(&self) -> usize {
        self.first.macs_per_pixel() + self.second.macs_per_pixel()
    }
}

/// Two bias-free fc layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcPair {
    pub first: ParamId,
    pub second: ParamId,
    pub width: usize,
}

impl FcPair {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let shape = [width, width];
        Ok(Self {
            first: store.push_init(format!("{name}.0.weight"), ParamKind::Weight, &shape, width, rng)?,
            second: store.push_init(format!("{name}.1.weight"), ParamKind::Weight, &shape, width, rng)?,
            width,
        })
    }

    fn forward<T: Scalar>(&self, g: &Graph<T>, p: &BoundParams<T>, pooled: &Var<T>) -> Result<Var<T>> {
        let h = g.linear(pooled, p.var(self.first), None)?;
        let h = g.relu(&h)?;
        g.linear(&h, p.var(self.second), None)
    }

    pub fn weight_count(&self) -> usize {
        2 * self.width * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffParams {
    pub conv1: ConvPair,
    pub conv3: ConvPair,
    pub conv5: ConvPair,
    pub fc1: FcPair,
    pub fc3: FcPair,
    pub fc5: FcPair,
    pub width: usize,
}

impl AffParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: ConvPair::new(store, &format!("{name}.conv1"), width, 1, rng)?,
            conv3: ConvPair::new(store, &format!("{name}.conv3"), width, 3, rng)?,
            conv5: ConvPair::new(store, &format!("{name}.conv5"), width, 5, rng)?,
            fc1: FcPair::new(store, &format!("{name}.fc1"), width, rng)?,
            fc3: FcPair::new(store, &format!("{name}.fc3"), width, rng)?,
            fc5: FcPair::new(store, &format!("{name}.fc5"), width, rng)?,
            width,
        })
    }

    /// Learnable scalars excluding conv biases.
    pub fn weight_count(&self) -> usize {
        self.conv1.weight_count()
            + self.conv3.weight_count()
            + self.conv5.weight_count()
            + self.fc1.weight_count()
            + self.fc3.weight_count()
            + self.fc5.weight_count()
    }

    pub fn bias_count(&self) -> usize {
        6 * self.width
    }

    pub fn conv_macs_per_pixel(&self) -> usize {
        self.conv1.macs_per_pixel() + self.conv3.macs_per_pixel() + self.conv5.macs_per_pixel()
    }

    pub fn fc_macs(&self) -> usize {
        self.fc1.weight_count() + self.fc3.weight_count() + self.fc5.weight_count()
    }
}

/// Intermediate tensors of one AFF evaluation.
pub struct AffTrace<T> {
    pub branches: [Var<T>; 3],
    pub gates: [Var<T>; 3],
    pub output: Var<T>,
}

pub fn aff_forward<T: Scalar>(
    g: &Graph<T>,
    p: &BoundParams<T>,
    x: &Var<T>,
    params: &AffParams,
    gate: Gate,
) -> Result<Var<T>> {
    Ok(aff_forward_traced(g, p, x, params, gate)?.output)
}

pub fn aff_forward_traced<T: Scalar>(
    g: &Graph<T>,
    p: &BoundParams<T>,
    x: &Var<T>,
    params: &AffParams,
    gate: Gate,
) -> Result<AffTrace<T>> {
    expect_channels(x, params.width)?;
    let x1 = params.conv1.forward(g, p, x)?;
    let x3 = params.conv3.forward(g, p, x)?;
    let x5 = params.conv5.forward(g, p, x)?;
    let fused = g.add(&x1, &g.add(&x3, &x5)?)?;
    let pooled = g.global_max_pool(&fused)?;
    let z = [
        params.fc1.forward(g, p, &pooled)?,
        params.fc3.forward(g, p, &pooled)?,
        params.fc5.forward(g, p, &pooled)?,
    ];
    let gates = match gate {
        Gate::Sigmoid => [g.sigmoid(&z[0])?, g.sigmoid(&z[1])?, g.sigmoid(&z[2])?],
        Gate::None => z,
        Gate::Softmax => {
            let e = [g.exp(&z[0])?, g.exp(&z[1])?, g.exp(&z[2])?];
            let total = g.add(&e[0], &g.add(&e[1], &e[2])?)?;
            [g.div(&e[0], &total)?, g.div(&e[1], &total)?, g.div(&e[2], &total)?]
        }
    };
    let y1 = g.channel_scale(&x1, &gates[0])?;
    let y3 = g.channel_scale(&x3, &gates[1])?;
    let y5 = g.channel_scale(&x5, &gates[2])?;
    let output = g.add(&y1, &g.add(&y3, &y5)?)?;
    Ok(AffTrace {
        branches: [x1, x3, x5],
        gates,
        output,
    })
}

/// Two 3x3 convs plus an identity skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualParams {
    pub conv_a: ConvParams,
    pub conv_b: ConvParams,
}

impl ResidualParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv_a: ConvParams::new(store, &format!("{name}.conv_a"), width, width, 3, rng)?,
            conv_b: ConvParams::new(store, &format!("{name}.conv_b"), width, width, 3, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        self.conv_a.cin
    }

    pub fn weight_count(&self) -> usize {
        self.conv_a.weight_count() + self.conv_b.weight_count()
    }

    pub fn bias_count(&self) -> usize {
        self.conv_a.cout + self.conv_b.cout
    }

    pub fn macs_per_pixel(&self) -> usize {
        self.conv_a.macs_per_pixel() + self.conv_b.macs_per_pixel()
    }
}

pub fn residual_forward<T: Scalar>(
    g: &Graph<T>,
    p: &BoundParams<T>,
    x: &Var<T>,
    params: &ResidualParams,
) -> Result<Var<T>> {
    expect_channels(x, params.width())?;
    let h = params.conv_a.forward(g, p, x)?;
    let h = g.relu(&h)?;
    let h = params.conv_b.forward(g, p, &h)?;
    g.add(&h, x)
}

/// 3x3 conv from RGB to the feature width, then ReLU.
pub fn stem<T: Scalar>(g: &Graph<T>, p: &BoundParams<T>, x: &Var<T>, conv: &ConvParams) -> Result<Var<T>> {
    expect_channels(x, 3)?;
    let h = conv.forward(g, p, x)?;
    g.relu(&h)
}

/// 3x3 conv from the feature width to RGB, then sigmoid.
pub fn head<T: Scalar>(g: &Graph<T>, p: &BoundParams<T>, x: &Var<T>, conv: &ConvParams) -> Result<Var<T>> {
    expect_channels(x, conv.cin)?;
    let h = conv.forward(g, p, x)?;
    g.sigmoid(&h)
}

fn expect_channels<T: Scalar>(x: &Var<T>, channels: usize) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != channels {
        return Err(dim_err!("expected [B, {channels}, H, W] input, got {shape:?}"));
    }
    Ok(())
}
