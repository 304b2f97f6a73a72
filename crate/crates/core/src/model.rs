//! The nine-block LAFFNet assembly and its parameter/FLOP ledger.
//!
//! Layout: stem, nine local blocks of three modules, head. Odd blocks are
//! `[residual, AFF, residual]`, even blocks are three residuals. Blocks 1-5
//! form the encoder and 6-9 the decoder; encoder block `i`'s output is added
//! to decoder block `10 - i`'s input. There is no resampling anywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{aff_forward, head, residual_forward, stem, AffParams, ConvPair, ConvParams, Gate, ResidualParams};
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NUM_BLOCKS: usize = 9;
pub const MIN_SPATIAL: usize = 8;

/// Parameter count reported for the published network.
pub const REFERENCE_PARAMS: usize = 150_000;
/// GFLOPs reported for the published network.
pub const REFERENCE_GFLOPS: f64 = 9.771;

/// What sits in the middle slot of the odd blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    #[default]
    Aff,
    /// A plain conv-ReLU-conv 3x3 stack at the same width (ablation baseline).
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub gate: Gate,
    #[serde(default)]
    pub variant: FusionVariant,
    #[serde(default = "default_true")]
    pub skip_connections: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            gate: Gate::Sigmoid,
            variant: FusionVariant::Aff,
            skip_connections: true,
        }
    }
}

impl ModelConfig {
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Residual(ResidualParams),
    Aff(AffParams),
    Vanilla(ConvPair),
}

impl Module {
    pub fn kind(&self) -> &'static str {
        match self {
            Module::Residual(_) => "residual",
            Module::Aff(_) => "aff",
            Module::Vanilla(_) => "vanilla",
        }
    }

    fn weight_count(&self) -> usize {
        match self {
            Module::Residual(r) => r.weight_count(),
            Module::Aff(a) => a.weight_count(),
            Module::Vanilla(v) => v.weight_count(),
        }
    }

    fn bias_count(&self) -> usize {
        match self {
            Module::Residual(r) => r.bias_count(),
            Module::Aff(a) => a.bias_count(),
            Module::Vanilla(v) => v.first.cout + v.second.cout,
        }
    }

    /// `(conv MACs per pixel, resolution-independent MACs)`.
    fn macs(&self) -> (usize, usize) {
        match self {
            Module::Residual(r) => (r.macs_per_pixel(), 0),
            Module::Aff(a) => (a.conv_macs_per_pixel(), a.fc_macs()),
            Module::Vanilla(v) => (v.macs_per_pixel(), 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalBlock {
    pub modules: [Module; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaffNetModel<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stem: ConvParams,
    pub blocks: Vec<LocalBlock>,
    pub head: ConvParams,
}

/// Builds a width-`width` sigmoid-gated model.
pub fn build(width: usize, gate: Gate, seed: u64) -> Result<LaffNetModel<f32>> {
    LaffNetModel::build(
        ModelConfig {
            width,
            gate,
            ..ModelConfig::default()
        },
        seed,
    )
}

impl<T: Scalar> LaffNetModel<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.width == 0 {
            return Err(crate::LaffError::Config("width must be >= 1".into()));
        }
        let width = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem = ConvParams::new(&mut params, "stem", 3, width, 3, &mut rng)?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for b in 1..=NUM_BLOCKS {
            let res = |slot: usize, params: &mut ParamStore<T>, rng: &mut ChaCha8Rng| {
                ResidualParams::new(params, &format!("block{b}.res{slot}"), width, rng).map(Module::Residual)
            };
            let first = res(0, &mut params, &mut rng)?;
            let middle = if b % 2 == 1 {
                match config.variant {
                    FusionVariant::Aff => Module::Aff(AffParams::new(&mut params, &format!("block{b}.aff"), width, &mut rng)?),
                    FusionVariant::Vanilla => {
                        Module::Vanilla(ConvPair::new(&mut params, &format!("block{b}.vanilla"), width, 3, &mut rng)?)
                    }
                }
            } else {
                res(1, &mut params, &mut rng)?
            };
            let last = res(2, &mut params, &mut rng)?;
            blocks.push(LocalBlock {
                modules: [first, middle, last],
            });
        }
        let head = ConvParams::new(&mut params, "head", width, 3, 3, &mut rng)?;
        Ok(Self {
            config,
            params,
            stem,
            blocks,
            head,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn count_modules(&self, kind: &str) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.modules.iter())
            .filter(|m| m.kind() == kind)
            .count()
    }

    /// Copies the structure with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> LaffNetModel<U> {
        LaffNetModel {
            config: self.config,
            params: self.params.cast(),
            stem: self.stem,
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }

    /// Records the forward pass into `g`. `image` is `[B, 3, H, W]` in `[0, 1]`.
    pub fn forward(&self, g: &Graph<T>, image: &Var<T>) -> Result<Var<T>> {
        let p = self.params.bind(g)?;
        self.forward_bound(g, &p, image)
    }

    pub fn forward_bound(&self, g: &Graph<T>, p: &BoundParams<T>, image: &Var<T>) -> Result<Var<T>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(dim_err!("expected [B, 3, H, W] image, got {shape:?}"));
        }
        if shape[2] < MIN_SPATIAL || shape[3] < MIN_SPATIAL {
            return Err(dim_err!(
                "image is {}x{}; the network needs at least {MIN_SPATIAL}x{MIN_SPATIAL}",
                shape[2],
                shape[3]
            ));
        }
        let mut x = stem(g, p, image, &self.stem)?;
        let encoder_blocks = NUM_BLOCKS / 2 + 1;
        let mut encoder_out: Vec<Var<T>> = Vec::with_capacity(encoder_blocks);
        for (i, block) in self.blocks.iter().enumerate() {
            let index = i + 1;
            if index > encoder_blocks && self.config.skip_connections {
                let partner = NUM_BLOCKS + 1 - index;
                x = g.add(&x, &encoder_out[partner - 1])?;
            }
            x = self.block_forward(g, p, block, &x)?;
            if index <= encoder_blocks {
                encoder_out.push(x.clone());
            }
        }
        head(g, p, &x, &self.head)
    }

    fn block_forward(&self, g: &Graph<T>, p: &BoundParams<T>, block: &LocalBlock, x: &Var<T>) -> Result<Var<T>> {
        let mut x = x.clone();
        for module in &block.modules {
            x = match module {
                Module::Residual(r) => residual_forward(g, p, &x, r)?,
                Module::Aff(a) => aff_forward(g, p, &x, a, self.config.gate)?,
                Module::Vanilla(v) => v.forward(g, p, &x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass without recording, for inference.
    pub fn enhance(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference();
        let x = g.try_input(image.clone())?;
        Ok(self.forward(&g, &x)?.to_tensor())
    }

    /// Exact parameter ledger by enumeration of the structure.
    pub fn count_params(&self) -> CostReport {
        self.cost_report(None)
    }

    /// Parameter ledger plus analytic forward MACs at `height x width`.
    pub fn count_flops(&self, height: usize, width: usize) -> CostReport {
        self.cost_report(Some((height, width)))
    }

    fn cost_report(&self, resolution: Option<(usize, usize)>) -> CostReport {
        let pixels = resolution.map_or(1, |(h, w)| h * w);
        let conv_item = |name: String, c: &ConvParams| CostItem {
            name,
            kind: "conv".into(),
            params_no_bias: c.weight_count(),
            params_bias: c.cout,
            macs: c.macs_per_pixel() * pixels,
        };
        let mut items = vec![conv_item("stem".into(), &self.stem)];
        for (b, block) in self.blocks.iter().enumerate() {
            for (slot, m) in block.modules.iter().enumerate() {
                let (per_pixel, fixed) = m.macs();
                items.push(CostItem {
                    name: format!("block{}.{}{}", b + 1, m.kind(), slot),
                    kind: m.kind().into(),
                    params_no_bias: m.weight_count(),
                    params_bias: m.bias_count(),
                    macs: per_pixel * pixels + fixed,
                });
            }
        }
        items.push(conv_item("head".into(), &self.head));
        let params_no_bias = items.iter().map(|i| i.params_no_bias).sum();
        let params_bias: usize = items.iter().map(|i| i.params_bias).sum();
        let macs: usize = items.iter().map(|i| i.macs).sum();
        CostReport {
            width: self.config.width,
            gate: self.config.gate,
            variant: self.config.variant,
            resolution,
            params_no_bias,
            params_total: params_no_bias + params_bias,
            macs,
            flops_2x: 2 * macs,
            items,
            assumptions: topology_assumptions(self.config.width),
        }
    }
}

fn topology_assumptions(width: usize) -> Vec<String> {
    let fc = format!("every AFF branch is a two-layer conv; each of the three fc heads has two bias-free {width}x{width} layers");
    [
        "nine local blocks; odd blocks [residual, aff, residual], even blocks [residual x3]",
        fc.as_str(),
        "residual modules use two 3x3 convs",
        "stem and head are 3x3 convs between RGB and the feature width",
        "skip connections are additive (encoder i -> decoder 10-i), so they add no parameters",
        "conv biases are counted separately and excluded from the bias-free total",
        "MACs count k*k*Cin*Cout per output pixel per conv plus fc weights; activations, pooling and additions are free",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostItem {
    pub name: String,
    pub kind: String,
    pub params_no_bias: usize,
    pub params_bias: usize,
    pub macs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub width: usize,
    pub gate: Gate,
    pub variant: FusionVariant,
    pub resolution: Option<(usize, usize)>,
    pub params_no_bias: usize,
    pub params_total: usize,
    pub macs: usize,
    pub flops_2x: usize,
    pub items: Vec<CostItem>,
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopConvention {
    Mac,
    TwoMac,
}

impl CostReport {
    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn gflops_2x(&self) -> f64 {
        self.flops_2x as f64 / 1e9
    }

    /// Relative difference of the bias-free total from the published count.
    pub fn param_delta(&self) -> f64 {
        (self.params_no_bias as f64 - REFERENCE_PARAMS as f64) / REFERENCE_PARAMS as f64
    }

    /// The FLOP convention whose value lies closest (in log ratio) to the
    /// published figure, with that ratio.
    pub fn nearest_convention(&self) -> (FlopConvention, f64) {
        let r_mac = self.gmacs() / REFERENCE_GFLOPS;
        let r_2x = self.gflops_2x() / REFERENCE_GFLOPS;
        if r_mac.ln().abs() <= r_2x.ln().abs() {
            (FlopConvention::Mac, r_mac)
        } else {
            (FlopConvention::TwoMac, r_2x)
        }
    }

    /// Items summed per local block (stem and head stand alone).
    pub fn per_block(&self) -> Vec<(String, usize, usize, usize)> {
        let mut out: Vec<(String, usize, usize, usize)> = Vec::new();
        for item in &self.items {
            let group = item.name.split('.').next().unwrap_or(&item.name).to_string();
            match out.last_mut() {
                Some(last) if last.0 == group => {
                    last.1 += item.params_no_bias;
                    last.2 += item.params_bias;
                    last.3 += item.macs;
                }
                _ => out.push((group, item.params_no_bias, item.params_bias, item.macs)),
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "LAFFNet cost ledger (width {}, gate {}, variant {:?})",
            self.width, self.gate, self.variant
        );
        let _ = writeln!(s, "{:<16} {:>10} {:>8} {:>16}", "module", "params", "bias", "MACs");
        for item in &self.items {
            let _ = writeln!(
                s,
                "{:<16} {:>10} {:>8} {:>16}",
                item.name, item.params_no_bias, item.params_bias, item.macs
            );
        }
        let _ = writeln!(s, "per block:");
        for (name, p, b, m) in self.per_block() {
            let _ = writeln!(s, "  {name:<14} {p:>10} {b:>8} {m:>16}");
        }
        let _ = writeln!(s, "total params (bias-free): {}", self.params_no_bias);
        let _ = writeln!(s, "total params (with bias): {}", self.params_total);
        let _ = writeln!(
            s,
            "reference params: {} -> delta {:+} ({:+.1}%)",
            REFERENCE_PARAMS,
            self.params_no_bias as i64 - REFERENCE_PARAMS as i64,
            100.0 * self.param_delta()
        );
        if let Some((h, w)) = self.resolution {
            let (conv, ratio) = self.nearest_convention();
            let _ = writeln!(s, "forward cost at {h}x{w}:");
            let _ = writeln!(s, "  MAC convention:   {:.3} G", self.gmacs());
            let _ = writeln!(s, "  2xMAC convention: {:.3} G", self.gflops_2x());
            let _ = writeln!(
                s,
                "  reference: {REFERENCE_GFLOPS} GFLOPs; nearest convention {:?} (ratio {:.3})",
                conv, ratio
            );
        }
        let _ = writeln!(s, "topology assumptions:");
        for a in &self.assumptions {
            let _ = writeln!(s, "  - {a}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_census() {
        let m = build(16, Gate::Sigmoid, 0).unwrap();
        assert_eq!(m.blocks.len(), 9);
        assert_eq!(m.count_modules("aff"), 5);
        assert_eq!(m.count_modules("residual"), 22);
        for (i, b) in m.blocks.iter().enumerate() {
            let kinds: Vec<_> = b.modules.iter().map(|m| m.kind()).collect();
            if i % 2 == 0 {
                assert_eq!(kinds, ["residual", "aff", "residual"]);
            } else {
                assert_eq!(kinds, ["residual", "residual", "residual"]);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build(16, Gate::Sigmoid, 7).unwrap();
        let b = build(16, Gate::Sigmoid, 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = build(16, Gate::Sigmoid, 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn ledger_totals() {
        let m = build(16, Gate::Sigmoid, 0).unwrap();
        let r = m.count_params();
        assert_eq!(r.params_no_bias, 199_520);
        assert_eq!(r.params_no_bias, m.params.count(false));
        assert_eq!(r.params_total, m.params.count(true));
        let aff = r.items.iter().find(|i| i.kind == "aff").unwrap();
        assert_eq!(aff.params_no_bias, 19_456);
        let sum: usize = r.items.iter().map(|i| i.params_no_bias).sum();
        assert_eq!(sum, r.params_no_bias);
    }

    #[test]
    fn flops_closed_forms() {
        let m = build(16, Gate::Sigmoid, 0).unwrap();
        let r = m.count_flops(256, 256);
        let res = r.items.iter().find(|i| i.kind == "residual").unwrap();
        assert_eq!(res.macs, 2 * 150_994_944);
        assert_eq!(r.macs, 191_840 * 65_536 + 5 * 1_536);
        assert_eq!(r.flops_2x, 2 * r.macs);

        let unit = m.count_flops(1, 1);
        let conv_sum: usize = 432 + 432 + 22 * 4_608 + 5 * 17_920;
        assert_eq!(unit.macs, conv_sum + 5 * 1_536);
    }

    #[test]
    fn forward_shapes_and_range() {
        let m = build(4, Gate::Sigmoid, 1).unwrap();
        let img = Tensor::<f32>::full(&[1, 3, 20, 24], 0.4).unwrap();
        let out = m.enhance(&img).unwrap();
        assert_eq!(out.shape(), &[1, 3, 20, 24]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let tiny = Tensor::<f32>::full(&[1, 3, 7, 20], 0.4).unwrap();
        assert!(m.enhance(&tiny).is_err());
    }
}
