//! Training objectives, all expressed as graph operations so they
//! differentiate through the same tape as the network.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{LaffError, Result};
use crate::graph::{Graph, Var};
use crate::params::init_bound;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub charbonnier: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            charbonnier: 1.0,
            ssim: 1.1,
            perceptual: 0.1,
        }
    }
}

impl LossWeights {
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            charbonnier: self.charbonnier * factor,
            ssim: self.ssim * factor,
            perceptual: self.perceptual * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("charbonnier", self.charbonnier), ("ssim", self.ssim), ("perceptual", self.perceptual)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LaffError::Config(format!("loss weight {name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Windowed-statistics parameters for SSIM. Defaults assume `[0, 1]` images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub c1: f64,
    pub c2: f64,
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(LaffError::Config("SSIM constants must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(LaffError::Config(format!("SSIM window must be odd, got {}", self.window)));
        }
        if !(self.sigma > 0.0) {
            return Err(LaffError::Config("SSIM sigma must be positive".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps<T: Scalar>(&self) -> Rc<Vec<T>> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Rc::new(raw.into_iter().map(|v| T::from_f64_lossy(v / total)).collect())
    }
}

/// `mean(sqrt((J - Ĵ)^2 + eps^2))`.
pub fn charbonnier<T: Scalar>(g: &Graph<T>, target: &Var<T>, pred: &Var<T>, eps: f64) -> Result<Var<T>> {
    if eps < 0.0 {
        return Err(LaffError::Config(format!("charbonnier eps must be >= 0, got {eps}")));
    }
    let d = g.sub(target, pred)?;
    let sq = g.mul(&d, &d)?;
    let sq = g.offset(&sq, T::from_f64_lossy(eps * eps))?;
    let r = g.sqrt(&sq)?;
    g.mean(&r)
}

/// Mean SSIM over every window position, channel and batch entry.
pub fn ssim<T: Scalar>(g: &Graph<T>, x: &Var<T>, y: &Var<T>, cfg: &SsimConfig) -> Result<Var<T>> {
    cfg.validate()?;
    x.value().expect_same_shape(y.value())?;
    let taps = cfg.taps::<T>();
    let c1 = T::from_f64_lossy(cfg.c1);
    let c2 = T::from_f64_lossy(cfg.c2);
    let two = T::from_f64_lossy(2.0);

    let mu_x = g.blur_valid(x, Rc::clone(&taps))?;
    let mu_y = g.blur_valid(y, Rc::clone(&taps))?;
    let mu_xx = g.mul(&mu_x, &mu_x)?;
    let mu_yy = g.mul(&mu_y, &mu_y)?;
    let mu_xy = g.mul(&mu_x, &mu_y)?;
    let s_xx = g.sub(&g.blur_valid(&g.mul(x, x)?, Rc::clone(&taps))?, &mu_xx)?;
    let s_yy = g.sub(&g.blur_valid(&g.mul(y, y)?, Rc::clone(&taps))?, &mu_yy)?;
    let s_xy = g.sub(&g.blur_valid(&g.mul(x, y)?, taps)?, &mu_xy)?;

    let lum_num = g.offset(&g.scale(&mu_xy, two)?, c1)?;
    let con_num = g.offset(&g.scale(&s_xy, two)?, c2)?;
    let lum_den = g.offset(&g.add(&mu_xx, &mu_yy)?, c1)?;
    let con_den = g.offset(&g.add(&s_xx, &s_yy)?, c2)?;
    let map = g.div(&g.mul(&lum_num, &con_num)?, &g.mul(&lum_den, &con_den)?)?;
    g.mean(&map)
}

/// `1 - ssim`.
pub fn ssim_loss<T: Scalar>(g: &Graph<T>, target: &Var<T>, pred: &Var<T>, cfg: &SsimConfig) -> Result<Var<T>> {
    let s = ssim(g, target, pred, cfg)?;
    g.offset(&g.scale(&s, -T::one())?, T::one())
}

/// Maps an image batch to a feature tensor inside a graph. Implementations
/// must be deterministic.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, g: &Graph<T>, image: &Var<T>) -> Result<Var<T>>;

    fn name(&self) -> String;
}

/// `φ(x) = x`; the perceptual loss becomes mean absolute error.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, _g: &Graph<T>, image: &Var<T>) -> Result<Var<T>> {
        Ok(image.clone())
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

/// A fixed stack of same-padded convolutions with ReLU after each layer.
/// Weights are frozen: they enter the graph as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvExtractor<T> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
    label: String,
}

pub const RANDOM_EXTRACTOR_SEED: u64 = 0x5EED_F00D;

impl<T: Scalar> ConvExtractor<T> {
    /// Three random 3x3 layers, 3 -> 16 -> 16 -> 16 channels.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3usize, 16, 16, 16];
        let layers = widths
            .windows(2)
            .map(|w| {
                let fan_in = w[0] * 9;
                let bound = (3.0f64).sqrt() * init_bound(fan_in);
                let weight = Tensor::rand_uniform(&[w[1], w[0], 3, 3], -bound, bound, &mut rng).unwrap();
                let bias = Tensor::zeros(&[w[1]]).unwrap();
                (weight, bias)
            })
            .collect();
        Self {
            layers,
            label: format!("random-conv(seed={seed})"),
        }
    }

    /// Reads `layer{i}.weight` / `layer{i}.bias` entries from a checkpoint file.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev_out = 3;
        for i in 0.. {
            let Some(w) = ck.get(&format!("layer{i}.weight")) else { break };
            let [cout, cin, kh, kw] = w.dims4();
            if w.rank() != 4 || kh != kw || kh % 2 == 0 || cin != prev_out {
                return Err(LaffError::Config(format!(
                    "extractor layer{i}.weight has unusable shape {:?}",
                    w.shape()
                )));
            }
            let b = match ck.get(&format!("layer{i}.bias")) {
                Some(b) if b.len() == cout => b.cast(),
                Some(b) => {
                    return Err(LaffError::Config(format!("extractor layer{i}.bias has {} entries", b.len())));
                }
                None => Tensor::zeros(&[cout])?,
            };
            layers.push((w.cast(), b));
            prev_out = cout;
        }
        if layers.is_empty() {
            return Err(LaffError::Config("extractor file holds no layer0.weight".into()));
        }
        Ok(Self {
            label: format!("file({} layers)", layers.len()),
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvExtractor<T> {
    fn features(&self, g: &Graph<T>, image: &Var<T>) -> Result<Var<T>> {
        let mut x = image.clone();
        for (w, b) in &self.layers {
            let k = w.shape()[2];
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            x = g.conv2d(&x, &wv, Some(&bv), (k - 1) / 2)?;
            x = g.relu(&x)?;
        }
        Ok(x)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// `mean(|φ(J) - φ(Ĵ)|)`.
pub fn perceptual_loss<T: Scalar>(
    g: &Graph<T>,
    target: &Var<T>,
    pred: &Var<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var<T>> {
    let ft = extractor.features(g, target)?;
    let fp = extractor.features(g, pred)?;
    let d = g.sub(&ft, &fp)?;
    g.mean(&g.abs(&d)?)
}

/// The weighted objective plus its unweighted parts.
pub struct LossBreakdown<T> {
    pub total: Var<T>,
    pub charbonnier: T,
    pub ssim: T,
    pub perceptual: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub charbonnier_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            charbonnier_eps: DEFAULT_CHARBONNIER_EPS,
        }
    }
}

pub fn total_loss<T: Scalar>(
    g: &Graph<T>,
    target: &Var<T>,
    pred: &Var<T>,
    cfg: &LossConfig,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<LossBreakdown<T>> {
    cfg.weights.validate()?;
    let cha = charbonnier(g, target, pred, cfg.charbonnier_eps)?;
    let ss = ssim_loss(g, target, pred, &cfg.ssim)?;
    let per = perceptual_loss(g, target, pred, extractor)?;
    let w = &cfg.weights;
    let total = g.add(
        &g.scale(&cha, T::from_f64_lossy(w.charbonnier))?,
        &g.add(
            &g.scale(&ss, T::from_f64_lossy(w.ssim))?,
            &g.scale(&per, T::from_f64_lossy(w.perceptual))?,
        )?,
    )?;
    Ok(LossBreakdown {
        total,
        charbonnier: cha.item(),
        ssim: ss.item(),
        perceptual: per.item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn img(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, 0.0, 1.0, &mut r).unwrap()
    }

    #[test]
    fn charbonnier_examples() {
        let g = Graph::<f64>::inference();
        let j = g.input(img(1, &[1, 3, 8, 8]));
        let v = charbonnier(&g, &j, &j, 1e-3).unwrap().item();
        assert!((v - 1e-3).abs() < 1e-15);

        let a = g.input(Tensor::scalar(1.0));
        let b = g.input(Tensor::scalar(0.0));
        assert_eq!(charbonnier(&g, &a, &b, 0.0).unwrap().item(), 1.0);

        let a = g.input(Tensor::full(&[2, 2], 0.75).unwrap());
        let b = g.input(Tensor::zeros(&[2, 2]).unwrap());
        assert_eq!(charbonnier(&g, &a, &b, 0.0).unwrap().item(), 0.75);
        let expected = (0.5625f64 + 1e-6).sqrt();
        assert!((charbonnier(&g, &a, &b, 1e-3).unwrap().item() - expected).abs() < 1e-15);

        assert!(charbonnier(&g, &a, &b, -1.0).is_err());
        let c = g.input(Tensor::zeros(&[4]).unwrap());
        assert!(charbonnier(&g, &a, &c, 0.0).is_err());
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let g = Graph::<f64>::inference();
        let x = g.input(img(2, &[2, 3, 16, 16]));
        let s = ssim(&g, &x, &x, &SsimConfig::default()).unwrap().item();
        assert_eq!(s, 1.0);
        assert_eq!(ssim_loss(&g, &x, &x, &SsimConfig::default()).unwrap().item(), 0.0);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let cfg = SsimConfig {
            c1: 0.01,
            c2: 0.01,
            ..SsimConfig::default()
        };
        let g = Graph::<f64>::inference();
        for &(a, b) in &[(0.2, 0.7), (0.5, 0.5), (0.9, 0.1)] {
            let x = g.input(Tensor::full(&[1, 1, 12, 12], a).unwrap());
            let y = g.input(Tensor::full(&[1, 1, 12, 12], b).unwrap());
            let expected = (2.0 * a * b + 0.01) * 0.01 / ((a * a + b * b + 0.01) * 0.01);
            let s = ssim(&g, &x, &y, &cfg).unwrap().item();
            assert!((s - expected).abs() < 1e-9, "{s} vs {expected}");
            let l = ssim_loss(&g, &x, &y, &cfg).unwrap().item();
            assert!((l - (1.0 - expected)).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_rejects_small_images_and_bad_config() {
        let g = Graph::<f64>::inference();
        let x = g.input(img(3, &[1, 3, 10, 10]));
        assert!(ssim(&g, &x, &x, &SsimConfig::default()).is_err());
        let cfg = SsimConfig {
            window: 4,
            ..SsimConfig::default()
        };
        let y = g.input(img(3, &[1, 3, 16, 16]));
        assert!(ssim(&g, &y, &y, &cfg).is_err());
    }

    #[test]
    fn perceptual_identity_is_mae() {
        let g = Graph::<f64>::inference();
        let a = img(4, &[1, 3, 8, 8]);
        let b = img(5, &[1, 3, 8, 8]);
        let mae = a.zip_map(&b, |x, y| (x - y).abs()).unwrap().mean();
        let (av, bv) = (g.input(a), g.input(b));
        let v = perceptual_loss(&g, &av, &bv, &IdentityExtractor).unwrap().item();
        assert!((v - mae).abs() < 1e-15);
        assert_eq!(perceptual_loss(&g, &av, &av, &IdentityExtractor).unwrap().item(), 0.0);
    }

    #[test]
    fn random_extractor_is_deterministic() {
        let e1 = ConvExtractor::<f64>::random(RANDOM_EXTRACTOR_SEED);
        let e2 = ConvExtractor::<f64>::random(RANDOM_EXTRACTOR_SEED);
        assert_eq!(e1, e2);
        let g = Graph::<f64>::inference();
        let a = g.input(img(6, &[1, 3, 16, 16]));
        let b = g.input(img(7, &[1, 3, 16, 16]));
        let l1 = perceptual_loss(&g, &a, &b, &e1).unwrap().item();
        let l2 = perceptual_loss(&g, &a, &b, &e2).unwrap().item();
        assert_eq!(l1, l2);
        assert!(l1 > 0.0);
        assert_eq!(perceptual_loss(&g, &a, &a, &e1).unwrap().item(), 0.0);
    }

    #[test]
    fn extractor_loads_from_checkpoint() {
        let src = ConvExtractor::<f32>::random(3);
        let mut ck = Checkpoint::new(crate::ModelConfig::default());
        for (i, (w, b)) in src.layers.iter().enumerate() {
            ck.push(format!("layer{i}.weight"), w.clone());
            ck.push(format!("layer{i}.bias"), b.clone());
        }
        let loaded = ConvExtractor::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(loaded.layers, src.layers);
        assert!(ConvExtractor::<f32>::from_checkpoint(&Checkpoint::new(crate::ModelConfig::default())).is_err());
    }

    #[test]
    fn total_loss_identities() {
        let g = Graph::<f64>::inference();
        let j = g.input(img(8, &[1, 3, 16, 16]));
        let jh = g.input(img(9, &[1, 3, 16, 16]));
        let ex = ConvExtractor::<f64>::random(RANDOM_EXTRACTOR_SEED);
        let cfg = LossConfig::default();
        assert_eq!(cfg.weights, LossWeights { charbonnier: 1.0, ssim: 1.1, perceptual: 0.1 });

        let same = total_loss(&g, &j, &j, &cfg, &ex).unwrap();
        assert!((same.total.item() - 1e-3).abs() < 1e-15);

        let only_cha = LossConfig {
            weights: LossWeights { charbonnier: 1.0, ssim: 0.0, perceptual: 0.0 },
            ..cfg
        };
        let t = total_loss(&g, &j, &jh, &only_cha, &ex).unwrap();
        let c = charbonnier(&g, &j, &jh, DEFAULT_CHARBONNIER_EPS).unwrap().item();
        assert_eq!(t.total.item(), c);

        let base = total_loss(&g, &j, &jh, &cfg, &ex).unwrap().total.item();
        let doubled = LossConfig {
            weights: cfg.weights.scaled(2.0),
            ..cfg
        };
        let twice = total_loss(&g, &j, &jh, &doubled, &ex).unwrap().total.item();
        assert!((twice - 2.0 * base).abs() < 1e-12);
    }
}
