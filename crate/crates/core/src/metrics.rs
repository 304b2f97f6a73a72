//! Full-reference (PSNR, SSIM) and no-reference (UICM, UISM, UIConM, UIQM)
//! image quality metrics.
//!
//! The UIQM family is evaluated on a 0-255 intensity scale. Every internal
//! constant lives in [`MetricsConfig`] so a report can be reproduced from its
//! configuration alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LaffError, Result};
use crate::graph::Graph;
use crate::image_io::{is_image_path, Image};
use crate::losses::{self, SsimConfig};

pub const REPORT_SCHEMA: u32 = 1;
/// PSNR written to reports when the images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Weights of the UIQM linear combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiqmCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for UiqmCoefficients {
    fn default() -> Self {
        Self {
            c1: 0.028,
            c2: 0.295,
            c3: 3.375,
        }
    }
}

impl UiqmCoefficients {
    pub fn new(c1: f64, c2: f64, c3: f64) -> Result<Self> {
        let c = Self { c1, c2, c3 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.c1, self.c2, self.c3].iter().all(|c| c.is_finite()) {
            return Err(LaffError::Config(format!("UIQM coefficients must be finite: {self:?}")));
        }
        Ok(())
    }

    pub fn combine(&self, c: &UiqmComponents) -> f64 {
        self.c1 * c.uicm + self.c2 * c.uism + self.c3 * c.uiconm
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            c1: self.c1 * k,
            c2: self.c2 * k,
            c3: self.c3 * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiqmComponents {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Square block edge for UISM and UIConM.
    pub block_size: usize,
    /// Fractions trimmed from the low and high tails for the UICM means.
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub k_mu: f64,
    pub k_sigma: f64,
    /// R, G, B weights of the per-channel UISM terms.
    pub channel_weights: [f64; 3],
    /// Floor added to block extrema in the EME log ratio.
    pub eme_eps: f64,
    /// PLIP gray-tone range for ⊕ and ⊖.
    pub plip_gamma: f64,
    pub plip_k: f64,
    pub coefficients: UiqmCoefficients,
    pub ssim: SsimConfig,
    pub peak: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            block_size: 8,
            alpha_low: 0.1,
            alpha_high: 0.1,
            k_mu: -0.0268,
            k_sigma: 0.1586,
            channel_weights: [0.299, 0.587, 0.114],
            eme_eps: 1.0,
            plip_gamma: 1026.0,
            plip_k: 1026.0,
            coefficients: UiqmCoefficients::default(),
            ssim: SsimConfig::default(),
            peak: 1.0,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(LaffError::Config("metric block size must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.alpha_low) || !(0.0..0.5).contains(&self.alpha_high) {
            return Err(LaffError::Config("alpha-trim fractions must lie in [0, 0.5)".into()));
        }
        if !(self.eme_eps > 0.0) || !(self.plip_gamma > 255.0) || !(self.plip_k > 255.0) {
            return Err(LaffError::Config(
                "eme_eps must be > 0 and PLIP constants must exceed 255".into(),
            ));
        }
        if !(self.peak > 0.0) {
            return Err(LaffError::Config("PSNR peak must be positive".into()));
        }
        self.coefficients.validate()?;
        self.ssim.validate()
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(dim_err!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width,
            a.height,
            b.width,
            b.height
        ));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM. The window shrinks to the largest odd size that fits.
pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    same_shape(a, b)?;
    let mut cfg = *cfg;
    let fit = a.width.min(a.height);
    if cfg.window > fit {
        cfg.window = if fit % 2 == 1 { fit } else { fit - 1 };
    }
    let g = Graph::<f64>::inference();
    let x = g.input(a.to_tensor());
    let y = g.input(b.to_tensor());
    Ok(losses::ssim(&g, &x, &y, &cfg)?.item())
}

fn to_255(plane: &[f32]) -> Vec<f64> {
    plane.iter().map(|&v| v as f64 * 255.0).collect()
}

fn trimmed_mean(values: &[f64], alpha_low: f64, alpha_high: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let lo = (alpha_low * n as f64).ceil() as usize;
    let hi = n - (alpha_high * n as f64).floor() as usize;
    // at least one sample survives
    let (lo, hi) = if lo < hi { (lo, hi) } else { (n / 2, n / 2 + 1) };
    let kept = &v[lo..hi];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Colourfulness from the trimmed statistics of the R−G and Y−B opponent planes.
pub fn uicm(img: &Image, cfg: &MetricsConfig) -> f64 {
    let (r, g, b) = (to_255(img.plane(0)), to_255(img.plane(1)), to_255(img.plane(2)));
    let rg: Vec<f64> = r.iter().zip(&g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(&g).zip(&b).map(|((r, g), b)| (r + g) / 2.0 - b).collect();
    let stats = |p: &[f64]| {
        let mu = trimmed_mean(p, cfg.alpha_low, cfg.alpha_high);
        let var = p.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / p.len() as f64;
        (mu, var)
    };
    let (mu_rg, var_rg) = stats(&rg);
    let (mu_yb, var_yb) = stats(&yb);
    cfg.k_mu * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + cfg.k_sigma * (var_rg + var_yb).sqrt()
}

/// Sobel gradient magnitude with replicated borders.
fn sobel_magnitude(p: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        p[y * w + x]
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Calls `f(min, max)` for each block of a `block`-sized grid; edge blocks
/// may be partial and an image smaller than a block is one block.
fn block_extrema(p: &[f64], w: usize, h: usize, block: usize, mut f: impl FnMut(f64, f64)) {
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for y in by..(by + block).min(h) {
                for &v in &p[y * w + bx..y * w + (bx + block).min(w)] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            f(lo, hi);
        }
    }
}

fn eme(p: &[f64], w: usize, h: usize, cfg: &MetricsConfig) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    block_extrema(p, w, h, cfg.block_size, |lo, hi| {
        total += ((hi + cfg.eme_eps) / (lo + cfg.eme_eps)).ln();
        n += 1;
    });
    2.0 * total / n as f64
}

/// Sharpness: weighted block EME of each channel's Sobel edge map.
pub fn uism(img: &Image, cfg: &MetricsConfig) -> f64 {
    let (w, h) = (img.width, img.height);
    (0..3)
        .map(|c| {
            let p = to_255(img.plane(c));
            let edges: Vec<f64> = sobel_magnitude(&p, w, h)
                .iter()
                .zip(&p)
                .map(|(m, v)| m * v / 255.0)
                .collect();
            cfg.channel_weights[c] * eme(&edges, w, h, cfg)
        })
        .sum()
}

fn plip_add(a: f64, b: f64, gamma: f64) -> f64 {
    a + b - a * b / gamma
}

fn plip_sub(a: f64, b: f64, k: f64) -> f64 {
    k * (a - b) / (k - b)
}

/// Contrast: block logAMEE of the intensity `(R + G + B) / 3`, i.e. the mean
/// of `-r ln r` with `r = (max ⊖ min) / (max ⊕ min)` under PLIP arithmetic.
pub fn uiconm(img: &Image, cfg: &MetricsConfig) -> f64 {
    let (w, h) = (img.width, img.height);
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let intensity: Vec<f64> = (0..w * h)
        .map(|i| (r[i] as f64 + g[i] as f64 + b[i] as f64) / 3.0 * 255.0)
        .collect();
    let (mut total, mut n) = (0.0, 0usize);
    block_extrema(&intensity, w, h, cfg.block_size, |lo, hi| {
        n += 1;
        let den = plip_add(hi, lo, cfg.plip_gamma);
        let num = plip_sub(hi, lo, cfg.plip_k);
        if num > 0.0 && den > 0.0 {
            let ratio = num / den;
            total += ratio * ratio.ln();
        }
    });
    -total / n as f64
}

pub fn uiqm_components(img: &Image, cfg: &MetricsConfig) -> UiqmComponents {
    UiqmComponents {
        uicm: uicm(img, cfg),
        uism: uism(img, cfg),
        uiconm: uiconm(img, cfg),
    }
}

pub fn uiqm(img: &Image, cfg: &MetricsConfig) -> f64 {
    cfg.coefficients.combine(&uiqm_components(img, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub name: String,
    /// Capped at [`PSNR_CAP_DB`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

/// Scores one image, with full-reference metrics when `reference` is given.
pub fn score_image(name: &str, img: &Image, reference: Option<&Image>, cfg: &MetricsConfig) -> Result<ImageScores> {
    let c = uiqm_components(img, cfg);
    let (psnr, ssim) = match reference {
        Some(r) => (
            Some(psnr(img, r, cfg.peak)?.min(PSNR_CAP_DB)),
            Some(ssim(img, r, &cfg.ssim)?),
        ),
        None => (None, None),
    };
    Ok(ImageScores {
        name: name.to_string(),
        psnr,
        ssim,
        uicm: c.uicm,
        uism: c.uism,
        uiconm: c.uiconm,
        uiqm: cfg.coefficients.combine(&c),
    })
}

/// Mean and population standard deviation (square root of the variance).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub coefficients: UiqmCoefficients,
    pub images: Vec<ImageScores>,
    pub summary: BTreeMap<String, Stat>,
    pub skipped: Vec<Skipped>,
}

pub const METRIC_COLUMNS: [&str; 6] = ["psnr", "ssim", "uicm", "uism", "uiconm", "uiqm"];

impl MetricsReport {
    pub fn from_scores(images: Vec<ImageScores>, skipped: Vec<Skipped>, cfg: &MetricsConfig) -> Self {
        let mut summary = BTreeMap::new();
        for col in METRIC_COLUMNS {
            let values: Vec<f64> = images.iter().filter_map(|s| s.column(col)).collect();
            if let Some(stat) = Stat::of(&values) {
                summary.insert(col.to_string(), stat);
            }
        }
        Self {
            schema: REPORT_SCHEMA,
            coefficients: cfg.coefficients,
            images,
            summary,
            skipped,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table, one row per image plus a mean ± std row.
    pub fn to_text(&self) -> String {
        let cols: Vec<&str> = METRIC_COLUMNS
            .iter()
            .copied()
            .filter(|c| self.summary.contains_key(*c))
            .collect();
        let name_w = self
            .images
            .iter()
            .map(|s| s.name.len())
            .chain(["mean ± std".chars().count()])
            .max()
            .unwrap_or(4);
        let mut out = format!("{:<name_w$}", "image");
        for c in &cols {
            out.push_str(&format!(" {c:>17}"));
        }
        out.push('\n');
        for s in &self.images {
            out.push_str(&format!("{:<name_w$}", s.name));
            for c in &cols {
                match s.column(c) {
                    Some(v) => out.push_str(&format!(" {v:>17.4}")),
                    None => out.push_str(&format!(" {:>17}", "-")),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<w$}", "mean ± std", w = name_w));
        for c in &cols {
            let st = self.summary[*c];
            out.push_str(&format!(" {:>17}", format!("{:.4}±{:.4}", st.mean, st.std)));
        }
        out.push('\n');
        for s in &self.skipped {
            out.push_str(&format!("skipped {}: {}\n", s.name, s.reason));
        }
        out
    }

    pub fn write(&self, json_path: &Path) -> Result<PathBuf> {
        if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(json_path, self.to_json()?)?;
        let text = json_path.with_extension("txt");
        std::fs::write(&text, self.to_text())?;
        Ok(text)
    }
}

impl ImageScores {
    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "psnr" => self.psnr,
            "ssim" => self.ssim,
            "uicm" => Some(self.uicm),
            "uism" => Some(self.uism),
            "uiconm" => Some(self.uiconm),
            "uiqm" => Some(self.uiqm),
            _ => None,
        }
    }
}

/// An image to score, with its optional reference.
pub struct EvalItem {
    pub name: String,
    pub image: Image,
    pub reference: Option<Image>,
}

/// Scores items in parallel; report rows keep input order.
pub fn evaluate_batch(items: &[EvalItem], cfg: &MetricsConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(LaffError::Dataset("evaluation needs at least one image".into()));
    }
    let results: Vec<Result<ImageScores>> = items
        .par_iter()
        .map(|it| score_image(&it.name, &it.image, it.reference.as_ref(), cfg))
        .collect();
    let mut scores = Vec::with_capacity(items.len());
    let mut skipped = Vec::new();
    for (it, r) in items.iter().zip(results) {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", it.name);
                skipped.push(Skipped {
                    name: it.name.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(MetricsReport::from_scores(scores, skipped, cfg))
}

/// Decodable image files of `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Names present on only one side of a reference pairing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub missing_reference: Vec<String>,
    pub missing_enhanced: Vec<String>,
}

impl PairingReport {
    pub fn is_clean(&self) -> bool {
        self.missing_reference.is_empty() && self.missing_enhanced.is_empty()
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every image in `dir`, paired by file name with `reference` when
/// given. Unreadable files become `skipped` entries of the report.
pub fn evaluate_folder(
    dir: &Path,
    reference: Option<&Path>,
    cfg: &MetricsConfig,
) -> Result<(MetricsReport, PairingReport)> {
    let files = list_images(dir)?;
    let mut pairing = PairingReport::default();
    let ref_files = match reference {
        Some(r) => {
            let refs = list_images(r)?;
            let names: Vec<String> = files.iter().map(|p| file_name(p)).collect();
            let ref_names: Vec<String> = refs.iter().map(|p| file_name(p)).collect();
            pairing.missing_reference = names.iter().filter(|n| !ref_names.contains(n)).cloned().collect();
            pairing.missing_enhanced = ref_names.iter().filter(|n| !names.contains(n)).cloned().collect();
            Some(r)
        }
        None => None,
    };
    let mut items = Vec::new();
    let mut skipped = Vec::new();
    for path in &files {
        let name = file_name(path);
        if pairing.missing_reference.contains(&name) {
            continue;
        }
        let loaded = Image::load(path).and_then(|img| {
            let r = ref_files.map(|r| Image::load(&r.join(&name))).transpose()?;
            Ok((img, r))
        });
        match loaded {
            Ok((image, reference)) => items.push(EvalItem {
                name,
                image,
                reference,
            }),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped.push(Skipped { name, reason: e.to_string() });
            }
        }
    }
    if items.is_empty() {
        return Err(LaffError::Dataset(format!("no decodable images in {}", dir.display())));
    }
    let mut report = evaluate_batch(&items, cfg)?;
    skipped.extend(report.skipped);
    report.skipped = skipped;
    Ok((report, pairing))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MetricsConfig {
        MetricsConfig::default()
    }

    fn checker(n: usize, lo: f32, hi: f32) -> Image {
        let mut img = Image::filled(n, n, [0.0; 3]);
        for c in 0..3 {
            let p = img.plane_mut(c);
            for y in 0..n {
                for x in 0..n {
                    p[y * n + x] = if (x + y) % 2 == 0 { hi } else { lo };
                }
            }
        }
        img
    }

    fn step_edge(n: usize) -> Image {
        // both sides stay inside (0.25, 0.75) so a 2x stretch clips nothing
        let mut img = Image::filled(n, n, [0.35, 0.4, 0.45]);
        for c in 0..3 {
            let p = img.plane_mut(c);
            for y in 0..n {
                for x in n / 2..n {
                    p[y * n + x] = 0.62 + 0.05 * c as f32;
                }
            }
        }
        img
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let c = a.map(|v| v + 1.0 / 255.0);
        let p255 = psnr(&a.map(|v| v * 255.0), &c.map(|v| v * 255.0), 255.0).unwrap();
        assert!((p255 - 10.0 * (255.0f64 * 255.0).log10()).abs() < 1e-3);
        assert!(psnr(&a, &Image::filled(3, 4, [0.5; 3]), 1.0).is_err());
    }

    #[test]
    fn uicm_achromatic_and_constant() {
        let gray = checker(16, 0.2, 0.9);
        assert_eq!(uicm(&gray, &cfg()), 0.0);
        let flat = Image::filled(8, 8, [0.8, 0.4, 0.2]);
        let (rg, yb) = (0.4 * 255.0, (0.6 - 0.2) * 255.0);
        let expected = -0.0268 * ((rg * rg + yb * yb) as f64).sqrt();
        assert!((uicm(&flat, &cfg()) - expected).abs() < 1e-3);
    }

    #[test]
    fn constant_images_have_no_edges_or_contrast() {
        let flat = Image::filled(20, 20, [0.3, 0.5, 0.7]);
        assert_eq!(uism(&flat, &cfg()), 0.0);
        assert_eq!(uiconm(&flat, &cfg()), 0.0);
    }

    #[test]
    fn uism_rotation_and_contrast() {
        let img = step_edge(32);
        let a = uism(&img, &cfg());
        let b = uism(&img.rotate90(), &cfg());
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        let punchy = img.map(|v| (2.0 * v - 0.5).clamp(0.0, 1.0));
        assert!(uism(&punchy, &cfg()) > a);
    }

    #[test]
    fn uiconm_checkerboards() {
        // full-swing blocks give r = 1, hence -r ln r = 0
        assert!(uiconm(&checker(16, 0.0, 1.0), &cfg()).abs() < 1e-12);
        // one 0.25/0.75 block evaluated by hand: ⊖ = 1026*127.5/962.25, ⊕ = 255 - 191.25*63.75/1026
        let r = (1026.0 * 127.5 / 962.25) / (255.0 - 191.25 * 63.75 / 1026.0);
        let one_block = -r * f64::ln(r);
        assert!((one_block - 0.325_040_651_7).abs() < 1e-9);
        let v = uiconm(&checker(16, 0.25, 0.75), &cfg());
        assert!((v - one_block).abs() < 1e-9, "{v}");
    }

    #[test]
    fn uiconm_mirror_invariant() {
        let mut img = step_edge(24);
        img.plane_mut(0)[5] = 0.9;
        let a = uiconm(&img, &cfg());
        assert!((a - uiconm(&img.flip_horizontal(), &cfg())).abs() < 1e-12);
    }

    #[test]
    fn uiqm_arithmetic() {
        let c = UiqmCoefficients::default();
        let unit = UiqmComponents { uicm: 0.0, uism: 0.0, uiconm: 1.0 };
        assert_eq!(c.combine(&unit), 3.375);
        let dcp = UiqmComponents { uicm: 6.781, uism: 4.005, uiconm: 0.056 };
        assert!((c.combine(&dcp) - 1.560343).abs() < 1e-9);
        let img = step_edge(16);
        let mut doubled = cfg();
        doubled.coefficients = c.scaled(2.0);
        assert!((uiqm(&img, &doubled) - 2.0 * uiqm(&img, &cfg())).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_identical_images() {
        let img = step_edge(16);
        assert!((ssim(&img, &img, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        // smaller than the window
        let tiny = step_edge(6);
        assert!((ssim(&tiny, &tiny, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_summary() {
        let img = step_edge(16);
        let items: Vec<EvalItem> = (0..2)
            .map(|i| EvalItem {
                name: format!("{i}.png"),
                image: img.clone(),
                reference: Some(img.clone()),
            })
            .collect();
        let r = evaluate_batch(&items, &cfg()).unwrap();
        assert_eq!(r.images.len(), 2);
        assert_eq!(r.summary["uiqm"].std, 0.0);
        assert_eq!(r.summary["psnr"].mean, PSNR_CAP_DB);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["schema"], 1);
        assert!(r.to_text().contains("mean ± std"));
    }
}
