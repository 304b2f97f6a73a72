//! Underwater image formation as a paired-data generator.
//!
//! A clean image `J` seen through water of depth `z` becomes
//!
//! ```text
//! I_c = J_c exp(-beta_D_c z) + B_inf_c (1 - exp(-beta_B_c z))
//! ```
//!
//! per channel `c`: the direct signal decays and the veiling light `B_inf`
//! fills in. The generator samples parameters from [`ParamRanges`], renders
//! pairs, and records every parameter set in a manifest.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LaffError, Result};
use crate::image_io::{is_image_path, Image};

/// Camera-to-scene range in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Depth {
    Uniform(f64),
    /// Linear in the row index, `top` at row 0 and `bottom` at the last row.
    VerticalRamp { top: f64, bottom: f64 },
}

impl Depth {
    pub fn at_row(&self, y: usize, height: usize) -> f64 {
        match *self {
            Depth::Uniform(z) => z,
            Depth::VerticalRamp { top, bottom } => {
                if height <= 1 {
                    top
                } else {
                    top + (bottom - top) * y as f64 / (height - 1) as f64
                }
            }
        }
    }

    fn values(&self) -> [f64; 2] {
        match *self {
            Depth::Uniform(z) => [z, z],
            Depth::VerticalRamp { top, bottom } => [top, bottom],
        }
    }
}

/// Per-channel coefficients in R, G, B order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Direct-signal attenuation (1/m).
    pub beta_d: [f64; 3],
    /// Backscatter (1/m).
    pub beta_b: [f64; 3],
    /// Veiling light.
    pub b_inf: [f64; 3],
    pub depth: Depth,
}

impl DegradationParams {
    pub fn uniform(beta: f64, b_inf: f64, z: f64) -> Self {
        Self {
            beta_d: [beta; 3],
            beta_b: [beta; 3],
            b_inf: [b_inf; 3],
            depth: Depth::Uniform(z),
        }
    }

    /// The same coefficients at another uniform depth.
    pub fn at_depth(&self, z: f64) -> Self {
        Self {
            depth: Depth::Uniform(z),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            for (name, v) in [("beta_D", self.beta_d[c]), ("beta_B", self.beta_b[c])] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(LaffError::Parameter(format!("{name}[{c}] must be finite and >= 0, got {v}")));
                }
            }
            let b = self.b_inf[c];
            if !(0.0..=1.0).contains(&b) {
                return Err(LaffError::Parameter(format!("B_inf[{c}] must lie in [0, 1], got {b}")));
            }
        }
        for z in self.depth.values() {
            if !(z >= 0.0) || z.is_nan() {
                return Err(LaffError::Parameter(format!("depth must be >= 0, got {z}")));
            }
        }
        Ok(())
    }
}

/// The formation model for one value, before clamping.
pub fn formation(j: f64, beta_d: f64, beta_b: f64, b_inf: f64, z: f64) -> f64 {
    j * (-beta_d * z).exp() + b_inf * (1.0 - (-beta_b * z).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub image: Image,
    /// Share of values that left `[0, 1]` and were clamped.
    pub clamp_fraction: f64,
}

pub fn degrade(clean: &Image, p: &DegradationParams) -> Result<Degraded> {
    p.validate()?;
    let (w, h) = (clean.width, clean.height);
    let mut out = clean.clone();
    let mut clamped = 0usize;
    for c in 0..3 {
        let src = clean.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            let z = p.depth.at_row(y, h);
            for x in 0..w {
                let v = formation(src[y * w + x] as f64, p.beta_d[c], p.beta_b[c], p.b_inf[c], z);
                if !(0.0..=1.0).contains(&v) {
                    clamped += 1;
                }
                dst[y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Degraded {
        image: out,
        clamp_fraction: clamped as f64 / clean.data.len() as f64,
    })
}

/// Closed sampling interval.
pub type Range = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    Uniform,
    VerticalRamp,
}

/// Uniform sampling ranges for [`DegradationParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamRanges {
    pub beta_d: [Range; 3],
    /// `None` ties the backscatter coefficient to the sampled `beta_d`.
    pub beta_b: Option<[Range; 3]>,
    pub b_inf: [Range; 3],
    pub z: Range,
    pub depth_mode: DepthMode,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            beta_d: [[0.3, 0.9], [0.1, 0.4], [0.05, 0.3]],
            beta_b: None,
            b_inf: [[0.0, 0.2], [0.3, 0.7], [0.3, 0.7]],
            z: [0.5, 8.0],
            depth_mode: DepthMode::Uniform,
        }
    }
}

fn sample<R: Rng>(rng: &mut R, r: Range) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, r: Range, lo: f64, hi: f64| {
            if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
                return Err(LaffError::Parameter(format!(
                    "{name} range {r:?} must be ordered and within [{lo}, {hi}]"
                )));
            }
            Ok(())
        };
        for c in 0..3 {
            check("beta_d", self.beta_d[c], 0.0, f64::INFINITY)?;
            if let Some(bb) = &self.beta_b {
                check("beta_b", bb[c], 0.0, f64::INFINITY)?;
            }
            check("b_inf", self.b_inf[c], 0.0, 1.0)?;
        }
        check("z", self.z, 0.0, f64::INFINITY)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DegradationParams {
        let beta_d = std::array::from_fn(|c| sample(rng, self.beta_d[c]));
        let beta_b = match &self.beta_b {
            Some(bb) => std::array::from_fn(|c| sample(rng, bb[c])),
            None => beta_d,
        };
        let b_inf = std::array::from_fn(|c| sample(rng, self.b_inf[c]));
        let depth = match self.depth_mode {
            DepthMode::Uniform => Depth::Uniform(sample(rng, self.z)),
            DepthMode::VerticalRamp => {
                let (a, b) = (sample(rng, self.z), sample(rng, self.z));
                Depth::VerticalRamp {
                    top: a.min(b),
                    bottom: a.max(b),
                }
            }
        };
        DegradationParams {
            beta_d,
            beta_b,
            b_inf,
            depth,
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// A seeded scene: a two-colour gradient, a few soft-edged discs and
/// rectangles, and smooth value noise.
pub fn procedural_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colour = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.1..0.9)) };
    let c0 = colour(&mut rng);
    let c1 = colour(&mut rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    let mut px = vec![[0.0f64; 3]; width * height];
    let (wf, hf) = (width.max(2) as f64 - 1.0, height.max(2) as f64 - 1.0);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / wf - 0.5, y as f64 / hf - 0.5);
            let t = ((u * dx + v * dy) + 0.71) / 1.42;
            px[y * width + x] = std::array::from_fn(|c| lerp(c0[c], c1[c], t.clamp(0.0, 1.0)));
        }
    }

    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let col = colour(&mut rng);
        let alpha = rng.random_range(0.6..1.0);
        let (cx, cy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let disc = rng.random_bool(0.5);
        let (rx, ry) = (rng.random_range(0.08..0.3), rng.random_range(0.08..0.3));
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64 / wf, y as f64 / hf);
                // signed distance in units of the shape size, negative inside
                let d = if disc {
                    ((u - cx).powi(2) + (v - cy).powi(2)).sqrt() / rx - 1.0
                } else {
                    ((u - cx).abs() / rx).max((v - cy).abs() / ry) - 1.0
                };
                let cover = (0.5 - d * 8.0).clamp(0.0, 1.0) * alpha;
                if cover > 0.0 {
                    let p = &mut px[y * width + x];
                    for c in 0..3 {
                        p[c] = lerp(p[c], col[c], cover);
                    }
                }
            }
        }
    }

    // bilinear value noise on a coarse lattice
    const LATTICE: usize = 6;
    let lattice: Vec<f64> = (0..(LATTICE + 1) * (LATTICE + 1))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let amp = rng.random_range(0.02..0.08);
    for y in 0..height {
        for x in 0..width {
            let gx = x as f64 / wf * LATTICE as f64;
            let gy = y as f64 / hf * LATTICE as f64;
            let (ix, iy) = ((gx as usize).min(LATTICE - 1), (gy as usize).min(LATTICE - 1));
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            let l = |i: usize, j: usize| lattice[j * (LATTICE + 1) + i];
            let n = lerp(
                lerp(l(ix, iy), l(ix + 1, iy), fx),
                lerp(l(ix, iy + 1), l(ix + 1, iy + 1), fx),
                fy,
            );
            for c in 0..3 {
                px[y * width + x][c] += amp * n;
            }
        }
    }

    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p[c].clamp(0.0, 1.0) as f32;
        }
    }
    Image {
        width,
        height,
        data,
    }
}

/// A degraded/clean image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub name: String,
    pub degraded: Image,
    pub clean: Image,
    pub params: Option<DegradationParams>,
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub filename: String,
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b_inf: [f64; 3],
    pub z: Depth,
    pub clamp_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CleanSource {
    Procedural,
    /// Decodable images in this folder, cycled in name order.
    Folder(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub ranges: ParamRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 16,
            width: 64,
            height: 64,
            seed: 0,
            ranges: ParamRanges::default(),
        }
    }
}

/// Per-sample seed; sample `i` does not depend on how many samples precede it.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generated pair with its manifest row. Both images are 8-bit quantized,
/// so they equal what a round trip through PNG yields.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: PairedSample,
    pub record: ManifestRecord,
}

pub fn synth_samples(cfg: &SynthConfig, source: &CleanSource) -> Result<Vec<SynthSample>> {
    if cfg.n == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(LaffError::Config("synthesis needs n, width and height >= 1".into()));
    }
    cfg.ranges.validate()?;
    let folder = match source {
        CleanSource::Procedural => None,
        CleanSource::Folder(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image_path(p))
                .collect();
            files.sort();
            let mut images = Vec::new();
            for f in files {
                match Image::load_resized(&f, Some((cfg.width, cfg.height))) {
                    Ok(img) => images.push(img),
                    Err(e) => log::warn!("skipping clean source {}: {e}", f.display()),
                }
            }
            if images.is_empty() {
                return Err(LaffError::Dataset(format!("no decodable clean images in {}", dir.display())));
            }
            Some(images)
        }
    };
    (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let seed = sample_seed(cfg.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = match &folder {
                Some(images) => images[i % images.len()].clone(),
                None => procedural_image(cfg.width, cfg.height, rng.random()),
            }
            .quantized();
            let params = cfg.ranges.sample(&mut rng);
            let d = degrade(&clean, &params)?;
            let filename = format!("{i:05}.png");
            Ok(SynthSample {
                record: ManifestRecord {
                    filename: filename.clone(),
                    beta_d: params.beta_d,
                    beta_b: params.beta_b,
                    b_inf: params.b_inf,
                    z: params.depth,
                    clamp_fraction: d.clamp_fraction,
                    seed,
                },
                sample: PairedSample {
                    name: filename,
                    degraded: d.image.quantized(),
                    clean,
                    params: Some(params),
                },
            })
        })
        .collect()
}

pub const DEGRADED_DIR: &str = "A";
pub const CLEAN_DIR: &str = "B";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `A/<name>` (degraded), `B/<name>` (clean) and `manifest.json`.
pub fn write_dataset(out: &Path, samples: &[SynthSample]) -> Result<()> {
    std::fs::create_dir_all(out.join(DEGRADED_DIR))?;
    std::fs::create_dir_all(out.join(CLEAN_DIR))?;
    samples.par_iter().try_for_each(|s| -> Result<()> {
        s.sample.degraded.save(&out.join(DEGRADED_DIR).join(&s.record.filename))?;
        s.sample.clean.save(&out.join(CLEAN_DIR).join(&s.record.filename))
    })?;
    let records: Vec<&ManifestRecord> = samples.iter().map(|s| &s.record).collect();
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

/// Generates `cfg.n` pairs and, when `out` is given, writes them to disk.
pub fn synth_dataset(cfg: &SynthConfig, source: &CleanSource, out: Option<&Path>) -> Result<Vec<SynthSample>> {
    let samples = synth_samples(cfg, source)?;
    if let Some(dir) = out {
        write_dataset(dir, &samples)?;
    }
    Ok(samples)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    Ok(serde_json::from_slice(&std::fs::read(root.join(MANIFEST_FILE))?)?)
}

/// How degraded and clean files are arranged under a dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PairLayout {
    /// `<root>/<degraded>/<name>` pairs with `<root>/<clean>/<name>`.
    SplitDirs { degraded: String, clean: String },
    /// `<root>/<stem><degraded_suffix>.<ext>` pairs with `<root>/<stem><clean_suffix>.<ext>`.
    FlatPairs { degraded_suffix: String, clean_suffix: String },
}

impl Default for PairLayout {
    fn default() -> Self {
        PairLayout::split_dirs()
    }
}

impl PairLayout {
    pub fn split_dirs() -> Self {
        PairLayout::SplitDirs {
            degraded: DEGRADED_DIR.into(),
            clean: CLEAN_DIR.into(),
        }
    }

    pub fn flat_pairs() -> Self {
        PairLayout::FlatPairs {
            degraded_suffix: "_degraded".into(),
            clean_suffix: "_clean".into(),
        }
    }
}

/// Problems found while pairing files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Files whose counterpart was not found, relative to the root.
    pub unmatched: Vec<String>,
    pub undecodable: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.unmatched.is_empty() && self.undecodable.is_empty()
    }
}

fn sorted_images(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| LaffError::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    Ok(names)
}

/// Pairs and decodes a dataset, sorted by file name. With `size`, images are
/// resized to `(width, height)` on load.
pub fn ingest_pairs(
    root: &Path,
    layout: &PairLayout,
    size: Option<(usize, usize)>,
) -> Result<(Vec<PairedSample>, ValidationReport)> {
    let mut report = ValidationReport::default();
    // (name, degraded path, clean path)
    let mut pairs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    match layout {
        PairLayout::SplitDirs { degraded, clean } => {
            let (dd, cd) = (root.join(degraded), root.join(clean));
            let dn = sorted_images(&dd)?;
            let cn = sorted_images(&cd)?;
            for n in &dn {
                if cn.binary_search(n).is_ok() {
                    pairs.push((n.clone(), dd.join(n), cd.join(n)));
                } else {
                    report.unmatched.push(format!("{degraded}/{n}"));
                }
            }
            for n in cn.iter().filter(|n| dn.binary_search(n).is_err()) {
                report.unmatched.push(format!("{clean}/{n}"));
            }
        }
        PairLayout::FlatPairs {
            degraded_suffix,
            clean_suffix,
        } => {
            let names = sorted_images(root)?;
            let split = |n: &str, suffix: &str| -> Option<String> {
                let (stem, ext) = n.rsplit_once('.')?;
                stem.strip_suffix(suffix).map(|s| format!("{s}.{ext}"))
            };
            for n in &names {
                if let Some(key) = split(n, degraded_suffix) {
                    let (stem, ext) = key.rsplit_once('.').unwrap();
                    let partner = format!("{stem}{clean_suffix}.{ext}");
                    if names.binary_search(&partner).is_ok() {
                        pairs.push((key.clone(), root.join(n), root.join(&partner)));
                    } else {
                        report.unmatched.push(n.clone());
                    }
                } else if let Some(key) = split(n, clean_suffix) {
                    let (stem, ext) = key.rsplit_once('.').unwrap();
                    if names.binary_search(&format!("{stem}{degraded_suffix}.{ext}")).is_err() {
                        report.unmatched.push(n.clone());
                    }
                } else {
                    report.unmatched.push(n.clone());
                }
            }
            pairs.sort_by(|a, b| a.0.cmp(&b.0));
        }
    }

    let loaded: Vec<std::result::Result<PairedSample, String>> = pairs
        .par_iter()
        .map(|(name, d, c)| {
            let load = |p: &Path| Image::load_resized(p, size).map_err(|e| e.to_string());
            let degraded = load(d)?;
            let clean = load(c)?;
            if (degraded.width, degraded.height) != (clean.width, clean.height) {
                return Err(format!(
                    "{name}: degraded is {}x{}, clean is {}x{}",
                    degraded.width, degraded.height, clean.width, clean.height
                ));
            }
            Ok(PairedSample {
                name: name.clone(),
                degraded,
                clean,
                params: None,
            })
        })
        .collect();
    let mut samples = Vec::with_capacity(loaded.len());
    for r in loaded {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("{e}");
                report.undecodable.push(e);
            }
        }
    }
    for u in &report.unmatched {
        log::warn!("no counterpart for {u}");
    }
    if samples.is_empty() {
        return Err(LaffError::Dataset(format!("no usable pairs under {}", root.display())));
    }
    Ok((samples, report))
}
