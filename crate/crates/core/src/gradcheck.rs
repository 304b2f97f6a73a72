//! Central finite-difference verification of the tape's gradients, in `f64`.
//!
//! Each checked tensor `t` gets the score
//!
//! ```text
//! max |analytic - numeric| / max(max |analytic|, max |numeric|, FLOOR)
//! ```
//!
//! over its sampled entries. Non-scalar outputs are projected onto a fixed
//! random direction first, so every output entry contributes.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{aff_forward, residual_forward, AffParams, Gate, ResidualParams};
use crate::error::{LaffError, Result};
use crate::graph::{Graph, ParamId, Var};
use crate::losses::{self, ConvExtractor, LossConfig, SsimConfig};
use crate::model::{LaffNetModel, ModelConfig};
use crate::params::{BoundParams, ParamKind, ParamStore};
use crate::synth::sample_seed;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-8;

/// Smallest step, relative to the configured one, tried near a kink.
const MIN_STEP_RATIO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Ops,
    Aff,
    Residual,
    Losses,
    Network,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Ops, Suite::Aff, Suite::Residual, Suite::Losses, Suite::Network];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Ops => "ops",
            Suite::Aff => "aff",
            Suite::Residual => "residual",
            Suite::Losses => "losses",
            Suite::Network => "network",
        })
    }
}

impl FromStr for Suite {
    type Err = LaffError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| LaffError::Config(format!("unknown gradcheck module {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    pub network_tolerance: f64,
    /// Seeds per op in the ops suite.
    pub op_seeds: usize,
    /// Minimum number of sampled network parameters.
    pub network_samples: usize,
    /// Width of the blocks and the network under test.
    pub width: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            h: 1e-5,
            tolerance: 1e-4,
            network_tolerance: 1e-3,
            op_seeds: 20,
            network_samples: 50,
            width: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub suite: Suite,
    pub item: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> Option<&GradcheckRow> {
        self.rows.iter().max_by(|a, b| (a.max_rel_err / a.threshold).total_cmp(&(b.max_rel_err / b.threshold)))
    }

    pub fn checked(&self) -> usize {
        self.rows.iter().map(|r| r.checked).sum()
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.item.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<9} {:<w$} {:>8} {:>12} {:>10}  result\n", "suite", "item", "checked", "max rel err", "threshold");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<9} {:<w$} {:>8} {:>12.3e} {:>10.0e}  {}\n",
                r.suite.to_string(),
                r.item,
                r.checked,
                r.max_rel_err,
                r.threshold,
                if r.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Which entries of each tensor get a numeric derivative.
#[derive(Debug, Clone, Copy)]
enum Sampling {
    All,
    /// Up to `k` distinct entries per tensor.
    PerTensor(usize),
}

/// Per-tensor `(name, checked, max |a - n|, max magnitude)`.
type Tally = Vec<(String, usize, f64, f64)>;

/// Compares analytic and numeric gradients of `f` with respect to every
/// tensor in `store`.
fn check<F>(store: &ParamStore<f64>, f: F, sampling: Sampling, h: f64, rng: &mut ChaCha8Rng) -> Result<Tally>
where
    F: Fn(&Graph<f64>, &BoundParams<f64>) -> Result<Var<f64>>,
{
    let g = Graph::<f64>::new();
    let bound = store.bind(&g)?;
    let out = f(&g, &bound)?;
    let direction = Tensor::rand_uniform(out.shape(), -1.0, 1.0, rng)?;
    let grads = g.backward(&out, &direction)?;

    // Objective value and branch digest.
    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let g = Graph::<f64>::branch_tracking();
        let b = s.bind(&g)?;
        let o = f(&g, &b)?;
        let v = o.value().data().iter().zip(direction.data()).map(|(a, b)| a * b).sum();
        Ok((v, g.branch_digest().unwrap_or(0)))
    };

    let base = eval(store)?.1;
    let mut work = store.clone();
    let mut tally = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let entries: Vec<usize> = match sampling {
            Sampling::All => (0..n).collect(),
            Sampling::PerTensor(k) => {
                let mut e = sample(rng, n, k.min(n)).into_vec();
                e.sort_unstable();
                e
            }
        };
        let zeros = Tensor::zeros(store.get(id).shape())?;
        let analytic = grads.get(id).unwrap_or(&zeros);
        let (mut diff, mut mag) = (0.0f64, 0.0f64);
        for &k in &entries {
            let orig = store.get(id).data()[k];
            // A step that crosses a ReLU, |x| or max-pool switch measures a
            // different piece of the function; shrink it until neither side
            // changes branch.
            let mut step = h;
            let numeric = loop {
                work.get_mut(id).data_mut()[k] = orig + step;
                let (up, bu) = eval(&work)?;
                work.get_mut(id).data_mut()[k] = orig - step;
                let (down, bd) = eval(&work)?;
                work.get_mut(id).data_mut()[k] = orig;
                if (bu == base && bd == base) || step <= h * MIN_STEP_RATIO {
                    break (up - down) / (2.0 * step);
                }
                step /= 10.0;
            };
            let a = analytic.data()[k];
            diff = diff.max((a - numeric).abs());
            mag = mag.max(a.abs()).max(numeric.abs());
        }
        tally.push((store.name(id).to_string(), entries.len(), diff, mag));
    }
    Ok(tally)
}

fn rel(diff: f64, mag: f64) -> f64 {
    diff / mag.max(FLOOR)
}

/// Appends one row per tally entry.
fn rows_from(tally: Tally, suite: Suite, prefix: &str, threshold: f64, rows: &mut Vec<GradcheckRow>) {
    for (name, checked, diff, mag) in tally {
        let e = rel(diff, mag);
        rows.push(GradcheckRow {
            suite,
            item: if prefix.is_empty() { name } else { format!("{prefix}/{name}") },
            checked,
            max_rel_err: e,
            threshold,
            passed: e < threshold,
        });
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng).expect("valid shape")
}

/// Uniform in `[-hi, -lo] ∪ [lo, hi]`, keeping inputs away from kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let t = uniform(rng, shape, lo, hi);
    let signs: Vec<f64> = (0..t.len()).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(t.shape(), t.data().iter().zip(&signs).map(|(a, s)| a * s).collect()).unwrap()
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.push(name, ParamKind::Weight, t);
    }
    s
}

type OpCase = (
    &'static str,
    ParamStore<f64>,
    Box<dyn Fn(&Graph<f64>, &BoundParams<f64>) -> Result<Var<f64>>>,
);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let v = |i: usize| ParamId(i);
    let mut cases: Vec<OpCase> = Vec::new();
    for (label, k, pad) in [("conv2d_1x1", 1, 0), ("conv2d_3x3", 3, 1), ("conv2d_5x5", 5, 2), ("conv2d_3x3_valid", 3, 0)] {
        let s = store(vec![
            ("x", uniform(rng, &[2, 2, 6, 5], -1.0, 1.0)),
            ("w", uniform(rng, &[3, 2, k, k], -1.0, 1.0)),
            ("b", uniform(rng, &[3], -1.0, 1.0)),
        ]);
        cases.push((label, s, Box::new(move |g, p| g.conv2d(p.var(v(0)), p.var(v(1)), Some(p.var(v(2))), pad))));
    }
    let s = store(vec![
        ("x", uniform(rng, &[3, 4], -1.0, 1.0)),
        ("w", uniform(rng, &[5, 4], -1.0, 1.0)),
        ("b", uniform(rng, &[5], -1.0, 1.0)),
    ]);
    cases.push(("linear", s, Box::new(move |g, p| g.linear(p.var(v(0)), p.var(v(1)), Some(p.var(v(2)))))));
    let s = store(vec![("x", uniform(rng, &[2, 3, 4, 5], -1.0, 1.0))]);
    cases.push(("global_max_pool", s, Box::new(move |g, p| g.global_max_pool(p.var(v(0))))));

    let pair = |rng: &mut ChaCha8Rng, lo: f64| {
        store(vec![
            ("a", uniform(rng, &[2, 3, 4], -1.0, 1.0)),
            ("b", uniform(rng, &[2, 3, 4], lo, 1.5)),
        ])
    };
    cases.push(("add", pair(rng, -1.0), Box::new(move |g, p| g.add(p.var(v(0)), p.var(v(1))))));
    cases.push(("sub", pair(rng, -1.0), Box::new(move |g, p| g.sub(p.var(v(0)), p.var(v(1))))));
    cases.push(("mul", pair(rng, -1.0), Box::new(move |g, p| g.mul(p.var(v(0)), p.var(v(1))))));
    cases.push(("div", pair(rng, 0.5), Box::new(move |g, p| g.div(p.var(v(0)), p.var(v(1))))));
    let s = store(vec![
        ("x", uniform(rng, &[2, 3, 4, 4], -1.0, 1.0)),
        ("s", uniform(rng, &[2, 3], -1.0, 1.0)),
    ]);
    cases.push(("channel_scale", s, Box::new(move |g, p| g.channel_scale(p.var(v(0)), p.var(v(1))))));

    let unary = |rng: &mut ChaCha8Rng, t: Option<Tensor<f64>>| {
        store(vec![("x", t.unwrap_or_else(|| uniform(rng, &[2, 3, 4], -1.0, 1.0)))])
    };
    let t = away_from_zero(rng, &[2, 3, 4], 0.05, 1.0);
    cases.push(("relu", unary(rng, Some(t)), Box::new(move |g, p| g.relu(p.var(v(0))))));
    let t = uniform(rng, &[2, 3, 4], -6.0, 6.0);
    cases.push(("sigmoid", unary(rng, Some(t)), Box::new(move |g, p| g.sigmoid(p.var(v(0))))));
    let t = uniform(rng, &[2, 3, 4], -2.0, 2.0);
    cases.push(("exp", unary(rng, Some(t)), Box::new(move |g, p| g.exp(p.var(v(0))))));
    let t = uniform(rng, &[2, 3, 4], 0.5, 2.0);
    cases.push(("sqrt", unary(rng, Some(t)), Box::new(move |g, p| g.sqrt(p.var(v(0))))));
    let t = away_from_zero(rng, &[2, 3, 4], 0.05, 1.0);
    cases.push(("abs", unary(rng, Some(t)), Box::new(move |g, p| g.abs(p.var(v(0))))));
    cases.push(("scale", unary(rng, None), Box::new(move |g, p| g.scale(p.var(v(0)), -1.7))));
    cases.push(("offset", unary(rng, None), Box::new(move |g, p| g.offset(p.var(v(0)), 0.3))));
    cases.push(("sum", unary(rng, None), Box::new(move |g, p| g.sum(p.var(v(0))))));
    cases.push(("mean", unary(rng, None), Box::new(move |g, p| g.mean(p.var(v(0))))));
    let taps = SsimConfig {
        window: 5,
        ..SsimConfig::default()
    }
    .taps::<f64>();
    let s = store(vec![("x", uniform(rng, &[1, 2, 7, 8], -1.0, 1.0))]);
    cases.push(("blur_valid", s, Box::new(move |g, p| g.blur_valid(p.var(v(0)), Rc::clone(&taps)))));
    cases
}

fn suite_ops(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    // (op/input) -> (checked, worst rel err), merged over seeds
    let mut merged: Vec<(String, usize, f64)> = Vec::new();
    for s in 0..cfg.op_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, s));
        for (label, st, f) in op_cases(&mut rng) {
            for (name, checked, diff, mag) in check(&st, &f, Sampling::All, cfg.h, &mut rng)? {
                let key = format!("{label}/{name}");
                let e = rel(diff, mag);
                match merged.iter_mut().find(|m| m.0 == key) {
                    Some(m) => {
                        m.1 += checked;
                        m.2 = m.2.max(e);
                    }
                    None => merged.push((key, checked, e)),
                }
            }
        }
    }
    Ok(merged
        .into_iter()
        .map(|(item, checked, e)| GradcheckRow {
            suite: Suite::Ops,
            item: format!("{item} x{}", cfg.op_seeds),
            checked,
            max_rel_err: e,
            threshold: cfg.tolerance,
            passed: e < cfg.tolerance,
        })
        .collect())
}

fn suite_aff(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    for gate in [Gate::Sigmoid, Gate::Softmax, Gate::None] {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 101));
        let mut st = ParamStore::<f64>::new();
        let x = uniform(&mut rng, &[2, cfg.width, 8, 8], -1.0, 1.0);
        st.push("input", ParamKind::Weight, x);
        let aff = AffParams::new(&mut st, "aff", cfg.width, &mut rng)?;
        let tally = check(
            &st,
            |g, p| aff_forward(g, p, p.var(ParamId(0)), &aff, gate),
            Sampling::All,
            cfg.h,
            &mut rng,
        )?;
        rows_from(tally, Suite::Aff, &format!("gate={gate}"), cfg.tolerance, &mut rows);
    }
    Ok(rows)
}

fn suite_residual(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 102));
    let mut st = ParamStore::<f64>::new();
    st.push("input", ParamKind::Weight, uniform(&mut rng, &[2, cfg.width, 8, 8], -1.0, 1.0));
    let res = ResidualParams::new(&mut st, "res", cfg.width, &mut rng)?;
    let tally = check(
        &st,
        |g, p| residual_forward(g, p, p.var(ParamId(0)), &res),
        Sampling::All,
        cfg.h,
        &mut rng,
    )?;
    let mut rows = Vec::new();
    rows_from(tally, Suite::Residual, "", cfg.tolerance, &mut rows);
    Ok(rows)
}

fn suite_losses(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 103));
    let target = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let pred = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let st = store(vec![("pred", pred)]);
    let extractor = ConvExtractor::<f64>::random(losses::RANDOM_EXTRACTOR_SEED);
    let lc = LossConfig::default();
    let mut rows = Vec::new();
    let t = &target;
    let tail: [(&str, Box<dyn Fn(&Graph<f64>, &BoundParams<f64>) -> Result<Var<f64>>>); 4] = [
        (
            "charbonnier",
            Box::new(|g, p| losses::charbonnier(g, &g.input(t.clone()), p.var(ParamId(0)), lc.charbonnier_eps)),
        ),
        ("ssim_loss", Box::new(|g, p| losses::ssim_loss(g, &g.input(t.clone()), p.var(ParamId(0)), &lc.ssim))),
        (
            "perceptual",
            Box::new(|g, p| losses::perceptual_loss(g, &g.input(t.clone()), p.var(ParamId(0)), &extractor)),
        ),
        (
            "total",
            Box::new(|g, p| Ok(losses::total_loss(g, &g.input(t.clone()), p.var(ParamId(0)), &lc, &extractor)?.total)),
        ),
    ];
    for (name, f) in tail {
        let tally = check(&st, f, Sampling::All, cfg.h, &mut rng)?;
        rows_from(tally, Suite::Losses, name, cfg.tolerance, &mut rows);
    }
    Ok(rows)
}

fn suite_network(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 104));
    let model = LaffNetModel::<f64>::build(ModelConfig::with_width(cfg.width), cfg.seed)?;
    let image = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let target = uniform(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let extractor = ConvExtractor::<f64>::random(losses::RANDOM_EXTRACTOR_SEED);
    let lc = LossConfig::default();
    let per_tensor = cfg.network_samples.div_ceil(model.params.len()).max(1);
    let tally = check(
        &model.params,
        |g, p| {
            let x = g.input(image.clone());
            let y = model.forward_bound(g, p, &x)?;
            Ok(losses::total_loss(g, &g.input(target.clone()), &y, &lc, &extractor)?.total)
        },
        Sampling::PerTensor(per_tensor),
        cfg.h,
        &mut rng,
    )?;
    let checked: usize = tally.iter().map(|t| t.1).sum();
    if checked < cfg.network_samples {
        return Err(LaffError::Config(format!(
            "network check sampled {checked} entries, fewer than {}",
            cfg.network_samples
        )));
    }
    let mut rows = Vec::new();
    rows_from(tally, Suite::Network, "", cfg.network_tolerance, &mut rows);
    Ok(rows)
}

pub fn run_suite(suite: Suite, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let rows = match suite {
        Suite::Ops => suite_ops(cfg)?,
        Suite::Aff => suite_aff(cfg)?,
        Suite::Residual => suite_residual(cfg)?,
        Suite::Losses => suite_losses(cfg)?,
        Suite::Network => suite_network(cfg)?,
    };
    Ok(GradcheckReport { rows })
}

pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for s in Suite::ALL {
        report.rows.extend(run_suite(s, cfg)?.rows);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel(0.5, 2.0), 0.25);
        assert_eq!(rel(1e-12, 0.0), 1e-12 / FLOOR);
    }

    #[test]
    fn residual_suite_passes() {
        let r = run_suite(Suite::Residual, &GradcheckConfig::default()).unwrap();
        assert!(r.all_passed(), "{}", r.to_text());
        assert_eq!(r.rows.len(), 5);
    }
}
