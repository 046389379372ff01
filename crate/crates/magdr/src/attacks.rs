//! Disruption attacks against an editing generator: sign-ascent within an
//! L-infinity ball, a tanh-reparametrized optimization attack, targeted
//! variants of both, the defense-aware ensemble attack, and the uniform
//! noise control.
//!
//! All attacks start from a zero perturbation so traces are comparable
//! across seeds; a config flag turns on random starts. When a gradient
//! vanishes identically (fully saturated input), the step falls back to a
//! seeded random sign pattern so the ascent can leave the plateau.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::generator::{Condition, GeneratorContract, GeneratorError};
use crate::imagecore::Image;
use crate::metrics::{mse, MetricError};
use crate::transforms::{apply, consistency_battery, smooth_vjp, TransformError, TransformSpec};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("attack config invalid: {0}")]
    BadConfig(String),
    #[error("adaptive attack needs a nonempty defense_specs list")]
    EmptyDefenseSet,
    #[error("unsupported attack loss '{0}' (only 'mse' is implemented)")]
    UnsupportedLoss(String),
    #[error("target image is {th}x{tw}x{tc}, expected {h}x{w}x{c}")]
    TargetShape {
        th: usize,
        tw: usize,
        tc: usize,
        h: usize,
        w: usize,
        c: usize,
    },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Pgd,
    Cw,
    Adaptive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Largest per-pixel deviation, in [0,1] pixel units.
    pub eps: f64,
    /// Step size; defaults to eps/10 when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub iterations: usize,
    pub method: AttackMethod,
    /// Objective metric on the output pair. Only "mse" is implemented.
    #[serde(default = "default_loss")]
    pub loss: String,
    /// Proximity penalty weight for the optimization attack.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Path to a target image; presence switches to the targeted variant.
    #[serde(default)]
    pub target: Option<String>,
    /// Preprocessing ensemble the adaptive attack differentiates through;
    /// empty means "use the consistency battery".
    #[serde(default)]
    pub defense_specs: Vec<TransformSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub random_start: bool,
}

fn default_loss() -> String {
    "mse".to_string()
}

fn default_kappa() -> f64 {
    0.1
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            eps: 0.05,
            alpha: None,
            iterations: 40,
            method: AttackMethod::Pgd,
            loss: default_loss(),
            kappa: default_kappa(),
            target: None,
            defense_specs: Vec::new(),
            seed: 0,
            random_start: false,
        }
    }
}

impl AttackConfig {
    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.eps / 10.0)
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=0.25).contains(&self.eps) {
            return Err(AttackError::BadConfig(format!(
                "eps must be in [0, 0.25], got {}",
                self.eps
            )));
        }
        if self.eps > 0.0 {
            let a = self.step_size();
            if !(a > 0.0 && a <= self.eps) {
                return Err(AttackError::BadConfig(format!(
                    "alpha must satisfy 0 < alpha <= eps, got {a}"
                )));
            }
        }
        if self.iterations < 1 {
            return Err(AttackError::BadConfig("iterations must be >= 1".into()));
        }
        if self.loss != "mse" {
            return Err(AttackError::UnsupportedLoss(self.loss.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_hat: Image,
    pub delta: Image,
    /// Objective value at the start of each iteration.
    pub loss_trace: Vec<f64>,
    /// Output-pair damage: mse(G(x_hat), G(x)).
    pub output_mse: f64,
    pub linf: f64,
}

/// Seed offsets keep the attack streams disjoint from fixture synthesis and
/// from each other.
const SIGN_STREAM_OFFSET: u64 = 777;
const CW_STREAM_OFFSET: u64 = 333;
const NOISE_STREAM_OFFSET: u64 = 555;

fn random_signs(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

fn finalize(
    x: &Image,
    x_hat: Image,
    eps: f64,
    loss_trace: Vec<f64>,
    cond: &Condition,
    gen: &dyn GeneratorContract,
    reference: &Image,
) -> Result<AttackResult, AttackError> {
    let delta = x_hat.zip_map(x, |a, b| a - b);
    let linf = delta.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    assert!(
        linf <= eps + 1e-12,
        "budget violated: linf {linf} > eps {eps}"
    );
    assert!(
        x_hat.data.iter().all(|&v| (0.0..=1.0).contains(&v)),
        "attack output left [0,1]"
    );
    let y_hat = gen.forward(&x_hat, cond)?;
    let output_mse = mse(&y_hat, reference)?;
    Ok(AttackResult {
        x_hat,
        delta,
        loss_trace,
        output_mse,
        linf,
    })
}

fn zero_budget_result(
    x: &Image,
    cond: &Condition,
    gen: &dyn GeneratorContract,
) -> Result<AttackResult, AttackError> {
    let reference = gen.forward(x, cond)?;
    finalize(x, x.clone(), 0.0, Vec::new(), cond, gen, &reference)
}

/// Interior mask: saturated pixels stop contributing gradient, matching the
/// clamp's zero subgradient.
fn mask_interior(g: &mut Image, raw: &Image) {
    for (gv, &rv) in g.data.iter_mut().zip(raw.data.iter()) {
        if rv <= 0.0 || rv >= 1.0 {
            *gv = 0.0;
        }
    }
}

fn max_abs(img: &Image) -> f64 {
    img.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Shared sign-ascent loop. `targets` supplies the reference output and the
/// sign of the step: +1 pushes the output away from it, -1 pulls toward it.
/// The adaptive ensemble is expressed as the list of preprocessing specs.
fn sign_ascent(
    x: &Image,
    cond: &Condition,
    gen: &dyn GeneratorContract,
    cfg: &AttackConfig,
    reference: &Image,
    direction: f64,
    specs: Option<&[TransformSpec]>,
) -> Result<AttackResult, AttackError> {
    let eps = cfg.eps;
    let alpha = cfg.step_size();
    let n = x.data.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SIGN_STREAM_OFFSET));
    let mut delta = Image::zeros(x.h, x.w, x.c);
    if cfg.random_start {
        for v in delta.data.iter_mut() {
            *v = rng.random_range(-eps..eps);
        }
    }
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let raw = x.zip_map(&delta, |a, b| a + b);
        let xa = raw.clamp01();
        let mut g = Image::zeros(x.h, x.w, x.c);
        let mut loss = 0.0;
        match specs {
            None => {
                let y = gen.forward(&xa, cond)?;
                loss = mse(&y, reference)?;
                let cot = y.zip_map(reference, |a, b| 2.0 * (a - b) / n);
                g = gen.vjp(&xa, cond, &cot)?;
            }
            Some(battery) => {
                for spec in battery {
                    let xt = apply(spec, &xa)?;
                    let y = gen.forward(&xt, cond)?;
                    loss += mse(&y, reference)?;
                    let cot = y.zip_map(reference, |a, b| 2.0 * (a - b) / n);
                    let gk = smooth_vjp(spec, &xa, &gen.vjp(&xt, cond, &cot)?)?;
                    g = g.zip_map(&gk, |a, b| a + b);
                }
            }
        }
        trace.push(loss);
        mask_interior(&mut g, &raw);
        let step: Vec<f64> = if max_abs(&g) == 0.0 {
            random_signs(&mut rng, g.data.len())
                .into_iter()
                .map(|s| alpha * s)
                .collect()
        } else {
            g.data
                .iter()
                .map(|&v| alpha * direction * v.signum())
                .collect()
        };
        for (i, dv) in delta.data.iter_mut().enumerate() {
            *dv = (*dv + step[i]).clamp(-eps, eps);
        }
        // keep x + delta inside the image box as well
        for (dv, &xv) in delta.data.iter_mut().zip(x.data.iter()) {
            *dv = (xv + *dv).clamp(0.0, 1.0) - xv;
        }
    }
    let x_hat = x.zip_map(&delta, |a, b| (a + b).clamp(0.0, 1.0));
    let clean_out = gen.forward(x, cond)?;
    finalize(x, x_hat, eps, trace, cond, gen, &clean_out)
}

/// Untargeted sign ascent: maximizes output damage relative to the clean
/// output, projecting back to the budget ball and the image box each step.
pub fn pgd_disrupt(
    x: &Image,
    cond: &Condition,
    gen: &dyn GeneratorContract,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    if cfg.eps == 0.0 {
        return zero_budget_result(x, cond, gen);
    }
    let reference = gen.forward(x, cond)?;
    sign_ascent(x, cond, gen, cfg, &reference, 1.0, None)
}

/// Targeted variant: descends toward a chosen output instead of fleeing the
/// clean one. Passing the input itself as target asks the generator's edit
/// to be undone.
pub fn pgd_targeted(
    x: &Image,
    cond: &Condition,
    r_t: &Image,
    gen: &dyn GeneratorContract,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    check_target(x, r_t)?;
    if cfg.eps == 0.0 {
        return zero_budget_result(x, cond, gen);
    }
    sign_ascent(x, cond, gen, cfg, r_t, -1.0, None)
}

fn check_target(x: &Image, r_t: &Image) -> Result<(), AttackError> {
    if !x.same_shape(r_t) {
        return Err(AttackError::TargetShape {
            th: r_t.h,
            tw: r_t.w,
            tc: r_t.c,
            h: x.h,
            w: x.w,
            c: x.c,
        });
    }
    Ok(())
}

fn cw_loop(
    x: &Image,
    cond: &Condition,
    gen: &dyn GeneratorContract,
    cfg: &AttackConfig,
    reference: &Image,
    direction: f64,
    proximity: bool,
) -> Result<AttackResult, AttackError> {
    let eps = cfg.eps;
    let alpha = cfg.step_size();
    let n = x.data.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(CW_STREAM_OFFSET));
    let mut v = Image::zeros(x.h, x.w, x.c);
    if cfg.random_start {
        for val in v.data.iter_mut() {
            *val = rng.random_range(-1.0..1.0);
        }
    }
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let th = v.map(f64::tanh);
        let raw = x.zip_map(&th, |a, t| a + eps * t);
        let xh = raw.clamp01();
        let y = gen.forward(&xh, cond)?;
        let fit = mse(&y, reference)?;
        let cot = y.zip_map(reference, |a, b| 2.0 * (a - b) / n);
        let mut g_x = gen.vjp(&xh, cond, &cot)?;
        mask_interior(&mut g_x, &raw);
        let mut loss = fit * direction;
        if proximity {
            let prox: f64 = xh
                .data
                .iter()
                .zip(x.data.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
            loss -= cfg.kappa * prox;
            for (gv, (&xv, &ov)) in g_x
                .data
                .iter_mut()
                .zip(xh.data.iter().zip(x.data.iter()))
            {
                *gv -= cfg.kappa * 2.0 * (xv - ov) / n;
            }
        }
        trace.push(loss);
        let g_v = g_x.zip_map(&th, |g, t| g * eps * (1.0 - t * t));
        let gmax = max_abs(&g_v);
        if gmax < 1e-20 {
            let signs = random_signs(&mut rng, v.data.len());
            for (vv, s) in v.data.iter_mut().zip(signs) {
                *vv += alpha * s;
            }
            continue;
        }
        for (vv, &gv) in v.data.iter_mut().zip(g_v.data.iter()) {
            *vv += direction * alpha * gv / gmax;
        }
    }
    let x_hat = x.zip_map(&v, |a, vv| (a + eps * vv.tanh()).clamp(0.0, 1.0));
    let clean_out = gen.forward(x, cond)?;
    finalize(x, x_hat, eps, trace, cond, gen, &clean_out)
}

/// Optimization attack: an unconstrained variable parametrizes the
/// perturbation through eps*tanh, so the budget holds by construction.
/// Ascends output damage minus a quadratic proximity penalty with
/// max-normalized gradient steps.
pub fn cw_disrupt(
    x: &Image,
    cond: &Condition,
    gen: &dyn GeneratorContract,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    if cfg.eps == 0.0 {
        return zero_budget_result(x, cond, gen);
    }
    let reference = gen.forward(x, cond)?;
    cw_loop(x, cond, gen, cfg, &reference, 1.0, true)
}

/// Targeted optimization attack: descends output distance to the target.
pub fn cw_targeted(
    x: &Image,
    cond: &Condition,
    r_t: &Image,
    gen: &dyn GeneratorContract,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    check_target(x, r_t)?;
    if cfg.eps == 0.0 {
        return zero_budget_result(x, cond, gen);
    }
    cw_loop(x, cond, gen, cfg, r_t, -1.0, false)
}

/// Defense-aware attack: sums the disruption objective over a preprocessing
/// ensemble, pulling each branch's gradient back through the transform's
/// smooth surrogate. With a single identity spec this collapses to plain
/// sign ascent, same trace and all.
pub fn adaptive_attack(
    x: &Image,
    cond: &Condition,
    gen: &dyn GeneratorContract,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let battery;
    let specs: &[TransformSpec] = if cfg.defense_specs.is_empty() {
        battery = consistency_battery();
        &battery
    } else {
        &cfg.defense_specs
    };
    if specs.is_empty() {
        return Err(AttackError::EmptyDefenseSet);
    }
    if cfg.eps == 0.0 {
        return zero_budget_result(x, cond, gen);
    }
    let reference = gen.forward(x, cond)?;
    sign_ascent(x, cond, gen, cfg, &reference, 1.0, Some(specs))
}

/// Control condition: seeded uniform noise of the same budget, no gradient
/// information at all.
pub fn uniform_noise(x: &Image, eps: f64, seed: u64) -> Image {
    if eps == 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(NOISE_STREAM_OFFSET));
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = (*v + rng.random_range(-eps..eps)).clamp(0.0, 1.0);
    }
    out
}

/// Dispatch by config: method plus optional target image.
pub fn run_attack(
    x: &Image,
    cond: &Condition,
    gen: &dyn GeneratorContract,
    cfg: &AttackConfig,
    target: Option<&Image>,
) -> Result<AttackResult, AttackError> {
    match (cfg.method, target) {
        (AttackMethod::Pgd, None) => pgd_disrupt(x, cond, gen, cfg),
        (AttackMethod::Pgd, Some(t)) => pgd_targeted(x, cond, t, gen, cfg),
        (AttackMethod::Cw, None) => cw_disrupt(x, cond, gen, cfg),
        (AttackMethod::Cw, Some(t)) => cw_targeted(x, cond, t, gen, cfg),
        (AttackMethod::Adaptive, _) => adaptive_attack(x, cond, gen, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{sample_condition, toy_for_masks};
    use crate::imagecore::{synth_fixture, FixtureSpec};
    use crate::imagecore::MaskTensor;

    fn fixture(seed: u64) -> (Image, MaskTensor, Condition) {
        let (x, mut masks) = synth_fixture(&FixtureSpec {
            seed,
            size: 16,
            n_regions: 3,
        })
        .unwrap();
        let cond = sample_condition(seed, masks.n);
        masks.target_index = cond.attribute_index;
        (x, masks, cond)
    }

    #[test]
    fn budget_and_box_hold() {
        let (x, masks, cond) = fixture(21);
        let gen = toy_for_masks(&masks);
        let cfg = AttackConfig {
            iterations: 5,
            ..AttackConfig::default()
        };
        let res = pgd_disrupt(&x, &cond, &gen, &cfg).unwrap();
        assert!(res.linf <= cfg.eps + 1e-12);
        assert!(res.x_hat.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(res.loss_trace.len(), 5);
    }

    #[test]
    fn zero_budget_returns_input() {
        let (x, masks, cond) = fixture(22);
        let gen = toy_for_masks(&masks);
        let cfg = AttackConfig {
            eps: 0.0,
            ..AttackConfig::default()
        };
        let res = pgd_disrupt(&x, &cond, &gen, &cfg).unwrap();
        assert_eq!(res.x_hat.data, x.data);
        assert_eq!(res.output_mse, 0.0);
    }

    #[test]
    fn identity_ensemble_matches_plain_ascent() {
        let (x, masks, cond) = fixture(23);
        let gen = toy_for_masks(&masks);
        let cfg = AttackConfig {
            iterations: 8,
            defense_specs: vec![TransformSpec::identity()],
            method: AttackMethod::Adaptive,
            ..AttackConfig::default()
        };
        let a = adaptive_attack(&x, &cond, &gen, &cfg).unwrap();
        let b = pgd_disrupt(&x, &cond, &gen, &cfg).unwrap();
        let diff = a
            .x_hat
            .data
            .iter()
            .zip(b.x_hat.data.iter())
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert_eq!(diff, 0.0, "identity ensemble must reduce exactly");
    }

    #[test]
    fn determinism_given_seed() {
        let (x, masks, cond) = fixture(24);
        let gen = toy_for_masks(&masks);
        let cfg = AttackConfig {
            iterations: 4,
            method: AttackMethod::Cw,
            seed: 9,
            ..AttackConfig::default()
        };
        let a = cw_disrupt(&x, &cond, &gen, &cfg).unwrap();
        let b = cw_disrupt(&x, &cond, &gen, &cfg).unwrap();
        assert_eq!(a.x_hat.data, b.x_hat.data);
        assert_eq!(a.loss_trace, b.loss_trace);
    }
}
