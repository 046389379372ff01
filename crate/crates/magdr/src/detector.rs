//! Two complementary detectors for disrupted inputs.
//!
//! The distortion detector compares each non-target region's normalized
//! distance profile against the target region's own profile: an editing
//! generator should change the target region most, so any other region
//! exceeding that benchmark is suspicious. The consistency detector probes
//! output stability under a battery of mild transforms: adversarial inputs
//! sit on unstable points of the generator, so their outputs scatter.
//! Verdicts combine the two by OR, which keeps the union of their recall.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::generator::{Condition, GeneratorContract, GeneratorError};
use crate::imagecore::{apply_mask, Image, ImageError, MaskTensor};
use crate::metrics::{
    distance_vector_cached, DistanceVector, FeatureExtractor, MetricError,
    DEFAULT_FEATURE_SEED, N_COMPONENTS,
};
use crate::transforms::{consistency_battery, TransformError, TransformSpec};

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("mask tensor has no non-target regions")]
    NoBenchmarkContrast,
    #[error("consistency battery needs at least 2 transforms, got {0}")]
    BatteryTooSmall(usize),
    #[error("calibration needs at least {need} clean samples, got {got}")]
    CalibrationTooSmall { need: usize, got: usize },
    #[error("target fpr {0} outside (0, 0.5)")]
    BadFpr(f64),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_K_CONS: usize = 8;

fn default_weights() -> [f64; N_COMPONENTS] {
    [1.0 / N_COMPONENTS as f64; N_COMPONENTS]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Balance between the two detector scores in s_final.
    pub lambda: f64,
    /// Weights over the distance-vector components; must sum to 1.
    pub weights: [f64; N_COMPONENTS],
    /// Flagged-region count at or above which the distortion detector fires.
    pub tau_regions: usize,
    /// Consistency score above which the consistency detector fires.
    pub tau_cons: f64,
    /// Battery size for the consistency detector (mildest spec per category).
    pub k_cons: usize,
    pub feature_seed: u64,
    /// Sha-256 of the calibration set, recorded by calibrate.
    #[serde(default)]
    pub calibration_hash: Option<String>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            lambda: DEFAULT_LAMBDA,
            weights: default_weights(),
            tau_regions: 1,
            tau_cons: 0.0,
            k_cons: DEFAULT_K_CONS,
            feature_seed: DEFAULT_FEATURE_SEED,
            calibration_hash: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.lambda > 0.0) {
            return Err(DetectorError::BadConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(DetectorError::BadConfig("negative metric weight".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DetectorError::BadConfig(format!(
                "metric weights sum to {sum}, expected 1"
            )));
        }
        if self.tau_cons < 0.0 {
            return Err(DetectorError::BadConfig("tau_cons must be >= 0".into()));
        }
        if self.k_cons < 2 || self.k_cons > 8 {
            return Err(DetectorError::BatteryTooSmall(self.k_cons));
        }
        Ok(())
    }

    /// The transform battery this config probes with: the mildest parameter
    /// of each category, truncated to k_cons entries.
    pub fn battery(&self) -> Vec<TransformSpec> {
        consistency_battery().into_iter().take(self.k_cons).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Clean,
    Disrupted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub verdict: Verdict,
    /// One flag per region; the target entry is always 0 by construction.
    pub region_flags: Vec<u8>,
    pub n_flagged: usize,
    pub s_dist: f64,
    pub s_cons: f64,
    pub s_final: f64,
    /// Normalized per-region distance profiles, target included.
    pub dbars: Vec<DistanceVector>,
    pub target_index: usize,
    /// Thresholds and balance in force when the verdict was made.
    pub lambda: f64,
    pub tau_regions: usize,
    pub tau_cons: f64,
}

impl DetectionReport {
    /// Flags packed little-endian: bit i set iff region i flagged.
    pub fn flags_bitmask(&self) -> u64 {
        self.region_flags
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &f)| acc | ((f as u64) << i))
    }

    pub fn csv_header() -> &'static str {
        "flags_bitmask,n_flagged,s_dist,s_cons,s_final,verdict"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.12},{:.12},{:.12},{}",
            self.flags_bitmask(),
            self.n_flagged,
            self.s_dist,
            self.s_cons,
            self.s_final,
            match self.verdict {
                Verdict::Clean => "clean",
                Verdict::Disrupted => "disrupted",
            }
        )
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Per-region normalized distance profiles between two images: each region's
/// distance vector on the masked pair, divided by the region's soft mass so
/// small regions are not drowned out.
pub fn region_distances(
    features: &FeatureExtractor,
    x: &Image,
    y: &Image,
    masks: &MaskTensor,
) -> Result<Vec<DistanceVector>, DetectorError> {
    let mut out = Vec::with_capacity(masks.n);
    for i in 0..masks.n {
        let mx = apply_mask(x, i, masks)?;
        let my = apply_mask(y, i, masks)?;
        let dv = distance_vector_cached(&mx, &my, features, None, None)?;
        let mass = masks.masses[i].max(1e-12);
        out.push(dv.scale(1.0 / mass));
    }
    Ok(out)
}

/// Benchmark comparison: region i (≠ target) is flagged when any component
/// of its profile reaches the target region's own, plus the smooth score
/// aggregating sigmoid-squashed profiles over the non-target regions.
pub fn distortion_flags(
    dbars: &[DistanceVector],
    target_index: usize,
    weights: &[f64; N_COMPONENTS],
) -> Result<(Vec<u8>, f64), DetectorError> {
    if dbars.len() < 2 {
        return Err(DetectorError::NoBenchmarkContrast);
    }
    let dc = &dbars[target_index];
    let mut flags = vec![0u8; dbars.len()];
    let mut s_dist = 0.0;
    for (i, di) in dbars.iter().enumerate() {
        if i == target_index {
            continue;
        }
        let excess = (0..N_COMPONENTS)
            .map(|m| di.0[m] - dc.0[m])
            .fold(f64::NEG_INFINITY, f64::max);
        if excess >= 0.0 {
            flags[i] = 1;
        }
        for m in 0..N_COMPONENTS {
            s_dist += weights[m] * sigmoid(di.0[m]);
        }
    }
    Ok((flags, s_dist))
}

/// Output scatter under the transform battery: componentwise population
/// standard deviation of the battery's distance vectors, weight-reduced to a
/// scalar. Stable (clean) inputs give near-identical outputs under mild
/// transforms, so the spread stays small.
pub fn consistency_score(
    features: &FeatureExtractor,
    x_hat: &Image,
    cond: &Condition,
    gen: &dyn GeneratorContract,
    specs: &[TransformSpec],
    weights: &[f64; N_COMPONENTS],
) -> Result<f64, DetectorError> {
    if specs.len() < 2 {
        return Err(DetectorError::BatteryTooSmall(specs.len()));
    }
    let y_ref = gen.forward(x_hat, cond)?;
    let ref_stack = features.stack(&y_ref);
    let mut dvecs = Vec::with_capacity(specs.len());
    for spec in specs {
        let xt = crate::transforms::apply(spec, x_hat)?;
        let yt = gen.forward(&xt, cond)?;
        let dv = distance_vector_cached(&y_ref, &yt, features, Some(&ref_stack), None)?;
        dvecs.push(dv);
    }
    let k = dvecs.len() as f64;
    let mut s_cons = 0.0;
    for m in 0..N_COMPONENTS {
        let mean = dvecs.iter().map(|d| d.0[m]).sum::<f64>() / k;
        let var = dvecs.iter().map(|d| (d.0[m] - mean).powi(2)).sum::<f64>() / k;
        s_cons += weights[m] * var.sqrt();
    }
    Ok(s_cons)
}

/// Full detection pass: runs both detectors and combines them by OR.
pub fn decide(
    x_hat: &Image,
    cond: &Condition,
    masks: &MaskTensor,
    gen: &dyn GeneratorContract,
    cfg: &DetectorConfig,
) -> Result<DetectionReport, DetectorError> {
    let features = FeatureExtractor::new(cfg.feature_seed);
    decide_with(&features, x_hat, cond, masks, gen, cfg)
}

/// Same as decide, reusing a prebuilt feature extractor. Search loops that
/// score thousands of candidates go through here.
pub fn decide_with(
    features: &FeatureExtractor,
    x_hat: &Image,
    cond: &Condition,
    masks: &MaskTensor,
    gen: &dyn GeneratorContract,
    cfg: &DetectorConfig,
) -> Result<DetectionReport, DetectorError> {
    cfg.validate()?;
    let y = gen.forward(x_hat, cond)?;
    let dbars = region_distances(features, x_hat, &y, masks)?;
    let (region_flags, s_dist) = distortion_flags(&dbars, masks.target_index, &cfg.weights)?;
    let s_cons = consistency_score(
        features,
        x_hat,
        cond,
        gen,
        &cfg.battery(),
        &cfg.weights,
    )?;
    let n_flagged = region_flags.iter().filter(|&&f| f == 1).count();
    let s_final = cfg.lambda * s_dist + s_cons;
    let verdict = if n_flagged >= cfg.tau_regions || s_cons > cfg.tau_cons {
        Verdict::Disrupted
    } else {
        Verdict::Clean
    };
    Ok(DetectionReport {
        verdict,
        region_flags,
        n_flagged,
        s_dist,
        s_cons,
        s_final,
        dbars,
        target_index: masks.target_index,
        lambda: cfg.lambda,
        tau_regions: cfg.tau_regions,
        tau_cons: cfg.tau_cons,
    })
}

/// The combined score alone, for pipeline search and provenance records.
pub fn s_final(
    x_hat: &Image,
    cond: &Condition,
    masks: &MaskTensor,
    gen: &dyn GeneratorContract,
    cfg: &DetectorConfig,
) -> Result<f64, DetectorError> {
    let report = decide(x_hat, cond, masks, gen, cfg)?;
    Ok(report.s_final)
}

fn hash_sample(hasher: &mut Sha256, x: &Image, cond: &Condition, masks: &MaskTensor) {
    hasher.update(u64::to_le_bytes(x.h as u64));
    hasher.update(u64::to_le_bytes(x.w as u64));
    hasher.update(u64::to_le_bytes(x.c as u64));
    for v in &x.data {
        hasher.update(v.to_le_bytes());
    }
    hasher.update(
        serde_json::to_vec(cond).expect("condition serializes"),
    );
    hasher.update(u64::to_le_bytes(masks.target_index as u64));
    for v in &masks.maps {
        hasher.update(v.to_le_bytes());
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fits thresholds on clean data: tau_cons becomes the (1 - fpr) empirical
/// quantile of clean consistency scores, tau_regions the smallest count whose
/// clean false-flag rate stays at or under fpr. The returned config records a
/// digest of the calibration set so reports can prove what they were
/// calibrated on.
pub fn calibrate(
    clean_set: &[(Image, Condition, MaskTensor)],
    gen: &dyn GeneratorContract,
    target_fpr: f64,
    base: &DetectorConfig,
) -> Result<DetectorConfig, DetectorError> {
    let gens: Vec<&dyn GeneratorContract> = clean_set.iter().map(|_| gen).collect();
    calibrate_multi(clean_set, &gens, target_fpr, base)
}

/// Calibration where each sample brings its own generator backend, for
/// backends bound to per-sample mask layouts.
pub fn calibrate_multi(
    clean_set: &[(Image, Condition, MaskTensor)],
    gens: &[&dyn GeneratorContract],
    target_fpr: f64,
    base: &DetectorConfig,
) -> Result<DetectorConfig, DetectorError> {
    const MIN_SAMPLES: usize = 20;
    if clean_set.len() < MIN_SAMPLES {
        return Err(DetectorError::CalibrationTooSmall {
            need: MIN_SAMPLES,
            got: clean_set.len(),
        });
    }
    assert_eq!(clean_set.len(), gens.len(), "one generator per sample");
    if !(target_fpr > 0.0 && target_fpr < 0.5) {
        return Err(DetectorError::BadFpr(target_fpr));
    }
    base.validate()?;
    let features = FeatureExtractor::new(base.feature_seed);
    let battery = base.battery();
    let mut hasher = Sha256::new();
    let mut cons_scores = Vec::with_capacity(clean_set.len());
    let mut flag_counts = Vec::with_capacity(clean_set.len());
    for ((x, cond, masks), gen) in clean_set.iter().zip(gens.iter()) {
        hash_sample(&mut hasher, x, cond, masks);
        let y = gen.forward(x, cond)?;
        let dbars = region_distances(&features, x, &y, masks)?;
        let (flags, _) = distortion_flags(&dbars, masks.target_index, &base.weights)?;
        flag_counts.push(flags.iter().filter(|&&f| f == 1).count());
        cons_scores.push(consistency_score(
            &features, x, cond, *gen, &battery, &base.weights,
        )?);
    }
    let n = cons_scores.len();
    let mut sorted = cons_scores.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let q_index = ((1.0 - target_fpr) * n as f64).ceil() as usize;
    let tau_cons = sorted[q_index.clamp(1, n) - 1];
    let max_regions = clean_set
        .iter()
        .map(|(_, _, m)| m.n)
        .max()
        .expect("nonempty set");
    let mut tau_regions = max_regions; // fallback: flag only when everything fires
    for tau in 1..=max_regions {
        let false_rate =
            flag_counts.iter().filter(|&&c| c >= tau).count() as f64 / n as f64;
        if false_rate <= target_fpr {
            tau_regions = tau;
            break;
        }
    }
    let mut cfg = base.clone();
    cfg.tau_cons = tau_cons;
    cfg.tau_regions = tau_regions;
    cfg.calibration_hash = Some(hex_string(&hasher.finalize()));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{sample_condition, toy_for_masks};
    use crate::imagecore::{synth_fixture, FixtureSpec};

    fn fixture(seed: u64) -> (Image, MaskTensor, Condition) {
        let (x, mut masks) = synth_fixture(&FixtureSpec {
            seed,
            size: 32,
            n_regions: 5,
        })
        .unwrap();
        let cond = sample_condition(seed, masks.n);
        masks.target_index = cond.attribute_index;
        (x, masks, cond)
    }

    #[test]
    fn identical_pair_gives_zero_profiles() {
        let (x, masks, _) = fixture(3);
        let features = FeatureExtractor::new(DEFAULT_FEATURE_SEED);
        let dbars = region_distances(&features, &x, &x, &masks).unwrap();
        for d in &dbars {
            assert!(d.max_component() < 1e-9);
        }
    }

    #[test]
    fn zero_profiles_give_baseline_score() {
        let n_regions = 5;
        let dbars = vec![DistanceVector::zero(); n_regions];
        let (flags, s_dist) = distortion_flags(&dbars, 0, &default_weights()).unwrap();
        // ties count as flags and sigmoid(0) = 0.5 per region
        assert!(flags[0] == 0);
        assert_eq!(flags.iter().filter(|&&f| f == 1).count(), n_regions - 1);
        assert!((s_dist - (n_regions - 1) as f64 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_battery_has_zero_spread() {
        let (x, masks, cond) = fixture(4);
        let gen = toy_for_masks(&masks);
        let features = FeatureExtractor::new(DEFAULT_FEATURE_SEED);
        let specs = vec![TransformSpec::identity(); 3];
        let s = consistency_score(&features, &x, &cond, &gen, &specs, &default_weights())
            .unwrap();
        assert!(s < 1e-12, "identity-only battery spread {s}");
    }

    #[test]
    fn or_rule_fires_on_region_count_alone() {
        let (x, masks, cond) = fixture(5);
        let gen = toy_for_masks(&masks);
        let cfg = DetectorConfig {
            tau_regions: 1,
            tau_cons: f64::INFINITY,
            ..DetectorConfig::default()
        };
        // clean input: benchmark region should dominate, so no flags fire
        let report = decide(&x, &cond, &masks, &gen, &cfg).unwrap();
        assert_eq!(
            report.verdict,
            if report.n_flagged >= 1 {
                Verdict::Disrupted
            } else {
                Verdict::Clean
            }
        );
        assert!((report.s_final - (cfg.lambda * report.s_dist + report.s_cons)).abs() < 1e-12);
    }
}
