//! Experiment drivers: seeded dataset management, detection and
//! reconstruction evaluations, the adaptive-attack curve, and the report
//! formats they emit.
//!
//! Every report embeds the config hash, the seed ranges in force, and the
//! crate version. Per-sample work is dispatched to a worker pool, but each
//! sample's randomness is derived from its own seed and results are reduced
//! in index order, so worker count never changes output bytes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::attacks::{run_attack, AttackConfig, AttackError, AttackMethod};
use crate::detector::{calibrate_multi, decide, DetectorConfig, DetectorError};
use crate::generator::{sample_condition, toy_for_masks, Condition, GeneratorContract, GeneratorError};
use crate::imagecore::{
    load_image, load_mask_manifest, save_image, save_mask_manifest, synth_fixture, FixtureSpec,
    Image, ImageError, MaskTensor,
};
use crate::metrics::{feat_sim, mse, psnr, ssim, FeatureExtractor, MetricError};
use crate::recnet::{
    defend, pretrain_layer_multi, PrunedLayer, RecnetCatalog, RecnetError,
};
use crate::transforms::{apply, catalog_with, Category, TransformError, TransformSpec};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset needs at least {need} samples, got {got}")]
    DatasetTooSmall { need: usize, got: usize },
    #[error("calibration seeds [{cal_start}, {cal_end}) overlap dataset seeds [{data_start}, {data_end})")]
    SeedOverlap {
        cal_start: u64,
        cal_end: u64,
        data_start: u64,
        data_end: u64,
    },
    #[error("iteration list invalid: {0}")]
    BadIterations(String),
    #[error("attack failed on fixture seed {seed}: {source}")]
    AttackFailed { seed: u64, source: AttackError },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Recnet(#[from] RecnetError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("serialization: {0}")]
    Serde(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSection {
    pub base_seed: u64,
    pub size: usize,
    pub n_regions: usize,
    pub count: usize,
}

impl Default for FixtureSection {
    fn default() -> Self {
        FixtureSection {
            base_seed: 1000,
            size: 64,
            n_regions: 5,
            count: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RecnetSection {
    pub l_rec: usize,
    pub max_rounds: usize,
    pub train_count: usize,
    pub train_seed: u64,
}

impl Default for RecnetSection {
    fn default() -> Self {
        RecnetSection {
            l_rec: 3,
            max_rounds: 2,
            train_count: 8,
            train_seed: 5000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub calibration_seed: u64,
    pub calibration_count: usize,
    pub target_fpr: f64,
    pub bench_seed: u64,
    pub bench_count: usize,
    /// Uniform single-transform defense rows for the reconstruction table.
    pub baselines: Vec<TransformSpec>,
    /// Worker pool size; 0 means one worker per core.
    pub workers: usize,
    /// Optional dataset manifest path; when absent, fixtures are generated
    /// in memory from the [fixtures] section.
    pub dataset_manifest: Option<String>,
}

pub fn default_baselines() -> Vec<TransformSpec> {
    vec![
        TransformSpec::new(Category::DctQuant, 70.0).expect("on grid"),
        TransformSpec::new(Category::GaussBlur, 1.0).expect("on grid"),
        TransformSpec::new(Category::GaussNoise, 0.02).expect("on grid"),
        TransformSpec::new(Category::BitDepth, 5.0).expect("on grid"),
    ]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            calibration_seed: 2000,
            calibration_count: 100,
            target_fpr: 0.05,
            bench_seed: 6000,
            bench_count: 50,
            baselines: default_baselines(),
            workers: 0,
            dataset_manifest: None,
        }
    }
}

/// The complete experiment description. The default value is the standard
/// seeded benchmark every report references.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub fixtures: FixtureSection,
    pub attack: AttackConfig,
    pub detector: DetectorConfig,
    pub recnet: RecnetSection,
    pub eval: EvalSection,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            fixtures: FixtureSection::default(),
            attack: standard_benchmark_attack(),
            detector: DetectorConfig::default(),
            recnet: RecnetSection::default(),
            eval: EvalSection::default(),
            out_dir: "out".to_string(),
        }
    }
}

/// The attack the standard benchmark runs: the optimization attack at full
/// legal step size, strong enough that every benchmark sample is detected
/// yet structured enough for region-wise repair to matter.
pub fn standard_benchmark_attack() -> AttackConfig {
    AttackConfig {
        eps: 0.05,
        alpha: Some(0.05),
        iterations: 60,
        method: AttackMethod::Cw,
        seed: 100,
        ..AttackConfig::default()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let text = toml::to_string_pretty(self).map_err(|e| HarnessError::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.fixtures.count < 1 {
            return Err(HarnessError::Config("fixtures.count must be >= 1".into()));
        }
        if self.fixtures.n_regions < 2 {
            return Err(HarnessError::Config("fixtures.n_regions must be >= 2".into()));
        }
        self.attack
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.detector
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.recnet.l_rec < 1 {
            return Err(HarnessError::Config("recnet.l_rec must be >= 1".into()));
        }
        if self.recnet.max_rounds < 1 {
            return Err(HarnessError::Config("recnet.max_rounds must be >= 1".into()));
        }
        if !(self.eval.target_fpr > 0.0 && self.eval.target_fpr < 0.5) {
            return Err(HarnessError::Config(
                "eval.target_fpr must be in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }

    /// Sha-256 over the canonical serialized form; embedded in every report.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        crate::detector::hex_string(&Sha256::digest(text.as_bytes()))
    }
}

/// Provenance header carried by every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMeta {
    pub version: String,
    pub config_hash: String,
    pub dataset_seed: u64,
    pub calibration_seed: u64,
    pub attack_seed: u64,
}

impl ReportMeta {
    pub fn new(cfg: &ExperimentConfig, dataset_seed: u64) -> Self {
        ReportMeta {
            version: crate::VERSION.to_string(),
            config_hash: cfg.hash(),
            dataset_seed,
            calibration_seed: cfg.eval.calibration_seed,
            attack_seed: cfg.attack.seed,
        }
    }

    pub fn csv_comment(&self) -> String {
        format!(
            "# version={} config_hash={} dataset_seed={} calibration_seed={} attack_seed={}",
            self.version,
            self.config_hash,
            self.dataset_seed,
            self.calibration_seed,
            self.attack_seed
        )
    }
}

// ---------------------------------------------------------------------------
// fixtures and datasets
// ---------------------------------------------------------------------------

/// One evaluation unit: a fixture, its soft region masks with the edit
/// target set, and the sampled editing condition.
#[derive(Debug, Clone)]
pub struct Sample {
    pub seed: u64,
    pub x: Image,
    pub masks: MaskTensor,
    pub cond: Condition,
}

pub fn make_sample(seed: u64, size: usize, n_regions: usize) -> Result<Sample, HarnessError> {
    let (x, mut masks) = synth_fixture(&FixtureSpec {
        seed,
        size,
        n_regions,
    })?;
    let cond = sample_condition(seed, masks.n);
    masks.target_index = cond.attribute_index;
    Ok(Sample {
        seed,
        x,
        masks,
        cond,
    })
}

pub fn materialize_range(
    base_seed: u64,
    count: usize,
    size: usize,
    n_regions: usize,
    workers: usize,
) -> Result<Vec<Sample>, HarnessError> {
    with_pool(workers, || {
        (0..count)
            .into_par_iter()
            .map(|i| make_sample(base_seed + i as u64, size, n_regions))
            .collect()
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub image: String,
    pub mask_manifest: String,
    pub condition: String,
}

/// Dataset description: entries can be reloaded from the listed files, and
/// because every entry records its seed they can equally be regenerated
/// bit-exactly in memory, which the evaluation drivers do to avoid the 8-bit
/// quantization a PNG round trip would add.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub size: usize,
    pub n_regions: usize,
    pub base_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub fn gen_dataset(
    n: usize,
    base: &FixtureSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, HarnessError> {
    if n < 1 {
        return Err(HarnessError::Config("dataset size must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base.seed + i as u64;
        let sample = make_sample(seed, base.size, base.n_regions)?;
        let stem = format!("fix_{seed:06}");
        let image_name = format!("{stem}.png");
        save_image(&sample.x, &out_dir.join(&image_name))?;
        let mask_manifest = save_mask_manifest(&sample.masks, out_dir, &stem)?;
        let cond_name = format!("{stem}_cond.json");
        let cond_text = serde_json::to_string_pretty(&sample.cond)
            .map_err(|e| HarnessError::Serde(e.to_string()))?;
        std::fs::write(out_dir.join(&cond_name), cond_text)
            .map_err(io_err(&out_dir.join(&cond_name)))?;
        entries.push(ManifestEntry {
            seed,
            image: image_name,
            mask_manifest: mask_manifest
                .file_name()
                .expect("named file")
                .to_string_lossy()
                .into_owned(),
            condition: cond_name,
        });
    }
    let manifest = DatasetManifest {
        version: crate::VERSION.to_string(),
        size: base.size,
        n_regions: base.n_regions,
        base_seed: base.seed,
        entries,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| HarnessError::Serde(e.to_string()))?;
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Serde(e.to_string()))
}

/// Loads a dataset back from its files (with PNG quantization) — the
/// interchange path for externally produced data.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Sample>, HarnessError> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let x = load_image(&dir.join(&entry.image))?;
        let masks = load_mask_manifest(&dir.join(&entry.mask_manifest))?;
        let text = std::fs::read_to_string(dir.join(&entry.condition))
            .map_err(io_err(&dir.join(&entry.condition)))?;
        let cond: Condition =
            serde_json::from_str(&text).map_err(|e| HarnessError::Serde(e.to_string()))?;
        samples.push(Sample {
            seed: entry.seed,
            x,
            masks,
            cond,
        });
    }
    Ok(samples)
}

/// Regenerates a dataset in memory from the manifest's seeds, bit-exact with
/// what gen_dataset synthesized before writing.
pub fn materialize_manifest(
    manifest: &DatasetManifest,
    workers: usize,
) -> Result<Vec<Sample>, HarnessError> {
    with_pool(workers, || {
        manifest
            .entries
            .par_iter()
            .map(|e| make_sample(e.seed, manifest.size, manifest.n_regions))
            .collect()
    })
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("worker pool")
        .install(f)
}

fn dataset_samples(cfg: &ExperimentConfig) -> Result<Vec<Sample>, HarnessError> {
    match &cfg.eval.dataset_manifest {
        Some(path) => {
            let manifest = load_manifest(Path::new(path))?;
            materialize_manifest(&manifest, cfg.eval.workers)
        }
        None => materialize_range(
            cfg.fixtures.base_seed,
            cfg.fixtures.count,
            cfg.fixtures.size,
            cfg.fixtures.n_regions,
            cfg.eval.workers,
        ),
    }
}

fn calibration_samples(cfg: &ExperimentConfig) -> Result<Vec<Sample>, HarnessError> {
    materialize_range(
        cfg.eval.calibration_seed,
        cfg.eval.calibration_count,
        cfg.fixtures.size,
        cfg.fixtures.n_regions,
        cfg.eval.workers,
    )
}

fn assert_disjoint_seeds(cfg: &ExperimentConfig, dataset: &[Sample]) -> Result<(), HarnessError> {
    let cal_start = cfg.eval.calibration_seed;
    let cal_end = cal_start + cfg.eval.calibration_count as u64;
    for s in dataset {
        if s.seed >= cal_start && s.seed < cal_end {
            return Err(HarnessError::SeedOverlap {
                cal_start,
                cal_end,
                data_start: dataset.first().map(|s| s.seed).unwrap_or(0),
                data_end: dataset.last().map(|s| s.seed + 1).unwrap_or(0),
            });
        }
    }
    Ok(())
}

/// Fits detector thresholds on the config's clean calibration range, with a
/// toy generator bound to each calibration sample's masks.
pub fn calibrate_detector(cfg: &ExperimentConfig) -> Result<DetectorConfig, HarnessError> {
    let cal = calibration_samples(cfg)?;
    let triples: Vec<(Image, Condition, MaskTensor)> = cal
        .into_iter()
        .map(|s| (s.x, s.cond, s.masks))
        .collect();
    let gens: Vec<_> = triples.iter().map(|(_, _, m)| toy_for_masks(m)).collect();
    let refs: Vec<&dyn crate::generator::GeneratorContract> =
        gens.iter().map(|g| g as _).collect();
    Ok(calibrate_multi(
        &triples,
        &refs,
        cfg.eval.target_fpr,
        &cfg.detector,
    )?)
}

// ---------------------------------------------------------------------------
// detection evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRow {
    pub attack_method: String,
    pub variant: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionTable {
    pub meta: ReportMeta,
    pub tau_cons: f64,
    pub tau_regions: usize,
    pub rows: Vec<DetectionRow>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    (precision, recall, f1_score(precision, recall))
}

/// Per-sample verdict triple: distortion-only, consistency-only, combined.
#[derive(Debug, Clone, Copy)]
struct VerdictTriple {
    dd: bool,
    cd: bool,
    combined: bool,
}

fn verdicts_for(
    sample: &Sample,
    img: &Image,
    det_cfg: &DetectorConfig,
) -> Result<VerdictTriple, HarnessError> {
    let gen = toy_for_masks(&sample.masks);
    let report = decide(img, &sample.cond, &sample.masks, &gen, det_cfg)?;
    let dd = report.n_flagged >= det_cfg.tau_regions;
    let cd = report.s_cons > det_cfg.tau_cons;
    Ok(VerdictTriple {
        dd,
        cd,
        combined: dd || cd,
    })
}

fn rows_from_counts(
    attack_method: &str,
    // (clean triples, attacked triples)
    clean: &[VerdictTriple],
    attacked: &[VerdictTriple],
) -> Vec<DetectionRow> {
    let variants: [(&str, fn(&VerdictTriple) -> bool); 3] = [
        ("dd", |v| v.dd),
        ("cd", |v| v.cd),
        ("combined", |v| v.combined),
    ];
    variants
        .iter()
        .map(|(name, pick)| {
            let tp = attacked.iter().filter(|v| pick(v)).count();
            let fn_ = attacked.len() - tp;
            let fp = clean.iter().filter(|v| pick(v)).count();
            let tn = clean.len() - fp;
            let (precision, recall, f1) = prf(tp, fp, fn_);
            DetectionRow {
                attack_method: attack_method.to_string(),
                variant: name.to_string(),
                tp,
                fp,
                fn_,
                tn,
                precision,
                recall,
                f1,
            }
        })
        .collect()
}

/// Balanced detection benchmark: every dataset sample contributes one clean
/// and one attacked instance; positives are "disrupted".
pub fn evaluate_detection(
    cfg: &ExperimentConfig,
) -> Result<(DetectionTable, DetectorConfig), HarnessError> {
    let dataset = dataset_samples(cfg)?;
    if dataset.len() < 2 {
        return Err(HarnessError::DatasetTooSmall {
            need: 2,
            got: dataset.len(),
        });
    }
    assert_disjoint_seeds(cfg, &dataset)?;
    let det_cfg = calibrate_detector(cfg)?;
    let attack_cfg = &cfg.attack;
    let pairs: Vec<(VerdictTriple, VerdictTriple)> = with_pool(cfg.eval.workers, || {
        dataset
            .par_iter()
            .map(|sample| -> Result<(VerdictTriple, VerdictTriple), HarnessError> {
                let gen = toy_for_masks(&sample.masks);
                let mut cfg_s = attack_cfg.clone();
                cfg_s.seed = attack_cfg.seed.wrapping_add(sample.seed);
                let res = run_attack(&sample.x, &sample.cond, &gen, &cfg_s, None)
                    .map_err(|source| HarnessError::AttackFailed {
                        seed: sample.seed,
                        source,
                    })?;
                let clean_v = verdicts_for(sample, &sample.x, &det_cfg)?;
                let attacked_v = verdicts_for(sample, &res.x_hat, &det_cfg)?;
                Ok((clean_v, attacked_v))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let clean: Vec<VerdictTriple> = pairs.iter().map(|p| p.0).collect();
    let attacked: Vec<VerdictTriple> = pairs.iter().map(|p| p.1).collect();
    let method = match attack_cfg.method {
        AttackMethod::Pgd => "pgd",
        AttackMethod::Cw => "cw",
        AttackMethod::Adaptive => "adaptive",
    };
    let rows = rows_from_counts(method, &clean, &attacked);
    let table = DetectionTable {
        meta: ReportMeta::new(cfg, cfg.fixtures.base_seed),
        tau_cons: det_cfg.tau_cons,
        tau_regions: det_cfg.tau_regions,
        rows,
    };
    Ok((table, det_cfg))
}

impl DetectionTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.meta.csv_comment());
        out.push('\n');
        out.push_str("attack_method,variant,precision,recall,f1\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                row.attack_method, row.variant, row.precision, row.recall, row.f1
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// reconstruction evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub variant: String,
    pub mse_i: f64,
    pub ssim_i: f64,
    pub psnr_i: f64,
    pub featsim_i: f64,
    pub mse_o: f64,
    pub ssim_o: f64,
    pub psnr_o: f64,
    pub featsim_o: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionTable {
    pub meta: ReportMeta,
    pub detected: usize,
    pub total: usize,
    pub rows: Vec<ReconstructionRow>,
}

impl ReconstructionTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.meta.csv_comment());
        out.push('\n');
        out.push_str(
            "variant,mse_i,ssim_i,psnr_i,featsim_i,mse_o,ssim_o,psnr_o,featsim_o\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.8},{:.6},{:.4},{:.6},{:.8},{:.6},{:.4},{:.6}\n",
                row.variant,
                row.mse_i,
                row.ssim_i,
                row.psnr_i,
                row.featsim_i,
                row.mse_o,
                row.ssim_o,
                row.psnr_o,
                row.featsim_o
            ));
        }
        out
    }

    pub fn row(&self, variant: &str) -> Option<&ReconstructionRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Pretrains the per-layer category parameters on an attacked training set
/// drawn from the config's training seed range.
pub fn pretrain_recnet(cfg: &ExperimentConfig) -> Result<RecnetCatalog, HarnessError> {
    let train_clean = materialize_range(
        cfg.recnet.train_seed,
        cfg.recnet.train_count,
        cfg.fixtures.size,
        cfg.fixtures.n_regions,
        cfg.eval.workers,
    )?;
    let train: Vec<(Image, Condition, MaskTensor)> = with_pool(cfg.eval.workers, || {
        train_clean
            .par_iter()
            .map(|sample| -> Result<(Image, Condition, MaskTensor), HarnessError> {
                let gen = toy_for_masks(&sample.masks);
                let mut cfg_s = cfg.attack.clone();
                cfg_s.seed = cfg.attack.seed.wrapping_add(sample.seed);
                let res = run_attack(&sample.x, &sample.cond, &gen, &cfg_s, None)
                    .map_err(|source| HarnessError::AttackFailed {
                        seed: sample.seed,
                        source,
                    })?;
                Ok((res.x_hat, sample.cond.clone(), sample.masks.clone()))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let gens: Vec<_> = train.iter().map(|(_, _, m)| toy_for_masks(m)).collect();
    let refs: Vec<&dyn crate::generator::GeneratorContract> =
        gens.iter().map(|g| g as _).collect();
    let mut layers: Vec<PrunedLayer> = Vec::with_capacity(cfg.recnet.l_rec);
    for i in 0..cfg.recnet.l_rec {
        let layer = catalog_with(i, &Default::default());
        layers.push(pretrain_layer_multi(&train, &refs, &layer, &cfg.detector)?);
    }
    Ok(RecnetCatalog {
        layers,
        grids: Default::default(),
    })
}

struct SampleMetrics {
    detected: bool,
    // one row of metric tuples per variant, in variant order
    metrics: Vec<[f64; 8]>,
}

/// Runs the full defense on every attacked benchmark sample and compares it
/// against no defense and the uniform single-transform baselines. Input-pair
/// metrics compare x against each defended input; output-pair metrics
/// compare the clean edit against the edit of the defended input.
pub fn evaluate_reconstruction(
    cfg: &ExperimentConfig,
    recnet_cat: &RecnetCatalog,
    det_cfg: &DetectorConfig,
) -> Result<ReconstructionTable, HarnessError> {
    let bench = materialize_range(
        cfg.eval.bench_seed,
        cfg.eval.bench_count,
        cfg.fixtures.size,
        cfg.fixtures.n_regions,
        cfg.eval.workers,
    )?;
    let mut variants: Vec<String> = vec!["none".into(), "magdr".into()];
    for spec in &cfg.eval.baselines {
        variants.push(spec.label());
    }
    let features = FeatureExtractor::new(det_cfg.feature_seed);
    let per_sample: Vec<SampleMetrics> = with_pool(cfg.eval.workers, || {
        bench
            .par_iter()
            .map(|sample| -> Result<SampleMetrics, HarnessError> {
                let gen = toy_for_masks(&sample.masks);
                let mut atk = cfg.attack.clone();
                atk.seed = cfg.attack.seed.wrapping_add(sample.seed);
                let res = run_attack(&sample.x, &sample.cond, &gen, &atk, None).map_err(
                    |source| HarnessError::AttackFailed {
                        seed: sample.seed,
                        source,
                    },
                )?;
                let x_hat = res.x_hat;
                let y_clean = gen.forward(&sample.x, &sample.cond)?;
                let (defended, trail) = defend(
                    &x_hat,
                    &sample.cond,
                    &sample.masks,
                    &gen,
                    det_cfg,
                    recnet_cat,
                    cfg.recnet.l_rec,
                    cfg.recnet.max_rounds,
                )?;
                let detected = trail
                    .first()
                    .map(|r| r.verdict == crate::detector::Verdict::Disrupted)
                    .unwrap_or(false);
                let mut images: Vec<Image> = vec![x_hat.clone(), defended];
                for spec in &cfg.eval.baselines {
                    images.push(apply(spec, &x_hat)?);
                }
                let mut metrics = Vec::with_capacity(images.len());
                for img in &images {
                    let y_def = gen.forward(img, &sample.cond)?;
                    metrics.push([
                        mse(&sample.x, img)?,
                        ssim(&sample.x, img)?,
                        psnr(&sample.x, img)?,
                        feat_sim(&sample.x, img, &features)?,
                        mse(&y_clean, &y_def)?,
                        ssim(&y_clean, &y_def)?,
                        psnr(&y_clean, &y_def)?,
                        feat_sim(&y_clean, &y_def, &features)?,
                    ]);
                }
                Ok(SampleMetrics { detected, metrics })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let detected = per_sample.iter().filter(|s| s.detected).count();
    let n = per_sample.len() as f64;
    let rows: Vec<ReconstructionRow> = variants
        .iter()
        .enumerate()
        .map(|(vi, name)| {
            let mut acc = [0.0f64; 8];
            for s in &per_sample {
                for (a, v) in acc.iter_mut().zip(s.metrics[vi].iter()) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= n;
            }
            ReconstructionRow {
                variant: name.clone(),
                mse_i: acc[0],
                ssim_i: acc[1],
                psnr_i: acc[2],
                featsim_i: acc[3],
                mse_o: acc[4],
                ssim_o: acc[5],
                psnr_o: acc[6],
                featsim_o: acc[7],
            }
        })
        .collect();
    Ok(ReconstructionTable {
        meta: ReportMeta::new(cfg, cfg.eval.bench_seed),
        detected,
        total: per_sample.len(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// adaptive curve
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveCurveRow {
    pub iters: usize,
    pub f1_dd: f64,
    pub f1_cd: f64,
    pub f1_combined: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveCurve {
    pub meta: ReportMeta,
    pub rows: Vec<AdaptiveCurveRow>,
}

impl AdaptiveCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.meta.csv_comment());
        out.push('\n');
        out.push_str("iters,f1_dd,f1_cd,f1_combined\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                row.iters, row.f1_dd, row.f1_cd, row.f1_combined
            ));
        }
        out
    }
}

/// F1 of each detector variant as the defense-aware attack gets more
/// iterations, on a balanced clean/attacked set.
pub fn adaptive_curve(
    cfg: &ExperimentConfig,
    iterations: &[usize],
) -> Result<AdaptiveCurve, HarnessError> {
    if iterations.is_empty() {
        return Err(HarnessError::BadIterations("empty list".into()));
    }
    if iterations.iter().any(|&i| i == 0) {
        return Err(HarnessError::BadIterations(
            "0-iteration attack produces no positives; remove 0 from the list".into(),
        ));
    }
    if iterations.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::BadIterations(
            "iteration counts must be strictly ascending".into(),
        ));
    }
    let dataset = dataset_samples(cfg)?;
    if dataset.len() < 2 {
        return Err(HarnessError::DatasetTooSmall {
            need: 2,
            got: dataset.len(),
        });
    }
    assert_disjoint_seeds(cfg, &dataset)?;
    let det_cfg = calibrate_detector(cfg)?;
    let clean: Vec<VerdictTriple> = with_pool(cfg.eval.workers, || {
        dataset
            .par_iter()
            .map(|s| verdicts_for(s, &s.x, &det_cfg))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut rows = Vec::with_capacity(iterations.len());
    for &iters in iterations {
        let attacked: Vec<VerdictTriple> = with_pool(cfg.eval.workers, || {
            dataset
                .par_iter()
                .map(|sample| -> Result<VerdictTriple, HarnessError> {
                    let gen = toy_for_masks(&sample.masks);
                    let mut atk = cfg.attack.clone();
                    atk.method = AttackMethod::Adaptive;
                    atk.iterations = iters;
                    atk.seed = cfg.attack.seed.wrapping_add(sample.seed);
                    let res = run_attack(&sample.x, &sample.cond, &gen, &atk, None)
                        .map_err(|source| HarnessError::AttackFailed {
                            seed: sample.seed,
                            source,
                        })?;
                    verdicts_for(sample, &res.x_hat, &det_cfg)
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let table_rows = rows_from_counts("adaptive", &clean, &attacked);
        rows.push(AdaptiveCurveRow {
            iters,
            f1_dd: table_rows[0].f1,
            f1_cd: table_rows[1].f1,
            f1_combined: table_rows[2].f1,
        });
    }
    Ok(AdaptiveCurve {
        meta: ReportMeta::new(cfg, cfg.fixtures.base_seed),
        rows,
    })
}

// ---------------------------------------------------------------------------
// report output
// ---------------------------------------------------------------------------

pub fn write_report(
    out_dir: &Path,
    stem: &str,
    csv: &str,
    json_value: &impl Serialize,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    let json_path = out_dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(json_value)
        .map_err(|e| HarnessError::Serde(e.to_string()))?;
    std::fs::write(&json_path, text).map_err(io_err(&json_path))?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_identity_holds() {
        let (p, r, f1) = prf(96, 4, 0);
        assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        assert!((p - 0.96).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        assert!((f1 - 0.98).abs() < 0.0005);
    }

    #[test]
    fn config_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = ExperimentConfig::default();
        other.fixtures.count = 7;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        let cfg = ExperimentConfig::default();
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn zero_iteration_curve_is_rejected() {
        let cfg = ExperimentConfig::default();
        let err = adaptive_curve(&cfg, &[0]).unwrap_err();
        assert!(matches!(err, HarnessError::BadIterations(_)));
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_dataset(
            2,
            &FixtureSpec {
                seed: 42,
                size: 16,
                n_regions: 3,
            },
            dir.path(),
        )
        .unwrap();
        assert_eq!(manifest.entries.len(), 2);
        let loaded = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.len(), 2);
        // in-memory regeneration must match the pre-quantization original
        let regen = materialize_manifest(&manifest, 1).unwrap();
        let direct = make_sample(42, 16, 3).unwrap();
        assert_eq!(regen[0].x.data, direct.x.data);
    }
}
