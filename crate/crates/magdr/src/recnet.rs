//! Greedy per-region reconstruction.
//!
//! Pre-training picks one best parameter per transform category on a
//! disrupted training set. At defense time each region independently walks
//! up to L_rec layers: score the pruned representatives on the region's
//! current patch, shortlist the top three categories, search their full
//! grids, and keep the winner. Identity sits in every candidate set, so a
//! region's combined score can never increase; two consecutive identity
//! picks end that region's search early.
//!
//! Candidate scoring always evaluates the whole recomposed image because the
//! score needs a generator pass, and masked recomposition keeps regions
//! independent: a candidate patch is blended into the original input, never
//! into another region's work in progress.

use serde::{Deserialize, Serialize};

use crate::detector::{
    decide, decide_with, DetectionReport, DetectorConfig, DetectorError, Verdict,
};
use crate::generator::{Condition, GeneratorContract};
use crate::imagecore::{Image, MaskTensor};
use crate::metrics::FeatureExtractor;
use crate::transforms::{
    apply, catalog_with, CatalogOverride, Category, LayerCatalog, TransformError,
    TransformSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum RecnetError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("layer catalog is empty")]
    EmptyCatalog,
    #[error("need pruned layers for {need} layers, catalog has {have}")]
    MissingLayers { need: usize, have: usize },
    #[error("pipeline has {pipeline} regions, mask tensor has {masks}")]
    RegionMismatch { pipeline: usize, masks: usize },
    #[error("layer count must be at least 1")]
    NoLayers,
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("recnet catalog file {path}: {reason}")]
    CatalogFile { path: String, reason: String },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// Identity-gate threshold: improvements below this are treated as sampling
/// noise and the layer keeps its hands off the region.
pub const MIN_GAIN: f64 = 1e-4;
/// Tie window as a fraction of the best improvement: anything capturing at
/// least half the best gain competes, and the mildest competitor wins.
pub const TIE_KEEP: f64 = 0.5;
pub const DEFAULT_L_REC: usize = 3;
pub const DEFAULT_MAX_ROUNDS: usize = 2;
pub const SHORTLIST: usize = 3;

/// One best parameter per category, the product of pre-training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrunedLayer {
    pub layer_index: usize,
    pub specs: Vec<TransformSpec>,
}

/// The pretrained artifact consumed at defense time: pruned layers plus the
/// grid override they were trained under, so full-grid search stays
/// consistent with training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecnetCatalog {
    pub layers: Vec<PrunedLayer>,
    #[serde(default)]
    pub grids: CatalogOverride,
}

impl RecnetCatalog {
    pub fn full_layer(&self, layer_index: usize) -> LayerCatalog {
        catalog_with(layer_index, &self.grids)
    }
}

pub fn save_recnet_catalog(
    path: &std::path::Path,
    cat: &RecnetCatalog,
) -> Result<(), RecnetError> {
    let text = serde_json::to_string_pretty(cat).map_err(|e| RecnetError::CatalogFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| RecnetError::CatalogFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_recnet_catalog(path: &std::path::Path) -> Result<RecnetCatalog, RecnetError> {
    let text = std::fs::read_to_string(path).map_err(|e| RecnetError::CatalogFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| RecnetError::CatalogFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Per-region transform chains plus the score trail that selected them. The
/// trail starts at the unreconstructed score and appends one entry per
/// layer, so it is non-increasing by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecPipeline {
    pub per_region: Vec<Vec<TransformSpec>>,
    pub provenance: Vec<Vec<f64>>,
}

/// Everything needed to score a candidate reconstruction, fixed for the
/// duration of one pipeline construction.
pub struct ScoreContext<'a> {
    pub gen: &'a dyn GeneratorContract,
    pub cond: &'a Condition,
    pub masks: &'a MaskTensor,
    pub cfg: &'a DetectorConfig,
    features: FeatureExtractor,
}

impl<'a> ScoreContext<'a> {
    pub fn new(
        gen: &'a dyn GeneratorContract,
        cond: &'a Condition,
        masks: &'a MaskTensor,
        cfg: &'a DetectorConfig,
    ) -> Self {
        let features = FeatureExtractor::new(cfg.feature_seed);
        ScoreContext {
            gen,
            cond,
            masks,
            cfg,
            features,
        }
    }

    pub fn s_final(&self, img: &Image) -> Result<f64, RecnetError> {
        let report = decide_with(&self.features, img, self.cond, self.masks, self.gen, self.cfg)?;
        Ok(report.s_final)
    }
}

/// Blends a candidate patch into the base through one region's soft mask.
fn recompose(base: &Image, patch: &Image, masks: &MaskTensor, region: usize) -> Image {
    let mut out = base.clone();
    for y in 0..base.h {
        for x in 0..base.w {
            let w = masks.weight(region, y, x);
            if w == 0.0 {
                continue;
            }
            for ch in 0..base.c {
                let idx = (y * base.w + x) * base.c + ch;
                out.data[idx] =
                    (base.data[idx] + w * (patch.data[idx] - base.data[idx])).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Picks, per category, the grid parameter with the lowest mean combined
/// score over the training set when applied to the full image. Near-ties
/// resolve toward the mildest parameter.
pub fn pretrain_layer(
    train_set: &[(Image, Condition, MaskTensor)],
    layer: &LayerCatalog,
    gen: &dyn GeneratorContract,
    cfg: &DetectorConfig,
) -> Result<PrunedLayer, RecnetError> {
    let gens: Vec<&dyn GeneratorContract> = train_set.iter().map(|_| gen).collect();
    pretrain_layer_multi(train_set, &gens, layer, cfg)
}

/// Pre-training where each sample brings its own generator backend.
pub fn pretrain_layer_multi(
    train_set: &[(Image, Condition, MaskTensor)],
    gens: &[&dyn GeneratorContract],
    layer: &LayerCatalog,
    cfg: &DetectorConfig,
) -> Result<PrunedLayer, RecnetError> {
    if train_set.is_empty() {
        return Err(RecnetError::EmptyTrainSet);
    }
    if layer.specs.is_empty() {
        return Err(RecnetError::EmptyCatalog);
    }
    assert_eq!(train_set.len(), gens.len(), "one generator per sample");
    let features = FeatureExtractor::new(cfg.feature_seed);
    let mut specs = Vec::new();
    for cat in layer.categories() {
        let grid = layer.specs_in(cat);
        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(grid.len());
        for (j, spec) in grid.iter().enumerate() {
            let mut total = 0.0;
            for ((x, cond, masks), gen) in train_set.iter().zip(gens.iter()) {
                let xt = apply(spec, x)?;
                let report = decide_with(&features, &xt, cond, masks, *gen, cfg)?;
                total += report.s_final;
            }
            scored.push((total / train_set.len() as f64, j));
        }
        let best = scored
            .iter()
            .map(|&(s, _)| s)
            .fold(f64::INFINITY, f64::min);
        let tau = 1e-4 * best.abs().max(1.0);
        let winner = scored
            .iter()
            .filter(|&&(s, _)| s <= best + tau)
            .map(|&(_, j)| j)
            .min()
            .expect("nonempty grid");
        specs.push(grid[winner]);
    }
    Ok(PrunedLayer {
        layer_index: layer.layer_index,
        specs,
    })
}

struct Candidate {
    score: f64,
    cat_index: usize,
    param_index: usize,
    spec: TransformSpec,
}

fn eval_candidate(
    spec: &TransformSpec,
    param_index: usize,
    x_hat: &Image,
    cur_patch: &Image,
    cur_score: f64,
    region: usize,
    ctx: &ScoreContext,
) -> Result<Candidate, RecnetError> {
    if spec.category == Category::Identity {
        return Ok(Candidate {
            score: cur_score,
            cat_index: Category::Identity.index(),
            param_index: 0,
            spec: TransformSpec::identity(),
        });
    }
    let patch2 = apply(spec, cur_patch)?;
    let recomposed = recompose(x_hat, &patch2, ctx.masks, region);
    Ok(Candidate {
        score: ctx.s_final(&recomposed)?,
        cat_index: spec.category.index(),
        param_index,
        spec: *spec,
    })
}

/// Tie-aware argmin: if the best candidate does not beat the identity gate,
/// identity wins; otherwise every candidate within the tie window competes
/// and the mildest one (category order, then parameter order) is returned.
fn select_tie(cands: &[Candidate], cur_score: f64) -> (TransformSpec, f64) {
    let best = cands
        .iter()
        .map(|c| c.score)
        .fold(f64::INFINITY, f64::min);
    let gain = cur_score - best;
    if gain < MIN_GAIN {
        return (TransformSpec::identity(), cur_score);
    }
    let winner = cands
        .iter()
        .filter(|c| cur_score - c.score >= TIE_KEEP * gain)
        .min_by_key(|c| (c.cat_index, c.param_index))
        .expect("group contains the best candidate");
    (winner.spec, winner.score)
}

/// One layer of selection for one region: stage 1 scores the pruned
/// representatives, stage 2 searches the full grids of the three best
/// categories. Returns the winning spec with the score it achieves.
pub fn select_for_patch(
    x_hat: &Image,
    cur_patch: &Image,
    cur_score: f64,
    region: usize,
    pruned: &PrunedLayer,
    full: &LayerCatalog,
    ctx: &ScoreContext,
) -> Result<(TransformSpec, f64), RecnetError> {
    if pruned.specs.is_empty() {
        return Err(RecnetError::EmptyCatalog);
    }
    let mut reps = Vec::with_capacity(pruned.specs.len());
    for spec in &pruned.specs {
        let grid = spec.category.grid();
        let pi = grid
            .iter()
            .position(|&p| p == spec.param)
            .unwrap_or(0);
        reps.push(eval_candidate(
            spec, pi, x_hat, cur_patch, cur_score, region, ctx,
        )?);
    }
    let mut order: Vec<usize> = (0..reps.len()).collect();
    order.sort_by(|&a, &b| {
        reps[a]
            .score
            .partial_cmp(&reps[b].score)
            .expect("finite scores")
            .then(reps[a].cat_index.cmp(&reps[b].cat_index))
    });
    let shortlist: Vec<Category> = order
        .iter()
        .take(SHORTLIST)
        .map(|&i| reps[i].spec.category)
        .collect();
    let mut full_cands = Vec::new();
    for cat in &shortlist {
        for (pi, spec) in full.specs_in(*cat).iter().enumerate() {
            let reused = reps
                .iter()
                .find(|c| c.spec.category == spec.category && c.spec.param == spec.param);
            match reused {
                Some(c) => full_cands.push(Candidate {
                    score: c.score,
                    cat_index: c.cat_index,
                    param_index: c.param_index,
                    spec: c.spec,
                }),
                None => full_cands.push(eval_candidate(
                    spec, pi, x_hat, cur_patch, cur_score, region, ctx,
                )?),
            }
        }
    }
    if !full_cands
        .iter()
        .any(|c| c.spec.category == Category::Identity)
    {
        full_cands.push(Candidate {
            score: cur_score,
            cat_index: Category::Identity.index(),
            param_index: 0,
            spec: TransformSpec::identity(),
        });
    }
    Ok(select_tie(&full_cands, cur_score))
}

/// Builds each region's transform chain independently, walking layers until
/// the budget runs out or identity wins twice in a row.
pub fn build_pipeline(
    x_hat: &Image,
    ctx: &ScoreContext,
    recnet: &RecnetCatalog,
    l_rec: usize,
) -> Result<RecPipeline, RecnetError> {
    if l_rec < 1 {
        return Err(RecnetError::NoLayers);
    }
    if recnet.layers.len() < l_rec {
        return Err(RecnetError::MissingLayers {
            need: l_rec,
            have: recnet.layers.len(),
        });
    }
    let s0 = ctx.s_final(x_hat)?;
    let n = ctx.masks.n;
    let mut per_region = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for region in 0..n {
        let mut pipe: Vec<TransformSpec> = Vec::new();
        let mut scores = vec![s0];
        let mut cur_patch = x_hat.clone();
        let mut cur_score = s0;
        let mut ident_run = 0usize;
        for layer in 0..l_rec {
            if ident_run >= 1 {
                // identity left the state untouched, so re-scoring would
                // only repeat itself; append and stop after the second
                if pipe.len() < l_rec {
                    pipe.push(TransformSpec::identity());
                    scores.push(cur_score);
                }
                ident_run += 1;
                if ident_run >= 2 {
                    break;
                }
                continue;
            }
            let full = recnet.full_layer(recnet.layers[layer].layer_index);
            let (spec, sc) = select_for_patch(
                x_hat,
                &cur_patch,
                cur_score,
                region,
                &recnet.layers[layer],
                &full,
                ctx,
            )?;
            pipe.push(spec);
            if spec.category == Category::Identity {
                ident_run = 1;
                scores.push(cur_score);
            } else {
                ident_run = 0;
                cur_patch = apply(&spec, &cur_patch)?;
                cur_score = sc;
                scores.push(sc);
            }
        }
        per_region.push(pipe);
        provenance.push(scores);
    }
    Ok(RecPipeline {
        per_region,
        provenance,
    })
}

/// Applies each region's chain to the input and blends the results through
/// the soft masks.
pub fn reconstruct(
    x_hat: &Image,
    pipeline: &RecPipeline,
    masks: &MaskTensor,
) -> Result<Image, RecnetError> {
    if pipeline.per_region.len() != masks.n {
        return Err(RecnetError::RegionMismatch {
            pipeline: pipeline.per_region.len(),
            masks: masks.n,
        });
    }
    let mut out = Image::zeros(x_hat.h, x_hat.w, x_hat.c);
    for (region, pipe) in pipeline.per_region.iter().enumerate() {
        let mut patch = x_hat.clone();
        for spec in pipe {
            patch = apply(spec, &patch)?;
        }
        for y in 0..x_hat.h {
            for x in 0..x_hat.w {
                let w = masks.weight(region, y, x);
                if w == 0.0 {
                    continue;
                }
                for ch in 0..x_hat.c {
                    let idx = (y * x_hat.w + x) * x_hat.c + ch;
                    out.data[idx] += w * patch.data[idx];
                }
            }
        }
    }
    Ok(out.clamp01())
}

/// The detect, reconstruct, re-detect loop. Returns as soon as a round's
/// verdict is clean; otherwise reconstructs and tries again, and after
/// max_rounds hands back the last reconstruction with its honest final
/// verdict.
#[allow(clippy::too_many_arguments)]
pub fn defend(
    x_hat: &Image,
    cond: &Condition,
    masks: &MaskTensor,
    gen: &dyn GeneratorContract,
    cfg: &DetectorConfig,
    recnet: &RecnetCatalog,
    l_rec: usize,
    max_rounds: usize,
) -> Result<(Image, Vec<DetectionReport>), RecnetError> {
    if max_rounds < 1 {
        return Err(RecnetError::NoRounds);
    }
    let mut cur = x_hat.clone();
    let mut trail = Vec::new();
    for _ in 0..max_rounds {
        let report = decide(&cur, cond, masks, gen, cfg)?;
        let clean = report.verdict == Verdict::Clean;
        trail.push(report);
        if clean {
            return Ok((cur, trail));
        }
        let ctx = ScoreContext::new(gen, cond, masks, cfg);
        let pipeline = build_pipeline(&cur, &ctx, recnet, l_rec)?;
        cur = reconstruct(&cur, &pipeline, masks)?;
    }
    let final_report = decide(&cur, cond, masks, gen, cfg)?;
    trail.push(final_report);
    Ok((cur, trail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{sample_condition, toy_for_masks};
    use crate::imagecore::{synth_fixture, FixtureSpec};
    use crate::transforms::catalog;

    fn fixture(seed: u64) -> (Image, MaskTensor, Condition) {
        let (x, mut masks) = synth_fixture(&FixtureSpec {
            seed,
            size: 32,
            n_regions: 4,
        })
        .unwrap();
        let cond = sample_condition(seed, masks.n);
        masks.target_index = cond.attribute_index;
        (x, masks, cond)
    }

    #[test]
    fn all_identity_pipeline_reproduces_input() {
        let (x, masks, _) = fixture(11);
        let pipeline = RecPipeline {
            per_region: vec![vec![TransformSpec::identity()]; masks.n],
            provenance: vec![vec![0.0]; masks.n],
        };
        let y = reconstruct(&x, &pipeline, &masks).unwrap();
        for (a, b) in x.data.iter().zip(y.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn catalog_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("recnet.json");
        let pruned = PrunedLayer {
            layer_index: 0,
            specs: catalog(0).specs.iter().take(8).copied().collect(),
        };
        let cat = RecnetCatalog {
            layers: vec![pruned.clone(), pruned.clone(), pruned],
            grids: Default::default(),
        };
        save_recnet_catalog(&path, &cat).unwrap();
        let back = load_recnet_catalog(&path).unwrap();
        assert_eq!(back.layers.len(), 3);
        assert_eq!(back.layers[0].specs.len(), 8);
    }

    #[test]
    fn provenance_never_increases() {
        let (x, masks, cond) = fixture(12);
        let gen = toy_for_masks(&masks);
        let cfg = DetectorConfig::default();
        // mild corruption: quantize harshly so there is something to repair
        let xh = crate::transforms::bit_depth(&x, 3);
        let ctx = ScoreContext::new(&gen, &cond, &masks, &cfg);
        let layer = catalog(0);
        let pruned = pretrain_layer(
            &[(xh.clone(), cond.clone(), masks.clone())],
            &layer,
            &gen,
            &cfg,
        )
        .unwrap();
        let recnet = RecnetCatalog {
            layers: vec![pruned.clone(), pruned.clone(), pruned],
            grids: Default::default(),
        };
        let pipeline = build_pipeline(&xh, &ctx, &recnet, 3).unwrap();
        for trail in &pipeline.provenance {
            for pair in trail.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-12,
                    "score increased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }
}
