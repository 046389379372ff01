//! The catalog of parametrized image operators used by the consistency
//! detector battery, the reconstructor's layer grids, and the adaptive
//! attack's defense ensemble.
//!
//! Quantizing operators (DCT codec, bit depth) have no useful gradient, so
//! their adaptive-attack surrogates are straight-through; the linear
//! smoothers expose exact adjoints; the median filter borrows the mean
//! filter's adjoint as a smooth stand-in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imagecore::{
    resize_bilinear, sep_norm_conv, sep_norm_conv_adjoint, Image,
};

#[derive(Debug, thiserror::Error)]
pub enum TransformError {
    #[error("parameter {param} invalid for {category}: {reason}")]
    BadParam {
        category: &'static str,
        param: f64,
        reason: String,
    },
    #[error("parameter {param} is not in the declared {category} grid")]
    OffGrid { category: &'static str, param: f64 },
    #[error("kernel size {k} exceeds image {h}x{w}")]
    KernelTooLarge { k: usize, h: usize, w: usize },
    #[error("catalog file {path}: {reason}")]
    Catalog { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Identity,
    DctQuant,
    GaussBlur,
    Median,
    BitDepth,
    GaussNoise,
    ResizeCycle,
    MeanSmooth,
}

/// Declared category order; greedy tie-breaking prefers lower indices, so
/// this ordering is part of the reconstruction semantics.
pub const CATEGORIES: [Category; 8] = [
    Category::Identity,
    Category::DctQuant,
    Category::GaussBlur,
    Category::Median,
    Category::BitDepth,
    Category::GaussNoise,
    Category::ResizeCycle,
    Category::MeanSmooth,
];

impl Category {
    pub fn name(&self) -> &'static str {
        match self {
            Category::Identity => "identity",
            Category::DctQuant => "dct_quant",
            Category::GaussBlur => "gauss_blur",
            Category::Median => "median",
            Category::BitDepth => "bit_depth",
            Category::GaussNoise => "gauss_noise",
            Category::ResizeCycle => "resize_cycle",
            Category::MeanSmooth => "mean_smooth",
        }
    }

    /// Declared parameter grid, ordered mildest to strongest. Tie-breaking
    /// toward lower grid indices therefore means "prefer the gentler
    /// transform".
    pub fn grid(&self) -> &'static [f64] {
        match self {
            Category::Identity => &[0.0],
            Category::DctQuant => &[90.0, 70.0, 50.0, 30.0],
            Category::GaussBlur => &[0.5, 1.0, 1.5, 2.0],
            Category::Median => &[3.0, 5.0],
            Category::BitDepth => &[6.0, 5.0, 4.0, 3.0],
            Category::GaussNoise => &[0.01, 0.02, 0.04],
            Category::ResizeCycle => &[0.75, 0.5],
            Category::MeanSmooth => &[3.0, 5.0],
        }
    }

    pub fn index(&self) -> usize {
        CATEGORIES.iter().position(|c| c == self).expect("listed")
    }
}

pub const DEFAULT_NOISE_SEED: u64 = 4242;

/// One parametrized operator instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub category: Category,
    pub param: f64,
    /// Only gauss_noise draws randomness; the seed makes it reproducible.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    DEFAULT_NOISE_SEED
}

impl TransformSpec {
    /// Validates grid membership; catalogs only ever hold on-grid specs.
    pub fn new(category: Category, param: f64) -> Result<Self, TransformError> {
        if !category.grid().contains(&param) {
            return Err(TransformError::OffGrid {
                category: category.name(),
                param,
            });
        }
        Ok(TransformSpec {
            category,
            param,
            seed: DEFAULT_NOISE_SEED,
        })
    }

    pub fn identity() -> Self {
        TransformSpec {
            category: Category::Identity,
            param: 0.0,
            seed: DEFAULT_NOISE_SEED,
        }
    }

    pub fn label(&self) -> String {
        match self.category {
            Category::Identity => "identity".to_string(),
            _ => format!("{}_{}", self.category.name(), self.param),
        }
    }
}

/// The full grid available to one reconstruction layer.
#[derive(Debug, Clone)]
pub struct LayerCatalog {
    pub layer_index: usize,
    pub specs: Vec<TransformSpec>,
}

impl LayerCatalog {
    pub fn categories(&self) -> Vec<Category> {
        let mut seen = Vec::new();
        for s in &self.specs {
            if !seen.contains(&s.category) {
                seen.push(s.category);
            }
        }
        seen
    }

    pub fn specs_in(&self, cat: Category) -> Vec<TransformSpec> {
        self.specs
            .iter()
            .copied()
            .filter(|s| s.category == cat)
            .collect()
    }
}

/// Grid override: category name to replacement parameter list. Loaded from a
/// JSON catalog file; omitted categories keep their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CatalogOverride {
    #[serde(default)]
    pub grids: std::collections::BTreeMap<String, Vec<f64>>,
}

/// The declared operator grid for a layer; identical for every layer unless
/// an override says otherwise.
pub fn catalog(layer_index: usize) -> LayerCatalog {
    catalog_with(layer_index, &CatalogOverride::default())
}

pub fn catalog_with(layer_index: usize, over: &CatalogOverride) -> LayerCatalog {
    let mut specs = Vec::new();
    for cat in CATEGORIES {
        let grid: Vec<f64> = match over.grids.get(cat.name()) {
            Some(g) => g.clone(),
            None => cat.grid().to_vec(),
        };
        for p in grid {
            specs.push(TransformSpec {
                category: cat,
                param: p,
                seed: DEFAULT_NOISE_SEED,
            });
        }
    }
    LayerCatalog { layer_index, specs }
}

pub fn load_catalog_override(path: &std::path::Path) -> Result<CatalogOverride, TransformError> {
    let text = std::fs::read_to_string(path).map_err(|e| TransformError::Catalog {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| TransformError::Catalog {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// operators
// ---------------------------------------------------------------------------

fn gauss_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

pub fn gauss_blur(x: &Image, sigma: f64) -> Image {
    sep_norm_conv(x, &gauss_kernel(sigma)).clamp01()
}

pub fn mean_smooth(x: &Image, k: usize) -> Image {
    sep_norm_conv(x, &vec![1.0; k]).clamp01()
}

pub fn median_filter(x: &Image, k: usize) -> Image {
    let r = (k / 2) as isize;
    let (h, w, c) = (x.h, x.w, x.c);
    let mut out = Image::zeros(h, w, c);
    let mut window = Vec::with_capacity(k * k);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                window.clear();
                for dy in -r..=r {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        window.push(x.data[(sy * w + sx) * c + ch]);
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
                out.data[(y * w + xx) * c + ch] = window[window.len() / 2];
            }
        }
    }
    out
}

pub fn bit_depth(x: &Image, bits: u32) -> Image {
    let levels = (2u64.pow(bits) - 1) as f64;
    x.map(|v| (v * levels).round_ties_even() / levels)
}

pub fn gauss_noise(x: &Image, sigma_n: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, sigma_n).expect("nonnegative sigma");
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    out
}

pub fn resize_cycle(x: &Image, scale: f64) -> Image {
    let h2 = ((x.h as f64 * scale).round_ties_even() as usize).max(1);
    let w2 = ((x.w as f64 * scale).round_ties_even() as usize).max(1);
    let down = resize_bilinear(x, h2, w2);
    resize_bilinear(&down, x.h, x.w).clamp01()
}

/// Standard luminance quantization table.
const QTBL: [[f64; 8]; 8] = [
    [16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0],
    [12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0],
    [14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0],
    [14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0],
    [18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0],
    [24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0],
    [49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0],
    [72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0],
];

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (k, row) in c.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let norm = if k == 0 { 1.0f64 / 8.0 } else { 2.0 / 8.0 };
            *v = norm.sqrt()
                * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / 16.0).cos();
        }
    }
    c
}

/// Blockwise 8x8 DCT quantization codec ("JPEG-like": the quantization
/// distortion without entropy coding). Edge-pads to a multiple of 8,
/// quantizes each block's spectrum with the quality-scaled table, inverts,
/// and crops.
pub fn dct_quant(x: &Image, quality: f64) -> Result<Image, TransformError> {
    if !(1.0..=100.0).contains(&quality) {
        return Err(TransformError::BadParam {
            category: "dct_quant",
            param: quality,
            reason: "quality must be in [1,100]".into(),
        });
    }
    let scale = if quality < 50.0 {
        5000.0 / quality
    } else {
        200.0 - 2.0 * quality
    };
    let mut tbl = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            tbl[i][j] = ((QTBL[i][j] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
        }
    }
    let c = dct_matrix();
    let (h, w, nc) = (x.h, x.w, x.c);
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    // edge-padded copy on the centered 255 scale
    let mut padded = vec![0.0; ph * pw * nc];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for xx in 0..pw {
            let sx = xx.min(w - 1);
            for ch in 0..nc {
                padded[(y * pw + xx) * nc + ch] = x.data[(sy * w + sx) * nc + ch] * 255.0 - 128.0;
            }
        }
    }
    let mut out = Image::zeros(h, w, nc);
    let mut blk = [[0.0; 8]; 8];
    let mut f = [[0.0; 8]; 8];
    for ch in 0..nc {
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                for i in 0..8 {
                    for j in 0..8 {
                        blk[i][j] = padded[((by + i) * pw + bx + j) * nc + ch];
                    }
                }
                // F = C blk C^T, quantize, back
                for i in 0..8 {
                    for j in 0..8 {
                        let mut s = 0.0;
                        for a in 0..8 {
                            for b in 0..8 {
                                s += c[i][a] * blk[a][b] * c[j][b];
                            }
                        }
                        f[i][j] = (s / tbl[i][j]).round_ties_even() * tbl[i][j];
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        if by + i >= h || bx + j >= w {
                            continue;
                        }
                        let mut s = 0.0;
                        for a in 0..8 {
                            for b in 0..8 {
                                s += c[a][i] * f[a][b] * c[b][j];
                            }
                        }
                        out.data[((by + i) * w + bx + j) * nc + ch] =
                            (((s + 128.0) / 255.0) as f64).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_kernel(k: usize, x: &Image) -> Result<(), TransformError> {
    if k > x.h || k > x.w {
        return Err(TransformError::KernelTooLarge {
            k,
            h: x.h,
            w: x.w,
        });
    }
    Ok(())
}

/// Applies one operator. Identity returns the input bit-exactly; everything
/// else lands back in [0,1].
pub fn apply(spec: &TransformSpec, x: &Image) -> Result<Image, TransformError> {
    match spec.category {
        Category::Identity => Ok(x.clone()),
        Category::DctQuant => dct_quant(x, spec.param),
        Category::GaussBlur => {
            if spec.param <= 0.0 {
                return Err(TransformError::BadParam {
                    category: "gauss_blur",
                    param: spec.param,
                    reason: "sigma must be positive".into(),
                });
            }
            let k = gauss_kernel(spec.param).len();
            check_kernel(k, x)?;
            Ok(gauss_blur(x, spec.param))
        }
        Category::Median => {
            let k = spec.param as usize;
            if k % 2 == 0 || k < 3 {
                return Err(TransformError::BadParam {
                    category: "median",
                    param: spec.param,
                    reason: "kernel must be odd and at least 3".into(),
                });
            }
            check_kernel(k, x)?;
            Ok(median_filter(x, k))
        }
        Category::BitDepth => {
            let bits = spec.param as u32;
            if !(1..=16).contains(&bits) {
                return Err(TransformError::BadParam {
                    category: "bit_depth",
                    param: spec.param,
                    reason: "bits must be in [1,16]".into(),
                });
            }
            Ok(bit_depth(x, bits))
        }
        Category::GaussNoise => {
            if spec.param < 0.0 {
                return Err(TransformError::BadParam {
                    category: "gauss_noise",
                    param: spec.param,
                    reason: "sigma must be nonnegative".into(),
                });
            }
            Ok(gauss_noise(x, spec.param, spec.seed))
        }
        Category::ResizeCycle => {
            if !(0.0..=1.0).contains(&spec.param) || spec.param == 0.0 {
                return Err(TransformError::BadParam {
                    category: "resize_cycle",
                    param: spec.param,
                    reason: "scale must be in (0,1]".into(),
                });
            }
            Ok(resize_cycle(x, spec.param))
        }
        Category::MeanSmooth => {
            let k = spec.param as usize;
            if k % 2 == 0 || k < 3 {
                return Err(TransformError::BadParam {
                    category: "mean_smooth",
                    param: spec.param,
                    reason: "kernel must be odd and at least 3".into(),
                });
            }
            check_kernel(k, x)?;
            Ok(mean_smooth(x, k))
        }
    }
}

/// Adjoint of the bilinear resampling `resize_bilinear(img, th, tw)` as a map
/// from (fh, fw) to (th, tw): scatters the cotangent back with the same
/// interpolation weights.
fn resize_bilinear_adjoint(u: &Image, fh: usize, fw: usize) -> Image {
    let (th, tw, c) = (u.h, u.w, u.c);
    let mut out = Image::zeros(fh, fw, c);
    for y in 0..th {
        let sy = (y as f64 + 0.5) * fh as f64 / th as f64 - 0.5;
        let y0 = (sy.floor().max(0.0) as usize).min(fh - 1);
        let y1 = (y0 + 1).min(fh - 1);
        let wy = (sy - y0 as f64).clamp(0.0, 1.0);
        for x in 0..tw {
            let sx = (x as f64 + 0.5) * fw as f64 / tw as f64 - 0.5;
            let x0 = (sx.floor().max(0.0) as usize).min(fw - 1);
            let x1 = (x0 + 1).min(fw - 1);
            let wx = (sx - x0 as f64).clamp(0.0, 1.0);
            for ch in 0..c {
                let uv = u.data[(y * tw + x) * c + ch];
                out.data[(y0 * fw + x0) * c + ch] += uv * (1.0 - wy) * (1.0 - wx);
                out.data[(y1 * fw + x0) * c + ch] += uv * wy * (1.0 - wx);
                out.data[(y0 * fw + x1) * c + ch] += uv * (1.0 - wy) * wx;
                out.data[(y1 * fw + x1) * c + ch] += uv * wy * wx;
            }
        }
    }
    out
}

/// Pullback through a differentiable surrogate of the operator, used by the
/// adaptive attack. Linear smoothers get exact adjoints; the quantizers and
/// the noise injection are treated as identity (straight-through); median is
/// approximated by the mean filter of the same size.
pub fn smooth_vjp(spec: &TransformSpec, x: &Image, u: &Image) -> Result<Image, TransformError> {
    let _ = x; // surrogates here are linear, so the basepoint drops out
    match spec.category {
        Category::Identity
        | Category::DctQuant
        | Category::BitDepth
        | Category::GaussNoise => Ok(u.clone()),
        Category::GaussBlur => Ok(sep_norm_conv_adjoint(u, &gauss_kernel(spec.param))),
        Category::Median | Category::MeanSmooth => {
            let k = spec.param as usize;
            Ok(sep_norm_conv_adjoint(u, &vec![1.0; k]))
        }
        Category::ResizeCycle => {
            let h2 = ((u.h as f64 * spec.param).round_ties_even() as usize).max(1);
            let w2 = ((u.w as f64 * spec.param).round_ties_even() as usize).max(1);
            // forward is up(down(x)); adjoint runs the transposes in reverse
            let ut = resize_bilinear_adjoint(u, h2, w2);
            Ok(resize_bilinear_adjoint(&ut, u.h, u.w))
        }
    }
}

/// The consistency detector's battery: one mild spec per category, in the
/// declared category order.
pub fn consistency_battery() -> Vec<TransformSpec> {
    CATEGORIES
        .iter()
        .map(|&cat| TransformSpec {
            category: cat,
            param: cat.grid()[0],
            seed: DEFAULT_NOISE_SEED,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{synth_fixture, FixtureSpec};

    fn test_image(seed: u64) -> Image {
        synth_fixture(&FixtureSpec {
            seed,
            size: 32,
            n_regions: 5,
        })
        .unwrap()
        .0
    }

    #[test]
    fn identity_is_bit_exact() {
        let x = test_image(1);
        let y = apply(&TransformSpec::identity(), &x).unwrap();
        assert_eq!(x.data, y.data);
    }

    #[test]
    fn blur_preserves_constants() {
        let x = Image::from_fn(16, 16, 3, |_, _, _| 0.42);
        let spec = TransformSpec::new(Category::GaussBlur, 1.0).unwrap();
        let y = apply(&spec, &x).unwrap();
        for &v in y.data.iter() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn one_bit_quantizer_snaps_to_extremes() {
        let x = Image::from_fn(8, 8, 3, |_, _, _| 0.6);
        let y = bit_depth(&x, 1);
        assert!(y.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn near_lossless_at_max_quality() {
        let x = test_image(2);
        let y = dct_quant(&x, 100.0).unwrap();
        let m = crate::metrics::mse(&x, &y).unwrap();
        assert!(m < 1e-4, "q=100 round-trip mse {m}");
    }

    #[test]
    fn off_grid_params_are_rejected() {
        assert!(TransformSpec::new(Category::DctQuant, 42.0).is_err());
        assert!(TransformSpec::new(Category::GaussBlur, 1.0).is_ok());
    }

    #[test]
    fn catalog_counts_match_declared_grids() {
        let cat = catalog(0);
        assert_eq!(cat.specs.len(), 22);
        assert_eq!(cat.categories().len(), 8);
    }
}
