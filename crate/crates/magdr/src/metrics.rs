//! Distance estimation: pixel metrics (MSE, PSNR, SSIM), a fixed seeded
//! random feature pyramid, and the named DistanceVector that packages all of
//! them as dissimilarities (larger = more different).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imagecore::Image;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image {h}x{w} smaller than the {win}x{win} SSIM window")]
    TooSmall { h: usize, w: usize, win: usize },
}

pub const SSIM_WINDOW: usize = 8;
pub const PSNR_CAP_DB: f64 = 99.0;
/// Feature channel widths per pyramid layer.
pub const FEATURE_CHANNELS: [usize; 4] = [8, 16, 32, 64];
/// Layer whose flattened activations feed the cosine distance (the L-1
/// convention: second-to-last of the four layers).
pub const COSINE_LAYER: usize = 2;
pub const DEFAULT_FEATURE_SEED: u64 = 17;

/// Number of DistanceVector components: mse, 1-ssim, psnr deficit, four
/// per-layer feature L1 means, cosine distance.
pub const N_COMPONENTS: usize = 8;
pub const COMPONENT_NAMES: [&str; N_COMPONENTS] = [
    "mse",
    "one_minus_ssim",
    "psnr_deficit",
    "feat_l1_1",
    "feat_l1_2",
    "feat_l1_3",
    "feat_l1_4",
    "cosine_distance",
];

/// Named multi-metric dissimilarity between two images.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistanceVector(pub [f64; N_COMPONENTS]);

impl DistanceVector {
    pub fn zero() -> Self {
        DistanceVector([0.0; N_COMPONENTS])
    }

    pub fn max_component(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        for v in out.0.iter_mut() {
            *v *= s;
        }
        out
    }
}

fn check_dims(a: &Image, b: &Image) -> Result<(), MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.h, a.w, a.c, b.h, b.w, b.c
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let n = a.data.len() as f64;
    let s: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(s / n)
}

/// PSNR in dB for peak 1.0, capped at 99 dB for vanishing MSE.
pub fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-10 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Mean local SSIM over all 8x8 sliding windows, uniform window weighting,
/// C1 = 0.01^2 and C2 = 0.03^2 on the [0,1] scale, averaged across channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let win = SSIM_WINDOW;
    if a.h < win || a.w < win {
        return Err(MetricError::TooSmall {
            h: a.h,
            w: a.w,
            win,
        });
    }
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (h, w, c) = (a.h, a.w, a.c);
    let nh = h - win + 1;
    let nw = w - win + 1;
    let nwin = (win * win) as f64;
    // integral images over each needed product, one channel at a time
    let mut acc = 0.0;
    let plane = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        // (h+1)x(w+1) summed-area table of the per-pixel values
        let mut sat = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = f(y * w + x);
                sat[(y + 1) * (w + 1) + (x + 1)] =
                    v + sat[y * (w + 1) + (x + 1)] + sat[(y + 1) * (w + 1) + x]
                        - sat[y * (w + 1) + x];
            }
        }
        sat
    };
    for ch in 0..c {
        let av = |i: usize| a.data[i * c + ch];
        let bv = |i: usize| b.data[i * c + ch];
        let sat_a = plane(&av);
        let sat_b = plane(&bv);
        let sat_aa = plane(&|i| av(i) * av(i));
        let sat_bb = plane(&|i| bv(i) * bv(i));
        let sat_ab = plane(&|i| av(i) * bv(i));
        let winsum = |sat: &[f64], y: usize, x: usize| {
            sat[(y + win) * (w + 1) + (x + win)] - sat[y * (w + 1) + (x + win)]
                - sat[(y + win) * (w + 1) + x]
                + sat[y * (w + 1) + x]
        };
        let mut ch_sum = 0.0;
        for y in 0..nh {
            for x in 0..nw {
                let sa = winsum(&sat_a, y, x) / nwin;
                let sb = winsum(&sat_b, y, x) / nwin;
                let saa = winsum(&sat_aa, y, x) / nwin;
                let sbb = winsum(&sat_bb, y, x) / nwin;
                let sab = winsum(&sat_ab, y, x) / nwin;
                let va = saa - sa * sa;
                let vb = sbb - sb * sb;
                let cab = sab - sa * sb;
                let s = ((2.0 * sa * sb + C1) * (2.0 * cab + C2))
                    / ((sa * sa + sb * sb + C1) * (va + vb + C2));
                ch_sum += s;
            }
        }
        acc += ch_sum / (nh * nw) as f64;
    }
    Ok(acc / c as f64)
}

/// One layer's activations: channel-major (c, h, w) in f32.
#[derive(Debug, Clone)]
pub struct FeatureLayer {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

/// The four-layer random feature pyramid for one image.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<FeatureLayer>,
    pub seed: u64,
}

/// Fixed Gaussian-seeded 3x3 convolution kernels. Each (out,in) kernel is
/// centered to zero spatial mean (so constant inputs produce zero response)
/// and scaled by 1/sqrt(9*c_in). Built once and shared; extraction is pure.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub seed: u64,
    /// kernels[l] has shape (c_out, c_in, 3, 3) flattened.
    kernels: Vec<Vec<f32>>,
    widths: Vec<(usize, usize)>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut kernels = Vec::new();
        let mut widths = Vec::new();
        let mut cin = 3usize;
        for &cout in FEATURE_CHANNELS.iter() {
            let mut k = vec![0.0f32; cout * cin * 9];
            for v in k.iter_mut() {
                *v = normal.sample(&mut rng) as f32;
            }
            let norm = 1.0f32 / ((9 * cin) as f32).sqrt();
            for pair in 0..cout * cin {
                let s: f32 = k[pair * 9..pair * 9 + 9].iter().sum();
                let mean = s / 9.0;
                for v in k[pair * 9..pair * 9 + 9].iter_mut() {
                    *v = (*v - mean) * norm;
                }
            }
            kernels.push(k);
            widths.push((cin, cout));
            cin = cout;
        }
        FeatureExtractor {
            seed,
            kernels,
            widths,
        }
    }

    pub fn stack(&self, img: &Image) -> FeatureStack {
        // input as (c, h, w) f32
        let mut cur = FeatureLayer {
            c: img.c,
            h: img.h,
            w: img.w,
            data: {
                let mut d = vec![0.0f32; img.c * img.h * img.w];
                for y in 0..img.h {
                    for x in 0..img.w {
                        for ch in 0..img.c {
                            d[(ch * img.h + y) * img.w + x] =
                                img.data[(y * img.w + x) * img.c + ch] as f32;
                        }
                    }
                }
                d
            },
        };
        let mut layers = Vec::with_capacity(self.kernels.len());
        for (k, &(cin, cout)) in self.kernels.iter().zip(self.widths.iter()) {
            debug_assert_eq!(cur.c, cin);
            let (h, w) = (cur.h, cur.w);
            // 3x3 zero-pad conv + relu
            let mut conv = vec![0.0f32; cout * h * w];
            for co in 0..cout {
                for ci in 0..cin {
                    let kbase = (co * cin + ci) * 9;
                    let src = &cur.data[(ci * h) * w..(ci * h + h) * w];
                    let dst = &mut conv[(co * h) * w..(co * h + h) * w];
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let kv = k[kbase + dy * 3 + dx];
                            if kv == 0.0 {
                                continue;
                            }
                            let oy = dy as isize - 1;
                            let ox = dx as isize - 1;
                            let y_lo = (-oy).max(0) as usize;
                            let y_hi = (h as isize - oy.max(0)) as usize;
                            for y in y_lo..y_hi {
                                let sy = (y as isize + oy) as usize;
                                let x_lo = (-ox).max(0) as usize;
                                let x_hi = (w as isize - ox.max(0)) as usize;
                                let srow = &src[sy * w..sy * w + w];
                                let drow = &mut dst[y * w..y * w + w];
                                for x in x_lo..x_hi {
                                    drow[x] += kv * srow[(x as isize + ox) as usize];
                                }
                            }
                        }
                    }
                }
            }
            for v in conv.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            // 2x average pool, truncating odd trailing rows/cols
            let h2 = h / 2;
            let w2 = w / 2;
            let mut pooled = vec![0.0f32; cout * h2 * w2];
            for co in 0..cout {
                for y in 0..h2 {
                    for x in 0..w2 {
                        let base = co * h * w;
                        let s = conv[base + (2 * y) * w + 2 * x]
                            + conv[base + (2 * y) * w + 2 * x + 1]
                            + conv[base + (2 * y + 1) * w + 2 * x]
                            + conv[base + (2 * y + 1) * w + 2 * x + 1];
                        pooled[(co * h2 + y) * w2 + x] = s * 0.25;
                    }
                }
            }
            cur = FeatureLayer {
                c: cout,
                h: h2,
                w: w2,
                data: pooled,
            };
            layers.push(cur.clone());
        }
        FeatureStack {
            layers,
            seed: self.seed,
        }
    }
}

/// Convenience wrapper that builds the extractor on the fly; hot paths
/// should hold a FeatureExtractor and call `stack` directly.
pub fn feature_stack(img: &Image, seed: u64) -> FeatureStack {
    FeatureExtractor::new(seed).stack(img)
}

fn mean_abs_diff(a: &FeatureLayer, b: &FeatureLayer) -> f64 {
    let s: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (x - y).abs() as f64)
        .sum();
    s / a.data.len() as f64
}

fn cosine_distance(a: &FeatureLayer, b: &FeatureLayer) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < 1e-12 && nb < 1e-12 {
        0.0
    } else if na < 1e-12 || nb < 1e-12 {
        1.0
    } else {
        (1.0 - dot / (na * nb)).max(0.0)
    }
}

/// Full DistanceVector, optionally reusing precomputed feature stacks (the
/// consistency detector shares one side across its whole battery).
pub fn distance_vector_cached(
    a: &Image,
    b: &Image,
    feat: &FeatureExtractor,
    stack_a: Option<&FeatureStack>,
    stack_b: Option<&FeatureStack>,
) -> Result<DistanceVector, MetricError> {
    check_dims(a, b)?;
    let m = mse(a, b)?;
    let s = ssim(a, b)?;
    let mut comps = [0.0; N_COMPONENTS];
    comps[0] = m;
    comps[1] = (1.0 - s).max(0.0);
    comps[2] = (PSNR_CAP_DB - psnr_from_mse(m)) / PSNR_CAP_DB;
    let owned_a;
    let fa = match stack_a {
        Some(s) => s,
        None => {
            owned_a = feat.stack(a);
            &owned_a
        }
    };
    let owned_b;
    let fb = match stack_b {
        Some(s) => s,
        None => {
            owned_b = feat.stack(b);
            &owned_b
        }
    };
    for l in 0..4 {
        comps[3 + l] = mean_abs_diff(&fa.layers[l], &fb.layers[l]);
    }
    comps[7] = cosine_distance(&fa.layers[COSINE_LAYER], &fb.layers[COSINE_LAYER]);
    Ok(DistanceVector(comps))
}

pub fn distance_vector(
    a: &Image,
    b: &Image,
    feat: &FeatureExtractor,
) -> Result<DistanceVector, MetricError> {
    distance_vector_cached(a, b, feat, None, None)
}

/// Feature similarity for reconstruction tables: 1 - cosine_distance, so 1.0
/// means feature-identical.
pub fn feat_sim(a: &Image, b: &Image, feat: &FeatureExtractor) -> Result<f64, MetricError> {
    let d = distance_vector(a, b, feat)?;
    Ok(1.0 - d.0[7])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{synth_fixture, FixtureSpec};

    #[test]
    fn identical_images_have_zero_distance() {
        let (img, _) = synth_fixture(&FixtureSpec {
            seed: 3,
            size: 32,
            n_regions: 5,
        })
        .unwrap();
        let feat = FeatureExtractor::new(DEFAULT_FEATURE_SEED);
        let d = distance_vector(&img, &img, &feat).unwrap();
        for (name, v) in COMPONENT_NAMES.iter().zip(d.0.iter()) {
            assert!(v.abs() < 1e-9, "{name} = {v}");
        }
    }

    #[test]
    fn psnr_known_values() {
        assert_eq!(psnr_from_mse(0.0), 99.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(1.0) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn feature_shapes_halve_per_layer() {
        let (img, _) = synth_fixture(&FixtureSpec {
            seed: 4,
            size: 64,
            n_regions: 5,
        })
        .unwrap();
        let stack = feature_stack(&img, DEFAULT_FEATURE_SEED);
        let mut expect = (64usize, 64usize);
        for (l, layer) in stack.layers.iter().enumerate() {
            expect = (expect.0 / 2, expect.1 / 2);
            assert_eq!((layer.h, layer.w), expect);
            assert_eq!(layer.c, FEATURE_CHANNELS[l]);
        }
    }
}
