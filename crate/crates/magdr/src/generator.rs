//! The deepfake-model contract G(x, c) with gradient access, plus the
//! built-in differentiable toy generator used for desk-scale experiments.
//!
//! The toy model pushes pixels through a high-gain sigmoid tone curve and a
//! detail channel that amplifies local high-frequency structure, then applies
//! the conditioned color edit (hue rotation, contrast, brightness) inside the
//! soft target region. The high gain gives it a large local Lipschitz
//! constant near mid-gray, so small adversarial perturbations visibly corrupt
//! the output; the detail channel additionally hallucinates a checker pattern
//! on unnaturally flat areas, which punishes over-smoothed reconstructions.

use std::path::PathBuf;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imagecore::{
    binom_smooth, conv3_same, load_image, save_image, sep_norm_conv_adjoint, Image, MaskTensor,
};

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("condition targets region {index} but masks have {n}")]
    BadCondition { index: usize, n: usize },
    #[error("generator '{0}' does not expose gradients (vjp unavailable)")]
    NoGradient(String),
    #[error("external generator failed: {0}")]
    External(String),
    #[error(transparent)]
    Image(#[from] crate::imagecore::ImageError),
}

/// The edit request: which region to modify and how.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Condition {
    pub attribute_index: usize,
    pub hue_degrees: f64,
    pub brightness: f64,
    pub contrast: f64,
}

/// Draws an edit condition for a fixture: target region uniform over the
/// non-background regions, hue +/-30..70 degrees, brightness +/-0.14..0.20,
/// contrast 1.10..1.30. Uses its own stream so fixture pixels and conditions
/// stay independently reproducible.
pub fn sample_condition(seed: u64, n_regions: usize) -> Condition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6e64);
    let attribute_index = 1 + rng.random_range(0..n_regions - 1);
    let hue_sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
    let hue_degrees = hue_sign * rng.random_range(30.0..70.0);
    let b_sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
    let brightness = b_sign * rng.random_range(0.14..0.20);
    let contrast = rng.random_range(1.10..1.30);
    Condition {
        attribute_index,
        hue_degrees,
        brightness,
        contrast,
    }
}

/// Forward/vjp capability shared by every generator backend.
pub trait GeneratorContract: Send + Sync {
    fn forward(&self, x: &Image, c: &Condition) -> Result<Image, GeneratorError>;
    /// J^T u at x. Backends without gradient access return
    /// `GeneratorError::NoGradient`.
    fn vjp(&self, x: &Image, c: &Condition, u: &Image) -> Result<Image, GeneratorError>;
    fn has_vjp(&self) -> bool {
        true
    }
    fn name(&self) -> &str;
}

/// Hue rotation of RGB about the gray diagonal by `deg` degrees.
pub fn hue_matrix(deg: f64) -> [[f64; 3]; 3] {
    let th = deg.to_radians();
    let (c, s) = (th.cos(), th.sin());
    let one3 = 1.0 / 3.0;
    let sq3 = (1.0f64 / 3.0).sqrt();
    let off = sq3 * s;
    let mut r = [[one3 * (1.0 - c); 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] += c;
    }
    r[0][1] -= off;
    r[0][2] += off;
    r[1][0] += off;
    r[1][2] -= off;
    r[2][0] -= off;
    r[2][1] += off;
    r
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToyGeneratorConfig {
    /// Sigmoid gain of the tone curve.
    pub gain: f64,
    /// Edit blend weight multiplying the target-region mask.
    pub mix: f64,
    /// Fraction of the tone-curve output in the core (the rest stays linear).
    pub tone_blend: f64,
    /// Strength of the mid-tone detail channel.
    pub detail_gain: f64,
    /// Amplitude of the checker hallucination on flat areas.
    pub hallucination: f64,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        ToyGeneratorConfig {
            gain: 8.0,
            mix: 1.0,
            tone_blend: 0.3,
            detail_gain: 3.5,
            hallucination: 0.12,
        }
    }
}

// flat-area detector constants: response width, pooled-fraction threshold,
// and squash steepness
const W_FLAT: f64 = 2e-3;
const FLAT_T: f64 = 0.55;
const FLAT_K: f64 = 12.0;

/// 3x3 zero-sum checkerboard kernel for the detail channel.
const DET_K: [[f64; 3]; 3] = [
    [0.1, -0.125, 0.1],
    [-0.125, 0.1, -0.125],
    [0.1, -0.125, 0.1],
];

#[derive(Debug, Clone)]
pub struct ToyEditGenerator {
    pub masks: MaskTensor,
    pub cfg: ToyGeneratorConfig,
    // tone curve rescaling so s(0) = 0 and s(1) = 1 exactly
    s_lo: f64,
    s_den: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-500.0, 500.0)).exp())
}

impl ToyEditGenerator {
    pub fn new(masks: MaskTensor, cfg: ToyGeneratorConfig) -> Self {
        let s_lo = sigmoid(-cfg.gain / 2.0);
        let s_hi = sigmoid(cfg.gain / 2.0);
        ToyEditGenerator {
            masks,
            cfg,
            s_lo,
            s_den: s_hi - s_lo,
        }
    }

    pub fn with_defaults(masks: MaskTensor) -> Self {
        Self::new(masks, ToyGeneratorConfig::default())
    }

    fn s_curve(&self, t: f64) -> f64 {
        (sigmoid(self.cfg.gain * (t - 0.5)) - self.s_lo) / self.s_den
    }

    fn s_curve_d(&self, t: f64) -> f64 {
        let e = sigmoid(self.cfg.gain * (t - 0.5));
        self.cfg.gain * e * (1.0 - e) / self.s_den
    }

    /// Mid-tone gate: 1 at mid-gray, 0 at the ends.
    fn rho(&self, t: f64) -> f64 {
        let e = sigmoid(self.cfg.gain * (t - 0.5));
        e * (1.0 - e) / 0.25
    }

    fn rho_d(&self, t: f64) -> f64 {
        let e = sigmoid(self.cfg.gain * (t - 0.5));
        self.cfg.gain * e * (1.0 - e) * (1.0 - 2.0 * e) / 0.25
    }

    fn check_shapes(&self, x: &Image, c: &Condition) -> Result<(), GeneratorError> {
        if x.h != self.masks.h || x.w != self.masks.w || x.c != 3 {
            return Err(GeneratorError::DimensionMismatch(format!(
                "input {}x{}x{} vs masks {}x{}",
                x.h, x.w, x.c, self.masks.h, self.masks.w
            )));
        }
        if c.attribute_index >= self.masks.n {
            return Err(GeneratorError::BadCondition {
                index: c.attribute_index,
                n: self.masks.n,
            });
        }
        Ok(())
    }

    /// Flat-area score A in [0,1] per pixel/channel, plus the intermediates
    /// the adjoint needs (highpass d and its Gaussian response phi).
    fn hall_amp(&self, x: &Image) -> (Image, Image, Image) {
        let smooth = binom_smooth(x);
        let d = x.zip_map(&smooth, |a, b| a - b);
        let phi = d.map(|v| (-(v / W_FLAT) * (v / W_FLAT)).exp());
        let pooled = binom_smooth(&binom_smooth(&phi));
        let a = pooled.map(|b| sigmoid(FLAT_K * (b - FLAT_T)));
        (a, d, phi)
    }

    fn hall_amp_vjp(&self, d: &Image, phi: &Image, a: &Image, a_bar: &Image) -> Image {
        let b_bar = a_bar.zip_map(a, |u, av| u * FLAT_K * av * (1.0 - av));
        let phi_bar = sep_norm_conv_adjoint(
            &sep_norm_conv_adjoint(&b_bar, &[1.0, 2.0, 1.0]),
            &[1.0, 2.0, 1.0],
        );
        let d_bar = Image {
            h: d.h,
            w: d.w,
            c: d.c,
            data: phi_bar
                .data
                .iter()
                .zip(phi.data.iter())
                .zip(d.data.iter())
                .map(|((&pb, &p), &dv)| pb * p * (-2.0 * dv / (W_FLAT * W_FLAT)))
                .collect(),
        };
        let smoothed = sep_norm_conv_adjoint(&d_bar, &[1.0, 2.0, 1.0]);
        d_bar.zip_map(&smoothed, |a, b| a - b)
    }

    /// core(x), the pre-edit image, plus hallucination intermediates.
    fn core(&self, x: &Image) -> (Image, Image, Image, Image, Image) {
        let (a, d, phi) = self.hall_amp(x);
        let mut det = conv3_same(x, &DET_K);
        for y in 0..x.h {
            for xx in 0..x.w {
                let p = if (y + xx) % 2 == 0 { 1.0 } else { -1.0 };
                for ch in 0..3 {
                    let v = det.at(y, xx, ch) + self.cfg.hallucination * a.at(y, xx, ch) * p;
                    det.set(y, xx, ch, v);
                }
            }
        }
        let kt = self.cfg.tone_blend;
        let core = Image {
            h: x.h,
            w: x.w,
            c: x.c,
            data: x
                .data
                .iter()
                .zip(det.data.iter())
                .map(|(&xv, &dv)| {
                    (1.0 - kt) * xv + kt * self.s_curve(xv) + self.cfg.detail_gain * self.rho(xv) * dv
                })
                .collect(),
        };
        (core, det, a, d, phi)
    }

    fn edit_chain(&self, core: &Image, c: &Condition) -> (Image, [[f64; 3]; 3]) {
        let r = hue_matrix(c.hue_degrees);
        let mut y_raw = core.clone();
        let mc = c.attribute_index;
        for y in 0..core.h {
            for x in 0..core.w {
                let px = [core.at(y, x, 0), core.at(y, x, 1), core.at(y, x, 2)];
                let w = self.cfg.mix * self.masks.weight(mc, y, x);
                for ch in 0..3 {
                    let rot = r[ch][0] * px[0] + r[ch][1] * px[1] + r[ch][2] * px[2];
                    let e = c.contrast * (rot - 0.5) + 0.5 + c.brightness;
                    y_raw.set(y, x, ch, px[ch] + w * (e - px[ch]));
                }
            }
        }
        (y_raw, r)
    }
}

impl GeneratorContract for ToyEditGenerator {
    fn forward(&self, x: &Image, c: &Condition) -> Result<Image, GeneratorError> {
        self.check_shapes(x, c)?;
        let (core, _, _, _, _) = self.core(x);
        let (y_raw, _) = self.edit_chain(&core, c);
        Ok(y_raw.clamp01())
    }

    fn vjp(&self, x: &Image, c: &Condition, u: &Image) -> Result<Image, GeneratorError> {
        self.check_shapes(x, c)?;
        if !u.same_shape(x) {
            return Err(GeneratorError::DimensionMismatch(
                "cotangent shape differs from input".into(),
            ));
        }
        let (core, det, a, d, phi) = self.core(x);
        let (y_raw, r) = self.edit_chain(&core, c);
        // clamp subgradient: zero where the forward output saturated
        let g = Image {
            h: u.h,
            w: u.w,
            c: u.c,
            data: u
                .data
                .iter()
                .zip(y_raw.data.iter())
                .map(|(&uv, &yv)| if yv > 0.0 && yv < 1.0 { uv } else { 0.0 })
                .collect(),
        };
        // back through the per-pixel edit blend: y = core + w*(e - core),
        // e = contrast*(R core - 0.5) + 0.5 + bright
        let mc = c.attribute_index;
        let mut g_core = Image::zeros(x.h, x.w, 3);
        for y in 0..x.h {
            for xx in 0..x.w {
                let w = self.cfg.mix * self.masks.weight(mc, y, xx);
                let gv = [g.at(y, xx, 0), g.at(y, xx, 1), g.at(y, xx, 2)];
                for ch in 0..3 {
                    // (1-w)*g + contrast * R^T (w*g)
                    let rt = r[0][ch] * (w * gv[0]) + r[1][ch] * (w * gv[1]) + r[2][ch] * (w * gv[2]);
                    g_core.set(y, xx, ch, (1.0 - w) * gv[ch] + c.contrast * rt);
                }
            }
        }
        // back through core = (1-kt)x + kt s(x) + gamma rho(x) det(x)
        let kt = self.cfg.tone_blend;
        let gamma = self.cfg.detail_gain;
        let mut g_x = Image::zeros(x.h, x.w, 3);
        let mut g_det = Image::zeros(x.h, x.w, 3);
        for i in 0..x.data.len() {
            let xv = x.data[i];
            let gc = g_core.data[i];
            g_x.data[i] = ((1.0 - kt) + kt * self.s_curve_d(xv)) * gc
                + gamma * self.rho_d(xv) * det.data[i] * gc;
            g_det.data[i] = gamma * self.rho(xv) * gc;
        }
        // det = conv3(x, K) + hall * A(x) * checker
        let mut kf = DET_K;
        kf.reverse();
        for row in kf.iter_mut() {
            row.reverse();
        }
        let back_conv = conv3_same(&g_det, &kf);
        for i in 0..g_x.data.len() {
            g_x.data[i] += back_conv.data[i];
        }
        let mut a_bar = Image::zeros(x.h, x.w, 3);
        for y in 0..x.h {
            for xx in 0..x.w {
                let p = if (y + xx) % 2 == 0 { 1.0 } else { -1.0 };
                for ch in 0..3 {
                    a_bar.set(y, xx, ch, g_det.at(y, xx, ch) * self.cfg.hallucination * p);
                }
            }
        }
        let hall_back = self.hall_amp_vjp(&d, &phi, &a, &a_bar);
        for i in 0..g_x.data.len() {
            g_x.data[i] += hall_back.data[i];
        }
        Ok(g_x)
    }

    fn name(&self) -> &str {
        "toy_edit"
    }
}

/// Adapter for third-party generators driven over a file protocol: the
/// backend command is invoked with an input PNG, a condition JSON, and an
/// output path. No gradient access; attacks requiring vjp must reject it.
pub struct ExternalProcessGenerator {
    pub command: PathBuf,
    pub workdir: PathBuf,
    label: String,
}

impl ExternalProcessGenerator {
    pub fn new(command: PathBuf, workdir: PathBuf) -> Self {
        let label = format!("external:{}", command.display());
        ExternalProcessGenerator {
            command,
            workdir,
            label,
        }
    }
}

impl GeneratorContract for ExternalProcessGenerator {
    fn forward(&self, x: &Image, c: &Condition) -> Result<Image, GeneratorError> {
        std::fs::create_dir_all(&self.workdir).map_err(|e| {
            GeneratorError::External(format!("workdir {}: {e}", self.workdir.display()))
        })?;
        let in_path = self.workdir.join("gen_input.png");
        let cond_path = self.workdir.join("gen_condition.json");
        let out_path = self.workdir.join("gen_output.png");
        save_image(x, &in_path)?;
        let cond_text = serde_json::to_string(c).expect("condition is plain data");
        std::fs::write(&cond_path, cond_text)
            .map_err(|e| GeneratorError::External(format!("write condition: {e}")))?;
        let status = Command::new(&self.command)
            .arg(&in_path)
            .arg(&cond_path)
            .arg(&out_path)
            .status()
            .map_err(|e| {
                GeneratorError::External(format!("spawn {}: {e}", self.command.display()))
            })?;
        if !status.success() {
            return Err(GeneratorError::External(format!(
                "{} exited with {status}",
                self.command.display()
            )));
        }
        Ok(load_image(&out_path)?)
    }

    fn vjp(&self, _x: &Image, _c: &Condition, _u: &Image) -> Result<Image, GeneratorError> {
        Err(GeneratorError::NoGradient(self.label.clone()))
    }

    fn has_vjp(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        &self.label
    }
}

/// Convenience constructor used throughout the harness: fixture masks plus
/// default toy settings.
pub fn toy_for_masks(masks: &MaskTensor) -> ToyEditGenerator {
    ToyEditGenerator::with_defaults(masks.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::{synth_fixture, FixtureSpec};

    fn fixture(seed: u64) -> (Image, MaskTensor, Condition) {
        let spec = FixtureSpec {
            seed,
            size: 32,
            n_regions: 5,
        };
        let (img, mut masks) = synth_fixture(&spec).unwrap();
        let cond = sample_condition(seed, 5);
        masks.target_index = cond.attribute_index;
        (img, masks, cond)
    }

    #[test]
    fn forward_stays_in_range() {
        let (img, masks, cond) = fixture(7);
        let gen = toy_for_masks(&masks);
        let y = gen.forward(&img, &cond).unwrap();
        assert!(y.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let (img, masks, cond) = fixture(8);
        let gen = toy_for_masks(&masks);
        let u = Image::zeros(img.h, img.w, 3);
        let g = gen.vjp(&img, &cond, &u).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduced_mode_vjp_is_elementwise_tone_slope() {
        // mix = 0 with a pure tone curve: gradient collapses to s'(x) * u
        let (img, masks, cond) = fixture(9);
        let img = img.map(|v| 0.25 + 0.5 * v); // keep away from the clamp
        let cfg = ToyGeneratorConfig {
            mix: 0.0,
            tone_blend: 1.0,
            detail_gain: 0.0,
            hallucination: 0.0,
            ..Default::default()
        };
        let gen = ToyEditGenerator::new(masks, cfg);
        let u = Image::from_fn(img.h, img.w, 3, |y, x, ch| {
            ((y * 31 + x * 7 + ch) % 11) as f64 / 11.0 - 0.5
        });
        let g = gen.vjp(&img, &cond, &u).unwrap();
        for i in 0..g.data.len() {
            let expect = gen.s_curve_d(img.data[i]) * u.data[i];
            assert!((g.data[i] - expect).abs() < 1e-12);
        }
    }
}
