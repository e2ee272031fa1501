//! Attack triggers (patch / blend / additive families) and the surrogate
//! trigger generators used to train the defense without attacker data.

use crate::error::{BdfwError, Result};
use crate::rng::RngStream;
use crate::tensor::{clamp01, BinaryMask, ImageTensor};
use ndarray::Array3;

/// Parametric description of a trigger and how it fuses with an image.
///
/// `HvtPatch.mask` uses the attack convention (1 = trigger pixel); the
/// locator's clean-mask convention is its complement.
#[derive(Debug, Clone)]
pub enum TriggerSpec {
    HvtPatch {
        pattern: ImageTensor,
        mask: BinaryMask,
        target_class: usize,
    },
    SvtBlend {
        pattern: ImageTensor,
        blend_weight: f64,
        target_class: usize,
    },
    /// Signed full-size pattern added to the image (sinusoidal signal).
    SvtAdditive {
        pattern: ImageTensor,
        target_class: usize,
    },
    LvtAdditive {
        amplitude: f64,
        target_class: usize,
    },
}

impl TriggerSpec {
    pub fn target_class(&self) -> usize {
        match self {
            TriggerSpec::HvtPatch { target_class, .. }
            | TriggerSpec::SvtBlend { target_class, .. }
            | TriggerSpec::SvtAdditive { target_class, .. }
            | TriggerSpec::LvtAdditive { target_class, .. } => *target_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TriggerSpec::SvtBlend { blend_weight, .. } => {
                if *blend_weight <= 0.0 || *blend_weight > 1.0 {
                    return Err(BdfwError::InvalidParam(format!(
                        "blend weight {blend_weight} outside (0,1]"
                    )));
                }
            }
            TriggerSpec::LvtAdditive { amplitude, .. } => {
                if *amplitude <= 0.0 || *amplitude > 8.0 / 255.0 {
                    return Err(BdfwError::InvalidParam(format!(
                        "lvt amplitude {amplitude} outside (0, 8/255]"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn check_same_shape(x: &ImageTensor, p: &ImageTensor) -> Result<()> {
    if !x.same_shape(p) {
        return Err(BdfwError::ShapeMismatch {
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", p.shape()),
        });
    }
    Ok(())
}

/// Patch composition x' = x ⊙ (1−m) + Δ ⊙ m, implemented as a bit-exact
/// per-pixel selection.
pub fn apply_hvt(x: &ImageTensor, spec: &TriggerSpec) -> Result<ImageTensor> {
    let (pattern, mask) = match spec {
        TriggerSpec::HvtPatch { pattern, mask, .. } => (pattern, mask),
        _ => return Err(BdfwError::InvalidParam("apply_hvt needs an hvt_patch spec".into())),
    };
    check_same_shape(x, pattern)?;
    if mask.height() != x.height() || mask.width() != x.width() {
        return Err(BdfwError::ShapeMismatch {
            expected: format!("{}x{}", x.height(), x.width()),
            got: format!("{}x{}", mask.height(), mask.width()),
        });
    }
    let mut out = x.clone();
    for c in 0..x.channels() {
        for i in 0..x.height() {
            for j in 0..x.width() {
                if mask.data[[i, j]] == 1.0 {
                    out.data[[c, i, j]] = pattern.data[[c, i, j]];
                }
            }
        }
    }
    Ok(out)
}

/// Blend composition out = (1−w)·x + w·Δ, clamped to [0,1].
pub fn apply_svt(x: &ImageTensor, spec: &TriggerSpec) -> Result<ImageTensor> {
    let (pattern, w) = match spec {
        TriggerSpec::SvtBlend {
            pattern,
            blend_weight,
            ..
        } => (pattern, *blend_weight),
        _ => return Err(BdfwError::InvalidParam("apply_svt needs an svt_blend spec".into())),
    };
    check_same_shape(x, pattern)?;
    let blended = ImageTensor::new(&x.data * (1.0 - w) + &pattern.data * w);
    clamp01(&blended)
}

/// Additive composition out = clamp01(x + Δ) for signed full-size patterns.
pub fn apply_additive(x: &ImageTensor, spec: &TriggerSpec) -> Result<ImageTensor> {
    let pattern = match spec {
        TriggerSpec::SvtAdditive { pattern, .. } => pattern,
        _ => {
            return Err(BdfwError::InvalidParam(
                "apply_additive needs an svt_additive spec".into(),
            ))
        }
    };
    check_same_shape(x, pattern)?;
    clamp01(&ImageTensor::new(&x.data + &pattern.data))
}

/// Fixed pseudo-random ±1 pattern keyed by the target class.
pub fn lvt_pattern(channels: usize, height: usize, width: usize, target_class: usize) -> ImageTensor {
    let mut rng = RngStream::new(0xBDF1, &format!("lvt-pattern/{target_class}"));
    let mut data = Array3::zeros((channels, height, width));
    for v in data.iter_mut() {
        *v = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    }
    ImageTensor::new(data)
}

/// Imperceptible additive trigger out = clamp01(x + ε·P).
pub fn apply_lvt(x: &ImageTensor, spec: &TriggerSpec) -> Result<ImageTensor> {
    let (eps, target) = match spec {
        TriggerSpec::LvtAdditive {
            amplitude,
            target_class,
        } => (*amplitude, *target_class),
        _ => return Err(BdfwError::InvalidParam("apply_lvt needs an lvt_additive spec".into())),
    };
    let (c, h, w) = x.shape();
    let p = lvt_pattern(c, h, w, target);
    clamp01(&ImageTensor::new(&x.data + &(p.data * eps)))
}

/// Dispatch a trigger application by kind.
pub fn apply_trigger(x: &ImageTensor, spec: &TriggerSpec) -> Result<ImageTensor> {
    match spec {
        TriggerSpec::HvtPatch { .. } => apply_hvt(x, spec),
        TriggerSpec::SvtBlend { .. } => apply_svt(x, spec),
        TriggerSpec::SvtAdditive { .. } => apply_additive(x, spec),
        TriggerSpec::LvtAdditive { .. } => apply_lvt(x, spec),
    }
}

/// Column-wise sinusoid Δ(p,q) = delta·sin(2π·f·q/W) replicated over rows
/// and channels. The pattern is signed; apply with `apply_additive`.
pub fn make_sig_pattern(height: usize, width: usize, delta: f64, f: f64) -> ImageTensor {
    let mut data = Array3::zeros((3, height, width));
    for q in 0..width {
        let v = delta * (2.0 * std::f64::consts::PI * f * q as f64 / width as f64).sin();
        for c in 0..3 {
            for p in 0..height {
                data[[c, p, q]] = v;
            }
        }
    }
    ImageTensor::new(data)
}

/// The classic 3x3 checkerboard patch at the bottom-right corner.
pub fn badnets_spec(height: usize, width: usize, target_class: usize) -> TriggerSpec {
    let mut pattern = ImageTensor::zeros(3, height, width);
    let mut mask = BinaryMask::zeros(height, width);
    for di in 0..3 {
        for dj in 0..3 {
            let (i, j) = (height - 3 + di, width - 3 + dj);
            mask.data[[i, j]] = 1.0;
            let v = if (di + dj) % 2 == 0 { 1.0 } else { 0.0 };
            for c in 0..3 {
                pattern.data[[c, i, j]] = v;
            }
        }
    }
    TriggerSpec::HvtPatch {
        pattern,
        mask,
        target_class,
    }
}

/// Built-in full-size blend pattern: a crude cartoon face on a gray
/// background, used when no pattern PNG is supplied.
pub fn blended_default_pattern(height: usize, width: usize) -> ImageTensor {
    let mut img = ImageTensor::filled(3, height, width, 0.45);
    let (h, w) = (height as f64, width as f64);
    let draw_disc = |img: &mut ImageTensor, cy: f64, cx: f64, r: f64, color: [f64; 3]| {
        for i in 0..height {
            for j in 0..width {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                if dy * dy + dx * dx <= r * r {
                    for c in 0..3 {
                        img.data[[c, i, j]] = color[c];
                    }
                }
            }
        }
    };
    // head, ears, eyes, nose, bow
    draw_disc(&mut img, 0.55 * h, 0.50 * w, 0.33 * w, [0.95, 0.95, 0.92]);
    draw_disc(&mut img, 0.28 * h, 0.26 * w, 0.10 * w, [0.95, 0.95, 0.92]);
    draw_disc(&mut img, 0.28 * h, 0.74 * w, 0.10 * w, [0.95, 0.95, 0.92]);
    draw_disc(&mut img, 0.52 * h, 0.36 * w, 0.045 * w, [0.05, 0.05, 0.05]);
    draw_disc(&mut img, 0.52 * h, 0.64 * w, 0.045 * w, [0.05, 0.05, 0.05]);
    draw_disc(&mut img, 0.63 * h, 0.50 * w, 0.05 * w, [0.95, 0.80, 0.10]);
    draw_disc(&mut img, 0.30 * h, 0.62 * w, 0.08 * w, [0.90, 0.15, 0.25]);
    draw_disc(&mut img, 0.24 * h, 0.70 * w, 0.06 * w, [0.90, 0.15, 0.25]);
    img
}

/// Shape kinds used by the surrogate generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Triangle,
    Square,
    Circle,
}

/// Fill styles for surrogate patch triggers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillStyle {
    Mosaic,
    Noise,
    Solid,
}

fn rasterize_shape(
    mask: &mut BinaryMask,
    kind: ShapeKind,
    top: usize,
    left: usize,
    size: usize,
) {
    match kind {
        ShapeKind::Square => {
            for i in 0..size {
                for j in 0..size {
                    mask.data[[top + i, left + j]] = 1.0;
                }
            }
        }
        ShapeKind::Circle => {
            let r = size as f64 / 2.0;
            let (cy, cx) = (top as f64 + r - 0.5, left as f64 + r - 0.5);
            for i in top..top + size {
                for j in left..left + size {
                    let dy = i as f64 - cy;
                    let dx = j as f64 - cx;
                    if dy * dy + dx * dx <= r * r {
                        mask.data[[i, j]] = 1.0;
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            // isoceles, apex at the top row
            for i in 0..size {
                let half = (i as f64 + 1.0) / (size as f64) * (size as f64 / 2.0);
                let mid = left as f64 + size as f64 / 2.0;
                for j in left..left + size {
                    if (j as f64 + 0.5 - mid).abs() <= half {
                        mask.data[[top + i, j]] = 1.0;
                    }
                }
            }
        }
    }
}

fn fill_pattern(
    pattern: &mut ImageTensor,
    mask: &BinaryMask,
    style: FillStyle,
    rng: &mut RngStream,
) {
    let (c, h, w) = pattern.shape();
    match style {
        FillStyle::Solid => {
            let color: Vec<f64> = (0..c).map(|_| rng.uniform()).collect();
            for i in 0..h {
                for j in 0..w {
                    if mask.data[[i, j]] == 1.0 {
                        for ch in 0..c {
                            pattern.data[[ch, i, j]] = color[ch];
                        }
                    }
                }
            }
        }
        FillStyle::Noise => {
            for i in 0..h {
                for j in 0..w {
                    if mask.data[[i, j]] == 1.0 {
                        for ch in 0..c {
                            pattern.data[[ch, i, j]] = rng.uniform();
                        }
                    }
                }
            }
        }
        FillStyle::Mosaic => {
            // 2x2 blocks of random color, aligned to the image grid
            let mut block_colors = std::collections::HashMap::new();
            for i in 0..h {
                for j in 0..w {
                    if mask.data[[i, j]] == 1.0 {
                        let key = (i / 2, j / 2);
                        let color = block_colors
                            .entry(key)
                            .or_insert_with(|| (0..c).map(|_| rng.uniform()).collect::<Vec<f64>>());
                        for ch in 0..c {
                            pattern.data[[ch, i, j]] = color[ch];
                        }
                    }
                }
            }
        }
    }
}

/// Randomly generated surrogate patch trigger: a triangle, square, or
/// circle with side/diameter uniform in [10%, 30%] of the image side,
/// placed uniformly in bounds, filled with mosaic, noise, or solid color.
/// Returns the full-size pattern and its mask (1 = trigger).
pub fn gen_surrogate_hvt(
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut RngStream,
) -> (ImageTensor, BinaryMask) {
    let side = height.min(width) as f64;
    // real patch attacks favor tiny stamps, so skew small: half the draws
    // come from the bottom of the size range
    let frac = if rng.uniform() < 0.5 {
        rng.uniform_in(0.06, 0.14)
    } else {
        rng.uniform_in(0.14, 0.30)
    };
    let size = ((frac * side).round().max(2.0) as usize).min(height.min(width));
    let kind = match rng.below(3) {
        0 => ShapeKind::Triangle,
        1 => ShapeKind::Square,
        _ => ShapeKind::Circle,
    };
    let style = match rng.below(3) {
        0 => FillStyle::Mosaic,
        1 => FillStyle::Noise,
        _ => FillStyle::Solid,
    };
    // snap to an image edge half the time: stamps hug borders and corners
    // in practice, and border placements are hardest for the locator
    let mut place = |extent: usize| -> usize {
        if rng.uniform() < 0.5 {
            if rng.uniform() < 0.5 {
                0
            } else {
                extent - size
            }
        } else {
            rng.below(extent - size + 1)
        }
    };
    let top = place(height);
    let left = place(width);
    let mut mask = BinaryMask::zeros(height, width);
    rasterize_shape(&mut mask, kind, top, left, size);
    let mut pattern = ImageTensor::zeros(channels, height, width);
    fill_pattern(&mut pattern, &mask, style, rng);
    (pattern, mask)
}

/// Full-size surrogate blend trigger: a randomly generated background
/// (two-color gradient) with 1-3 solid-colored shapes on top.
pub fn gen_surrogate_svt(
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut RngStream,
) -> ImageTensor {
    let c0: Vec<f64> = (0..channels).map(|_| rng.uniform()).collect();
    let c1: Vec<f64> = (0..channels).map(|_| rng.uniform()).collect();
    let horizontal = rng.uniform() < 0.5;
    let mut img = ImageTensor::zeros(channels, height, width);
    for i in 0..height {
        for j in 0..width {
            let t = if horizontal {
                j as f64 / (width.max(2) - 1) as f64
            } else {
                i as f64 / (height.max(2) - 1) as f64
            };
            for ch in 0..channels {
                img.data[[ch, i, j]] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let n_shapes = 1 + rng.below(3);
    for _ in 0..n_shapes {
        let side = height.min(width) as f64;
        let size = (rng.uniform_in(0.2, 0.6) * side).round().max(2.0) as usize;
        let size = size.min(height.min(width));
        let kind = match rng.below(3) {
            0 => ShapeKind::Triangle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Circle,
        };
        let top = rng.below(height - size + 1);
        let left = rng.below(width - size + 1);
        let mut mask = BinaryMask::zeros(height, width);
        rasterize_shape(&mut mask, kind, top, left, size);
        fill_pattern(&mut img, &mask, FillStyle::Solid, rng);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn test_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = seeded_rng(seed, "trigger-test-img");
        let mut img = ImageTensor::zeros(c, h, w);
        for v in img.data.iter_mut() {
            *v = rng.uniform();
        }
        img
    }

    #[test]
    fn hvt_empty_mask_is_identity() {
        let x = test_image(3, 8, 8, 1);
        let spec = TriggerSpec::HvtPatch {
            pattern: ImageTensor::filled(3, 8, 8, 0.7),
            mask: BinaryMask::zeros(8, 8),
            target_class: 0,
        };
        assert_eq!(apply_hvt(&x, &spec).unwrap(), x);
    }

    #[test]
    fn hvt_full_mask_is_pattern() {
        let x = test_image(3, 8, 8, 2);
        let pattern = test_image(3, 8, 8, 3);
        let spec = TriggerSpec::HvtPatch {
            pattern: pattern.clone(),
            mask: BinaryMask::ones(8, 8),
            target_class: 0,
        };
        assert_eq!(apply_hvt(&x, &spec).unwrap(), pattern);
    }

    #[test]
    fn badnets_changes_exactly_nine_pixels() {
        let x = test_image(3, 32, 32, 4);
        let spec = badnets_spec(32, 32, 0);
        let y = apply_hvt(&x, &spec).unwrap();
        let mut differing = 0;
        for i in 0..32 {
            for j in 0..32 {
                if (0..3).any(|c| y.data[[c, i, j]] != x.data[[c, i, j]]) {
                    differing += 1;
                }
            }
        }
        assert_eq!(differing, 9);
    }

    #[test]
    fn hvt_idempotent() {
        let x = test_image(3, 8, 8, 5);
        let mut rng = seeded_rng(6, "hvt");
        let (pattern, mask) = gen_surrogate_hvt(3, 8, 8, &mut rng);
        let spec = TriggerSpec::HvtPatch {
            pattern,
            mask,
            target_class: 0,
        };
        let once = apply_hvt(&x, &spec).unwrap();
        let twice = apply_hvt(&once, &spec).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn svt_degenerate_weights() {
        let x = test_image(3, 8, 8, 7);
        let pattern = test_image(3, 8, 8, 8);
        let id = TriggerSpec::SvtBlend {
            pattern: pattern.clone(),
            blend_weight: 0.0,
            target_class: 0,
        };
        assert!(apply_svt(&x, &id).unwrap().linf_dist(&x) < 1e-15);
        let full = TriggerSpec::SvtBlend {
            pattern: pattern.clone(),
            blend_weight: 1.0,
            target_class: 0,
        };
        assert!(apply_svt(&x, &full).unwrap().linf_dist(&pattern) < 1e-15);
    }

    #[test]
    fn svt_scalar_arithmetic() {
        let x = ImageTensor::filled(3, 4, 4, 0.5);
        let spec = TriggerSpec::SvtBlend {
            pattern: ImageTensor::filled(3, 4, 4, 1.0),
            blend_weight: 0.2,
            target_class: 0,
        };
        let y = apply_svt(&x, &spec).unwrap();
        assert!(y.linf_dist(&ImageTensor::filled(3, 4, 4, 0.6)) < 1e-12);
    }

    #[test]
    fn svt_sequential_blends_compose() {
        let x = test_image(3, 8, 8, 9);
        let pattern = test_image(3, 8, 8, 10);
        let (w1, w2) = (0.15, 0.3);
        let s1 = TriggerSpec::SvtBlend {
            pattern: pattern.clone(),
            blend_weight: w1,
            target_class: 0,
        };
        let s2 = TriggerSpec::SvtBlend {
            pattern: pattern.clone(),
            blend_weight: w2,
            target_class: 0,
        };
        let seq = apply_svt(&apply_svt(&x, &s1).unwrap(), &s2).unwrap();
        let weff = 1.0 - (1.0 - w1) * (1.0 - w2);
        let single = apply_svt(
            &x,
            &TriggerSpec::SvtBlend {
                pattern,
                blend_weight: weff,
                target_class: 0,
            },
        )
        .unwrap();
        assert!(seq.linf_dist(&single) < 1e-6);
    }

    #[test]
    fn sig_values_and_zero_mean() {
        let delta = 6.0 / 255.0;
        let p = make_sig_pattern(8, 32, delta, 1.0);
        assert!(p.data[[0, 0, 0]].abs() < 1e-12);
        assert!((p.data[[0, 0, 8]] - delta).abs() < 1e-12); // q = W/4
        let mean: f64 = p.data.iter().sum::<f64>() / p.data.len() as f64;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn lvt_bounded_and_deterministic() {
        let x = test_image(3, 16, 16, 11);
        let eps = 4.0 / 255.0;
        let spec = TriggerSpec::LvtAdditive {
            amplitude: eps,
            target_class: 2,
        };
        let y1 = apply_lvt(&x, &spec).unwrap();
        let y2 = apply_lvt(&x, &spec).unwrap();
        assert_eq!(y1, y2);
        assert!(y1.linf_dist(&x) <= eps + 1e-15);
        let zero = TriggerSpec::LvtAdditive {
            amplitude: 0.0,
            target_class: 2,
        };
        assert_eq!(apply_lvt(&x, &zero).unwrap(), x);
    }

    #[test]
    fn lvt_amplitude_validation() {
        assert!(TriggerSpec::LvtAdditive {
            amplitude: 0.0,
            target_class: 0
        }
        .validate()
        .is_err());
        assert!(TriggerSpec::LvtAdditive {
            amplitude: 4.0 / 255.0,
            target_class: 0
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn surrogate_square_mask_area() {
        let mut mask = BinaryMask::zeros(32, 32);
        rasterize_shape(&mut mask, ShapeKind::Square, 5, 5, 6);
        assert_eq!(mask.sum(), 36.0);
    }

    #[test]
    fn surrogate_circle_mask_area_near_pi_r_squared() {
        for &size in &[8usize, 12, 16] {
            let mut mask = BinaryMask::zeros(32, 32);
            rasterize_shape(&mut mask, ShapeKind::Circle, 2, 2, size);
            let r = size as f64 / 2.0;
            let expected = std::f64::consts::PI * r * r;
            assert!(
                (mask.sum() - expected).abs() <= 2.0 * r,
                "size {size}: area {} vs {expected}",
                mask.sum()
            );
        }
    }

    #[test]
    fn surrogate_hvt_covers_all_fill_styles() {
        let mut rng = seeded_rng(12, "fills");
        let mut seen = [false; 3];
        for _ in 0..1000 {
            match rng.below(3) {
                0 => seen[0] = true,
                1 => seen[1] = true,
                _ => seen[2] = true,
            }
            let _ = gen_surrogate_hvt(3, 32, 32, &mut rng);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn surrogate_svt_shape_and_diversity() {
        let mut rng = seeded_rng(13, "svt");
        let a = gen_surrogate_svt(3, 32, 32, &mut rng);
        let b = gen_surrogate_svt(3, 32, 32, &mut rng);
        assert_eq!(a.shape(), (3, 32, 32));
        assert!(a.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let differing = a
            .data
            .iter()
            .zip(b.data.iter())
            .filter(|(x, y)| (**x - **y).abs() > 1e-9)
            .count();
        assert!(differing > a.data.len() / 10, "only {differing} pixels differ");
    }

    #[test]
    fn surrogate_svt_channel_means_spread() {
        let mut rng = seeded_rng(14, "svt-means");
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..1000 {
            let p = gen_surrogate_svt(3, 16, 16, &mut rng);
            let m = p.data.iter().sum::<f64>() / p.data.len() as f64;
            lo = lo.min(m);
            hi = hi.max(m);
        }
        assert!(lo < 0.3 && hi > 0.7, "means span [{lo}, {hi}]");
    }

    #[test]
    fn trigger_algebra_matches_pixel_loop_oracle() {
        // independent scalar-loop oracles on 8x8 inputs
        let x = test_image(3, 8, 8, 20);
        let mut rng = seeded_rng(21, "oracle");
        let (pattern, mask) = gen_surrogate_hvt(3, 8, 8, &mut rng);
        let hvt = apply_hvt(
            &x,
            &TriggerSpec::HvtPatch {
                pattern: pattern.clone(),
                mask: mask.clone(),
                target_class: 0,
            },
        )
        .unwrap();
        for c in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    let m = mask.data[[i, j]];
                    let expect = x.data[[c, i, j]] * (1.0 - m) + pattern.data[[c, i, j]] * m;
                    assert!((hvt.data[[c, i, j]] - expect).abs() < 1e-7);
                }
            }
        }
        let w = 0.23;
        let svt = apply_svt(
            &x,
            &TriggerSpec::SvtBlend {
                pattern: pattern.clone(),
                blend_weight: w,
                target_class: 0,
            },
        )
        .unwrap();
        for c in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    let expect =
                        ((1.0 - w) * x.data[[c, i, j]] + w * pattern.data[[c, i, j]]).clamp(0.0, 1.0);
                    assert!((svt.data[[c, i, j]] - expect).abs() < 1e-7);
                }
            }
        }
        let eps = 4.0 / 255.0;
        let lvt = apply_lvt(
            &x,
            &TriggerSpec::LvtAdditive {
                amplitude: eps,
                target_class: 1,
            },
        )
        .unwrap();
        let p = lvt_pattern(3, 8, 8, 1);
        for c in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    let expect = (x.data[[c, i, j]] + eps * p.data[[c, i, j]]).clamp(0.0, 1.0);
                    assert!((lvt.data[[c, i, j]] - expect).abs() < 1e-7);
                }
            }
        }
    }
}
