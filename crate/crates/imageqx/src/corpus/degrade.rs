//! Image degradations mirroring the five poor-quality explanations. Each
//! degradation is deterministic given `(image, spec, seed)` and magnitude maps
//! monotonically to severity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use super::scene::SceneMeta;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::types::ExplanationKind;

/// Blur severity range: sigma = magnitude * SIGMA_MAX pixels.
pub const SIGMA_MAX: f32 = 6.0;
/// Low-resolution severity range: block factor = ceil(1 + magnitude * F_MAX).
pub const F_MAX: f32 = 7.0;

/// One degradation to apply. Magnitude 0 is reserved to mean "absent".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: ExplanationKind,
    pub magnitude: f32,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude > 0.0 && self.magnitude <= 1.0) {
            return Err(Error::Argument(format!(
                "degradation magnitude must be in (0,1], got {}",
                self.magnitude
            )));
        }
        Ok(())
    }
}

/// Apply one degradation, returning the degraded image and the updated scene
/// geometry. Output values are clamped to `[0,1]`.
pub fn apply_degradation(
    image: &ImageTensor,
    scene: &SceneMeta,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<(ImageTensor, SceneMeta)> {
    spec.validate()?;
    let m = spec.magnitude;
    match spec.kind {
        ExplanationKind::Blurry => Ok((gaussian_blur(image, m * SIGMA_MAX), scene.clone())),
        ExplanationKind::BadLight => {
            let mut out = image.clone();
            let factor = 1.0 - 0.8 * m;
            out.map_values(|v| v * factor);
            Ok((out, scene.clone()))
        }
        ExplanationKind::LowResolution => {
            let factor = (1.0 + m * F_MAX).ceil() as usize;
            Ok((pixelate(image, factor), scene.clone()))
        }
        ExplanationKind::BadFraming => Ok(translate_to_edge(image, scene, m, seed)),
        ExplanationKind::TooFarAway => Ok(shrink_content(image, scene, m)),
    }
}

/// Separable Gaussian blur with clamp-to-edge padding. The kernel radius is
/// floor(3*sigma), so the magnitude -> 0 limit is the width-1 identity kernel.
pub fn gaussian_blur(image: &ImageTensor, sigma: f32) -> ImageTensor {
    let radius = (3.0 * sigma).floor() as i64;
    if radius < 1 {
        return image.clone();
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / denom).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let res = image.resolution() as i64;
    let clamp = |i: i64| i.clamp(0, res - 1) as usize;

    // Horizontal pass then vertical pass.
    let mut tmp = image.clone();
    for r in 0..res as usize {
        for c in 0..res {
            let mut acc = [0.0f32; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let px = image.get(r, clamp(c + ki as i64 - radius));
                for ch in 0..3 {
                    acc[ch] += k * px[ch];
                }
            }
            tmp.set(r, c as usize, acc);
        }
    }
    let mut out = tmp.clone();
    for r in 0..res {
        for c in 0..res as usize {
            let mut acc = [0.0f32; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let px = tmp.get(clamp(r + ki as i64 - radius), c);
                for ch in 0..3 {
                    acc[ch] += k * px[ch];
                }
            }
            out.set(r as usize, c, acc);
        }
    }
    out
}

/// Box-downsample by `factor` then nearest-neighbor upsample: every pixel is
/// replaced by the mean of its (possibly partial) block.
pub fn pixelate(image: &ImageTensor, factor: usize) -> ImageTensor {
    if factor <= 1 {
        return image.clone();
    }
    let res = image.resolution();
    let mut out = image.clone();
    let mut br = 0;
    while br < res {
        let rh = (br + factor).min(res);
        let mut bc = 0;
        while bc < res {
            let cw = (bc + factor).min(res);
            let mut acc = [0.0f32; 3];
            let n = ((rh - br) * (cw - bc)) as f32;
            for r in br..rh {
                for c in bc..cw {
                    let px = image.get(r, c);
                    for ch in 0..3 {
                        acc[ch] += px[ch];
                    }
                }
            }
            for v in &mut acc {
                *v /= n;
            }
            for r in br..rh {
                for c in bc..cw {
                    out.set(r, c, acc);
                }
            }
            bc = cw;
        }
        br = rh;
    }
    out
}

/// Translate the frame so the lesion center sits at distance
/// `(1 - magnitude) * (width/2)` from a seed-chosen edge; magnitude 1 puts it
/// on the edge. Vacated pixels show a dark off-subject surround, the way a
/// poorly aimed camera catches clothing or table instead of skin.
fn translate_to_edge(
    image: &ImageTensor,
    scene: &SceneMeta,
    magnitude: f32,
    seed: u64,
) -> (ImageTensor, SceneMeta) {
    let res = image.resolution() as f32;
    let target = (1.0 - magnitude) * res / 2.0;
    let mut rng = stream(seed, "framing", 0);
    let edge = rng.gen_range(0..4u8); // 0 top, 1 bottom, 2 left, 3 right
    let surround = [
        rng.gen_range(0.02..0.25),
        rng.gen_range(0.02..0.25),
        rng.gen_range(0.02..0.30),
    ];
    let (dr, dc) = match edge {
        0 => (target - scene.lesion_center.0, 0.0),
        1 => (res - 1.0 - target - scene.lesion_center.0, 0.0),
        2 => (0.0, target - scene.lesion_center.1),
        _ => (0.0, res - 1.0 - target - scene.lesion_center.1),
    };
    let (dr, dc) = (dr.round() as i64, dc.round() as i64);

    let resi = image.resolution() as i64;
    let mut out = ImageTensor::filled(image.resolution(), surround);
    for r in 0..resi {
        for c in 0..resi {
            let (sr, sc) = (r - dr, c - dc);
            if (0..resi).contains(&sr) && (0..resi).contains(&sc) {
                out.set(r as usize, c as usize, image.get(sr as usize, sc as usize));
            }
        }
    }
    let meta = SceneMeta {
        lesion_center: (
            scene.lesion_center.0 + dr as f32,
            scene.lesion_center.1 + dc as f32,
        ),
        ..scene.clone()
    };
    (out, meta)
}

/// Shrink the content by factor `1 - 0.75 * magnitude` (bilinear sampling) and
/// pad with the background tone, keeping the content centered.
fn shrink_content(image: &ImageTensor, scene: &SceneMeta, magnitude: f32) -> (ImageTensor, SceneMeta) {
    let res = image.resolution();
    let scale = 1.0 - 0.75 * magnitude;
    let new_size = ((res as f32 * scale).round() as usize).max(1);
    let offset = (res - new_size) / 2;

    let mut out = ImageTensor::filled(res, scene.background_tone);
    let src_step = res as f32 / new_size as f32;
    for r in 0..new_size {
        for c in 0..new_size {
            let sr = ((r as f32 + 0.5) * src_step - 0.5).clamp(0.0, res as f32 - 1.0);
            let sc = ((c as f32 + 0.5) * src_step - 0.5).clamp(0.0, res as f32 - 1.0);
            out.set(r + offset, c + offset, bilinear(image, sr, sc));
        }
    }
    let actual_scale = new_size as f32 / res as f32;
    let meta = SceneMeta {
        lesion_center: (
            scene.lesion_center.0 * actual_scale + offset as f32,
            scene.lesion_center.1 * actual_scale + offset as f32,
        ),
        lesion_radius: scene.lesion_radius * actual_scale,
        ..scene.clone()
    };
    (out, meta)
}

fn bilinear(image: &ImageTensor, r: f32, c: f32) -> [f32; 3] {
    let res = image.resolution();
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(res - 1);
    let c1 = (c0 + 1).min(res - 1);
    let (fr, fc) = (r - r0 as f32, c - c0 as f32);
    let (p00, p01, p10, p11) = (
        image.get(r0, c0),
        image.get(r0, c1),
        image.get(r1, c0),
        image.get(r1, c1),
    );
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = p00[ch] * (1.0 - fc) + p01[ch] * fc;
        let bot = p10[ch] * (1.0 - fc) + p11[ch] * fc;
        out[ch] = top * (1.0 - fr) + bot * fr;
    }
    out
}
