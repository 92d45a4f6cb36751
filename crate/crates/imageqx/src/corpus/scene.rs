//! Procedural scene synthesis: skin backgrounds, elliptical lesion blobs, and
//! non-skin textures. Ground truth is known by construction.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Geometry and palette of a synthetic lesion scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    /// (row, col) of the lesion center, in pixels.
    pub lesion_center: (f32, f32),
    pub lesion_radius: f32,
    pub background_tone: [f32; 3],
    pub lesion_tone: [f32; 3],
}

/// Knobs for scene synthesis, a subset of the corpus config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub resolution: usize,
    /// Minimum mean per-channel contrast between lesion and background tones.
    pub min_contrast: f32,
    /// Per-pixel texture noise amplitude.
    pub texture_noise: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            min_contrast: 0.15,
            texture_noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::Config(format!(
                "resolution must be >= 32, got {}",
                self.resolution
            )));
        }
        if !(0.0..=1.0).contains(&self.min_contrast) {
            return Err(Error::Config("min_contrast must be in [0,1]".into()));
        }
        Ok(())
    }
}

fn sample_skin_tone(rng: &mut ChaCha12Rng) -> [f32; 3] {
    [
        0.80 + rng.gen_range(-0.08..0.10),
        0.60 + rng.gen_range(-0.10..0.10),
        0.50 + rng.gen_range(-0.10..0.10),
    ]
}

fn sample_lesion_tone(rng: &mut ChaCha12Rng, background: [f32; 3], min_contrast: f32) -> [f32; 3] {
    let mut tone = [
        0.42 + rng.gen_range(-0.10..0.08),
        0.24 + rng.gen_range(-0.08..0.08),
        0.18 + rng.gen_range(-0.06..0.08),
    ];
    // Darken until the mean channel gap clears the configured contrast.
    loop {
        let contrast = (0..3).map(|c| (background[c] - tone[c]).abs()).sum::<f32>() / 3.0;
        if contrast >= min_contrast {
            break;
        }
        for v in &mut tone {
            *v = (*v * 0.8).max(0.0);
        }
        if tone.iter().all(|v| *v <= 1e-3) {
            break;
        }
    }
    tone
}

/// Skin-tone background with a mild vertical shading gradient and per-pixel
/// texture noise.
pub fn skin_background(rng: &mut ChaCha12Rng, config: &SceneConfig, tone: [f32; 3]) -> ImageTensor {
    let res = config.resolution;
    let mut img = ImageTensor::filled(res, tone);
    let grad = rng.gen_range(-0.06..0.06f32);
    for r in 0..res {
        let shade = grad * (r as f32 / res as f32 - 0.5);
        for c in 0..res {
            let mut px = img.get(r, c);
            for v in &mut px {
                *v += shade + rng.gen_range(-config.texture_noise..=config.texture_noise);
            }
            img.set(r, c, px);
        }
    }
    img
}

/// Paint a soft-edged rotated ellipse of `tone` onto `img`.
fn paint_lesion(
    img: &mut ImageTensor,
    center: (f32, f32),
    radius: f32,
    aspect: f32,
    angle: f32,
    tone: [f32; 3],
) {
    let res = img.resolution();
    let (sin, cos) = angle.sin_cos();
    let (rx, ry) = (radius, radius * aspect);
    for r in 0..res {
        for c in 0..res {
            let dr = r as f32 - center.0;
            let dc = c as f32 - center.1;
            let u = (dc * cos + dr * sin) / rx;
            let v = (-dc * sin + dr * cos) / ry;
            let d = (u * u + v * v).sqrt();
            if d < 1.0 {
                // Soft edge over the outer 15% of the radius.
                let alpha = ((1.0 - d) / 0.15).clamp(0.0, 1.0);
                let px = img.get(r, c);
                let mut blended = [0.0; 3];
                for ch in 0..3 {
                    blended[ch] = alpha * tone[ch] + (1.0 - alpha) * px[ch];
                }
                img.set(r, c, blended);
            }
        }
    }
}

/// Generate one clean lesion scene. Deterministic for a fixed `(seed, config)`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<(ImageTensor, SceneMeta)> {
    config.validate()?;
    let mut rng = stream(seed, "scene", 0);
    let res = config.resolution as f32;

    let background_tone = sample_skin_tone(&mut rng);
    let lesion_tone = sample_lesion_tone(&mut rng, background_tone, config.min_contrast);
    let radius = rng.gen_range((res / 16.0)..(res / 4.0)).max(4.0);
    let margin = radius + 2.0;
    let center = (
        rng.gen_range(margin..(res - margin)),
        rng.gen_range(margin..(res - margin)),
    );
    let aspect = rng.gen_range(0.6..1.0f32);
    let angle = rng.gen_range(0.0..std::f32::consts::PI);

    let mut img = skin_background(&mut rng, config, background_tone);
    paint_lesion(&mut img, center, radius, aspect, angle, lesion_tone);

    Ok((
        img,
        SceneMeta {
            lesion_center: center,
            lesion_radius: radius,
            background_tone,
            lesion_tone,
        },
    ))
}

/// Healthy-skin scene: background texture only, no lesion blob.
pub fn generate_healthy_scene(seed: u64, config: &SceneConfig) -> Result<ImageTensor> {
    config.validate()?;
    let mut rng = stream(seed, "healthy", 0);
    let tone = sample_skin_tone(&mut rng);
    Ok(skin_background(&mut rng, config, tone))
}

/// Non-skin scene: checkerboard, linear gradient, or random noise patches.
pub fn generate_no_skin_scene(seed: u64, config: &SceneConfig) -> Result<ImageTensor> {
    config.validate()?;
    let mut rng = stream(seed, "no_skin", 0);
    let res = config.resolution;
    let mut img = ImageTensor::filled(res, [0.0, 0.0, 0.0]);
    match rng.gen_range(0..3u8) {
        0 => {
            // Checkerboard in two random non-skin colors.
            let cell = rng.gen_range(4..=16usize);
            let a = [rng.gen_range(0.0..0.4), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
            let b = [rng.gen_range(0.6..1.0), rng.gen_range(0.0..0.5), rng.gen_range(0.5..1.0)];
            for r in 0..res {
                for c in 0..res {
                    let on = ((r / cell) + (c / cell)) % 2 == 0;
                    img.set(r, c, if on { a } else { b });
                }
            }
        }
        1 => {
            // Diagonal gradient between two random colors.
            let a: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let b: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
            for r in 0..res {
                for c in 0..res {
                    let t = (r + c) as f32 / (2 * (res - 1)) as f32;
                    let mut px = [0.0; 3];
                    for ch in 0..3 {
                        px[ch] = (1.0 - t) * a[ch] + t * b[ch];
                    }
                    img.set(r, c, px);
                }
            }
        }
        _ => {
            // Random noise patches over a gray base.
            for r in 0..res {
                for c in 0..res {
                    img.set(r, c, [rng.gen(), rng.gen(), rng.gen()]);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic_per_seed() {
        let config = SceneConfig::default();
        let (a, ma) = generate_scene(7, &config).unwrap();
        let (b, mb) = generate_scene(7, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn different_seeds_differ_in_at_least_one_percent_of_pixels() {
        let config = SceneConfig::default();
        let (a, _) = generate_scene(7, &config).unwrap();
        let (b, _) = generate_scene(8, &config).unwrap();
        assert!(a.fraction_differing(&b) >= 0.01);
    }

    #[test]
    fn all_values_in_unit_range() {
        let config = SceneConfig::default();
        for seed in 0..5 {
            let (img, _) = generate_scene(seed, &config).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let ns = generate_no_skin_scene(seed, &config).unwrap();
            assert!(ns.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn lesion_fully_inside_frame() {
        let config = SceneConfig::default();
        for seed in 0..10 {
            let (_, meta) = generate_scene(seed, &config).unwrap();
            let res = config.resolution as f32;
            assert!(meta.lesion_radius >= 4.0);
            assert!(meta.lesion_center.0 - meta.lesion_radius >= 0.0);
            assert!(meta.lesion_center.1 - meta.lesion_radius >= 0.0);
            assert!(meta.lesion_center.0 + meta.lesion_radius <= res);
            assert!(meta.lesion_center.1 + meta.lesion_radius <= res);
        }
    }

    #[test]
    fn invalid_resolution_is_config_error() {
        let config = SceneConfig {
            resolution: 16,
            ..Default::default()
        };
        assert!(generate_scene(1, &config).is_err());
    }

    #[test]
    fn lesion_contrast_clears_minimum() {
        let config = SceneConfig::default();
        for seed in 0..10 {
            let (_, meta) = generate_scene(seed, &config).unwrap();
            let contrast = (0..3)
                .map(|c| (meta.background_tone[c] - meta.lesion_tone[c]).abs())
                .sum::<f32>()
                / 3.0;
            assert!(contrast >= config.min_contrast);
        }
    }
}
