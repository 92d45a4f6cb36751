//! Gradient-weighted attention maps: which image regions drove a given
//! quality class or explanation logit. Channel weights are the spatial means
//! of the logit's gradient on a convolutional feature map; the weighted sum
//! is rectified, upsampled to the input resolution, and max-normalized.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageTensor;
use crate::error::{Error, Result};
use crate::network::{Mode, Model, Scalar};
use crate::types::{ExplanationKind, QualityClass};

/// What an attention map explains: one quality logit or one explanation logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainTarget {
    Quality(QualityClass),
    Explanation(ExplanationKind),
}

impl ExplainTarget {
    pub fn name(&self) -> &'static str {
        match self {
            ExplainTarget::Quality(c) => c.name(),
            ExplainTarget::Explanation(k) => k.name(),
        }
    }

    /// Parse either a quality class or an explanation name.
    pub fn parse(s: &str) -> Result<Self> {
        QualityClass::parse(s)
            .map(ExplainTarget::Quality)
            .or_else(|_| ExplanationKind::parse(s).map(ExplainTarget::Explanation))
            .map_err(|_| {
                Error::Argument(format!(
                    "unknown explanation target `{s}` (expected a quality class or explanation name)"
                ))
            })
    }
}

/// Normalized attention map at input resolution. All values lie in [0,1];
/// the maximum is exactly 1 unless the rectified raw map was identically
/// zero, in which case all values are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array2<f32>,
    pub target: ExplainTarget,
    /// Backbone stage index whose feature map was used.
    pub layer: usize,
}

/// Bilinear upsample with corner alignment: output corners sample input
/// corners exactly.
fn upsample_bilinear(map: &Array2<f64>, out_side: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let scale_y = (h - 1) as f64 / (out_side - 1).max(1) as f64;
    let scale_x = (w - 1) as f64 / (out_side - 1).max(1) as f64;
    Array2::from_shape_fn((out_side, out_side), |(oy, ox)| {
        let fy = oy as f64 * scale_y;
        let fx = ox as f64 * scale_x;
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        map[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + map[[y0, x1]] * (1.0 - dy) * dx
            + map[[y1, x0]] * dy * (1.0 - dx)
            + map[[y1, x1]] * dy * dx
    })
}

/// Channel weights and raw map from a feature map `a` and its gradient `da`,
/// both `(K, h, w)` views for one image: `alpha_k = mean(da_k)`,
/// `raw = relu(sum_k alpha_k * a_k)`.
fn weighted_map<F: Scalar>(
    a: &ndarray::ArrayView3<F>,
    da: &ndarray::ArrayView3<F>,
) -> Array2<f64> {
    let (k, h, w) = a.dim();
    let area = (h * w) as f64;
    let mut raw = Array2::<f64>::zeros((h, w));
    for ki in 0..k {
        let alpha = da.index_axis(ndarray::Axis(0), ki).sum().to_f64() / area;
        let ak = a.index_axis(ndarray::Axis(0), ki);
        for y in 0..h {
            for x in 0..w {
                raw[[y, x]] += alpha * ak[[y, x]].to_f64();
            }
        }
    }
    raw.mapv_inplace(|v| v.max(0.0));
    raw
}

/// Compute the attention map for `target` on backbone stage `layer`
/// (eval-mode forward, gradients of the pre-softmax/pre-sigmoid logit).
pub fn grad_cam<F: Scalar>(
    model: &Model<F>,
    image: &ImageTensor,
    target: ExplainTarget,
    layer: usize,
) -> Result<AttentionMap> {
    if layer >= model.stages.len() {
        return Err(Error::Argument(format!(
            "layer {layer} out of range; model has {} convolutional stages",
            model.stages.len()
        )));
    }
    let side = model.config.spatial_after(layer + 1);
    if side < 2 {
        return Err(Error::Argument(format!(
            "stage {layer} feature map is {side}x{side}; attention needs at least 2x2"
        )));
    }

    let x = crate::network::image_batch::<F>(std::slice::from_ref(image))?;
    let (q_logits, e_logits, trace) = model.forward_batch(&x, Mode::Eval, 0)?;

    let mut d_qual = Array2::<F>::zeros(q_logits.raw_dim());
    let mut d_expl = Array2::<F>::zeros(e_logits.raw_dim());
    match target {
        ExplainTarget::Quality(c) => d_qual[[0, c.index()]] = F::one(),
        ExplainTarget::Explanation(k) => d_expl[[0, k.index()]] = F::one(),
    }
    let mut grads = model.zero_grads();
    let act_grads = model.backward(&trace, &d_qual, &d_expl, &mut grads);

    let a = trace.activations[layer].index_axis(ndarray::Axis(0), 0);
    let da = act_grads.per_stage[layer].index_axis(ndarray::Axis(0), 0);
    let raw = weighted_map(&a, &da);
    let up = upsample_bilinear(&raw, model.config.resolution);

    let max = up.fold(0.0f64, |m, &v| m.max(v));
    let values = if max > 0.0 {
        up.mapv(|v| (v / max) as f32)
    } else {
        Array2::zeros(up.raw_dim())
    };
    Ok(AttentionMap {
        values,
        target,
        layer,
    })
}

/// Overlay colormap: blue at 0 through red at 1.
pub fn colormap(v: f32) -> [f32; 3] {
    [v, 0.0, 1.0 - v]
}

/// Output paths for [`export_map`]: `<stem>.<target>.cam.png` and
/// `<stem>.<target>.overlay.png` next to `image_path`.
pub fn map_paths(image_path: &Path, target: ExplainTarget) -> (PathBuf, PathBuf) {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let dir = image_path.parent().unwrap_or_else(|| Path::new("."));
    (
        dir.join(format!("{stem}.{}.cam.png", target.name())),
        dir.join(format!("{stem}.{}.overlay.png", target.name())),
    )
}

/// Write the map as 8-bit grayscale plus a 0.5-opacity colormap overlay on
/// the base image.
pub fn export_map(map: &AttentionMap, base: &ImageTensor, image_path: &Path) -> Result<()> {
    let res = base.resolution();
    if map.values.dim() != (res, res) {
        return Err(Error::Argument(format!(
            "attention map is {:?} but image is {res}x{res}",
            map.values.dim()
        )));
    }
    let (cam_path, overlay_path) = map_paths(image_path, map.target);

    let mut gray = image::GrayImage::new(res as u32, res as u32);
    for (y, x) in grid(res) {
        let v = (map.values[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
        gray.put_pixel(x as u32, y as u32, image::Luma([v]));
    }
    gray.save(&cam_path).map_err(|e| Error::Io {
        path: cam_path.clone(),
        source: std::io::Error::other(e),
    })?;

    let mut overlay = ImageTensor::filled(res, [0.0; 3]);
    for (y, x) in grid(res) {
        let tint = colormap(map.values[[y, x]]);
        let px = base.get(y, x);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            out[c] = 0.5 * px[c] + 0.5 * tint[c];
        }
        overlay.set(y, x, out);
    }
    overlay.save_png(&overlay_path)
}

fn grid(res: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..res).flat_map(move |y| (0..res).map(move |x| (y, x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, BackboneConfig, ModelConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array3};
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            resolution: 32,
            backbone: BackboneConfig {
                stage_widths: vec![4, 6],
                strides: vec![2, 2],
            },
            hidden_units: 8,
            dropout: 0.2,
        }
    }

    fn random_image(seed: u64, res: usize) -> ImageTensor {
        let mut rng = crate::rng::stream(seed, "explain-test", 0);
        ImageTensor::from_array(Array3::from_shape_fn((3, res, res), |_| {
            rng.gen_range(0.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn map_is_normalized_and_at_input_resolution() {
        let model: Model<f64> = init_params(3, &tiny_config()).unwrap();
        let img = random_image(1, 32);
        for target in [
            ExplainTarget::Quality(QualityClass::PoorQuality),
            ExplainTarget::Explanation(ExplanationKind::Blurry),
        ] {
            let map = grad_cam(&model, &img, target, 1).unwrap();
            assert_eq!(map.values.dim(), (32, 32));
            assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = map.values.fold(0.0f32, |m, &v| m.max(v));
            assert!(max == 1.0 || max == 0.0, "max {max}");
        }
    }

    #[test]
    fn mean_logit_oracle_recovers_the_feature_map() {
        // alpha = mean-gradient of a mean is uniformly 1/Z, so the raw map is
        // (1/Z) * sum_k A^k; normalized, it equals the normalized rectified
        // channel sum of the activations.
        let model: Model<f64> = init_params(9, &tiny_config()).unwrap();
        let img = random_image(2, 32);
        let x = crate::network::image_batch::<f64>(std::slice::from_ref(&img)).unwrap();
        let (_, _, trace) = model.forward_batch(&x, Mode::Eval, 0).unwrap();

        let a = trace.activations[1].index_axis(ndarray::Axis(0), 0);
        let (k, h, w) = a.dim();
        let z = (h * w) as f64;
        let da = ndarray::Array3::from_elem((k, h, w), 1.0 / z);
        let raw = weighted_map(&a.view(), &da.view());

        let mut expect = Array2::<f64>::zeros((h, w));
        for ki in 0..k {
            expect = expect + &a.index_axis(ndarray::Axis(0), ki).mapv(|v| v / z);
        }
        expect.mapv_inplace(|v| v.max(0.0));
        for (r, e) in raw.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(r, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        // Perturb one activation cell of the chosen stage and verify the
        // logit moves by grad * h. Uses the linear blocks downstream of the
        // pooled feature, re-run by hand.
        let model: Model<f64> = init_params(5, &tiny_config()).unwrap();
        let img = random_image(3, 32);
        let x = crate::network::image_batch::<f64>(std::slice::from_ref(&img)).unwrap();
        let (q_logits, e_logits, trace) = model.forward_batch(&x, Mode::Eval, 0).unwrap();

        let target = QualityClass::NoSkin;
        let mut d_qual = Array2::<f64>::zeros(q_logits.raw_dim());
        d_qual[[0, target.index()]] = 1.0;
        let d_expl = Array2::<f64>::zeros(e_logits.raw_dim());
        let mut grads = model.zero_grads();
        let act_grads = model.backward(&trace, &d_qual, &d_expl, &mut grads);

        // Finite differences through the post-pool path: replace the stage-1
        // activation, re-pool, re-run the heads.
        let logit_from_activation = |act: &ndarray::Array4<f64>| -> f64 {
            let (_, feat, fh, fw) = act.dim();
            let mut pooled = Array2::<f64>::zeros((1, feat));
            for ci in 0..feat {
                pooled[[0, ci]] = act.index_axis(ndarray::Axis(0), 0)
                    .index_axis(ndarray::Axis(0), ci)
                    .sum()
                    / (fh * fw) as f64;
            }
            let mut unused = crate::rng::stream(0, "unused", 0);
            let (eb, _) = model.expl_block.forward(&pooled, Mode::Eval, &mut unused);
            let (elog, _) = model.expl_head.forward(&eb);
            let eprob = elog.mapv(crate::network::layers::sigmoid);
            let (qb, _) = model.qual_block.forward(&pooled, Mode::Eval, &mut unused);
            let mut cat = Array2::<f64>::zeros((1, qb.dim().1 + 5));
            cat.slice_mut(ndarray::s![.., ..qb.dim().1]).assign(&qb);
            cat.slice_mut(ndarray::s![.., qb.dim().1..]).assign(&eprob);
            let (qlog, _) = model.qual_head.forward(&cat);
            qlog[[0, target.index()]]
        };

        let h = 1e-5;
        let last = trace.activations.last().unwrap();
        for idx in [(0usize, 0usize, 1usize, 1usize), (0, 3, 4, 2), (0, 5, 0, 7)] {
            let mut lo = last.clone();
            lo[idx] -= h;
            let mut hi = last.clone();
            hi[idx] += h;
            let fd = (logit_from_activation(&hi) - logit_from_activation(&lo)) / (2.0 * h);
            let a = act_grads.per_stage[1][idx];
            assert_abs_diff_eq!(fd, a, epsilon = 1e-6 + 1e-4 * a.abs());
        }
    }

    #[test]
    fn scaling_head_weights_leaves_the_normalized_map_unchanged() {
        let model: Model<f64> = init_params(11, &tiny_config()).unwrap();
        let img = random_image(4, 32);
        let target = ExplainTarget::Explanation(ExplanationKind::LowResolution);
        let base = grad_cam(&model, &img, target, 1).unwrap();

        let mut scaled = model.clone();
        scaled.expl_head.weight.mapv_inplace(|w| w * 3.0);
        scaled.expl_head.bias.mapv_inplace(|b| b * 3.0);
        let map = grad_cam(&scaled, &img, target, 1).unwrap();
        for (a, b) in base.values.iter().zip(map.values.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
    }

    #[test]
    fn upsampling_interpolates_between_corner_values() {
        let map = arr2(&[[0.0, 1.0], [0.0, 1.0]]);
        let up = upsample_bilinear(&map, 5);
        assert_eq!(up.dim(), (5, 5));
        assert_abs_diff_eq!(up[[0, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(up[[4, 4]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(up[[2, 2]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn invalid_layer_is_an_argument_error() {
        let model: Model<f64> = init_params(1, &tiny_config()).unwrap();
        let img = random_image(5, 32);
        let target = ExplainTarget::Quality(QualityClass::Lesion);
        assert!(grad_cam(&model, &img, target, 7).is_err());
    }

    #[test]
    fn export_writes_both_files_and_round_trips_within_quantization() {
        let model: Model<f64> = init_params(2, &tiny_config()).unwrap();
        let img = random_image(6, 32);
        let map = grad_cam(
            &model,
            &img,
            ExplainTarget::Quality(QualityClass::PoorQuality),
            1,
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let image_path = dir.path().join("sample.png");
        export_map(&map, &img, &image_path).unwrap();
        let (cam_path, overlay_path) = map_paths(&image_path, map.target);
        assert!(cam_path.ends_with("sample.poor_quality.cam.png"));
        assert!(overlay_path.exists());

        let reread = image::open(&cam_path).unwrap().to_luma8();
        for (y, x) in grid(32) {
            let v = reread.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0;
            assert!((v - map.values[[y, x]]).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn zero_map_overlay_is_half_base_half_blue() {
        let img = random_image(7, 32);
        let map = AttentionMap {
            values: Array2::zeros((32, 32)),
            target: ExplainTarget::Explanation(ExplanationKind::BadFraming),
            layer: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let image_path = dir.path().join("zero.png");
        export_map(&map, &img, &image_path).unwrap();
        let (_, overlay_path) = map_paths(&image_path, map.target);
        let overlay = ImageTensor::load_png(&overlay_path).unwrap();
        // colormap(0) = pure blue; blend = 0.5*base + 0.5*(0,0,1).
        let base_px = img.get(3, 3);
        let got = overlay.get(3, 3);
        for c in 0..3 {
            let expect = 0.5 * base_px[c] + 0.5 * if c == 2 { 1.0 } else { 0.0 };
            assert!((got[c] - expect).abs() < 2.0 / 255.0);
        }
    }

    #[test]
    fn target_parsing_covers_both_kinds() {
        assert_eq!(
            ExplainTarget::parse("blurry").unwrap(),
            ExplainTarget::Explanation(ExplanationKind::Blurry)
        );
        assert_eq!(
            ExplainTarget::parse("poor_quality").unwrap(),
            ExplainTarget::Quality(QualityClass::PoorQuality)
        );
        assert!(ExplainTarget::parse("nonsense").is_err());
    }
}
