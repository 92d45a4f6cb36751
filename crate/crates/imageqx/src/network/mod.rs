//! The two-headed quality classifier: a convolutional feature extractor,
//! one linear block + head for poor-quality explanations, and a second linear
//! block whose output is concatenated with the explanation probabilities
//! before the quality head.

pub mod layers;
pub mod serial;

use ndarray::{s, Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

pub use layers::Scalar;
pub use serial::{load_model, save_model, SizeReport};

use layers::{
    dropout_mask, silu, silu_derivative, BatchNorm, Bn1dCache, Bn2dCache, BnGrads, Conv2d,
    ConvCache, ConvGrads, Linear, LinearCache, LinearGrads,
};

use crate::corpus::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::types::{ExplanationKind, ExplanationSet, QualityClass};

pub const QUALITY_CLASSES: usize = QualityClass::COUNT;
pub const EXPLANATIONS: usize = ExplanationKind::COUNT;

/// Convolutional stack shape: one 3x3 conv + batchnorm + SiLU stage per
/// entry, downsampling by the stage stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Small CPU-friendly stack: three stride-2 stages, 48 pooled features.
    pub fn desk() -> Self {
        Self {
            stage_widths: vec![12, 24, 48],
            strides: vec![2, 2, 2],
        }
    }

    /// Parameter count comparable to EfficientNet-B0's body (~4M), used for
    /// the model-size report.
    pub fn b0_equivalent() -> Self {
        Self {
            stage_widths: vec![32, 64, 128, 256, 512, 512],
            strides: vec![2, 2, 2, 2, 2, 1],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "b0-equivalent" => Ok(Self::b0_equivalent()),
            other => Err(Error::Config(format!(
                "unknown backbone preset `{other}` (expected `desk` or `b0-equivalent`)"
            ))),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.stage_widths.last().unwrap_or(&0)
    }
}

/// Full network shape: backbone plus head sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub backbone: BackboneConfig,
    pub hidden_units: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            backbone: BackboneConfig::desk(),
            hidden_units: 64,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.stage_widths.len() < 2 {
            return Err(Error::Config("backbone needs at least 2 stages".into()));
        }
        if b.stage_widths.len() != b.strides.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} strides",
                b.stage_widths.len(),
                b.strides.len()
            )));
        }
        if b.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if b.strides.iter().any(|&st| st == 0 || st > 4) {
            return Err(Error::Config("strides must be in 1..=4".into()));
        }
        if self.hidden_units == 0 {
            return Err(Error::Config("hidden_units must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0,1)".into()));
        }
        if self.final_spatial() < 4 {
            return Err(Error::Config(format!(
                "final feature map is {0}x{0}; needs to be at least 4x4",
                self.final_spatial()
            )));
        }
        Ok(())
    }

    /// Side length of the final convolutional feature map.
    pub fn final_spatial(&self) -> usize {
        let mut side = self.resolution;
        for &stride in &self.backbone.strides {
            side = (side - 1) / stride + 1;
        }
        side
    }

    /// Spatial side after `n` stages.
    pub fn spatial_after(&self, n: usize) -> usize {
        let mut side = self.resolution;
        for &stride in &self.backbone.strides[..n] {
            side = (side - 1) / stride + 1;
        }
        side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ConvStage<F> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm<F>,
}

/// Linear block from the architecture diagram: linear layer, batch
/// normalization, dropout.
#[derive(Debug, Clone)]
pub struct LinearBlock<F> {
    pub linear: Linear<F>,
    pub bn: BatchNorm<F>,
    pub dropout: f64,
}

pub struct BlockCache<F> {
    linear: LinearCache<F>,
    bn: Bn1dCache<F>,
    mask: Option<Array2<F>>,
}

pub struct BlockGrads<F> {
    pub linear: LinearGrads<F>,
    pub bn: BnGrads<F>,
}

impl<F: Scalar> LinearBlock<F> {
    pub(crate) fn forward(
        &self,
        x: &Array2<F>,
        mode: Mode,
        dropout_rng: &mut rand_chacha::ChaCha12Rng,
    ) -> (Array2<F>, BlockCache<F>) {
        let (y, linear) = self.linear.forward(x);
        let (y, bn) = self.bn.forward_1d(&y, mode == Mode::Train);
        let (y, mask) = if mode == Mode::Train && self.dropout > 0.0 {
            let mask = dropout_mask::<F>(dropout_rng, y.dim(), self.dropout);
            (&y * &mask, Some(mask))
        } else {
            (y, None)
        };
        (y, BlockCache { linear, bn, mask })
    }

    fn backward(&self, cache: &BlockCache<F>, dy: &Array2<F>, grads: &mut BlockGrads<F>) -> Array2<F> {
        let dy = match &cache.mask {
            Some(mask) => dy * mask,
            None => dy.clone(),
        };
        let dy = self.bn.backward_1d(&cache.bn, &dy, &mut grads.bn);
        self.linear.backward(&cache.linear, &dy, &mut grads.linear)
    }
}

/// All learnable parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub stages: Vec<ConvStage<F>>,
    pub expl_block: LinearBlock<F>,
    pub expl_head: Linear<F>,
    pub qual_block: LinearBlock<F>,
    pub qual_head: Linear<F>,
}

/// Gradient buffers mirroring [`Model`]'s trainable parameters.
pub struct ModelGrads<F> {
    pub stages: Vec<(ConvGrads<F>, BnGrads<F>)>,
    pub expl_block: BlockGrads<F>,
    pub expl_head: LinearGrads<F>,
    pub qual_block: BlockGrads<F>,
    pub qual_head: LinearGrads<F>,
}

/// Cached activations from one forward pass: enough for exact gradients and
/// Grad-CAM.
pub struct ForwardTrace<F> {
    pub mode: Mode,
    conv_caches: Vec<ConvCache<F>>,
    bn_caches: Vec<Bn2dCache<F>>,
    /// Batch-norm output, pre-SiLU, per stage.
    pre_activations: Vec<Array4<F>>,
    /// Post-SiLU feature maps per stage; the Grad-CAM activation maps.
    pub activations: Vec<Array4<F>>,
    pub pooled: Array2<F>,
    expl_block: BlockCache<F>,
    expl_head: LinearCache<F>,
    pub expl_logits: Array2<F>,
    pub expl_probs: Array2<F>,
    qual_block: BlockCache<F>,
    qual_head: LinearCache<F>,
    pub qual_logits: Array2<F>,
}

/// Gradients with respect to each stage's post-activation feature map,
/// captured during backward for Grad-CAM.
pub struct ActivationGrads<F> {
    pub per_stage: Vec<Array4<F>>,
}

/// Deterministic fan-in-scaled initialization. Affine weights are uniform
/// with variance `2/fan_in`; batch-norm starts at identity.
pub fn init_params<F: Scalar>(seed: u64, config: &ModelConfig) -> Result<Model<F>> {
    config.validate()?;
    let mut rng = stream(seed, "init", 0);
    let mut stages = Vec::new();
    let mut in_ch = 3;
    for (&width, &stride) in config.backbone.stage_widths.iter().zip(&config.backbone.strides) {
        stages.push(ConvStage {
            conv: Conv2d::init(&mut rng, in_ch, width, stride),
            bn: BatchNorm::init(width),
        });
        in_ch = width;
    }
    let feature_dim = config.backbone.feature_dim();
    let hidden = config.hidden_units;
    Ok(Model {
        config: config.clone(),
        stages,
        expl_block: LinearBlock {
            linear: Linear::init(&mut rng, feature_dim, hidden),
            bn: BatchNorm::init(hidden),
            dropout: config.dropout,
        },
        expl_head: Linear::init(&mut rng, hidden, EXPLANATIONS),
        qual_block: LinearBlock {
            linear: Linear::init(&mut rng, feature_dim, hidden),
            bn: BatchNorm::init(hidden),
            dropout: config.dropout,
        },
        qual_head: Linear::init(&mut rng, hidden + EXPLANATIONS, QUALITY_CLASSES),
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| if b > a { b } else { a });
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<F: Scalar> Model<F> {
    pub fn zero_grads(&self) -> ModelGrads<F> {
        ModelGrads {
            stages: self
                .stages
                .iter()
                .map(|st| (st.conv.zero_grads(), st.bn.zero_grads()))
                .collect(),
            expl_block: BlockGrads {
                linear: self.expl_block.linear.zero_grads(),
                bn: self.expl_block.bn.zero_grads(),
            },
            expl_head: self.expl_head.zero_grads(),
            qual_block: BlockGrads {
                linear: self.qual_block.linear.zero_grads(),
                bn: self.qual_block.bn.zero_grads(),
            },
            qual_head: self.qual_head.zero_grads(),
        }
    }

    /// Forward a batch `(N, 3, res, res)`. Train mode normalizes with batch
    /// statistics and applies dropout seeded by `dropout_seed`; eval mode
    /// uses running statistics and no dropout. Running statistics are not
    /// mutated here; see [`Model::update_running_stats`].
    pub fn forward_batch(
        &self,
        x: &Array4<F>,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(Array2<F>, Array2<F>, ForwardTrace<F>)> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.config.resolution || w != self.config.resolution {
            return Err(Error::Argument(format!(
                "input shape {c}x{h}x{w} does not match configured 3x{0}x{0}",
                self.config.resolution
            )));
        }
        let train = mode == Mode::Train;

        let mut conv_caches = Vec::with_capacity(self.stages.len());
        let mut bn_caches = Vec::with_capacity(self.stages.len());
        let mut pre_activations = Vec::with_capacity(self.stages.len());
        let mut activations = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            let (y, conv_cache) = stage.conv.forward(&h);
            let (y, bn_cache) = stage.bn.forward_2d(&y, train);
            let act = y.mapv(silu);
            conv_caches.push(conv_cache);
            bn_caches.push(bn_cache);
            pre_activations.push(y);
            activations.push(act.clone());
            h = act;
        }

        let (n, feat, fh, fw) = h.dim();
        let area = F::from_f64((fh * fw) as f64);
        let mut pooled = Array2::<F>::zeros((n, feat));
        for ni in 0..n {
            for ci in 0..feat {
                pooled[[ni, ci]] = h.slice(s![ni, ci, .., ..]).sum() / area;
            }
        }

        let mut expl_rng = stream(dropout_seed, "dropout-expl", 0);
        let mut qual_rng = stream(dropout_seed, "dropout-qual", 0);
        let (eb, expl_block) = self.expl_block.forward(&pooled, mode, &mut expl_rng);
        let (expl_logits, expl_head) = self.expl_head.forward(&eb);
        let expl_probs = expl_logits.mapv(layers::sigmoid);

        let (qb, qual_block) = self.qual_block.forward(&pooled, mode, &mut qual_rng);
        let mut cat = Array2::<F>::zeros((n, qb.dim().1 + EXPLANATIONS));
        cat.slice_mut(s![.., ..qb.dim().1]).assign(&qb);
        cat.slice_mut(s![.., qb.dim().1..]).assign(&expl_probs);
        let (qual_logits, qual_head) = self.qual_head.forward(&cat);

        let trace = ForwardTrace {
            mode,
            conv_caches,
            bn_caches,
            pre_activations,
            activations,
            pooled,
            expl_block,
            expl_head,
            expl_logits: expl_logits.clone(),
            expl_probs,
            qual_block,
            qual_head,
            qual_logits: qual_logits.clone(),
        };
        Ok((qual_logits, expl_logits, trace))
    }

    /// Single-image forward, per the module contract.
    pub fn forward(
        &self,
        image: &ImageTensor,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(Array1<F>, Array1<F>, ForwardTrace<F>)> {
        let x = image_batch(std::slice::from_ref(image))?;
        let (q, e, trace) = self.forward_batch(&x, mode, dropout_seed)?;
        Ok((q.row(0).to_owned(), e.row(0).to_owned(), trace))
    }

    /// Fold the batch statistics captured in `trace` into the running
    /// estimates (train-mode traces only).
    pub fn update_running_stats(&mut self, trace: &ForwardTrace<F>) {
        if trace.mode != Mode::Train {
            return;
        }
        for (stage, cache) in self.stages.iter_mut().zip(&trace.bn_caches) {
            stage.bn.update_running(&cache.batch_mean, &cache.batch_var);
        }
        self.expl_block
            .bn
            .update_running(&trace.expl_block.bn.batch_mean, &trace.expl_block.bn.batch_var);
        self.qual_block
            .bn
            .update_running(&trace.qual_block.bn.batch_mean, &trace.qual_block.bn.batch_var);
    }

    /// Backpropagate output-logit gradients through the whole network.
    /// `d_expl_logits` is the direct gradient on the explanation logits; the
    /// indirect path through the quality head's concatenated probabilities is
    /// added internally. Returns per-stage activation gradients for Grad-CAM.
    pub fn backward(
        &self,
        trace: &ForwardTrace<F>,
        d_qual_logits: &Array2<F>,
        d_expl_logits: &Array2<F>,
        grads: &mut ModelGrads<F>,
    ) -> ActivationGrads<F> {
        let hidden = self.config.hidden_units;

        let d_cat = self
            .qual_head
            .backward(&trace.qual_head, d_qual_logits, &mut grads.qual_head);
        let d_qb = d_cat.slice(s![.., ..hidden]).to_owned();
        let d_eprobs = d_cat.slice(s![.., hidden..]).to_owned();

        let d_pooled_q = self
            .qual_block
            .backward(&trace.qual_block, &d_qb, &mut grads.qual_block);

        // Total gradient on explanation logits: direct head gradient plus the
        // concatenation path through sigmoid.
        let sig_grad = trace.expl_probs.mapv(|p| p * (F::one() - p));
        let d_elogits = d_expl_logits + &(&d_eprobs * &sig_grad);
        let d_eb = self
            .expl_head
            .backward(&trace.expl_head, &d_elogits, &mut grads.expl_head);
        let d_pooled_e = self
            .expl_block
            .backward(&trace.expl_block, &d_eb, &mut grads.expl_block);

        let d_pooled = &d_pooled_q + &d_pooled_e;

        // Global average pool backward.
        let last = trace.activations.last().unwrap();
        let (n, feat, fh, fw) = last.dim();
        let area = F::from_f64((fh * fw) as f64);
        let mut d_act = Array4::<F>::zeros((n, feat, fh, fw));
        for ni in 0..n {
            for ci in 0..feat {
                let g = d_pooled[[ni, ci]] / area;
                d_act.slice_mut(s![ni, ci, .., ..]).fill(g);
            }
        }

        let mut per_stage: Vec<Array4<F>> = vec![Array4::zeros((0, 0, 0, 0)); self.stages.len()];
        for (i, stage) in self.stages.iter().enumerate().rev() {
            per_stage[i] = d_act.clone();
            let d_pre = &d_act * &trace.pre_activations[i].mapv(silu_derivative);
            let (conv_grads, bn_grads) = &mut grads.stages[i];
            let d_conv_out = stage.bn.backward_2d(&trace.bn_caches[i], &d_pre, bn_grads);
            d_act = stage.conv.backward(&trace.conv_caches[i], &d_conv_out, conv_grads);
        }

        ActivationGrads { per_stage }
    }

    /// Eval-mode prediction: softmax argmax for quality (ties break toward
    /// the lowest canonical index), thresholded sigmoids for explanations.
    pub fn predict(
        &self,
        image: &ImageTensor,
        thresholds: [f64; EXPLANATIONS],
    ) -> Result<(QualityClass, ExplanationSet)> {
        let (q, e, _) = self.forward(image, Mode::Eval, 0)?;
        let probs = softmax(&q.insert_axis(Axis(0)));
        let mut qp = [0.0f64; QUALITY_CLASSES];
        for i in 0..QUALITY_CLASSES {
            qp[i] = probs[[0, i]].to_f64();
        }
        let quality = crate::metrics::predict_quality(&qp);
        let explanations = ExplanationKind::ALL
            .into_iter()
            .filter(|k| layers::sigmoid(e[k.index()]).to_f64() >= thresholds[k.index()])
            .collect();
        Ok((quality, explanations))
    }

    /// Trainable parameter slices paired with names, in canonical order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.stages.len() {
            names.push(format!("stage{i}.conv.weight"));
            names.push(format!("stage{i}.conv.bias"));
            names.push(format!("stage{i}.bn.gamma"));
            names.push(format!("stage{i}.bn.beta"));
        }
        for block in ["expl_block", "qual_block"] {
            names.push(format!("{block}.linear.weight"));
            names.push(format!("{block}.linear.bias"));
            names.push(format!("{block}.bn.gamma"));
            names.push(format!("{block}.bn.beta"));
        }
        // Heads interleave after their blocks in canonical order.
        names.insert(4 * self.stages.len() + 4, "expl_head.weight".into());
        names.insert(4 * self.stages.len() + 5, "expl_head.bias".into());
        names.push("qual_head.weight".into());
        names.push("qual_head.bias".into());
        names
    }

    /// Immutable views of trainable parameters in canonical order.
    pub fn trainable_slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for st in &self.stages {
            out.push(st.conv.weight.as_slice().unwrap());
            out.push(st.conv.bias.as_slice().unwrap());
            out.push(st.bn.gamma.as_slice().unwrap());
            out.push(st.bn.beta.as_slice().unwrap());
        }
        for (block, head) in [(&self.expl_block, &self.expl_head), (&self.qual_block, &self.qual_head)] {
            out.push(block.linear.weight.as_slice().unwrap());
            out.push(block.linear.bias.as_slice().unwrap());
            out.push(block.bn.gamma.as_slice().unwrap());
            out.push(block.bn.beta.as_slice().unwrap());
            out.push(head.weight.as_slice().unwrap());
            out.push(head.bias.as_slice().unwrap());
        }
        out
    }

    /// Mutable views of trainable parameters in canonical order.
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for st in &mut self.stages {
            out.push(st.conv.weight.as_slice_mut().unwrap());
            out.push(st.conv.bias.as_slice_mut().unwrap());
            out.push(st.bn.gamma.as_slice_mut().unwrap());
            out.push(st.bn.beta.as_slice_mut().unwrap());
        }
        for (block, head) in [
            (&mut self.expl_block, &mut self.expl_head),
            (&mut self.qual_block, &mut self.qual_head),
        ] {
            out.push(block.linear.weight.as_slice_mut().unwrap());
            out.push(block.linear.bias.as_slice_mut().unwrap());
            out.push(block.bn.gamma.as_slice_mut().unwrap());
            out.push(block.bn.beta.as_slice_mut().unwrap());
            out.push(head.weight.as_slice_mut().unwrap());
            out.push(head.bias.as_slice_mut().unwrap());
        }
        out
    }

    /// All serialized tensors (trainable + batch-norm running statistics) in
    /// canonical file order.
    pub fn all_slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for st in &self.stages {
            out.push(st.conv.weight.as_slice().unwrap());
            out.push(st.conv.bias.as_slice().unwrap());
            out.push(st.bn.gamma.as_slice().unwrap());
            out.push(st.bn.beta.as_slice().unwrap());
            out.push(st.bn.running_mean.as_slice().unwrap());
            out.push(st.bn.running_var.as_slice().unwrap());
        }
        for (block, head) in [(&self.expl_block, &self.expl_head), (&self.qual_block, &self.qual_head)] {
            out.push(block.linear.weight.as_slice().unwrap());
            out.push(block.linear.bias.as_slice().unwrap());
            out.push(block.bn.gamma.as_slice().unwrap());
            out.push(block.bn.beta.as_slice().unwrap());
            out.push(block.bn.running_mean.as_slice().unwrap());
            out.push(block.bn.running_var.as_slice().unwrap());
            out.push(head.weight.as_slice().unwrap());
            out.push(head.bias.as_slice().unwrap());
        }
        out
    }

    pub fn all_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        for st in &mut self.stages {
            out.push(st.conv.weight.as_slice_mut().unwrap());
            out.push(st.conv.bias.as_slice_mut().unwrap());
            out.push(st.bn.gamma.as_slice_mut().unwrap());
            out.push(st.bn.beta.as_slice_mut().unwrap());
            out.push(st.bn.running_mean.as_slice_mut().unwrap());
            out.push(st.bn.running_var.as_slice_mut().unwrap());
        }
        for (block, head) in [
            (&mut self.expl_block, &mut self.expl_head),
            (&mut self.qual_block, &mut self.qual_head),
        ] {
            out.push(block.linear.weight.as_slice_mut().unwrap());
            out.push(block.linear.bias.as_slice_mut().unwrap());
            out.push(block.bn.gamma.as_slice_mut().unwrap());
            out.push(block.bn.beta.as_slice_mut().unwrap());
            out.push(block.bn.running_mean.as_slice_mut().unwrap());
            out.push(block.bn.running_var.as_slice_mut().unwrap());
            out.push(head.weight.as_slice_mut().unwrap());
            out.push(head.bias.as_slice_mut().unwrap());
        }
        out
    }

    /// Number of serialized parameters (trainable + running statistics).
    pub fn param_count(&self) -> usize {
        self.all_slices().iter().map(|slice| slice.len()).sum()
    }
}

impl<F: Scalar> ModelGrads<F> {
    /// Gradient slices in the same canonical order as
    /// [`Model::trainable_slices`].
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for (conv, bn) in &self.stages {
            out.push(conv.weight.as_slice().unwrap());
            out.push(conv.bias.as_slice().unwrap());
            out.push(bn.gamma.as_slice().unwrap());
            out.push(bn.beta.as_slice().unwrap());
        }
        for (block, head) in [(&self.expl_block, &self.expl_head), (&self.qual_block, &self.qual_head)] {
            out.push(block.linear.weight.as_slice().unwrap());
            out.push(block.linear.bias.as_slice().unwrap());
            out.push(block.bn.gamma.as_slice().unwrap());
            out.push(block.bn.beta.as_slice().unwrap());
            out.push(head.weight.as_slice().unwrap());
            out.push(head.bias.as_slice().unwrap());
        }
        out
    }
}

/// Stack images into an `(N, 3, res, res)` batch tensor.
pub fn image_batch<F: Scalar>(images: &[ImageTensor]) -> Result<Array4<F>> {
    let Some(first) = images.first() else {
        return Err(Error::Argument("empty image batch".into()));
    };
    let res = first.resolution();
    let mut x = Array4::<F>::zeros((images.len(), 3, res, res));
    for (ni, img) in images.iter().enumerate() {
        if img.resolution() != res {
            return Err(Error::Argument("mixed image resolutions in batch".into()));
        }
        ndarray::Zip::from(x.index_axis_mut(Axis(0), ni))
            .and(img.data())
            .for_each(|o, &v| *o = F::from_f64(v as f64));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            resolution: 16,
            backbone: BackboneConfig {
                stage_widths: vec![4, 6],
                strides: vec![2, 2],
            },
            hidden_units: 8,
            dropout: 0.2,
        }
    }

    fn random_batch(n: usize, res: usize, seed: u64) -> Array4<f64> {
        let mut rng = stream(seed, "test-batch", 0);
        Array4::from_shape_fn((n, 3, res, res), |_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = tiny_config();
        let a: Model<f64> = init_params(3, &config).unwrap();
        let b: Model<f64> = init_params(3, &config).unwrap();
        for (x, y) in a.trainable_slices().iter().zip(b.trainable_slices()) {
            assert_eq!(*x, y);
        }
        assert!(a
            .stages
            .iter()
            .all(|st| st.bn.running_var.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn eval_forward_is_pure() {
        let model: Model<f64> = init_params(1, &tiny_config()).unwrap();
        let x = random_batch(2, 16, 5);
        let (q1, e1, _) = model.forward_batch(&x, Mode::Eval, 0).unwrap();
        let (q2, e2, _) = model.forward_batch(&x, Mode::Eval, 99).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(e1, e2);
    }

    #[test]
    fn softmax_sums_to_one_and_sigmoid_in_unit_interval() {
        let model: Model<f64> = init_params(2, &tiny_config()).unwrap();
        let x = random_batch(3, 16, 6);
        let (q, e, _) = model.forward_batch(&x, Mode::Eval, 0).unwrap();
        let probs = softmax(&q);
        for row in probs.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
        }
        for &logit in e.iter() {
            let p = layers::sigmoid(logit);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn quality_head_consumes_hidden_plus_explanations() {
        let model: Model<f64> = init_params(2, &tiny_config()).unwrap();
        assert_eq!(model.qual_head.weight.dim(), (4, 8 + 5));
    }

    #[test]
    fn zeroing_concatenated_explanations_changes_quality_logits() {
        // Ablation: run the quality head on the trace's concat input with the
        // explanation entries zeroed; logits must move.
        let model: Model<f64> = init_params(7, &tiny_config()).unwrap();
        let x = random_batch(1, 16, 8);
        let (q, _, trace) = model.forward_batch(&x, Mode::Eval, 0).unwrap();
        let hidden = model.config.hidden_units;
        let mut cat = Array2::<f64>::zeros((1, hidden + EXPLANATIONS));
        // Rebuild the concat input from the trace, zeroing the probs.
        let (qb, _) = model.qual_block.forward(
            &trace.pooled,
            Mode::Eval,
            &mut stream(0, "unused", 0),
        );
        cat.slice_mut(s![.., ..hidden]).assign(&qb);
        let (q_zeroed, _) = model.qual_head.forward(&cat);
        assert_ne!(q.row(0).to_owned(), q_zeroed.row(0).to_owned());
    }

    #[test]
    fn perturbing_a_weight_moves_logits_along_the_analytic_gradient() {
        let config = tiny_config();
        let model: Model<f64> = init_params(11, &config).unwrap();
        let x = random_batch(2, 16, 12);
        let (q, _, trace) = model.forward_batch(&x, Mode::Eval, 0).unwrap();

        // Analytic d(sum of quality logits)/d(first backbone weight).
        let mut grads = model.zero_grads();
        let dq = Array2::<f64>::ones(q.raw_dim());
        let de = Array2::<f64>::zeros(trace.expl_logits.raw_dim());
        model.backward(&trace, &dq, &de, &mut grads);
        let analytic = grads.stages[0].0.weight[[0, 0]];

        let eps = 1e-3;
        let mut perturbed = model.clone();
        perturbed.stages[0].conv.weight[[0, 0]] += eps;
        let (q_hi, _, _) = perturbed.forward_batch(&x, Mode::Eval, 0).unwrap();
        let delta = (q_hi.sum() - q.sum()) / eps;
        assert_abs_diff_eq!(delta, analytic, epsilon = 1e-3 * analytic.abs().max(1.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut config = tiny_config();
        config.backbone.stage_widths = vec![4];
        config.backbone.strides = vec![2];
        assert!(init_params::<f64>(0, &config).is_err());

        let mut config = tiny_config();
        config.resolution = 8; // final map 2x2 < 4x4
        assert!(init_params::<f64>(0, &config).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let model: Model<f64> = init_params(1, &tiny_config()).unwrap();
        let x = random_batch(1, 32, 0);
        assert!(model.forward_batch(&x, Mode::Eval, 0).is_err());
    }

    #[test]
    fn trainable_names_align_with_slices() {
        let model: Model<f64> = init_params(1, &tiny_config()).unwrap();
        assert_eq!(model.trainable_names().len(), model.trainable_slices().len());
    }
}
