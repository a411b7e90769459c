//! Preprocessing, augmentation, loss, learning-rate schedule, momentum SGD
//! and the training loop.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnUpdate, Gradients, Graph, Mode};
use crate::click_sim::{click_combinations, MAX_BUDGET};
use crate::data::LesionSample;
use crate::error::{HfnError, Result};
use crate::evaluation;
use crate::hintmaps::{ClickSet, Coord};
use crate::mask::Mask;
use crate::network::{Hfn, ModelParameters, NetInput, NetworkConfig, ParamGroup, SampleTensors};
use crate::ops::{self, IGNORE_LABEL};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_halving_period_epochs: usize,
    pub resize_max_long_axis: usize,
    pub click_combinations_per_image: usize,
    pub seed: u64,
    /// Random crops and flips.
    pub augment: bool,
    /// Weight of the current batch in running batch-norm statistics.
    pub bn_momentum: f64,
    /// Report mean Jaccard on the test split at (3, 3) clicks after every epoch.
    pub validate: bool,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 3,
            lr_encoder: 0.0005,
            lr_decoder: 0.005,
            momentum: 0.9,
            weight_decay: 0.00001,
            lr_halving_period_epochs: 50,
            resize_max_long_axis: 512,
            click_combinations_per_image: MAX_BUDGET,
            seed: 0,
            augment: true,
            bn_momentum: 0.1,
            validate: true,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    /// Small-image, randomly initialized schedule: fewer epochs, larger steps.
    pub fn desk_scale() -> Self {
        TrainConfig {
            epochs: 30,
            lr_encoder: 0.002,
            lr_decoder: 0.02,
            lr_halving_period_epochs: 12,
            validate: false,
            max_grad_norm: Some(5.0),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HfnError::InvalidTrainConfig(m));
        if !(self.lr_encoder > 0.0 && self.lr_encoder.is_finite()) || !(self.lr_decoder > 0.0 && self.lr_decoder.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} is outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative".into());
        }
        if self.lr_halving_period_epochs == 0 {
            return bad("lr_halving_period_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.resize_max_long_axis == 0 {
            return bad("resize_max_long_axis must be at least 1".into());
        }
        if !(1..=MAX_BUDGET).contains(&self.click_combinations_per_image) {
            return bad(format!("click_combinations_per_image must be in 1..={MAX_BUDGET}"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("max_grad_norm {c} must be positive"));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad(format!("bn_momentum {} is outside (0, 1]", self.bn_momentum));
        }
        Ok(())
    }
}

fn nearest_source(dst: usize, src_len: usize, dst_len: usize) -> usize {
    ((2 * dst + 1) * src_len / (2 * dst_len)).min(src_len - 1)
}

pub fn resize_image_nearest(image: &RgbImage, height: usize, width: usize) -> RgbImage {
    let (sh, sw) = (image.height() as usize, image.width() as usize);
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        *image.get_pixel(nearest_source(x as usize, sw, width) as u32, nearest_source(y as usize, sh, height) as u32)
    })
}

pub fn resize_mask_nearest(mask: &Mask, height: usize, width: usize) -> Mask {
    let (sh, sw) = mask.dims();
    Mask::from_fn(height, width, |y, x| mask.get(nearest_source(y, sh, height), nearest_source(x, sw, width)))
}

/// Output size for the downscale-only long-axis rule.
pub fn preprocessed_dims(height: usize, width: usize, max_long_axis: usize) -> (usize, usize) {
    let long = height.max(width);
    if long <= max_long_axis {
        return (height, width);
    }
    let scale = max_long_axis as f64 / long as f64;
    let r = |v: usize| ((v as f64 * scale).round() as usize).clamp(1, max_long_axis);
    (r(height), r(width))
}

pub fn preprocess_image(image: &RgbImage, max_long_axis: usize) -> Result<RgbImage> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    if h == 0 || w == 0 {
        return Err(HfnError::EmptyImage);
    }
    let (nh, nw) = preprocessed_dims(h, w, max_long_axis);
    Ok(if (nh, nw) == (h, w) { image.clone() } else { resize_image_nearest(image, nh, nw) })
}

/// Nearest-neighbour downscale so the long axis is at most `max_long_axis`.
pub fn preprocess(image: &RgbImage, mask: &Mask, max_long_axis: usize) -> Result<(RgbImage, Mask)> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    if (h, w) != mask.dims() {
        return Err(HfnError::ShapeMismatch(format!(
            "image is {h}x{w} but mask is {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let img = preprocess_image(image, max_long_axis)?;
    let (nh, nw) = (img.height() as usize, img.width() as usize);
    let mask = if (nh, nw) == (h, w) { mask.clone() } else { resize_mask_nearest(mask, nh, nw) };
    Ok((img, mask))
}

/// One geometric transform: crop a window, resize it back to full size,
/// then flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

pub const CROP_RANGE: (f64, f64) = (0.7, 1.0);
pub const AUGMENT_ATTEMPTS: usize = 10;

impl Augmentation {
    pub fn identity(height: usize, width: usize) -> Self {
        Augmentation {
            height,
            width,
            top: 0,
            left: 0,
            crop_height: height,
            crop_width: width,
            flip_horizontal: false,
            flip_vertical: false,
        }
    }

    pub fn random(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let side = |len: usize, rng: &mut dyn rand::RngCore| {
            let frac = rng.random_range(CROP_RANGE.0..=CROP_RANGE.1);
            let c = ((len as f64 * frac).round() as usize).clamp(1, len);
            (rng.random_range(0..=len - c), c)
        };
        let (top, crop_height) = side(height, rng);
        let (left, crop_width) = side(width, rng);
        Augmentation {
            height,
            width,
            top,
            left,
            crop_height,
            crop_width,
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Augmentation::identity(self.height, self.width)
    }

    /// Output pixel `(y, x)` reads this input pixel.
    fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let y = if self.flip_vertical { self.height - 1 - y } else { y };
        let x = if self.flip_horizontal { self.width - 1 - x } else { x };
        (
            self.top + nearest_source(y, self.crop_height, self.height),
            self.left + nearest_source(x, self.crop_width, self.width),
        )
    }

    pub fn apply_image(&self, image: &RgbImage) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (sy, sx) = self.source(y as usize, x as usize);
            *image.get_pixel(sx as u32, sy as u32)
        })
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| {
            let (sy, sx) = self.source(y, x);
            mask.get(sy, sx)
        })
    }

    /// Where an input click lands, or `None` when it falls outside the crop.
    /// The output pixel always reads back from the click's own pixel.
    pub fn map_click(&self, c: Coord) -> Option<Coord> {
        let forward = |s: usize, offset: usize, crop: usize, full: usize| -> Option<usize> {
            let s = s.checked_sub(offset).filter(|&s| s < crop)?;
            let guess = (2 * s + 1) * full / (2 * crop);
            (guess.saturating_sub(2)..(guess + 3).min(full)).find(|&d| nearest_source(d, crop, full) == s)
        };
        let y = forward(c.0, self.top, self.crop_height, self.height)?;
        let x = forward(c.1, self.left, self.crop_width, self.width)?;
        let y = if self.flip_vertical { self.height - 1 - y } else { y };
        let x = if self.flip_horizontal { self.width - 1 - x } else { x };
        Some(Coord(y, x))
    }

    pub fn map_clicks(&self, clicks: &ClickSet) -> ClickSet {
        let map = |v: &[Coord]| v.iter().filter_map(|&c| self.map_click(c)).collect();
        ClickSet::new(map(&clicks.foreground), map(&clicks.background))
    }
}

/// Random crop and flips applied consistently to image, mask and clicks.
/// Crops are redrawn until at least one click of each side survives; after
/// [`AUGMENT_ATTEMPTS`] failures the inputs are returned unchanged.
pub fn augment(image: &RgbImage, mask: &Mask, clicks: &ClickSet, seed: u64) -> (RgbImage, Mask, ClickSet) {
    let (h, w) = mask.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..AUGMENT_ATTEMPTS {
        let aug = Augmentation::random(h, w, &mut rng);
        let mapped = aug.map_clicks(clicks);
        if !mapped.foreground.is_empty() && !mapped.background.is_empty() {
            return (aug.apply_image(image), aug.apply_mask(mask), mapped);
        }
    }
    (image.clone(), mask.clone(), clicks.clone())
}

/// Mean two-class cross-entropy of `[1, 2, H, W]` logits against a mask.
pub fn loss<T: Element>(logits: &Tensor<T>, mask: &Mask) -> Result<f64> {
    let [n, c, h, w] = logits.shape();
    if n != 1 || c != 2 || (h, w) != mask.dims() {
        return Err(HfnError::ShapeMismatch(format!(
            "logits {:?} do not match a {}x{} mask",
            logits.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let (l, _) = ops::softmax_cross_entropy(logits, mask.values());
    Ok(l.to_f64().expect("finite float"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub encoder: f64,
    pub decoder: f64,
}

impl LearningRates {
    pub fn for_group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

/// Initial rates halved once per `lr_halving_period_epochs`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> LearningRates {
    let factor = 0.5f64.powi((epoch / config.lr_halving_period_epochs.max(1)) as i32);
    LearningRates { encoder: config.lr_encoder * factor, decoder: config.lr_decoder * factor }
}

/// Momentum buffers aligned with parameter entries (`None` for buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity<T> {
    pub buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Velocity<T> {
    pub fn zeros(params: &ModelParameters<T>) -> Self {
        Velocity {
            buffers: params
                .entries()
                .iter()
                .map(|e| e.kind.is_learnable().then(|| Tensor::zeros(e.tensor.shape())))
                .collect(),
        }
    }
}

/// Scale all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping; a non-finite norm
/// leaves the gradients untouched.
pub fn clip_grad_norm<T: Element>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }
    norm
}

/// `v = momentum * v - lr * (g + weight_decay * theta); theta += v` for every
/// learnable entry. Gradients are checked before anything is modified.
pub fn sgd_step<T: Element>(
    params: &mut ModelParameters<T>,
    grads: &Gradients<T>,
    velocity: &mut Velocity<T>,
    lr: LearningRates,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.entries().len();
    if grads.grads.len() != n || velocity.buffers.len() != n {
        return Err(HfnError::ShapeMismatch(format!(
            "{n} parameters, {} gradients, {} velocity buffers",
            grads.grads.len(),
            velocity.buffers.len()
        )));
    }
    for (i, e) in params.entries().iter().enumerate() {
        if let Some(g) = grads.get(i) {
            if g.shape() != e.tensor.shape() {
                return Err(HfnError::ShapeMismatch(format!("gradient for {} has shape {:?}", e.name, g.shape())));
            }
            if !g.all_finite() {
                return Err(HfnError::NonFiniteGradient(e.name.clone()));
            }
        }
    }
    let (m, wd) = (T::lit(momentum), T::lit(weight_decay));
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        let Some(v) = velocity.buffers[i].as_mut() else { continue };
        let rate = T::lit(lr.for_group(e.group));
        let g = grads.get(i);
        let theta = e.tensor.data_mut();
        for (j, (t, vj)) in theta.iter_mut().zip(v.data_mut()).enumerate() {
            let gj = g.map_or(T::zero(), |g| g.data()[j]);
            *vj = m * *vj - rate * (gj + wd * *t);
            *t = *t + *vj;
        }
    }
    Ok(())
}

/// Blend batch statistics into the running buffers.
pub fn apply_bn_updates<T: Element>(params: &mut ModelParameters<T>, updates: &[BnUpdate<T>], bn_momentum: f64) {
    let b = T::lit(bn_momentum);
    let keep = T::one() - b;
    for u in updates {
        let entries = params.entries_mut();
        for (r, &x) in entries[u.running_mean].tensor.data_mut().iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + b * x;
        }
        for (r, &x) in entries[u.running_var].tensor.data_mut().iter_mut().zip(&u.batch_var) {
            *r = keep * *r + b * x;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr_enc: f64,
    pub lr_dec: f64,
    pub val_jaccard: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
    }
}

/// Stable per-sample seed.
pub fn sample_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a, then a splitmix finalizer over the combination.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in key.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A preprocessed training image with its fixed click combinations.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub image: RgbImage,
    pub mask: Mask,
    pub combinations: Vec<ClickSet>,
}

pub fn prepare_items(samples: &[&LesionSample], config: &TrainConfig) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|s| {
            let (image, mask) = preprocess(&s.image, &s.mask, config.resize_max_long_axis)?;
            let mut combinations = click_combinations(&mask, sample_seed(config.seed, &s.id))?;
            combinations.truncate(config.click_combinations_per_image);
            Ok(TrainItem { id: s.id.clone(), image, mask, combinations })
        })
        .collect()
}

/// Pad a batch to a common size; padded pixels carry [`IGNORE_LABEL`].
fn build_batch(
    items: Vec<(RgbImage, Mask, ClickSet)>,
    pad_multiple: usize,
) -> Result<(NetInput<f32>, Vec<u8>)> {
    let h = items.iter().map(|i| i.1.height()).max().unwrap_or(0);
    let w = items.iter().map(|i| i.1.width()).max().unwrap_or(0);
    let (ph, pw) = (h.div_ceil(pad_multiple) * pad_multiple, w.div_ceil(pad_multiple) * pad_multiple);
    let mut images = Vec::new();
    let mut fgs = Vec::new();
    let mut bgs = Vec::new();
    let mut labels = Vec::with_capacity(items.len() * ph * pw);
    for (image, mask, clicks) in &items {
        let s = SampleTensors::<f32>::new(image, clicks)?;
        images.push(s.image.reflect_pad(ph, pw));
        fgs.push(s.fg.reflect_pad(ph, pw));
        bgs.push(s.bg.reflect_pad(ph, pw));
        let (mh, mw) = mask.dims();
        for y in 0..ph {
            for x in 0..pw {
                labels.push(if y < mh && x < mw { mask.get(y, x) as u8 } else { IGNORE_LABEL });
            }
        }
    }
    Ok((
        NetInput { image: Tensor::stack(&images), fg: Tensor::stack(&fgs), bg: Tensor::stack(&bgs), height: ph, width: pw },
        labels,
    ))
}

/// One forward/backward pass; returns the loss, gradients and BN statistics.
pub fn loss_and_gradients<T: Element>(
    net: &Hfn,
    params: &ModelParameters<T>,
    input: &NetInput<T>,
    labels: Vec<u8>,
    mode: Mode,
) -> Result<(f64, Gradients<T>, Vec<BnUpdate<T>>)> {
    let mut g = Graph::new(params, mode);
    let logits = net.logits_graph(&mut g, input)?;
    let l = g.cross_entropy(logits, labels);
    let value = g.value(l).data()[0].to_f64().unwrap_or(f64::NAN);
    let updates = g.take_bn_updates();
    Ok((value, g.backward(l), updates))
}

/// Train on the `Train` split of `dataset`. With `config.validate`, the
/// `Test` split is scored after every epoch.
pub fn train(
    dataset: &[LesionSample],
    net_config: &NetworkConfig,
    config: &TrainConfig,
) -> Result<(ModelParameters<f32>, TrainHistory)> {
    train_with_progress(dataset, net_config, config, |_| {})
}

pub fn train_with_progress(
    dataset: &[LesionSample],
    net_config: &NetworkConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParameters<f32>, TrainHistory)> {
    use crate::data::Split;
    config.validate()?;
    let net = Hfn::new(net_config.clone())?;
    let train_samples: Vec<&LesionSample> = dataset.iter().filter(|s| s.split == Split::Train).collect();
    if train_samples.is_empty() {
        return Err(HfnError::EmptySplit("train"));
    }
    let val_samples: Vec<LesionSample> = dataset.iter().filter(|s| s.split == Split::Test).cloned().collect();
    let items = prepare_items(&train_samples, config)?;
    let offsets: Vec<usize> = items.iter().map(|it| (sample_seed(config.seed ^ 0xc0b0, &it.id) % 6) as usize).collect();

    let mut params = net.init_params::<f32>(config.seed);
    let mut velocity = Velocity::zeros(&params);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..items.len()).collect();

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let it = &items[i];
                    let clicks = &it.combinations[(epoch + offsets[i]) % it.combinations.len()];
                    if config.augment {
                        let s = sample_seed(config.seed ^ (epoch as u64).wrapping_mul(0x5851f42d), &it.id);
                        augment(&it.image, &it.mask, clicks, s)
                    } else {
                        (it.image.clone(), it.mask.clone(), clicks.clone())
                    }
                })
                .collect();
            let (input, labels) = build_batch(batch, net_config.input_pad_multiple)?;
            let (l, mut grads, updates) = loss_and_gradients(&net, &params, &input, labels, Mode::TRAINING)?;
            if !l.is_finite() {
                return Err(HfnError::NonFiniteLoss { epoch, batch: b });
            }
            if let Some(c) = config.max_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            sgd_step(&mut params, &grads, &mut velocity, lr, config.momentum, config.weight_decay)?;
            apply_bn_updates(&mut params, &updates, config.bn_momentum);
            total += l;
            batches += 1;
        }
        let val_jaccard = if config.validate && !val_samples.is_empty() {
            Some(evaluation::mean_jaccard_at(&net, &params, &val_samples, 3, config.seed)?)
        } else {
            None
        };
        let rec = EpochRecord { epoch, loss: total / batches as f64, lr_enc: lr.encoder, lr_dec: lr.decoder, val_jaccard };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok((params, history))
}
