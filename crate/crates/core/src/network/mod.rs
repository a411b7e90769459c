//! The hyper-fusion network: a three-branch encoder (image, foreground hint,
//! background hint) fused stage by stage, and a decoder of integration
//! modules producing two-class logits.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod params;

use image::RgbImage;

use crate::autograd::{Graph, Mode, NodeId};
use crate::error::{HfnError, Result};
use crate::hintmaps::{compute_hint_maps, normalize_hint_map, ClickSet};
use crate::mask::Mask;
use crate::ops;
use crate::tensor::{Element, Tensor};

pub use config::NetworkConfig;
pub use decoder::{crpu, fusion_unit, gcu, GcuOutput};
pub use encoder::EncoderOutput;
pub use params::{ModelParameters, ParamEntry, ParamGroup, ParamKind};

use decoder::DecoderSpec;
use encoder::EncoderSpec;
use params::{LayoutBuilder, ParamSpec};

/// Architecture built from a [`NetworkConfig`]: parameter layout plus the
/// indices each layer reads.
#[derive(Clone, Debug)]
pub struct Hfn {
    config: NetworkConfig,
    encoder: EncoderSpec,
    decoder: DecoderSpec,
    specs: Vec<ParamSpec>,
}

/// Padded network inputs for a batch of equally sized samples.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput<T> {
    /// `[n, 3, H, W]`, intensities scaled to `[-0.5, 0.5]`.
    pub image: Tensor<T>,
    /// `[n, 1, H, W]` normalized distance fields.
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
    /// Size before padding.
    pub height: usize,
    pub width: usize,
}

/// Unpadded single-sample tensors.
#[derive(Clone, Debug)]
pub struct SampleTensors<T> {
    pub image: Tensor<T>,
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
}

impl<T: Element> SampleTensors<T> {
    pub fn new(image: &RgbImage, clicks: &ClickSet) -> Result<Self> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w == 0 || h == 0 {
            return Err(HfnError::EmptyImage);
        }
        let (fg, bg) = compute_hint_maps(clicks, h, w)?;
        let fg = Tensor::from_vec([1, 1, h, w], normalize_hint_map(&fg).into_iter().map(T::lit).collect());
        let bg = Tensor::from_vec([1, 1, h, w], normalize_hint_map(&bg).into_iter().map(T::lit).collect());
        let raw = image.as_raw();
        let img = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| T::lit(raw[(y * w + x) * 3 + c] as f64 / 255.0 - 0.5));
        Ok(SampleTensors { image: img, fg, bg })
    }

    pub fn dims(&self) -> (usize, usize) {
        let [_, _, h, w] = self.image.shape();
        (h, w)
    }
}

impl<T: Element> NetInput<T> {
    /// Reflect-pad every sample to a common multiple of `pad_multiple`.
    /// Samples must share their unpadded size.
    pub fn batch(samples: &[SampleTensors<T>], pad_multiple: usize) -> Result<Self> {
        let first = samples.first().ok_or(HfnError::EmptyImage)?;
        let (h, w) = first.dims();
        for s in samples {
            if s.dims() != (h, w) {
                return Err(HfnError::ShapeMismatch(format!("batch mixes {h}x{w} and {:?}", s.dims())));
            }
            if s.fg.shape() != [1, 1, h, w] || s.bg.shape() != [1, 1, h, w] {
                return Err(HfnError::ShapeMismatch("hint maps differ from image size".into()));
            }
        }
        let (ph, pw) = (h.div_ceil(pad_multiple) * pad_multiple, w.div_ceil(pad_multiple) * pad_multiple);
        let pad = |t: &Tensor<T>| t.reflect_pad(ph, pw);
        Ok(NetInput {
            image: Tensor::stack(&samples.iter().map(|s| pad(&s.image)).collect::<Vec<_>>()),
            fg: Tensor::stack(&samples.iter().map(|s| pad(&s.fg)).collect::<Vec<_>>()),
            bg: Tensor::stack(&samples.iter().map(|s| pad(&s.bg)).collect::<Vec<_>>()),
            height: h,
            width: w,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        let [_, _, h, w] = self.image.shape();
        (h, w)
    }
}

/// Per-stage feature tensors from one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<T> {
    pub image: Vec<Tensor<T>>,
    pub fg: Vec<Tensor<T>>,
    pub bg: Vec<Tensor<T>>,
    pub fused: Vec<Tensor<T>>,
}

/// Foreground probabilities and the thresholded mask for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub probability: Vec<f32>,
    pub mask: Mask,
}

pub const MASK_THRESHOLD: f32 = 0.5;

impl Prediction {
    pub fn from_probability(height: usize, width: usize, probability: Vec<f32>) -> Prediction {
        let bits = probability.iter().map(|&p| (p >= MASK_THRESHOLD) as u8).collect();
        let mask = Mask::new(height, width, bits).expect("binary by construction");
        Prediction { height, width, probability, mask }
    }

    pub fn mean_probability(&self) -> f64 {
        self.probability.iter().map(|&p| p as f64).sum::<f64>() / self.probability.len().max(1) as f64
    }
}

impl Hfn {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder::default();
        let encoder = EncoderSpec::build(&mut b, &config);
        let decoder = DecoderSpec::build(&mut b, &config);
        Ok(Hfn { config, encoder, decoder, specs: b.specs })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn encoder(&self) -> &EncoderSpec {
        &self.encoder
    }

    pub fn decoder(&self) -> &DecoderSpec {
        &self.decoder
    }

    /// `(name, shape)` of every entry, in layout order.
    pub fn param_shapes(&self) -> impl Iterator<Item = (&str, [usize; 4])> {
        self.specs.iter().map(|s| (s.name.as_str(), s.shape))
    }

    /// Variance-scaled random initialization, deterministic in `seed`.
    pub fn init_params<T: Element>(&self, seed: u64) -> ModelParameters<T> {
        LayoutBuilder::materialize(&self.specs, seed)
    }

    /// Names, order, shapes, groups and kinds must all match the layout.
    pub fn validate_params<T: Element>(&self, params: &ModelParameters<T>) -> Result<()> {
        let entries = params.entries();
        if entries.len() != self.specs.len() {
            return Err(HfnError::ShapeMismatch(format!(
                "expected {} parameter tensors, found {}",
                self.specs.len(),
                entries.len()
            )));
        }
        for (s, e) in self.specs.iter().zip(entries) {
            if s.name != e.name {
                return Err(HfnError::ShapeMismatch(format!("expected parameter {}, found {}", s.name, e.name)));
            }
            if s.shape != e.tensor.shape() {
                return Err(HfnError::ShapeMismatch(format!(
                    "parameter {} has shape {:?}, config requires {:?}",
                    s.name,
                    e.tensor.shape(),
                    s.shape
                )));
            }
            if s.group != e.group || s.kind != e.kind {
                return Err(HfnError::ShapeMismatch(format!("parameter {} has the wrong group or kind", s.name)));
            }
        }
        Ok(())
    }

    fn check_input<T: Element>(&self, input: &NetInput<T>) -> Result<()> {
        let [n, c, h, w] = input.image.shape();
        if c != 3 {
            return Err(HfnError::ShapeMismatch(format!("image has {c} channels, expected 3")));
        }
        for (name, t) in [("foreground", &input.fg), ("background", &input.bg)] {
            if t.shape() != [n, 1, h, w] {
                return Err(HfnError::ShapeMismatch(format!(
                    "{name} hint map shape {:?} does not match image {:?}",
                    t.shape(),
                    input.image.shape()
                )));
            }
        }
        let m = self.config.input_pad_multiple;
        if h % m != 0 || w % m != 0 {
            return Err(HfnError::ShapeMismatch(format!("input {h}x{w} is not padded to a multiple of {m}")));
        }
        Ok(())
    }

    /// Record the encoder on `g`.
    pub fn encode_graph<T: Element>(&self, g: &mut Graph<'_, T>, input: &NetInput<T>) -> Result<EncoderOutput> {
        self.check_input(input)?;
        let image = g.input(input.image.clone());
        let fg = g.input(input.fg.clone());
        let bg = g.input(input.bg.clone());
        Ok(self.encoder.forward(g, image, fg, bg))
    }

    /// Logits `[n, 2, height, width]` cropped back to the unpadded size.
    pub fn logits_graph<T: Element>(&self, g: &mut Graph<'_, T>, input: &NetInput<T>) -> Result<NodeId> {
        let enc = self.encode_graph(g, input)?;
        let low = self.decoder.forward(g, &enc)?;
        let (ph, pw) = input.padded_dims();
        let up = g.resize(low, ph, pw);
        Ok(g.crop(up, input.height, input.width))
    }

    /// Encoder stage tensors in inference mode.
    pub fn encode<T: Element>(&self, params: &ModelParameters<T>, input: &NetInput<T>) -> Result<EncoderFeatures<T>> {
        let mut g = Graph::new(params, Mode::INFERENCE);
        let enc = self.encode_graph(&mut g, input)?;
        let grab = |ids: &[NodeId]| ids.iter().map(|&i| g.value(i).clone()).collect::<Vec<_>>();
        Ok(EncoderFeatures {
            image: grab(&enc.image),
            fg: grab(&enc.fg_proj),
            bg: grab(&enc.bg_proj),
            fused: grab(&enc.fused),
        })
    }

    /// Image branch only; the reference for the zero-hint reduction.
    pub fn encode_image_only<T: Element>(&self, params: &ModelParameters<T>, image: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut g = Graph::new(params, Mode::INFERENCE);
        let x = g.input(image.clone());
        let fused = self.encoder.forward_image_only(&mut g, x);
        fused.iter().map(|&i| g.value(i).clone()).collect()
    }

    /// Inference logits.
    pub fn logits<T: Element>(&self, params: &ModelParameters<T>, input: &NetInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(params, Mode::INFERENCE);
        let out = self.logits_graph(&mut g, input)?;
        Ok(g.value(out).clone())
    }

    /// End-to-end inference for one image and its clicks.
    pub fn forward(&self, image: &RgbImage, clicks: &ClickSet, params: &ModelParameters<f32>) -> Result<Prediction> {
        clicks.require_both_sides()?;
        let sample = SampleTensors::<f32>::new(image, clicks)?;
        let input = NetInput::batch(std::slice::from_ref(&sample), self.config.input_pad_multiple)?;
        let logits = self.logits(params, &input)?;
        let prob = ops::foreground_probability(&logits);
        Ok(Prediction::from_probability(input.height, input.width, prob.into_vec()))
    }
}

/// Build the architecture for `config` and initialize it.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ModelParameters<f32>> {
    Ok(Hfn::new(config.clone())?.init_params(seed))
}
