//! Residual convolutional encoder producing an `L`-level feature pyramid.
//!
//! Layout for base stride `s = 2^m`: a 7×7 stride-2 stem, then `m − 1`
//! stride-2 residual blocks, then a 1×1 projection to `C` channels. The
//! pyramid is the projected map followed by `L − 1` rounds of 2×2 average
//! pooling. Every convolution except the projection is followed by instance
//! normalisation, which also makes the features insensitive to global
//! intensity gain and bias.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datamodel::GrayImage;
use crate::error::{invalid, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Base stride `s`; a power of two, at least 2.
    pub stride: usize,
    /// Output channels `C`.
    pub feature_dim: usize,
    /// Channel widths of the stem and of each downsampling block;
    /// `log2(stride)` entries.
    pub widths: Vec<usize>,
    /// Pyramid levels `L`.
    pub levels: usize,
    /// Unit-normalise each feature vector across channels.
    pub normalize_features: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_height: 256,
            image_width: 256,
            stride: 8,
            feature_dim: 128,
            widths: alloc::vec![64, 96, 128],
            levels: 4,
            normalize_features: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return Err(invalid!("encoder stride must be a power of two ≥ 2, got {}", self.stride));
        }
        let stages = self.stride.trailing_zeros() as usize;
        if self.widths.len() != stages {
            return Err(invalid!(
                "stride {} needs {} encoder widths, got {}",
                self.stride,
                stages,
                self.widths.len()
            ));
        }
        if self.levels == 0 || self.feature_dim == 0 || self.widths.contains(&0) {
            return Err(invalid!("levels, feature_dim and widths must be positive"));
        }
        let (h0, w0) = self.level_size(0);
        let min = h0.min(w0);
        if min >> (self.levels - 1) == 0 {
            return Err(invalid!("{} pyramid levels do not fit a {}x{} base map", self.levels, h0, w0));
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of pyramid level `level`.
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        let mut h = self.image_height.div_ceil(self.stride);
        let mut w = self.image_width.div_ceil(self.stride);
        for _ in 0..level {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Pixels per cell at `level`.
    pub fn level_stride(&self, level: usize) -> f64 {
        (self.stride << level) as f64
    }
}

/// Dense multi-resolution features of one frame; each level is `[C, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub stride: usize,
    pub frame_index: usize,
}

#[derive(Debug, Clone)]
struct ConvIds {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct ResBlockIds {
    conv1: ConvIds,
    conv2: ConvIds,
    shortcut: Option<ConvIds>,
}

/// Parameter handles of the encoder inside a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: ConvIds,
    blocks: Vec<ResBlockIds>,
    proj: ConvIds,
    zero_bias: Vec<(usize, Tensor)>,
}

fn add_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    bias: bool,
) -> ConvIds {
    let w = store.add_he(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng);
    let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[cout]));
    ConvIds { w, b, stride, pad: k / 2 }
}

impl Encoder {
    /// Register freshly initialised encoder parameters under `encoder.*`.
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let stem = add_conv(store, rng, "encoder.stem", 1, w[0], 7, 2, false);
        let mut blocks = Vec::new();
        for i in 1..w.len() {
            let name = format!("encoder.block{i}");
            blocks.push(ResBlockIds {
                conv1: add_conv(store, rng, &format!("{name}.conv1"), w[i - 1], w[i], 3, 2, false),
                conv2: add_conv(store, rng, &format!("{name}.conv2"), w[i], w[i], 3, 1, false),
                shortcut: Some(add_conv(store, rng, &format!("{name}.down"), w[i - 1], w[i], 1, 2, false)),
            });
        }
        let proj = add_conv(store, rng, "encoder.proj", *w.last().unwrap(), cfg.feature_dim, 1, 1, true);
        let mut zero_bias: Vec<(usize, Tensor)> = w.iter().map(|&c| (c, Tensor::zeros(&[c]))).collect();
        zero_bias.sort_by_key(|(c, _)| *c);
        zero_bias.dedup_by_key(|(c, _)| *c);
        Ok(Encoder { cfg: cfg.clone(), stem, blocks, proj, zero_bias })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Names of every encoder parameter, in registration order.
    pub fn param_names(store: &ParamStore) -> Vec<String> {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with("encoder."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    fn bias_for(&self, g: &mut Graph, store: &ParamStore, conv: &ConvIds, cout: usize) -> Var {
        match conv.b {
            Some(id) => g.param(store, id),
            None => {
                let z = &self.zero_bias.iter().find(|(c, _)| *c == cout).expect("width registered").1;
                g.input(z.clone(), false)
            }
        }
    }

    fn conv(&self, g: &mut Graph, store: &ParamStore, x: Var, conv: &ConvIds) -> Var {
        let w = g.param(store, conv.w);
        let cout = store.get(conv.w).dim(0);
        let b = self.bias_for(g, store, conv, cout);
        g.conv2d(x, w, b, conv.stride, conv.pad)
    }

    /// Check a frame against the configured input size.
    pub fn check_frame(&self, frame: &GrayImage) -> Result<()> {
        if frame.width() != self.cfg.image_width || frame.height() != self.cfg.image_height {
            return Err(invalid!(
                "frame is {}x{}, encoder expects {}x{}",
                frame.width(),
                frame.height(),
                self.cfg.image_width,
                self.cfg.image_height
            ));
        }
        Ok(())
    }

    /// Record the encoder on `g`; returns one var per pyramid level.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frame: &GrayImage) -> Result<Vec<Var>> {
        self.check_frame(frame)?;
        let x = g.input(frame.to_tensor(), false);
        let mut h = self.conv(g, store, x, &self.stem);
        h = g.instance_norm(h, NORM_EPS);
        h = g.relu(h);
        for blk in &self.blocks {
            let mut m = self.conv(g, store, h, &blk.conv1);
            m = g.instance_norm(m, NORM_EPS);
            m = g.relu(m);
            m = self.conv(g, store, m, &blk.conv2);
            m = g.instance_norm(m, NORM_EPS);
            let skip = match &blk.shortcut {
                Some(sc) => {
                    let s = self.conv(g, store, h, sc);
                    g.instance_norm(s, NORM_EPS)
                }
                None => h,
            };
            let sum = g.add(m, skip);
            h = g.relu(sum);
        }
        let mut base = self.conv(g, store, h, &self.proj);
        if self.cfg.normalize_features {
            base = g.channel_l2_norm(base, 1e-6);
        }
        let mut levels = alloc::vec![base];
        for _ in 1..self.cfg.levels {
            let next = g.avg_pool2(*levels.last().unwrap());
            levels.push(next);
        }
        Ok(levels)
    }

    /// Inference-mode pyramid of one frame.
    pub fn encode(&self, store: &ParamStore, frame: &GrayImage, frame_index: usize) -> Result<FeaturePyramid> {
        let mut g = Graph::inference();
        let vars = self.forward(&mut g, store, frame)?;
        Ok(FeaturePyramid {
            levels: vars.iter().map(|&v| g.value(v).clone()).collect(),
            stride: self.cfg.stride,
            frame_index,
        })
    }

    /// Replace every encoder parameter from named tensors. All encoder
    /// parameters must be present with matching shapes; extra non-encoder
    /// entries are ignored.
    pub fn load_weights(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<usize> {
        let wanted = Encoder::param_names(store);
        let picked: Vec<(String, Tensor)> =
            entries.iter().filter(|(n, _)| n.starts_with("encoder.")).cloned().collect();
        let missing: Vec<&String> = wanted.iter().filter(|w| !picked.iter().any(|(n, _)| n == *w)).collect();
        if !missing.is_empty() {
            let names: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
            return Err(Error::Weights(format!("missing encoder parameters: {}", names.join(", "))));
        }
        store.assign_named(&picked)
    }
}
