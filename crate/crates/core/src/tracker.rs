//! The streaming tracker.
//!
//! Each new frame is encoded once. Point features are sampled from a fixed
//! set of earlier frames (by default frame 0, `t − 4` and `t − 2`) and
//! correlated with `R × R` patches of every pyramid level of the new frame
//! around the current estimate. Together with a sinusoidal embedding of the
//! most recent point motion they feed a 1-D residual network whose linear
//! head predicts a position update; `K` such updates are applied per frame,
//! starting from the previous position.
//!
//! The history lives in a fixed-capacity ring, so memory and per-frame cost
//! do not grow with the sequence length. Before the ring has filled, missing
//! slots hold copies of frame 0 and the initial points.
//!
//! Layout conventions:
//! * positions are image pixels throughout; pyramid level `ℓ` is sampled at
//!   `p / (stride · 2^ℓ)`;
//! * correlation vectors are ordered history slot, then level, then patch
//!   row, then patch column;
//! * the update head treats history slots as a 1-D sequence whose tokens are
//!   `[correlations of that slot | motion embedding]`.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::{Graph, Var};
use crate::datamodel::{GrayImage, Point, PointSet, TrajectorySet, TrajectorySource, VideoSequence};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};
use crate::sampling::BilinearTap;
use crate::tensor::Tensor;

/// A frame whose features are sampled as history: the anchor frame 0, or
/// the frame `k` steps before the current one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HistoryRef {
    Anchor,
    Back(usize),
}

impl fmt::Display for HistoryRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HistoryRef::Anchor => f.write_str("0"),
            HistoryRef::Back(k) => write!(f, "t-{k}"),
        }
    }
}

impl core::str::FromStr for HistoryRef {
    type Err = String;
    fn from_str(s: &str) -> core::result::Result<Self, String> {
        let s = s.trim();
        if s == "0" {
            return Ok(HistoryRef::Anchor);
        }
        match s.strip_prefix("t-").map(str::parse::<usize>) {
            Some(Ok(k)) if k >= 1 => Ok(HistoryRef::Back(k)),
            _ => Err(format!("history offset must be \"0\" or \"t-<k>\" with k ≥ 1, got {s:?}")),
        }
    }
}

impl Serialize for HistoryRef {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HistoryRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Update iterations per frame (`K`).
    pub iterations: usize,
    /// Correlation patch side (`R`, odd).
    pub patch_size: usize,
    /// Pyramid levels (`L`).
    pub levels: usize,
    pub history_offsets: Vec<HistoryRef>,
    /// Number of recent positions whose flow is embedded.
    pub motion_history_len: usize,
    /// Total motion-embedding width; a multiple of `4 · motion_history_len`.
    pub embed_dim: usize,
    pub encoder_stride: usize,
    pub feature_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub normalize_features: bool,
    pub image_height: usize,
    pub image_width: usize,
    /// Width of the 1-D residual network.
    pub hidden_dim: usize,
    pub resnet_blocks: usize,
    /// Stop gradients through the iterate fed into each lookup.
    pub detach_iterates: bool,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            iterations: 6,
            patch_size: 3,
            levels: 4,
            history_offsets: vec![HistoryRef::Anchor, HistoryRef::Back(4), HistoryRef::Back(2)],
            motion_history_len: 3,
            embed_dim: 96,
            encoder_stride: 8,
            feature_dim: 128,
            encoder_widths: vec![64, 96, 128],
            normalize_features: false,
            image_height: 256,
            image_width: 256,
            hidden_dim: 256,
            resnet_blocks: 8,
            detach_iterates: false,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            stride: self.encoder_stride,
            feature_dim: self.feature_dim,
            widths: self.encoder_widths.clone(),
            levels: self.levels,
            normalize_features: self.normalize_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid!("iterations (K) must be at least 1"));
        }
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(invalid!("patch_size (R) must be odd and ≥ 1, got {}", self.patch_size));
        }
        if !self.history_offsets.contains(&HistoryRef::Anchor) {
            return Err(invalid!("history offsets must include frame 0"));
        }
        if self.motion_history_len == 0 && self.embed_dim != 0 {
            return Err(invalid!("embed_dim must be 0 without motion history"));
        }
        if self.motion_history_len > 0
            && (self.embed_dim == 0 || !self.embed_dim.is_multiple_of(4 * self.motion_history_len))
        {
            return Err(invalid!(
                "embed_dim {} must be a positive multiple of 4 × motion_history_len ({})",
                self.embed_dim,
                4 * self.motion_history_len
            ));
        }
        if self.hidden_dim == 0 {
            return Err(invalid!("hidden_dim must be positive"));
        }
        self.encoder_config().validate()
    }

    /// Ring entries needed to serve every history reference.
    pub fn ring_capacity(&self) -> usize {
        let back = self
            .history_offsets
            .iter()
            .filter_map(|h| match h {
                HistoryRef::Back(k) => Some(*k),
                HistoryRef::Anchor => None,
            })
            .max()
            .unwrap_or(0);
        back.max(self.motion_history_len).max(1)
    }

    /// Frequencies per embedded scalar.
    pub fn embed_frequencies(&self) -> Vec<f64> {
        if self.motion_history_len == 0 {
            return Vec::new();
        }
        let f = self.embed_dim / (4 * self.motion_history_len);
        // Periods 2^f .. 2 pixels.
        (0..f).map(|i| core::f64::consts::PI / (1u64 << (f - 1 - i)) as f64).collect()
    }

    /// Per-slot correlation width `L · R²`.
    pub fn corr_width(&self) -> usize {
        self.levels * self.patch_size * self.patch_size
    }
}

/// One ring entry: level-0 features of a past frame and where its points were.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub features: Tensor,
    pub points: Vec<Point>,
}

/// Per-sequence streaming state. Its size depends only on the configuration
/// and the number of points, never on how many frames have been seen.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    anchor: HistoryEntry,
    /// Most recent frame first.
    ring: VecDeque<HistoryEntry>,
    capacity: usize,
    /// Index of the most recently ingested frame.
    t: usize,
}

impl TrackerState {
    /// Build a state from frame-0 features and points; the ring is padded
    /// with copies of frame 0.
    pub fn new(features0: Tensor, points: Vec<Point>, capacity: usize) -> Self {
        let anchor = HistoryEntry { features: features0, points };
        let mut ring = VecDeque::with_capacity(capacity);
        for _ in 0..capacity {
            ring.push_back(anchor.clone());
        }
        TrackerState { anchor, ring, capacity, t: 0 }
    }

    pub fn frame_index(&self) -> usize {
        self.t
    }
    pub fn num_points(&self) -> usize {
        self.anchor.points.len()
    }
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn occupancy(&self) -> usize {
        self.ring.len()
    }
    pub fn anchor(&self) -> &HistoryEntry {
        &self.anchor
    }

    /// Entry for the frame `back` steps before the *next* frame (`back ≥ 1`).
    pub fn back(&self, back: usize) -> &HistoryEntry {
        &self.ring[back - 1]
    }

    pub fn resolve(&self, h: HistoryRef) -> &HistoryEntry {
        match h {
            HistoryRef::Anchor => &self.anchor,
            HistoryRef::Back(k) => self.back(k),
        }
    }

    /// Latest positions, `p_{t}` for the last ingested frame.
    pub fn last_points(&self) -> &[Point] {
        &self.ring[0].points
    }

    /// Push a processed frame, evicting the oldest entry.
    pub fn advance(&mut self, features: Tensor, points: Vec<Point>) {
        debug_assert_eq!(points.len(), self.num_points());
        self.ring.pop_back();
        self.ring.push_front(HistoryEntry { features, points });
        self.t += 1;
    }

    /// Heap bytes held by the state.
    pub fn footprint_bytes(&self) -> usize {
        let entry = |e: &HistoryEntry| e.features.heap_bytes() + e.points.capacity() * core::mem::size_of::<Point>();
        entry(&self.anchor)
            + self.ring.iter().map(entry).sum::<usize>()
            + self.ring.capacity() * core::mem::size_of::<HistoryEntry>()
    }
}

#[derive(Debug, Clone)]
struct HeadIds {
    stem_w: ParamId,
    stem_b: ParamId,
    blocks: Vec<[ParamId; 4]>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Result of one tracked frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Final estimate `p_t = p_t^K`.
    pub points: Vec<Point>,
    /// All iterates `p_t^0 ..= p_t^K`, when requested.
    pub iterates: Option<Vec<Vec<Point>>>,
}

/// Graph handles produced while recording one frame.
pub struct FrameForward {
    /// `p_t^0 ..= p_t^K`, each `[n, 2]`.
    pub iterates: Vec<Var>,
    /// The initial iterate (an input node).
    pub init: Var,
    pub levels: Vec<Var>,
}

/// Model weights plus architecture; cheap to share read-only across
/// sequences.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    encoder: Encoder,
    head: HeadIds,
    pub params: ParamStore,
}

fn pts_tensor(points: &[Point]) -> Tensor {
    let mut v = Vec::with_capacity(points.len() * 2);
    for p in points {
        v.push(p.x);
        v.push(p.y);
    }
    Tensor::from_vec(&[points.len(), 2], v)
}

pub(crate) fn tensor_points(t: &Tensor) -> Vec<Point> {
    t.data().chunks(2).map(|c| Point::new(c[0], c[1])).collect()
}

impl Tracker {
    /// Fresh model: He-initialised encoder and head, zero final layer (so
    /// the untrained tracker predicts no motion).
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&cfg.encoder_config(), &mut params, &mut rng)?;
        let head = Self::build_head(&cfg, &mut params, &mut rng);
        Ok(Tracker { cfg, encoder, head, params })
    }

    fn build_head<R: Rng + ?Sized>(cfg: &TrackerConfig, store: &mut ParamStore, rng: &mut R) -> HeadIds {
        let d_in = cfg.corr_width() + cfg.embed_dim;
        let hd = cfg.hidden_dim;
        let slots = cfg.history_offsets.len();
        let stem_w = store.add_he("head.stem.w", &[hd, d_in], d_in, rng);
        let stem_b = store.add_zeros("head.stem.b", &[hd]);
        let mut blocks = Vec::with_capacity(cfg.resnet_blocks);
        for i in 0..cfg.resnet_blocks {
            let w1 = store.add_he(format!("head.block{i}.conv1.w"), &[hd, 3, hd], 3 * hd, rng);
            let b1 = store.add_zeros(format!("head.block{i}.conv1.b"), &[hd]);
            // Second conv starts small so each block begins near the identity.
            let w2 = store.add_he(format!("head.block{i}.conv2.w"), &[hd, 3, hd], 3 * hd, rng);
            store.get_mut(w2).scale(0.1);
            let b2 = store.add_zeros(format!("head.block{i}.conv2.b"), &[hd]);
            blocks.push([w1, b1, w2, b2]);
        }
        let out_w = store.add_zeros("head.out.w", &[2, slots * hd]);
        let out_b = store.add_zeros("head.out.b", &[2]);
        HeadIds { stem_w, stem_b, blocks, out_w, out_b }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Inference pyramid for one frame.
    pub fn encode(&self, frame: &GrayImage, frame_index: usize) -> Result<FeaturePyramid> {
        self.encoder.encode(&self.params, frame, frame_index)
    }

    /// Start tracking `points` on `frame0`.
    pub fn init(&self, frame0: &GrayImage, points: &PointSet) -> Result<TrackerState> {
        if points.is_empty() {
            return Err(invalid!("cannot track an empty point set"));
        }
        for (i, p) in points.iter().enumerate() {
            if !frame0.contains(*p) {
                return Err(invalid!("point {i} at ({}, {}) lies outside frame 0", p.x, p.y));
            }
        }
        let pyr = self.encode(frame0, 0)?;
        let features0 = pyr.levels.into_iter().next().expect("at least one level");
        Ok(TrackerState::new(features0, points.as_slice().to_vec(), self.cfg.ring_capacity()))
    }

    /// History features `[n, |history|, C]` for the next frame: level-0
    /// features of each history frame sampled at that frame's points.
    pub fn sample_history_features(&self, state: &TrackerState) -> Tensor {
        let n = state.num_points();
        let slots = &self.cfg.history_offsets;
        let c = state.anchor.features.dim(0);
        let scale = 1.0 / self.cfg.encoder_stride as f64;
        let mut out = Vec::with_capacity(n * slots.len() * c);
        let entries: Vec<&HistoryEntry> = slots.iter().map(|&h| state.resolve(h)).collect();
        for i in 0..n {
            for e in &entries {
                let (h, w) = (e.features.dim(1), e.features.dim(2));
                let p = e.points[i];
                let tap = BilinearTap::new(p.x * scale, p.y * scale, w, h);
                for ch in 0..c {
                    out.push(tap.sample(&e.features.data()[ch * h * w..(ch + 1) * h * w], w));
                }
            }
        }
        Tensor::from_vec(&[n, slots.len(), c], out)
    }

    /// Correlations `[n, |history|, L·R²]` of history features against
    /// patches of each level around `p` (`[n, 2]`, pixels).
    pub fn correlation_features(&self, g: &mut Graph, hist: Var, levels: &[Var], p: Var) -> Var {
        let n = g.value(p).dim(0);
        let r = self.cfg.patch_size;
        let radius = r / 2;
        let stride = self.cfg.encoder_stride as f64;
        let mut per_level = Vec::with_capacity(levels.len());
        for (l, &map) in levels.iter().enumerate() {
            let cell = stride * (1u64 << l) as f64;
            let grid = g.grid(p, radius, cell);
            let samples = g.sample(map, grid, 1.0 / cell);
            let c = g.value(samples).dim(1);
            let patches = g.reshape(samples, &[n, r * r, c]);
            per_level.push(g.corr(patches, hist));
        }
        if per_level.len() == 1 {
            per_level[0]
        } else {
            g.concat(&per_level)
        }
    }

    /// Sinusoidal embedding `[n, E]` of the flows `p − p_{t−j}`, `j = 1..=m`.
    pub fn motion_embedding(&self, g: &mut Graph, state: &TrackerState, p: Var) -> Option<Var> {
        let m = self.cfg.motion_history_len;
        if m == 0 {
            return None;
        }
        let mut flows = Vec::with_capacity(m);
        for j in 1..=m {
            let prev = g.input(pts_tensor(&state.back(j).points), false);
            flows.push(g.sub(p, prev));
        }
        let cat = if flows.len() == 1 { flows[0] } else { g.concat(&flows) };
        Some(g.sin_embed(cat, &self.cfg.embed_frequencies()))
    }

    /// Per-point update `Δp` (`[n, 2]`) from correlations and motion embedding.
    pub fn update_head(&self, g: &mut Graph, corr: Var, motion: Option<Var>) -> Var {
        let s = g.value(corr).shape().to_vec();
        let (n, slots) = (s[0], s[1]);
        let tokens = match motion {
            Some(m) => {
                let rep = g.repeat_rows(m, slots);
                g.concat(&[corr, rep])
            }
            None => corr,
        };
        let w = g.param(&self.params, self.head.stem_w);
        let b = g.param(&self.params, self.head.stem_b);
        let mut h = g.linear(tokens, w, b);
        h = g.relu(h);
        for blk in &self.head.blocks {
            let [w1, b1, w2, b2] = *blk;
            let (w1, b1) = (g.param(&self.params, w1), g.param(&self.params, b1));
            let (w2, b2) = (g.param(&self.params, w2), g.param(&self.params, b2));
            let mut m = g.conv1d(h, w1, b1);
            m = g.relu(m);
            m = g.conv1d(m, w2, b2);
            let sum = g.add(h, m);
            h = g.relu(sum);
        }
        let hd = self.cfg.hidden_dim;
        let flat = g.reshape(h, &[n, slots * hd]);
        let ow = g.param(&self.params, self.head.out_w);
        let ob = g.param(&self.params, self.head.out_b);
        g.linear(flat, ow, ob)
    }

    /// Record the encoder and `K` updates for `frame` on `g`. `init` gives
    /// `p_t^0` (normally the previous positions); `init_grad` makes it a
    /// differentiable input.
    pub fn forward_frame(
        &self,
        g: &mut Graph,
        state: &TrackerState,
        frame: &GrayImage,
        init: &[Point],
        init_grad: bool,
    ) -> Result<FrameForward> {
        if init.len() != state.num_points() {
            return Err(invalid!("expected {} initial points, got {}", state.num_points(), init.len()));
        }
        let levels = self.encoder.forward(g, &self.params, frame)?;
        let hist = g.input(self.sample_history_features(state), false);
        let init_var = g.input(pts_tensor(init), init_grad);
        let mut p = init_var;
        let mut iterates = Vec::with_capacity(self.cfg.iterations + 1);
        iterates.push(p);
        for _ in 0..self.cfg.iterations {
            let lookup = if self.cfg.detach_iterates {
                let v = g.value(p).clone();
                g.input(v, false)
            } else {
                p
            };
            let corr = self.correlation_features(g, hist, &levels, lookup);
            let motion = self.motion_embedding(g, state, lookup);
            let delta = self.update_head(g, corr, motion);
            p = g.add(p, delta);
            iterates.push(p);
        }
        Ok(FrameForward { iterates, init: init_var, levels })
    }

    /// Track one new frame and advance the state.
    pub fn step(&self, state: &mut TrackerState, frame: &GrayImage, keep_iterates: bool) -> Result<StepOutput> {
        let mut g = Graph::inference();
        let init = state.last_points().to_vec();
        let fwd = self.forward_frame(&mut g, state, frame, &init, false)?;
        let last = *fwd.iterates.last().unwrap();
        let points = tensor_points(g.value(last));
        let iterates = keep_iterates.then(|| fwd.iterates.iter().map(|&v| tensor_points(g.value(v))).collect());
        let features = g.value(fwd.levels[0]).clone();
        drop(g);
        state.advance(features, points.clone());
        Ok(StepOutput { points, iterates })
    }

    /// Track `points` through `video`, one frame at a time.
    pub fn track_sequence(&self, video: &VideoSequence, points: &PointSet) -> Result<TrajectorySet> {
        self.track_frames(video.frames().iter(), points)
    }

    /// Streaming variant over any frame iterator.
    pub fn track_frames<'a, I>(&self, mut frames: I, points: &PointSet) -> Result<TrajectorySet>
    where
        I: Iterator<Item = &'a GrayImage>,
    {
        let first = frames.next().ok_or_else(|| invalid!("video has no frames"))?;
        let mut state = self.init(first, points)?;
        let mut rows = vec![points.as_slice().to_vec()];
        for frame in frames {
            rows.push(self.step(&mut state, frame, false)?.points);
        }
        TrajectorySet::from_frames(&rows, TrajectorySource::Model)
    }

    /// Tensor form of [`Tracker::correlation_features`]: `[n, |history|, L·R²]`.
    pub fn correlation_vector(&self, hist: &Tensor, pyramid: &FeaturePyramid, p: &[Point]) -> Tensor {
        let mut g = Graph::inference();
        let h = g.input(hist.clone(), false);
        let levels: Vec<Var> = pyramid.levels.iter().map(|l| g.input(l.clone(), false)).collect();
        let pv = g.input(pts_tensor(p), false);
        let out = self.correlation_features(&mut g, h, &levels, pv);
        g.value(out).clone()
    }

    /// Tensor form of [`Tracker::motion_embedding`]: `[n, E]`.
    pub fn motion_vector(&self, state: &TrackerState, p: &[Point]) -> Option<Tensor> {
        let mut g = Graph::inference();
        let pv = g.input(pts_tensor(p), false);
        let out = self.motion_embedding(&mut g, state, pv)?;
        Some(g.value(out).clone())
    }

    /// Tensor form of [`Tracker::update_head`]: `[n, 2]`.
    pub fn predict_update(&self, corr: &Tensor, motion: Option<&Tensor>) -> Tensor {
        let mut g = Graph::inference();
        let c = g.input(corr.clone(), false);
        let m = motion.map(|m| g.input(m.clone(), false));
        let out = self.update_head(&mut g, c, m);
        g.value(out).clone()
    }

    /// Summary of the architecture for logs.
    pub fn describe(&self) -> String {
        format!(
            "tracker: K={} R={} L={} history=[{}] motion={} embed={} stride={} C={} hidden={} blocks={} params={}",
            self.cfg.iterations,
            self.cfg.patch_size,
            self.cfg.levels,
            self.cfg.history_offsets.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            self.cfg.motion_history_len,
            self.cfg.embed_dim,
            self.cfg.encoder_stride,
            self.cfg.feature_dim,
            self.cfg.hidden_dim,
            self.cfg.resnet_blocks,
            self.params.num_scalars()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Penalty;
    use crate::params::Grads;
    use crate::simulator::speckle_image;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn tiny() -> TrackerConfig {
        TrackerConfig {
            iterations: 2,
            levels: 2,
            embed_dim: 24,
            encoder_stride: 4,
            feature_dim: 8,
            encoder_widths: vec![8, 8],
            image_height: 32,
            image_width: 32,
            hidden_dim: 16,
            resnet_blocks: 2,
            ..Default::default()
        }
    }

    fn randomize_head(t: &mut Tracker, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).unwrap();
        for name in ["head.out.w", "head.out.b"] {
            let id = t.params.find(name).unwrap();
            for v in t.params.get_mut(id).data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }

    fn pts(v: &[(f64, f64)]) -> PointSet {
        PointSet::new(v.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
    }

    fn video(n: usize, w: usize, seed: u64) -> VideoSequence {
        VideoSequence::new("v", (0..n).map(|i| speckle_image(w, w, seed + i as u64)).collect()).unwrap()
    }

    /// Plain bilinear interpolation, valid away from the border.
    fn bilerp(plane: &[f64], w: usize, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let at = |xx: f64, yy: f64| plane[yy as usize * w + xx as usize];
        (1.0 - fx) * (1.0 - fy) * at(x0, y0)
            + fx * (1.0 - fy) * at(x0 + 1.0, y0)
            + (1.0 - fx) * fy * at(x0, y0 + 1.0)
            + fx * fy * at(x0 + 1.0, y0 + 1.0)
    }

    #[test]
    fn history_ref_round_trip() {
        for (s, h) in [("0", HistoryRef::Anchor), ("t-4", HistoryRef::Back(4)), ("t-2", HistoryRef::Back(2))] {
            assert_eq!(s.parse::<HistoryRef>().unwrap(), h);
            assert_eq!(h.to_string(), s);
        }
        for bad in ["t-0", "t+2", "1", "", "t-x"] {
            assert!(bad.parse::<HistoryRef>().is_err(), "{bad}");
        }
    }

    #[test]
    fn defaults_and_validation() {
        let d = TrackerConfig::default();
        assert_eq!((d.iterations, d.patch_size, d.levels), (6, 3, 4));
        assert_eq!(d.ring_capacity(), 4);
        assert_eq!(d.embed_frequencies().len(), 8);
        d.validate().unwrap();
        let bad = [
            TrackerConfig { patch_size: 4, ..tiny() },
            TrackerConfig { iterations: 0, ..tiny() },
            TrackerConfig { history_offsets: vec![HistoryRef::Back(2)], ..tiny() },
            TrackerConfig { embed_dim: 20, ..tiny() },
        ];
        for c in bad {
            assert!(matches!(Tracker::new(c), Err(crate::Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn init_pads_ring_and_checks_points() {
        let t = Tracker::new(tiny()).unwrap();
        let f = speckle_image(32, 32, 1);
        let empty = PointSet::from_points_unchecked(vec![]);
        assert!(matches!(t.init(&f, &empty), Err(crate::Error::InvalidArgument(_))));
        assert!(t.init(&f, &pts(&[(40.0, 3.0)])).is_err());
        let p = pts(&[(10.0, 12.5)]);
        let s = t.init(&f, &p).unwrap();
        assert_eq!(s.num_points(), 1);
        assert_eq!(s.occupancy(), s.capacity());
        // All flows zero: sin 0 = 0, cos 0 = 1.
        let m = t.motion_vector(&s, s.last_points()).unwrap();
        for (i, v) in m.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn padded_history_features_identical() {
        let t = Tracker::new(tiny()).unwrap();
        let s = t.init(&speckle_image(32, 32, 2), &pts(&[(5.0, 7.0), (20.3, 11.9)])).unwrap();
        let h = t.sample_history_features(&s);
        assert_eq!(h.shape(), &[2, 3, 8]);
        for i in 0..2 {
            let row = &h.data()[i * 24..(i + 1) * 24];
            assert_eq!(row[0..8], row[8..16]);
            assert_eq!(row[0..8], row[16..24]);
        }
    }

    #[test]
    fn history_sampling_matches_ramp() {
        let t = Tracker::new(TrackerConfig { feature_dim: 2, ..tiny() }).unwrap();
        let (h, w) = (8, 8);
        let mut data = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = 0.5 * x as f64 + 1.0;
                data[h * w + y * w + x] = -0.25 * y as f64 + 2.0;
            }
        }
        let feats = Tensor::from_vec(&[2, h, w], data);
        let p0 = vec![Point::new(3.0, 9.0), Point::new(17.2, 5.5), Point::new(25.0, 22.1)];
        let mut s = TrackerState::new(feats.clone(), p0.clone(), 4);
        let p1 = vec![Point::new(6.6, 1.0), Point::new(10.0, 10.0), Point::new(12.4, 18.8)];
        s.advance(feats.clone(), p1.clone());
        s.advance(feats, p1.clone());
        // Slots: frame 0, t-4 (still padding), t-2 (= p1).
        let out = t.sample_history_features(&s);
        let expect = |p: Point| [0.5 * p.x / 4.0 + 1.0, -0.25 * p.y / 4.0 + 2.0];
        for i in 0..3 {
            for (slot, p) in [(0, p0[i]), (1, p0[i]), (2, p1[i])] {
                let e = expect(p);
                for c in 0..2 {
                    assert!((out.data()[i * 6 + slot * 2 + c] - e[c]).abs() < 1e-5);
                }
            }
        }
    }

    fn brute_correlation(cfg: &TrackerConfig, hist: &Tensor, pyr: &FeaturePyramid, p: &[Point]) -> Vec<f64> {
        let slots = hist.dim(1);
        let c = hist.dim(2);
        let r = cfg.patch_size as isize;
        let half = r / 2;
        let mut out = Vec::new();
        for (i, pt) in p.iter().enumerate() {
            for s in 0..slots {
                for (l, map) in pyr.levels.iter().enumerate() {
                    let (hh, ww) = (map.dim(1), map.dim(2));
                    let cell = (cfg.encoder_stride << l) as f64;
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let x = pt.x / cell + dx as f64;
                            let y = pt.y / cell + dy as f64;
                            let mut acc = 0.0;
                            for ch in 0..c {
                                let plane = &map.data()[ch * hh * ww..(ch + 1) * hh * ww];
                                acc += hist.data()[(i * slots + s) * c + ch] * bilerp(plane, ww, x, y);
                            }
                            out.push(acc);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn correlation_matches_brute_force() {
        let cfg = TrackerConfig { feature_dim: 4, image_height: 64, image_width: 64, ..tiny() };
        let t = Tracker::new(cfg.clone()).unwrap();
        let pyr = FeaturePyramid {
            levels: vec![rand_tensor(&[4, 16, 16], 1), rand_tensor(&[4, 8, 8], 2)],
            stride: 4,
            frame_index: 1,
        };
        let hist = rand_tensor(&[2, 3, 4], 3);
        let p = vec![Point::new(27.3, 30.1), Point::new(33.9, 22.45)];
        let got = t.correlation_vector(&hist, &pyr, &p);
        assert_eq!(got.shape(), &[2, 3, 18]);
        let want = brute_correlation(&cfg, &hist, &pyr, &p);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn one_hot_correlation_peaks_at_centre() {
        let cfg = TrackerConfig { feature_dim: 3, levels: 1, ..tiny() };
        let t = Tracker::new(cfg).unwrap();
        let mut data = vec![0.0; 3 * 8 * 8];
        for y in 0..8 {
            for x in 0..8 {
                let ch = if (x, y) == (5, 3) { 0 } else { 1 + (x + y) % 2 };
                data[ch * 64 + y * 8 + x] = 1.0;
            }
        }
        let pyr = FeaturePyramid { levels: vec![Tensor::from_vec(&[3, 8, 8], data)], stride: 4, frame_index: 1 };
        let hist = Tensor::from_vec(&[1, 1, 3], vec![1.0, 0.0, 0.0]);
        let c = t.correlation_vector(&hist, &pyr, &[Point::new(20.0, 12.0)]);
        let argmax = c.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, 4);
        assert_eq!(c.data()[4], 1.0);
        let zero = t.correlation_vector(&Tensor::zeros(&[1, 1, 3]), &pyr, &[Point::new(20.0, 12.0)]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn motion_embedding_separates_axes() {
        let t = Tracker::new(TrackerConfig { history_offsets: vec![HistoryRef::Anchor], ..tiny() }).unwrap();
        let f = speckle_image(32, 32, 3);
        let mut s = t.init(&f, &pts(&[(10.0, 10.0)])).unwrap();
        let feats = s.anchor().features.clone();
        for k in 1..=3 {
            s.advance(feats.clone(), vec![Point::new(10.0 - k as f64, 10.0)]);
        }
        // Ring now holds x = 7, 8, 9 (oldest to newest): flows from 10 are 1, 2, 3 along x.
        let ex = t.motion_vector(&s, &[Point::new(10.0, 10.0)]).unwrap();
        let mut s2 = t.init(&f, &pts(&[(10.0, 10.0)])).unwrap();
        for k in 1..=3 {
            s2.advance(feats.clone(), vec![Point::new(10.0, 10.0 - k as f64)]);
        }
        let ey = t.motion_vector(&s2, &[Point::new(10.0, 10.0)]).unwrap();
        assert_ne!(ex, ey);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn motion_embedding_bounded(dx in -500.0f64..500.0, dy in -500.0f64..500.0) {
            let t = Tracker::new(tiny()).unwrap();
            let s = TrackerState::new(Tensor::zeros(&[8, 8, 8]), vec![Point::new(0.0, 0.0)], 4);
            let e = t.motion_vector(&s, &[Point::new(dx, dy)]).unwrap();
            prop_assert_eq!(e.shape(), &[1, 24]);
            prop_assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn head_is_per_point() {
        let mut t = Tracker::new(tiny()).unwrap();
        let corr = rand_tensor(&[3, 3, 18], 4);
        let motion = rand_tensor(&[3, 24], 5);
        let zero = t.predict_update(&corr, Some(&motion));
        assert!(zero.data().iter().all(|&v| v == 0.0));
        randomize_head(&mut t, 6, 0.1);
        let d = t.predict_update(&corr, Some(&motion));
        // Permute rows 0,1,2 → 2,0,1 and duplicate row 1.
        let order = [2usize, 0, 1, 1];
        let pick = |x: &Tensor, w: usize| {
            let mut v = Vec::new();
            for &i in &order {
                v.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
            }
            v
        };
        let c2 = Tensor::from_vec(&[4, 3, 18], pick(&corr, 54));
        let m2 = Tensor::from_vec(&[4, 24], pick(&motion, 24));
        let d2 = t.predict_update(&c2, Some(&m2));
        for (a, b) in d2.data().iter().zip(pick(&d, 2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_is_identity_tracker() {
        let t = Tracker::new(tiny()).unwrap();
        let v = video(5, 32, 10);
        let p = pts(&[(4.0, 5.0), (20.5, 30.0)]);
        let traj = t.track_sequence(&v, &p).unwrap();
        for f in 0..5 {
            assert_eq!(traj.frame(f), p.as_slice());
        }
        let one = VideoSequence::new("one", vec![v.frame(0).clone()]).unwrap();
        let traj = t.track_sequence(&one, &p).unwrap();
        assert_eq!(traj.num_frames(), 1);
        assert_eq!(traj.frame(0), p.as_slice());
    }

    #[test]
    fn step_rejects_wrong_frame_size() {
        let t = Tracker::new(tiny()).unwrap();
        let mut s = t.init(&speckle_image(32, 32, 1), &pts(&[(3.0, 3.0)])).unwrap();
        let r = t.step(&mut s, &speckle_image(40, 32, 2), false);
        assert!(matches!(r, Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn step_exposes_iterates_and_keeps_anchor() {
        let mut t = Tracker::new(tiny()).unwrap();
        randomize_head(&mut t, 7, 0.05);
        let v = video(3, 32, 20);
        let mut s = t.init(v.frame(0), &pts(&[(12.0, 14.0)])).unwrap();
        let anchor = s.anchor().clone();
        let out = t.step(&mut s, v.frame(1), true).unwrap();
        let its = out.iterates.unwrap();
        assert_eq!(its.len(), 3);
        assert_eq!(its[0], vec![Point::new(12.0, 14.0)]);
        assert_eq!(its[2], out.points);
        assert_eq!(s.last_points(), &out.points[..]);
        assert_eq!(s.frame_index(), 1);
        assert_eq!(s.anchor(), &anchor);
        assert!(t.step(&mut s, v.frame(2), false).unwrap().iterates.is_none());
    }

    #[test]
    fn state_size_constant_over_time() {
        let mut t = Tracker::new(tiny()).unwrap();
        randomize_head(&mut t, 8, 0.05);
        let f = speckle_image(32, 32, 5);
        let g = speckle_image(32, 32, 6);
        let mut s = t.init(&f, &pts(&[(12.0, 14.0), (3.0, 30.0)])).unwrap();
        let mut sizes = Vec::new();
        for i in 0..200 {
            t.step(&mut s, if i % 2 == 0 { &g } else { &f }, false).unwrap();
            sizes.push(s.footprint_bytes());
        }
        assert_eq!(sizes[9], sizes[199]);
        assert_eq!(s.occupancy(), s.capacity());
    }

    #[test]
    fn permuting_points_permutes_trajectories() {
        let mut t = Tracker::new(tiny()).unwrap();
        randomize_head(&mut t, 9, 0.05);
        let v = video(4, 32, 30);
        let a = t.track_sequence(&v, &pts(&[(5.0, 6.0), (17.5, 9.0), (25.0, 25.0)])).unwrap();
        let b = t.track_sequence(&v, &pts(&[(25.0, 25.0), (5.0, 6.0), (17.5, 9.0)])).unwrap();
        for f in 0..4 {
            let (fa, fb) = (a.frame(f), b.frame(f));
            for (i, j) in [(0, 1), (1, 2), (2, 0)] {
                assert!(fa[i].dist(fb[j]) < 1e-9);
            }
        }
    }

    #[test]
    fn padding_equals_literal_frame_zero_history() {
        let mut t = Tracker::new(tiny()).unwrap();
        randomize_head(&mut t, 11, 0.05);
        let v = video(4, 32, 40);
        let p = pts(&[(9.0, 11.0), (22.0, 4.5)]);
        let mut padded = t.init(v.frame(0), &p).unwrap();
        let f0 = t.encode(v.frame(0), 0).unwrap().levels.remove(0);
        let mut literal = TrackerState::new(Tensor::zeros(&[1]), vec![], 0);
        literal.anchor = HistoryEntry { features: f0.clone(), points: p.as_slice().to_vec() };
        literal.capacity = padded.capacity();
        for _ in 0..padded.capacity() {
            literal.ring.push_front(HistoryEntry { features: f0.clone(), points: p.as_slice().to_vec() });
            literal.t += 1;
        }
        for f in 1..4 {
            let a = t.step(&mut padded, v.frame(f), false).unwrap();
            let b = t.step(&mut literal, v.frame(f), false).unwrap();
            assert_eq!(a.points, b.points);
        }
    }

    fn gradcheck_config() -> TrackerConfig {
        TrackerConfig {
            iterations: 2,
            levels: 2,
            embed_dim: 24,
            encoder_stride: 4,
            feature_dim: 8,
            encoder_widths: vec![8, 8],
            image_height: 64,
            image_width: 64,
            hidden_dim: 8,
            resnet_blocks: 1,
            ..Default::default()
        }
    }

    fn frame_loss(t: &Tracker, s: &TrackerState, frame: &GrayImage, init: &[Point], target: &[f64]) -> (f64, Vec<f64>, Grads) {
        let mut g = Graph::new(true);
        let fwd = t.forward_frame(&mut g, s, frame, init, true).unwrap();
        let mask = vec![true; init.len()];
        let terms: Vec<(Var, f64)> = fwd
            .iterates
            .iter()
            .enumerate()
            .map(|(k, &p)| (g.point_loss(p, target, &mask, Penalty::Huber { delta: 6.0 }, 1.0), 0.8f64.powi(2 - k as i32)))
            .collect();
        let loss = g.weighted_sum(&terms);
        g.backward(loss);
        let mut grads = Grads::zeros_like(&t.params);
        g.accumulate_param_grads(&mut grads);
        let gi = g.grad(fwd.init).unwrap().data().to_vec();
        (g.value(loss).item(), gi, grads)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut t = Tracker::new(gradcheck_config()).unwrap();
        randomize_head(&mut t, 12, 0.3);
        let v = video(2, 64, 50);
        let p = pts(&[(20.3, 31.7), (40.6, 25.2)]);
        let s = t.init(v.frame(0), &p).unwrap();
        let init = vec![Point::new(21.1, 30.4), Point::new(39.7, 26.35)];
        let target = [23.0, 29.0, 38.0, 27.5];
        let (_, gi, grads) = frame_loss(&t, &s, v.frame(1), &init, &target);
        let h = 1e-5;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-3);
        for k in 0..4 {
            let mut plus = init.clone();
            let mut minus = init.clone();
            if k % 2 == 0 {
                plus[k / 2].x += h;
                minus[k / 2].x -= h;
            } else {
                plus[k / 2].y += h;
                minus[k / 2].y -= h;
            }
            let fd = (frame_loss(&t, &s, v.frame(1), &plus, &target).0
                - frame_loss(&t, &s, v.frame(1), &minus, &target).0)
                / (2.0 * h);
            assert!(close(fd, gi[k]), "point coord {k}: fd {fd} vs {}", gi[k]);
        }
        for name in ["head.out.w", "head.stem.w", "encoder.proj.w", "encoder.stem.w"] {
            let id = t.params.find(name).unwrap();
            for j in [0usize, 3] {
                let orig = t.params.get(id).data()[j];
                t.params.get_mut(id).data_mut()[j] = orig + h;
                let lp = frame_loss(&t, &s, v.frame(1), &init, &target).0;
                t.params.get_mut(id).data_mut()[j] = orig - h;
                let lm = frame_loss(&t, &s, v.frame(1), &init, &target).0;
                t.params.get_mut(id).data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(id).data()[j];
                assert!(close(fd, an), "{name}[{j}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn detached_lookups_pass_identity_gradient() {
        let mut t = Tracker::new(TrackerConfig { detach_iterates: true, ..gradcheck_config() }).unwrap();
        randomize_head(&mut t, 13, 0.3);
        let v = video(2, 64, 60);
        let p = pts(&[(20.0, 30.0)]);
        let s = t.init(v.frame(0), &p).unwrap();
        let init = vec![Point::new(20.5, 30.5)];
        let mut g = Graph::new(true);
        let fwd = t.forward_frame(&mut g, &s, v.frame(1), &init, true).unwrap();
        let last = *fwd.iterates.last().unwrap();
        let loss = g.point_loss(last, &[0.0, 0.0], &[true], Penalty::L1, 1.0);
        g.backward(loss);
        let pk = g.value(last).data().to_vec();
        let gi = g.grad(fwd.init).unwrap().data().to_vec();
        assert_eq!(gi, vec![pk[0].signum(), pk[1].signum()]);
    }
}
