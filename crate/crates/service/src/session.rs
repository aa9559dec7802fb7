//! Session state and the replayable interaction logic, independent of HTTP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use verse_core::clicks::{Click, ClickSet, Polarity};
use verse_core::dataio::decode_image;
use verse_core::encoders::FeaturePyramid;
use verse_core::eval::Segmenter;
use verse_core::graph::Resampler;
use verse_core::mask::{BinaryMask, Rle};
use verse_core::tensor::Tensor;
use verse_core::{Mode, Verse32};

use crate::error::ApiError;

/// Side length used when an upload has to be resized.
pub const RESIZED_SIDE: usize = 256;

#[derive(Clone, Debug)]
pub struct Limits {
    /// Largest accepted side of an uploaded image, before any resizing.
    pub max_side: usize,
    /// Uploads kept at native size must fit within this side.
    pub native_max_side: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { max_side: 8192, native_max_side: 512 }
    }
}

/// How a target's masks are produced: from the automatic mask refined by
/// clicks, or purely from clicks starting with an empty mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lineage {
    Auto,
    Interactive,
}

#[derive(Clone, Debug)]
pub struct TargetState {
    pub lineage: Lineage,
    pub clicks: ClickSet,
    pub probs: Tensor<f64>,
}

impl TargetState {
    pub fn mode(&self) -> Mode {
        match (self.lineage, self.clicks.is_empty()) {
            (Lineage::Interactive, _) => Mode::Interactive,
            (Lineage::Auto, true) => Mode::Auto,
            (Lineage::Auto, false) => Mode::Refine,
        }
    }

    pub fn mask(&self) -> BinaryMask {
        let s = self.probs.shape();
        BinaryMask::from_probs(s[0], s[1], self.probs.data(), 0.5).expect("shape")
    }

    /// Mean of max(p, 1 - p) over the map.
    pub fn mean_confidence(&self) -> f64 {
        let d = self.probs.data();
        d.iter().map(|&p| p.max(1.0 - p)).sum::<f64>() / d.len().max(1) as f64
    }
}

pub struct Session {
    pub id: String,
    pub image: Tensor<f64>,
    pub original: (usize, usize),
    /// Working size divided by original size, per axis (rows, columns).
    pub scale: (f64, f64),
    pub conversion: Option<String>,
    pyramid: FeaturePyramid<f32>,
    pub targets: BTreeMap<usize, TargetState>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClickEcho {
    pub x: usize,
    pub y: usize,
    pub polarity: Polarity,
    pub order: usize,
}

impl From<Click> for ClickEcho {
    fn from(c: Click) -> Self {
        Self { x: c.x, y: c.y, polarity: c.polarity, order: c.order }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TargetView {
    pub target_id: usize,
    /// 1 automatic, 2 refined automatic, 3 interactive.
    pub mode: Mode,
    pub lineage: Lineage,
    pub clicks: Vec<ClickEcho>,
    pub rle: Rle,
    pub mean_confidence: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub original_height: usize,
    pub original_width: usize,
    pub scale: (f64, f64),
    pub conversion: Option<String>,
    pub targets: Vec<TargetView>,
}

/// Gray image in [0, 1] at working resolution, plus what was done to it.
pub struct PreparedImage {
    pub image: Tensor<f64>,
    pub original: (usize, usize),
    pub scale: (f64, f64),
    pub conversion: Option<String>,
}

/// Decodes a PNG; keeps it as is when both sides are multiples of 8 and
/// within `native_max_side`, otherwise resamples to 256x256.
pub fn prepare_image(png: &[u8], limits: &Limits) -> Result<PreparedImage, ApiError> {
    let d = decode_image(png).map_err(|e| ApiError::bad_image(e.to_string()))?;
    let (h, w) = (d.height, d.width);
    if h == 0 || w == 0 {
        return Err(ApiError::bad_image("image has no pixels"));
    }
    if h > limits.max_side || w > limits.max_side {
        return Err(ApiError::limit(format!("image {w}x{h} exceeds the {0}x{0} upload limit", limits.max_side)));
    }
    let keep = h % 8 == 0 && w % 8 == 0 && h <= limits.native_max_side && w <= limits.native_max_side;
    let (nh, nw, gray) = if keep {
        (h, w, d.gray)
    } else {
        let r = Resampler::<f64>::new((h, w), (RESIZED_SIDE, RESIZED_SIDE));
        (RESIZED_SIDE, RESIZED_SIDE, r.apply(&d.gray, 1))
    };
    let image = Tensor::from_vec(&[nh, nw], gray.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("shape");
    Ok(PreparedImage { image, original: (h, w), scale: (nh as f64 / h as f64, nw as f64 / w as f64), conversion: d.conversion })
}

/// Reproduces a target's probabilities from its lineage and click history.
pub fn replay(model: &Verse32, pyramid: &FeaturePyramid<f32>, hw: (usize, usize), target: usize, lineage: Lineage, history: &[Click]) -> Result<TargetState, ApiError> {
    let mut clicks = ClickSet::new();
    let mut probs = match lineage {
        Lineage::Auto => model.segment(pyramid, Mode::Auto, target, &clicks, &Tensor::zeros(&[hw.0, hw.1]))?,
        Lineage::Interactive => Tensor::zeros(&[hw.0, hw.1]),
    };
    let mode = if lineage == Lineage::Auto { Mode::Refine } else { Mode::Interactive };
    for &c in history {
        clicks.push(Click::new(c.x, c.y, c.polarity)).map_err(|e| ApiError::conflict("duplicate_click", e.to_string()))?;
        probs = model.segment(pyramid, mode, target, &clicks, &probs)?;
    }
    Ok(TargetState { lineage, clicks, probs })
}

impl Session {
    pub fn new(id: String, model: &Verse32, prepared: PreparedImage) -> Result<Self, ApiError> {
        let pyramid = model.prepare(&prepared.image)?;
        Ok(Self {
            id,
            image: prepared.image,
            original: prepared.original,
            scale: prepared.scale,
            conversion: prepared.conversion,
            pyramid,
            targets: BTreeMap::new(),
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    fn check_target(model: &Verse32, target: usize, names: &BTreeMap<usize, String>) -> Result<(), ApiError> {
        if target < model.num_targets() {
            Ok(())
        } else {
            Err(ApiError::unknown_target(target, names))
        }
    }

    /// Automatic segmentation; resets the target's clicks.
    pub fn auto_segment(&mut self, model: &Verse32, target: usize, names: &BTreeMap<usize, String>) -> Result<&TargetState, ApiError> {
        Self::check_target(model, target, names)?;
        let state = replay(model, &self.pyramid, self.hw(), target, Lineage::Auto, &[])?;
        self.targets.insert(target, state);
        Ok(&self.targets[&target])
    }

    /// Maps original-image coordinates to the working grid.
    pub fn to_working(&self, x: f64, y: f64) -> Result<(usize, usize), ApiError> {
        let (oh, ow) = self.original;
        if !(x >= 0.0 && y >= 0.0 && x < ow as f64 && y < oh as f64) {
            return Err(ApiError::unprocessable("out_of_bounds", format!("click ({x}, {y}) outside the {ow}x{oh} image")));
        }
        let (h, w) = self.hw();
        let cx = ((x * self.scale.1).floor() as usize).min(w - 1);
        let cy = ((y * self.scale.0).floor() as usize).min(h - 1);
        Ok((cx, cy))
    }

    /// Adds a click and reruns the decoder with the full history and the
    /// previous mask. `mode_override` (2 or 3) is honoured only while the
    /// target has no clicks.
    pub fn add_click(
        &mut self,
        model: &Verse32,
        target: usize,
        names: &BTreeMap<usize, String>,
        x: f64,
        y: f64,
        polarity: Polarity,
        mode_override: Option<Mode>,
    ) -> Result<&TargetState, ApiError> {
        Self::check_target(model, target, names)?;
        let (cx, cy) = self.to_working(x, y)?;
        let cap = model.config().max_clicks_per_polarity;
        let hw = self.hw();
        let fresh = self.targets.get(&target).is_none_or(|t| t.clicks.is_empty());
        match mode_override {
            None => {}
            Some(_) if !fresh => {
                return Err(ApiError::conflict("mode_locked", "the mode can only be chosen before the first click".into()));
            }
            Some(Mode::Interactive) => {
                self.targets.insert(target, replay(model, &self.pyramid, hw, target, Lineage::Interactive, &[])?);
            }
            Some(Mode::Refine) => {
                if self.targets.get(&target).is_none_or(|t| t.lineage != Lineage::Auto) {
                    self.targets.insert(target, replay(model, &self.pyramid, hw, target, Lineage::Auto, &[])?);
                }
            }
            Some(Mode::Auto) => {
                return Err(ApiError::bad_request("mode override must be 2 or 3".into()));
            }
        }
        let state = match self.targets.remove(&target) {
            Some(s) => s,
            None => replay(model, &self.pyramid, hw, target, Lineage::Interactive, &[])?,
        };
        let mut next = state.clone();
        let result = (|| {
            if next.clicks.of(polarity).len() >= cap {
                return Err(ApiError::limit(format!("at most N1 = {cap} clicks per polarity")));
            }
            next.clicks.push(Click::new(cx, cy, polarity)).map_err(|e| ApiError::conflict("duplicate_click", e.to_string()))?;
            let mode = if next.lineage == Lineage::Auto { Mode::Refine } else { Mode::Interactive };
            next.probs = model.segment(&self.pyramid, mode, target, &next.clicks, &state.probs)?;
            Ok(())
        })();
        match result {
            Ok(()) => {
                self.targets.insert(target, next);
                Ok(&self.targets[&target])
            }
            Err(e) => {
                self.targets.insert(target, state);
                Err(e)
            }
        }
    }

    /// Drops the last click and replays; `false` when there was nothing to undo.
    /// Undoing the only click of an interactive target forgets the target.
    pub fn undo(&mut self, model: &Verse32, target: usize, names: &BTreeMap<usize, String>) -> Result<(bool, Option<&TargetState>), ApiError> {
        Self::check_target(model, target, names)?;
        let hw = self.hw();
        let Some(state) = self.targets.get(&target) else { return Ok((false, None)) };
        let mut history = state.clicks.history();
        if history.pop().is_none() {
            return Ok((false, self.targets.get(&target)));
        }
        let lineage = state.lineage;
        if history.is_empty() && lineage == Lineage::Interactive {
            // back to a target that was never touched
            self.targets.remove(&target);
            return Ok((true, None));
        }
        let replayed = replay(model, &self.pyramid, hw, target, lineage, &history)?;
        self.targets.insert(target, replayed);
        Ok((true, self.targets.get(&target)))
    }

    pub fn target_view(&self, target: usize) -> Option<TargetView> {
        self.targets.get(&target).map(|t| view(target, t))
    }

    pub fn view(&self) -> SessionView {
        let (h, w) = self.hw();
        SessionView {
            session_id: self.id.clone(),
            height: h,
            width: w,
            original_height: self.original.0,
            original_width: self.original.1,
            scale: self.scale,
            conversion: self.conversion.clone(),
            targets: self.targets.iter().map(|(&t, s)| view(t, s)).collect(),
        }
    }
}

pub fn view(target: usize, t: &TargetState) -> TargetView {
    TargetView {
        target_id: target,
        mode: t.mode(),
        lineage: t.lineage,
        clicks: t.clicks.history().into_iter().map(ClickEcho::from).collect(),
        rle: t.mask().to_rle(),
        mean_confidence: t.mean_confidence(),
    }
}
