//! Query construction: object-query banks, sparse positional click queries,
//! semantic feature queries and per-mode assembly.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::{PaddedClicks, Polarity};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{window_taps, Graph, ParamId, ParamStore, Var};
use crate::nn::{init_tensor, Init, Mlp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Working regime of the shared model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Mode {
    /// Object queries only.
    Auto,
    /// Object queries plus click queries refining the automatic mask.
    Refine,
    /// Click queries only; the initial mask is empty.
    Interactive,
}

impl Mode {
    pub fn uses_object_queries(self) -> bool {
        !matches!(self, Mode::Interactive)
    }

    pub fn uses_clicks(self) -> bool {
        !matches!(self, Mode::Auto)
    }
}

impl TryFrom<u8> for Mode {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Mode::Auto),
            2 => Ok(Mode::Refine),
            3 => Ok(Mode::Interactive),
            _ => Err(format!("mode must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Mode> for u8 {
    fn from(m: Mode) -> u8 {
        match m {
            Mode::Auto => 1,
            Mode::Refine => 2,
            Mode::Interactive => 3,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mode{}", u8::from(*self))
    }
}

/// `N` groups of `M` learnable `C`-vectors, one group per target class.
#[derive(Clone, Debug)]
pub struct ObjectQueryBank {
    groups: Vec<ParamId>,
}

impl ObjectQueryBank {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let groups = (0..cfg.num_targets)
            .map(|i| {
                let t = init_tensor(&[cfg.queries_per_target, cfg.channels], 1, Init::Normal { std: 1.0 }, rng);
                store.add(format!("object_queries.{i}"), t)
            })
            .collect();
        Self { groups }
    }

    pub fn num_targets(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, target: usize) -> Result<ParamId> {
        self.groups.get(target).copied().ok_or(Error::Range { index: target, len: self.groups.len() })
    }
}

/// Sine/cosine features of normalised `(x, y)`: the first half of the
/// vector encodes x, the second half y, each as interleaved sin/cos pairs at
/// geometrically spaced frequencies.
pub fn sinusoidal_encoding<T: Scalar>(x: f64, y: f64, channels: usize) -> Vec<T> {
    let half = channels / 2;
    let nfreq = half / 2;
    let mut out = Vec::with_capacity(channels);
    for coord in [x, y] {
        for i in 0..nfreq {
            let t = if nfreq > 1 { i as f64 / (nfreq - 1) as f64 } else { 0.0 };
            let freq = std::f64::consts::PI * 32f64.powf(t);
            out.push(T::from_f64c((coord * freq).sin()));
            out.push(T::from_f64c((coord * freq).cos()));
        }
    }
    out
}

/// Positional encoding of click coordinates plus a learned polarity vector.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    positive: ParamId,
    negative: ParamId,
    channels: usize,
}

impl PointEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let positive = store.add("point_encoder.positive", init_tensor(&[c], 1, Init::Normal { std: 1.0 }, rng));
        let negative = store.add("point_encoder.negative", init_tensor(&[c], 1, Init::Normal { std: 1.0 }, rng));
        Self { positive, negative, channels: c }
    }

    pub fn embedding(&self, polarity: Polarity) -> ParamId {
        match polarity {
            Polarity::Positive => self.positive,
            Polarity::Negative => self.negative,
        }
    }

    /// `[N1, C]` sparse positional queries for one polarity; padding rows
    /// are exact zeros.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        padded: &PaddedClicks,
        polarity: Polarity,
        height: usize,
        width: usize,
    ) -> Var {
        let (points, valid) = padded.points(polarity);
        let c = self.channels;
        let mut pe = vec![T::zero(); points.len() * c];
        for (i, (&(x, y), &v)) in points.iter().zip(valid).enumerate() {
            if v {
                let enc = sinusoidal_encoding::<T>(x as f64 / width as f64, y as f64 / height as f64, c);
                pe[i * c..(i + 1) * c].copy_from_slice(&enc);
            }
        }
        let pe = g.input(Tensor::from_vec(&[points.len(), c], pe).expect("shape"));
        let emb = g.param(self.embedding(polarity));
        let x = g.add_bias(pe, emb);
        g.row_scale(x, validity_factors(valid))
    }
}

pub fn validity_factors<T: Scalar>(valid: &[bool]) -> Vec<T> {
    valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect()
}

/// Grid cell `(floor(x / s), floor(y / s))` of an image coordinate.
pub fn downscale_point(x: usize, y: usize, s: usize) -> (usize, usize) {
    (x / s, y / s)
}

/// Mean feature over the replicate-clamped `(2r+1)^2` window around the
/// down-scaled click position of a `[h, w, C]` level.
pub fn pooled_feature<T: Scalar>(level: &Tensor<T>, x: usize, y: usize, s: usize, r: usize) -> Vec<T> {
    let sh = level.shape();
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let (cx, cy) = downscale_point(x, y, s);
    let taps = window_taps(cx.min(w - 1), cy.min(h - 1), r, h, w);
    let mut out = vec![T::zero(); c];
    for idx in &taps {
        for (o, &v) in out.iter_mut().zip(&level.data()[idx * c..][..c]) {
            *o += v;
        }
    }
    let norm = T::one() / T::from_usize(taps.len()).expect("count");
    out.iter_mut().for_each(|o| *o *= norm);
    out
}

/// Window pooling followed by a per-scale MLP, plus the zero-initialised
/// linear carry of the previous scale's semantic queries.
#[derive(Clone, Debug)]
pub struct SemanticQueryHead {
    mlps: Vec<Mlp>,
    radius: usize,
}

impl SemanticQueryHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let mlps = (0..3)
            .map(|i| Mlp::new(store, &format!("semantic_queries.mlp{i}"), c, c, c, Init::Scaled { gain: 1.0 }, rng))
            .collect();
        Self { mlps, radius: cfg.window_radius }
    }

    /// `[n, C]` semantic queries on pyramid level `level` (0 = 1/8). Rows for
    /// padding entries are exact zeros.
    pub fn extract<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: Var,
        level: usize,
        points: &[(usize, usize)],
        valid: &[bool],
    ) -> Var {
        let s = crate::encoders::SCALES[level];
        let shape = g.shape(features).to_vec();
        let (h, w) = (shape[0], shape[1]);
        let centres: Vec<(usize, usize)> = points
            .iter()
            .zip(valid)
            .map(|(&(x, y), &v)| {
                if v {
                    let (cx, cy) = downscale_point(x, y, s);
                    (cx.min(w - 1), cy.min(h - 1))
                } else {
                    (0, 0)
                }
            })
            .collect();
        let pooled = g.window_pool(features, &centres, self.radius);
        let q = self.mlps[level].forward(g, pooled);
        g.row_scale(q, validity_factors(valid))
    }
}

/// One block of click queries travelling through the decoder.
#[derive(Clone, Debug)]
pub struct ClickBlock {
    pub queries: Var,
    pub points: Vec<(usize, usize)>,
    pub valid: Vec<bool>,
    /// Attends to predicted foreground (positive branch) or background.
    pub foreground: bool,
    /// Parameter branch: 0 = positive, 1 = negative.
    pub branch: usize,
    /// Semantic queries added at the previous layer.
    pub semantic: Option<Var>,
}

impl ClickBlock {
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// The assembled prompt for one forward pass.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub mode: Mode,
    pub target: Option<usize>,
    /// `[M, C]` object queries (Mode-1/2).
    pub object: Option<Var>,
    /// Positive then negative block, or a single merged block when the
    /// foreground/background split is ablated.
    pub clicks: Vec<ClickBlock>,
}

impl QuerySet {
    pub fn num_valid_clicks(&self) -> usize {
        self.clicks.iter().map(ClickBlock::num_valid).sum()
    }
}

/// Builds the layer-0 query set.
///
/// Click queries are the sum of sparse positional and (unless ablated)
/// semantic feature queries taken from the coarsest fused level. Mode-1
/// ignores clicks; Mode-3 has no object block.
#[allow(clippy::too_many_arguments)]
pub fn assemble<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    mode: Mode,
    target: Option<usize>,
    bank: &ObjectQueryBank,
    points: &PointEncoder,
    semantic: Option<&SemanticQueryHead>,
    padded: &PaddedClicks,
    coarsest: Var,
    image_hw: (usize, usize),
) -> Result<QuerySet> {
    let object = if mode.uses_object_queries() {
        let t = target.ok_or_else(|| Error::Contract(format!("{mode} requires a target id")))?;
        Some(g.param(bank.group(t)?))
    } else {
        None
    };
    let padded = if mode.uses_clicks() {
        padded.clone()
    } else {
        crate::clicks::pad(&Default::default(), padded.n1)?
    };
    let (h, w) = image_hw;
    let mut blocks = Vec::new();
    for (branch, polarity) in [Polarity::Positive, Polarity::Negative].into_iter().enumerate() {
        let (pts, valid) = padded.points(polarity);
        let mut q = points.encode(g, &padded, polarity, h, w);
        let mut sem = None;
        if let Some(head) = semantic.filter(|_| cfg.flags.use_semantic_queries) {
            let s = head.extract(g, coarsest, 0, pts, valid);
            q = g.add(q, s);
            sem = Some(s);
        }
        blocks.push(ClickBlock {
            queries: q,
            points: pts.to_vec(),
            valid: valid.to_vec(),
            foreground: polarity == Polarity::Positive,
            branch,
            semantic: sem,
        });
    }
    if !cfg.flags.split_fb_branches {
        let neg = blocks.pop().expect("two blocks");
        let pos = blocks.pop().expect("two blocks");
        let queries = g.concat_rows(&[pos.queries, neg.queries]);
        let semantic = match (pos.semantic, neg.semantic) {
            (Some(a), Some(b)) => Some(g.concat_rows(&[a, b])),
            _ => None,
        };
        blocks.push(ClickBlock {
            queries,
            points: [pos.points, neg.points].concat(),
            valid: [pos.valid, neg.valid].concat(),
            foreground: true,
            branch: 0,
            semantic,
        });
    }
    Ok(QuerySet { mode, target, object, clicks: blocks })
}
