//! Loss, augmentation, click episodes and the optimisation loop.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::{next_click, ClickSet};
use crate::config::ModelConfig;
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::eval::{self, EvalProtocol};
use crate::graph::{mask_loss_from_logits, sigmoid, Grads, Graph, Var};
use crate::mask::BinaryMask;
use crate::model::{Step, Verse};
use crate::prompts::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_ce: f64,
    pub lambda_dice: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_ce: 5.0, lambda_dice: 5.0, dice_eps: 1.0 }
    }
}

/// Loss of a probability map against a binary target. Probabilities are
/// clamped to `[1e-7, 1 - 1e-7]` before conversion to logits.
pub fn mask_loss(pred: &[f64], gt: &BinaryMask, cfg: &LossConfig) -> Result<f64> {
    if pred.len() != gt.bits().len() {
        return Err(Error::Contract(format!("prediction has {} pixels, target {}", pred.len(), gt.bits().len())));
    }
    let z: Vec<f64> = pred
        .iter()
        .map(|&p| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            (p / (1.0 - p)).ln()
        })
        .collect();
    Ok(mask_loss_from_logits(&z, &gt.to_probs::<f64>(), cfg).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    /// Linear warm-up length in optimiser steps.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Probability that a batch trains the object-query regime (Mode-1&2)
    /// rather than the purely interactive one.
    pub p_object_modes: f64,
    pub augment: bool,
    pub deep_supervision: bool,
    /// Validation samples used for per-epoch metrics (`None` = all).
    pub val_limit: Option<usize>,
    pub precision: Precision,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 75,
            batch_size: 8,
            lr: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: None,
            seed: 0,
            p_object_modes: 0.5,
            augment: true,
            deep_supervision: false,
            val_limit: None,
            precision: Precision::F32,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized preset on the synthetic corpus.
    pub fn desk() -> Self {
        Self { epochs: 40, lr: 1e-3, warmup_steps: 50, grad_clip: Some(1.0), model: ModelConfig::desk(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Contract(format!("train config: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_object_modes) {
            return bad("p_object_modes must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.loss.lambda_ce < 0.0 || self.loss.lambda_dice < 0.0 || self.loss.dice_eps < 0.0 {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }
}

pub fn flip_h<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    (0..h * w).map(|i| data[(i / w) * w + (w - 1 - i % w)]).collect()
}

pub fn flip_v<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    (0..h * w).map(|i| data[(h - 1 - i / w) * w + i % w]).collect()
}

/// Quarter turn counter-clockwise; the result is `w x h`.
pub fn rot90<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    // output (r, c) with r < w, c < h reads input (c, w - 1 - r)
    (0..h * w).map(|i| data[(i % h) * w + (w - 1 - i / h)]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: usize,
    pub brightness: f64,
    pub contrast: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self { flip_h: false, flip_v: false, quarter_turns: 0, brightness: 0.0, contrast: 1.0 }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
            brightness: rng.random_range(-0.2..=0.2),
            contrast: (rng.random_range(0.8f64.ln()..=1.25f64.ln())).exp(),
        }
    }

    fn geometry<T: Copy>(&self, mut data: Vec<T>, mut h: usize, mut w: usize) -> (Vec<T>, usize, usize) {
        if self.flip_h {
            data = flip_h(&data, h, w);
        }
        if self.flip_v {
            data = flip_v(&data, h, w);
        }
        for _ in 0..self.quarter_turns % 4 {
            data = rot90(&data, h, w);
            std::mem::swap(&mut h, &mut w);
        }
        (data, h, w)
    }

    /// Geometry on image and masks; intensity changes on the image only.
    pub fn apply(&self, s: &Sample) -> Sample {
        let (h, w) = (s.height(), s.width());
        let (img, nh, nw) = self.geometry(s.image.data().to_vec(), h, w);
        let img = img.into_iter().map(|v| (v * self.contrast + self.brightness).clamp(0.0, 1.0)).collect();
        let masks = s
            .masks
            .iter()
            .map(|(&t, m)| {
                let (bits, mh, mw) = self.geometry(m.bits().to_vec(), h, w);
                (t, BinaryMask::from_bits(mh, mw, bits).expect("shape"))
            })
            .collect();
        Sample { sample_id: s.sample_id.clone(), image: Tensor::from_vec(&[nh, nw], img).expect("shape"), masks }
    }
}

pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    Augmentation::sample(rng).apply(sample)
}

/// Interaction regime of a training episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeKind {
    /// Automatic mask followed by two refinement clicks (Mode-1 then Mode-2).
    ObjectThenRefine,
    /// Three clicks from an empty mask (Mode-3).
    Interactive,
}

impl EpisodeKind {
    pub fn budget(self) -> usize {
        match self {
            EpisodeKind::ObjectThenRefine => 2,
            EpisodeKind::Interactive => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub mode: Mode,
    pub clicks: ClickSet,
    pub mask: BinaryMask,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionEpisode {
    pub kind: EpisodeKind,
    pub steps: Vec<EpisodeStep>,
}

/// Runs one episode on `g`, returning it with the mean-loss node. Each
/// step sees the previous probabilities as a constant (no gradient path).
#[allow(clippy::too_many_arguments)]
pub fn build_episode<T: Scalar>(
    model: &Verse<T>,
    g: &mut Graph<T>,
    image_pyr: [Var; 3],
    sample: &Sample,
    kind: EpisodeKind,
    target: usize,
    loss_cfg: &LossConfig,
    deep_supervision: bool,
) -> Result<(InteractionEpisode, Var)> {
    let gt = sample.masks.get(&target).ok_or(Error::Range { index: target, len: sample.masks.len() })?;
    if gt.is_empty() {
        return Err(Error::Contract(format!("{}: target {target} is empty", sample.sample_id)));
    }
    let (h, w) = (sample.height(), sample.width());
    let gt_t: Vec<T> = gt.to_probs();
    let mut clicks = ClickSet::new();
    let mut prev: Tensor<T> = Tensor::zeros(&[h, w]);
    let mut pred = BinaryMask::new(h, w);
    let mut steps = Vec::new();
    let mut losses = Vec::new();
    let (first, then) = match kind {
        EpisodeKind::ObjectThenRefine => (Some(Mode::Auto), Mode::Refine),
        EpisodeKind::Interactive => (None, Mode::Interactive),
    };
    let plan = first.into_iter().chain(std::iter::repeat_n(then, kind.budget()));
    for mode in plan {
        if mode.uses_clicks() {
            match next_click(&pred, gt)? {
                Some(c) if !clicks.contains(&c) => {
                    clicks.push(c)?;
                }
                _ => break,
            }
        }
        let target_id = mode.uses_object_queries().then_some(target);
        let out = model.forward(g, image_pyr, &Step { mode, target: target_id, clicks: &clicks, prev_mask: &prev }, deep_supervision)?;
        let mut loss = g.mask_loss(out.logits, &gt_t, loss_cfg);
        if deep_supervision && !out.layer_logits.is_empty() {
            let n = out.layer_logits.len() + 1;
            for &z in &out.layer_logits {
                let l = g.mask_loss(z, &gt_t, loss_cfg);
                loss = g.add(loss, l);
            }
            loss = g.scale(loss, T::one() / T::from_usize(n).expect("count"));
        }
        losses.push(loss);
        let probs: Vec<T> = g.value(out.logits).data().iter().map(|&v| sigmoid(v)).collect();
        pred = BinaryMask::from_probs(h, w, &probs, 0.5)?;
        prev = Tensor::from_vec(&[h, w], probs)?;
        steps.push(EpisodeStep { mode, clicks: clicks.clone(), mask: pred.clone(), loss: g.value(loss).data()[0].to_f64c() });
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l);
    }
    let total = g.scale(total, T::one() / T::from_usize(losses.len()).expect("count"));
    Ok((InteractionEpisode { kind, steps }, total))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &crate::graph::ParamStore<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0, beta1, beta2, eps: 1e-8, weight_decay }
    }

    /// Weight decay applies to matrices and kernels only (not to biases,
    /// norms or embedding vectors).
    pub fn step(&mut self, params: &mut crate::graph::ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let decay = if params.get(id).shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for i in 0..g.len() {
                let gi = g.data()[i].to_f64c();
                let mi = b1 * m.data()[i].to_f64c() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].to_f64c() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = T::from_f64c(mi);
                v.data_mut()[i] = T::from_f64c(vi);
                let pi = p.data()[i].to_f64c();
                let upd = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.data_mut()[i] = T::from_f64c(pi - lr * (upd + decay * pi));
            }
        }
    }
}

/// Linear warm-up then cosine decay to zero.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let t = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn global_norm<T: Scalar>(grads: &Grads<T>, n: usize) -> f64 {
    (0..n)
        .filter_map(|i| grads.get(crate::graph::ParamId(i)))
        .flat_map(|t| t.data().iter().map(|v| v.to_f64c().powi(2)))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice_mode1: Option<f64>,
    pub val_dice3_mode3: Option<f64>,
    /// Episodes skipped because their target was empty.
    #[serde(default)]
    pub skipped: usize,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Verse<T>,
    pub log: Vec<EpochLog>,
}

/// Mean automatic Dice and mean Mode-3 Dice after three clicks.
pub fn validation_metrics<T: Scalar>(model: &Verse<T>, val: &[Sample]) -> Result<(f64, f64)> {
    let auto = eval::evaluate(model, val, &EvalProtocol { mode: Mode::Auto, thresholds: vec![], max_clicks: 1 })?;
    let inter = eval::evaluate(model, val, &EvalProtocol { mode: Mode::Interactive, thresholds: vec![], max_clicks: 3 })?;
    Ok((auto.aggregates.dice_at_n[0], inter.aggregates.dice_at_n[3]))
}

fn dump_nonfinite(dir: Option<&Path>, epoch: usize, step: usize, sample: &str, kind: EpisodeKind, target: usize) {
    if let Some(d) = dir {
        let info = serde_json::json!({ "epoch": epoch, "step": step, "sample_id": sample, "episode": kind, "target": target });
        let _ = fs::write(d.join("nonfinite_dump.json"), info.to_string());
    }
}

/// Trains a model from scratch. With `out_dir`, writes `train_config.json`,
/// `metrics.jsonl` (one object per epoch) and `checkpoint.ckpt` after each
/// epoch. `on_epoch` observes every log entry.
pub fn fit<T: Scalar>(
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("train_config.json");
        fs::write(&p, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&p, e))?;
        let p = d.join("metrics.jsonl");
        fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
    }
    let mut model = Verse::<T>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let val = &val[..cfg.val_limit.map_or(val.len(), |n| n.min(val.len()))];
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut episodes, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let kind = if rng.random_bool(cfg.p_object_modes) { EpisodeKind::ObjectThenRefine } else { EpisodeKind::Interactive };
            let mut grads: Option<Grads<T>> = None;
            let mut used = 0usize;
            for &i in batch {
                let sample = if cfg.augment { augment(&train[i], &mut rng) } else { train[i].clone() };
                let targets = sample.instances();
                if targets.is_empty() {
                    skipped += 1;
                    continue;
                }
                let target = targets[rng.random_range(0..targets.len())];
                let image: Tensor<T> = sample.image.cast();
                let mut g = Graph::new(model.params());
                let pyr = model.encode_image_graph(&mut g, &image)?;
                let (_, loss) = build_episode(&model, &mut g, pyr, &sample, kind, target, &cfg.loss, cfg.deep_supervision)?;
                let lv = g.value(loss).data()[0].to_f64c();
                if !lv.is_finite() {
                    dump_nonfinite(out_dir, epoch, step, &sample.sample_id, kind, target);
                    return Err(Error::NonFinite { epoch, step });
                }
                let gr = g.backward(loss);
                match &mut grads {
                    Some(acc) => acc.accumulate(&gr),
                    None => grads = Some(gr),
                }
                loss_sum += lv;
                episodes += 1;
                used += 1;
            }
            let Some(mut grads) = grads else { continue };
            grads.scale(T::one() / T::from_usize(used).expect("count"));
            if !grads.all_finite() {
                dump_nonfinite(out_dir, epoch, step, "<batch gradient>", kind, 0);
                return Err(Error::NonFinite { epoch, step });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = global_norm(&grads, model.params().len());
                if norm > clip {
                    grads.scale(T::from_f64c(clip / norm));
                }
            }
            opt.step(model.params_mut(), &grads, learning_rate(cfg, step, total));
            step += 1;
        }
        let (vd1, vd3) = if val.is_empty() {
            (None, None)
        } else {
            let (a, b) = validation_metrics(&model, val)?;
            (Some(a), Some(b))
        };
        let entry = EpochLog { epoch, train_loss: loss_sum / episodes.max(1) as f64, val_dice_mode1: vd1, val_dice3_mode3: vd3, skipped };
        if let Some(d) = out_dir {
            let p = d.join("metrics.jsonl");
            let mut f = fs::OpenOptions::new().append(true).open(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&p, e))?;
            model.save(&d.join("checkpoint.ckpt"))?;
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
