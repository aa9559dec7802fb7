//! Dice, NoC and Dice(n) over simulated click trajectories, and the
//! benchmark runner that writes `report.json`, `summary.csv` and
//! `curves.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clicks::{next_click, Click, ClickSet};
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{Step, Verse};
use crate::prompts::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.80, 0.85, 0.90, 0.95];
pub const DEFAULT_MAX_CLICKS: usize = 20;

/// `2|P ∩ G| / (|P| + |G|)`, 1 when both are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let inter = pred.and_count(gt)?;
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub mode: Mode,
    pub thresholds: Vec<f64>,
    pub max_clicks: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { mode: Mode::Interactive, thresholds: DEFAULT_THRESHOLDS.to_vec(), max_clicks: DEFAULT_MAX_CLICKS }
    }
}

impl EvalProtocol {
    pub fn new(mode: Mode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_clicks == 0 {
            return Err(Error::Contract("max_clicks must be at least 1".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("thresholds must be strictly ascending".into()));
        }
        Ok(())
    }
}

/// Anything that maps an image plus prompt history to a probability map.
pub trait Segmenter {
    type Context;

    /// Per-image work shared by every click (e.g. the image pyramid).
    fn prepare(&self, image: &Tensor<f64>) -> Result<Self::Context>;

    /// Probabilities `[H, W]` for one step.
    fn segment(&self, ctx: &Self::Context, mode: Mode, target: usize, clicks: &ClickSet, prev: &Tensor<f64>) -> Result<Tensor<f64>>;
}

impl<T: Scalar> Segmenter for Verse<T> {
    type Context = crate::encoders::FeaturePyramid<T>;

    fn prepare(&self, image: &Tensor<f64>) -> Result<Self::Context> {
        self.encode_image(&image.cast())
    }

    fn segment(&self, ctx: &Self::Context, mode: Mode, target: usize, clicks: &ClickSet, prev: &Tensor<f64>) -> Result<Tensor<f64>> {
        let prev = prev.cast();
        let target = mode.uses_object_queries().then_some(target);
        let p = self.predict(ctx, &Step { mode, target, clicks, prev_mask: &prev })?;
        Ok(p.probs.cast())
    }
}

/// Click-by-click outcome of one (sample, target) instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Dice after 0..=max_clicks clicks.
    pub dice_per_click: Vec<f64>,
    pub clicks: Vec<Click>,
}

fn binarize(p: &Tensor<f64>) -> BinaryMask {
    BinaryMask::from_probs(p.shape()[0], p.shape()[1], p.data(), 0.5).expect("shape")
}

/// Runs the simulated user for `protocol.max_clicks` clicks. Object-query
/// protocols start from the automatic mask and refine in Mode-2; the
/// interactive protocol starts from an empty mask. Once the prediction is
/// perfect the remaining entries repeat the final score. A click that would
/// repeat an earlier one (the model ignored it) is spent without effect.
pub fn simulate<S: Segmenter>(model: &S, ctx: &S::Context, sample: &Sample, target: usize, protocol: &EvalProtocol) -> Result<Trajectory> {
    let gt = sample.masks.get(&target).ok_or(Error::Range { index: target, len: sample.masks.len() })?;
    let (h, w) = (sample.height(), sample.width());
    let mut clicks = ClickSet::new();
    let mut probs = match protocol.mode {
        Mode::Interactive => Tensor::zeros(&[h, w]),
        _ => model.segment(ctx, Mode::Auto, target, &clicks, &Tensor::zeros(&[h, w]))?,
    };
    let refine_mode = if protocol.mode == Mode::Interactive { Mode::Interactive } else { Mode::Refine };
    let mut pred = binarize(&probs);
    let mut dice_per_click = vec![dice(&pred, gt)?];
    for _ in 0..protocol.max_clicks {
        let Some(c) = next_click(&pred, gt)? else {
            dice_per_click.push(*dice_per_click.last().expect("non-empty"));
            continue;
        };
        if clicks.contains(&c) {
            dice_per_click.push(*dice_per_click.last().expect("non-empty"));
            continue;
        }
        clicks.push(c)?;
        probs = model.segment(ctx, refine_mode, target, &clicks, &probs)?;
        pred = binarize(&probs);
        dice_per_click.push(dice(&pred, gt)?);
    }
    Ok(Trajectory { dice_per_click, clicks: clicks.history() })
}

/// Clicks needed to reach `target_dice`: the first `n` with
/// `dice_per_click[n] >= target_dice`, else the cap.
pub fn noc(dice_per_click: &[f64], target_dice: f64, max_clicks: usize) -> usize {
    dice_per_click
        .iter()
        .take(max_clicks + 1)
        .position(|&d| d >= target_dice)
        .unwrap_or(max_clicks)
}

pub fn noc_key(t: f64) -> String {
    format!("NoC{}", (t * 100.0).round() as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub sample_id: String,
    pub target_id: usize,
    pub dice_per_click: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Mean Dice after exactly `n` clicks, `n = 0..=max_clicks`.
    pub dice_at_n: Vec<f64>,
    pub noc: BTreeMap<String, f64>,
    /// Mean automatic (zero-click) Dice for object-query protocols.
    pub mean_auto_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: EvalProtocol,
    pub records: Vec<InstanceRecord>,
    pub aggregates: Aggregates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub protocols: Vec<ProtocolReport>,
}

/// Aggregates as a pure function of the per-instance records.
pub fn aggregate(protocol: &EvalProtocol, records: &[InstanceRecord]) -> Aggregates {
    let n = records.len().max(1) as f64;
    let dice_at_n = (0..=protocol.max_clicks)
        .map(|k| records.iter().map(|r| r.dice_per_click[k]).sum::<f64>() / n)
        .collect::<Vec<_>>();
    let noc = protocol
        .thresholds
        .iter()
        .map(|&t| {
            let mean = records.iter().map(|r| noc(&r.dice_per_click, t, protocol.max_clicks) as f64).sum::<f64>() / n;
            (noc_key(t), mean)
        })
        .collect();
    let mean_auto_dice = protocol.mode.uses_object_queries().then(|| dice_at_n[0]);
    Aggregates { dice_at_n, noc, mean_auto_dice }
}

/// Mean Dice after `n` clicks over every instance of `dataset`.
pub fn dice_at_n<S: Segmenter>(model: &S, dataset: &[Sample], protocol: &EvalProtocol, n: usize) -> Result<f64> {
    if n > protocol.max_clicks {
        return Err(Error::Contract(format!("n = {n} exceeds max_clicks = {}", protocol.max_clicks)));
    }
    let short = EvalProtocol { max_clicks: n.max(1), ..protocol.clone() };
    let r = evaluate(model, dataset, &short)?;
    Ok(r.aggregates.dice_at_n[n])
}

pub fn evaluate<S: Segmenter>(model: &S, dataset: &[Sample], protocol: &EvalProtocol) -> Result<ProtocolReport> {
    protocol.validate()?;
    let mut records = Vec::new();
    for s in dataset {
        let ctx = model.prepare(&s.image)?;
        for t in s.instances() {
            let tr = simulate(model, &ctx, s, t, protocol)?;
            records.push(InstanceRecord { sample_id: s.sample_id.clone(), target_id: t, dice_per_click: tr.dice_per_click });
        }
    }
    let aggregates = aggregate(protocol, &records);
    Ok(ProtocolReport { protocol: protocol.clone(), records, aggregates })
}

/// Evaluates every protocol. Evaluation involves no sampling; `seed` is
/// recorded for provenance of the run.
pub fn run_benchmark<S: Segmenter>(model: &S, dataset: &[Sample], protocols: &[EvalProtocol], seed: u64) -> Result<BenchReport> {
    let protocols = protocols.iter().map(|p| evaluate(model, dataset, p)).collect::<Result<_>>()?;
    Ok(BenchReport { seed, protocols })
}

impl BenchReport {
    /// `mode,n_clicks,mean_dice` rows.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("mode,n_clicks,mean_dice\n");
        for p in &self.protocols {
            for (n, d) in p.aggregates.dice_at_n.iter().enumerate() {
                writeln!(s, "{},{n},{d:.6}", u8::from(p.protocol.mode)).expect("string write");
            }
        }
        s
    }

    /// One row per protocol: instance count, Dice at 0/1/3/5 clicks (when
    /// within the budget) and one column per NoC threshold.
    pub fn summary_csv(&self) -> String {
        let mut keys: Vec<String> = Vec::new();
        for p in &self.protocols {
            for k in p.aggregates.noc.keys() {
                if !keys.contains(k) {
                    keys.push(k.clone());
                }
            }
        }
        keys.sort();
        let mut s = String::from("mode,instances,max_clicks,dice_0,dice_1,dice_3,dice_5");
        for k in &keys {
            write!(s, ",{k}").expect("string write");
        }
        s.push('\n');
        for p in &self.protocols {
            let a = &p.aggregates;
            write!(s, "{},{},{}", u8::from(p.protocol.mode), p.records.len(), p.protocol.max_clicks).expect("string write");
            for n in [0, 1, 3, 5] {
                match a.dice_at_n.get(n) {
                    Some(d) => write!(s, ",{d:.6}"),
                    None => write!(s, ","),
                }
                .expect("string write");
            }
            for k in &keys {
                match a.noc.get(k) {
                    Some(v) => write!(s, ",{v:.4}"),
                    None => write!(s, ","),
                }
                .expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rp = dir.join("report.json");
        fs::write(&rp, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&rp, e))?;
        let sp = dir.join("summary.csv");
        fs::write(&sp, self.summary_csv()).map_err(|e| Error::io(&sp, e))?;
        let cp = dir.join("curves.csv");
        fs::write(&cp, self.curves_csv()).map_err(|e| Error::io(&cp, e))
    }

    /// Recomputes every aggregate from the stored records.
    pub fn replayed(&self) -> Self {
        let protocols = self
            .protocols
            .iter()
            .map(|p| ProtocolReport { aggregates: aggregate(&p.protocol, &p.records), ..p.clone() })
            .collect();
        Self { seed: self.seed, protocols }
    }
}
