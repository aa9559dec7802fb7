//! Finite-difference audit of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::clicks::{Click, ClickSet, Polarity};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::graph::{Graph, ParamId, Var};
use crate::model::{Step, Verse};
use crate::prompts::Mode;
use crate::tensor::Tensor;
use crate::training::LossConfig;

#[derive(Clone, Debug, Serialize)]
pub struct GroupAudit {
    pub name: String,
    pub checked: usize,
    /// Largest `|analytic - numeric|` over the checked entries divided by the
    /// largest magnitude of either gradient on those entries.
    pub rel_error: f64,
    pub max_abs_grad: f64,
}

/// Scalar objective used by the audit: summed losses of a refinement step
/// (object queries and clicks), an interactive step and an automatic step on
/// a second target.
pub struct AuditProblem {
    pub image: Tensor<f64>,
    pub prev: Tensor<f64>,
    pub clicks: ClickSet,
    pub target: Vec<f64>,
    pub loss: LossConfig,
}

impl AuditProblem {
    pub fn random(size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = size * size;
        let image = Tensor::from_vec(&[size, size], (0..n).map(|_| rng.random::<f64>()).collect())?;
        let prev = Tensor::from_vec(&[size, size], (0..n).map(|_| rng.random::<f64>()).collect())?;
        let target = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mut clicks = ClickSet::new();
        for polarity in [Polarity::Positive, Polarity::Negative, Polarity::Positive, Polarity::Negative] {
            // keep clicks off the border so pooling windows stay interior
            let c = Click { x: rng.random_range(2..size - 2), y: rng.random_range(2..size - 2), polarity, order: 0 };
            if !clicks.contains(&c) {
                clicks.push(c)?;
            }
        }
        Ok(Self { image, prev, clicks, target, loss: LossConfig::default() })
    }

    fn objective(&self, model: &Verse<f64>, g: &mut Graph<f64>) -> Result<Var> {
        let pyr = model.encode_image_graph(g, &self.image)?;
        let refine = Step { mode: Mode::Refine, target: Some(0), clicks: &self.clicks, prev_mask: &self.prev };
        let a = model.forward(g, pyr, &refine, false)?;
        let inter = Step { mode: Mode::Interactive, target: None, clicks: &self.clicks, prev_mask: &self.prev };
        let b = model.forward(g, pyr, &inter, false)?;
        let other = Step { mode: Mode::Auto, target: Some(1), clicks: &ClickSet::new(), prev_mask: &Tensor::zeros(self.prev.shape()) };
        let c = model.forward(g, pyr, &other, false)?;
        let mut total = g.mask_loss(a.logits, &self.target, &self.loss);
        for z in [b.logits, c.logits] {
            let l = g.mask_loss(z, &self.target, &self.loss);
            total = g.add(total, l);
        }
        Ok(total)
    }

    pub fn value(&self, model: &Verse<f64>) -> Result<f64> {
        let mut g = Graph::new(model.params());
        let v = self.objective(model, &mut g)?;
        Ok(g.value(v).data()[0])
    }
}

/// Builds the model and redraws every parameter from N(0, std²) (gains
/// around 1) so that zero-initialised paths carry gradient too.
pub fn randomized_model(cfg: ModelConfig, seed: u64, std: f64) -> Result<Verse<f64>> {
    let mut model = Verse::<f64>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa0d1);
    let normal = Normal::new(0.0, std).expect("std");
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        let is_gain = model.params().name(id).ends_with(".gamma");
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = normal.sample(&mut rng) + if is_gain { 1.0 } else { 0.0 };
        }
    }
    Ok(model)
}

/// Compares analytic and central-difference gradients on up to
/// `per_group` entries of every parameter tensor.
pub fn audit(model: &mut Verse<f64>, problem: &AuditProblem, per_group: usize, h: f64, seed: u64) -> Result<Vec<GroupAudit>> {
    let grads = {
        let mut g = Graph::new(model.params());
        let v = problem.objective(model, &mut g)?;
        g.backward(v)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let n = model.params().get(id).len();
        let entries: Vec<usize> = if n <= per_group { (0..n).collect() } else { (0..per_group).map(|_| rng.random_range(0..n)).collect() };
        let analytic: Vec<f64> = match grads.get(id) {
            Some(t) => entries.iter().map(|&i| t.data()[i]).collect(),
            None => vec![0.0; entries.len()],
        };
        let mut numeric = Vec::with_capacity(entries.len());
        for &i in &entries {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = problem.value(model)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = problem.value(model)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        out.push(GroupAudit {
            name: model.params().name(id).to_string(),
            checked: entries.len(),
            rel_error: if scale > 0.0 { diff / scale } else { 0.0 },
            max_abs_grad: scale,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_passes_on_tiny_model() {
        let mut model = randomized_model(ModelConfig::tiny(), 1, 0.3).unwrap();
        let problem = AuditProblem::random(16, 4).unwrap();
        let report = audit(&mut model, &problem, usize::MAX, 1e-5, 3).unwrap();
        for r in &report {
            assert!(r.rel_error < 1e-4, "{} {:?}", r.name, r);
            // with a single decoder layer only the coarsest level reaches the output
            let finer = ["proj0", "proj1", "mlp1", "mlp2"].iter().any(|k| r.name.contains(k));
            assert_eq!(r.max_abs_grad == 0.0, finer, "{}", r.name);
        }
    }
}
