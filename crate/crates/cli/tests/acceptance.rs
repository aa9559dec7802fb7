//! Acceptance criteria, run in sequence inside a single test so the timed
//! checks never compete with each other for the CPU. Each criterion prints
//! one PASS/FAIL line; the test fails if any line is FAIL.
//!
//! The two training-based criteria dominate the runtime (roughly 50 minutes on
//! one core).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use verse_core::clicks::{connected_components, next_click, Click, ClickSet, Polarity};
use verse_core::config::{AblationFlags, ModelConfig};
use verse_core::dataio::{default_target_names, encode_gray16, synthesize_all, GenSpec, Sample};
use verse_core::decoder::attention_masks;
use verse_core::eval::{dice, evaluate, noc, run_benchmark, simulate, EvalProtocol, Segmenter};
use verse_core::gradcheck::{audit, randomized_model, AuditProblem};
use verse_core::graph::{AttnMask, Graph, ParamId, ParamStore};
use verse_core::mask::BinaryMask;
use verse_core::tensor::Tensor;
use verse_core::training::{fit, TrainConfig};
use verse_core::{Mode, Step, Verse, Verse32};
use verse_service::session::{prepare_image, Lineage, Limits, Session, SessionView};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- masks

fn complementarity() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut pixels = 0usize;
    let mut halves = 0usize;
    for map in 0..1000 {
        let (h, w) = (rng.random_range(1..=48), rng.random_range(1..=48));
        let probs: Vec<f64> = (0..h * w)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.5,
                1 => 0.0,
                2 => 1.0,
                3 => 0.5 + f64::EPSILON,
                4 => 0.5 - f64::EPSILON / 2.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let (pl, nl) = attention_masks(&probs);
        let probs32: Vec<f32> = probs.iter().map(|&p| p as f32).collect();
        let (pl32, nl32) = attention_masks(&probs32);
        for (i, &p) in probs.iter().enumerate() {
            let zeros = [pl[i] == 0.0, nl[i] == 0.0];
            ensure(zeros[0] != zeros[1], || format!("map {map} pixel {i}: p={p} gives ({}, {})", pl[i], nl[i]))?;
            ensure([pl[i], nl[i]].contains(&f64::NEG_INFINITY), || format!("map {map} pixel {i}: no -inf entry"))?;
            ensure((pl[i] == 0.0) == (p >= 0.5), || format!("map {map} pixel {i}: p={p} on the wrong side"))?;
            ensure((pl32[i] == 0.0) != (nl32[i] == 0.0), || format!("map {map} pixel {i}: f32 not complementary"))?;
            if p == 0.5 {
                halves += 1;
                ensure(pl[i] == 0.0 && pl32[i] == 0.0, || format!("map {map} pixel {i}: 0.5 not assigned to M_pl"))?;
            }
        }
        pixels += h * w;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2} s (budget 10 s)"))?;
    Ok(format!("1000 maps, {pixels} pixels ({halves} exactly 0.5), {secs:.2} s"))
}

/// Keys a query may look at: usable keys, or every valid key when the soft
/// mask leaves none.
fn expected_keys(mask: &AttnMask, nk: usize) -> Vec<bool> {
    let valid: Vec<bool> = (0..nk).map(|j| mask.key_valid.as_ref().map_or(true, |v| v[j])).collect();
    let usable: Vec<bool> = (0..nk).map(|j| valid[j] && mask.key_allowed.as_ref().map_or(true, |a| a[j])).collect();
    if usable.iter().any(|&u| u) {
        usable
    } else {
        valid
    }
}

fn masked_attention() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let store = ParamStore::<f64>::new();
    let (mut masked_entries, mut fallbacks, mut empty_rows) = (0usize, 0usize, 0usize);
    for cfg in 0..100 {
        let heads = rng.random_range(1..=4);
        let (dh, dvh) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (nq, nk) = (rng.random_range(1..=24), rng.random_range(1..=300));
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            // wide logits push the softmax towards underflow on unmasked keys
            let spread = [1.0, 10.0, 60.0][rng.random_range(0..3)];
            Tensor::from_vec(&[r, c], (0..r * c).map(|_| (rng.random::<f64>() - 0.5) * spread).collect()).unwrap()
        };
        let q = rand_mat(&mut rng, nq, heads * dh);
        let k = rand_mat(&mut rng, nk, heads * dh);
        let v = rand_mat(&mut rng, nk, heads * dvh);
        let p_allowed = [0.0, 0.02, 0.5, 0.95, 1.0][rng.random_range(0..5)];
        let mask = AttnMask {
            key_allowed: rng.random_bool(0.8).then(|| (0..nk).map(|_| rng.random_bool(p_allowed)).collect()),
            key_valid: rng.random_bool(0.5).then(|| {
                let p = [0.0, 0.3, 0.9][rng.random_range(0..3)];
                (0..nk).map(|_| rng.random_bool(p)).collect()
            }),
            query_valid: rng.random_bool(0.5).then(|| (0..nq).map(|_| rng.random_bool(0.7)).collect()),
        };
        let keys = expected_keys(&mask, nk);
        let usable_any = (0..nk).any(|j| mask.key_valid.as_ref().map_or(true, |v| v[j]) && mask.key_allowed.as_ref().map_or(true, |a| a[j]));
        if !usable_any && keys.iter().any(|&k| k) {
            fallbacks += 1;
        }
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let out = g.attention(qv, kv, vv, heads, &mask);
        let weights = g.attention_weights(out).unwrap().to_vec();
        let out = g.value(out).data().to_vec();
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..heads {
            for r in 0..nq {
                let row = &weights[(h * nq + r) * nk..][..nk];
                let query_ok = mask.query_valid.as_ref().map_or(true, |qv| qv[r]);
                if !query_ok || !keys.iter().any(|&k| k) {
                    ensure(row.iter().all(|&w| w == 0.0), || format!("config {cfg}: row {r} should be all zero"))?;
                    let o = &out[r * heads * dvh + h * dvh..][..dvh];
                    ensure(o.iter().all(|&x| x == 0.0), || format!("config {cfg}: output row {r} should be zero"))?;
                    empty_rows += 1;
                    continue;
                }
                // brute-force softmax over the expected key set
                let logit = |j: usize| (0..dh).map(|e| q.data()[r * heads * dh + h * dh + e] * k.data()[j * heads * dh + h * dh + e]).sum::<f64>() * scale;
                let m = (0..nk).filter(|&j| keys[j]).map(logit).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..nk).filter(|&j| keys[j]).map(|j| (logit(j) - m).exp()).sum();
                for j in 0..nk {
                    if keys[j] {
                        let want = (logit(j) - m).exp() / z;
                        ensure((row[j] - want).abs() <= 1e-12, || format!("config {cfg}: weight ({r},{j}) {} vs {want}", row[j]))?;
                    } else {
                        ensure(row[j] == 0.0, || format!("config {cfg}: masked weight ({r},{j}) = {:e}", row[j]))?;
                        ensure(row[j].to_bits() == 0, || format!("config {cfg}: masked weight ({r},{j}) is -0"))?;
                        masked_entries += 1;
                    }
                }
                let sum: f64 = row.iter().sum();
                ensure((sum - 1.0).abs() < 1e-12, || format!("config {cfg}: row {r} sums to {sum}"))?;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.2} s (budget 30 s)"))?;
    ensure(fallbacks > 0, || "no configuration exercised the fallback".into())?;
    Ok(format!("100 configs, {masked_entries} masked weights exactly 0, {fallbacks} fallback configs, {empty_rows} empty rows, {secs:.2} s"))
}

// ---------------------------------------------------------------- model

fn random_clicks(rng: &mut ChaCha8Rng, h: usize, w: usize, max_per_polarity: usize) -> ClickSet {
    let mut cs = ClickSet::new();
    for pol in [Polarity::Positive, Polarity::Negative] {
        let n = rng.random_range(0..=max_per_polarity);
        while cs.of(pol).len() < n {
            let _ = cs.push(Click::new(rng.random_range(0..w), rng.random_range(0..h), pol));
        }
    }
    cs
}

fn dummy_noop() -> Check {
    let t = Instant::now();
    let base = ModelConfig {
        channels: 16,
        base_width: 8,
        prompt_width: 4,
        heads: 2,
        ffn_width: 32,
        num_targets: 3,
        queries_per_target: 2,
        rounds: 1,
        max_layers: None,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut compared = 0usize;
    for input in 0..50 {
        let seed = 1000 + input as u64;
        let short: Verse<f64> = Verse::new(ModelConfig { max_clicks_per_polarity: 6, ..base.clone() }, seed).map_err(|e| e.to_string())?;
        let extra = rng.random_range(1..=20);
        let long: Verse<f64> = Verse::new(ModelConfig { max_clicks_per_polarity: 6 + extra, ..base.clone() }, seed).map_err(|e| e.to_string())?;
        let (ps, pl) = (short.params(), long.params());
        ensure(ps.len() == pl.len(), || "parameter count depends on padding".into())?;
        for i in 0..ps.len() {
            let (a, b) = (ps.get(ParamId(i)), pl.get(ParamId(i)));
            ensure(ps.name(ParamId(i)) == pl.name(ParamId(i)) && a.data() == b.data(), || format!("parameter {} differs", ps.name(ParamId(i))))?;
        }
        let size = [16, 24, 32][input % 3];
        let image = Tensor::from_vec(&[size, size], (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap();
        let prev = Tensor::from_vec(&[size, size], (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap();
        let clicks = random_clicks(&mut rng, size, size, 6);
        let mode = if rng.random_bool(0.5) { Mode::Refine } else { Mode::Interactive };
        let target = rng.random_range(0..3);
        let step = Step { mode, target: Some(target), clicks: &clicks, prev_mask: &prev };
        let a = short.predict(&short.encode_image(&image).map_err(|e| e.to_string())?, &step).map_err(|e| e.to_string())?;
        let b = long.predict(&long.encode_image(&image).map_err(|e| e.to_string())?, &step).map_err(|e| e.to_string())?;
        let bits = |p: &Tensor<f64>| p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a.probs) == bits(&b.probs), || format!("input {input}: {extra} extra dummy entries changed the mask probabilities"))?;
        ensure(a.mask() == b.mask(), || format!("input {input}: binary mask changed"))?;
        ensure(a.layer_masks == b.layer_masks, || format!("input {input}: per-layer masks changed"))?;
        compared += size * size;
    }
    Ok(format!("50 inputs, {compared} probabilities bit-identical, {:.2} s", t.elapsed().as_secs_f64()))
}

fn gradient_audit() -> Check {
    let t = Instant::now();
    let cfg = ModelConfig::tiny();
    ensure(cfg.channels == 8 && cfg.num_layers() == 1, || "tiny config drifted".into())?;
    let mut model = randomized_model(cfg, 1, 0.3).map_err(|e| e.to_string())?;
    let problem = AuditProblem::random(16, 4).map_err(|e| e.to_string())?;
    let report = audit(&mut model, &problem, usize::MAX, 1e-5, 3).map_err(|e| e.to_string())?;
    let groups = model.params().len();
    ensure(report.len() == groups, || format!("{} of {groups} groups audited", report.len()))?;
    let entries: usize = report.iter().map(|r| r.checked).sum();
    let worst = report.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    for r in &report {
        ensure(r.checked > 0, || format!("group {} not checked", r.name))?;
        ensure(r.rel_error < 1e-4, || format!("group {}: relative error {:.3e}", r.name, r.rel_error))?;
    }
    Ok(format!(
        "{groups} groups, {entries} entries, worst {:.2e} ({}), {:.1} s",
        worst.rel_error,
        worst.name,
        t.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- clicks

/// Components by repeated minimum-label propagation; label = smallest
/// row-major index in the component.
fn oracle_labels(err: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut label: Vec<usize> = (0..h * w).map(|i| if err[i] { i } else { usize::MAX }).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !err[i] {
                    continue;
                }
                let mut best = label[i];
                let mut look = |j: usize| {
                    if err[j] {
                        best = best.min(label[j]);
                    }
                };
                if x > 0 {
                    look(i - 1);
                }
                if x + 1 < w {
                    look(i + 1);
                }
                if y > 0 {
                    look(i - w);
                }
                if y + 1 < h {
                    look(i + w);
                }
                if best < label[i] {
                    label[i] = best;
                    changed = true;
                }
            }
        }
        if !changed {
            return label;
        }
    }
}

fn oracle_click(pred: &BinaryMask, gt: &BinaryMask) -> Option<Click> {
    let (h, w) = (gt.height(), gt.width());
    let err: Vec<bool> = pred.bits().iter().zip(gt.bits()).map(|(a, b)| a != b).collect();
    let label = oracle_labels(&err, h, w);
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in label.iter().filter(|&&l| l != usize::MAX) {
        *sizes.entry(l).or_default() += 1;
    }
    // largest; ties go to the smallest label (iteration order is ascending)
    let (&comp, _) = sizes.iter().fold(None::<(&usize, &usize)>, |acc, e| match acc {
        Some(a) if a.1 >= e.1 => Some(a),
        _ => Some(e),
    })?;
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && label[y as usize * w + x as usize] == comp;
    let mut best: Option<(i64, usize)> = None;
    for i in (0..h * w).filter(|&i| label[i] == comp) {
        let (px, py) = ((i % w) as i64, (i / w) as i64);
        // nearest pixel outside the component, the frame beyond the border included
        let mut d = i64::MAX;
        for y in -1..=h as i64 {
            for x in -1..=w as i64 {
                if !inside(x, y) {
                    d = d.min((x - px) * (x - px) + (y - py) * (y - py));
                }
            }
        }
        if best.is_none_or(|(bd, _)| d > bd) {
            best = Some((d, i));
        }
    }
    let (_, i) = best?;
    let (x, y) = (i % w, i / w);
    Some(Click::new(x, y, if gt.get(x, y) { Polarity::Positive } else { Polarity::Negative }))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::new(h, w);
    match rng.random_range(0..4) {
        0 => {
            let p = rng.random::<f64>();
            for y in 0..h {
                for x in 0..w {
                    m.set(x, y, rng.random_bool(p));
                }
            }
        }
        1 => {
            for _ in 0..rng.random_range(1..=4) {
                let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
                let (x1, y1) = (rng.random_range(x0..w), rng.random_range(y0..h));
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        m.set(x, y, true);
                    }
                }
            }
        }
        2 => {
            for _ in 0..rng.random_range(1..=3) {
                let (cx, cy, r) = (rng.random_range(0..w) as i64, rng.random_range(0..h) as i64, rng.random_range(1..12) as i64);
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                        if dx * dx + dy * dy <= r * r {
                            m.set(x, y, true);
                        }
                    }
                }
            }
        }
        _ => {}
    }
    m
}

/// Copy of `base` with a few blocks flipped.
fn perturb(rng: &mut ChaCha8Rng, base: &BinaryMask) -> BinaryMask {
    let (h, w) = (base.height(), base.width());
    let mut m = base.clone();
    for _ in 0..rng.random_range(0..=5) {
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let (bw, bh) = (rng.random_range(1..=10), rng.random_range(1..=10));
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                m.set(x, y, !m.get(x, y));
            }
        }
    }
    m
}

fn click_oracle() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut none, mut positive) = (0usize, 0usize);
    for pair in 0..500 {
        let gt = random_mask(&mut rng, 32, 32);
        let pred = if rng.random_bool(0.5) { perturb(&mut rng, &gt) } else { random_mask(&mut rng, 32, 32) };
        let got = next_click(&pred, &gt).map_err(|e| e.to_string())?;
        let want = oracle_click(&pred, &gt);
        ensure(got == want, || format!("pair {pair}: next_click {got:?}, oracle {want:?}"))?;
        match got {
            None => none += 1,
            Some(c) if c.polarity == Polarity::Positive => positive += 1,
            _ => {}
        }
    }
    Ok(format!("500 pairs of 32x32 masks match exactly ({positive} positive, {none} no-click), {:.2} s", t.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- metrics

fn oracle_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for i in 0..a.bits().len() {
        inter += (a.bits()[i] && b.bits()[i]) as usize;
        na += a.bits()[i] as usize;
        nb += b.bits()[i] as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Random masks keyed by the click history; ignores the image.
struct NoiseStub {
    salt: u64,
}

impl Segmenter for NoiseStub {
    type Context = ();
    fn prepare(&self, _: &Tensor<f64>) -> verse_core::Result<()> {
        Ok(())
    }
    fn segment(&self, _: &(), mode: Mode, target: usize, clicks: &ClickSet, prev: &Tensor<f64>) -> verse_core::Result<Tensor<f64>> {
        let key = clicks.history().iter().fold(self.salt ^ (target as u64) << 8 ^ mode as u64, |k, c| k.wrapping_mul(31).wrapping_add((c.y * 97 + c.x) as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let p = rng.random::<f64>();
        Tensor::from_vec(prev.shape(), (0..prev.len()).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect())
    }
}

/// Reveals every ground-truth component holding a click (when `reveal`);
/// the whole ground truth once `after` clicks are placed.
struct RevealStub {
    gt: BinaryMask,
    reveal: bool,
    after: Option<usize>,
    auto_perfect: bool,
}

impl Segmenter for RevealStub {
    type Context = ();
    fn prepare(&self, _: &Tensor<f64>) -> verse_core::Result<()> {
        Ok(())
    }
    fn segment(&self, _: &(), mode: Mode, _: usize, clicks: &ClickSet, _: &Tensor<f64>) -> verse_core::Result<Tensor<f64>> {
        let (h, w) = (self.gt.height(), self.gt.width());
        let mut out = BinaryMask::new(h, w);
        if mode == Mode::Auto {
            if self.auto_perfect {
                out = self.gt.clone();
            }
        } else if self.after.is_some_and(|n| clicks.len() >= n) {
            out = self.gt.clone();
        } else if self.reveal {
            for comp in connected_components(&self.gt) {
                if clicks.history().iter().any(|c| comp.contains(&(c.y * w + c.x))) {
                    for i in comp {
                        out.set(i % w, i / w, true);
                    }
                }
            }
        }
        Tensor::from_vec(&[h, w], out.to_probs())
    }
}

fn metric_oracles() -> Check {
    let t = Instant::now();
    let m = |h: usize, w: usize, bits: &[u8]| BinaryMask::from_bits(h, w, bits.iter().map(|&b| b == 1).collect()).unwrap();
    let d = |a: &BinaryMask, b: &BinaryMask| dice(a, b).map_err(|e| e.to_string());
    let a = m(2, 2, &[1, 1, 0, 0]);
    ensure(d(&a, &m(2, 2, &[1, 0, 1, 0]))? == 0.5, || "2x2 example is not 0.5".into())?;
    ensure(d(&a, &a)? == 1.0, || "identical masks are not 1".into())?;
    ensure(d(&a, &m(2, 2, &[0, 0, 1, 1]))? == 0.0, || "disjoint masks are not 0".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for i in 0..200 {
        let (x, y) = (random_mask(&mut rng, 12, 9), random_mask(&mut rng, 12, 9));
        let (p, q) = (d(&x, &y)?, d(&y, &x)?);
        ensure(p == oracle_dice(&x, &y) && p == q, || format!("random pair {i}: dice {p} / {q}, oracle {}", oracle_dice(&x, &y)))?;
    }

    // three separate 2x2 blocks: two revealed blocks give Dice 0.8, all three 1.0
    #[rustfmt::skip]
    let gt = m(6, 6, &[
        1, 1, 0, 1, 1, 0,
        1, 1, 0, 1, 1, 0,
        0, 0, 0, 0, 0, 0,
        0, 0, 0, 1, 1, 0,
        0, 0, 0, 1, 1, 0,
        0, 0, 0, 0, 0, 0,
    ]);
    let sample = Sample { sample_id: "fixed".into(), image: Tensor::zeros(&[6, 6]), masks: [(0usize, gt.clone())].into_iter().collect() };
    let run = |stub: &RevealStub, mode: Mode| -> Result<usize, String> {
        let tr = simulate(stub, &(), &sample, 0, &EvalProtocol::new(mode)).map_err(|e| e.to_string())?;
        Ok(noc(&tr.dice_per_click, 0.85, 20))
    };
    let three = run(&RevealStub { gt: gt.clone(), reveal: true, after: Some(3), auto_perfect: false }, Mode::Interactive)?;
    ensure(three == 3, || format!("stub reaching after 3 clicks gives NoC {three}"))?;
    let never = run(&RevealStub { gt: gt.clone(), reveal: false, after: None, auto_perfect: false }, Mode::Interactive)?;
    ensure(never == 20, || format!("stub never reaching gives NoC {never}"))?;
    let auto = run(&RevealStub { gt: gt.clone(), reveal: false, after: None, auto_perfect: true }, Mode::Refine)?;
    ensure(auto == 0, || format!("perfect automatic mask gives NoC {auto}"))?;

    let thresholds = [0.5, 0.8, 0.85, 0.9, 0.95, 0.99];
    let mut checked = 0usize;
    for traj in 0..100 {
        let sample = &synthetic(1, 64, 900 + traj as u64)[0];
        let target = traj % 3;
        let mode = [Mode::Auto, Mode::Refine, Mode::Interactive][traj % 3];
        let tr = simulate(&NoiseStub { salt: traj as u64 }, &(), sample, target, &EvalProtocol::new(mode)).map_err(|e| e.to_string())?;
        let nocs: Vec<usize> = thresholds.iter().map(|&th| noc(&tr.dice_per_click, th, 20)).collect();
        for (k, &th) in thresholds.iter().enumerate() {
            let want = tr.dice_per_click.iter().position(|&v| v >= th).unwrap_or(20);
            ensure(nocs[k] == want, || format!("trajectory {traj}: NoC@{th} = {}, oracle {want}", nocs[k]))?;
        }
        ensure(nocs.windows(2).all(|p| p[0] <= p[1]), || format!("trajectory {traj}: NoC not monotone {nocs:?}"))?;
        checked += 1;
    }
    Ok(format!("fixed examples hold, 200 random dice pairs match, {checked} stub trajectories monotone, {:.2} s", t.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- replay

fn synthetic(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    synthesize_all(&GenSpec { n_samples: n, image_size: size, n_targets: 3, noise_std: 0.03, seed }).unwrap()
}

/// Fixed script: automatic mask on target 0 refined by clicks, a purely
/// interactive target 2, and target 1 forced into Mode-2 by its first click.
fn run_session(model: &Verse32, png: &[u8], names: &BTreeMap<usize, String>) -> Result<(Session, Vec<String>), String> {
    let e = |e: verse_service::ApiError| format!("{e:?}");
    let mut s = Session::new("replay".into(), model, prepare_image(png, &Limits::default()).map_err(e)?).map_err(e)?;
    let mut snapshots = Vec::new();
    let snap = |s: &Session| serde_json::to_string(&s.view()).unwrap();
    s.auto_segment(model, 0, names).map_err(e)?;
    snapshots.push(snap(&s));
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for (target, n, mode) in [(0usize, 6, None), (2, 5, None), (1, 3, Some(Mode::Refine))] {
        let mut used = Vec::new();
        while used.len() < n {
            let (x, y) = (rng.random_range(0..64), rng.random_range(0..64));
            if used.contains(&(x, y)) {
                continue;
            }
            used.push((x, y));
            let pol = if rng.random_bool(0.6) { Polarity::Positive } else { Polarity::Negative };
            let mode = if used.len() == 1 { mode } else { None };
            s.add_click(model, target, names, x as f64 + 0.5, y as f64 + 0.5, pol, mode).map_err(e)?;
            snapshots.push(snap(&s));
        }
    }
    Ok((s, snapshots))
}

fn replay_determinism() -> Check {
    let t = Instant::now();
    let names = default_target_names(3);
    let sample = &synthetic(1, 64, 77)[0];
    let png = encode_gray16(64, 64, sample.image.data()).map_err(|e| e.to_string())?;
    let cfg = ModelConfig { num_targets: 3, ..ModelConfig::desk() };
    let model_a = Verse32::new(cfg.clone(), 9).map_err(|e| e.to_string())?;
    let model_b = Verse32::new(cfg, 9).map_err(|e| e.to_string())?;
    let (mut sa, snaps_a) = run_session(&model_a, &png, &names)?;
    let (_, snaps_b) = run_session(&model_b, &png, &names)?;
    ensure(snaps_a == snaps_b, || "two sessions with the same history diverged".into())?;

    // undo back through the history; each state must equal a fresh session
    // rebuilt from nothing but the remaining click histories
    let e = |e: verse_service::ApiError| format!("{e:?}");
    let rebuild = |view: &SessionView| -> Result<String, String> {
        let mut fresh = Session::new("replay".into(), &model_b, prepare_image(&png, &Limits::default()).map_err(e)?).map_err(e)?;
        for t in &view.targets {
            if t.lineage == Lineage::Auto {
                fresh.auto_segment(&model_b, t.target_id, &names).map_err(e)?;
            }
            for c in &t.clicks {
                fresh.add_click(&model_b, t.target_id, &names, c.x as f64 + 0.5, c.y as f64 + 0.5, c.polarity, None).map_err(e)?;
            }
        }
        Ok(serde_json::to_string(&fresh.view()).unwrap())
    };
    let mut undone = 0;
    for target in [1usize, 2, 0] {
        while sa.undo(&model_a, target, &names).map_err(e)?.0 {
            undone += 1;
            let view = sa.view();
            ensure(serde_json::to_string(&view).unwrap() == rebuild(&view)?, || format!("state after {undone} undos differs from a fresh replay"))?;
        }
    }
    let now: serde_json::Value = serde_json::to_value(sa.view()).unwrap();
    let first: serde_json::Value = serde_json::from_str(&snaps_a[0]).unwrap();
    let target0 = |v: &serde_json::Value| v["targets"].as_array().unwrap().iter().find(|t| t["target_id"] == 0).cloned();
    ensure(target0(&now) == target0(&first), || "undoing every click did not restore the automatic mask".into())?;

    let data = synthetic(6, 64, 78);
    let protocols = [EvalProtocol::new(Mode::Auto), EvalProtocol::new(Mode::Refine), EvalProtocol::new(Mode::Interactive)];
    let ra = run_benchmark(&model_a, &data, &protocols, 5).map_err(|e| e.to_string())?;
    let rb = run_benchmark(&model_b, &data, &protocols, 5).map_err(|e| e.to_string())?;
    let bits = |r: &verse_core::eval::BenchReport| {
        r.protocols.iter().flat_map(|p| p.records.iter().flat_map(|i| i.dice_per_click.iter().map(|d| d.to_bits()))).collect::<Vec<_>>()
    };
    ensure(bits(&ra) == bits(&rb), || "benchmark re-run produced different Dice values".into())?;
    ensure(serde_json::to_string(&ra).unwrap() == serde_json::to_string(&rb).unwrap(), || "benchmark reports differ".into())?;
    ensure(ra.replayed() == ra, || "aggregates differ when recomputed from records".into())?;
    Ok(format!(
        "{} session states identical across two sessions, {undone} undos replayed, benchmark of {} instances bit-identical, {:.1} s",
        snaps_a.len(),
        ra.protocols[0].records.len(),
        t.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- training

fn mean_dice_curve(model: &Verse32, val: &[Sample], mode: Mode, max_clicks: usize) -> Result<Vec<f64>, String> {
    let p = EvalProtocol { mode, thresholds: vec![], max_clicks };
    Ok(evaluate(model, val, &p).map_err(|e| e.to_string())?.aggregates.dice_at_n)
}

fn end_to_end() -> Check {
    let train = synthetic(200, 64, 0);
    let val = synthetic(50, 64, 1);
    let cfg = TrainConfig { val_limit: Some(10), model: ModelConfig { num_targets: 3, ..ModelConfig::desk() }, ..TrainConfig::desk() };
    ensure(cfg.epochs <= 40 && cfg.model.channels == 64, || "desk preset drifted".into())?;
    let t = Instant::now();
    let out = fit::<f32>(&cfg, &train, &val, None, |e| {
        println!("    epoch {:>2}  loss {:.4}  mode1 {:?}  mode3@3 {:?}  {:.0} s", e.epoch, e.train_loss, e.val_dice_mode1, e.val_dice3_mode3, t.elapsed().as_secs_f64())
    })
    .map_err(|e| e.to_string())?;
    let train_secs = t.elapsed().as_secs_f64();
    let model = out.model;
    let refine = mean_dice_curve(&model, &val, Mode::Refine, 10)?;
    let inter = mean_dice_curve(&model, &val, Mode::Interactive, 20)?;
    let (m1, m2_1, m3_3) = (refine[0], refine[1], inter[3]);
    let summary = format!("train {train_secs:.0} s, Mode-1 {m1:.4}, Mode-2 Dice(1) {m2_1:.4}, Mode-3 Dice(3) {m3_3:.4}");
    println!("    Mode-2 curve {refine:.4?}");
    println!("    Mode-3 curve {inter:.4?}");
    ensure(train_secs <= 1800.0, || format!("{summary}: training exceeded 30 min"))?;
    ensure(m1 >= 0.90, || format!("{summary}: Mode-1 below 0.90"))?;
    ensure(m3_3 >= 0.93, || format!("{summary}: Mode-3 Dice(3) below 0.93"))?;
    ensure(m2_1 >= m1, || format!("{summary}: Mode-2 Dice(1) below Mode-1"))?;
    for (name, curve) in [("Mode-2", &refine), ("Mode-3", &inter)] {
        for k in 1..curve.len() {
            ensure(curve[k] >= curve[k - 1] - 0.01, || format!("{summary}: {name} Dice({k}) {:.4} drops from {:.4}", curve[k], curve[k - 1]))?;
        }
    }
    Ok(summary)
}

/// Reduced protocol: 100 training samples and 15 epochs per run, so the
/// twelve runs fit in roughly half an hour on one core.
fn ablation_direction() -> Check {
    let train = synthetic(100, 64, 10);
    let val = synthetic(50, 64, 11);
    let seeds = [0u64, 1, 2];
    let variants = ["full", "a1", "a2", "a3"];
    let mut scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let t = Instant::now();
    for &seed in &seeds {
        for v in variants {
            let flags = AblationFlags::variant(v).unwrap();
            let cfg = TrainConfig {
                epochs: 15,
                seed,
                val_limit: Some(0),
                model: ModelConfig { num_targets: 3, flags, ..ModelConfig::desk() },
                ..TrainConfig::desk()
            };
            let model = fit::<f32>(&cfg, &train, &val, None, |_| {}).map_err(|e| e.to_string())?.model;
            let d1 = mean_dice_curve(&model, &val, Mode::Interactive, 1)?[1];
            println!("    seed {seed} {v:<4} Mode-3 Dice(1) {d1:.4}  ({:.0} s)", t.elapsed().as_secs_f64());
            scores.entry(v).or_default().push(d1);
        }
    }
    let mean = |v: &str| scores[v].iter().sum::<f64>() / scores[v].len() as f64;
    let full = mean("full");
    let detail = variants.iter().map(|v| format!("{v} {:.4}", mean(v))).collect::<Vec<_>>().join(", ");
    for v in ["a1", "a2", "a3"] {
        ensure(full >= mean(v) - 0.01, || format!("mean over {} seeds: {detail}; full trails {v} by more than 0.01", seeds.len()))?;
    }
    Ok(format!("mean Mode-3 Dice(1) over {} seeds: {detail}", seeds.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("mask complementarity", complementarity),
        ("masked attention zero weights", masked_attention),
        ("dummy click entries are a no-op", dummy_noop),
        ("gradient audit", gradient_audit),
        ("click oracle equivalence", click_oracle),
        ("metric oracles", metric_oracles),
        ("replay determinism", replay_determinism),
        ("synthetic end-to-end", end_to_end),
        ("ablation direction", ablation_direction),
    ];
    println!();
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
