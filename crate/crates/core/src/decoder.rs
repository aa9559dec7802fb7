//! Round-robin multi-scale transformer decoder with foreground/background
//! masked cross-attention and cross-scale residual connections.
//!
//! Pixel features travel as `[h*w, C]` matrices; they are reshaped to
//! `[h, w, C]` only for resampling, convolution and pooling.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoders::SCALES;
use crate::graph::{AttnMask, Graph, ParamStore, Var};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, Mlp};
use crate::prompts::{validity_factors, ClickBlock, QuerySet, SemanticQueryHead};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel foreground/background attention masks: `(fg, bg)` additive
/// values where exactly one of the pair is 0 and the other `-inf`.
pub fn attention_masks<T: Scalar>(probs: &[T]) -> (Vec<T>, Vec<T>) {
    let half = T::from_f64c(0.5);
    probs
        .iter()
        .map(|&p| if p >= half { (T::zero(), T::neg_infinity()) } else { (T::neg_infinity(), T::zero()) })
        .unzip()
}

/// Boolean form of [`attention_masks`]: `true` where a pixel is predicted
/// foreground.
pub fn foreground<T: Scalar>(probs: &[T]) -> Vec<bool> {
    let half = T::from_f64c(0.5);
    probs.iter().map(|&p| p >= half).collect()
}

/// Branch indices into per-layer parameter arrays.
pub const OBJECT: usize = 0;
pub const POSITIVE: usize = 1;
pub const NEGATIVE: usize = 2;

#[derive(Clone, Debug)]
pub struct CrossBranch {
    pub norm: LayerNorm,
    pub q: Linear,
}

/// Pre-norm self-attention and FFN over one query block.
#[derive(Clone, Debug)]
pub struct SelfBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl SelfBlock {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let lin = |store: &mut ParamStore<T>, n: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), c, c, false, Init::Scaled { gain: 1.0 }, rng)
        };
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            q: lin(store, "q", rng),
            k: lin(store, "k", rng),
            v: lin(store, "v", rng),
            o: lin(store, "o", rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            ffn: Mlp::new(store, &format!("{name}.ffn"), c, cfg.ffn_width, c, Init::Scaled { gain: 0.5 }, rng),
        }
    }

    /// Rows flagged invalid pass through unchanged and are never attended to.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, valid: Option<&[bool]>, heads: usize) -> Var {
        let rows = g.shape(x)[0];
        let keep: Vec<T> = valid.map_or_else(|| vec![T::one(); rows], validity_factors);
        let mask = AttnMask {
            key_allowed: None,
            key_valid: valid.map(<[bool]>::to_vec),
            query_valid: valid.map(<[bool]>::to_vec),
        };
        let h = self.norm1.forward(g, x);
        let (q, k, v) = (self.q.forward(g, h), self.k.forward(g, h), self.v.forward(g, h));
        let a = g.attention(q, k, v, heads, &mask);
        let a = self.o.forward(g, a);
        let a = g.row_scale(a, keep.clone());
        let x = g.add(x, a);
        let h = self.norm2.forward(g, x);
        let f = self.ffn.forward(g, h);
        let f = g.row_scale(f, keep);
        g.add(x, f)
    }
}

/// Pixels attend to the concatenated query set, then a pixel FFN.
#[derive(Clone, Debug)]
pub struct PixelUpdate {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Zero-initialised.
    pub o: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl PixelUpdate {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let init = Init::Scaled { gain: 1.0 };
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), c),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), c),
            q: Linear::new(store, &format!("{name}.q"), c, c, false, init, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, false, init, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, false, init, rng),
            o: Linear::new(store, &format!("{name}.o"), c, c, false, Init::Zeros, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), c),
            ffn: Mlp::new(store, &format!("{name}.ffn"), c, cfg.ffn_width, c, Init::Scaled { gain: 0.5 }, rng),
        }
    }

    /// `pixels: [hw, C]`, `queries: [n, C]` with per-row validity.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, pixels: Var, queries: Var, valid: &[bool], heads: usize) -> Var {
        let hq = self.norm_q.forward(g, pixels);
        let q = self.q.forward(g, hq);
        let hk = self.norm_kv.forward(g, queries);
        let (k, v) = (self.k.forward(g, hk), self.v.forward(g, hk));
        let mask = AttnMask { key_allowed: None, key_valid: Some(valid.to_vec()), query_valid: None };
        let a = g.attention(q, k, v, heads, &mask);
        let a = self.o.forward(g, a);
        let f = g.add(pixels, a);
        let h = self.norm_ffn.forward(g, f);
        let h = self.ffn.forward(g, h);
        g.add(f, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub level: usize,
    pub norm_kv: LayerNorm,
    pub k: Linear,
    pub v: Linear,
    /// Indexed by [`OBJECT`], [`POSITIVE`], [`NEGATIVE`]; the negative branch
    /// is absent when the foreground/background split is disabled.
    pub cross: Vec<CrossBranch>,
    pub self_blocks: Vec<SelfBlock>,
    pub pixel: PixelUpdate,
    /// 3x3 convolution on the resampled previous output (zero-initialised).
    pub residual: Option<Conv2d>,
    /// Linear carry of the previous semantic queries (zero-initialised).
    pub semantic_residual: Option<Linear>,
}

impl DecoderLayer {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, index: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let name = format!("decoder.layer{index}");
        let init = Init::Scaled { gain: 1.0 };
        let branches: &[&str] = if cfg.flags.split_fb_branches { &["object", "positive", "negative"] } else { &["object", "positive"] };
        let cross = branches
            .iter()
            .map(|b| CrossBranch {
                norm: LayerNorm::new(store, &format!("{name}.cross_{b}.norm"), c),
                q: Linear::new(store, &format!("{name}.cross_{b}.q"), c, c, false, init, rng),
            })
            .collect();
        let self_blocks = branches.iter().map(|b| SelfBlock::new(store, &format!("{name}.self_{b}"), cfg, rng)).collect();
        let residual = (index > 0 && cfg.flags.use_residual_connections)
            .then(|| Conv2d::new(store, &format!("{name}.residual"), c, c, 3, 1, false, Init::Zeros, rng));
        let semantic_residual = (index > 0 && cfg.flags.use_residual_connections && cfg.flags.use_semantic_queries)
            .then(|| Linear::new(store, &format!("{name}.semantic_residual"), c, c, false, Init::Zeros, rng));
        Self {
            level: index % 3,
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), c),
            k: Linear::new(store, &format!("{name}.k"), c, c, false, init, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, false, init, rng),
            cross,
            self_blocks,
            pixel: PixelUpdate::new(store, &format!("{name}.pixel"), cfg, rng),
            residual,
            semantic_residual,
        }
    }

    /// Shared keys and values of the pixel features `[hw, C]`.
    pub fn keys_values<T: Scalar>(&self, g: &mut Graph<T>, pixels: Var) -> (Var, Var) {
        let h = self.norm_kv.forward(g, pixels);
        (self.k.forward(g, h), self.v.forward(g, h))
    }

    /// Masked cross-attention of one query block: `X + softmax(mask + QK^T/sqrt(d)) V`.
    /// `allowed` selects the pixels the branch may attend to; invalid query
    /// rows pass through unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        branch: usize,
        x: Var,
        kv: (Var, Var),
        allowed: &[bool],
        valid: Option<&[bool]>,
        heads: usize,
    ) -> Var {
        let br = &self.cross[branch];
        let h = br.norm.forward(g, x);
        let q = br.q.forward(g, h);
        let mask = AttnMask {
            key_allowed: Some(allowed.to_vec()),
            key_valid: None,
            query_valid: valid.map(<[bool]>::to_vec),
        };
        let a = g.attention(q, kv.0, kv.1, heads, &mask);
        g.add(x, a)
    }
}

/// Everything the decoder exposes besides the final logits.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Final logits `[H, W, 1]`.
    pub logits: Var,
    /// Mask probabilities that drove each layer's attention masks, at the
    /// layer's level resolution (row-major).
    pub layer_masks: Vec<Tensor<f64>>,
    /// Optional per-layer logits at full resolution (deep supervision).
    pub layer_logits: Vec<Var>,
    /// Pyramid level visited by each layer.
    pub schedule: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub mask_head: Linear,
    pub layers: Vec<DecoderLayer>,
    heads: usize,
    channels: usize,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mask_head = Linear::new(store, "decoder.mask_head", cfg.channels, 1, true, Init::Scaled { gain: 1.0 }, rng);
        let layers = (0..cfg.num_layers()).map(|i| DecoderLayer::new(store, i, cfg, rng)).collect();
        Self { mask_head, layers, heads: cfg.heads, channels: cfg.channels }
    }

    /// Scale factors visited in order.
    pub fn scale_schedule(&self) -> Vec<usize> {
        self.layers.iter().map(|l| SCALES[l.level]).collect()
    }

    /// Single-channel logits `[h, w, 1]` of `[hw, C]` pixel features.
    pub fn mask_logits<T: Scalar>(&self, g: &mut Graph<T>, pixels: Var, hw: (usize, usize)) -> Var {
        let z = self.mask_head.forward(g, pixels);
        g.reshape(z, &[hw.0, hw.1, 1])
    }

    /// Probabilities at `dst` resolution of features `[hw, C]` (values only).
    pub fn mask_probs<T: Scalar>(&self, g: &mut Graph<T>, pixels: Var, hw: (usize, usize), dst: (usize, usize)) -> Vec<T> {
        let z = self.mask_logits(g, pixels, hw);
        let z = g.resize(z, dst.0, dst.1);
        g.value(z).data().iter().map(|&v| crate::graph::sigmoid(v)).collect()
    }

    /// Runs every layer. `fused` is the coarse-first fused pyramid
    /// (`[h, w, C]` each), `image_hw` the output resolution.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        fused: [Var; 3],
        queries: &QuerySet,
        semantic: Option<&SemanticQueryHead>,
        image_hw: (usize, usize),
        deep_supervision: bool,
    ) -> DecoderOutput {
        let c = self.channels;
        let dims: Vec<(usize, usize)> = fused.iter().map(|&v| (g.shape(v)[0], g.shape(v)[1])).collect();
        let mut current: Vec<Var> = fused.iter().zip(&dims).map(|(&v, &(h, w))| g.reshape(v, &[h * w, c])).collect();
        let mut object = queries.object;
        let mut blocks: Vec<ClickBlock> = queries.clicks.clone();
        // features (and their resolution) that produce the next layer's mask
        let mut prev = (current[0], dims[0]);
        let mut layer_masks = Vec::new();
        let mut layer_logits = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            let lvl = layer.level;
            let (h, w) = dims[lvl];
            let mut pixels = current[lvl];
            if index > 0 {
                if let Some(conv) = &layer.residual {
                    let img = g.reshape(prev.0, &[prev.1 .0, prev.1 .1, c]);
                    let resampled = g.resize(img, h, w);
                    let r = conv.forward(g, resampled);
                    let r = g.reshape(r, &[h * w, c]);
                    pixels = g.add(pixels, r);
                }
                if let Some(head) = semantic {
                    let img = g.reshape(pixels, &[h, w, c]);
                    for b in &mut blocks {
                        let mut s = head.extract(g, img, lvl, &b.points, &b.valid);
                        if let (Some(carry), Some(sp)) = (&layer.semantic_residual, b.semantic) {
                            let r = carry.forward(g, sp);
                            s = g.add(s, r);
                        }
                        b.queries = g.add(b.queries, s);
                        b.semantic = Some(s);
                    }
                }
            }

            let probs = self.mask_probs(g, prev.0, prev.1, (h, w));
            let fg = foreground(&probs);
            let bg: Vec<bool> = fg.iter().map(|&f| !f).collect();
            layer_masks.push(
                Tensor::from_vec(&[h, w], probs.iter().map(|p| p.to_f64c()).collect()).expect("shape"),
            );

            let kv = layer.keys_values(g, pixels);
            if let Some(x) = object {
                let x = layer.cross_attend(g, OBJECT, x, kv, &fg, None, self.heads);
                object = Some(layer.self_blocks[OBJECT].forward(g, x, None, self.heads));
            }
            for b in &mut blocks {
                let branch = if b.branch == 0 { POSITIVE } else { NEGATIVE };
                let allowed = if b.foreground { &fg } else { &bg };
                let x = layer.cross_attend(g, branch, b.queries, kv, allowed, Some(&b.valid), self.heads);
                b.queries = layer.self_blocks[branch].forward(g, x, Some(&b.valid), self.heads);
            }

            let mut parts = Vec::new();
            let mut valid = Vec::new();
            if let Some(x) = object {
                parts.push(x);
                valid.extend(std::iter::repeat_n(true, g.shape(x)[0]));
            }
            for b in &blocks {
                parts.push(b.queries);
                valid.extend_from_slice(&b.valid);
            }
            let all = g.concat_rows(&parts);
            let out = layer.pixel.forward(g, pixels, all, &valid, self.heads);
            current[lvl] = out;
            prev = (out, (h, w));
            if deep_supervision && index + 1 < self.layers.len() {
                let z = self.mask_logits(g, out, (h, w));
                layer_logits.push(g.resize(z, image_hw.0, image_hw.1));
            }
        }
        let z = self.mask_logits(g, prev.0, prev.1);
        let logits = g.resize(z, image_hw.0, image_hw.1);
        DecoderOutput { logits, layer_masks, layer_logits, schedule: self.scale_schedule() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eq_masks_boundary_inclusive() {
        let (fg, bg) = attention_masks(&[0.7f64, 0.5, 0.3]);
        assert_eq!(fg, vec![0.0, 0.0, f64::NEG_INFINITY]);
        assert_eq!(bg, vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]);
    }

    #[test]
    fn default_schedule_is_round_robin() {
        let cfg = ModelConfig { channels: 8, heads: 2, ffn_width: 8, ..ModelConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(dec.scale_schedule(), vec![8, 4, 2, 8, 4, 2]);
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup() -> (ParamStore<f64>, Decoder) {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        (store, dec)
    }

    fn copy_param(store: &mut ParamStore<f64>, from: ParamId, to: ParamId) {
        let v = store.get(from).clone();
        *store.get_mut(to) = v;
    }

    #[test]
    fn single_allowed_pixel_returns_its_value() {
        let (store, dec) = setup();
        let layer = &dec.layers[0];
        let mut g = Graph::new(&store);
        let pixels = g.input(random(6, 8, 2));
        let x = g.input(random(3, 8, 3));
        let kv = layer.keys_values(&mut g, pixels);
        let mut allowed = vec![false; 6];
        allowed[4] = true;
        let y = layer.cross_attend(&mut g, POSITIVE, x, kv, &allowed, None, 2);
        let v = g.value(kv.1).data()[4 * 8..5 * 8].to_vec();
        for r in 0..3 {
            for c in 0..8 {
                let want = g.value(x).data()[r * 8 + c] + v[c];
                assert!((g.value(y).data()[r * 8 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_mask_falls_back_and_stays_finite() {
        let (store, dec) = setup();
        let layer = &dec.layers[0];
        let mut g = Graph::new(&store);
        let pixels = g.input(random(6, 8, 2));
        let x = g.input(random(2, 8, 3));
        let kv = layer.keys_values(&mut g, pixels);
        let (_, bg) = (0, vec![false; 6]);
        let y = layer.cross_attend(&mut g, NEGATIVE, x, kv, &bg, None, 2);
        assert!(g.value(y).all_finite());
        let unmasked = layer.cross_attend(&mut g, NEGATIVE, x, kv, &[true; 6], None, 2);
        assert_eq!(g.value(y), g.value(unmasked));
    }

    #[test]
    fn tied_object_and_positive_branches_agree() {
        let (mut store, dec) = setup();
        let layer = dec.layers[0].clone();
        for (a, b) in [
            (layer.cross[POSITIVE].q.w, layer.cross[OBJECT].q.w),
            (layer.cross[POSITIVE].norm.gamma, layer.cross[OBJECT].norm.gamma),
            (layer.cross[POSITIVE].norm.beta, layer.cross[OBJECT].norm.beta),
        ] {
            copy_param(&mut store, a, b);
        }
        let mut g = Graph::new(&store);
        let pixels = g.input(random(9, 8, 5));
        let x = g.input(random(4, 8, 6));
        let kv = layer.keys_values(&mut g, pixels);
        let fg = [true, false, true, true, false, false, true, false, true];
        let a = layer.cross_attend(&mut g, OBJECT, x, kv, &fg, None, 2);
        let b = layer.cross_attend(&mut g, POSITIVE, x, kv, &fg, None, 2);
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn self_block_single_query() {
        let (store, dec) = setup();
        let blk = &dec.layers[0].self_blocks[POSITIVE];
        let mut g = Graph::new(&store);
        let x = g.input(random(1, 8, 7));
        let y = blk.forward(&mut g, x, None, 2);
        // by hand: x + Wo Wv LN(x), then the FFN residual
        let h = blk.norm1.forward(&mut g, x);
        let v = blk.v.forward(&mut g, h);
        let o = blk.o.forward(&mut g, v);
        let x1 = g.add(x, o);
        let h2 = blk.norm2.forward(&mut g, x1);
        let f = blk.ffn.forward(&mut g, h2);
        let want = g.add(x1, f);
        for (a, b) in g.value(y).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_block_invalid_rows_unchanged_and_permutation_equivariant() {
        let (store, dec) = setup();
        let blk = &dec.layers[0].self_blocks[NEGATIVE];
        let x0 = random(4, 8, 8);
        let valid = [true, true, true, false];
        let mut xd = x0.data().to_vec();
        xd[24..].iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(&[4, 8], xd.clone()).unwrap());
        let y = blk.forward(&mut g, x, Some(&valid), 2);
        assert!(g.value(y).data()[24..].iter().all(|&v| v == 0.0));
        let perm = [2usize, 0, 1, 3];
        let px: Vec<f64> = perm.iter().flat_map(|&p| xd[p * 8..(p + 1) * 8].to_vec()).collect();
        let xp = g.input(Tensor::from_vec(&[4, 8], px).unwrap());
        let yp = blk.forward(&mut g, xp, Some(&valid), 2);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                let (a, b) = (g.value(yp).data()[i * 8 + c], g.value(y).data()[p * 8 + c]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pixel_update_with_zero_output_projection_is_ffn_only() {
        let (store, dec) = setup();
        let pu = &dec.layers[0].pixel;
        let mut g = Graph::new(&store);
        let f = g.input(random(6, 8, 9));
        let q = g.input(Tensor::zeros(&[3, 8]));
        let out = pu.forward(&mut g, f, q, &[true; 3], 2);
        let h = pu.norm_ffn.forward(&mut g, f);
        let h = pu.ffn.forward(&mut g, h);
        let want = g.add(f, h);
        assert_eq!(g.value(out), g.value(want));
    }

    #[test]
    fn masked_click_entries_reproduce_object_only_attention() {
        let (mut store, dec) = setup();
        let pu = dec.layers[0].pixel.clone();
        let o = store.get(pu.o.w).clone();
        *store.get_mut(pu.o.w) = o.map(|_| 0.3);
        let mut g = Graph::new(&store);
        let f = g.input(random(6, 8, 9));
        let obj = g.input(random(2, 8, 10));
        let clicks = g.input(random(4, 8, 11));
        let all = g.concat_rows(&[obj, clicks]);
        let a = pu.forward(&mut g, f, all, &[true, true, false, false, false, false], 2);
        let b = pu.forward(&mut g, f, obj, &[true, true], 2);
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn constant_features_decode_to_constant_probabilities() {
        let (store, dec) = setup();
        let mut g = Graph::new(&store);
        let f = g.input(Tensor::full(&[16, 8], 0.4));
        let p = dec.mask_probs(&mut g, f, (4, 4), (16, 16));
        assert!(p.iter().all(|&v| v == p[0] && v > 0.0 && v < 1.0));
        let same = dec.mask_probs(&mut g, f, (4, 4), (4, 4));
        assert_eq!(same[0], p[0]);
    }
}
