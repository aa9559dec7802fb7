//! Image encoder, mask&click encoder and their fusion.
//!
//! Both encoders emit a three-level pyramid at 1/8, 1/4 and 1/2 of the input
//! resolution with `C` channels per level, coarsest first.

use rand::Rng;

use crate::clicks::DensePrompt;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn::{Conv2d, Init, Linear};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Downsampling factors of the pyramid levels, coarsest first.
pub const SCALES: [usize; 3] = [8, 4, 2];

/// Feature maps `[H/s, W/s, C]` for `s` in [`SCALES`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { levels: SCALES.iter().map(|s| Tensor::zeros(&[height / s, width / s, channels])).collect() }
    }

    pub fn level_shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|l| l.shape().to_vec()).collect()
    }

    /// Elementwise sum per level.
    pub fn fuse(&self, other: &Self) -> Result<Self> {
        if self.level_shapes() != other.level_shapes() {
            return Err(Error::Contract(format!(
                "pyramid shapes differ: {:?} vs {:?}",
                self.level_shapes(),
                other.level_shapes()
            )));
        }
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| {
                let mut s = a.clone();
                s.add_assign(b);
                s
            })
            .collect();
        Ok(Self { levels })
    }

    pub fn negate(&self) -> Self {
        Self { levels: self.levels.iter().map(|l| l.map(|v| -v)).collect() }
    }

    pub fn into_vars(self, g: &mut Graph<T>) -> [Var; 3] {
        let mut it = self.levels.into_iter().map(|l| g.input(l));
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    }

    pub fn from_vars(g: &Graph<T>, vars: &[Var; 3]) -> Self {
        Self { levels: vars.iter().map(|&v| g.value(v).clone()).collect() }
    }
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::Contract(format!("image size {height}x{width} must be a positive multiple of 8")));
    }
    Ok(())
}

/// Plain strided convolutional pyramid: a full-resolution stem followed by
/// three stages that each halve the resolution.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stem: Conv2d,
    stages: Vec<Vec<Conv2d>>,
    /// 1x1 projections to `C`, fine to coarse (matching `stages`).
    proj: Vec<Linear>,
    channels: usize,
}

impl ImageEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let relu_init = Init::Scaled { gain: 2f64.sqrt() };
        let bw = cfg.base_width;
        let stem = Conv2d::new(store, "image_encoder.stem", 1, bw, 3, 1, true, relu_init, rng);
        let mut stages = Vec::new();
        let mut proj = Vec::new();
        let mut c_in = bw;
        for s in 0..3 {
            let c_out = bw << s;
            let mut convs = Vec::new();
            for d in 0..cfg.depth {
                let stride = if d == 0 { 2 } else { 1 };
                let name = format!("image_encoder.stage{s}.conv{d}");
                convs.push(Conv2d::new(store, &name, c_in, c_out, 3, stride, true, relu_init, rng));
                c_in = c_out;
            }
            stages.push(convs);
            let name = format!("image_encoder.proj{s}");
            proj.push(Linear::new(store, &name, c_out, cfg.channels, true, Init::Scaled { gain: 1.0 }, rng));
        }
        Self { stem, stages, proj, channels: cfg.channels }
    }

    /// `image` is `[H, W]` or `[H, W, 1]` with intensities in [0, 1].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: &Tensor<T>) -> Result<[Var; 3]> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        check_divisible(h, w)?;
        let x = g.input(image.clone().reshape(&[h, w, 1])?);
        let x = self.stem.forward(g, x);
        let mut x = g.relu(x);
        let mut outs = Vec::new();
        for (s, convs) in self.stages.iter().enumerate() {
            for conv in convs {
                let y = conv.forward(g, x);
                x = g.relu(y);
            }
            let shape = g.shape(x).to_vec();
            let flat = g.reshape(x, &[shape[0] * shape[1], shape[2]]);
            let p = self.proj[s].forward(g, flat);
            outs.push(g.reshape(p, &[shape[0], shape[1], self.channels]));
        }
        // stages run fine to coarse; the pyramid is coarse first
        Ok([outs[2], outs[1], outs[0]])
    }

    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new(params);
        let vars = self.forward(&mut g, image)?;
        Ok(FeaturePyramid::from_vars(&g, &vars))
    }
}

/// Bias-free convolution stack over the three-channel dense prompt. The final
/// per-level projections start at zero, and without biases an all-zero prompt
/// always maps to the zero pyramid.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    stages: Vec<Conv2d>,
    proj: Vec<Linear>,
    channels: usize,
}

impl PromptEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut stages = Vec::new();
        let mut proj = Vec::new();
        let mut c_in = 3;
        for s in 0..3 {
            let c_out = cfg.prompt_width << s;
            let name = format!("prompt_encoder.stage{s}");
            stages.push(Conv2d::new(store, &name, c_in, c_out, 3, 2, false, Init::Scaled { gain: 2f64.sqrt() }, rng));
            let name = format!("prompt_encoder.proj{s}");
            proj.push(Linear::new(store, &name, c_out, cfg.channels, false, Init::Zeros, rng));
            c_in = c_out;
        }
        Self { stages, proj, channels: cfg.channels }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, prompt: &DensePrompt<T>) -> Result<[Var; 3]> {
        let s = prompt.map.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Contract(format!("dense prompt must be [H, W, 3], got {s:?}")));
        }
        check_divisible(s[0], s[1])?;
        let mut x = g.input(prompt.map.clone());
        let mut outs = Vec::new();
        for (conv, proj) in self.stages.iter().zip(&self.proj) {
            let y = conv.forward(g, x);
            x = g.relu(y);
            let shape = g.shape(x).to_vec();
            let flat = g.reshape(x, &[shape[0] * shape[1], shape[2]]);
            let p = proj.forward(g, flat);
            outs.push(g.reshape(p, &[shape[0], shape[1], self.channels]));
        }
        Ok([outs[2], outs[1], outs[0]])
    }

    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, prompt: &DensePrompt<T>) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new(params);
        let vars = self.forward(&mut g, prompt)?;
        Ok(FeaturePyramid::from_vars(&g, &vars))
    }
}

/// Per-level sum of two pyramids on the graph.
pub fn fuse_vars<T: Scalar>(g: &mut Graph<T>, a: &[Var; 3], b: &[Var; 3]) -> Result<[Var; 3]> {
    for (x, y) in a.iter().zip(b) {
        if g.shape(*x) != g.shape(*y) {
            return Err(Error::Contract(format!("pyramid level shapes differ: {:?} vs {:?}", g.shape(*x), g.shape(*y))));
        }
    }
    Ok([g.add(a[0], b[0]), g.add(a[1], b[1]), g.add(a[2], b[2])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicks::{rasterize, Click, ClickSet, Polarity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f32>, ImageEncoder, PromptEncoder) {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ie = ImageEncoder::new(&mut store, &cfg, &mut rng);
        let pe = PromptEncoder::new(&mut store, &cfg, &mut rng);
        (store, ie, pe)
    }

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(&[h, w], (0..h * w).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect()).unwrap()
    }

    #[test]
    fn pyramid_scale_contract() {
        let (store, ie, _) = setup();
        let p = ie.encode(&store, &image(64, 64)).unwrap();
        assert_eq!(p.level_shapes(), vec![vec![8, 8, 64], vec![16, 16, 64], vec![32, 32, 64]]);
        let p = ie.encode(&store, &image(256, 256)).unwrap();
        assert_eq!(p.level_shapes(), vec![vec![32, 32, 64], vec![64, 64, 64], vec![128, 128, 64]]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let (store, ie, _) = setup();
        assert!(matches!(ie.encode(&store, &image(60, 64)), Err(Error::Contract(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, ie, _) = setup();
        let img = image(32, 32);
        assert_eq!(ie.encode(&store, &img).unwrap(), ie.encode(&store, &img).unwrap());
    }

    #[test]
    fn zero_prompt_maps_to_zero_pyramid_even_after_training_noise() {
        let (mut store, _, pe) = setup();
        // perturb every prompt-encoder weight so the zero output is structural
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("prompt_encoder") {
                store.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i % 7) as f32);
            }
        }
        let prompt = rasterize::<f32>(&ClickSet::new(), &Tensor::zeros(&[64, 64]), 64, 64).unwrap();
        let p = pe.encode(&store, &prompt).unwrap();
        assert_eq!(p, FeaturePyramid::zeros(64, 64, 64));
    }

    #[test]
    fn prompt_pyramid_shapes_and_channel_check() {
        let (store, _, pe) = setup();
        let mut cs = ClickSet::new();
        cs.push(Click::new(5, 5, Polarity::Positive)).unwrap();
        let prompt = rasterize::<f32>(&cs, &Tensor::zeros(&[256, 256]), 256, 256).unwrap();
        let p = pe.encode(&store, &prompt).unwrap();
        assert_eq!(p.level_shapes()[0], vec![32, 32, 64]);
        assert_eq!(p.level_shapes()[2], vec![128, 128, 64]);
        assert_eq!(p, pe.encode(&store, &prompt).unwrap());
        let bad = DensePrompt { map: Tensor::<f32>::zeros(&[64, 64, 2]) };
        assert!(pe.encode(&store, &bad).is_err());
    }

    #[test]
    fn fuse_identities() {
        let (store, ie, _) = setup();
        let a = ie.encode(&store, &image(32, 32)).unwrap();
        let b = ie.encode(&store, &image(32, 32).map(|v| 1.0 - v)).unwrap();
        assert_eq!(a.fuse(&FeaturePyramid::zeros(32, 32, 64)).unwrap(), a);
        assert_eq!(a.fuse(&b).unwrap(), b.fuse(&a).unwrap());
        assert_eq!(a.fuse(&a.negate()).unwrap(), FeaturePyramid::zeros(32, 32, 64));
        assert!(a.fuse(&FeaturePyramid::zeros(64, 64, 64)).is_err());
    }
}
