//! The assembled segmentation model and its checkpoint format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::clicks::{pad, rasterize, ClickSet};
use crate::config::ModelConfig;
use crate::decoder::{Decoder, DecoderOutput};
use crate::encoders::{fuse_vars, FeaturePyramid, ImageEncoder, PromptEncoder};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, ParamStore, Var};
use crate::mask::BinaryMask;
use crate::prompts::{assemble, Mode, ObjectQueryBank, PointEncoder, SemanticQueryHead};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "verse-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One forward request.
#[derive(Clone, Copy, Debug)]
pub struct Step<'a, T> {
    pub mode: Mode,
    pub target: Option<usize>,
    pub clicks: &'a ClickSet,
    /// Previous mask probabilities `[H, W]`; ignored in [`Mode::Auto`].
    pub prev_mask: &'a Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// Probabilities `[H, W]`.
    pub probs: Tensor<T>,
    pub layer_masks: Vec<Tensor<f64>>,
}

impl<T: Scalar> Prediction<T> {
    pub fn mask(&self) -> BinaryMask {
        let s = self.probs.shape();
        BinaryMask::from_probs(s[0], s[1], self.probs.data(), 0.5).expect("shape")
    }

    pub fn mean_confidence(&self) -> f64 {
        // mean probability of the predicted label per pixel
        let n = self.probs.len().max(1) as f64;
        self.probs.data().iter().map(|p| { let p = p.to_f64c(); p.max(1.0 - p) }).sum::<f64>() / n
    }

    /// Archive of the per-layer attention-driving masks plus the final one.
    pub fn layer_dump(&self) -> Archive {
        let mut a = Archive::new("verse-layer-masks", serde_json::json!({ "layers": self.layer_masks.len() }));
        for (i, m) in self.layer_masks.iter().enumerate() {
            a.push(format!("layer{i}"), m);
        }
        a.push("final", &self.probs);
        a
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    dtype: String,
    model: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct Verse<T: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    image_encoder: ImageEncoder,
    prompt_encoder: PromptEncoder,
    bank: ObjectQueryBank,
    points: PointEncoder,
    semantic: Option<SemanticQueryHead>,
    decoder: Decoder,
}

impl<T: Scalar> Verse<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let image_encoder = ImageEncoder::new(&mut params, &cfg, &mut rng);
        let prompt_encoder = PromptEncoder::new(&mut params, &cfg, &mut rng);
        let bank = ObjectQueryBank::new(&mut params, &cfg, &mut rng);
        let points = PointEncoder::new(&mut params, &cfg, &mut rng);
        let semantic = cfg.flags.use_semantic_queries.then(|| SemanticQueryHead::new(&mut params, &cfg, &mut rng));
        let decoder = Decoder::new(&mut params, &cfg, &mut rng);
        Ok(Self { cfg, params, image_encoder, prompt_encoder, bank, points, semantic, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn num_targets(&self) -> usize {
        self.cfg.num_targets
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Verse<U> {
        Verse {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            image_encoder: self.image_encoder.clone(),
            prompt_encoder: self.prompt_encoder.clone(),
            bank: self.bank.clone(),
            points: self.points.clone(),
            semantic: self.semantic.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Image pyramid on the graph (for training through the encoder).
    pub fn encode_image_graph(&self, g: &mut Graph<T>, image: &Tensor<T>) -> Result<[Var; 3]> {
        self.image_encoder.forward(g, image)
    }

    /// Image pyramid values, computed once per image and reused per click.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.image_encoder.encode(&self.params, image)
    }

    /// Prompt encoding, query assembly and decoding on top of an image
    /// pyramid that is already on the graph.
    pub fn forward(&self, g: &mut Graph<T>, image_pyr: [Var; 3], step: &Step<T>, deep_supervision: bool) -> Result<DecoderOutput> {
        let coarse = g.shape(image_pyr[0]).to_vec();
        let (h, w) = (coarse[0] * 8, coarse[1] * 8);
        let empty = ClickSet::new();
        let zeros;
        let (clicks, prev) = if step.mode.uses_clicks() {
            (step.clicks, step.prev_mask)
        } else {
            zeros = Tensor::zeros(&[h, w]);
            (&empty, &zeros)
        };
        let prompt = rasterize(clicks, prev, h, w)?;
        let prompt_pyr = self.prompt_encoder.forward(g, &prompt)?;
        let fused = fuse_vars(g, &image_pyr, &prompt_pyr)?;
        let padded = pad(clicks, self.cfg.max_clicks_per_polarity)?;
        let qs = assemble(
            g,
            &self.cfg,
            step.mode,
            step.target,
            &self.bank,
            &self.points,
            self.semantic.as_ref(),
            &padded,
            fused[0],
            (h, w),
        )?;
        Ok(self.decoder.forward(g, fused, &qs, self.semantic.as_ref(), (h, w), deep_supervision))
    }

    pub fn predict(&self, pyramid: &FeaturePyramid<T>, step: &Step<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new(&self.params);
        let vars = pyramid.clone().into_vars(&mut g);
        let out = self.forward(&mut g, vars, step, false)?;
        let z = g.value(out.logits);
        let s = z.shape();
        let probs = Tensor::from_vec(&[s[0], s[1]], z.data().iter().map(|&v| sigmoid(v)).collect())?;
        Ok(Prediction { probs, layer_masks: out.layer_masks })
    }

    pub fn to_archive(&self) -> Archive {
        let meta = CheckpointMeta { version: CHECKPOINT_VERSION, dtype: T::DTYPE.into(), model: self.cfg.clone() };
        let mut a = Archive::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serialises"));
        for id in self.params.ids() {
            a.push(self.params.name(id), self.params.get(id));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("archive holds {:?}, not a checkpoint", a.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(a.meta.clone())
            .map_err(|e| Error::Version(format!("unreadable checkpoint header: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!("checkpoint version {}, expected {CHECKPOINT_VERSION}", meta.version)));
        }
        let mut model = Self::new(meta.model, 0)?;
        if a.arrays.len() != model.params.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} arrays, architecture needs {}",
                a.arrays.len(),
                model.params.len()
            )));
        }
        for (name, arr) in &a.arrays {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Version(format!("checkpoint array {name:?} not in architecture")))?;
            if arr.shape() != model.params.get(id).shape() {
                return Err(Error::Version(format!(
                    "{name}: checkpoint shape {:?}, architecture {:?}",
                    arr.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = arr.to_tensor();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Loads and insists on a given architecture.
    pub fn load_expecting(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let m = Self::load(path)?;
        if m.config() != cfg {
            return Err(Error::Version(format!(
                "checkpoint config {} differs from requested {}",
                serde_json::to_string(m.config())?,
                serde_json::to_string(cfg)?
            )));
        }
        Ok(m)
    }
}
