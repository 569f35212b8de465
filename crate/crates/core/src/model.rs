//! The full network: encoders, query initialization, decoder stack and the
//! regional head, plus the inference pipeline.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, QueryInit};
use crate::encoders::{encode_image, encode_text, pixel_decode, EncoderParams, FeatureMap};
use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::geometry::{bilinear_resample, build_region_grid, BinaryMask, BoundQueries, RegionGrid};
use crate::graph::{sigmoid_of, NodeId};
use crate::loss::{total_loss_node, LossReport, LossWeights, ScaleLogits};
use crate::metrics::{apply_min_pixel_rule, min_pixel_threshold};
use crate::mmd::{decode_stack, AttentionMask, Decoder};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::qgen::{generate_queries, QueryGenerator, RegionEmbeddings};
use crate::rsh::{rsh_forward, RshOutput, RshParams};

#[derive(Debug, Clone)]
pub struct Model<F: Float> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub encoders: EncoderParams,
    /// Language rows `C_L -> C` before they enter the decoder.
    pub lang_proj: Linear,
    pub regions: RegionEmbeddings,
    pub qgen: Option<QueryGenerator>,
    pub decoder: Decoder,
    pub rsh: RshParams,
}

/// Everything one forward pass exposes, per decoder layer.
#[derive(Debug, Clone)]
pub struct LayerForward<F> {
    pub level: usize,
    pub grid: RegionGrid,
    pub logits: ScaleLogits,
    pub head: RshOutput,
    pub queries: NodeId,
    pub cross_attention: Vec<Vec<NodeId>>,
    pub mask: AttentionMask<F>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    pub layers: Vec<LayerForward<F>>,
    /// `1 x C_L` sentence vector of the text encoder.
    pub sentence: NodeId,
    /// Region-over-word attention of the query generator, if used.
    pub qgen_attention: Option<NodeId>,
}

impl<F> ForwardOutput<F> {
    pub fn last(&self) -> &LayerForward<F> {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// Result of the inference pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: BinaryMask,
    /// Final-layer no-target probability, when that head exists.
    pub nt_prob: Option<f64>,
    /// Mask after thresholding and the minimum-pixel rule, before the
    /// no-target override.
    pub raw_mask: BinaryMask,
}

impl<F: Float> Model<F> {
    /// Builds and initializes a model from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoders = EncoderParams::new(&mut store, &mut rng, &cfg);
        let lang_proj = Linear::new(&mut store, &mut rng, "lang_proj", cfg.lang_channels, cfg.channels);
        let regions = RegionEmbeddings::new(&mut store, &mut rng, cfg.initial_regions, cfg.channels);
        let qgen = match cfg.query_init {
            QueryInit::Generated => Some(QueryGenerator::new(&mut store, &mut rng, cfg.channels, cfg.lang_channels)),
            QueryInit::Learned => None,
        };
        let decoder = Decoder::new(&mut store, &mut rng, &cfg);
        let rsh = RshParams::new(&mut store, &mut rng, &cfg);
        Ok(Self { cfg, store, encoders, lang_proj, regions, qgen, decoder, rsh })
    }

    /// Same architecture with another parameter store (shape-checked).
    pub fn with_store(&self, store: ParamStore<F>) -> Result<Self> {
        if store.len() != self.store.len() {
            return Err(invalid_arg!("store has {} parameters, model needs {}", store.len(), self.store.len()));
        }
        for (a, b) in store.iter().zip(self.store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(invalid_arg!("parameter {} does not match {}", a.name, b.name));
            }
        }
        Ok(Self { store, ..self.clone() })
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoders: self.encoders.clone(),
            lang_proj: self.lang_proj,
            regions: self.regions,
            qgen: self.qgen.clone(),
            decoder: self.decoder.clone(),
            rsh: self.rsh.clone(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { ce: self.cfg.ce_weight, dice: self.cfg.dice_weight, dice_eps: self.cfg.dice_eps, nt: self.cfg.nt_weight }
    }

    /// Forward pass over an interleaved `size x size x 3` image in `[0, 1]`.
    pub fn forward(&self, ctx: &mut Ctx<'_, F>, image: &[F], tokens: &[u32]) -> Result<ForwardOutput<F>> {
        let n = self.cfg.image_size;
        if tokens.len() > self.cfg.max_tokens {
            return Err(invalid_arg!("{} tokens exceed the limit of {}", tokens.len(), self.cfg.max_tokens));
        }
        let raw = encode_image(ctx, &self.encoders.visual, image, n, n)?;
        let pyramid = pixel_decode(ctx, &self.encoders.pixel, &raw)?;
        let words = encode_text(ctx, &self.encoders.text, tokens)?;
        let lang = self.lang_proj.forward(ctx, words.words);
        let first: FeatureMap = pyramid.levels[self.cfg.layer_level(0)];
        let grid = build_region_grid(first.h, first.w, self.cfg.initial_regions)?;
        let (q0, qgen_attention) = match &self.qgen {
            Some(gen) => {
                let g = generate_queries(ctx, gen, self.regions, &words, grid)?;
                (g.queries, Some(g.attention))
            }
            None => (BoundQueries { node: ctx.p(self.regions.0), grid }, None),
        };
        let mut heads: Vec<RshOutput> = Vec::with_capacity(self.cfg.decoder_layers);
        let rsh = &self.rsh;
        let outs = decode_stack(ctx, &self.decoder, &self.cfg, q0, &pyramid, lang, |ctx, state, v| {
            let out = rsh_forward(ctx, rsh, state.layer, state.queries, v, state.lang)?;
            heads.push(out);
            Ok(out.stitched)
        })?;
        let layers = outs
            .into_iter()
            .zip(heads)
            .map(|(o, head)| {
                let v = pyramid.levels[o.level];
                LayerForward {
                    level: o.level,
                    grid: o.state.queries.grid,
                    logits: ScaleLogits { node: head.stitched, h: v.h, w: v.w },
                    head,
                    queries: o.state.queries.node,
                    cross_attention: o.cross_attention,
                    mask: o.mask,
                }
            })
            .collect();
        Ok(ForwardOutput { layers, sentence: words.sentence, qgen_attention })
    }

    /// Deeply supervised objective for one sample.
    pub fn loss(
        &self,
        ctx: &mut Ctx<'_, F>,
        out: &ForwardOutput<F>,
        gt: &BinaryMask,
        nt_flag: bool,
    ) -> Result<(NodeId, LossReport)> {
        let scales: Vec<ScaleLogits> = out
            .layers
            .iter()
            .enumerate()
            .filter(|(l, _)| self.cfg.main_supervised(*l))
            .map(|(_, layer)| layer.logits)
            .collect();
        let nt: Vec<NodeId> = out.layers.iter().filter_map(|l| l.head.nt).collect();
        total_loss_node(ctx, &scales, &nt, gt, nt_flag, &self.loss_weights())
    }

    /// Loss of one sample and its gradient added into `grads` times `scale`.
    pub fn accumulate_gradient(
        &self,
        image: &[F],
        tokens: &[u32],
        gt: &BinaryMask,
        nt_flag: bool,
        grads: &mut ParamStore<F>,
        scale: F,
    ) -> Result<LossReport> {
        let mut ctx = Ctx::new(&self.store);
        let out = self.forward(&mut ctx, image, tokens)?;
        let (loss, report) = self.loss(&mut ctx, &out, gt, nt_flag)?;
        ctx.graph.backward(loss);
        ctx.accumulate_grads(grads, scale);
        Ok(report)
    }

    /// Loss value only.
    pub fn sample_loss(&self, image: &[F], tokens: &[u32], gt: &BinaryMask, nt_flag: bool) -> Result<LossReport> {
        let mut ctx = Ctx::new(&self.store);
        let out = self.forward(&mut ctx, image, tokens)?;
        Ok(self.loss(&mut ctx, &out, gt, nt_flag)?.1)
    }

    /// Decode, stitch, bilinear upsample, threshold at probability 0.5,
    /// minimum-pixel rule, then the no-target override.
    pub fn predict(&self, image: &[F], tokens: &[u32]) -> Result<Prediction> {
        let mut ctx = Ctx::new(&self.store);
        let out = self.forward(&mut ctx, image, tokens)?;
        Ok(self.postprocess(&ctx, &out))
    }

    pub fn postprocess(&self, ctx: &Ctx<'_, F>, out: &ForwardOutput<F>) -> Prediction {
        let n = self.cfg.image_size;
        let last = out.last();
        let logits = ctx.graph.value(last.logits.node).data();
        let up = bilinear_resample(logits, last.logits.h, last.logits.w, n, n);
        let mask = BinaryMask::from_vec(n, n, up.iter().map(|&x| x > F::zero()).collect()).expect("sized");
        let raw_mask = apply_min_pixel_rule(&mask, min_pixel_threshold(n, n));
        let nt_prob = last.head.nt.map(|id| sigmoid_of(ctx.graph.value(id).item()).to_f64().unwrap_or(f64::NAN));
        let mask = match nt_prob {
            Some(p) if p > 0.5 => BinaryMask::empty(n, n),
            _ => raw_mask.clone(),
        };
        Prediction { mask, nt_prob, raw_mask }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationVariant, DecoderKind, HeadKind};
    use crate::synth::{generate_dataset, DatasetSpec, Split};
    use alloc::vec;

    pub(crate) fn tiny(variant: AblationVariant) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            channels: 8,
            lang_channels: 8,
            initial_regions: 4,
            decoder_layers: 1,
            blocks_per_layer: 1,
            main_depth: 1,
            nt_depth: 1,
            nt_hidden: 4,
            ..ModelConfig::default()
        }
        .with_variant(variant)
    }

    #[test]
    fn forward_shapes_default() {
        let cfg = ModelConfig { channels: 16, lang_channels: 16, ..ModelConfig::default() };
        let m = Model::<f32>::new(cfg).unwrap();
        let d = generate_dataset(&DatasetSpec::default(), 2, 0, Split::Train).unwrap();
        let mut ctx = Ctx::new(&m.store);
        let out = m.forward(&mut ctx, &d[0].image_floats(), &d[0].tokens).unwrap();
        let dims: Vec<(usize, usize, usize)> =
            out.layers.iter().map(|l| (l.logits.h, l.grid.n_regions, ctx.graph.shape(l.queries).0)).collect();
        assert_eq!(dims, [(3, 4, 4), (6, 16, 16), (12, 64, 64)]);
        assert!(out.layers.iter().all(|l| l.head.nt.is_some()));
        let (loss, report) = m.loss(&mut ctx, &out, &d[0].gt_mask, d[0].nt_flag).unwrap();
        assert!(ctx.graph.value(loss).item().is_finite());
        assert_eq!(report.scales.len(), 3);
        let p = m.postprocess(&ctx, &out);
        assert_eq!((p.mask.height, p.mask.width), (96, 96));
    }

    #[test]
    fn variants_build_expected_topology() {
        for v in AblationVariant::ALL {
            let m = Model::<f64>::new(tiny(v)).unwrap();
            assert_eq!(m.qgen.is_some(), v == AblationVariant::Full);
            assert_eq!(m.decoder.kind == DecoderKind::Mixed, matches!(v, AblationVariant::RshMmd | AblationVariant::Full));
            assert_eq!(m.rsh.kind == HeadKind::Global, v == AblationVariant::Naive);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::new(ModelConfig::default()).unwrap();
        let b = Model::<f32>::new(ModelConfig::default()).unwrap();
        assert!(a.store.iter().zip(b.store.iter()).all(|(x, y)| x.value == y.value && x.name == y.name));
        let c = Model::<f32>::new(ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
        assert!(a.store.iter().zip(c.store.iter()).any(|(x, y)| x.value != y.value));
    }

    #[test]
    fn naive_head_is_one_prototype() {
        let m = Model::<f64>::new(tiny(AblationVariant::Naive)).unwrap();
        let image = vec![0.3; 32 * 32 * 3];
        let mut ctx = Ctx::new(&m.store);
        let out = m.forward(&mut ctx, &image, &[1, 10]).unwrap();
        assert!(out.last().head.regions.is_none());
    }

    #[test]
    fn oversized_token_sequence_rejected() {
        let m = Model::<f32>::new(tiny(AblationVariant::Full)).unwrap();
        let image = vec![0.0; 32 * 32 * 3];
        assert!(m.predict(&image, &[1; 17]).is_err());
        assert!(m.predict(&image, &[]).is_err());
        assert!(m.predict(&image[1..], &[1]).is_err());
    }
}
