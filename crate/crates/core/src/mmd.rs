//! Mixed modal decoder.
//!
//! A block runs masked cross-attention over `S = V ++ l` (visual rows then
//! language rows), joint self-attention over `X = Q ++ l`, and an FFN, then
//! splits `X` back into queries and language rows. Blocks are pre-norm with
//! residual connections, so a zeroed output projection is an exact identity.
//!
//! The `Separate` topology keeps the modalities apart instead: visual-only
//! masked cross-attention, a query-to-language cross-attention, and
//! query-only self-attention; the language rows pass through unchanged.
//!
//! Learned per-layer query positions are added to the attention queries and
//! keys (never the values), and fixed sine positions to the visual keys;
//! without them the four children of an upsampled query would stay
//! identical forever.

use alloc::vec::Vec;

use rand::Rng;

use crate::config::{DecoderKind, ModelConfig};
use crate::encoders::{FeatureMap, FeaturePyramid};
use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::geometry::{build_region_grid, nearest_resample, upsample_index, BoundQueries, RegionGrid};
use crate::graph::NodeId;
use crate::nn::{Attention, Ctx, LayerNorm, Mlp, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive attention mask over `(query row, key)`, entries `-inf` or `0`.
/// Keys are the visual positions (row-major) followed by `lang_len`
/// language positions, which are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask<F> {
    values: Tensor<F>,
    visual_len: usize,
    lang_len: usize,
}

impl<F: Float> AttentionMask<F> {
    /// All-zero mask (full attention).
    pub fn open(queries: usize, visual_len: usize, lang_len: usize) -> Self {
        Self { values: Tensor::zeros(queries, visual_len + lang_len), visual_len, lang_len }
    }

    pub fn from_tensor(values: Tensor<F>, visual_len: usize, lang_len: usize) -> Result<Self> {
        if values.cols() != visual_len + lang_len {
            return Err(invalid_arg!(
                "mask has {} columns for {} visual + {} language keys",
                values.cols(),
                visual_len,
                lang_len
            ));
        }
        let ninf = F::neg_infinity();
        for r in 0..values.rows() {
            let row = values.row(r);
            if let Some(bad) = row.iter().find(|&&v| v != ninf && v != F::zero()) {
                return Err(invalid_arg!("mask entry {} is neither -inf nor 0", bad));
            }
            if row[visual_len..].iter().any(|&v| v != F::zero()) {
                return Err(invalid_arg!("language columns of the mask must be 0"));
            }
        }
        Ok(Self { values, visual_len, lang_len })
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn visual_len(&self) -> usize {
        self.visual_len
    }

    pub fn lang_len(&self) -> usize {
        self.lang_len
    }

    pub fn queries(&self) -> usize {
        self.values.rows()
    }

    pub fn is_masked(&self, q: usize, key: usize) -> bool {
        self.values.get(q, key) == F::neg_infinity()
    }

    /// Same visual pattern without language columns.
    pub fn visual_only(&self) -> Self {
        let v = Tensor::from_fn(self.values.rows(), self.visual_len, |r, c| self.values.get(r, c));
        Self { values: v, visual_len: self.visual_len, lang_len: 0 }
    }
}

/// Mask for the blocks of one decoder layer.
///
/// Without a previous prediction every key is visible. Otherwise visual
/// position `p` is hidden from every query when `sigmoid(logit[p]) < 0.5`;
/// a query left with no visible visual position gets all of them back.
pub fn build_attention_mask<F: Float>(
    prev_logits: Option<&[F]>,
    grid: &RegionGrid,
    lang_len: usize,
) -> Result<AttentionMask<F>> {
    let nq = grid.n_regions;
    let nv = grid.num_pixels();
    let Some(logits) = prev_logits else {
        return Ok(AttentionMask::open(nq, nv, lang_len));
    };
    if logits.len() != nv {
        return Err(invalid_arg!("{} logits for a {}x{} level", logits.len(), grid.feat_h, grid.feat_w));
    }
    // sigmoid(x) < 0.5 exactly when x < 0.
    let hidden: Vec<bool> = logits.iter().map(|&x| x < F::zero()).collect();
    let mut mask = Tensor::zeros(nq, nv + lang_len);
    if hidden.iter().all(|&h| h) {
        return Ok(AttentionMask::open(nq, nv, lang_len));
    }
    for q in 0..nq {
        for (p, &h) in hidden.iter().enumerate() {
            if h {
                mask.set(q, p, F::neg_infinity());
            }
        }
    }
    Ok(AttentionMask { values: mask, visual_len: nv, lang_len })
}

/// 2-D sine positions for a `h x w` map, `channels / 2` per axis.
pub fn sine_positions<F: Float>(h: usize, w: usize, channels: usize) -> Tensor<F> {
    let half = channels / 2;
    let pairs = half.div_ceil(2).max(1);
    let tau = core::f64::consts::TAU;
    Tensor::from_fn(h * w, channels, |p, c| {
        let (y, x) = (p / w, p % w);
        let (coord, k) = if c < half { ((y as f64 + 0.5) / h as f64, c) } else { ((x as f64 + 0.5) / w as f64, c - half) };
        let freq = libm_pow(100.0, (k / 2) as f64 / pairs as f64);
        let a = coord * tau * freq;
        F::lit(if k % 2 == 0 { num_traits::Float::sin(a) } else { num_traits::Float::cos(a) })
    })
}

fn libm_pow(b: f64, e: f64) -> f64 {
    num_traits::Float::powf(b, e)
}

#[derive(Debug, Clone)]
pub enum MmdBlock {
    Mixed {
        norm_q: LayerNorm,
        cross: Attention,
        norm_x: LayerNorm,
        joint: Attention,
        norm_f: LayerNorm,
        ffn: Mlp,
    },
    Separate {
        norm_q: LayerNorm,
        cross: Attention,
        norm_l: LayerNorm,
        lang: Attention,
        norm_s: LayerNorm,
        selfattn: Attention,
        norm_f: LayerNorm,
        ffn: Mlp,
    },
}

impl MmdBlock {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, kind: DecoderKind, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let h = cfg.heads;
        let n = |s: &str| alloc::format!("{name}.{s}");
        let ffn = |store: &mut ParamStore<F>, rng: &mut R| Mlp::new(store, rng, &n("ffn"), &[c, cfg.ffn_hidden(), c]);
        match kind {
            DecoderKind::Mixed => Self::Mixed {
                norm_q: LayerNorm::new(store, &n("norm_q"), c),
                cross: Attention::new(store, rng, &n("cross"), c, c, c, h),
                norm_x: LayerNorm::new(store, &n("norm_x"), c),
                joint: Attention::new(store, rng, &n("joint"), c, c, c, h),
                norm_f: LayerNorm::new(store, &n("norm_f"), c),
                ffn: ffn(store, rng),
            },
            DecoderKind::Separate => Self::Separate {
                norm_q: LayerNorm::new(store, &n("norm_q"), c),
                cross: Attention::new(store, rng, &n("cross"), c, c, c, h),
                norm_l: LayerNorm::new(store, &n("norm_l"), c),
                lang: Attention::new(store, rng, &n("lang"), c, c, c, h),
                norm_s: LayerNorm::new(store, &n("norm_s"), c),
                selfattn: Attention::new(store, rng, &n("self"), c, c, c, h),
                norm_f: LayerNorm::new(store, &n("norm_f"), c),
                ffn: ffn(store, rng),
            },
        }
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Self::Mixed { .. } => DecoderKind::Mixed,
            Self::Separate { .. } => DecoderKind::Separate,
        }
    }

    fn cross_parts(&self) -> (&LayerNorm, &Attention) {
        match self {
            Self::Mixed { norm_q, cross, .. } | Self::Separate { norm_q, cross, .. } => (norm_q, cross),
        }
    }
}

/// Positional terms for a cross-attention call.
#[derive(Debug, Clone, Copy, Default)]
pub struct Positions {
    pub query: Option<NodeId>,
    pub visual: Option<NodeId>,
}

fn add_opt<F: Float>(ctx: &mut Ctx<'_, F>, x: NodeId, pos: Option<NodeId>) -> NodeId {
    match pos {
        Some(p) => ctx.graph.add(x, p),
        None => x,
    }
}

/// `Q' = Q + Attn(LN(Q), V ++ l, mask)`.
///
/// For a `Separate` block the mask must have no language columns and `l` is
/// ignored here. Returns the updated queries and the per-head attention.
pub fn masked_cross_attention<F: Float>(
    ctx: &mut Ctx<'_, F>,
    block: &MmdBlock,
    q: NodeId,
    visual: FeatureMap,
    lang: NodeId,
    mask: &AttentionMask<F>,
    pos: Positions,
) -> Result<(NodeId, Vec<NodeId>)> {
    let nq = ctx.graph.shape(q).0;
    let nv = visual.h * visual.w;
    let nl = match block.kind() {
        DecoderKind::Mixed => ctx.graph.shape(lang).0,
        DecoderKind::Separate => 0,
    };
    if mask.queries() != nq || mask.visual_len() != nv || mask.lang_len() != nl {
        return Err(invalid_arg!(
            "mask {}x({}+{}) does not cover {} queries over {} visual + {} language keys",
            mask.queries(),
            mask.visual_len(),
            mask.lang_len(),
            nq,
            nv,
            nl
        ));
    }
    // Re-validate: the mask may have been assembled by hand.
    let mask = AttentionMask::from_tensor(mask.values().clone(), nv, nl)?;
    let (norm, attn) = block.cross_parts();
    let qn = norm.forward(ctx, q);
    let qin = add_opt(ctx, qn, pos.query);
    let vkey = add_opt(ctx, visual.node, pos.visual);
    let (keys, values) = if nl > 0 {
        (ctx.graph.concat_rows(&[vkey, lang]), ctx.graph.concat_rows(&[visual.node, lang]))
    } else {
        (vkey, visual.node)
    };
    let (out, weights) = attn.forward(ctx, qin, keys, values, Some(mask.values()));
    Ok((ctx.graph.add(q, out), weights))
}

/// Self-attention + FFN stage of a block; returns `(queries, language rows)`.
pub fn joint_self_attention_ffn<F: Float>(
    ctx: &mut Ctx<'_, F>,
    block: &MmdBlock,
    q: NodeId,
    lang: NodeId,
    query_pos: Option<NodeId>,
) -> (NodeId, NodeId) {
    let nq = ctx.graph.shape(q).0;
    match block {
        MmdBlock::Mixed { norm_x, joint, norm_f, ffn, .. } => {
            let nl = ctx.graph.shape(lang).0;
            let x = ctx.graph.concat_rows(&[q, lang]);
            let xn = norm_x.forward(ctx, x);
            let xq = match query_pos {
                Some(p) => {
                    let c = ctx.graph.shape(p).1;
                    let zeros = ctx.graph.constant(Tensor::zeros(nl, c));
                    let full = ctx.graph.concat_rows(&[p, zeros]);
                    ctx.graph.add(xn, full)
                }
                None => xn,
            };
            let (a, _) = joint.forward(ctx, xq, xq, xn, None);
            let x = ctx.graph.add(x, a);
            let xf = norm_f.forward(ctx, x);
            let f = ffn.forward(ctx, xf);
            let x = ctx.graph.add(x, f);
            (ctx.graph.slice_rows(x, 0, nq), ctx.graph.slice_rows(x, nq, nl))
        }
        MmdBlock::Separate { norm_l, lang: lang_attn, norm_s, selfattn, norm_f, ffn, .. } => {
            let qn = norm_l.forward(ctx, q);
            let qin = add_opt(ctx, qn, query_pos);
            let (a, _) = lang_attn.forward(ctx, qin, lang, lang, None);
            let q = ctx.graph.add(q, a);
            let qn = norm_s.forward(ctx, q);
            let qin = add_opt(ctx, qn, query_pos);
            let (a, _) = selfattn.forward(ctx, qin, qin, qn, None);
            let q = ctx.graph.add(q, a);
            let qf = norm_f.forward(ctx, q);
            let f = ffn.forward(ctx, qf);
            (ctx.graph.add(q, f), lang)
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub blocks: Vec<MmdBlock>,
    pub query_pos: ParamId,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer {
                blocks: (0..cfg.blocks_per_layer)
                    .map(|b| MmdBlock::new(store, rng, &alloc::format!("decoder.{l}.{b}"), cfg.decoder, cfg))
                    .collect(),
                query_pos: store.add(
                    &alloc::format!("decoder.{l}.query_pos"),
                    crate::nn::uniform(rng, cfg.layer_regions(l), cfg.channels, 0.5),
                ),
            })
            .collect();
        Self { kind: cfg.decoder, layers }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub queries: BoundQueries,
    pub lang: NodeId,
    pub layer: usize,
}

#[derive(Debug, Clone)]
pub struct LayerOutput<F> {
    pub state: DecoderState,
    /// Pyramid level index (0 = stride 32).
    pub level: usize,
    /// Cross-attention weights per block, per head.
    pub cross_attention: Vec<Vec<NodeId>>,
    /// Mask the layer's blocks ran with.
    pub mask: AttentionMask<F>,
    /// Stitched logits returned by the head for this layer.
    pub logits: NodeId,
}

/// Runs every decoder layer, calling `head` after the blocks of each layer.
///
/// `head` returns the layer's stitched `feat_h * feat_w x 1` logit map, which
/// seeds the next layer's attention mask (resampled to the next level).
pub fn decode_stack<F: Float>(
    ctx: &mut Ctx<'_, F>,
    decoder: &Decoder,
    cfg: &ModelConfig,
    q0: BoundQueries,
    pyramid: &FeaturePyramid,
    lang0: NodeId,
    mut head: impl FnMut(&mut Ctx<'_, F>, &DecoderState, FeatureMap) -> Result<NodeId>,
) -> Result<Vec<LayerOutput<F>>> {
    let first = pyramid.levels[cfg.layer_level(0)];
    if q0.grid.feat_h != first.h || q0.grid.feat_w != first.w {
        return Err(invalid_arg!("initial queries are not bound to the first decoded level"));
    }
    let lang_len = ctx.graph.shape(lang0).0;
    let c = ctx.graph.shape(q0.node).1;
    let mut queries = q0;
    let mut lang = lang0;
    let mut prev: Option<(Vec<F>, usize, usize)> = None;
    let mut outputs = Vec::with_capacity(decoder.layers.len());
    for (li, layer) in decoder.layers.iter().enumerate() {
        let level = cfg.layer_level(li);
        let visual = pyramid.levels[level];
        let grid = queries.grid;
        let resampled = prev.as_ref().map(|(m, h, w)| nearest_resample(m, *h, *w, visual.h, visual.w));
        let full_mask = build_attention_mask(resampled.as_deref(), &grid, lang_len)?;
        let mask = match decoder.kind {
            DecoderKind::Mixed => full_mask,
            DecoderKind::Separate => full_mask.visual_only(),
        };
        let qpos = ctx.p(layer.query_pos);
        if ctx.graph.shape(qpos).0 != grid.n_regions {
            return Err(invalid_arg!("layer {} expects {} queries", li, ctx.graph.shape(qpos).0));
        }
        let vpos = ctx.graph.constant(sine_positions(visual.h, visual.w, c));
        let pos = Positions { query: Some(qpos), visual: Some(vpos) };
        let mut q = queries.node;
        let mut attn = Vec::with_capacity(layer.blocks.len());
        for block in &layer.blocks {
            let (q1, w) = masked_cross_attention(ctx, block, q, visual, lang, &mask, pos)?;
            let (q2, l2) = joint_self_attention_ffn(ctx, block, q1, lang, Some(qpos));
            q = q2;
            lang = l2;
            attn.push(w);
        }
        let state = DecoderState { queries: BoundQueries { node: q, grid }, lang, layer: li };
        let logits = head(ctx, &state, visual)?;
        prev = Some((ctx.graph.value(logits).data().to_vec(), visual.h, visual.w));
        outputs.push(LayerOutput { state, level, cross_attention: attn, mask, logits });
        if li + 1 < decoder.layers.len() {
            let next = pyramid.levels[cfg.layer_level(li + 1)];
            let next_grid = build_region_grid(next.h, next.w, cfg.layer_regions(li + 1))?;
            if next_grid.grid_side != 2 * grid.grid_side {
                return Err(invalid_arg!("region schedule must double the grid side"));
            }
            let node = ctx.graph.gather_rows(q, upsample_index(grid.grid_side));
            queries = BoundQueries { node, grid: next_grid };
        }
    }
    Ok(outputs)
}

/// Number of block evaluations `decode_stack` performs.
pub fn block_count(decoder: &Decoder) -> usize {
    decoder.layers.iter().map(|l| l.blocks.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { channels: 8, lang_channels: 8, ..ModelConfig::default() }
    }

    fn block(kind: DecoderKind) -> (ParamStore<f64>, MmdBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let b = MmdBlock::new(&mut store, &mut rng, "b", kind, &cfg());
        (store, b)
    }

    fn inputs(ctx: &mut Ctx<'_, f64>, nq: usize, h: usize, w: usize, nl: usize) -> (NodeId, FeatureMap, NodeId) {
        let q = ctx.graph.input(Tensor::from_fn(nq, 8, |r, c| ((r * 5 + c * 3) % 7) as f64 / 3.0 - 1.0));
        let v = ctx.graph.input(Tensor::from_fn(h * w, 8, |r, c| ((r * 7 + c) % 9) as f64 / 4.0 - 1.0));
        let l = ctx.graph.input(Tensor::from_fn(nl, 8, |r, c| ((r + 2 * c) % 5) as f64 / 2.0 - 1.0));
        (q, FeatureMap { node: v, h, w }, l)
    }

    #[test]
    fn fully_masked_visual_puts_all_mass_on_language() {
        let (store, b) = block(DecoderKind::Mixed);
        let mut ctx = Ctx::new(&store);
        let (q, v, l) = inputs(&mut ctx, 4, 2, 3, 2);
        let mut m = Tensor::zeros(4, 8);
        for r in 0..4 {
            for c in 0..6 {
                m.set(r, c, f64::NEG_INFINITY);
            }
        }
        let mask = AttentionMask::from_tensor(m, 6, 2).unwrap();
        let (_, w) = masked_cross_attention(&mut ctx, &b, q, v, l, &mask, Positions::default()).unwrap();
        let a = ctx.graph.value(w[0]);
        for r in 0..4 {
            assert!(a.row(r)[..6].iter().all(|&x| x == 0.0));
            assert!((a.row(r)[6..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_gets_weight_one() {
        let (store, b) = block(DecoderKind::Separate);
        let mut ctx = Ctx::new(&store);
        let (q, v, l) = inputs(&mut ctx, 3, 1, 1, 2);
        let mask = AttentionMask::open(3, 1, 0);
        let (_, w) = masked_cross_attention(&mut ctx, &b, q, v, l, &mask, Positions::default()).unwrap();
        assert!(ctx.graph.value(w[0]).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let (mut store, b) = block(DecoderKind::Mixed);
        let MmdBlock::Mixed { cross, .. } = &b else { unreachable!() };
        zero_linear(&mut store, &cross.v);
        let mut ctx = Ctx::new(&store);
        let (q, v, l) = inputs(&mut ctx, 4, 2, 2, 3);
        let mask = AttentionMask::open(4, 4, 3);
        let (q1, _) = masked_cross_attention(&mut ctx, &b, q, v, l, &mask, Positions::default()).unwrap();
        assert_eq!(ctx.graph.value(q1), ctx.graph.value(q));
    }

    #[test]
    fn mask_values_validated() {
        let bad = Tensor::from_vec(1, 3, vec![0.0, -1.0, 0.0]).unwrap();
        assert!(AttentionMask::<f64>::from_tensor(bad, 2, 1).is_err());
        let lang_masked = Tensor::from_vec(1, 3, vec![0.0, 0.0, f64::NEG_INFINITY]).unwrap();
        assert!(AttentionMask::<f64>::from_tensor(lang_masked, 2, 1).is_err());
    }

    #[test]
    fn identity_configured_block_splits_back() {
        let (mut store, b) = block(DecoderKind::Mixed);
        let MmdBlock::Mixed { joint, ffn, .. } = &b else { unreachable!() };
        zero_linear(&mut store, &joint.o);
        zero_linear(&mut store, ffn.layers.last().unwrap());
        let mut ctx = Ctx::new(&store);
        let (q, _, l) = inputs(&mut ctx, 5, 1, 1, 3);
        let (q2, l2) = joint_self_attention_ffn(&mut ctx, &b, q, l, None);
        assert_eq!(ctx.graph.value(q2), ctx.graph.value(q));
        assert_eq!(ctx.graph.value(l2), ctx.graph.value(l));
    }

    #[test]
    fn joint_attention_rows_for_one_query_one_word() {
        let (store, b) = block(DecoderKind::Mixed);
        let MmdBlock::Mixed { norm_x, joint, .. } = &b else { unreachable!() };
        let mut ctx = Ctx::new(&store);
        let (q, _, l) = inputs(&mut ctx, 1, 1, 1, 1);
        let (q2, l2) = joint_self_attention_ffn(&mut ctx, &b, q, l, None);
        assert_eq!((ctx.graph.shape(q2).0, ctx.graph.shape(l2).0), (1, 1));
        let x = ctx.graph.concat_rows(&[q, l]);
        let xn = norm_x.forward(&mut ctx, x);
        let (_, w) = joint.forward(&mut ctx, xn, xn, xn, None);
        let a = ctx.graph.value(w[0]);
        assert_eq!(a.shape(), (2, 2));
        for r in 0..2 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_from_logits() {
        let grid = build_region_grid(4, 4, 4).unwrap();
        let open = build_attention_mask::<f64>(None, &grid, 2).unwrap();
        assert!(open.values().data().iter().all(|&v| v == 0.0));
        let neg = alloc::vec![-30.0; 16];
        let m = build_attention_mask(Some(&neg), &grid, 2).unwrap();
        assert!(m.values().data().iter().all(|&v| v == 0.0));
    }

    /// Brute-force oracle: hidden iff sigmoid(logit) < 0.5, computed through
    /// the exponential rather than the sign.
    #[test]
    fn window_logits_restrict_attention_to_that_window() {
        let grid = build_region_grid(5, 5, 4).unwrap(); // 3x3 windows
        for r in 0..4 {
            let logits: Vec<f64> = (0..25)
                .map(|p| if grid.region_of(p / 5, p % 5) == r { 2.0 } else { -2.0 })
                .collect();
            let m = build_attention_mask(Some(&logits), &grid, 3).unwrap();
            for q in 0..4 {
                for p in 0..25 {
                    let sig = 1.0 / (1.0 + (-logits[p]).exp());
                    assert_eq!(m.is_masked(q, p), sig < 0.5);
                }
                for k in 25..28 {
                    assert!(!m.is_masked(q, k));
                }
            }
        }
    }

    #[test]
    fn decode_stack_schedule() {
        let cfg = ModelConfig { channels: 8, lang_channels: 8, image_size: 480, initial_regions: 16, ..ModelConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let dec = Decoder::new(&mut store, &mut rng, &cfg);
        assert_eq!(block_count(&dec), 9);
        let mut ctx = Ctx::new(&store);
        let mk = |ctx: &mut Ctx<'_, f32>, s: usize| FeatureMap {
            node: ctx.graph.constant(Tensor::from_fn(s * s, 8, |r, c| ((r + c) % 5) as f32 * 0.1)),
            h: s,
            w: s,
        };
        let pyr = FeaturePyramid { levels: [mk(&mut ctx, 15), mk(&mut ctx, 30), mk(&mut ctx, 60)] };
        let grid = build_region_grid(15, 15, 16).unwrap();
        let q0 = ctx.graph.constant(Tensor::from_fn(16, 8, |r, c| ((r * c) % 3) as f32 * 0.2));
        let lang = ctx.graph.constant(Tensor::filled(3, 8, 0.1));
        let mut calls = 0;
        let out = decode_stack(&mut ctx, &dec, &cfg, BoundQueries { node: q0, grid }, &pyr, lang, |ctx, st, v| {
            calls += 1;
            let n = v.h * v.w;
            let _ = st;
            Ok(ctx.graph.constant(Tensor::from_fn(n, 1, |p, _| if p % 2 == 0 { 1.0 } else { -1.0 })))
        })
        .unwrap();
        assert_eq!(calls, 3);
        let counts: Vec<usize> = out.iter().map(|o| ctx.graph.shape(o.state.queries.node).0).collect();
        assert_eq!(counts, [16, 64, 256]);
        assert!(out.iter().all(|o| o.cross_attention.len() == 3));
        for o in &out {
            assert_eq!(ctx.graph.shape(o.state.lang).0, 3);
            for w in &o.cross_attention {
                let a = ctx.graph.value(w[0]);
                for r in 0..a.rows() {
                    let s: f32 = a.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                    // Language placeholders always take some mass.
                    let nv = o.mask.visual_len();
                    assert!(a.row(r)[nv..].iter().sum::<f32>() > 0.0);
                }
            }
        }
    }
}
