//! Regional supervision head.
//!
//! Main branch: the level's feature map is cut into the grid's windows and
//! window `r` is scored only against the mask embedding of query `r`, so a
//! window's loss can only reach its own query. The global variant averages
//! all mask embeddings into one prototype scored against the whole map.
//!
//! No-target branch: per-region centroids and a sentence embedding are
//! compared with the queries (one value per query each), concatenated, and
//! reduced by a two-hidden-layer MLP to one logit.

use alloc::vec::Vec;

use rand::Rng;

use crate::config::{HeadKind, ModelConfig};
use crate::encoders::FeatureMap;
use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::geometry::{BoundQueries, RegionGrid};
use crate::graph::NodeId;
use crate::nn::{Ctx, LayerNorm, Mlp, ParamStore};
use crate::tensor::Tensor;

/// Projection from decoder queries to mask embeddings, shared by all layers.
#[derive(Debug, Clone)]
pub struct MaskEmbedding {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl MaskEmbedding {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, channels: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, "rsh.embed.norm", channels),
            mlp: Mlp::new(store, rng, "rsh.embed.mlp", &[channels, channels, channels]),
        }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, q: NodeId) -> NodeId {
        let n = self.norm.forward(ctx, q);
        self.mlp.forward(ctx, n)
    }
}

/// No-target head of one decoder layer.
#[derive(Debug, Clone)]
pub struct NtHead {
    pub norm: LayerNorm,
    pub sentence: Mlp,
    pub classifier: Mlp,
}

impl NtHead {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, regions: usize, channels: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &alloc::format!("{name}.norm"), channels),
            sentence: Mlp::new(store, rng, &alloc::format!("{name}.sentence"), &[channels, channels, channels]),
            classifier: Mlp::new(store, rng, &alloc::format!("{name}.classifier"), &[2 * regions, hidden, hidden, 1]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RshParams {
    pub kind: HeadKind,
    pub embed: MaskEmbedding,
    /// One entry per decoder layer; `None` where the branch is not supervised.
    pub nt: Vec<Option<NtHead>>,
}

impl RshParams {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let embed = MaskEmbedding::new(store, rng, cfg.channels);
        let nt = (0..cfg.decoder_layers)
            .map(|l| {
                cfg.nt_supervised(l).then(|| {
                    NtHead::new(store, rng, &alloc::format!("rsh.nt.{l}"), cfg.layer_regions(l), cfg.channels, cfg.nt_hidden)
                })
            })
            .collect();
        Self { kind: cfg.head, embed, nt }
    }
}

/// Window logits: row `r * window_len + dy * win_w + dx` holds offset
/// `(dy, dx)` of window `r`. Padding positions are present but never
/// reach the stitched map.
#[derive(Debug, Clone, Copy)]
pub struct RegionLogits {
    pub windows: NodeId,
    pub grid: RegionGrid,
}

/// Output of the head for one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct RshOutput {
    /// `feat_h * feat_w x 1` logits over real pixels.
    pub stitched: NodeId,
    /// Present for the regional head only.
    pub regions: Option<RegionLogits>,
    /// `1 x 1` no-target logit, when this layer has a no-target head.
    pub nt: Option<NodeId>,
    /// `N x C` mask embeddings.
    pub embeddings: NodeId,
}

fn check_grid<F: Float>(ctx: &Ctx<'_, F>, v: FeatureMap, grid: &RegionGrid) -> Result<()> {
    if v.h != grid.feat_h || v.w != grid.feat_w || ctx.graph.shape(v.node).0 != v.h * v.w {
        return Err(invalid_arg!(
            "grid built for {}x{} but features are {}x{}",
            grid.feat_h,
            grid.feat_w,
            v.h,
            v.w
        ));
    }
    Ok(())
}

/// Cuts the zero-padded map into windows, `(N * window_len) x C`.
pub fn partition_features<F: Float>(ctx: &mut Ctx<'_, F>, v: FeatureMap, grid: &RegionGrid) -> Result<NodeId> {
    check_grid(ctx, v, grid)?;
    Ok(ctx.graph.gather_rows(v.node, grid.partition_index()))
}

/// Plain-tensor partition (same layout as [`partition_features`]).
pub fn partition_tensor<F: Float>(map: &Tensor<F>, grid: &RegionGrid) -> Result<Tensor<F>> {
    if map.rows() != grid.num_pixels() {
        return Err(invalid_arg!("{} rows for a {}x{} grid", map.rows(), grid.feat_h, grid.feat_w));
    }
    let idx = grid.partition_index();
    let mut out = Tensor::zeros(idx.len(), map.cols());
    for (i, src) in idx.iter().enumerate() {
        if let Some(s) = *src {
            out.row_mut(i).copy_from_slice(map.row(s));
        }
    }
    Ok(out)
}

/// Inverse of [`partition_tensor`] restricted to real pixels.
pub fn stitch_tensor<F: Float>(windows: &Tensor<F>, grid: &RegionGrid) -> Result<Tensor<F>> {
    if windows.rows() != grid.n_regions * grid.window_len() {
        return Err(invalid_arg!("{} window rows for {} regions", windows.rows(), grid.n_regions));
    }
    let mut out = Tensor::zeros(grid.num_pixels(), windows.cols());
    for (p, src) in grid.stitch_index().iter().enumerate() {
        let s = src.expect("real pixels always map into a window");
        out.row_mut(p).copy_from_slice(windows.row(s));
    }
    Ok(out)
}

/// Window `r` scored against embedding row `r`.
pub fn region_inner_products<F: Float>(
    ctx: &mut Ctx<'_, F>,
    embeddings: NodeId,
    patches: NodeId,
    grid: &RegionGrid,
) -> Result<RegionLogits> {
    let n = ctx.graph.shape(embeddings).0;
    if n != grid.n_regions || ctx.graph.shape(patches).0 != n * grid.window_len() {
        return Err(invalid_arg!("{} queries for {} regions", n, grid.n_regions));
    }
    let windows = ctx.graph.grouped_row_dot(patches, embeddings, grid.window_len());
    Ok(RegionLogits { windows, grid: *grid })
}

/// Mask embeddings of the bound queries scored window by window.
pub fn predict_region_masks<F: Float>(
    ctx: &mut Ctx<'_, F>,
    embed: &MaskEmbedding,
    q: BoundQueries,
    patches: NodeId,
) -> Result<(RegionLogits, NodeId)> {
    let e = embed.forward(ctx, q.node);
    Ok((region_inner_products(ctx, e, patches, &q.grid)?, e))
}

/// Places windows at their cells and crops the padding: `feat_h * feat_w x 1`.
pub fn stitch_full_mask<F: Float>(ctx: &mut Ctx<'_, F>, rl: &RegionLogits) -> NodeId {
    ctx.graph.gather_rows(rl.windows, rl.grid.stitch_index())
}

/// One-prototype head: the mean mask embedding against every pixel.
pub fn global_mask<F: Float>(ctx: &mut Ctx<'_, F>, embeddings: NodeId, v: FeatureMap) -> NodeId {
    let proto = ctx.graph.mean_rows(embeddings);
    ctx.graph.matmul_t(v.node, proto)
}

/// No-target logit (`1 x 1`) from queries, level features and language rows.
pub fn nt_indicator<F: Float>(
    ctx: &mut Ctx<'_, F>,
    head: &NtHead,
    q: BoundQueries,
    v: FeatureMap,
    lang: NodeId,
) -> Result<NodeId> {
    check_grid(ctx, v, &q.grid)?;
    let n = q.grid.n_regions;
    if ctx.graph.shape(q.node).0 != n {
        return Err(invalid_arg!("{} queries for {} regions", ctx.graph.shape(q.node).0, n));
    }
    let pool = ctx.graph.constant(q.grid.pooling_matrix());
    let centroids = ctx.graph.matmul(pool, v.node);
    let qn = head.norm.forward(ctx, q.node);
    let words = head.sentence.forward(ctx, lang);
    let sentence = ctx.graph.mean_rows(words);
    let sim_v = ctx.graph.grouped_row_dot(centroids, qn, 1);
    let sim_l = ctx.graph.matmul_t(qn, sentence);
    let sims = ctx.graph.concat_rows(&[sim_v, sim_l]);
    let flat = ctx.graph.reshape(sims, 1, 2 * n);
    Ok(head.classifier.forward(ctx, flat))
}

/// Runs the head for decoder layer `layer`.
pub fn rsh_forward<F: Float>(
    ctx: &mut Ctx<'_, F>,
    params: &RshParams,
    layer: usize,
    q: BoundQueries,
    v: FeatureMap,
    lang: NodeId,
) -> Result<RshOutput> {
    check_grid(ctx, v, &q.grid)?;
    let (stitched, regions, embeddings) = match params.kind {
        HeadKind::Regional => {
            let patches = partition_features(ctx, v, &q.grid)?;
            let (rl, e) = predict_region_masks(ctx, &params.embed, q, patches)?;
            (stitch_full_mask(ctx, &rl), Some(rl), e)
        }
        HeadKind::Global => {
            let e = params.embed.forward(ctx, q.node);
            (global_mask(ctx, e, v), None, e)
        }
    };
    let nt = match params.nt.get(layer) {
        Some(Some(head)) => Some(nt_indicator(ctx, head, q, v, lang)?),
        _ => None,
    };
    Ok(RshOutput { stitched, regions, nt, embeddings })
}
