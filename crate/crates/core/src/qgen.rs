//! Query generator: learnable region embeddings cross-attend to the word
//! features, producing region-text-specific initial queries.
//!
//! `Q_0 = LayerNorm(r + Attn(r, l, l))` with one attention head. Position
//! information enters only through `r`; the word rows carry no positional
//! term inside this operation, so it is invariant to permutations of `l`.

use rand::Rng;

use crate::encoders::WordFeatures;
use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::geometry::{BoundQueries, RegionGrid};
use crate::graph::NodeId;
use crate::nn::{Attention, Ctx, LayerNorm, ParamId, ParamStore};

/// Learnable `N_0 x C` region embeddings shared by every sample.
#[derive(Debug, Clone, Copy)]
pub struct RegionEmbeddings(pub ParamId);

impl RegionEmbeddings {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, regions: usize, channels: usize) -> Self {
        Self(store.add("qgen.regions", crate::nn::uniform(rng, regions, channels, 1.0)))
    }
}

#[derive(Debug, Clone)]
pub struct QueryGenerator {
    pub attn: Attention,
    pub norm: LayerNorm,
}

impl QueryGenerator {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, channels: usize, lang_channels: usize) -> Self {
        Self {
            attn: Attention::new(store, rng, "qgen.attn", channels, lang_channels, channels, 1),
            norm: LayerNorm::new(store, "qgen.norm", channels),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratedQueries {
    pub queries: BoundQueries,
    /// `N_0 x L` attention of regions over words.
    pub attention: NodeId,
}

pub fn generate_queries<F: Float>(
    ctx: &mut Ctx<'_, F>,
    gen: &QueryGenerator,
    regions: RegionEmbeddings,
    words: &WordFeatures,
    grid: RegionGrid,
) -> Result<GeneratedQueries> {
    if words.len == 0 || ctx.graph.shape(words.words).0 == 0 {
        return Err(invalid_arg!("query generation needs at least one word"));
    }
    let r = ctx.p(regions.0);
    if ctx.graph.shape(r).0 != grid.n_regions {
        return Err(invalid_arg!(
            "{} region embeddings for a grid of {} regions",
            ctx.graph.shape(r).0,
            grid.n_regions
        ));
    }
    let (att, weights) = gen.attn.forward(ctx, r, words.words, words.words, None);
    let res = ctx.graph.add(r, att);
    let q = gen.norm.forward(ctx, res);
    Ok(GeneratedQueries { queries: BoundQueries { node: q, grid }, attention: weights[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_region_grid;
    use crate::nn::zero_linear;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore<f64>,
        gen: QueryGenerator,
        regions: RegionEmbeddings,
        grid: RegionGrid,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let regions = RegionEmbeddings::new(&mut store, &mut rng, 4, 6);
        let gen = QueryGenerator::new(&mut store, &mut rng, 6, 5);
        Fixture { store, gen, regions, grid: build_region_grid(3, 3, 4).unwrap() }
    }

    fn words(ctx: &mut Ctx<'_, f64>, rows: usize, perm: &[usize]) -> WordFeatures {
        let base = Tensor::from_fn(rows, 5, |r, c| ((r * 13 + c * 7) % 11) as f64 / 5.0 - 1.0);
        let t = Tensor::from_fn(rows, 5, |r, c| base.get(perm[r], c));
        let w = ctx.graph.input(t);
        let s = ctx.graph.mean_rows(w);
        WordFeatures { words: w, sentence: s, len: rows }
    }

    #[test]
    fn single_word_gets_all_attention() {
        let f = fixture();
        let mut ctx = Ctx::new(&f.store);
        let w = words(&mut ctx, 1, &[0]);
        let out = generate_queries(&mut ctx, &f.gen, f.regions, &w, f.grid).unwrap();
        assert!(ctx.graph.value(out.attention).data().iter().all(|&a| a == 1.0));
        assert_eq!(ctx.graph.shape(out.queries.node), (4, 6));
    }

    #[test]
    fn word_permutation_invariance() {
        let f = fixture();
        let run = |perm: &[usize]| {
            let mut ctx = Ctx::new(&f.store);
            let w = words(&mut ctx, 4, perm);
            let out = generate_queries(&mut ctx, &f.gen, f.regions, &w, f.grid).unwrap();
            ctx.graph.value(out.queries.node).clone()
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[2, 0, 3, 1]);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_output_projection_is_residual_identity() {
        let mut f = fixture();
        zero_linear(&mut f.store, &f.gen.attn.o);
        let mut ctx = Ctx::new(&f.store);
        let w = words(&mut ctx, 3, &[0, 1, 2]);
        let out = generate_queries(&mut ctx, &f.gen, f.regions, &w, f.grid).unwrap();
        let r = ctx.p(f.regions.0);
        let (g, b) = (ctx.p(f.gen.norm.gain), ctx.p(f.gen.norm.bias));
        let expect = ctx.graph.layer_norm(r, g, b);
        assert_eq!(ctx.graph.value(out.queries.node), ctx.graph.value(expect));
    }

    #[test]
    fn rows_depend_only_on_their_own_embedding() {
        let f = fixture();
        for target in 0..4 {
            let mut ctx = Ctx::new(&f.store);
            let w = words(&mut ctx, 3, &[0, 1, 2]);
            let out = generate_queries(&mut ctx, &f.gen, f.regions, &w, f.grid).unwrap();
            let row = ctx.graph.slice_rows(out.queries.node, target, 1);
            let s = ctx.graph.sum_all(row);
            let sq = ctx.graph.mul(row, row);
            let sq = ctx.graph.sum_all(sq);
            let loss = ctx.graph.weighted_sum(&[(s, 0.3), (sq, 1.0)]);
            ctx.graph.backward(loss);
            let r = ctx.p(f.regions.0);
            let g = ctx.graph.grad(r).unwrap();
            for other in (0..4).filter(|&o| o != target) {
                assert!(g.row(other).iter().all(|&v| v == 0.0));
            }
            assert!(g.row(target).iter().any(|&v| v != 0.0));
            assert!(ctx.graph.grad(w.words).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let f = fixture();
        let mut ctx = Ctx::new(&f.store);
        let w = words(&mut ctx, 5, &[0, 1, 2, 3, 4]);
        let out = generate_queries(&mut ctx, &f.gen, f.regions, &w, f.grid).unwrap();
        let a = ctx.graph.value(out.attention);
        for r in 0..a.rows() {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_words_rejected() {
        let f = fixture();
        let mut ctx = Ctx::new(&f.store);
        let w = ctx.graph.input(Tensor::zeros(0, 5));
        let s = ctx.graph.input(Tensor::zeros(1, 5));
        let wf = WordFeatures { words: w, sentence: s, len: 0 };
        assert!(generate_queries(&mut ctx, &f.gen, f.regions, &wf, f.grid).is_err());
    }
}
