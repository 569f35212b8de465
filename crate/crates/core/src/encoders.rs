//! Toy visual and language encoders and the lateral pixel decoder.
//!
//! The visual encoder is a stride-8 convolutional stem (16x16 kernel, so
//! neighbouring patches overlap) followed by two stride-2 patch-merging
//! stages, giving raw maps at strides 32, 16 and 8. Each level is refined by
//! a residual 3x3 convolution over the feature grid. The pixel
//! decoder projects each to the shared width and adds the 2x upsampled
//! coarser level (top-down), so the finest level doubles as the mask-feature
//! map.

use alloc::vec::Vec;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::graph::NodeId;
use crate::nn::{Attention, Ctx, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Stem stride.
pub const PATCH: usize = 8;
/// Stem kernel side; the stem pads by `(KERNEL - PATCH) / 2`.
pub const KERNEL: usize = 16;

/// A flattened `h x w` feature map, one row per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub node: NodeId,
    pub h: usize,
    pub w: usize,
}

/// Maps at strides 32, 16, 8 (coarse to fine).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [FeatureMap; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct WordFeatures {
    /// `L x C_L` word rows.
    pub words: NodeId,
    /// `1 x C_L` sentence vector.
    pub sentence: NodeId,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub stem: Linear,
    pub stages: [Linear; 2],
    /// 3x3 refinement at strides 8, 16, 32.
    pub refine: [Linear; 3],
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    /// Lateral projections for strides 32, 16, 8.
    pub lateral: [Linear; 3],
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub tokens: ParamId,
    pub positions: Option<ParamId>,
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub sentence: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub visual: VisualEncoder,
    pub pixel: PixelDecoder,
    pub text: TextEncoder,
}

impl EncoderParams {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let cl = cfg.lang_channels;
        let visual = VisualEncoder {
            stem: Linear::new(store, rng, "visual.stem", KERNEL * KERNEL * 3, c),
            stages: [
                Linear::new(store, rng, "visual.stage16", 4 * c, c),
                Linear::new(store, rng, "visual.stage32", 4 * c, c),
            ],
            refine: [
                Linear::new(store, rng, "visual.refine8", 9 * c, c),
                Linear::new(store, rng, "visual.refine16", 9 * c, c),
                Linear::new(store, rng, "visual.refine32", 9 * c, c),
            ],
        };
        let pixel = PixelDecoder {
            lateral: [
                Linear::new(store, rng, "pixel.lateral32", c, c),
                Linear::new(store, rng, "pixel.lateral16", c, c),
                Linear::new(store, rng, "pixel.lateral8", c, c),
            ],
        };
        let tokens = store.add("text.tokens", crate::nn::uniform(rng, cfg.vocab_size, cl, 1.0));
        let positions = cfg
            .text_positions
            .then(|| store.add("text.positions", crate::nn::uniform(rng, cfg.max_tokens, cl, 0.5)));
        let text = TextEncoder {
            tokens,
            positions,
            norm1: LayerNorm::new(store, "text.norm1", cl),
            attn: Attention::new(store, rng, "text.attn", cl, cl, cl, heads_for(cl, cfg.heads)),
            norm2: LayerNorm::new(store, "text.norm2", cl),
            ffn: Mlp::new(store, rng, "text.ffn", &[cl, 2 * cl, cl]),
            sentence: Linear::new(store, rng, "text.sentence", cl, cl),
        };
        Self { visual, pixel, text }
    }
}

fn heads_for(width: usize, heads: usize) -> usize {
    if width.is_multiple_of(heads) {
        heads
    } else {
        1
    }
}

/// Non-overlapping `PATCH x PATCH` patches of an `h x w x 3` image, one row
/// per patch, values ordered `(dy, dx, channel)`.
/// One row per stem position: the zero-padded `KERNEL x KERNEL x 3` window
/// centred on each `PATCH x PATCH` cell.
pub fn patchify<F: Float>(image: &[F], h: usize, w: usize) -> Result<Tensor<F>> {
    if image.len() != h * w * 3 {
        return Err(invalid_arg!("image buffer has {} values, expected {}x{}x3", image.len(), h, w));
    }
    if !h.is_multiple_of(PATCH) || !w.is_multiple_of(PATCH) {
        return Err(invalid_arg!("image {}x{} is not divisible by the patch size", h, w));
    }
    let (ph, pw) = (h / PATCH, w / PATCH);
    let pad = (KERNEL - PATCH) / 2;
    let mut out = Tensor::zeros(ph * pw, KERNEL * KERNEL * 3);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            for dy in 0..KERNEL {
                let y = (py * PATCH + dy) as isize - pad as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..KERNEL {
                    let x = (px * PATCH + dx) as isize - pad as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let src = (y as usize * w + x as usize) * 3;
                    let dst = (dy * KERNEL + dx) * 3;
                    row[dst..dst + 3].copy_from_slice(&image[src..src + 3]);
                }
            }
        }
    }
    Ok(out)
}

/// Residual 3x3 convolution with zero padding: `x + gelu(W [3x3 neighbourhood])`.
fn refine3<F: Float>(ctx: &mut Ctx<'_, F>, lin: &Linear, x: FeatureMap) -> FeatureMap {
    let (h, w) = (x.h as isize, x.w as isize);
    let parts: Vec<NodeId> = (-1..=1isize)
        .flat_map(|dy| (-1..=1isize).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| {
            let idx = (0..h * w)
                .map(|i| {
                    let (y, xx) = (i / w + dy, i % w + dx);
                    (y >= 0 && y < h && xx >= 0 && xx < w).then(|| (y * w + xx) as usize)
                })
                .collect();
            ctx.graph.gather_rows(x.node, idx)
        })
        .collect();
    let cat = ctx.graph.concat_cols(&parts);
    let y = lin.forward(ctx, cat);
    let y = ctx.graph.gelu(y);
    FeatureMap { node: ctx.graph.add(x.node, y), ..x }
}

fn space_to_depth<F: Float>(ctx: &mut Ctx<'_, F>, x: FeatureMap) -> FeatureMap {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let parts: Vec<NodeId> = [(0, 0), (0, 1), (1, 0), (1, 1)]
        .iter()
        .map(|&(dy, dx)| {
            let idx = (0..h2 * w2).map(|i| Some((2 * (i / w2) + dy) * x.w + 2 * (i % w2) + dx)).collect();
            ctx.graph.gather_rows(x.node, idx)
        })
        .collect();
    FeatureMap { node: ctx.graph.concat_cols(&parts), h: h2, w: w2 }
}

/// Nearest 2x upsampling of a flattened map.
pub fn upsample2<F: Float>(ctx: &mut Ctx<'_, F>, x: FeatureMap) -> FeatureMap {
    let (h, w) = (x.h * 2, x.w * 2);
    let idx = (0..h * w).map(|i| Some((i / w / 2) * x.w + (i % w) / 2)).collect();
    FeatureMap { node: ctx.graph.gather_rows(x.node, idx), h, w }
}

/// Raw pyramid (per-stage features before the pixel decoder).
pub fn encode_image<F: Float>(
    ctx: &mut Ctx<'_, F>,
    enc: &VisualEncoder,
    image: &[F],
    h: usize,
    w: usize,
) -> Result<FeaturePyramid> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(invalid_arg!("image {}x{} is not divisible by 32", h, w));
    }
    let patches = patchify(image, h, w)?;
    let x = ctx.graph.constant(patches);
    let s8 = enc.stem.forward(ctx, x);
    let s8 = FeatureMap { node: ctx.graph.gelu(s8), h: h / 8, w: w / 8 };
    let s8 = refine3(ctx, &enc.refine[0], s8);
    let stage = |ctx: &mut Ctx<'_, F>, lin: &Linear, prev: FeatureMap| {
        let m = space_to_depth(ctx, prev);
        let y = lin.forward(ctx, m.node);
        FeatureMap { node: ctx.graph.gelu(y), ..m }
    };
    let s16 = stage(ctx, &enc.stages[0], s8);
    let s16 = refine3(ctx, &enc.refine[1], s16);
    let s32 = stage(ctx, &enc.stages[1], s16);
    let s32 = refine3(ctx, &enc.refine[2], s32);
    Ok(FeaturePyramid { levels: [s32, s16, s8] })
}

pub fn pixel_decode<F: Float>(ctx: &mut Ctx<'_, F>, dec: &PixelDecoder, raw: &FeaturePyramid) -> Result<FeaturePyramid> {
    let [s32, s16, s8] = raw.levels;
    if s16.h != 2 * s32.h || s16.w != 2 * s32.w || s8.h != 2 * s16.h || s8.w != 2 * s16.w {
        return Err(invalid_arg!("pyramid levels are not successive 2x scales"));
    }
    let p32 = FeatureMap { node: dec.lateral[0].forward(ctx, s32.node), ..s32 };
    let mut out = [p32, p32, p32];
    for (k, raw_level) in [(1, s16), (2, s8)] {
        let lat = dec.lateral[k].forward(ctx, raw_level.node);
        let up = upsample2(ctx, out[k - 1]);
        out[k] = FeatureMap { node: ctx.graph.add(lat, up.node), ..raw_level };
    }
    Ok(FeaturePyramid { levels: out })
}

pub fn encode_text<F: Float>(ctx: &mut Ctx<'_, F>, enc: &TextEncoder, tokens: &[u32]) -> Result<WordFeatures> {
    let table = ctx.store().get(enc.tokens);
    let vocab = table.rows();
    if tokens.is_empty() {
        return Err(invalid_arg!("empty token sequence"));
    }
    if let Some(pos) = enc.positions {
        let max = ctx.store().get(pos).rows();
        if tokens.len() > max {
            return Err(invalid_arg!("{} tokens exceed the limit of {}", tokens.len(), max));
        }
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid_arg!("token id {} outside vocabulary of {}", bad, vocab));
    }
    let emb = ctx.p(enc.tokens);
    let mut x = ctx.graph.gather_rows(emb, tokens.iter().map(|&t| Some(t as usize)).collect());
    if let Some(pos) = enc.positions {
        let p = ctx.p(pos);
        let p = ctx.graph.gather_rows(p, (0..tokens.len()).map(Some).collect());
        x = ctx.graph.add(x, p);
    }
    let n = enc.norm1.forward(ctx, x);
    let (a, _) = enc.attn.forward(ctx, n, n, n, None);
    x = ctx.graph.add(x, a);
    let n = enc.norm2.forward(ctx, x);
    let f = enc.ffn.forward(ctx, n);
    x = ctx.graph.add(x, f);
    let mean = ctx.graph.mean_rows(x);
    let sentence = enc.sentence.forward(ctx, mean);
    Ok(WordFeatures { words: x, sentence, len: tokens.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_linear;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> (ParamStore<f64>, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = EncoderParams::new(&mut store, &mut rng, cfg);
        (store, p)
    }

    fn small() -> ModelConfig {
        ModelConfig { channels: 8, lang_channels: 8, ..ModelConfig::default() }
    }

    fn image(h: usize, w: usize) -> alloc::vec::Vec<f64> {
        (0..h * w * 3).map(|i| ((i * 31 % 97) as f64) / 97.0).collect()
    }

    #[test]
    fn stride_arithmetic() {
        let cfg = small();
        let (store, p) = setup(&cfg);
        for (side, dims) in [(64, [2, 4, 8]), (480, [15, 30, 60])] {
            let mut ctx = Ctx::new(&store);
            let raw = encode_image(&mut ctx, &p.visual, &image(side, side), side, side).unwrap();
            let got: alloc::vec::Vec<usize> = raw.levels.iter().map(|l| l.h).collect();
            assert_eq!(got, dims);
            let dec = pixel_decode(&mut ctx, &p.pixel, &raw).unwrap();
            for l in dec.levels {
                assert_eq!(ctx.graph.shape(l.node), (l.h * l.w, 8));
                assert!(ctx.graph.value(l.node).is_finite());
            }
        }
    }

    #[test]
    fn rejects_indivisible_image() {
        let cfg = small();
        let (store, p) = setup(&cfg);
        let mut ctx = Ctx::new(&store);
        assert!(encode_image(&mut ctx, &p.visual, &image(40, 40), 40, 40).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_maps() {
        let cfg = small();
        let (store, p) = setup(&cfg);
        let mut ctx = Ctx::new(&store);
        let raw = encode_image(&mut ctx, &p.visual, &alloc::vec![0.0; 64 * 64 * 3], 64, 64).unwrap();
        for l in raw.levels {
            assert!(ctx.graph.value(l.node).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stem_windows_overlap_neighbours() {
        let mut img = alloc::vec![0.0f64; 32 * 32 * 3];
        img[(8 * 32 + 8) * 3] = 1.0;
        let p = patchify(&img, 32, 32).unwrap();
        let hits: Vec<usize> = (0..p.rows()).filter(|&r| p.row(r).iter().any(|&v| v != 0.0)).collect();
        assert_eq!(hits, [0, 1, 4, 5]);
        // Offset of (8, 8) inside the window of cell (1, 1), which starts at (4, 4).
        assert_eq!(p.get(5, (4 * KERNEL + 4) * 3), 1.0);
    }

    #[test]
    fn identity_projection_passes_finest_stage() {
        let cfg = small();
        let (mut store, p) = setup(&cfg);
        let c = cfg.channels;
        let eye = Tensor::from_fn(c, c, |r, k| if r == k { 1.0 } else { 0.0 });
        store.set("pixel.lateral8.weight", eye).unwrap();
        zero_linear(&mut store, &p.pixel.lateral[0]);
        zero_linear(&mut store, &p.pixel.lateral[1]);
        let mut ctx = Ctx::new(&store);
        let raw = encode_image(&mut ctx, &p.visual, &image(64, 64), 64, 64).unwrap();
        let dec = pixel_decode(&mut ctx, &p.pixel, &raw).unwrap();
        assert_eq!(ctx.graph.value(dec.levels[2].node), ctx.graph.value(raw.levels[2].node));
    }

    #[test]
    fn text_single_token_sentence_is_projection() {
        let cfg = small();
        let (store, p) = setup(&cfg);
        let mut ctx = Ctx::new(&store);
        let wf = encode_text(&mut ctx, &p.text, &[5]).unwrap();
        assert_eq!(ctx.graph.shape(wf.words), (1, 8));
        let row = ctx.graph.value(wf.words).clone();
        let w = store.get(p.text.sentence.weight);
        let b = store.get(p.text.sentence.bias);
        let mut expect = row.matmul(w).unwrap();
        expect.add_assign(b);
        assert!(ctx.graph.value(wf.sentence).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn repeated_token_without_positions_gives_equal_rows() {
        let cfg = ModelConfig { text_positions: false, ..small() };
        let (store, p) = setup(&cfg);
        let mut ctx = Ctx::new(&store);
        let wf = encode_text(&mut ctx, &p.text, &[7, 7]).unwrap();
        let v = ctx.graph.value(wf.words);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let cfg = small();
        let (store, p) = setup(&cfg);
        let mut ctx = Ctx::new(&store);
        assert!(encode_text(&mut ctx, &p.text, &[cfg.vocab_size as u32]).is_err());
        assert!(encode_text(&mut ctx, &p.text, &[]).is_err());
    }

    #[test]
    fn repeated_calls_are_bit_stable() {
        let cfg = small();
        let (store, p) = setup(&cfg);
        let run = || {
            let mut ctx = Ctx::new(&store);
            let raw = encode_image(&mut ctx, &p.visual, &image(64, 64), 64, 64).unwrap();
            let dec = pixel_decode(&mut ctx, &p.pixel, &raw).unwrap();
            let t = encode_text(&mut ctx, &p.text, &[1, 2, 3]).unwrap();
            (ctx.graph.value(dec.levels[2].node).clone(), ctx.graph.value(t.words).clone())
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn stride_arithmetic_holds_for_divisible_sizes(hm in 1usize..5, wm in 1usize..5) {
            let cfg = small();
            let (store, p) = setup(&cfg);
            let (h, w) = (32 * hm, 32 * wm);
            let mut ctx = Ctx::new(&store);
            let raw = encode_image(&mut ctx, &p.visual, &image(h, w), h, w).unwrap();
            for (k, stride) in [32usize, 16, 8].into_iter().enumerate() {
                prop_assert_eq!((raw.levels[k].h, raw.levels[k].w), (h / stride, w / stride));
            }
        }
    }
}
