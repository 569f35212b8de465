//! Cross-attention heatmaps and query clustering rasters.

use gres_core::diagnostics::uniformity;
use gres_core::kmeans::{kmeans, KMeansResult};
use gres_core::model::Model;
use gres_core::nn::Ctx;
use gres_core::synth::SampleRecord;
use gres_core::tensor::Tensor;
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KMEANS_ITERATIONS: usize = 50;

/// Head-averaged cross-attention weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub queries: usize,
    pub visual_len: usize,
    pub lang_len: usize,
    /// Row-major `queries x (visual_len + lang_len)`.
    pub weights: Vec<f64>,
    /// Same layout; true where the key was masked for that query.
    pub masked: Vec<bool>,
}

impl AttentionMap {
    pub fn keys(&self) -> usize {
        self.visual_len + self.lang_len
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let k = self.keys();
        &self.weights[q * k..(q + 1) * k]
    }

    /// Uniformity of each row restricted to its unmasked keys.
    pub fn row_uniformity(&self) -> Vec<f64> {
        let k = self.keys();
        (0..self.queries)
            .map(|q| {
                let open: Vec<f64> = (0..k).filter(|&j| !self.masked[q * k + j]).map(|j| self.weights[q * k + j]).collect();
                uniformity(&open)
            })
            .collect()
    }

    /// One pixel per (query, key), brightness relative to the row maximum.
    pub fn heatmap(&self) -> GrayImage {
        let k = self.keys();
        let mut img = GrayImage::new(k as u32, self.queries as u32);
        for q in 0..self.queries {
            let row = self.row(q);
            let max = row.iter().cloned().fold(0.0, f64::max);
            for (j, &w) in row.iter().enumerate() {
                let v = if max > 0.0 { (255.0 * w / max).round() as u8 } else { 0 };
                img.put_pixel(j as u32, q as u32, Luma([v]));
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: usize,
    pub mean_uniformity: f64,
    pub row_uniformity: Vec<f64>,
    /// Share of attention mass on language keys, per row.
    pub language_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub sample_id: u64,
    pub nt_flag: bool,
    pub layer: usize,
    pub blocks: Vec<BlockSummary>,
}

pub fn summarize(map: &AttentionMap) -> BlockSummary {
    let rows = map.row_uniformity();
    let mean = if rows.is_empty() { 1.0 } else { rows.iter().sum::<f64>() / rows.len() as f64 };
    let language_mass = (0..map.queries).map(|q| map.row(q)[map.visual_len..].iter().sum()).collect();
    BlockSummary { block: map.block, mean_uniformity: mean, row_uniformity: rows, language_mass }
}

/// Cross-attention maps of every block in decoder layer `layer`.
pub fn attention_maps(model: &Model<f32>, sample: &SampleRecord, layer: usize) -> Result<Vec<AttentionMap>> {
    if layer >= model.cfg.decoder_layers {
        return Err(Error::Invalid(format!("layer {} out of range (model has {})", layer, model.cfg.decoder_layers)));
    }
    let mut ctx = Ctx::new(&model.store);
    let out = model.forward(&mut ctx, &sample.image_floats(), &sample.tokens)?;
    let l = &out.layers[layer];
    let mask = &l.mask;
    let mut maps = Vec::with_capacity(l.cross_attention.len());
    for (b, heads) in l.cross_attention.iter().enumerate() {
        let (rows, cols) = ctx.graph.shape(heads[0]);
        let mut weights = vec![0.0; rows * cols];
        for &h in heads {
            for (w, &v) in weights.iter_mut().zip(ctx.graph.value(h).data()) {
                *w += v as f64 / heads.len() as f64;
            }
        }
        let visual_len = mask.visual_len();
        let lang_len = cols - visual_len;
        let masked = (0..rows * cols).map(|i| mask.is_masked(i / cols, i % cols)).collect();
        maps.push(AttentionMap { block: b, queries: rows, visual_len, lang_len, weights, masked });
    }
    Ok(maps)
}

pub fn viz_attention(model: &Model<f32>, sample: &SampleRecord, layer: usize) -> Result<(Vec<GrayImage>, AttentionSummary)> {
    let maps = attention_maps(model, sample, layer)?;
    let images = maps.iter().map(AttentionMap::heatmap).collect();
    let blocks = maps.iter().map(summarize).collect();
    Ok((images, AttentionSummary { sample_id: sample.id, nt_flag: sample.nt_flag, layer, blocks }))
}

/// Distinct colors for cluster ids.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [128, 128, 128],
];

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRaster {
    pub grid_side: usize,
    pub result: KMeansResult,
    pub image: RgbImage,
}

/// Clusters one embedding per region (row-major over a square grid) and
/// colors each grid cell by its cluster.
pub fn cluster_embeddings(embeddings: &Tensor<f64>, grid_side: usize, k: usize, seed: u64) -> Result<ClusterRaster> {
    if embeddings.rows() != grid_side * grid_side {
        return Err(Error::Invalid(format!("{} embeddings for a {}x{} grid", embeddings.rows(), grid_side, grid_side)));
    }
    let result = kmeans(embeddings, k, KMEANS_ITERATIONS, seed)?;
    let side = grid_side as u32;
    let image = RgbImage::from_fn(side, side, |x, y| {
        let c = result.assignments[(y * side + x) as usize];
        Rgb(PALETTE[c % PALETTE.len()])
    });
    Ok(ClusterRaster { grid_side, result, image })
}

/// Clusters the final-layer mask embeddings of `sample`.
pub fn viz_query_clusters(model: &Model<f32>, sample: &SampleRecord, k: usize, seed: u64) -> Result<ClusterRaster> {
    let mut ctx = Ctx::new(&model.store);
    let out = model.forward(&mut ctx, &sample.image_floats(), &sample.tokens)?;
    let last = out.last();
    let emb: Tensor<f64> = ctx.graph.value(last.head.embeddings).cast();
    cluster_embeddings(&emb, last.grid.grid_side, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(weights: Vec<f64>, masked: Vec<bool>, queries: usize, visual_len: usize) -> AttentionMap {
        let lang_len = weights.len() / queries - visual_len;
        AttentionMap { block: 0, queries, visual_len, lang_len, weights, masked }
    }

    #[test]
    fn uniform_row_scores_one_and_masked_keys_are_skipped() {
        let m = map(vec![0.25; 4], vec![false; 4], 1, 3);
        assert!((m.row_uniformity()[0] - 1.0).abs() < 1e-15);
        let m = map(vec![0.0, 0.5, 0.5, 0.0], vec![true, false, false, true], 1, 3);
        assert!((m.row_uniformity()[0] - 1.0).abs() < 1e-15);
        let m = map(vec![0.7, 0.1, 0.1, 0.1], vec![false; 4], 1, 3);
        assert!(m.row_uniformity()[0] < 1.0);
    }

    #[test]
    fn heatmap_dims_and_masked_columns_dark() {
        let m = map(vec![0.0, 0.0, 0.6, 0.4, 0.0, 0.0, 0.5, 0.5], vec![true, true, false, false, true, true, false, false], 2, 2);
        let img = m.heatmap();
        assert_eq!(img.dimensions(), (4, 2));
        for q in 0..2 {
            assert_eq!(img.get_pixel(0, q).0[0], 0);
            assert_eq!(img.get_pixel(1, q).0[0], 0);
        }
        let s = summarize(&m);
        assert!(s.language_mass.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn identical_embeddings_single_color() {
        let e = Tensor::filled(16, 3, 0.5);
        let r = cluster_embeddings(&e, 4, 2, 0).unwrap();
        assert_eq!(r.image.dimensions(), (4, 4));
        let first = *r.image.get_pixel(0, 0);
        assert!(r.image.pixels().all(|p| *p == first));
    }

    #[test]
    fn k_bounds() {
        let e = Tensor::filled(4, 2, 0.0);
        assert!(cluster_embeddings(&e, 2, 5, 0).is_err());
        assert!(cluster_embeddings(&e, 2, 1, 0).is_err());
        assert!(cluster_embeddings(&e, 3, 2, 0).is_err());
    }
}
