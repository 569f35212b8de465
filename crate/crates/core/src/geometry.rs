//! Region-grid geometry, mask resampling and query up-scaling.
//!
//! A feature map of `feat_h x feat_w` is split into a `g x g` grid of
//! windows, `g = sqrt(n_regions)`, each `floor(feat / g) + 1` pixels along an
//! axis. The `+1` is applied even when `g` divides the map, so the tiled area
//! always over-covers it; the excess is zero padding on the bottom and right
//! and never takes part in losses or metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::tensor::Tensor;

pub fn exact_sqrt(n: usize) -> Option<usize> {
    let mut r = num_traits::Float::sqrt(n as f64) as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    (r * r == n).then_some(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionGrid {
    pub feat_h: usize,
    pub feat_w: usize,
    pub n_regions: usize,
    pub grid_side: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

pub fn build_region_grid(feat_h: usize, feat_w: usize, n_regions: usize) -> Result<RegionGrid> {
    if feat_h == 0 || feat_w == 0 {
        return Err(invalid_arg!("feature map {}x{} is empty", feat_h, feat_w));
    }
    let g = match exact_sqrt(n_regions) {
        Some(g) if g >= 1 => g,
        _ => return Err(invalid_arg!("region count {} is not a perfect square >= 1", n_regions)),
    };
    let win_h = feat_h / g + 1;
    let win_w = feat_w / g + 1;
    Ok(RegionGrid {
        feat_h,
        feat_w,
        n_regions,
        grid_side: g,
        win_h,
        win_w,
        pad_h: g * win_h - feat_h,
        pad_w: g * win_w - feat_w,
    })
}

impl RegionGrid {
    pub fn padded_h(&self) -> usize {
        self.feat_h + self.pad_h
    }

    pub fn padded_w(&self) -> usize {
        self.feat_w + self.pad_w
    }

    pub fn window_len(&self) -> usize {
        self.win_h * self.win_w
    }

    pub fn num_pixels(&self) -> usize {
        self.feat_h * self.feat_w
    }

    /// Region owning real pixel `(y, x)`.
    pub fn region_of(&self, y: usize, x: usize) -> usize {
        (y / self.win_h) * self.grid_side + x / self.win_w
    }

    /// Row-major pixel index (in the unpadded map) of offset `(dy, dx)`
    /// inside window `r`, or `None` when that position is padding.
    pub fn window_pixel(&self, r: usize, dy: usize, dx: usize) -> Option<usize> {
        let y = (r / self.grid_side) * self.win_h + dy;
        let x = (r % self.grid_side) * self.win_w + dx;
        (y < self.feat_h && x < self.feat_w).then_some(y * self.feat_w + x)
    }

    /// For every partitioned row (window `r`, then offsets row-major) the
    /// source pixel, `None` for padding.
    pub fn partition_index(&self) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.n_regions * self.window_len());
        for r in 0..self.n_regions {
            for dy in 0..self.win_h {
                for dx in 0..self.win_w {
                    idx.push(self.window_pixel(r, dy, dx));
                }
            }
        }
        idx
    }

    /// For every real pixel (row-major) its row in the partitioned layout.
    pub fn stitch_index(&self) -> Vec<Option<usize>> {
        let mut idx = Vec::with_capacity(self.num_pixels());
        for y in 0..self.feat_h {
            for x in 0..self.feat_w {
                let r = self.region_of(y, x);
                let (dy, dx) = (y % self.win_h, x % self.win_w);
                idx.push(Some(r * self.window_len() + dy * self.win_w + dx));
            }
        }
        idx
    }

    /// Number of real (non-padding) pixels in window `r`.
    pub fn real_pixels(&self, r: usize) -> usize {
        let y0 = (r / self.grid_side) * self.win_h;
        let x0 = (r % self.grid_side) * self.win_w;
        let h = self.feat_h.saturating_sub(y0).min(self.win_h);
        let w = self.feat_w.saturating_sub(x0).min(self.win_w);
        h * w
    }

    /// `n_regions x num_pixels` averaging matrix over each window's real
    /// pixels. Windows made only of padding get an all-zero row.
    pub fn pooling_matrix<F: Float>(&self) -> Tensor<F> {
        let mut m = Tensor::zeros(self.n_regions, self.num_pixels());
        for r in 0..self.n_regions {
            let n = self.real_pixels(r);
            if n == 0 {
                continue;
            }
            let w = F::one() / F::lit(n as f64);
            for dy in 0..self.win_h {
                for dx in 0..self.win_w {
                    if let Some(p) = self.window_pixel(r, dy, dx) {
                        m.set(r, p, w);
                    }
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid_arg!("mask {}x{} needs {} values, got {}", height, width, height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn to_floats<F: Float>(&self) -> Vec<F> {
        self.data.iter().map(|&b| if b { F::one() } else { F::zero() }).collect()
    }
}

/// Nearest source index for output cell `i`: the source cell containing the
/// output cell's center.
#[inline]
fn nearest_src(i: usize, src: usize, dst: usize) -> usize {
    ((2 * i + 1) * src) / (2 * dst)
}

pub fn nearest_downsample_mask(mask: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    if target_h == 0 || target_w == 0 || target_h > mask.height || target_w > mask.width {
        return Err(invalid_arg!(
            "cannot downsample {}x{} to {}x{}",
            mask.height,
            mask.width,
            target_h,
            target_w
        ));
    }
    Ok(BinaryMask::from_fn(target_h, target_w, |y, x| {
        mask.get(nearest_src(y, mask.height, target_h), nearest_src(x, mask.width, target_w))
    }))
}

/// Nearest-neighbour resampling of a row-major scalar map (any direction).
pub fn nearest_resample<F: Float>(map: &[F], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<F> {
    assert_eq!(map.len(), h * w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = nearest_src(y, h, out_h);
        for x in 0..out_w {
            out.push(map[sy * w + nearest_src(x, w, out_w)]);
        }
    }
    out
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resample<F: Float>(map: &[F], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<F> {
    assert_eq!(map.len(), h * w);
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, F) {
        let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let i0 = (num_traits::Float::floor(s) as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, F::lit(s - i0 as f64))
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = map[y0 * w + x0] * (F::one() - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (F::one() - fx) + map[y1 * w + x1] * fx;
            out.push(top * (F::one() - fy) + bot * fy);
        }
    }
    out
}

/// Queries bound one-to-one to the regions of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet<F> {
    queries: Tensor<F>,
    grid: RegionGrid,
}

impl<F: Float> QuerySet<F> {
    pub fn new(queries: Tensor<F>, grid: RegionGrid) -> Result<Self> {
        if queries.rows() != grid.n_regions {
            return Err(invalid_arg!("{} queries for {} regions", queries.rows(), grid.n_regions));
        }
        Ok(Self { queries, grid })
    }

    pub fn queries(&self) -> &Tensor<F> {
        &self.queries
    }

    pub fn grid(&self) -> &RegionGrid {
        &self.grid
    }

    pub fn into_parts(self) -> (Tensor<F>, RegionGrid) {
        (self.queries, self.grid)
    }
}

/// In-graph counterpart of [`QuerySet`]: a query node whose rows are bound
/// to the regions of `grid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundQueries {
    pub node: crate::graph::NodeId,
    pub grid: RegionGrid,
}

/// Parent row of every child cell when a `side x side` grid doubles.
pub fn upsample_index(parent_side: usize) -> Vec<Option<usize>> {
    let side = parent_side * 2;
    (0..side * side).map(|c| Some((c / side / 2) * parent_side + (c % side) / 2)).collect()
}

pub fn upsample_queries<F: Float>(q: &QuerySet<F>, next_grid: RegionGrid) -> Result<QuerySet<F>> {
    let side = q.grid.grid_side;
    if next_grid.grid_side != 2 * side {
        return Err(invalid_arg!(
            "next grid side {} is not twice the current side {}",
            next_grid.grid_side,
            side
        ));
    }
    let c = q.queries.cols();
    let mut out = Tensor::zeros(next_grid.n_regions, c);
    for (child, parent) in upsample_index(side).into_iter().enumerate() {
        out.row_mut(child).copy_from_slice(q.queries.row(parent.unwrap()));
    }
    QuerySet::new(out, next_grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_examples() {
        let g = build_region_grid(15, 15, 16).unwrap();
        assert_eq!((g.win_h, g.win_w, g.pad_h, g.pad_w, g.grid_side), (4, 4, 1, 1, 4));
        let g = build_region_grid(60, 60, 256).unwrap();
        assert_eq!((g.win_h, g.win_w, g.pad_h, g.pad_w, g.grid_side), (4, 4, 4, 4, 16));
        let g = build_region_grid(7, 7, 1).unwrap();
        assert_eq!((g.win_h, g.win_w, g.pad_h, g.pad_w, g.grid_side), (8, 8, 1, 1, 1));
    }

    #[test]
    fn grid_rejects_non_square() {
        assert!(matches!(build_region_grid(8, 8, 8), Err(crate::Error::InvalidArgument(_))));
        assert!(build_region_grid(8, 8, 0).is_err());
        assert!(build_region_grid(0, 8, 4).is_err());
    }

    #[test]
    fn downsample_examples() {
        let ones = BinaryMask::from_fn(8, 8, |_, _| true);
        assert_eq!(nearest_downsample_mask(&ones, 4, 4).unwrap(), BinaryMask::from_fn(4, 4, |_, _| true));
        let zeros = BinaryMask::empty(8, 8);
        assert_eq!(nearest_downsample_mask(&zeros, 2, 2).unwrap(), BinaryMask::empty(2, 2));
        assert!(nearest_downsample_mask(&zeros, 9, 2).is_err());
    }

    /// Reference nearest neighbour: the source pixel whose center is closest
    /// to the output pixel center, ties going to the larger index.
    fn brute_nearest(mask: &BinaryMask, th: usize, tw: usize) -> BinaryMask {
        let pick = |i: usize, src: usize, dst: usize| {
            let center = (i as f64 + 0.5) * src as f64 / dst as f64;
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..src {
                let d = (center - (k as f64 + 0.5)).abs();
                if d <= best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        };
        BinaryMask::from_fn(th, tw, |y, x| mask.get(pick(y, mask.height, th), pick(x, mask.width, tw)))
    }

    #[test]
    fn checkerboard_matches_reference() {
        let cb = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 2 == 1);
        let out = nearest_downsample_mask(&cb, 2, 2).unwrap();
        assert_eq!(out, brute_nearest(&cb, 2, 2));
        // Frozen from the reference: centers land on (1,1),(1,3),(3,1),(3,3).
        assert_eq!(out, BinaryMask::empty(2, 2));
    }

    #[test]
    fn query_schedule_quadruples() {
        let g0 = build_region_grid(15, 15, 16).unwrap();
        let q = QuerySet::new(Tensor::<f32>::from_fn(16, 3, |r, c| (r * 3 + c) as f32), g0).unwrap();
        let g1 = build_region_grid(30, 30, 64).unwrap();
        let q1 = upsample_queries(&q, g1).unwrap();
        let g2 = build_region_grid(60, 60, 256).unwrap();
        let q2 = upsample_queries(&q1, g2).unwrap();
        assert_eq!([q.queries().rows(), q1.queries().rows(), q2.queries().rows()], [16, 64, 256]);
        // Every parent appears exactly four times.
        for p in 0..16 {
            let n = (0..64).filter(|&c| q1.queries().row(c) == q.queries().row(p)).count();
            assert_eq!(n, 4);
        }
        assert!(upsample_queries(&q, g2).is_err());
    }

    #[test]
    fn identical_rows_stay_identical() {
        let g0 = build_region_grid(4, 4, 4).unwrap();
        let q = QuerySet::new(Tensor::<f64>::filled(4, 5, 0.25), g0).unwrap();
        let q1 = upsample_queries(&q, build_region_grid(8, 8, 16).unwrap()).unwrap();
        assert!(q1.queries().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn pooling_rows_average_real_pixels() {
        let g = build_region_grid(4, 4, 4).unwrap(); // 3x3 windows on a 6x6 padded map
        let m = g.pooling_matrix::<f64>();
        for r in 0..4 {
            let s: f64 = m.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.real_pixels(0), 9);
        assert_eq!(g.real_pixels(3), 1);
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let m = vec![2.5f64; 6];
        assert!(bilinear_resample(&m, 2, 3, 8, 12).iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let up = nearest_resample(&[1.0f32, 2.0, 3.0, 4.0], 2, 2, 4, 4);
        assert_eq!(&up[..4], &[1.0, 1.0, 2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn windows_tile_padded_map(h in 1usize..40, w in 1usize..40, g in 1usize..7) {
            let grid = build_region_grid(h, w, g * g).unwrap();
            prop_assert!(grid.grid_side * grid.win_h >= h && grid.grid_side * grid.win_w >= w);
            prop_assert_eq!(grid.padded_h(), grid.grid_side * grid.win_h);
            // Every padded-map cell lies in exactly one window.
            let mut hits = vec![0u32; grid.padded_h() * grid.padded_w()];
            for r in 0..grid.n_regions {
                let y0 = (r / g) * grid.win_h;
                let x0 = (r % g) * grid.win_w;
                for dy in 0..grid.win_h {
                    for dx in 0..grid.win_w {
                        hits[(y0 + dy) * grid.padded_w() + x0 + dx] += 1;
                    }
                }
            }
            prop_assert!(hits.iter().all(|&n| n == 1));
            // Real pixels appear exactly once in the partition.
            let idx = grid.partition_index();
            let mut seen = vec![0u32; h * w];
            for p in idx.iter().flatten() {
                seen[*p] += 1;
            }
            prop_assert!(seen.iter().all(|&n| n == 1));
        }

        #[test]
        fn downsample_is_binary_preserving(h in 1usize..24, w in 1usize..24, bits in proptest::collection::vec(any::<bool>(), 576)) {
            let mask = BinaryMask::from_fn(h, w, |y, x| bits[y * 24 + x]);
            let th = 1 + h / 2;
            let tw = 1 + w / 3;
            let out = nearest_downsample_mask(&mask, th.min(h), tw.min(w)).unwrap();
            prop_assert_eq!(&out, &brute_nearest(&mask, th.min(h), tw.min(w)));
            if mask.is_empty() { prop_assert!(out.is_empty()); }
            if mask.count() == h * w { prop_assert_eq!(out.count(), out.height * out.width); }
        }

        #[test]
        fn block_average_recovers_parents(side in 1usize..6, vals in proptest::collection::vec(-40i32..40, 36 * 3)) {
            let n = side * side;
            let g0 = build_region_grid(4 * side, 4 * side, n).unwrap();
            let q = QuerySet::new(Tensor::from_fn(n, 3, |r, c| vals[r * 3 + c] as f64 / 8.0), g0).unwrap();
            let g1 = build_region_grid(8 * side, 8 * side, 4 * n).unwrap();
            let up = upsample_queries(&q, g1).unwrap();
            let s2 = 2 * side;
            for p in 0..n {
                let (pi, pj) = (p / side, p % side);
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        acc += up.queries().get((2 * pi + di) * s2 + 2 * pj + dj, c);
                    }
                    prop_assert_eq!(acc / 4.0, q.queries().get(p, c));
                }
            }
        }
    }
}
