//! On-disk datasets.
//!
//! One directory per split holding `images/NNNNN.png` (RGB8),
//! `masks/NNNNN.png` (L8, 0 or 255), `records.jsonl` with the text and scene
//! metadata of each sample, and `manifest.json` with split-level counts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use gres_core::geometry::BinaryMask;
use gres_core::synth::{ExprClass, SampleRecord, SceneSpec, Selector, Split};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub id: u64,
    pub image: String,
    pub mask: String,
    pub text: String,
    pub tokens: Vec<u32>,
    pub nt_flag: bool,
    pub class: ExprClass,
    pub scene: SceneSpec,
    pub selector: Selector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    pub classes: BTreeMap<String, usize>,
}

fn file_name(id: u64) -> String {
    format!("{id:05}.png")
}

pub fn write_split(dir: &Path, split: Split, seed: u64, samples: &[SampleRecord]) -> Result<Manifest> {
    let image_size = samples.first().map_or(0, |s| s.size);
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_at(&p))?;
    }
    let records_path = dir.join("records.jsonl");
    let mut records = BufWriter::new(fs::File::create(&records_path).map_err(io_at(&records_path))?);
    let mut classes = BTreeMap::new();
    for s in samples {
        if s.size != image_size {
            return Err(Error::Dataset(format!("sample {} is {}px, expected {}px", s.id, s.size, image_size)));
        }
        let name = file_name(s.id);
        let size = s.size as u32;
        let img = RgbImage::from_raw(size, size, s.image.clone())
            .ok_or_else(|| Error::Dataset(format!("sample {} has a malformed image buffer", s.id)))?;
        img.save(dir.join("images").join(&name))?;
        let mask_px = s.gt_mask.to_floats::<f32>().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        let mask = GrayImage::from_raw(size, size, mask_px).expect("mask buffer has size*size bytes");
        mask.save(dir.join("masks").join(&name))?;
        let line = RecordLine {
            id: s.id,
            image: format!("images/{name}"),
            mask: format!("masks/{name}"),
            text: s.text.clone(),
            tokens: s.tokens.clone(),
            nt_flag: s.nt_flag,
            class: s.class,
            scene: s.scene.clone(),
            selector: s.selector.clone(),
        };
        serde_json::to_writer(&mut records, &line)?;
        records.write_all(b"\n").map_err(io_at(&records_path))?;
        *classes.entry(s.class.name().to_string()).or_insert(0) += 1;
    }
    records.flush().map_err(io_at(&records_path))?;
    let manifest = Manifest { split: split.name().into(), count: samples.len(), image_size, seed, classes };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?).map_err(io_at(&manifest_path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(io_at(&path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_split(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest = read_manifest(dir)?;
    let path = dir.join("records.jsonl");
    let file = fs::File::open(&path).map_err(io_at(&path))?;
    let mut out = Vec::with_capacity(manifest.count);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_at(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RecordLine = serde_json::from_str(&line)?;
        let img = image::open(dir.join(&r.image))?.to_rgb8();
        let mask = image::open(dir.join(&r.mask))?.to_luma8();
        let size = manifest.image_size as u32;
        if img.dimensions() != (size, size) || mask.dimensions() != (size, size) {
            return Err(Error::Dataset(format!("sample {}: raster size differs from manifest ({size}px)", r.id)));
        }
        let bits = mask.as_raw().iter().map(|&v| v >= 128).collect();
        let gt_mask = BinaryMask::from_vec(manifest.image_size, manifest.image_size, bits)?;
        if gt_mask.is_empty() != r.nt_flag {
            return Err(Error::Dataset(format!("sample {}: no-target flag disagrees with the mask", r.id)));
        }
        out.push(SampleRecord {
            id: r.id,
            image: img.into_raw(),
            size: manifest.image_size,
            text: r.text,
            tokens: r.tokens,
            gt_mask,
            nt_flag: r.nt_flag,
            class: r.class,
            scene: r.scene,
            selector: r.selector,
        });
    }
    if out.len() != manifest.count {
        return Err(Error::Dataset(format!("manifest lists {} samples, found {}", manifest.count, out.len())));
    }
    Ok(out)
}
