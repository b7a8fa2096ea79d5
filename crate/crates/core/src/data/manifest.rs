use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct PairManifestEntry {
    pub rgb_path: PathBuf,
    pub tir_path: PathBuf,
    /// Externally supplied detections in RGB frame coordinates.
    pub boxes: Option<Vec<BBox>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    rgb: String,
    tir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<[f64; 4]>>,
}

/// A decoded, pixel-aligned RGB/TIR pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub index: usize,
    pub rgb: RgbImage,
    pub tir: GrayImage,
    pub detections: Option<Vec<BBox>>,
}

impl AlignedPair {
    pub fn new(index: usize, rgb: RgbImage, tir: GrayImage, detections: Option<Vec<BBox>>) -> Result<Self> {
        if rgb.dimensions() != tir.dimensions() {
            return Err(Error::Alignment { index, rgb: rgb.dimensions(), tir: tir.dimensions() });
        }
        Ok(Self { index, rgb, tir, detections })
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.rgb.dimensions()
    }
}

/// Reads a JSON Lines pair manifest. Relative paths resolve against the
/// manifest's directory.
pub fn load_pair_manifest(path: &Path) -> Result<Vec<PairManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let boxes = parsed.boxes.map(|bs| bs.into_iter().map(|[x, y, w, h]| BBox::new(x, y, w, h)).collect::<Vec<_>>());
        if let Some(bs) = &boxes {
            if let Some(bad) = bs.iter().find(|b| !b.is_valid()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("invalid box {bad:?}"),
                });
            }
        }
        out.push(PairManifestEntry { rgb_path: base.join(parsed.rgb), tir_path: base.join(parsed.tir), boxes });
    }
    Ok(out)
}

/// Writes entries with paths made relative to the manifest directory when
/// possible.
pub fn write_pair_manifest(path: &Path, entries: &[PairManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
    let mut f = fs::File::create(path)?;
    for e in entries {
        let line = Line {
            rgb: rel(&e.rgb_path),
            tir: rel(&e.tir_path),
            boxes: e.boxes.as_ref().map(|bs| bs.iter().map(|b| [b.x, b.y, b.w, b.h]).collect()),
        };
        writeln!(f, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Decodes one manifest entry, checking pixel alignment.
pub fn load_pair_images(entry: &PairManifestEntry, index: usize) -> Result<AlignedPair> {
    let rgb = open(&entry.rgb_path)?.to_rgb8();
    let tir = open(&entry.tir_path)?.to_luma8();
    AlignedPair::new(index, rgb, tir, entry.boxes.clone())
}

/// Saves decoded pairs as `rgb/NNNNN.png`, `tir/NNNNN.png` and a manifest
/// `pairs.jsonl` in `dir`; returns the manifest path.
pub fn write_aligned_pairs(dir: &Path, pairs: &[AlignedPair]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("rgb"))?;
    fs::create_dir_all(dir.join("tir"))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in pairs {
        let rgb_path = dir.join(format!("rgb/{:05}.png", p.index));
        let tir_path = dir.join(format!("tir/{:05}.png", p.index));
        p.rgb.save(&rgb_path).map_err(|source| Error::Image { path: rgb_path.clone(), source })?;
        p.tir.save(&tir_path).map_err(|source| Error::Image { path: tir_path.clone(), source })?;
        entries.push(PairManifestEntry { rgb_path, tir_path, boxes: p.detections.clone() });
    }
    let manifest = dir.join("pairs.jsonl");
    write_pair_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads every pair listed in a manifest.
pub fn load_aligned_pairs(manifest: &Path) -> Result<Vec<AlignedPair>> {
    load_pair_manifest(manifest)?.iter().enumerate().map(|(i, e)| load_pair_images(e, i)).collect()
}
