use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::Image;
use crate::nn::Tensor;

/// Anything the tracker can pull frames from, in order.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Tensor>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A sequence on disk; frames are decoded lazily.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub gt: Vec<BBox>,
    pub attributes: BTreeSet<String>,
}

impl Sequence {
    /// Decodes every frame up front.
    pub fn load_frames(&self) -> Result<InMemorySequence> {
        let frames = self
            .frames
            .iter()
            .map(|path| {
                let img = image::open(path).map_err(|source| Error::Image { path: path.clone(), source })?;
                Ok(match img {
                    image::DynamicImage::ImageLuma8(g) => Image::Gray(g),
                    other => Image::Rgb(other.to_rgb8()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(InMemorySequence { name: self.name.clone(), frames, gt: self.gt.clone(), attributes: self.attributes.clone() })
    }
}

impl FrameSource for Sequence {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<Tensor> {
        let path = &self.frames[index];
        let img = image::open(path).map_err(|source| Error::Image { path: path.clone(), source })?;
        Ok(match img {
            image::DynamicImage::ImageLuma8(g) => Image::Gray(g),
            other => Image::Rgb(other.to_rgb8()),
        }
        .to_tensor())
    }
}

#[derive(Debug, Clone)]
pub struct InMemorySequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub gt: Vec<BBox>,
    pub attributes: BTreeSet<String>,
}

impl FrameSource for InMemorySequence {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<Tensor> {
        Ok(self.frames[index].to_tensor())
    }
}

fn parse_box_line(line: &str) -> Option<BBox> {
    let vals: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect::<Option<_>>()?;
    match vals[..] {
        [x, y, w, h] => Some(BBox::new(x, y, w, h)),
        _ => None,
    }
}

fn non_empty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

/// One `x,y,w,h` line per frame.
pub fn read_results(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path)?;
    non_empty_lines(&text)
        .map(|(line, l)| {
            parse_box_line(l).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("expected x,y,w,h, got `{l}`"),
            })
        })
        .collect()
}

/// Shortest round-trip float formatting, so reading back is lossless.
pub fn write_results(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for b in boxes {
        writeln!(f, "{},{},{},{}", b.x, b.y, b.w, b.h)?;
    }
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let frames_path = dir.join("frames.txt");
    let frames: Vec<PathBuf> = non_empty_lines(&fs::read_to_string(&frames_path)?)
        .map(|(_, l)| dir.join(l))
        .collect();
    let gt_path = dir.join("groundtruth_rect.txt");
    let gt = read_results(&gt_path)?;
    if frames.len() != gt.len() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: format!("{} frames but {} ground-truth lines", frames.len(), gt.len()),
        });
    }
    if frames.len() < 2 {
        return Err(Error::Format { path: dir.to_path_buf(), reason: "need at least two frames".into() });
    }
    if !gt[0].is_valid() {
        return Err(Error::Format { path: gt_path, reason: format!("invalid first box {:?}", gt[0]) });
    }
    let attr_path = dir.join("attributes.txt");
    let attributes = if attr_path.exists() {
        non_empty_lines(&fs::read_to_string(&attr_path)?).map(|(_, l)| l.to_string()).collect()
    } else {
        BTreeSet::new()
    };
    let name = dir.file_name().map_or_else(|| "sequence".into(), |n| n.to_string_lossy().into_owned());
    Ok(Sequence { name, frames, gt, attributes })
}

/// Writes an in-memory sequence in the on-disk layout read by
/// [`load_sequence`].
pub fn write_sequence(dir: &Path, seq: &InMemorySequence) -> Result<Sequence> {
    fs::create_dir_all(dir.join("img"))?;
    let mut names = String::new();
    for (i, frame) in seq.frames.iter().enumerate() {
        let rel = format!("img/{i:05}.png");
        let path = dir.join(&rel);
        let saved = match frame {
            Image::Rgb(img) => img.save(&path),
            Image::Gray(img) => img.save(&path),
        };
        saved.map_err(|source| Error::Image { path: path.clone(), source })?;
        names.push_str(&rel);
        names.push('\n');
    }
    fs::write(dir.join("frames.txt"), names)?;
    write_results(&dir.join("groundtruth_rect.txt"), &seq.gt)?;
    if !seq.attributes.is_empty() {
        let tags: Vec<&str> = seq.attributes.iter().map(String::as_str).collect();
        fs::write(dir.join("attributes.txt"), tags.join("\n") + "\n")?;
    }
    load_sequence(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_dir(n_frames: usize, n_gt: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let frames: String = (0..n_frames).map(|i| format!("img/{i}.png\n")).collect();
        fs::write(dir.path().join("frames.txt"), frames).unwrap();
        let gt: String = (0..n_gt).map(|i| format!("{},20,30,40\n", 10 + i)).collect();
        fs::write(dir.path().join("groundtruth_rect.txt"), gt).unwrap();
        dir
    }

    #[test]
    fn loads_sequence_without_attributes() {
        let dir = fake_dir(10, 10);
        let seq = load_sequence(dir.path()).unwrap();
        assert_eq!(seq.frames.len(), 10);
        assert_eq!(seq.gt[0], BBox::new(10.0, 20.0, 30.0, 40.0));
        assert!(seq.attributes.is_empty());
    }

    #[test]
    fn attributes_are_read() {
        let dir = fake_dir(3, 3);
        fs::write(dir.path().join("attributes.txt"), "scale_variation\nfast_motion\n").unwrap();
        let seq = load_sequence(dir.path()).unwrap();
        assert!(seq.attributes.contains("fast_motion"));
        assert_eq!(seq.attributes.len(), 2);
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let dir = fake_dir(10, 9);
        assert!(matches!(load_sequence(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn results_round_trip_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.txt");
        let boxes = vec![BBox::new(0.1 + 0.2, 1.0 / 3.0, 1e-7, 12345.678901234567), BBox::new(-3.0, 2.5, 1.0, 1.0)];
        write_results(&p, &boxes).unwrap();
        assert_eq!(read_results(&p).unwrap(), boxes);
    }
}
