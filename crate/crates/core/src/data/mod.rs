//! Samples, manifests, the synthetic shapes corpus, and image preprocessing.

mod augment;
mod letterbox;
mod synthetic;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use augment::{augment, flip_query, hflip, jitter_hsv, AugmentConfig};
pub use letterbox::{image_to_chw, letterbox, LetterboxTransform};
pub use synthetic::{generate_synthetic, Color, PlacedShape, Query, Relation, SceneSpec, ShapeKind, Side, SyntheticConfig};

/// One image, one query, one box in original pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub query: String,
    pub gt: BBox,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() {
            return Err(Error::InvalidQuery(format!("sample {} has an empty query", self.id)));
        }
        if !self.gt.has_positive_area() || !self.gt.is_finite() {
            return Err(Error::DegenerateBox(format!("sample {}: {:?}", self.id, self.gt)));
        }
        let (w, h) = self.image.dimensions();
        if !self.gt.within(w as f64, h as f64) {
            return Err(Error::DegenerateBox(format!("sample {}: {:?} outside {w}×{h}", self.id, self.gt)));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub query: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

fn record_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn load_record(path: &Path, base: &Path, line: usize, text: &str) -> Result<Sample> {
    let rec: ManifestRecord = serde_json::from_str(text).map_err(|e| record_error(path, line, e.to_string()))?;
    if rec.query.trim().is_empty() {
        return Err(record_error(path, line, "empty query"));
    }
    let [x, y, w, h] = rec.bbox;
    if ![x, y, w, h].iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
        return Err(record_error(path, line, format!("degenerate box {:?}", rec.bbox)));
    }
    let image_path = base.join(&rec.image_path);
    if !image_path.exists() {
        return Err(record_error(path, line, format!("missing image {}", image_path.display())));
    }
    let image = image::open(&image_path).map_err(|e| record_error(path, line, e.to_string()))?.to_rgb8();
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    let mut gt = BBox::new(x, y, w, h);
    if !gt.within(iw, ih) {
        let clipped = gt.clip(iw, ih);
        if !clipped.has_positive_area() {
            return Err(record_error(path, line, format!("box {:?} lies outside the {iw}×{ih} image", rec.bbox)));
        }
        log::warn!("{}:{line}: box {:?} clipped to the image", path.display(), rec.bbox);
        gt = clipped;
    }
    Ok(Sample {
        id: rec.id,
        image,
        query: rec.query,
        gt,
    })
}

/// Loads every record, collecting per-record failures instead of stopping.
/// Image paths are resolved relative to the manifest's directory.
pub fn load_manifest_lenient(path: &Path) -> Result<(Vec<Sample>, Vec<Error>)> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut samples = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match load_record(path, &base, i + 1, &line) {
            Ok(s) => samples.push(s),
            Err(e) => rejects.push(e),
        }
    }
    Ok((samples, rejects))
}

/// Loads a manifest, failing on the first invalid record.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let (samples, mut rejects) = load_manifest_lenient(path)?;
    if !rejects.is_empty() {
        return Err(rejects.remove(0));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}

/// Writes `images/<id>.png` and `manifest.jsonl` under `dir`. Returns the
/// manifest path.
pub fn save_manifest(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
    for s in samples {
        let rel = format!("images/{}.png", s.id);
        s.image.save(dir.join(&rel))?;
        let rec = ManifestRecord {
            id: s.id.clone(),
            image_path: rel,
            query: s.query.clone(),
            bbox: [s.gt.x, s.gt.y, s.gt.w, s.gt.h],
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, lines: &[String]) -> PathBuf {
        let p = dir.join("m.jsonl");
        std::fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn manifest_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(40, 30).save(dir.path().join("a.png")).unwrap();
        let good = r#"{"id":"s1","image_path":"a.png","query":"the red car","box":[1,2,10,5]}"#.to_owned();
        let zero_w = r#"{"id":"s2","image_path":"a.png","query":"x","box":[1,2,0,5]}"#.to_owned();
        let empty_q = r#"{"id":"s3","image_path":"a.png","query":" ","box":[1,2,3,5]}"#.to_owned();
        let missing = r#"{"id":"s4","image_path":"nope.png","query":"x","box":[1,2,3,5]}"#.to_owned();
        let big = r#"{"id":"s5","image_path":"a.png","query":"x","box":[30,20,20,20]}"#.to_owned();
        let p = write(dir.path(), &[good, zero_w, empty_q, missing, big]);
        let (samples, rejects) = load_manifest_lenient(&p).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(rejects.len(), 3);
        assert_eq!(samples[0].id, "s1");
        assert_eq!(samples[0].query, "the red car");
        assert_eq!(samples[0].gt, BBox::new(1.0, 2.0, 10.0, 5.0));
        assert_eq!(samples[1].gt, BBox::new(30.0, 20.0, 10.0, 10.0));
        assert!(matches!(&rejects[0], Error::Manifest { line: 2, message, .. } if message.contains("degenerate")));
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn synthetic_corpus_survives_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = generate_synthetic(&SyntheticConfig::default(), 3, 5).unwrap().into_iter().map(|(s, _)| s).collect();
        let p = save_manifest(dir.path(), &samples).unwrap();
        let (back, rejects) = load_manifest_lenient(&p).unwrap();
        assert!(rejects.is_empty());
        assert_eq!(back, samples);
    }
}
