//! Newline-delimited JSON manifest; image paths are relative to the
//! manifest's directory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

use super::{read_ppm, write_ppm, GtBox, PixelBox, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    image: String,
    labels: Vec<u8>,
    boxes: Vec<[usize; 5]>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes `samples` as `images/<id>.ppm` next to the manifest at `path`.
pub fn save_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let dir = base_dir(path);
    let images = dir.join("images");
    if !samples.is_empty() {
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    } else if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut out = String::new();
    for s in samples {
        let rel = format!("images/{}.ppm", s.id);
        write_ppm(&dir.join(&rel), &s.image)?;
        let rec = Record {
            id: s.id.clone(),
            image: rel,
            labels: s.labels.clone(),
            boxes: s
                .boxes
                .iter()
                .map(|b| [b.class, b.bbox.r0, b.bbox.c0, b.bbox.r1, b.bbox.c1])
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_record(rec: &Record, h: usize, w: usize, num_classes: Option<usize>) -> std::result::Result<Vec<GtBox>, String> {
    if let Some(j) = num_classes {
        if rec.labels.len() != j {
            return Err(format!("expected {j} labels, found {}", rec.labels.len()));
        }
    }
    if rec.labels.iter().any(|&l| l > 1) {
        return Err("labels must be 0 or 1".into());
    }
    let mut boxes = Vec::with_capacity(rec.boxes.len());
    for &[j, r0, c0, r1, c1] in &rec.boxes {
        if j >= rec.labels.len() || rec.labels[j] != 1 {
            return Err(format!("box for class {j} which is not a positive label"));
        }
        if r0 > r1 || c0 > c1 || r1 >= h || c1 >= w {
            return Err(format!("box [{r0},{c0},{r1},{c1}] outside the {h}x{w} image"));
        }
        boxes.push(GtBox {
            class: j,
            bbox: PixelBox::new(r0, c0, r1, c1),
        });
    }
    for (j, _) in rec.labels.iter().enumerate().filter(|(_, &l)| l == 1) {
        if !boxes.iter().any(|b| b.class == j) {
            return Err(format!("positive class {j} has no box"));
        }
    }
    Ok(boxes)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = base_dir(path);
    let mut samples: Vec<Sample> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let image = read_ppm(&dir.join(&rec.image))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let boxes = check_record(&rec, h, w, samples.first().map(|s| s.labels.len()))
            .map_err(|msg| Error::Parse { line: line_no, msg })?;
        samples.push(Sample {
            id: rec.id,
            image,
            labels: rec.labels,
            boxes,
        });
    }
    Ok(samples)
}

/// SHA-256 over ids, labels, boxes and 8-bit pixels of a dataset, hex
/// encoded. Equal for a generated dataset and its reloaded manifest.
pub fn dataset_digest(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.id.len() as u64).to_le_bytes());
        h.update(s.id.as_bytes());
        h.update(&s.labels);
        for b in &s.boxes {
            for v in [b.class, b.bbox.r0, b.bbox.c0, b.bbox.r1, b.bbox.c1] {
                h.update((v as u64).to_le_bytes());
            }
        }
        for &d in s.image.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let bytes: Vec<u8> = s.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    #[test]
    fn round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let data = generate(&DatasetSpec { num_samples: 12, ..DatasetSpec::default() }).unwrap();
        save_manifest(&path, &data).unwrap();
        let back = load_manifest(&path).unwrap();
        // generation already quantizes to the 8-bit grid, so equality is exact
        assert_eq!(back, data);
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        save_manifest(&path, &[]).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"");
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_box_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let data = generate(&DatasetSpec { num_samples: 3, ..DatasetSpec::default() }).unwrap();
        save_manifest(&path, &data).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let j = data[1].boxes[0].class;
        lines[1] = lines[1].replace("\"boxes\":[[", &format!("\"boxes\":[[{j},0,0,99,99],["));
        fs::write(&path, lines.join("\n")).unwrap();
        match load_manifest(&path) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("outside"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, r#"{"id":"a","image":"images/gone.ppm","labels":[0],"boxes":[]}"#).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("gone.ppm"));
    }

    #[test]
    fn digest_survives_round_trip_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut data = generate(&DatasetSpec { num_samples: 4, ..DatasetSpec::default() }).unwrap();
        save_manifest(&path, &data).unwrap();
        let a = dataset_digest(&data);
        assert_eq!(a, dataset_digest(&load_manifest(&path).unwrap()));
        data[2].labels[0] ^= 1;
        assert_ne!(a, dataset_digest(&data));
    }
}
