//! Dataset (de)serialization.
//!
//! The observable dataset is line-delimited JSON, one frame per line, behind
//! a versioned header line. Hidden ground-truth fields go to a separate
//! sidecar file so pipeline code cannot accidentally read them; evaluation
//! and test harnesses load the sidecar explicitly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoxGeom;
use crate::synthdata::GeneratorConfig;
use crate::types::Dataset;

pub const DATASET_FORMAT: &str = "pslab-dataset";
pub const SIDECAR_FORMAT: &str = "pslab-gt";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    /// Hash of the run manifest that produced the file.
    pub manifest: String,
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarHeader {
    format: String,
    version: u32,
    manifest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtBox {
    identity: Option<u32>,
    bbox: Option<BoxGeom>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GtFrame {
    frame_id: u64,
    boxes: Vec<GtBox>,
}

/// Write the observable dataset and its ground-truth sidecar.
pub fn save_dataset(
    dataset: &Dataset,
    path: &Path,
    sidecar_path: &Path,
    manifest: &str,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        manifest: manifest.into(),
        generator: dataset.generator.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).map_err(fmt_err)?)?;
    for frame in &dataset.frames {
        writeln!(out, "{}", serde_json::to_string(frame).map_err(fmt_err)?)?;
    }
    out.flush()?;

    let mut side = BufWriter::new(File::create(sidecar_path)?);
    let sheader = SidecarHeader {
        format: SIDECAR_FORMAT.into(),
        version: FORMAT_VERSION,
        manifest: manifest.into(),
    };
    writeln!(side, "{}", serde_json::to_string(&sheader).map_err(fmt_err)?)?;
    for frame in &dataset.frames {
        let gt = GtFrame {
            frame_id: frame.frame_id,
            boxes: frame
                .boxes
                .iter()
                .map(|b| GtBox {
                    identity: b.gt_identity,
                    bbox: b.gt_box,
                })
                .collect(),
        };
        writeln!(side, "{}", serde_json::to_string(&gt).map_err(fmt_err)?)?;
    }
    side.flush()?;
    Ok(())
}

/// Load the observable dataset. Ground-truth fields come back unset.
pub fn load_dataset(path: &Path) -> Result<(Dataset, DatasetHeader)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(fmt_err)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "not a dataset file (format = {:?})",
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            header.version
        )));
    }
    let mut frames = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(serde_json::from_str(&line).map_err(fmt_err)?);
    }
    Ok((
        Dataset {
            frames,
            generator: header.generator.clone(),
        },
        header,
    ))
}

/// Attach hidden ground truth from a sidecar file (test/eval mode only).
pub fn attach_ground_truth(dataset: &mut Dataset, sidecar_path: &Path) -> Result<()> {
    let mut lines = BufReader::new(File::open(sidecar_path)?).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty sidecar file".into()))??;
    let header: SidecarHeader = serde_json::from_str(&header_line).map_err(fmt_err)?;
    if header.format != SIDECAR_FORMAT {
        return Err(Error::Format(format!(
            "not a ground-truth sidecar (format = {:?})",
            header.format
        )));
    }
    let mut by_frame = std::collections::BTreeMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let gt: GtFrame = serde_json::from_str(&line).map_err(fmt_err)?;
        by_frame.insert(gt.frame_id, gt.boxes);
    }
    for frame in &mut dataset.frames {
        let gt = by_frame.get(&frame.frame_id).ok_or_else(|| {
            Error::Format(format!("sidecar missing frame {}", frame.frame_id))
        })?;
        if gt.len() != frame.boxes.len() {
            return Err(Error::Format(format!(
                "sidecar frame {} has {} boxes, dataset has {}",
                frame.frame_id,
                gt.len(),
                frame.boxes.len()
            )));
        }
        for (b, g) in frame.boxes.iter_mut().zip(gt) {
            b.gt_identity = g.identity;
            b.gt_box = g.bbox;
        }
    }
    Ok(())
}

fn fmt_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{corrupt, generate_dataset};

    #[test]
    fn round_trip_preserves_observables_and_sidecar_restores_gt() {
        let cfg = GeneratorConfig {
            num_domains: 2,
            videos_per_domain: 1,
            frames_per_video: 6,
            identities_per_video: 3,
            ..GeneratorConfig::default()
        };
        let ds = corrupt(&generate_dataset(&cfg).unwrap(), &cfg);
        let dir = std::env::temp_dir().join(format!("pslab-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let data = dir.join("d.jsonl");
        let side = dir.join("d.gt.jsonl");
        save_dataset(&ds, &data, &side, "cafebabe").unwrap();

        let (mut loaded, header) = load_dataset(&data).unwrap();
        assert_eq!(header.manifest, "cafebabe");
        // Observables round-trip; gt is stripped.
        assert_eq!(loaded.frames.len(), ds.frames.len());
        assert!(loaded
            .frames
            .iter()
            .flat_map(|f| &f.boxes)
            .all(|b| b.gt_identity.is_none() && b.gt_box.is_none()));
        for (a, b) in ds.frames.iter().zip(&loaded.frames) {
            for (x, y) in a.boxes.iter().zip(&b.boxes) {
                assert_eq!(x.identity, y.identity);
                assert_eq!(x.bbox, y.bbox);
                assert_eq!(x.feature, y.feature);
            }
        }

        attach_ground_truth(&mut loaded, &side).unwrap();
        assert_eq!(loaded, ds);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_wrong_format() {
        let dir = std::env::temp_dir().join(format!("pslab-io-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.jsonl");
        std::fs::write(&p, "{\"format\":\"something-else\",\"version\":1,\"manifest\":\"\",\"generator\":{}}\n").unwrap();
        assert!(load_dataset(&p).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
