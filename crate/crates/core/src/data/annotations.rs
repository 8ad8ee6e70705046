//! Scene annotations stored as JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Keypoint, PersonInstance};

/// Ground truth of one scene, in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<PersonInstance>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    keypoints: Vec<(f64, f64, u8)>,
    bbox: [f64; 4],
    area: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    id: u64,
    width: usize,
    height: usize,
    instances: Vec<InstanceRecord>,
}

impl From<&Annotation> for AnnotationRecord {
    fn from(a: &Annotation) -> Self {
        Self {
            id: a.id,
            width: a.width,
            height: a.height,
            instances: a
                .instances
                .iter()
                .map(|p| InstanceRecord {
                    keypoints: p.keypoints.iter().map(|k| (k.x, k.y, k.visible as u8)).collect(),
                    bbox: p.bbox.to_array(),
                    area: p.area,
                })
                .collect(),
        }
    }
}

impl TryFrom<AnnotationRecord> for Annotation {
    type Error = String;

    fn try_from(r: AnnotationRecord) -> std::result::Result<Self, String> {
        let mut instances = Vec::with_capacity(r.instances.len());
        for (i, inst) in r.instances.into_iter().enumerate() {
            let mut keypoints = Vec::with_capacity(inst.keypoints.len());
            for (x, y, v) in inst.keypoints {
                if v > 1 {
                    return Err(format!("instance {i}: visibility flag {v} is not 0 or 1"));
                }
                keypoints.push(Keypoint::new(x, y, v == 1));
            }
            if !keypoints.iter().any(|k| k.visible) {
                return Err(format!("instance {i} has no visible keypoint"));
            }
            let [x0, y0, x1, y1] = inst.bbox;
            instances.push(PersonInstance {
                keypoints,
                bbox: BBox::new(x0, y0, x1, y1),
                area: inst.area,
            });
        }
        Ok(Annotation {
            id: r.id,
            width: r.width,
            height: r.height,
            instances,
        })
    }
}

/// One JSON object per annotation, newline-terminated.
pub fn write_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        let line = serde_json::to_string(&AnnotationRecord::from(a)).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses one annotation per non-blank line.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(Annotation::try_from(record).map_err(parse_err)?);
    }
    Ok(out)
}
