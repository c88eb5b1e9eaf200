//! Line-delimited JSON pose files and COCO keypoint ingestion.
//!
//! One JSON object per line: `{id, topology, joints, conf?, gt3d?}` plus
//! optional ground-truth extras emitted by the synthetic data generator
//! (`gt_theta`, `gt_beta`, `gt_cam`). Unknown fields are ignored on read.

use crate::error::{Error, Result};
use crate::skeleton::Pose2D;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub topology: String,
    pub joints: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conf: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt3d: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_theta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_beta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_cam: Option<[f64; 3]>,
}

impl PoseRecord {
    pub fn to_pose2d(&self) -> Result<Pose2D> {
        let mut data = Vec::with_capacity(self.joints.len() * 2);
        for [x, y] in &self.joints {
            data.push(*x);
            data.push(*y);
        }
        Pose2D::new(Tensor::new(vec![self.joints.len(), 2], data)?, self.conf.clone())
    }

    pub fn gt3d_tensor(&self) -> Result<Option<Tensor>> {
        match &self.gt3d {
            None => Ok(None),
            Some(rows) => {
                let mut data = Vec::with_capacity(rows.len() * 3);
                for [x, y, z] in rows {
                    data.extend_from_slice(&[*x, *y, *z]);
                }
                Ok(Some(Tensor::new(vec![rows.len(), 3], data)?))
            }
        }
    }
}

pub fn pose2d_to_joints(pose: &Pose2D) -> Vec<[f64; 2]> {
    (0..pose.joint_count())
        .map(|j| [pose.coords.get2(j, 0), pose.coords.get2(j, 1)])
        .collect()
}

pub fn tensor_to_rows3(t: &Tensor) -> Vec<[f64; 3]> {
    (0..t.rows())
        .map(|r| [t.get2(r, 0), t.get2(r, 1), t.get2(r, 2)])
        .collect()
}

/// Parse a pose file: one JSON record per line, blank lines skipped. The
/// joint count of every record must match `expect_joints` when given.
pub fn read_pose_file(path: impl AsRef<Path>, expect_joints: Option<usize>) -> Result<Vec<PoseRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_lines(&text, expect_joints)
}

pub fn parse_pose_lines(text: &str, expect_joints: Option<usize>) -> Result<Vec<PoseRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(line)
            .map_err(|e| Error::Ingestion(format!("pose line {}: {e}", lineno + 1)))?;
        if let Some(j) = expect_joints {
            if rec.joints.len() != j {
                return Err(Error::Ingestion(format!(
                    "pose '{}': {} joints, expected {j}",
                    rec.id,
                    rec.joints.len()
                )));
            }
        }
        if let Some(c) = &rec.conf {
            if c.len() != rec.joints.len() {
                return Err(Error::Ingestion(format!(
                    "pose '{}': conf length {} vs {} joints",
                    rec.id,
                    c.len(),
                    rec.joints.len()
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_pose_file(path: impl AsRef<Path>, records: &[PoseRecord]) -> Result<()> {
    let mut text = String::new();
    for rec in records {
        text.push_str(&serde_json::to_string(rec).expect("pose record serializes"));
        text.push('\n');
    }
    super::atomic_write(path.as_ref(), text.as_bytes())
}

// COCO keypoint annotations: only the fields we consume.
#[derive(Debug, Deserialize)]
struct CocoFile {
    annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: serde_json::Value,
    keypoints: Vec<f64>,
}

/// Read a COCO-style keypoints JSON: `annotations[].keypoints` holds 17
/// (x, y, visibility) triplets per person. Visibility > 0 maps to
/// confidence 1.0, otherwise 0.0.
pub fn read_coco_keypoints(path: impl AsRef<Path>) -> Result<Vec<(String, Pose2D)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_keypoints(&text)
}

pub fn parse_coco_keypoints(text: &str) -> Result<Vec<(String, Pose2D)>> {
    let file: CocoFile = serde_json::from_str(text)
        .map_err(|e| Error::Ingestion(format!("COCO JSON: {e}")))?;
    let mut out = Vec::with_capacity(file.annotations.len());
    for ann in &file.annotations {
        let id = match &ann.id {
            serde_json::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        if ann.keypoints.len() != 51 {
            return Err(Error::Ingestion(format!(
                "annotation {id}: {} keypoint values, expected 51",
                ann.keypoints.len()
            )));
        }
        let mut coords = Vec::with_capacity(34);
        let mut conf = Vec::with_capacity(17);
        for t in ann.keypoints.chunks_exact(3) {
            if !(t[0].is_finite() && t[1].is_finite()) {
                return Err(Error::Ingestion(format!("annotation {id}: non-finite keypoint")));
            }
            coords.push(t[0]);
            coords.push(t[1]);
            conf.push(if t[2] > 0.0 { 1.0 } else { 0.0 });
        }
        out.push((id, Pose2D::new(Tensor::new(vec![17, 2], coords)?, Some(conf))?));
    }
    Ok(out)
}
