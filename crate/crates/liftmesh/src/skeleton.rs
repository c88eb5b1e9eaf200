//! Joint topologies and 2D/3D pose records.
//!
//! A topology is a rooted tree over J joints. The two shipped conventions
//! are the 17-joint Human3.6M layout (the default working skeleton) and the
//! 17-joint COCO keypoint layout, plus a remap from the latter to the
//! former for ingesting keypoint annotations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rooted joint tree: J joints, J-1 parent→child edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    pub name: String,
    pub joint_names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
}

impl SkeletonTopology {
    pub fn new(
        name: impl Into<String>,
        joint_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        root: usize,
    ) -> Result<Self> {
        let t = SkeletonTopology { name: name.into(), joint_names, edges, root };
        t.validate()?;
        Ok(t)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if j == 0 {
            return Err(Error::Topology("no joints".into()));
        }
        if self.root >= j {
            return Err(Error::Topology(format!("root {} out of range {j}", self.root)));
        }
        if self.edges.len() != j - 1 {
            return Err(Error::Topology(format!(
                "{} edges for {j} joints; a tree needs {}",
                self.edges.len(),
                j - 1
            )));
        }
        // union-find connectivity / acyclicity check
        let mut parent: Vec<usize> = (0..j).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            if a >= j || b >= j {
                return Err(Error::Topology(format!("edge ({a},{b}) out of range {j}")));
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                return Err(Error::Topology(format!("edge ({a},{b}) closes a cycle")));
            }
            parent[ra] = rb;
        }
        Ok(())
    }
}

/// 2D joint coordinates (J×2) with an optional per-joint confidence channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub coords: Tensor,
    pub confidence: Option<Vec<f64>>,
}

impl Pose2D {
    pub fn new(coords: Tensor, confidence: Option<Vec<f64>>) -> Result<Self> {
        if coords.rank() != 2 || coords.cols() != 2 {
            return Err(Error::Contract(format!("Pose2D needs J×2, got {:?}", coords.dims())));
        }
        if !coords.all_finite() {
            return Err(Error::Contract("Pose2D coords must be finite".into()));
        }
        if let Some(c) = &confidence {
            if c.len() != coords.rows() {
                return Err(Error::Contract(format!(
                    "confidence length {} vs {} joints",
                    c.len(),
                    coords.rows()
                )));
            }
        }
        Ok(Pose2D { coords, confidence })
    }

    pub fn joint_count(&self) -> usize {
        self.coords.rows()
    }
}

/// 3D joint coordinates (J×3), root-relative millimeters unless stated.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub coords: Tensor,
}

impl Pose3D {
    pub fn new(coords: Tensor) -> Result<Self> {
        if coords.rank() != 2 || coords.cols() != 3 {
            return Err(Error::Contract(format!("Pose3D needs J×3, got {:?}", coords.dims())));
        }
        if !coords.all_finite() {
            return Err(Error::Contract("Pose3D coords must be finite".into()));
        }
        Ok(Pose3D { coords })
    }

    pub fn joint_count(&self) -> usize {
        self.coords.rows()
    }
}

/// Symmetric normalized adjacency with self-loops:
/// Â = D^{-1/2}(A + I)D^{-1/2}, degrees taken from A + I.
pub fn build_adjacency(topology: &SkeletonTopology) -> Result<Tensor> {
    topology.validate()?;
    let j = topology.joint_count();
    let mut a = Tensor::eye(j);
    for &(p, c) in &topology.edges {
        a.set2(p, c, 1.0);
        a.set2(c, p, 1.0);
    }
    let inv_sqrt_deg: Vec<f64> = (0..j)
        .map(|i| 1.0 / a.row_slice(i).iter().sum::<f64>().sqrt())
        .collect();
    let mut out = Tensor::zeros(&[j, j]);
    for r in 0..j {
        for c in 0..j {
            out.set2(r, c, inv_sqrt_deg[r] * a.get2(r, c) * inv_sqrt_deg[c]);
        }
    }
    Ok(out)
}

pub const H36M17: &str = "h36m17";
pub const COCO17: &str = "coco17";

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// 17-joint Human3.6M convention, rooted at the pelvis.
pub fn h36m17_topology() -> SkeletonTopology {
    SkeletonTopology::new(
        H36M17,
        names(&[
            "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine",
            "thorax", "nose", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
            "r_elbow", "r_wrist",
        ]),
        vec![
            (0, 1),
            (1, 2),
            (2, 3),
            (0, 4),
            (4, 5),
            (5, 6),
            (0, 7),
            (7, 8),
            (8, 9),
            (9, 10),
            (8, 11),
            (11, 12),
            (12, 13),
            (8, 14),
            (14, 15),
            (15, 16),
        ],
        0,
    )
    .expect("builtin h36m17 topology is a tree")
}

/// 17-joint COCO keypoint convention, rooted at the nose (COCO's skeleton is
/// not a tree, so shoulder/hip cross-links are dropped in favor of a spanning
/// tree through the nose).
pub fn coco17_topology() -> SkeletonTopology {
    SkeletonTopology::new(
        COCO17,
        names(&[
            "nose", "l_eye", "r_eye", "l_ear", "r_ear", "l_shoulder", "r_shoulder", "l_elbow",
            "r_elbow", "l_wrist", "r_wrist", "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle",
            "r_ankle",
        ]),
        vec![
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
            (0, 5),
            (0, 6),
            (5, 7),
            (7, 9),
            (6, 8),
            (8, 10),
            (5, 11),
            (6, 12),
            (11, 13),
            (13, 15),
            (12, 14),
            (14, 16),
        ],
        0,
    )
    .expect("builtin coco17 topology is a tree")
}

/// The shipped topologies, keyed by name.
pub fn default_topologies() -> std::collections::BTreeMap<String, SkeletonTopology> {
    let mut m = std::collections::BTreeMap::new();
    m.insert(H36M17.to_string(), h36m17_topology());
    m.insert(COCO17.to_string(), coco17_topology());
    m
}

pub fn topology_by_name(name: &str) -> Result<SkeletonTopology> {
    default_topologies()
        .remove(name)
        .ok_or_else(|| Error::Config(format!("unknown topology '{name}'")))
}

// COCO source indices used by the remap below.
const C_NOSE: usize = 0;
const C_LEAR: usize = 3;
const C_REAR: usize = 4;
const C_LSHO: usize = 5;
const C_RSHO: usize = 6;
const C_LELB: usize = 7;
const C_RELB: usize = 8;
const C_LWRI: usize = 9;
const C_RWRI: usize = 10;
const C_LHIP: usize = 11;
const C_RHIP: usize = 12;
const C_LKNE: usize = 13;
const C_RKNE: usize = 14;
const C_LANK: usize = 15;
const C_RANK: usize = 16;

/// Remap a COCO-17 pose to the Human3.6M-17 layout. Joints COCO lacks are
/// synthesized as midpoints (pelvis from the hips, thorax from the
/// shoulders, head from the ears, spine between pelvis and thorax); the
/// confidence of a synthesized joint is the min over its sources.
pub fn map_coco_to_h36m(pose: &Pose2D) -> Result<Pose2D> {
    if pose.joint_count() != 17 {
        return Err(Error::Contract(format!(
            "map_coco_to_h36m needs 17 COCO joints, got {}",
            pose.joint_count()
        )));
    }
    let xy = |i: usize| (pose.coords.get2(i, 0), pose.coords.get2(i, 1));
    let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);

    let pelvis = mid(xy(C_LHIP), xy(C_RHIP));
    let thorax = mid(xy(C_LSHO), xy(C_RSHO));
    let spine = mid(pelvis, thorax);
    let head = mid(xy(C_LEAR), xy(C_REAR));

    let out: [(f64, f64); 17] = [
        pelvis,
        xy(C_RHIP),
        xy(C_RKNE),
        xy(C_RANK),
        xy(C_LHIP),
        xy(C_LKNE),
        xy(C_LANK),
        spine,
        thorax,
        xy(C_NOSE),
        head,
        xy(C_LSHO),
        xy(C_LELB),
        xy(C_LWRI),
        xy(C_RSHO),
        xy(C_RELB),
        xy(C_RWRI),
    ];
    let mut data = Vec::with_capacity(34);
    for (x, y) in out {
        data.push(x);
        data.push(y);
    }

    let confidence = pose.confidence.as_ref().map(|c| {
        let min2 = |a: usize, b: usize| c[a].min(c[b]);
        let pelvis_c = min2(C_LHIP, C_RHIP);
        let thorax_c = min2(C_LSHO, C_RSHO);
        vec![
            pelvis_c,
            c[C_RHIP],
            c[C_RKNE],
            c[C_RANK],
            c[C_LHIP],
            c[C_LKNE],
            c[C_LANK],
            pelvis_c.min(thorax_c),
            thorax_c,
            c[C_NOSE],
            min2(C_LEAR, C_REAR),
            c[C_LSHO],
            c[C_LELB],
            c[C_LWRI],
            c[C_RSHO],
            c[C_RELB],
            c[C_RWRI],
        ]
    });

    Pose2D::new(Tensor::new(vec![17, 2], data)?, confidence)
}
