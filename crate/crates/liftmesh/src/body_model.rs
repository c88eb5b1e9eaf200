//! Parametric body model: shape blendshapes over a mean template, axis-angle
//! kinematics via the Rodrigues formula, joint regression and linear blend
//! skinning. The whole forward-kinematics path runs on the differentiation
//! tape, so pose and shape gradients come out of the same code inference
//! uses.
//!
//! Pose-dependent blendshapes of the full SMPL model are not implemented;
//! the shape space is the plain 10-coefficient linear one.

use crate::error::{Error, Result};
use crate::io::container::{self, Entry, TensorMap};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Joint count of the standard body (SMPL layout).
pub const SMPL_JOINTS: usize = 24;

pub const SHAPE_COEFFS: usize = 10;

/// Row j is the parent of joint j; -1 marks the root. Parents precede
/// children, so a single forward sweep resolves the kinematic chain.
pub const SMPL_PARENTS: [i64; SMPL_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

#[derive(Debug, Clone)]
pub struct BodyModel {
    pub template: Tensor,        // V×3, meters
    pub shape_dirs: Tensor,      // V×3×10
    pub joint_regressor: Tensor, // K×V
    pub parents: Vec<i64>,       // length K, parents[0] = -1
    pub skin_weights: Tensor,    // V×K, row-stochastic
    pub faces: Option<Vec<[usize; 3]>>,
    dirs_flat: Tensor,           // 10×(3V): row k is blendshape k flattened
    masks: Vec<Tensor>,          // K tensors of V×3: per-joint skin weight, broadcast over xyz
}

impl BodyModel {
    pub fn new(
        template: Tensor,
        shape_dirs: Tensor,
        joint_regressor: Tensor,
        parents: Vec<i64>,
        skin_weights: Tensor,
        faces: Option<Vec<[usize; 3]>>,
    ) -> Result<Self> {
        if template.rank() != 2 || template.cols() != 3 {
            return Err(Error::Contract(format!("template must be V×3, got {:?}", template.dims())));
        }
        let v = template.rows();
        if shape_dirs.dims() != [v, 3, SHAPE_COEFFS] {
            return Err(Error::Contract(format!(
                "shape_dirs must be [{v}, 3, {SHAPE_COEFFS}], got {:?}",
                shape_dirs.dims()
            )));
        }
        let k = parents.len();
        if k == 0 {
            return Err(Error::Contract("at least one joint required".into()));
        }
        if parents[0] != -1 {
            return Err(Error::Contract("parents[0] must be -1 (root)".into()));
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Contract(format!(
                    "parents[{j}] = {p}: parents must precede children in a tree rooted at 0"
                )));
            }
        }
        if joint_regressor.rank() != 2 || joint_regressor.rows() != k || joint_regressor.cols() != v
        {
            return Err(Error::Contract(format!(
                "joint_regressor must be {k}×{v}, got {:?}",
                joint_regressor.dims()
            )));
        }
        if skin_weights.rank() != 2 || skin_weights.rows() != v || skin_weights.cols() != k {
            return Err(Error::Contract(format!(
                "skin_weights must be {v}×{k}, got {:?}",
                skin_weights.dims()
            )));
        }
        for r in 0..v {
            let row = skin_weights.row_slice(r);
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::Contract(format!("skin_weights row {r} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("skin_weights row {r} sums to {sum}")));
            }
        }
        if let Some(fs) = &faces {
            for f in fs {
                if f.iter().any(|&i| i >= v) {
                    return Err(Error::Contract(format!("face {f:?} indexes past {v} vertices")));
                }
            }
        }

        // cache the flattened blendshapes and per-joint skin masks
        let mut flat = Tensor::zeros(&[SHAPE_COEFFS, 3 * v]);
        let sd = shape_dirs.data();
        for vi in 0..v {
            for c in 0..3 {
                for sk in 0..SHAPE_COEFFS {
                    let val = sd[vi * 3 * SHAPE_COEFFS + c * SHAPE_COEFFS + sk];
                    flat.set2(sk, vi * 3 + c, val);
                }
            }
        }
        let masks = (0..k)
            .map(|j| {
                let mut m = Tensor::zeros(&[v, 3]);
                for vi in 0..v {
                    let w = skin_weights.get2(vi, j);
                    for c in 0..3 {
                        m.set2(vi, c, w);
                    }
                }
                m
            })
            .collect();

        Ok(BodyModel {
            template,
            shape_dirs,
            joint_regressor,
            parents,
            skin_weights,
            faces,
            dirs_flat: flat,
            masks,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.template.rows()
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn to_container(&self) -> TensorMap {
        let mut map = TensorMap::new();
        map.insert("body.template".into(), Entry::F64(self.template.clone()));
        map.insert("body.shape_dirs".into(), Entry::F64(self.shape_dirs.clone()));
        map.insert("body.joint_regressor".into(), Entry::F64(self.joint_regressor.clone()));
        map.insert("body.skin_weights".into(), Entry::F64(self.skin_weights.clone()));
        map.insert(
            "body.parents".into(),
            Entry::I64 { dims: vec![self.parents.len()], data: self.parents.clone() },
        );
        if let Some(fs) = &self.faces {
            let data: Vec<i64> = fs.iter().flatten().map(|&i| i as i64).collect();
            map.insert("body.faces".into(), Entry::I64 { dims: vec![fs.len(), 3], data });
        }
        map
    }

    pub fn from_container(map: &TensorMap) -> Result<BodyModel> {
        let get = |name: &str| {
            map.get(name)
                .ok_or_else(|| Error::Format(format!("body asset missing '{name}'")))
        };
        let template = get("body.template")?.as_f64()?.clone();
        let shape_dirs = get("body.shape_dirs")?.as_f64()?.clone();
        let regressor = get("body.joint_regressor")?.as_f64()?.clone();
        let skin = get("body.skin_weights")?.as_f64()?.clone();
        let parents = get("body.parents")?.as_i64()?.to_vec();
        let faces = match map.get("body.faces") {
            None => None,
            Some(e) => {
                let dims = e.dims().to_vec();
                let data = e.as_i64()?;
                if dims.len() != 2 || dims[1] != 3 {
                    return Err(Error::Format(format!("body.faces must be F×3, got {dims:?}")));
                }
                Some(
                    data.chunks_exact(3)
                        .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
                        .collect(),
                )
            }
        };
        BodyModel::new(template, shape_dirs, regressor, parents, skin, faces)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        container::save_checkpoint(path, &self.to_container())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<BodyModel> {
        BodyModel::from_container(&container::load_checkpoint(path)?)
    }
}

/// Axis-angle pose of the standard 24-joint body (one row per joint).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTheta {
    pub axis_angle: Tensor, // 24×3
}

impl PoseTheta {
    pub fn new(t: Tensor) -> Result<Self> {
        if !t.all_finite() {
            return Err(Error::Contract("pose angles must be finite".into()));
        }
        let t = if t.numel() == SMPL_JOINTS * 3 {
            t.reshaped(vec![SMPL_JOINTS, 3])?
        } else {
            return Err(Error::Contract(format!(
                "pose needs {} values, got {:?}",
                SMPL_JOINTS * 3,
                t.dims()
            )));
        };
        Ok(PoseTheta { axis_angle: t })
    }

    pub fn zeros() -> Self {
        PoseTheta { axis_angle: Tensor::zeros(&[SMPL_JOINTS, 3]) }
    }

    /// Flattened length-72 view.
    pub fn flat(&self) -> Tensor {
        self.axis_angle.reshaped(vec![SMPL_JOINTS * 3]).unwrap()
    }

    /// Indices of joints rotated beyond 2π; callers may want to warn.
    pub fn large_rotation_rows(&self) -> Vec<usize> {
        (0..SMPL_JOINTS)
            .filter(|&j| {
                let r = self.axis_angle.row_slice(j);
                (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt() > std::f64::consts::TAU
            })
            .collect()
    }
}

/// Pipeline output record: posed mesh plus the parameters that produced it.
#[derive(Debug, Clone)]
pub struct MeshResult {
    pub vertices: Tensor, // V×3
    pub joints: Tensor,   // K×3 posed body joints
    pub theta: Tensor,    // K×3
    pub beta: Tensor,     // 1×10
    /// Raw camera vector (s, t_x, t_y) when produced by the full pipeline.
    pub camera: Option<Tensor>,
    /// Lifter's 3D joint prediction (J×3) when produced by the full pipeline.
    pub joints3d: Option<Tensor>,
}

/// Constant handles for one body model bound to a tape.
pub struct FkConsts {
    pub template: Var,
    pub dirs_flat: Var,
    pub regressor: Var,
    pub masks: Vec<Var>,
    pub parents: Vec<i64>,
}

impl BodyModel {
    pub fn bind_fk(&self, tape: &mut Tape) -> FkConsts {
        FkConsts {
            template: tape.constant(self.template.clone()),
            dirs_flat: tape.constant(self.dirs_flat.clone()),
            regressor: tape.constant(self.joint_regressor.clone()),
            masks: self.masks.iter().map(|m| tape.constant(m.clone())).collect(),
            parents: self.parents.clone(),
        }
    }
}

/// Rotation matrix from an axis-angle row (1×3) via the Rodrigues formula,
/// with a series guard for small angles (the sin θ/θ and (1-cos θ)/θ² factors
/// switch to their Taylor forms below θ² = 1e-8 to dodge 0/0 and
/// cancellation).
pub fn rodrigues_on_tape(tape: &mut Tape, v_row: Var) -> Var {
    assert_eq!(tape.value(v_row).dims(), &[1, 3], "rodrigues needs a 1×3 row");
    let vt = tape.transpose(v_row);
    let vx = tape.slice_rows(vt, 0, 1);
    let vy = tape.slice_rows(vt, 1, 1);
    let vz = tape.slice_rows(vt, 2, 1);

    let gx = tape.constant(
        Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap(),
    );
    let gy = tape.constant(
        Tensor::new(vec![3, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap(),
    );
    let gz = tape.constant(
        Tensor::new(vec![3, 3], vec![0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
    );
    let kx = tape.mul_scalar(vx, gx);
    let ky = tape.mul_scalar(vy, gy);
    let kz = tape.mul_scalar(vz, gz);
    let k1 = tape.add(kx, ky);
    let k_mat = tape.add(k1, kz);

    let sq = tape.mul(v_row, v_row);
    let theta_sq = tape.sum_all(sq);

    let (c1, c2) = if tape.value(theta_sq).item() < 1e-8 {
        let a = tape.scale(theta_sq, -1.0 / 6.0);
        let c1 = tape.add_const(a, 1.0);
        let b = tape.scale(theta_sq, -1.0 / 24.0);
        let c2 = tape.add_const(b, 0.5);
        (c1, c2)
    } else {
        let theta = tape.sqrt(theta_sq);
        let s = tape.sin(theta);
        let c = tape.cos(theta);
        let c1 = tape.div(s, theta);
        let nc = tape.neg(c);
        let omc = tape.add_const(nc, 1.0);
        let c2 = tape.div(omc, theta_sq);
        (c1, c2)
    };

    let kk = tape.matmul(k_mat, k_mat);
    let t1 = tape.mul_scalar(c1, k_mat);
    let t2 = tape.mul_scalar(c2, kk);
    let eye = tape.constant(Tensor::eye(3));
    let s1 = tape.add(eye, t1);
    tape.add(s1, t2)
}

/// Rotation matrix from a length-3 axis-angle vector.
pub fn rodrigues(v: &Tensor) -> Result<Tensor> {
    if v.numel() != 3 || !v.all_finite() {
        return Err(Error::Contract(format!("rodrigues needs 3 finite values, got {:?}", v.dims())));
    }
    let mut tape = Tape::new();
    let row = tape.constant(v.reshaped(vec![1, 3])?);
    let r = rodrigues_on_tape(&mut tape, row);
    Ok(tape.value(r).clone())
}

pub fn apply_shape_on_tape(tape: &mut Tape, consts: &FkConsts, beta: Var) -> Var {
    let v = tape.value(consts.template).rows();
    let offset_flat = tape.matmul(beta, consts.dirs_flat);
    let offset = tape.reshape(offset_flat, vec![v, 3]);
    tape.add(consts.template, offset)
}

/// Shaped vertices: template + Σ_k β_k · blendshape_k.
pub fn apply_shape(model: &BodyModel, beta: &Tensor) -> Result<Tensor> {
    let beta = beta_row(beta)?;
    let mut tape = Tape::new();
    let consts = model.bind_fk(&mut tape);
    let b = tape.constant(beta);
    let out = apply_shape_on_tape(&mut tape, &consts, b);
    Ok(tape.value(out).clone())
}

fn beta_row(beta: &Tensor) -> Result<Tensor> {
    if beta.numel() != SHAPE_COEFFS {
        return Err(Error::Contract(format!(
            "beta needs {SHAPE_COEFFS} values, got {:?}",
            beta.dims()
        )));
    }
    beta.reshaped(vec![1, SHAPE_COEFFS])
}

/// Joint positions regressed from vertices: joint_regressor · vertices.
pub fn regress_joints(model: &BodyModel, vertices: &Tensor) -> Result<Tensor> {
    if vertices.rank() != 2
        || vertices.rows() != model.vertex_count()
        || vertices.cols() != 3
    {
        return Err(Error::Contract(format!(
            "regress_joints: vertices {:?} vs model V = {}",
            vertices.dims(),
            model.vertex_count()
        )));
    }
    Ok(model.joint_regressor.matmul(vertices))
}

/// Forward kinematics + linear blend skinning on the tape.
/// `theta` is K×3 axis-angle rows, `beta` is the 1×10 shape row.
/// Returns (posed vertices V×3, posed joints K×3).
pub fn fk_on_tape(tape: &mut Tape, consts: &FkConsts, theta: Var, beta: Var) -> (Var, Var) {
    let k = consts.parents.len();
    assert_eq!(tape.value(theta).dims(), &[k, 3], "theta must be K×3");

    let shaped = apply_shape_on_tape(tape, consts, beta);
    let j_rest = tape.matmul(consts.regressor, shaped);

    let mut r_world: Vec<Var> = Vec::with_capacity(k);
    let mut pos: Vec<Var> = Vec::with_capacity(k);
    for j in 0..k {
        let row = tape.slice_rows(theta, j, 1);
        let r_local = rodrigues_on_tape(tape, row);
        if j == 0 {
            r_world.push(r_local);
            pos.push(tape.slice_rows(j_rest, 0, 1));
        } else {
            let parent = consts.parents[j] as usize;
            r_world.push(tape.matmul(r_world[parent], r_local));
            let jj = tape.slice_rows(j_rest, j, 1);
            let jp = tape.slice_rows(j_rest, parent, 1);
            let d = tape.sub(jj, jp);
            let dt = tape.transpose(d);
            let rot = tape.matmul(r_world[parent], dt);
            let rot_row = tape.transpose(rot);
            pos.push(tape.add(pos[parent], rot_row));
        }
    }

    // v' = Σ_j w_vj · (R_j·(v) + (p_j − R_j·J_j)), accumulated with per-joint masks
    let mut posed: Option<Var> = None;
    for j in 0..k {
        let jj = tape.slice_rows(j_rest, j, 1);
        let jjt = tape.transpose(jj);
        let rj = tape.matmul(r_world[j], jjt);
        let rj_row = tape.transpose(rj);
        let tj = tape.sub(pos[j], rj_row);
        let rwt = tape.transpose(r_world[j]);
        let xj = tape.matmul(shaped, rwt);
        let xj = tape.add_row(xj, tj);
        let term = tape.mul(xj, consts.masks[j]);
        posed = Some(match posed {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }

    let mut joints = pos[0];
    for p in pos.iter().skip(1) {
        joints = tape.concat_rows(joints, *p);
    }
    (posed.expect("at least one joint"), joints)
}

/// Pose and skin the model: shape blendshapes, joint regression, kinematic
/// chain, linear blend skinning.
pub fn forward_kinematics_lbs(model: &BodyModel, theta: &Tensor, beta: &Tensor) -> Result<MeshResult> {
    let k = model.joint_count();
    let theta = if theta.numel() == k * 3 {
        theta.reshaped(vec![k, 3])?
    } else {
        return Err(Error::Contract(format!(
            "theta needs {} values for {k} joints, got {:?}",
            k * 3,
            theta.dims()
        )));
    };
    if !theta.all_finite() {
        return Err(Error::Contract("theta must be finite".into()));
    }
    let beta = beta_row(beta)?;

    let mut tape = Tape::new();
    let consts = model.bind_fk(&mut tape);
    let tv = tape.constant(theta.clone());
    let bv = tape.constant(beta.clone());
    let (verts, joints) = fk_on_tape(&mut tape, &consts, tv, bv);
    Ok(MeshResult {
        vertices: tape.value(verts).clone(),
        joints: tape.value(joints).clone(),
        theta,
        beta,
        camera: None,
        joints3d: None,
    })
}

/// Linear map from the 24 body joints to the 17-joint Human3.6M layout
/// (one-hot rows except the nose, which sits midway between neck and head).
pub fn h36m17_joint_map() -> Tensor {
    let mut m = Tensor::zeros(&[17, SMPL_JOINTS]);
    // (h36m joint, smpl joint): pelvis, hips, knees, ankles, spine, thorax,
    // head, shoulders, elbows, wrists
    let one_hot = [
        (0, 0),
        (1, 2),
        (2, 5),
        (3, 8),
        (4, 1),
        (5, 4),
        (6, 7),
        (7, 6),
        (8, 12),
        (10, 15),
        (11, 16),
        (12, 18),
        (13, 20),
        (14, 17),
        (15, 19),
        (16, 21),
    ];
    for (h, s) in one_hot {
        m.set2(h, s, 1.0);
    }
    m.set2(9, 12, 0.5); // nose: between neck…
    m.set2(9, 15, 0.5); // …and head
    m
}

// Rest joint positions of the desk body (meters, y up).
const DESK_JOINTS: [(f64, f64, f64); SMPL_JOINTS] = [
    (0.0, 0.0, 0.0),      // pelvis
    (0.09, -0.06, 0.0),   // l_hip
    (-0.09, -0.06, 0.0),  // r_hip
    (0.0, 0.10, 0.0),     // spine1
    (0.10, -0.45, 0.0),   // l_knee
    (-0.10, -0.45, 0.0),  // r_knee
    (0.0, 0.22, 0.0),     // spine2
    (0.10, -0.85, 0.0),   // l_ankle
    (-0.10, -0.85, 0.0),  // r_ankle
    (0.0, 0.32, 0.0),     // spine3
    (0.12, -0.90, 0.12),  // l_foot
    (-0.12, -0.90, 0.12), // r_foot
    (0.0, 0.45, 0.0),     // neck
    (0.06, 0.40, 0.0),    // l_collar
    (-0.06, 0.40, 0.0),   // r_collar
    (0.0, 0.58, 0.0),     // head
    (0.18, 0.40, 0.0),    // l_shoulder
    (-0.18, 0.40, 0.0),   // r_shoulder
    (0.42, 0.40, 0.0),    // l_elbow
    (-0.42, 0.40, 0.0),   // r_elbow
    (0.65, 0.40, 0.0),    // l_wrist
    (-0.65, 0.40, 0.0),   // r_wrist
    (0.72, 0.40, 0.0),    // l_hand
    (-0.72, 0.40, 0.0),   // r_hand
];

/// Deterministic desk-scale pseudo-body: 24 joints in the standard layout,
/// `vertex_count` vertices arranged in rings around the joints (so the
/// one-hot-per-ring joint regressor recovers the ring centers exactly), and
/// dyadic skin weights whose rows sum to exactly 1.0.
pub fn desk_model(vertex_count: usize, seed: u64) -> Result<BodyModel> {
    if vertex_count < 2 * SMPL_JOINTS {
        return Err(Error::Config(format!(
            "desk model needs at least {} vertices, got {vertex_count}",
            2 * SMPL_JOINTS
        )));
    }
    let mut rng = Rng::new(seed);

    // distribute vertices over joints
    let base = vertex_count / SMPL_JOINTS;
    let extra = vertex_count % SMPL_JOINTS;
    let counts: Vec<usize> = (0..SMPL_JOINTS)
        .map(|j| base + usize::from(j < extra))
        .collect();

    let mut verts = Vec::with_capacity(vertex_count * 3);
    let mut skin = Tensor::zeros(&[vertex_count, SMPL_JOINTS]);
    let mut regressor = Tensor::zeros(&[SMPL_JOINTS, vertex_count]);
    let mut faces: Vec<[usize; 3]> = Vec::new();

    let mut vi = 0;
    for (j, &(jx, jy, jz)) in DESK_JOINTS.iter().enumerate() {
        let n = counts[j];
        let radius = 0.04 + 0.012 * ((j * 7) % 5) as f64;
        let ring_start = vi;
        // blend the trailing third of each ring toward the parent joint
        let blended = if j == 0 { 0 } else { n / 3 };
        for ki in 0..n {
            let phi = std::f64::consts::TAU * ki as f64 / n as f64;
            verts.push(jx + radius * phi.cos());
            verts.push(jy);
            verts.push(jz + radius * phi.sin());
            if ki >= n - blended {
                skin.set2(vi, j, 0.75);
                skin.set2(vi, SMPL_PARENTS[j] as usize, 0.25);
            } else {
                skin.set2(vi, j, 1.0);
            }
            regressor.set2(j, vi, 1.0 / n as f64);
            vi += 1;
        }
        if n >= 3 {
            for ki in 1..n - 1 {
                faces.push([ring_start, ring_start + ki, ring_start + ki + 1]);
            }
        }
    }

    let template = Tensor::new(vec![vertex_count, 3], verts)?;
    let dirs_data: Vec<f64> = (0..vertex_count * 3 * SHAPE_COEFFS)
        .map(|_| rng.uniform(-0.01, 0.01))
        .collect();
    let shape_dirs = Tensor::new(vec![vertex_count, 3, SHAPE_COEFFS], dirs_data)?;

    BodyModel::new(
        template,
        shape_dirs,
        regressor,
        SMPL_PARENTS.to_vec(),
        skin,
        Some(faces),
    )
}
