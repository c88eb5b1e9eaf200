//! The 2D-to-3D lifter (pose analysis module): a per-joint projection of
//! (x, y) into the feature space plus a learned positional embedding, the
//! parallel graph-transformer trunk, and three heads — per-joint 3D
//! coordinates, and shape/camera vectors read from the mean-pooled features.

use crate::error::{Error, Result};
use crate::graph_transformer::{parallel_fuse, ParallelFuseParams, ParallelFuseVars};
use crate::io::config::ModelConfig;
use crate::rng::Rng;
use crate::skeleton::Pose2D;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const CHECKPOINT_PREFIX: &str = "pam.";

#[derive(Debug, Clone)]
pub struct LifterParams {
    pub proj: Tensor,         // 2×D
    pub pos_embed: Tensor,    // J×D
    pub fuse: ParallelFuseParams,
    pub pose_head_w: Tensor,  // D×3
    pub pose_head_b: Tensor,  // 1×3
    pub shape_head_w: Tensor, // D×10
    pub shape_head_b: Tensor, // 1×10
    pub cam_head_w: Tensor,   // D×3
    pub cam_head_b: Tensor,   // 1×3
}

#[derive(Debug, Clone)]
pub struct LifterVars {
    pub proj: Var,
    pub pos_embed: Var,
    pub fuse: ParallelFuseVars,
    pub pose_head_w: Var,
    pub pose_head_b: Var,
    pub shape_head_w: Var,
    pub shape_head_b: Var,
    pub cam_head_w: Var,
    pub cam_head_b: Var,
}

/// Lifter outputs: features F (J×D), root-relative joints P (J×3), shape
/// β (1×10), raw camera C (1×3).
#[derive(Debug, Clone)]
pub struct LifterOutput {
    pub features: Tensor,
    pub joints3d: Tensor,
    pub beta: Tensor,
    pub camera: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LifterOutputVars {
    pub features: Var,
    pub joints3d: Var,
    pub beta: Var,
    pub camera: Var,
}

impl LifterParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let j = cfg.joint_count();
        Ok(LifterParams {
            proj: Tensor::xavier(2, d, rng),
            pos_embed: Tensor::uniform(&[j, d], -0.1, 0.1, rng),
            fuse: ParallelFuseParams::init(d, cfg.branches, cfg.blocks_per_branch, cfg.heads, rng)?,
            pose_head_w: Tensor::xavier(d, 3, rng),
            pose_head_b: Tensor::zeros(&[1, 3]),
            shape_head_w: Tensor::xavier(d, 10, rng),
            shape_head_b: Tensor::zeros(&[1, 10]),
            cam_head_w: Tensor::xavier(d, 3, rng),
            cam_head_b: Tensor::zeros(&[1, 3]),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.cols()
    }

    pub fn joint_count(&self) -> usize {
        self.pos_embed.rows()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LifterVars {
        let proj = bind_tensor(tape, &self.proj, trainable);
        let pos_embed = bind_tensor(tape, &self.pos_embed, trainable);
        let fuse = self.fuse.bind(tape, trainable);
        LifterVars {
            proj,
            pos_embed,
            fuse,
            pose_head_w: bind_tensor(tape, &self.pose_head_w, trainable),
            pose_head_b: bind_tensor(tape, &self.pose_head_b, trainable),
            shape_head_w: bind_tensor(tape, &self.shape_head_w, trainable),
            shape_head_b: bind_tensor(tape, &self.shape_head_b, trainable),
            cam_head_w: bind_tensor(tape, &self.cam_head_w, trainable),
            cam_head_b: bind_tensor(tape, &self.cam_head_b, trainable),
        }
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        let p = CHECKPOINT_PREFIX;
        out.push((format!("{p}proj"), &self.proj));
        out.push((format!("{p}pos_embed"), &self.pos_embed));
        self.fuse.visit(p, out);
        out.push((format!("{p}pose_head_w"), &self.pose_head_w));
        out.push((format!("{p}pose_head_b"), &self.pose_head_b));
        out.push((format!("{p}shape_head_w"), &self.shape_head_w));
        out.push((format!("{p}shape_head_b"), &self.shape_head_b));
        out.push((format!("{p}cam_head_w"), &self.cam_head_w));
        out.push((format!("{p}cam_head_b"), &self.cam_head_b));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        let p = CHECKPOINT_PREFIX;
        out.push((format!("{p}proj"), &mut self.proj));
        out.push((format!("{p}pos_embed"), &mut self.pos_embed));
        self.fuse.visit_mut(p, out);
        out.push((format!("{p}pose_head_w"), &mut self.pose_head_w));
        out.push((format!("{p}pose_head_b"), &mut self.pose_head_b));
        out.push((format!("{p}shape_head_w"), &mut self.shape_head_w));
        out.push((format!("{p}shape_head_b"), &mut self.shape_head_b));
        out.push((format!("{p}cam_head_w"), &mut self.cam_head_w));
        out.push((format!("{p}cam_head_b"), &mut self.cam_head_b));
    }

    /// Handles in `visit` order, for pairing gradients with parameters.
    pub fn vars_in_order(vars: &LifterVars, out: &mut Vec<Var>) {
        out.push(vars.proj);
        out.push(vars.pos_embed);
        ParallelFuseParams::vars_in_order(&vars.fuse, out);
        out.push(vars.pose_head_w);
        out.push(vars.pose_head_b);
        out.push(vars.shape_head_w);
        out.push(vars.shape_head_b);
        out.push(vars.cam_head_w);
        out.push(vars.cam_head_b);
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        let mut named = Vec::new();
        self.visit(&mut named);
        named.into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn from_map(map: &BTreeMap<String, Tensor>, cfg: &ModelConfig) -> Result<Self> {
        let p = CHECKPOINT_PREFIX;
        let get = |name: String| {
            map.get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))
        };
        Ok(LifterParams {
            proj: get(format!("{p}proj"))?,
            pos_embed: get(format!("{p}pos_embed"))?,
            fuse: ParallelFuseParams::from_map(
                p,
                map,
                cfg.branches,
                cfg.blocks_per_branch,
                cfg.heads,
            )?,
            pose_head_w: get(format!("{p}pose_head_w"))?,
            pose_head_b: get(format!("{p}pose_head_b"))?,
            shape_head_w: get(format!("{p}shape_head_w"))?,
            shape_head_b: get(format!("{p}shape_head_b"))?,
            cam_head_w: get(format!("{p}cam_head_w"))?,
            cam_head_b: get(format!("{p}cam_head_b"))?,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut named = Vec::new();
        self.visit(&mut named);
        named.iter().map(|(_, t)| t.numel()).sum()
    }
}

fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Per-joint linear map of (x, y) into D features plus the positional
/// embedding row.
pub fn project_embed(tape: &mut Tape, pose: Var, vars: &LifterVars) -> Result<Var> {
    let pt = tape.value(pose);
    let j = tape.value(vars.pos_embed).rows();
    if pt.rank() != 2 || pt.cols() != 2 || pt.rows() != j {
        return Err(Error::Contract(format!(
            "project_embed: pose {:?} vs {j} joints",
            pt.dims()
        )));
    }
    let x = tape.matmul(pose, vars.proj);
    Ok(tape.add(x, vars.pos_embed))
}

/// Shape and camera heads on mean-pooled features.
pub fn pooled_heads(tape: &mut Tape, features: Var, vars: &LifterVars) -> (Var, Var) {
    let pooled = tape.mean_rows(features);
    let beta = tape.matmul(pooled, vars.shape_head_w);
    let beta = tape.add_row(beta, vars.shape_head_b);
    let cam = tape.matmul(pooled, vars.cam_head_w);
    let cam = tape.add_row(cam, vars.cam_head_b);
    (beta, cam)
}

/// Full lifter: F = trunk(embed(pose)); P from the per-joint head on F;
/// β and C from the pooled heads.
pub fn lifter_forward_on_tape(
    tape: &mut Tape,
    pose: Var,
    adjacency: Var,
    vars: &LifterVars,
) -> Result<LifterOutputVars> {
    let x = project_embed(tape, pose, vars)?;
    let f = parallel_fuse(tape, x, adjacency, &vars.fuse)?;
    let p = tape.matmul(f, vars.pose_head_w);
    let p = tape.add_row(p, vars.pose_head_b);
    let (beta, camera) = pooled_heads(tape, f, vars);
    Ok(LifterOutputVars { features: f, joints3d: p, beta, camera })
}

/// Inference wrapper: runs the forward pass on a fresh tape.
pub fn lifter_forward(
    params: &LifterParams,
    adjacency: &Tensor,
    pose: &Pose2D,
) -> Result<LifterOutput> {
    if pose.joint_count() != params.joint_count() {
        return Err(Error::Contract(format!(
            "lifter configured for {} joints, pose has {}",
            params.joint_count(),
            pose.joint_count()
        )));
    }
    let mut tape = Tape::new();
    let pv = tape.constant(pose.coords.clone());
    let av = tape.constant(adjacency.clone());
    let vars = params.bind(&mut tape, false);
    let out = lifter_forward_on_tape(&mut tape, pv, av, &vars)?;
    Ok(LifterOutput {
        features: tape.value(out.features).clone(),
        joints3d: tape.value(out.joints3d).clone(),
        beta: tape.value(out.beta).clone(),
        camera: tape.value(out.camera).clone(),
    })
}
