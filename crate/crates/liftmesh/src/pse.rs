//! Pose and shape estimator: a pose branch (lifter features or 3D joints,
//! per the configured source mode) and a mean-mesh template-token branch run
//! through the same transformer architecture, fused by row concatenation,
//! then an iterative regressor refines the 72 body pose angles from zero.
//!
//! Both branches use full attention: the "graph" is complete, so the
//! normalized adjacency is uniform.

use crate::body_model::{fk_on_tape, BodyModel, MeshResult, SMPL_JOINTS};
use crate::error::{Error, Result};
use crate::graph_transformer::{gt_block_forward, GtBlockParams, GtBlockVars};
use crate::io::config::{ModelConfig, SourceMode};
use crate::io::container::{self, Entry, TensorMap};
use crate::lifter::{lifter_forward_on_tape, LifterOutputVars, LifterParams, LifterVars};
use crate::rng::Rng;
use crate::skeleton::{build_adjacency, Pose2D, SkeletonTopology};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const CHECKPOINT_PREFIX: &str = "pse.";
pub const THETA_DIM: usize = SMPL_JOINTS * 3;
const HIDDEN: usize = 256;

/// Regressor MLP: (D+72) → 256 → 256 → 72 with GELU between layers.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

#[derive(Debug, Clone)]
pub struct PseParams {
    /// D×D (features mode) or 3×D (joints mode).
    pub adapter: Tensor,
    /// Template vertex subsample, length T.
    pub template_idx: Vec<usize>,
    /// 3×D projection of template vertices into the feature space.
    pub template_proj: Tensor,
    pub pose_branch: Vec<GtBlockParams>,
    /// None = template branch shares the pose branch weights.
    pub template_branch: Option<Vec<GtBlockParams>>,
    pub regressor: MlpParams,
    pub n_iter: usize,
}

#[derive(Debug, Clone)]
pub struct PseVars {
    pub adapter: Var,
    pub template_tokens_raw: Var, // constant T×3 gathered template vertices
    pub template_proj: Var,
    pub pose_branch: Vec<GtBlockVars>,
    pub template_branch: Vec<GtBlockVars>,
    pub regressor: MlpVars,
    tied: bool,
}

/// The θ sequence produced by iterative regression: n_iter+1 entries
/// starting at zero.
#[derive(Debug, Clone)]
pub struct RegressionTrace {
    pub thetas: Vec<crate::body_model::PoseTheta>,
}

impl PseParams {
    pub fn init(cfg: &ModelConfig, body: &BodyModel, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let adapter = match cfg.source_mode {
            SourceMode::Features => Tensor::xavier(d, d, rng),
            SourceMode::Joints => Tensor::xavier(3, d, rng),
        };
        let template_idx = uniform_stride_indices(body.vertex_count(), cfg.template_tokens);
        let pose_branch = (0..cfg.pse_blocks)
            .map(|_| GtBlockParams::init(d, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let template_branch = if cfg.tie_branch_weights {
            None
        } else {
            Some(
                (0..cfg.pse_blocks)
                    .map(|_| GtBlockParams::init(d, cfg.heads, rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        Ok(PseParams {
            adapter,
            template_idx,
            template_proj: Tensor::xavier(3, d, rng),
            pose_branch,
            template_branch,
            regressor: MlpParams {
                w1: Tensor::xavier(d + THETA_DIM, HIDDEN, rng),
                b1: Tensor::zeros(&[1, HIDDEN]),
                w2: Tensor::xavier(HIDDEN, HIDDEN, rng),
                b2: Tensor::zeros(&[1, HIDDEN]),
                // small final layer keeps the first residual steps gentle
                w3: Tensor::xavier(HIDDEN, THETA_DIM, rng).scale(0.01),
                b3: Tensor::zeros(&[1, THETA_DIM]),
            },
            n_iter: cfg.n_iter,
        })
    }

    pub fn dim(&self) -> usize {
        self.adapter.cols()
    }

    pub fn template_count(&self) -> usize {
        self.template_idx.len()
    }

    pub fn source_mode(&self) -> SourceMode {
        if self.adapter.rows() == 3 {
            SourceMode::Joints
        } else {
            SourceMode::Features
        }
    }

    pub fn bind(&self, tape: &mut Tape, body: &BodyModel, trainable: bool) -> Result<PseVars> {
        let gathered = gather_template(body, &self.template_idx)?;
        let adapter = bind_tensor(tape, &self.adapter, trainable);
        let template_proj = bind_tensor(tape, &self.template_proj, trainable);
        let pose_branch: Vec<GtBlockVars> =
            self.pose_branch.iter().map(|b| b.bind(tape, trainable)).collect();
        let template_branch = match &self.template_branch {
            Some(blocks) => blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            None => pose_branch.clone(), // tied: same handles, gradients accumulate
        };
        let regressor = MlpVars {
            w1: bind_tensor(tape, &self.regressor.w1, trainable),
            b1: bind_tensor(tape, &self.regressor.b1, trainable),
            w2: bind_tensor(tape, &self.regressor.w2, trainable),
            b2: bind_tensor(tape, &self.regressor.b2, trainable),
            w3: bind_tensor(tape, &self.regressor.w3, trainable),
            b3: bind_tensor(tape, &self.regressor.b3, trainable),
        };
        Ok(PseVars {
            adapter,
            template_tokens_raw: tape.constant(gathered),
            template_proj,
            pose_branch,
            template_branch,
            regressor,
            tied: self.template_branch.is_none(),
        })
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        let p = CHECKPOINT_PREFIX;
        out.push((format!("{p}adapter"), &self.adapter));
        out.push((format!("{p}template_proj"), &self.template_proj));
        for (k, b) in self.pose_branch.iter().enumerate() {
            b.visit(&format!("{p}pose_branch.{k}."), out);
        }
        if let Some(blocks) = &self.template_branch {
            for (k, b) in blocks.iter().enumerate() {
                b.visit(&format!("{p}template_branch.{k}."), out);
            }
        }
        out.push((format!("{p}reg.w1"), &self.regressor.w1));
        out.push((format!("{p}reg.b1"), &self.regressor.b1));
        out.push((format!("{p}reg.w2"), &self.regressor.w2));
        out.push((format!("{p}reg.b2"), &self.regressor.b2));
        out.push((format!("{p}reg.w3"), &self.regressor.w3));
        out.push((format!("{p}reg.b3"), &self.regressor.b3));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        let p = CHECKPOINT_PREFIX;
        out.push((format!("{p}adapter"), &mut self.adapter));
        out.push((format!("{p}template_proj"), &mut self.template_proj));
        for (k, b) in self.pose_branch.iter_mut().enumerate() {
            b.visit_mut(&format!("{p}pose_branch.{k}."), out);
        }
        if let Some(blocks) = &mut self.template_branch {
            for (k, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("{p}template_branch.{k}."), out);
            }
        }
        out.push((format!("{p}reg.w1"), &mut self.regressor.w1));
        out.push((format!("{p}reg.b1"), &mut self.regressor.b1));
        out.push((format!("{p}reg.w2"), &mut self.regressor.w2));
        out.push((format!("{p}reg.b2"), &mut self.regressor.b2));
        out.push((format!("{p}reg.w3"), &mut self.regressor.w3));
        out.push((format!("{p}reg.b3"), &mut self.regressor.b3));
    }

    pub fn vars_in_order(vars: &PseVars, out: &mut Vec<Var>) {
        out.push(vars.adapter);
        out.push(vars.template_proj);
        for b in &vars.pose_branch {
            GtBlockParams::vars_in_order(b, out);
        }
        if !vars.tied {
            for b in &vars.template_branch {
                GtBlockParams::vars_in_order(b, out);
            }
        }
        out.push(vars.regressor.w1);
        out.push(vars.regressor.b1);
        out.push(vars.regressor.w2);
        out.push(vars.regressor.b2);
        out.push(vars.regressor.w3);
        out.push(vars.regressor.b3);
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        let mut named = Vec::new();
        self.visit(&mut named);
        named.into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn from_map(
        map: &BTreeMap<String, Tensor>,
        cfg: &ModelConfig,
        template_idx: Vec<usize>,
    ) -> Result<Self> {
        let p = CHECKPOINT_PREFIX;
        let get = |name: String| {
            map.get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))
        };
        let pose_branch = (0..cfg.pse_blocks)
            .map(|k| GtBlockParams::from_map(&format!("{p}pose_branch.{k}."), map, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let template_branch = if cfg.tie_branch_weights {
            None
        } else {
            Some(
                (0..cfg.pse_blocks)
                    .map(|k| {
                        GtBlockParams::from_map(&format!("{p}template_branch.{k}."), map, cfg.heads)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        Ok(PseParams {
            adapter: get(format!("{p}adapter"))?,
            template_idx,
            template_proj: get(format!("{p}template_proj"))?,
            pose_branch,
            template_branch,
            regressor: MlpParams {
                w1: get(format!("{p}reg.w1"))?,
                b1: get(format!("{p}reg.b1"))?,
                w2: get(format!("{p}reg.w2"))?,
                b2: get(format!("{p}reg.b2"))?,
                w3: get(format!("{p}reg.w3"))?,
                b3: get(format!("{p}reg.b3"))?,
            },
            n_iter: cfg.n_iter,
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

/// Evenly spread `t` indices over `v` vertices.
pub fn uniform_stride_indices(v: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| i * v / t).collect()
}

/// Select the template-token vertices (mean mesh, β = 0).
pub fn gather_template(body: &BodyModel, idx: &[usize]) -> Result<Tensor> {
    if idx.is_empty() {
        return Err(Error::Contract("template subsample must not be empty".into()));
    }
    let v = body.vertex_count();
    let mut data = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        if i >= v {
            return Err(Error::Contract(format!("template index {i} out of {v} vertices")));
        }
        data.extend_from_slice(body.template.row_slice(i));
    }
    Tensor::new(vec![idx.len(), 3], data)
}

/// Template tokens on the tape: gathered T×3 vertices times the 3×D
/// projection.
pub fn template_tokens_on_tape(tape: &mut Tape, vars: &PseVars) -> Var {
    tape.matmul(vars.template_tokens_raw, vars.template_proj)
}

/// Template tokens as a plain tensor.
pub fn template_tokens(body: &BodyModel, params: &PseParams) -> Result<Tensor> {
    let gathered = gather_template(body, &params.template_idx)?;
    Ok(gathered.matmul(&params.template_proj))
}

fn uniform_adjacency(tape: &mut Tape, n: usize) -> Var {
    tape.constant(Tensor::filled(&[n, n], 1.0 / n as f64))
}

/// Two-branch forward: adapt the pose input to J×D, build T×D template
/// tokens, run each branch through its transformer stack with full
/// attention, and concatenate the rows to (J+T)×D.
pub fn pse_forward_on_tape(tape: &mut Tape, pose_input: Var, vars: &PseVars) -> Result<Var> {
    let inp = tape.value(pose_input);
    let in_dim = tape.value(vars.adapter).rows();
    if inp.rank() != 2 || inp.cols() != in_dim {
        return Err(Error::Config(format!(
            "pose input {:?} does not match the configured source mode (adapter expects {} columns)",
            inp.dims(),
            in_dim
        )));
    }
    let j = inp.rows();
    let t = tape.value(vars.template_tokens_raw).rows();

    let mut pose_h = tape.matmul(pose_input, vars.adapter);
    let pose_adj = uniform_adjacency(tape, j);
    for b in &vars.pose_branch {
        pose_h = gt_block_forward(tape, pose_h, pose_adj, b)?;
    }

    let mut tmpl_h = template_tokens_on_tape(tape, vars);
    let tmpl_adj = uniform_adjacency(tape, t);
    for b in &vars.template_branch {
        tmpl_h = gt_block_forward(tape, tmpl_h, tmpl_adj, b)?;
    }

    Ok(tape.concat_rows(pose_h, tmpl_h))
}

/// Iterative 3D regression: θ_0 = 0; θ_i = θ_{i−1} + MLP(pooled ⊕ θ_{i−1}).
/// Returns the full trace; the final entry is the predicted θ ∈ R^72.
pub fn iterative_regress_on_tape(
    tape: &mut Tape,
    fused: Var,
    vars: &PseVars,
    n_iter: usize,
) -> Vec<Var> {
    let pooled = tape.mean_rows(fused);
    let mut theta = tape.constant(Tensor::zeros(&[1, THETA_DIM]));
    let mut trace = vec![theta];
    for _ in 0..n_iter {
        let inp = tape.concat_cols(pooled, theta);
        let h = tape.matmul(inp, vars.regressor.w1);
        let h = tape.add_row(h, vars.regressor.b1);
        let h = tape.gelu(h);
        let h2 = tape.matmul(h, vars.regressor.w2);
        let h2 = tape.add_row(h2, vars.regressor.b2);
        let h2 = tape.gelu(h2);
        let delta = tape.matmul(h2, vars.regressor.w3);
        let delta = tape.add_row(delta, vars.regressor.b3);
        theta = tape.add(theta, delta);
        trace.push(theta);
    }
    trace
}

/// Direct form: fused features in, θ trace out.
pub fn iterative_regress(fused: &Tensor, params: &PseParams, body: &BodyModel) -> Result<RegressionTrace> {
    let mut tape = Tape::new();
    let fv = tape.constant(fused.clone());
    let vars = params.bind(&mut tape, body, false)?;
    let trace = iterative_regress_on_tape(&mut tape, fv, &vars, params.n_iter);
    let thetas = trace
        .iter()
        .map(|v| crate::body_model::PoseTheta::new(tape.value(*v).clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegressionTrace { thetas })
}

/// Direct form of the two-branch fusion.
pub fn pse_forward(pose_input: &Tensor, body: &BodyModel, params: &PseParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = tape.constant(pose_input.clone());
    let vars = params.bind(&mut tape, body, false)?;
    let out = pse_forward_on_tape(&mut tape, pv, &vars)?;
    Ok(tape.value(out).clone())
}

/// Everything the full pipeline produces on a tape.
pub struct PipelineVars {
    pub lifter: LifterOutputVars,
    pub fused: Var,
    pub theta_trace: Vec<Var>,
    /// Final pose angles reshaped to K×3.
    pub theta: Var,
    pub vertices: Var,
    pub joints: Var,
}

/// Compose lifter → PSE → iterative regression → forward kinematics on one
/// tape.
pub fn pipeline_on_tape(
    tape: &mut Tape,
    pose: Var,
    adjacency: Var,
    lifter_vars: &LifterVars,
    pse_vars: &PseVars,
    fk: &crate::body_model::FkConsts,
    source_mode: SourceMode,
    n_iter: usize,
) -> Result<PipelineVars> {
    if fk.parents.len() != SMPL_JOINTS {
        return Err(Error::Config(format!(
            "pipeline body must have {SMPL_JOINTS} joints, got {}",
            fk.parents.len()
        )));
    }
    let lifter = lifter_forward_on_tape(tape, pose, adjacency, lifter_vars)?;
    let pose_input = match source_mode {
        SourceMode::Features => lifter.features,
        SourceMode::Joints => lifter.joints3d,
    };
    let fused = pse_forward_on_tape(tape, pose_input, pse_vars)?;
    let theta_trace = iterative_regress_on_tape(tape, fused, pse_vars, n_iter);
    let theta_flat = *theta_trace.last().expect("trace never empty");
    let theta = tape.reshape(theta_flat, vec![SMPL_JOINTS, 3]);
    let (vertices, joints) = fk_on_tape(tape, fk, theta, lifter.beta);
    Ok(PipelineVars { lifter, fused, theta_trace, theta, vertices, joints })
}

/// The full parameter bundle plus its architecture description; what a
/// checkpoint file holds.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub cfg: ModelConfig,
    pub lifter: LifterParams,
    pub pse: PseParams,
}

impl PipelineParams {
    pub fn init(cfg: &ModelConfig, body: &BodyModel, rng: &mut Rng) -> Result<Self> {
        Ok(PipelineParams {
            cfg: cfg.clone(),
            lifter: LifterParams::init(cfg, rng)?,
            pse: PseParams::init(cfg, body, rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.lifter.param_count() + self.pse.param_count()
    }

    pub fn to_container(&self) -> TensorMap {
        let mut map = container::from_f64_map(&self.lifter.to_map());
        for (k, v) in container::from_f64_map(&self.pse.to_map()) {
            map.insert(k, v);
        }
        let c = &self.cfg;
        map.insert(
            "pse.template_idx".into(),
            Entry::I64 {
                dims: vec![self.pse.template_idx.len()],
                data: self.pse.template_idx.iter().map(|&i| i as i64).collect(),
            },
        );
        map.insert("meta.d".into(), container::scalar_i64(c.dim as i64));
        map.insert("meta.branches".into(), container::scalar_i64(c.branches as i64));
        map.insert(
            "meta.blocks_per_branch".into(),
            container::scalar_i64(c.blocks_per_branch as i64),
        );
        map.insert("meta.heads".into(), container::scalar_i64(c.heads as i64));
        map.insert("meta.pse_blocks".into(), container::scalar_i64(c.pse_blocks as i64));
        map.insert(
            "meta.template_tokens".into(),
            container::scalar_i64(c.template_tokens as i64),
        );
        map.insert("meta.n_iter".into(), container::scalar_i64(c.n_iter as i64));
        map.insert(
            "meta.source_mode".into(),
            container::scalar_i64(match c.source_mode {
                SourceMode::Features => 0,
                SourceMode::Joints => 1,
            }),
        );
        map.insert(
            "meta.tie_branch_weights".into(),
            container::scalar_i64(c.tie_branch_weights as i64),
        );
        map.insert("meta.seed".into(), container::scalar_i64(c.seed as i64));
        map.insert("meta.body_vertices".into(), container::scalar_i64(c.body_vertices as i64));
        map.insert("meta.body_seed".into(), container::scalar_i64(c.body_seed as i64));
        map.insert("meta.topology_name".into(), container::string_entry(&c.topology.name));
        map.insert(
            "meta.topology_joint_names".into(),
            container::string_entry(&c.topology.joint_names.join(",")),
        );
        let edges: Vec<i64> = c
            .topology
            .edges
            .iter()
            .flat_map(|&(a, b)| [a as i64, b as i64])
            .collect();
        map.insert(
            "meta.topology_edges".into(),
            Entry::I64 { dims: vec![c.topology.edges.len(), 2], data: edges },
        );
        map.insert("meta.topology_root".into(), container::scalar_i64(c.topology.root as i64));
        map
    }

    pub fn from_container(map: &TensorMap) -> Result<Self> {
        let geti = |name: &str| container::get_scalar_i64(map, name).map(|v| v as usize);
        let name = container::get_string(map, "meta.topology_name")?;
        let joint_names: Vec<String> = container::get_string(map, "meta.topology_joint_names")?
            .split(',')
            .map(|s| s.to_string())
            .collect();
        let edges_entry = map
            .get("meta.topology_edges")
            .ok_or_else(|| Error::Format("checkpoint missing 'meta.topology_edges'".into()))?;
        let edges: Vec<(usize, usize)> = edges_entry
            .as_i64()?
            .chunks_exact(2)
            .map(|c| (c[0] as usize, c[1] as usize))
            .collect();
        let topology =
            SkeletonTopology::new(name, joint_names, edges, geti("meta.topology_root")?)?;
        let cfg = ModelConfig {
            topology,
            dim: geti("meta.d")?,
            branches: geti("meta.branches")?,
            blocks_per_branch: geti("meta.blocks_per_branch")?,
            heads: geti("meta.heads")?,
            pse_blocks: geti("meta.pse_blocks")?,
            template_tokens: geti("meta.template_tokens")?,
            n_iter: geti("meta.n_iter")?,
            source_mode: match container::get_scalar_i64(map, "meta.source_mode")? {
                0 => SourceMode::Features,
                1 => SourceMode::Joints,
                v => return Err(Error::Format(format!("bad meta.source_mode {v}"))),
            },
            tie_branch_weights: container::get_scalar_i64(map, "meta.tie_branch_weights")? != 0,
            seed: container::get_scalar_i64(map, "meta.seed")? as u64,
            body_vertices: geti("meta.body_vertices")?,
            body_seed: container::get_scalar_i64(map, "meta.body_seed")? as u64,
        };
        cfg.validate()?;
        let template_idx: Vec<usize> = map
            .get("pse.template_idx")
            .ok_or_else(|| Error::Format("checkpoint missing 'pse.template_idx'".into()))?
            .as_i64()?
            .iter()
            .map(|&i| i as usize)
            .collect();
        let f64s = container::f64_entries_with_prefix(map, "");
        Ok(PipelineParams {
            lifter: LifterParams::from_map(&f64s, &cfg)?,
            pse: PseParams::from_map(&f64s, &cfg, template_idx)?,
            cfg,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        container::save_checkpoint(path, &self.to_container())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        PipelineParams::from_container(&container::load_checkpoint(path)?)
    }
}

/// Run the whole pipeline on one 2D pose: lift, fuse, regress θ, pose the
/// body.
pub fn full_pipeline(
    params: &PipelineParams,
    body: &BodyModel,
    pose: &Pose2D,
) -> Result<MeshResult> {
    if pose.joint_count() != params.cfg.joint_count() {
        return Err(Error::Contract(format!(
            "pipeline configured for {} joints, pose has {}",
            params.cfg.joint_count(),
            pose.joint_count()
        )));
    }
    let adjacency = build_adjacency(&params.cfg.topology)?;
    let mut tape = Tape::new();
    let pv = tape.constant(pose.coords.clone());
    let av = tape.constant(adjacency);
    let lv = params.lifter.bind(&mut tape, false);
    let sv = params.pse.bind(&mut tape, body, false)?;
    let fk = body.bind_fk(&mut tape);
    let out = pipeline_on_tape(
        &mut tape,
        pv,
        av,
        &lv,
        &sv,
        &fk,
        params.cfg.source_mode,
        params.cfg.n_iter,
    )?;
    Ok(MeshResult {
        vertices: tape.value(out.vertices).clone(),
        joints: tape.value(out.joints).clone(),
        theta: tape.value(out.theta).clone(),
        beta: tape.value(out.lifter.beta).clone(),
        camera: Some(tape.value(out.lifter.camera).clone()),
        joints3d: Some(tape.value(out.lifter.joints3d).clone()),
    })
}
