//! Desk-scale supervised training: weighted L1/L2 losses over joints,
//! reprojection, pose angles, shape and vertices; Adam; an exactly
//! realizable synthetic dataset; and a deterministic loop supporting
//! lifter-only, pse-only and end-to-end modes.
//!
//! Units: the synthetic data keeps body-model units (meters) end to end, so
//! every loss term has comparable magnitude; metrics convert to millimeters
//! only at the reporting boundary.

use crate::body_model::{h36m17_joint_map, BodyModel, MeshResult, PoseTheta, SMPL_JOINTS};
use crate::camera::{project_on_tape, weak_perspective_project, WeakPerspective};
use crate::error::{Error, Result};
use crate::io::config::{Config, LossKind, SourceMode, TrainConfig, TrainMode};
use crate::lifter::{lifter_forward_on_tape, LifterOutput, LifterParams};
use crate::metrics;
use crate::pse::{
    iterative_regress_on_tape, pse_forward_on_tape, PipelineParams, PseParams, THETA_DIM,
};
use crate::rng::Rng;
use crate::skeleton::{build_adjacency, Pose2D};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub use crate::io::config::TrainMode as Mode;

/// One synthetic training sample. Every ground-truth quantity is derived
/// through the body model and camera, so the data is exactly realizable and
/// zero loss is attainable.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub gt_theta: PoseTheta,
    pub gt_beta: Tensor,    // 1×10
    pub gt_cam: WeakPerspective,
    pub gt_joints3d: Tensor, // J×3, root-relative, model units
    pub gt_vertices: Tensor, // V×3
    pub pose2d: Pose2D,      // projection of gt_joints3d plus optional noise
}

/// Deterministic synthetic dataset over the 17-joint convention:
/// θ rows uniform in [−0.4, 0.4] with the root replaced by a pure yaw in
/// [−π, π], β uniform in [−2, 2], scale in [0.8, 1.2], translation in
/// [−0.1, 0.1]; the 2D input is the weak-perspective reprojection plus
/// Gaussian noise of the given σ.
pub fn make_synth_dataset(
    n: usize,
    body: &BodyModel,
    seed: u64,
    noise_sigma: f64,
) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Contract("dataset size must be at least 1".into()));
    }
    if body.joint_count() != SMPL_JOINTS {
        return Err(Error::Config(format!(
            "synthetic data needs the {SMPL_JOINTS}-joint body, got {}",
            body.joint_count()
        )));
    }
    let mut rng = Rng::new(seed);
    let map17 = h36m17_joint_map();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut theta = Tensor::uniform(&[SMPL_JOINTS, 3], -0.4, 0.4, &mut rng);
        let yaw = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
        theta.set2(0, 0, 0.0);
        theta.set2(0, 1, yaw);
        theta.set2(0, 2, 0.0);
        let gt_theta = PoseTheta::new(theta)?;
        let gt_beta = Tensor::uniform(&[1, 10], -2.0, 2.0, &mut rng);
        let cam = WeakPerspective::new(
            rng.uniform(0.8, 1.2),
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.1, 0.1),
        )?;

        let posed = crate::body_model::forward_kinematics_lbs(body, &gt_theta.flat(), &gt_beta)?;
        let joints17 = map17.matmul(&posed.joints);
        let root = joints17.row_slice(0).to_vec();
        let mut rel = joints17.clone();
        for r in 0..rel.rows() {
            for c in 0..3 {
                rel.set2(r, c, joints17.get2(r, c) - root[c]);
            }
        }

        let mut p2 = weak_perspective_project(&rel, &cam)?;
        if noise_sigma > 0.0 {
            for v in p2.data_mut() {
                *v += noise_sigma * rng.normal();
            }
        }
        out.push(SynthSample {
            gt_theta,
            gt_beta,
            gt_cam: cam,
            gt_joints3d: rel,
            gt_vertices: posed.vertices,
            pose2d: Pose2D::new(p2, None)?,
        });
    }
    Ok(out)
}

/// Predicted quantities entering the loss; absent entries belong to terms
/// the current mode zeroes out.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossInputs {
    pub joints3d: Option<Var>,
    pub camera: Option<Var>,
    pub theta: Option<Var>, // 1×72
    pub beta: Option<Var>,
    pub vertices: Option<Var>,
}

/// Per-mode effective loss weights: lifter-only zeroes the θ/vertex terms,
/// pse-only zeroes the lifter terms.
pub fn effective_weights(cfg: &TrainConfig) -> [f64; 5] {
    match cfg.mode {
        TrainMode::LifterOnly => [cfg.lambda_3d, cfg.lambda_2d, 0.0, cfg.lambda_beta, 0.0],
        TrainMode::PseOnly => [0.0, 0.0, cfg.lambda_theta, 0.0, cfg.lambda_vert],
        TrainMode::EndToEnd => [
            cfg.lambda_3d,
            cfg.lambda_2d,
            cfg.lambda_theta,
            cfg.lambda_beta,
            cfg.lambda_vert,
        ],
    }
}

fn distance(tape: &mut Tape, kind: LossKind, a: Var, b: Var) -> Var {
    match kind {
        LossKind::L1 => tape.l1_diff(a, b),
        LossKind::L2 => tape.l2_diff(a, b),
    }
}

/// Weighted loss on the tape. Terms with zero weight are skipped entirely;
/// a positive-weight term without its prediction is a contract violation.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    inputs: &LossInputs,
    target: &SynthSample,
    weights: [f64; 5],
    kind: LossKind,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut add_term = |tape: &mut Tape, w: f64, term: Var| {
        let scaled = tape.scale(term, w);
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled),
        });
    };

    let [w3d, w2d, wth, wb, wv] = weights;
    let need = |x: Option<Var>, what: &str| {
        x.ok_or_else(|| Error::Contract(format!("loss needs {what} but the mode did not produce it")))
    };

    if w3d > 0.0 {
        let p = need(inputs.joints3d, "3D joints")?;
        let gt = tape.constant(target.gt_joints3d.clone());
        let d = distance(tape, kind, p, gt);
        add_term(tape, w3d, d);
    }
    if w2d > 0.0 {
        let p = need(inputs.joints3d, "3D joints")?;
        let c = need(inputs.camera, "camera")?;
        let proj = project_on_tape(tape, p, c);
        let gt = tape.constant(target.pose2d.coords.clone());
        let d = distance(tape, kind, proj, gt);
        add_term(tape, w2d, d);
    }
    if wth > 0.0 {
        let th = need(inputs.theta, "pose angles")?;
        let gt = tape.constant(target.gt_theta.flat().reshaped(vec![1, THETA_DIM])?);
        let d = distance(tape, kind, th, gt);
        add_term(tape, wth, d);
    }
    if wb > 0.0 {
        let b = need(inputs.beta, "shape")?;
        let gt = tape.constant(target.gt_beta.clone());
        let d = distance(tape, kind, b, gt);
        add_term(tape, wb, d);
    }
    if wv > 0.0 {
        let v = need(inputs.vertices, "vertices")?;
        let gt = tape.constant(target.gt_vertices.clone());
        let d = distance(tape, kind, v, gt);
        add_term(tape, wv, d);
    }
    total.ok_or_else(|| Error::Config("all loss weights are zero".into()))
}

/// Direct form over already-computed outputs, for inspection and tests.
pub fn total_loss(
    mesh: &MeshResult,
    lifter_out: &LifterOutput,
    target: &SynthSample,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let inputs = LossInputs {
        joints3d: Some(tape.constant(lifter_out.joints3d.clone())),
        camera: Some(tape.constant(lifter_out.camera.clone())),
        theta: Some(tape.constant(mesh.theta.reshaped(vec![1, THETA_DIM])?)),
        beta: Some(tape.constant(lifter_out.beta.clone())),
        vertices: Some(tape.constant(mesh.vertices.clone())),
    };
    let w = effective_weights(cfg);
    let loss = total_loss_on_tape(&mut tape, &inputs, target, w, cfg.loss)?;
    Ok(tape.value(loss).item())
}

/// Adam first/second moment state, keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: usize,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update with bias correction over named parameters. Parameters
/// without a gradient entry are treated as having a zero gradient.
pub fn adam_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for (name, p) in params {
        let zero;
        let g = match grads.get(&name) {
            Some(g) => {
                if g.dims() != p.dims() {
                    return Err(Error::Contract(format!(
                        "gradient dims {:?} vs parameter '{name}' dims {:?}",
                        g.dims(),
                        p.dims()
                    )));
                }
                g
            }
            None => {
                zero = Tensor::zeros(p.dims());
                &zero
            }
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.dims()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.dims()));
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = cfg.adam_beta1 * m.data()[i] + (1.0 - cfg.adam_beta1) * gi;
            let vi = cfg.adam_beta2 * v.data()[i] + (1.0 - cfg.adam_beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// One point of the training curve.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Batch MPJPE in model units (multiply by 1000 for millimeters on
    /// synthetic meter-scale data).
    pub mpjpe: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: PipelineParams,
    pub curve: Vec<CurvePoint>,
}

/// Render the loss curve as CSV.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,loss,mpjpe\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.step, p.loss, p.mpjpe));
    }
    s
}

fn collect_named_grads(
    tape: &Tape,
    grads: &Gradients,
    names: Vec<String>,
    vars: Vec<Var>,
) -> BTreeMap<String, Tensor> {
    debug_assert_eq!(names.len(), vars.len());
    let mut out = BTreeMap::new();
    for (name, var) in names.into_iter().zip(vars) {
        if let Some(g) = grads.wrt(var) {
            // tied weights may appear twice under different names; gradients
            // already accumulate on the shared handle
            let _ = tape.value(var);
            out.insert(name, g.clone());
        }
    }
    out
}

/// Deterministic training loop. Batches cycle through the dataset in order;
/// a fixed seed and config reproduce the final parameters bit for bit.
/// `checkpoint_hook` fires every `checkpoint_every` steps when that is
/// non-zero.
pub fn train_loop(
    cfg: &Config,
    body: &BodyModel,
    data: &[SynthSample],
    mut params: PipelineParams,
    mut checkpoint_hook: impl FnMut(usize, &PipelineParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training needs at least one sample".into()));
    }
    let tc = &cfg.train;
    let weights = effective_weights(tc);
    let adjacency = build_adjacency(&params.cfg.topology)?;
    let map17 = h36m17_joint_map();
    let mut adam = AdamState::new();
    let mut curve = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let mut tape = Tape::new();
        let av = tape.constant(adjacency.clone());

        let train_lifter = matches!(tc.mode, TrainMode::LifterOnly | TrainMode::EndToEnd);
        let train_pse = matches!(tc.mode, TrainMode::PseOnly | TrainMode::EndToEnd);
        let need_lifter =
            train_lifter || params.cfg.source_mode == SourceMode::Features;
        let need_pse = train_pse;

        let lifter_vars = need_lifter.then(|| params.lifter.bind(&mut tape, train_lifter));
        let pse_vars = match need_pse {
            true => Some(params.pse.bind(&mut tape, body, true)?),
            false => None,
        };
        let fk = need_pse.then(|| body.bind_fk(&mut tape));

        let mut batch_loss: Option<Var> = None;
        let mut batch_mpjpe = 0.0;
        for bi in 0..tc.batch_size {
            let sample = &data[(step * tc.batch_size + bi) % data.len()];
            let pose_var = tape.constant(sample.pose2d.coords.clone());

            let mut inputs = LossInputs::default();
            let lifter_out = match &lifter_vars {
                Some(lv) => Some(lifter_forward_on_tape(&mut tape, pose_var, av, lv)?),
                None => None,
            };
            if train_lifter {
                let lo = lifter_out.as_ref().expect("lifter bound");
                inputs.joints3d = Some(lo.joints3d);
                inputs.camera = Some(lo.camera);
                inputs.beta = Some(lo.beta);
            }
            if let (Some(sv), Some(fk)) = (&pse_vars, &fk) {
                let pose_input = match (params.cfg.source_mode, &lifter_out) {
                    (SourceMode::Features, Some(lo)) => lo.features,
                    (SourceMode::Joints, Some(lo)) if tc.mode == TrainMode::EndToEnd => {
                        lo.joints3d
                    }
                    // modular training consumes ground-truth joints
                    _ => tape.constant(sample.gt_joints3d.clone()),
                };
                let fused = pse_forward_on_tape(&mut tape, pose_input, sv)?;
                let trace = iterative_regress_on_tape(&mut tape, fused, sv, params.cfg.n_iter);
                let theta_flat = *trace.last().expect("non-empty trace");
                inputs.theta = Some(theta_flat);
                let theta = tape.reshape(theta_flat, vec![SMPL_JOINTS, 3]);
                // modular mode poses with the ground-truth shape
                let beta = match (tc.mode, &lifter_out) {
                    (TrainMode::EndToEnd, Some(lo)) => lo.beta,
                    _ => tape.constant(sample.gt_beta.clone()),
                };
                let (verts, joints24) = crate::body_model::fk_on_tape(&mut tape, fk, theta, beta);
                inputs.vertices = Some(verts);

                if inputs.joints3d.is_none() {
                    // curve metric for pse-only: mapped posed joints vs target
                    let mapped = map17.matmul(tape.value(joints24));
                    let root = mapped.row_slice(0).to_vec();
                    let mut rel = mapped.clone();
                    for r in 0..rel.rows() {
                        for c in 0..3 {
                            rel.set2(r, c, mapped.get2(r, c) - root[c]);
                        }
                    }
                    batch_mpjpe += if rel.all_finite() {
                        metrics::mpjpe(&rel, &sample.gt_joints3d, 0)?
                    } else {
                        f64::NAN // divergence; the loss check below aborts
                    };
                }
            }
            if let Some(p) = inputs.joints3d {
                let pv = tape.value(p);
                batch_mpjpe += if pv.all_finite() {
                    metrics::mpjpe(pv, &sample.gt_joints3d, 0)?
                } else {
                    f64::NAN
                };
            }

            let loss = total_loss_on_tape(&mut tape, &inputs, sample, weights, tc.loss)?;
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(acc) => tape.add(acc, loss),
            });
        }

        let loss = batch_loss.expect("batch_size >= 1");
        let loss = tape.scale(loss, 1.0 / tc.batch_size as f64);
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became non-finite at step {step}"
            )));
        }
        curve.push(CurvePoint {
            step,
            loss: loss_value,
            mpjpe: batch_mpjpe / tc.batch_size as f64,
        });

        let grads = tape.backward(loss)?;

        let mut names = Vec::new();
        let mut vars = Vec::new();
        if train_lifter {
            let mut named = Vec::new();
            params.lifter.visit(&mut named);
            names.extend(named.into_iter().map(|(n, _)| n));
            LifterParams::vars_in_order(lifter_vars.as_ref().expect("bound"), &mut vars);
        }
        if train_pse {
            let mut named = Vec::new();
            params.pse.visit(&mut named);
            names.extend(named.into_iter().map(|(n, _)| n));
            PseParams::vars_in_order(pse_vars.as_ref().expect("bound"), &mut vars);
        }
        let grad_map = collect_named_grads(&tape, &grads, names, vars);

        let mut named_params = Vec::new();
        if train_lifter {
            params.lifter.visit_mut(&mut named_params);
        }
        if train_pse {
            params.pse.visit_mut(&mut named_params);
        }
        adam_step(named_params, &grad_map, &mut adam, tc)?;

        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 {
            checkpoint_hook(step + 1, &params)?;
        }
    }

    Ok(TrainOutcome { params, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::desk_model;
    use crate::pse::full_pipeline;

    fn desk() -> BodyModel {
        desk_model(120, 0).unwrap()
    }

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.train.steps = 5;
        cfg.train.batch_size = 2;
        cfg.train.synth_samples = 4;
        cfg
    }

    #[test]
    fn synth_dataset_is_deterministic_and_realizable() {
        let body = desk();
        let a = make_synth_dataset(8, &body, 11, 0.0).unwrap();
        let b = make_synth_dataset(8, &body, 11, 0.0).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.gt_theta.axis_angle, y.gt_theta.axis_angle);
            assert_eq!(x.pose2d.coords, y.pose2d.coords);
        }
        // σ = 0: the 2D input is exactly the reprojection
        for s in &a {
            let reproj = weak_perspective_project(&s.gt_joints3d, &s.gt_cam).unwrap();
            assert_eq!(s.pose2d.coords, reproj);
            // root-relative targets have a zero pelvis row
            assert_eq!(s.gt_joints3d.row_slice(0), &[0.0, 0.0, 0.0]);
            // root yaw only
            assert_eq!(s.gt_theta.axis_angle.get2(0, 0), 0.0);
            assert_eq!(s.gt_theta.axis_angle.get2(0, 2), 0.0);
        }
        // σ > 0 perturbs the projection
        let c = make_synth_dataset(3, &body, 11, 0.01).unwrap();
        let reproj = weak_perspective_project(&c[0].gt_joints3d, &c[0].gt_cam).unwrap();
        assert!(c[0].pose2d.coords.sub(&reproj).max_abs() > 0.0);
    }

    #[test]
    fn loss_is_zero_when_output_matches_target() {
        let body = desk();
        let samples = make_synth_dataset(1, &body, 3, 0.0).unwrap();
        let s = &samples[0];
        let mesh = MeshResult {
            vertices: s.gt_vertices.clone(),
            joints: Tensor::zeros(&[24, 3]),
            theta: s.gt_theta.axis_angle.clone(),
            beta: s.gt_beta.clone(),
            camera: None,
            joints3d: None,
        };
        let lifter_out = LifterOutput {
            features: Tensor::zeros(&[17, 32]),
            joints3d: s.gt_joints3d.clone(),
            beta: s.gt_beta.clone(),
            camera: s.gt_cam.to_tensor(),
        };
        let loss = total_loss(&mesh, &lifter_out, s, &TrainConfig::default()).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn single_coordinate_offset_normalizes_by_element_count() {
        let body = desk();
        let samples = make_synth_dataset(1, &body, 4, 0.0).unwrap();
        let s = &samples[0];
        let mut joints = s.gt_joints3d.clone();
        joints.set2(5, 1, joints.get2(5, 1) + 1.0);
        let mesh = MeshResult {
            vertices: s.gt_vertices.clone(),
            joints: Tensor::zeros(&[24, 3]),
            theta: s.gt_theta.axis_angle.clone(),
            beta: s.gt_beta.clone(),
            camera: None,
            joints3d: None,
        };
        let lifter_out = LifterOutput {
            features: Tensor::zeros(&[17, 32]),
            joints3d: joints,
            beta: s.gt_beta.clone(),
            camera: s.gt_cam.to_tensor(),
        };
        let mut tc = TrainConfig::default();
        tc.lambda_2d = 0.0;
        tc.lambda_theta = 0.0;
        tc.lambda_beta = 0.0;
        tc.lambda_vert = 0.0;
        let loss = total_loss(&mesh, &lifter_out, s, &tc).unwrap();
        assert!((loss - 1.0 / 51.0).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_matches_independent_per_term_oracle() {
        let body = desk();
        let samples = make_synth_dataset(1, &body, 5, 0.0).unwrap();
        let s = &samples[0];
        let mut rng = Rng::new(6);
        let joints = s.gt_joints3d.add(&Tensor::uniform(&[17, 3], -0.1, 0.1, &mut rng));
        let beta = s.gt_beta.add(&Tensor::uniform(&[1, 10], -0.2, 0.2, &mut rng));
        let cam = Tensor::new(vec![1, 3], vec![1.05, 0.02, -0.03]).unwrap();
        let theta = s
            .gt_theta
            .axis_angle
            .add(&Tensor::uniform(&[24, 3], -0.1, 0.1, &mut rng));
        let verts = s
            .gt_vertices
            .add(&Tensor::uniform(&[120, 3], -0.05, 0.05, &mut rng));

        let mean_abs = |a: &Tensor, b: &Tensor| {
            a.sub(b).data().iter().map(|x| x.abs()).sum::<f64>() / a.numel() as f64
        };
        let tc = TrainConfig::default();
        let proj = weak_perspective_project(
            &joints,
            &WeakPerspective::from_tensor(&cam).unwrap(),
        )
        .unwrap();
        let want = tc.lambda_3d * mean_abs(&joints, &s.gt_joints3d)
            + tc.lambda_2d * mean_abs(&proj, &s.pose2d.coords)
            + tc.lambda_theta * mean_abs(&theta, &s.gt_theta.axis_angle)
            + tc.lambda_beta * mean_abs(&beta, &s.gt_beta)
            + tc.lambda_vert * mean_abs(&verts, &s.gt_vertices);

        let mesh = MeshResult {
            vertices: verts,
            joints: Tensor::zeros(&[24, 3]),
            theta,
            beta: beta.clone(),
            camera: None,
            joints3d: None,
        };
        let lifter_out = LifterOutput {
            features: Tensor::zeros(&[17, 32]),
            joints3d: joints,
            beta,
            camera: cam,
        };
        let got = total_loss(&mesh, &lifter_out, s, &tc).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn adam_zero_gradients_leave_fresh_params_unchanged() {
        let mut p = Tensor::filled(&[2, 2], 1.5);
        let orig = p.clone();
        let mut state = AdamState::new();
        let grads = BTreeMap::new();
        let tc = TrainConfig::default();
        adam_step(vec![("w".into(), &mut p)], &grads, &mut state, &tc).unwrap();
        assert_eq!(p, orig);
        // moments exist and are zero
        assert_eq!(state.m["w"].max_abs(), 0.0);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut p = Tensor::scalar(2.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.3));
        let mut state = AdamState::new();
        let tc = TrainConfig::default();
        adam_step(vec![("w".into(), &mut p)], &grads, &mut state, &tc).unwrap();
        // bias-corrected first step: m̂ = g, v̂ = g² → Δ = lr·g/(|g|+eps)
        let want = 2.0 - tc.lr * 0.3 / (0.3 + tc.adam_eps);
        assert!((p.item() - want).abs() < 1e-15, "{} vs {want}", p.item());
    }

    #[test]
    fn adam_state_threads_across_steps() {
        let tc = TrainConfig::default();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.1));

        let mut p1 = Tensor::scalar(1.0);
        let mut s1 = AdamState::new();
        adam_step(vec![("w".into(), &mut p1)], &grads, &mut s1, &tc).unwrap();
        adam_step(vec![("w".into(), &mut p1)], &grads, &mut s1, &tc).unwrap();

        // identical to running two steps with a persisted state elsewhere
        let mut p2 = Tensor::scalar(1.0);
        let mut s2 = AdamState::new();
        adam_step(vec![("w".into(), &mut p2)], &grads, &mut s2, &tc).unwrap();
        let mut s2b = AdamState { m: s2.m.clone(), v: s2.v.clone(), t: s2.t };
        adam_step(vec![("w".into(), &mut p2)], &grads, &mut s2b, &tc).unwrap();
        assert_eq!(p1.item().to_bits(), p2.item().to_bits());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let body = desk();
        let mut cfg = small_config();
        cfg.train.lr = 0.0;
        cfg.train.batch_size = 4; // full batch so every step sees the same data
        let data = make_synth_dataset(4, &body, cfg.model.seed, 0.0).unwrap();
        let params =
            PipelineParams::init(&cfg.model, &body, &mut Rng::new(cfg.model.seed)).unwrap();
        let before = params.to_container();
        let out = train_loop(&cfg, &body, &data, params, |_, _| Ok(())).unwrap();
        assert_eq!(crate::io::container::to_bytes(&before), crate::io::container::to_bytes(&out.params.to_container()));
        // flat loss curve
        let first = out.curve.first().unwrap().loss;
        for p in &out.curve {
            assert_eq!(p.loss.to_bits(), first.to_bits());
        }
    }

    #[test]
    fn lifter_only_training_leaves_pse_bytes_unchanged() {
        let body = desk();
        let mut cfg = small_config();
        cfg.train.mode = TrainMode::LifterOnly;
        let data = make_synth_dataset(4, &body, 1, 0.0).unwrap();
        let params = PipelineParams::init(&cfg.model, &body, &mut Rng::new(9)).unwrap();
        let pse_before = params.pse.to_map();
        let lifter_before = params.lifter.to_map();
        let out = train_loop(&cfg, &body, &data, params, |_, _| Ok(())).unwrap();
        assert_eq!(pse_before, out.params.pse.to_map());
        assert_ne!(lifter_before, out.params.lifter.to_map());
    }

    #[test]
    fn pse_only_training_leaves_lifter_bytes_unchanged() {
        let body = desk();
        let mut cfg = small_config();
        cfg.train.mode = TrainMode::PseOnly;
        cfg.model.source_mode = SourceMode::Joints;
        let data = make_synth_dataset(4, &body, 2, 0.0).unwrap();
        let params = PipelineParams::init(&cfg.model, &body, &mut Rng::new(10)).unwrap();
        let lifter_before = params.lifter.to_map();
        let pse_before = params.pse.to_map();
        let out = train_loop(&cfg, &body, &data, params, |_, _| Ok(())).unwrap();
        assert_eq!(lifter_before, out.params.lifter.to_map());
        assert_ne!(pse_before, out.params.pse.to_map());
    }

    #[test]
    fn training_is_deterministic_bit_for_bit() {
        let body = desk();
        let cfg = small_config();
        let run = || {
            let data = make_synth_dataset(4, &body, cfg.model.seed, 0.0).unwrap();
            let params =
                PipelineParams::init(&cfg.model, &body, &mut Rng::new(cfg.model.seed)).unwrap();
            let out = train_loop(&cfg, &body, &data, params, |_, _| Ok(())).unwrap();
            crate::io::container::to_bytes(&out.params.to_container())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergent_training_reports_the_failing_step() {
        let body = desk();
        let mut cfg = small_config();
        cfg.train.steps = 30;
        cfg.train.lr = 1e160;
        let data = make_synth_dataset(4, &body, 3, 0.0).unwrap();
        let params = PipelineParams::init(&cfg.model, &body, &mut Rng::new(11)).unwrap();
        match train_loop(&cfg, &body, &data, params, |_, _| Ok(())) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("step"), "{msg}"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected a numerical failure"),
        }
    }

    #[test]
    fn short_end_to_end_run_reduces_the_loss() {
        let body = desk();
        let mut cfg = Config::default();
        cfg.train.steps = 60;
        cfg.train.batch_size = 4;
        cfg.model.seed = km_seed();
        let data = make_synth_dataset(8, &body, cfg.model.seed, 0.0).unwrap();
        let params =
            PipelineParams::init(&cfg.model, &body, &mut Rng::new(cfg.model.seed)).unwrap();
        let out = train_loop(&cfg, &body, &data, params, |_, _| Ok(())).unwrap();
        let first = out.curve[0].loss;
        let last = out.curve.last().unwrap().loss;
        assert!(
            last < first,
            "loss did not decrease: {first} -> {last}"
        );
        // the trained pipeline still composes end to end
        let res = full_pipeline(&out.params, &body, &data[0].pose2d).unwrap();
        assert!(res.vertices.all_finite());
    }

    fn km_seed() -> u64 {
        42
    }

    #[test]
    fn checkpoint_hook_fires_on_schedule() {
        let body = desk();
        let mut cfg = small_config();
        cfg.train.steps = 6;
        cfg.train.checkpoint_every = 2;
        let data = make_synth_dataset(4, &body, 5, 0.0).unwrap();
        let params = PipelineParams::init(&cfg.model, &body, &mut Rng::new(12)).unwrap();
        let mut fired = Vec::new();
        train_loop(&cfg, &body, &data, params, |step, _| {
            fired.push(step);
            Ok(())
        })
        .unwrap();
        assert_eq!(fired, vec![2, 4, 6]);
    }

    #[test]
    fn loss_gradient_through_the_full_pipeline_checks_out() {
        let body = desk();
        let cfg = Config::default();
        let mut rng = Rng::new(21);
        let params = PipelineParams::init(&cfg.model, &body, &mut rng).unwrap();
        let data = make_synth_dataset(1, &body, 22, 0.0).unwrap();
        let sample = data[0].clone();
        let adjacency = build_adjacency(&cfg.model.topology).unwrap();
        let weights = effective_weights(&cfg.train);

        let pose = sample.pose2d.coords.clone();
        let err = crate::tape::finite_diff_check(
            move |t, pv| {
                let av = t.constant(adjacency.clone());
                let lv = params.lifter.bind(t, false);
                let sv = params.pse.bind(t, &body, false).unwrap();
                let fk = body.bind_fk(t);
                let out = crate::pse::pipeline_on_tape(
                    t,
                    pv,
                    av,
                    &lv,
                    &sv,
                    &fk,
                    cfg.model.source_mode,
                    cfg.model.n_iter,
                )
                .unwrap();
                let theta_flat = *out.theta_trace.last().unwrap();
                let inputs = LossInputs {
                    joints3d: Some(out.lifter.joints3d),
                    camera: Some(out.lifter.camera),
                    theta: Some(theta_flat),
                    beta: Some(out.lifter.beta),
                    vertices: Some(out.vertices),
                };
                total_loss_on_tape(t, &inputs, &sample, weights, LossKind::L1).unwrap()
            },
            &pose,
            None,
        );
        assert!(err < 1e-4, "err {err}");
    }
}
