//! Weak-perspective camera: uniform scale plus in-plane translation.
//!
//! The camera head predicts a raw 3-vector (s, t_x, t_y); `WeakPerspective`
//! is the validated form used at the projection boundary. Three scalars
//! cannot carry a rotation, so the in-plane-rotation reading of the camera
//! vector is not modeled.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakPerspective {
    pub s: f64,
    pub t: (f64, f64),
}

impl WeakPerspective {
    pub fn new(s: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(s.is_finite() && tx.is_finite() && ty.is_finite()) {
            return Err(Error::Contract("camera parameters must be finite".into()));
        }
        if s <= 0.0 {
            return Err(Error::Contract(format!("camera scale must be positive, got {s}")));
        }
        Ok(WeakPerspective { s, t: (tx, ty) })
    }

    /// Pack as a raw (s, t_x, t_y) tensor.
    pub fn to_tensor(self) -> Tensor {
        Tensor::new(vec![1, 3], vec![self.s, self.t.0, self.t.1]).unwrap()
    }

    /// Validate a raw camera vector (any shape with 3 values).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.numel() != 3 {
            return Err(Error::Contract(format!("camera vector needs 3 values, got {:?}", t.dims())));
        }
        WeakPerspective::new(t.data()[0], t.data()[1], t.data()[2])
    }
}

/// Project J×3 joints to J×2: out = s·(x, y) + (t_x, t_y); z is discarded.
pub fn weak_perspective_project(joints: &Tensor, cam: &WeakPerspective) -> Result<Tensor> {
    if joints.rank() != 2 || joints.cols() != 3 {
        return Err(Error::Contract(format!("projection needs J×3, got {:?}", joints.dims())));
    }
    if !joints.all_finite() {
        return Err(Error::Contract("projection input must be finite".into()));
    }
    let j = joints.rows();
    let mut data = Vec::with_capacity(j * 2);
    for r in 0..j {
        data.push(cam.s * joints.get2(r, 0) + cam.t.0);
        data.push(cam.s * joints.get2(r, 1) + cam.t.1);
    }
    Tensor::new(vec![j, 2], data)
}

/// Tape form used inside the training loss: `cam` is the raw 1×3 camera
/// vector (no positivity constraint while learning).
pub fn project_on_tape(tape: &mut Tape, joints: Var, cam: Var) -> Var {
    let drop_z = tape.constant(
        Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
    );
    let xy = tape.matmul(joints, drop_z);
    let pick_s = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap());
    let pick_t = tape.constant(
        Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
    );
    let s = tape.matmul(cam, pick_s);
    let t = tape.matmul(cam, pick_t);
    let scaled = tape.mul_scalar(s, xy);
    tape.add_row(scaled, t)
}
