//! Minimal ASCII OBJ export: `v x y z` per vertex, optional 1-based
//! `f a b c` faces.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

pub fn obj_string(vertices: &Tensor, faces: Option<&[[usize; 3]]>) -> Result<String> {
    if vertices.rank() != 2 || vertices.cols() != 3 {
        return Err(Error::Contract(format!(
            "OBJ export needs V×3 vertices, got {:?}",
            vertices.dims()
        )));
    }
    let mut out = String::new();
    for r in 0..vertices.rows() {
        writeln!(
            out,
            "v {} {} {}",
            vertices.get2(r, 0),
            vertices.get2(r, 1),
            vertices.get2(r, 2)
        )
        .unwrap();
    }
    if let Some(faces) = faces {
        for f in faces {
            if f.iter().any(|&i| i >= vertices.rows()) {
                return Err(Error::Contract(format!("face {f:?} indexes past vertex count")));
            }
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
        }
    }
    Ok(out)
}

pub fn write_obj(path: impl AsRef<Path>, vertices: &Tensor, faces: Option<&[[usize; 3]]>) -> Result<()> {
    let text = obj_string(vertices, faces)?;
    super::atomic_write(path.as_ref(), text.as_bytes())
}
