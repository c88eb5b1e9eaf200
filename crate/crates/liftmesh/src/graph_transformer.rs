//! Graph-transformer building blocks: a GCN layer over the skeleton
//! adjacency, scaled-dot attention, multi-head self-attention, the composed
//! block (GCN → MSA with residual/norm → feed-forward with residual/norm),
//! and the parallel-branch fusion that splits features across several
//! small-dimensional block stacks.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameters of one graph-transformer block operating at dimension `dim`.
#[derive(Debug, Clone)]
pub struct GtBlockParams {
    pub gcn_weight: Tensor,                   // dim×dim
    pub heads: Vec<(Tensor, Tensor, Tensor)>, // (Q_i, K_i, V_i), each dim×d_k
    pub w_out: Tensor,                        // (h·d_k)×dim
    pub ff1_w: Tensor,                        // dim×d_ff
    pub ff1_b: Tensor,                        // 1×d_ff
    pub ff2_w: Tensor,                        // d_ff×dim
    pub ff2_b: Tensor,                        // 1×dim
    pub ln1_gain: Tensor,                     // 1×dim
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Tape handles for one bound block.
#[derive(Debug, Clone)]
pub struct GtBlockVars {
    pub gcn_weight: Var,
    pub heads: Vec<(Var, Var, Var)>,
    pub w_out: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl GtBlockParams {
    /// Xavier-initialized block: `heads` must divide `dim`; d_ff = 2·dim.
    pub fn init(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("heads {heads} must divide dim {dim}")));
        }
        let d_k = dim / heads;
        let d_ff = 2 * dim;
        let head_params = (0..heads)
            .map(|_| {
                (
                    Tensor::xavier(dim, d_k, rng),
                    Tensor::xavier(dim, d_k, rng),
                    Tensor::xavier(dim, d_k, rng),
                )
            })
            .collect();
        Ok(GtBlockParams {
            gcn_weight: Tensor::xavier(dim, dim, rng),
            heads: head_params,
            w_out: Tensor::xavier(heads * d_k, dim, rng),
            ff1_w: Tensor::xavier(dim, d_ff, rng),
            ff1_b: Tensor::zeros(&[1, d_ff]),
            ff2_w: Tensor::xavier(d_ff, dim, rng),
            ff2_b: Tensor::zeros(&[1, dim]),
            ln1_gain: Tensor::filled(&[1, dim], 1.0),
            ln1_bias: Tensor::zeros(&[1, dim]),
            ln2_gain: Tensor::filled(&[1, dim], 1.0),
            ln2_bias: Tensor::zeros(&[1, dim]),
        })
    }

    /// All-zero block (zero gains and biases included).
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("heads {heads} must divide dim {dim}")));
        }
        let d_k = dim / heads;
        let d_ff = 2 * dim;
        let z = |r, c| Tensor::zeros(&[r, c]);
        Ok(GtBlockParams {
            gcn_weight: z(dim, dim),
            heads: (0..heads).map(|_| (z(dim, d_k), z(dim, d_k), z(dim, d_k))).collect(),
            w_out: z(heads * d_k, dim),
            ff1_w: z(dim, d_ff),
            ff1_b: z(1, d_ff),
            ff2_w: z(d_ff, dim),
            ff2_b: z(1, dim),
            ln1_gain: z(1, dim),
            ln1_bias: z(1, dim),
            ln2_gain: z(1, dim),
            ln2_bias: z(1, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.gcn_weight.cols()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].0.cols()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GtBlockVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        GtBlockVars {
            gcn_weight: put(&self.gcn_weight),
            heads: self.heads.iter().map(|(q, k, v)| (put(q), put(k), put(v))).collect(),
            w_out: put(&self.w_out),
            ff1_w: put(&self.ff1_w),
            ff1_b: put(&self.ff1_b),
            ff2_w: put(&self.ff2_w),
            ff2_b: put(&self.ff2_b),
            ln1_gain: put(&self.ln1_gain),
            ln1_bias: put(&self.ln1_bias),
            ln2_gain: put(&self.ln2_gain),
            ln2_bias: put(&self.ln2_bias),
        }
    }

    /// Append `(name, tensor)` pairs under `prefix` in canonical order.
    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}gcn_w"), &self.gcn_weight));
        for (i, (q, k, v)) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}q{i}"), q));
            out.push((format!("{prefix}k{i}"), k));
            out.push((format!("{prefix}v{i}"), v));
        }
        out.push((format!("{prefix}w_out"), &self.w_out));
        out.push((format!("{prefix}ff1_w"), &self.ff1_w));
        out.push((format!("{prefix}ff1_b"), &self.ff1_b));
        out.push((format!("{prefix}ff2_w"), &self.ff2_w));
        out.push((format!("{prefix}ff2_b"), &self.ff2_b));
        out.push((format!("{prefix}ln1_g"), &self.ln1_gain));
        out.push((format!("{prefix}ln1_b"), &self.ln1_bias));
        out.push((format!("{prefix}ln2_g"), &self.ln2_gain));
        out.push((format!("{prefix}ln2_b"), &self.ln2_bias));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}gcn_w"), &mut self.gcn_weight));
        for (i, (q, k, v)) in self.heads.iter_mut().enumerate() {
            out.push((format!("{prefix}q{i}"), q));
            out.push((format!("{prefix}k{i}"), k));
            out.push((format!("{prefix}v{i}"), v));
        }
        out.push((format!("{prefix}w_out"), &mut self.w_out));
        out.push((format!("{prefix}ff1_w"), &mut self.ff1_w));
        out.push((format!("{prefix}ff1_b"), &mut self.ff1_b));
        out.push((format!("{prefix}ff2_w"), &mut self.ff2_w));
        out.push((format!("{prefix}ff2_b"), &mut self.ff2_b));
        out.push((format!("{prefix}ln1_g"), &mut self.ln1_gain));
        out.push((format!("{prefix}ln1_b"), &mut self.ln1_bias));
        out.push((format!("{prefix}ln2_g"), &mut self.ln2_gain));
        out.push((format!("{prefix}ln2_b"), &mut self.ln2_bias));
    }

    /// The bound handles in the same canonical order as `visit`.
    pub fn vars_in_order(vars: &GtBlockVars, out: &mut Vec<Var>) {
        out.push(vars.gcn_weight);
        for (q, k, v) in &vars.heads {
            out.push(*q);
            out.push(*k);
            out.push(*v);
        }
        out.push(vars.w_out);
        out.push(vars.ff1_w);
        out.push(vars.ff1_b);
        out.push(vars.ff2_w);
        out.push(vars.ff2_b);
        out.push(vars.ln1_gain);
        out.push(vars.ln1_bias);
        out.push(vars.ln2_gain);
        out.push(vars.ln2_bias);
    }

    pub fn from_map(
        prefix: &str,
        map: &std::collections::BTreeMap<String, Tensor>,
        heads: usize,
    ) -> Result<Self> {
        let get = |name: String| {
            map.get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))
        };
        let mut head_params = Vec::with_capacity(heads);
        for i in 0..heads {
            head_params.push((
                get(format!("{prefix}q{i}"))?,
                get(format!("{prefix}k{i}"))?,
                get(format!("{prefix}v{i}"))?,
            ));
        }
        Ok(GtBlockParams {
            gcn_weight: get(format!("{prefix}gcn_w"))?,
            heads: head_params,
            w_out: get(format!("{prefix}w_out"))?,
            ff1_w: get(format!("{prefix}ff1_w"))?,
            ff1_b: get(format!("{prefix}ff1_b"))?,
            ff2_w: get(format!("{prefix}ff2_w"))?,
            ff2_b: get(format!("{prefix}ff2_b"))?,
            ln1_gain: get(format!("{prefix}ln1_g"))?,
            ln1_bias: get(format!("{prefix}ln1_b"))?,
            ln2_gain: get(format!("{prefix}ln2_g"))?,
            ln2_bias: get(format!("{prefix}ln2_b"))?,
        })
    }
}

/// GCN layer: GELU(Â·X·W).
pub fn gcn_layer(tape: &mut Tape, x: Var, adjacency: Var, weight: Var) -> Result<Var> {
    let (xt, at, wt) = (tape.value(x), tape.value(adjacency), tape.value(weight));
    if at.rank() != 2 || at.rows() != at.cols() {
        return Err(Error::Contract(format!("adjacency must be square, got {:?}", at.dims())));
    }
    if xt.rank() != 2 || xt.rows() != at.rows() {
        return Err(Error::Contract(format!(
            "gcn_layer: x {:?} vs adjacency {:?}",
            xt.dims(),
            at.dims()
        )));
    }
    if wt.rank() != 2 || wt.rows() != xt.cols() {
        return Err(Error::Contract(format!(
            "gcn_layer: weight {:?} vs x {:?}",
            wt.dims(),
            xt.dims()
        )));
    }
    let ax = tape.matmul(adjacency, x);
    let axw = tape.matmul(ax, weight);
    Ok(tape.gelu(axw))
}

/// Scaled-dot attention: softmax(QKᵀ/√d)·V.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qt, kt, vt) = (tape.value(q), tape.value(k), tape.value(v));
    if qt.rank() != 2 || kt.rank() != 2 || vt.rank() != 2 {
        return Err(Error::Contract("attention inputs must be rank 2".into()));
    }
    if qt.cols() != kt.cols() || qt.rows() != kt.rows() || kt.rows() != vt.rows() {
        return Err(Error::Contract(format!(
            "attention dims: q {:?}, k {:?}, v {:?}",
            qt.dims(),
            kt.dims(),
            vt.dims()
        )));
    }
    let d = qt.cols() as f64;
    let kt_t = tape.transpose(k);
    let scores = tape.matmul(q, kt_t);
    let scaled = tape.scale(scores, 1.0 / d.sqrt());
    let weights = tape.softmax_rows(scaled);
    Ok(tape.matmul(weights, v))
}

/// Multi-head self-attention: per-head projections, scaled-dot attention,
/// feature concatenation, output projection.
pub fn multi_head_self_attention(tape: &mut Tape, x: Var, vars: &GtBlockVars) -> Result<Var> {
    let xt = tape.value(x);
    let dim = tape.value(vars.heads[0].0).rows();
    if xt.rank() != 2 || xt.cols() != dim {
        return Err(Error::Contract(format!(
            "msa: x {:?} vs projection dim {dim}",
            xt.dims()
        )));
    }
    let mut concat: Option<Var> = None;
    for (wq, wk, wv) in &vars.heads {
        let q = tape.matmul(x, *wq);
        let k = tape.matmul(x, *wk);
        let v = tape.matmul(x, *wv);
        let h = scaled_dot_attention(tape, q, k, v)?;
        concat = Some(match concat {
            None => h,
            Some(c) => tape.concat_cols(c, h),
        });
    }
    let c = concat.expect("at least one head");
    if tape.value(c).cols() != tape.value(vars.w_out).rows() {
        return Err(Error::Contract(format!(
            "msa: concat width {} vs w_out rows {}",
            tape.value(c).cols(),
            tape.value(vars.w_out).rows()
        )));
    }
    Ok(tape.matmul(c, vars.w_out))
}

/// One block: y1 = GCN(x); y2 = LN(y1 + MSA(y1)); out = LN(y2 + FFN(y2)).
pub fn gt_block_forward(tape: &mut Tape, x: Var, adjacency: Var, vars: &GtBlockVars) -> Result<Var> {
    let y1 = gcn_layer(tape, x, adjacency, vars.gcn_weight)?;
    let attn = multi_head_self_attention(tape, y1, vars)?;
    let res1 = tape.add(y1, attn);
    let y2 = tape.layer_norm(res1, vars.ln1_gain, vars.ln1_bias, LAYER_NORM_EPS);

    let f1 = tape.matmul(y2, vars.ff1_w);
    let f1 = tape.add_row(f1, vars.ff1_b);
    let f1 = tape.gelu(f1);
    let f2 = tape.matmul(f1, vars.ff2_w);
    let f2 = tape.add_row(f2, vars.ff2_b);
    let res2 = tape.add(y2, f2);
    Ok(tape.layer_norm(res2, vars.ln2_gain, vars.ln2_bias, LAYER_NORM_EPS))
}

/// Parallel branch trunk: B split projections into dim/B features, a block
/// stack per branch, branch outputs concatenated back to the full width.
#[derive(Debug, Clone)]
pub struct ParallelFuseParams {
    pub branches: Vec<FuseBranch>,
}

#[derive(Debug, Clone)]
pub struct FuseBranch {
    pub split: Tensor, // D×(D/B)
    pub blocks: Vec<GtBlockParams>,
}

#[derive(Debug, Clone)]
pub struct ParallelFuseVars {
    pub branches: Vec<(Var, Vec<GtBlockVars>)>,
}

impl ParallelFuseParams {
    pub fn init(
        dim: usize,
        branch_count: usize,
        blocks_per_branch: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if branch_count == 0 || dim % branch_count != 0 {
            return Err(Error::Config(format!(
                "branch count {branch_count} must divide dim {dim}"
            )));
        }
        let branch_dim = dim / branch_count;
        let mut branches = Vec::with_capacity(branch_count);
        for _ in 0..branch_count {
            let split = Tensor::xavier(dim, branch_dim, rng);
            let blocks = (0..blocks_per_branch)
                .map(|_| GtBlockParams::init(branch_dim, heads, rng))
                .collect::<Result<Vec<_>>>()?;
            branches.push(FuseBranch { split, blocks });
        }
        Ok(ParallelFuseParams { branches })
    }

    pub fn dim(&self) -> usize {
        self.branches.iter().map(|b| b.split.cols()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParallelFuseVars {
        ParallelFuseVars {
            branches: self
                .branches
                .iter()
                .map(|b| {
                    let split = if trainable {
                        tape.leaf(b.split.clone())
                    } else {
                        tape.constant(b.split.clone())
                    };
                    let blocks = b.blocks.iter().map(|blk| blk.bind(tape, trainable)).collect();
                    (split, blocks)
                })
                .collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (bi, b) in self.branches.iter().enumerate() {
            out.push((format!("{prefix}gt.{bi}.split"), &b.split));
            for (ki, blk) in b.blocks.iter().enumerate() {
                blk.visit(&format!("{prefix}gt.{bi}.{ki}."), out);
            }
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (bi, b) in self.branches.iter_mut().enumerate() {
            out.push((format!("{prefix}gt.{bi}.split"), &mut b.split));
            for (ki, blk) in b.blocks.iter_mut().enumerate() {
                blk.visit_mut(&format!("{prefix}gt.{bi}.{ki}."), out);
            }
        }
    }

    pub fn vars_in_order(vars: &ParallelFuseVars, out: &mut Vec<Var>) {
        for (split, blocks) in &vars.branches {
            out.push(*split);
            for blk in blocks {
                GtBlockParams::vars_in_order(blk, out);
            }
        }
    }

    pub fn from_map(
        prefix: &str,
        map: &std::collections::BTreeMap<String, Tensor>,
        branch_count: usize,
        blocks_per_branch: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut branches = Vec::with_capacity(branch_count);
        for bi in 0..branch_count {
            let name = format!("{prefix}gt.{bi}.split");
            let split = map
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))?;
            let mut blocks = Vec::with_capacity(blocks_per_branch);
            for ki in 0..blocks_per_branch {
                blocks.push(GtBlockParams::from_map(
                    &format!("{prefix}gt.{bi}.{ki}."),
                    map,
                    heads,
                )?);
            }
            branches.push(FuseBranch { split, blocks });
        }
        Ok(ParallelFuseParams { branches })
    }
}

/// Run the parallel trunk on x (J×D) with the given skeleton adjacency.
pub fn parallel_fuse(
    tape: &mut Tape,
    x: Var,
    adjacency: Var,
    vars: &ParallelFuseVars,
) -> Result<Var> {
    let d: usize = vars
        .branches
        .iter()
        .map(|(s, _)| tape.value(*s).cols())
        .sum();
    let xt = tape.value(x);
    if xt.rank() != 2 || xt.cols() != d {
        return Err(Error::Contract(format!(
            "parallel_fuse: x {:?} vs total branch width {d}",
            xt.dims()
        )));
    }
    let mut fused: Option<Var> = None;
    for (split, blocks) in &vars.branches {
        let mut h = tape.matmul(x, *split);
        for blk in blocks {
            h = gt_block_forward(tape, h, adjacency, blk)?;
        }
        fused = Some(match fused {
            None => h,
            Some(f) => tape.concat_cols(f, h),
        });
    }
    Ok(fused.expect("at least one branch"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{build_adjacency, h36m17_topology, SkeletonTopology};
    use crate::tape::finite_diff_check;
    use crate::tensor::gelu_scalar;

    fn two_joint_adjacency() -> Tensor {
        let t = SkeletonTopology::new("two", vec!["a".into(), "b".into()], vec![(0, 1)], 0)
            .unwrap();
        build_adjacency(&t).unwrap()
    }

    #[test]
    fn gcn_identity_cases() {
        let mut tape = Tape::new();
        let adj = tape.constant(Tensor::eye(1));
        let w = tape.constant(Tensor::eye(1));

        let x0 = tape.constant(Tensor::from_rows(&[vec![0.0]]));
        let y0 = gcn_layer(&mut tape, x0, adj, w).unwrap();
        assert_eq!(tape.value(y0).item(), 0.0);

        let x10 = tape.constant(Tensor::from_rows(&[vec![10.0]]));
        let y10 = gcn_layer(&mut tape, x10, adj, w).unwrap();
        assert!((tape.value(y10).item() - 10.0).abs() < 1e-4);
    }

    #[test]
    fn gcn_matches_three_matrix_oracle() {
        let mut rng = Rng::new(51);
        let adj = two_joint_adjacency();
        let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let (av, xv, wv) = (
            tape.constant(adj.clone()),
            tape.constant(x.clone()),
            tape.constant(w.clone()),
        );
        let y = gcn_layer(&mut tape, xv, av, wv).unwrap();

        let oracle = adj.matmul(&x).matmul(&w).map(gelu_scalar);
        assert!(tape.value(y).sub(&oracle).max_abs() < 1e-15);
    }

    #[test]
    fn gcn_rejects_dim_mismatch() {
        let mut tape = Tape::new();
        let adj = tape.constant(Tensor::eye(3));
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let w = tape.constant(Tensor::zeros(&[4, 4]));
        assert!(gcn_layer(&mut tape, x, adj, w).is_err());
    }

    #[test]
    fn single_row_attention_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![0.7, -0.3]]));
        let k = tape.constant(Tensor::from_rows(&[vec![2.0, 5.0]]));
        let v = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]));
        let out = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(out), &Tensor::from_rows(&[vec![3.0, 4.0]]));
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]));
        let k = tape.constant(Tensor::from_rows(&[vec![0.3, 0.3], vec![0.3, 0.3]]));
        let v = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]));
        let out = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((tape.value(out).get2(r, c) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_hand_oracle() {
        // N=2, d=2 instance evaluated with explicit scalar arithmetic
        let q = Tensor::from_rows(&[vec![0.4, -1.1], vec![0.9, 0.2]]);
        let k = Tensor::from_rows(&[vec![1.3, 0.7], vec![-0.5, 0.8]]);
        let v = Tensor::from_rows(&[vec![2.0, -1.0], vec![0.5, 3.0]]);

        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let out = scaled_dot_attention(&mut tape, qv, kv, vv).unwrap();

        let scale = 1.0 / 2.0f64.sqrt();
        for r in 0..2 {
            let s0 = (q.get2(r, 0) * k.get2(0, 0) + q.get2(r, 1) * k.get2(0, 1)) * scale;
            let s1 = (q.get2(r, 0) * k.get2(1, 0) + q.get2(r, 1) * k.get2(1, 1)) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (w0, w1) = (e0 / z, e1 / z);
            for c in 0..2 {
                let want = w0 * v.get2(0, c) + w1 * v.get2(1, c);
                assert!((tape.value(out).get2(r, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_dims() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 3]));
        let k = tape.constant(Tensor::zeros(&[2, 4]));
        let v = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(scaled_dot_attention(&mut tape, q, k, v).is_err());
    }

    fn identity_block(dim: usize) -> GtBlockParams {
        let mut p = GtBlockParams::zeros(dim, 1).unwrap();
        p.heads[0] = (Tensor::eye(dim), Tensor::eye(dim), Tensor::eye(dim));
        p.w_out = Tensor::eye(dim);
        p
    }

    #[test]
    fn single_head_identity_projections_reduce_to_plain_attention() {
        let mut rng = Rng::new(12);
        let x = Tensor::uniform(&[6, 4], -1.5, 1.5, &mut rng);
        let p = identity_block(4);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = p.bind(&mut tape, false);
        let msa = multi_head_self_attention(&mut tape, xv, &vars).unwrap();

        let mut tape2 = Tape::new();
        let xv2 = tape2.constant(x.clone());
        let sda = scaled_dot_attention(&mut tape2, xv2, xv2, xv2).unwrap();

        // bitwise: both paths run the same kernels in the same order
        for (a, b) in tape.value(msa).data().iter().zip(tape2.value(sda).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_value_projections_give_zero_attention() {
        let mut rng = Rng::new(13);
        let x = Tensor::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let mut p = GtBlockParams::init(8, 2, &mut rng).unwrap();
        for h in &mut p.heads {
            h.2 = Tensor::zeros(&[8, 4]);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = p.bind(&mut tape, false);
        let out = multi_head_self_attention(&mut tape, xv, &vars).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
    }

    #[test]
    fn two_head_msa_matches_composed_oracle() {
        let mut rng = Rng::new(14);
        let x = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let p = GtBlockParams::init(4, 2, &mut rng).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = p.bind(&mut tape, false);
        let out = multi_head_self_attention(&mut tape, xv, &vars).unwrap();

        // oracle: run each head through scaled_dot_attention independently
        let mut heads_out: Vec<Tensor> = Vec::new();
        for (wq, wk, wv) in &p.heads {
            let mut t = Tape::new();
            let q = t.constant(x.matmul(wq));
            let k = t.constant(x.matmul(wk));
            let v = t.constant(x.matmul(wv));
            let h = scaled_dot_attention(&mut t, q, k, v).unwrap();
            heads_out.push(t.value(h).clone());
        }
        let mut concat = Tensor::zeros(&[5, 4]);
        for r in 0..5 {
            for (hi, h) in heads_out.iter().enumerate() {
                for c in 0..2 {
                    concat.set2(r, hi * 2 + c, h.get2(r, c));
                }
            }
        }
        let oracle = concat.matmul(&p.w_out);
        assert!(tape.value(out).sub(&oracle).max_abs() < 1e-12);
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let mut rng = Rng::new(15);
        let x = Tensor::uniform(&[7, 8], -1.0, 1.0, &mut rng);
        let p = GtBlockParams::init(8, 2, &mut rng).unwrap();

        // a fixed permutation of the 7 rows
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let mut pm = Tensor::zeros(&[7, 7]);
        for (i, &j) in perm.iter().enumerate() {
            pm.set2(i, j, 1.0);
        }
        let px = pm.matmul(&x);

        let run = |inp: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(inp.clone());
            let vars = p.bind(&mut tape, false);
            let out = multi_head_self_attention(&mut tape, xv, &vars).unwrap();
            tape.value(out).clone()
        };
        let lhs = run(&px);
        let rhs = pm.matmul(&run(&x));
        assert!(lhs.sub(&rhs).max_abs() < 1e-9);
    }

    #[test]
    fn all_zero_block_maps_to_zero() {
        let mut rng = Rng::new(17);
        let x = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let adj = Tensor::eye(4);
        let p = GtBlockParams::zeros(6, 2).unwrap();
        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x), tape.constant(adj));
        let vars = p.bind(&mut tape, false);
        let out = gt_block_forward(&mut tape, xv, av, &vars).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
    }

    #[test]
    fn single_joint_block_is_well_formed() {
        let mut rng = Rng::new(18);
        let x = Tensor::uniform(&[1, 6], -1.0, 1.0, &mut rng);
        let adj = Tensor::eye(1);
        let p = GtBlockParams::init(6, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x), tape.constant(adj));
        let vars = p.bind(&mut tape, false);
        let out = gt_block_forward(&mut tape, xv, av, &vars).unwrap();
        assert_eq!(tape.value(out).dims(), &[1, 6]);
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn default_scale_block_preserves_shape() {
        let mut rng = Rng::new(19);
        let x = Tensor::uniform(&[17, 32], -1.0, 1.0, &mut rng);
        let adj = build_adjacency(&h36m17_topology()).unwrap();
        let p = GtBlockParams::init(32, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x), tape.constant(adj));
        let vars = p.bind(&mut tape, false);
        let out = gt_block_forward(&mut tape, xv, av, &vars).unwrap();
        assert_eq!(tape.value(out).dims(), &[17, 32]);
    }

    #[test]
    fn block_gradient_passes_finite_difference() {
        let mut rng = Rng::new(20);
        let x = Tensor::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let adj = Tensor::eye(5);
        let p = GtBlockParams::init(8, 2, &mut rng).unwrap();
        let err = finite_diff_check(
            move |t, xv| {
                let av = t.constant(adj.clone());
                let vars = p.bind(t, false);
                let out = gt_block_forward(t, xv, av, &vars).unwrap();
                let sq = t.mul(out, out);
                t.sum_all(sq)
            },
            &x,
            None,
        );
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn single_branch_fuse_equals_plain_stack() {
        let mut rng = Rng::new(22);
        let x = Tensor::uniform(&[6, 8], -1.0, 1.0, &mut rng);
        let adj = Tensor::eye(6);
        let p = ParallelFuseParams::init(8, 1, 2, 2, &mut rng).unwrap();

        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x.clone()), tape.constant(adj.clone()));
        let vars = p.bind(&mut tape, false);
        let fused = parallel_fuse(&mut tape, xv, av, &vars).unwrap();

        let mut tape2 = Tape::new();
        let (xv2, av2) = (tape2.constant(x), tape2.constant(adj));
        let split = tape2.constant(p.branches[0].split.clone());
        let mut h = tape2.matmul(xv2, split);
        for blk in &p.branches[0].blocks {
            let bv = blk.bind(&mut tape2, false);
            h = gt_block_forward(&mut tape2, h, av2, &bv).unwrap();
        }
        assert!(tape.value(fused).sub(tape2.value(h)).max_abs() == 0.0);
    }

    #[test]
    fn four_branch_fuse_has_full_width() {
        let mut rng = Rng::new(24);
        let x = Tensor::uniform(&[17, 32], -1.0, 1.0, &mut rng);
        let adj = build_adjacency(&h36m17_topology()).unwrap();
        let p = ParallelFuseParams::init(32, 4, 2, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x), tape.constant(adj));
        let vars = p.bind(&mut tape, false);
        let out = parallel_fuse(&mut tape, xv, av, &vars).unwrap();
        assert_eq!(tape.value(out).dims(), &[17, 32]);
    }

    #[test]
    fn zeroed_branch_occupies_its_own_columns() {
        let mut rng = Rng::new(25);
        let x = Tensor::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let adj = Tensor::eye(5);
        let mut p = ParallelFuseParams::init(8, 2, 1, 2, &mut rng).unwrap();
        // zero out branch 0 entirely
        let dim = 4;
        p.branches[0].split = Tensor::zeros(&[8, dim]);
        p.branches[0].blocks = vec![GtBlockParams::zeros(dim, 2).unwrap()];

        let mut tape = Tape::new();
        let (xv, av) = (tape.constant(x.clone()), tape.constant(adj.clone()));
        let vars = p.bind(&mut tape, false);
        let out = parallel_fuse(&mut tape, xv, av, &vars).unwrap();

        // branch-0 image of a zero input, run independently
        let mut t2 = Tape::new();
        let zin = t2.constant(Tensor::zeros(&[5, dim]));
        let av2 = t2.constant(adj);
        let bv = p.branches[0].blocks[0].bind(&mut t2, false);
        let img = gt_block_forward(&mut t2, zin, av2, &bv).unwrap();

        for r in 0..5 {
            for c in 0..dim {
                assert_eq!(tape.value(out).get2(r, c), t2.value(img).get2(r, c));
            }
        }
    }

    #[test]
    fn fuse_rejects_non_dividing_branch_count() {
        let mut rng = Rng::new(26);
        assert!(ParallelFuseParams::init(10, 3, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn block_params_roundtrip_through_named_map() {
        let mut rng = Rng::new(27);
        let p = GtBlockParams::init(8, 2, &mut rng).unwrap();
        let mut named = Vec::new();
        p.visit("blk.", &mut named);
        let map: std::collections::BTreeMap<String, Tensor> =
            named.into_iter().map(|(n, t)| (n, t.clone())).collect();
        let q = GtBlockParams::from_map("blk.", &map, 2).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        p.visit("blk.", &mut a);
        q.visit("blk.", &mut b);
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }
}
