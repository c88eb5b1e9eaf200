//! Flat key=value configuration covering every tunable default: network
//! dims, branch/head layout, template tokens, regression iterations, loss
//! weights, optimizer settings, seeds, topology and source mode.
//!
//! Custom topologies are expressed inline with `topology = custom` plus
//! `topology_joint_names`, `topology_edges` ("parent-child,..."), and
//! `topology_root`.

use crate::error::{Error, Result};
use crate::skeleton::{self, SkeletonTopology};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceMode {
    /// PSE consumes lifter features F (end-to-end).
    Features,
    /// PSE consumes 3D joints P (modular).
    Joints,
}

impl SourceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(SourceMode::Features),
            "joints" => Ok(SourceMode::Joints),
            _ => Err(Error::Config(format!("source_mode must be features|joints, got '{s}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SourceMode::Features => "features",
            SourceMode::Joints => "joints",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            _ => Err(Error::Config(format!("loss must be l1|l2, got '{s}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    LifterOnly,
    PseOnly,
    EndToEnd,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lifter-only" => Ok(TrainMode::LifterOnly),
            "pse-only" => Ok(TrainMode::PseOnly),
            "end-to-end" => Ok(TrainMode::EndToEnd),
            _ => Err(Error::Config(format!(
                "mode must be lifter-only|pse-only|end-to-end, got '{s}'"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::LifterOnly => "lifter-only",
            TrainMode::PseOnly => "pse-only",
            TrainMode::EndToEnd => "end-to-end",
        }
    }
}

/// Network and asset layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub topology: SkeletonTopology,
    /// Feature width D.
    pub dim: usize,
    /// Parallel branches B in the lifter trunk (must divide D).
    pub branches: usize,
    pub blocks_per_branch: usize,
    /// Attention heads per block (must divide the block dim).
    pub heads: usize,
    /// Transformer blocks in each PSE branch.
    pub pse_blocks: usize,
    /// Mean-mesh template tokens T.
    pub template_tokens: usize,
    /// Iterative-regression steps.
    pub n_iter: usize,
    pub source_mode: SourceMode,
    pub tie_branch_weights: bool,
    /// Seed for weight init, synthetic data and training order.
    pub seed: u64,
    /// Desk body: vertex count and generator seed.
    pub body_vertices: usize,
    pub body_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            topology: skeleton::h36m17_topology(),
            dim: 32,
            branches: 4,
            blocks_per_branch: 2,
            heads: 2,
            pse_blocks: 2,
            template_tokens: 16,
            n_iter: 3,
            source_mode: SourceMode::Features,
            tie_branch_weights: false,
            seed: 42,
            body_vertices: 120,
            body_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn joint_count(&self) -> usize {
        self.topology.joint_count()
    }

    pub fn branch_dim(&self) -> usize {
        self.dim / self.branches
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.branches == 0 {
            return Err(Error::Config("dim and branches must be positive".into()));
        }
        if self.dim % self.branches != 0 {
            return Err(Error::Config(format!(
                "branches {} must divide dim {}",
                self.branches, self.dim
            )));
        }
        if self.heads == 0 || self.branch_dim() % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide the branch dim {}",
                self.heads,
                self.branch_dim()
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide dim {} (PSE blocks)",
                self.heads, self.dim
            )));
        }
        if self.blocks_per_branch == 0 || self.pse_blocks == 0 {
            return Err(Error::Config("block counts must be positive".into()));
        }
        if self.template_tokens == 0 {
            return Err(Error::Config("template_tokens must be at least 1".into()));
        }
        if self.n_iter == 0 {
            return Err(Error::Config("n_iter must be at least 1".into()));
        }
        if self.body_vertices < 2 * crate::body_model::SMPL_JOINTS {
            return Err(Error::Config(format!(
                "body_vertices {} too small; need at least {}",
                self.body_vertices,
                2 * crate::body_model::SMPL_JOINTS
            )));
        }
        Ok(())
    }
}

/// Training loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda_3d: f64,
    pub lambda_2d: f64,
    pub lambda_theta: f64,
    pub lambda_beta: f64,
    pub lambda_vert: f64,
    pub loss: LossKind,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub synth_samples: usize,
    pub noise_sigma: f64,
    /// Write an intermediate checkpoint every k steps (0 = final only).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::EndToEnd,
            lambda_3d: 1.0,
            lambda_2d: 0.5,
            lambda_theta: 1.0,
            lambda_beta: 0.1,
            lambda_vert: 0.5,
            loss: LossKind::L1,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            steps: 2000,
            synth_samples: 32,
            noise_sigma: 0.0,
            checkpoint_every: 0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_3d", self.lambda_3d),
            ("lambda_2d", self.lambda_2d),
            ("lambda_theta", self.lambda_theta),
            ("lambda_beta", self.lambda_beta),
            ("lambda_vert", self.lambda_vert),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.synth_samples == 0 {
            return Err(Error::Config("batch_size and synth_samples must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{raw}'", lineno + 1))
            })?;
            if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key '{}'", k.trim())));
            }
        }
        Config::from_pairs(kv)
    }

    fn from_pairs(mut kv: BTreeMap<String, String>) -> Result<Config> {
        let mut cfg = Config::default();

        fn take_parse<T: std::str::FromStr>(
            kv: &mut BTreeMap<String, String>,
            key: &str,
            slot: &mut T,
        ) -> Result<()> {
            if let Some(v) = kv.remove(key) {
                *slot = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))?;
            }
            Ok(())
        }

        // topology first: it may need its own auxiliary keys
        let topo_name = kv.remove("topology").unwrap_or_else(|| skeleton::H36M17.into());
        cfg.model.topology = if topo_name == "custom" {
            let joint_names: Vec<String> = kv
                .remove("topology_joint_names")
                .ok_or_else(|| Error::Config("topology = custom needs topology_joint_names".into()))?
                .split(',')
                .map(|s| s.trim().to_string())
                .collect();
            let edges_raw = kv
                .remove("topology_edges")
                .ok_or_else(|| Error::Config("topology = custom needs topology_edges".into()))?;
            let mut edges = Vec::new();
            for part in edges_raw.split(',') {
                let (a, b) = part
                    .trim()
                    .split_once('-')
                    .ok_or_else(|| Error::Config(format!("bad edge '{part}', expected a-b")))?;
                let pa = a.trim().parse().map_err(|_| Error::Config(format!("bad edge '{part}'")))?;
                let pb = b.trim().parse().map_err(|_| Error::Config(format!("bad edge '{part}'")))?;
                edges.push((pa, pb));
            }
            let root = kv
                .remove("topology_root")
                .map(|v| v.parse().map_err(|_| Error::Config(format!("bad topology_root '{v}'"))))
                .transpose()?
                .unwrap_or(0);
            SkeletonTopology::new("custom", joint_names, edges, root)?
        } else {
            skeleton::topology_by_name(&topo_name)?
        };

        take_parse(&mut kv, "d", &mut cfg.model.dim)?;
        take_parse(&mut kv, "branches", &mut cfg.model.branches)?;
        take_parse(&mut kv, "blocks_per_branch", &mut cfg.model.blocks_per_branch)?;
        take_parse(&mut kv, "heads", &mut cfg.model.heads)?;
        take_parse(&mut kv, "pse_blocks", &mut cfg.model.pse_blocks)?;
        take_parse(&mut kv, "template_tokens", &mut cfg.model.template_tokens)?;
        take_parse(&mut kv, "n_iter", &mut cfg.model.n_iter)?;
        if let Some(v) = kv.remove("source_mode") {
            cfg.model.source_mode = SourceMode::parse(&v)?;
        }
        take_parse(&mut kv, "tie_branch_weights", &mut cfg.model.tie_branch_weights)?;
        take_parse(&mut kv, "seed", &mut cfg.model.seed)?;
        take_parse(&mut kv, "body_vertices", &mut cfg.model.body_vertices)?;
        take_parse(&mut kv, "body_seed", &mut cfg.model.body_seed)?;
        cfg.train.seed = cfg.model.seed;

        if let Some(v) = kv.remove("mode") {
            cfg.train.mode = TrainMode::parse(&v)?;
        }
        take_parse(&mut kv, "lambda_3d", &mut cfg.train.lambda_3d)?;
        take_parse(&mut kv, "lambda_2d", &mut cfg.train.lambda_2d)?;
        take_parse(&mut kv, "lambda_theta", &mut cfg.train.lambda_theta)?;
        take_parse(&mut kv, "lambda_beta", &mut cfg.train.lambda_beta)?;
        take_parse(&mut kv, "lambda_vert", &mut cfg.train.lambda_vert)?;
        if let Some(v) = kv.remove("loss") {
            cfg.train.loss = LossKind::parse(&v)?;
        }
        take_parse(&mut kv, "lr", &mut cfg.train.lr)?;
        take_parse(&mut kv, "adam_beta1", &mut cfg.train.adam_beta1)?;
        take_parse(&mut kv, "adam_beta2", &mut cfg.train.adam_beta2)?;
        take_parse(&mut kv, "adam_eps", &mut cfg.train.adam_eps)?;
        take_parse(&mut kv, "batch_size", &mut cfg.train.batch_size)?;
        take_parse(&mut kv, "steps", &mut cfg.train.steps)?;
        take_parse(&mut kv, "synth_samples", &mut cfg.train.synth_samples)?;
        take_parse(&mut kv, "noise_sigma", &mut cfg.train.noise_sigma)?;
        take_parse(&mut kv, "checkpoint_every", &mut cfg.train.checkpoint_every)?;

        if let Some(unknown) = kv.keys().next() {
            return Err(Error::Config(format!("unknown config key '{unknown}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Render in the key=value format; `parse` of the result reproduces the
    /// config exactly.
    pub fn to_config_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let builtin = skeleton::default_topologies().contains_key(&m.topology.name);
        if builtin {
            let _ = writeln!(s, "topology = {}", m.topology.name);
        } else {
            let _ = writeln!(s, "topology = custom");
            let _ = writeln!(s, "topology_joint_names = {}", m.topology.joint_names.join(","));
            let edges: Vec<String> =
                m.topology.edges.iter().map(|(a, b)| format!("{a}-{b}")).collect();
            let _ = writeln!(s, "topology_edges = {}", edges.join(","));
            let _ = writeln!(s, "topology_root = {}", m.topology.root);
        }
        let _ = writeln!(s, "d = {}", m.dim);
        let _ = writeln!(s, "branches = {}", m.branches);
        let _ = writeln!(s, "blocks_per_branch = {}", m.blocks_per_branch);
        let _ = writeln!(s, "heads = {}", m.heads);
        let _ = writeln!(s, "pse_blocks = {}", m.pse_blocks);
        let _ = writeln!(s, "template_tokens = {}", m.template_tokens);
        let _ = writeln!(s, "n_iter = {}", m.n_iter);
        let _ = writeln!(s, "source_mode = {}", m.source_mode.as_str());
        let _ = writeln!(s, "tie_branch_weights = {}", m.tie_branch_weights);
        let _ = writeln!(s, "seed = {}", m.seed);
        let _ = writeln!(s, "body_vertices = {}", m.body_vertices);
        let _ = writeln!(s, "body_seed = {}", m.body_seed);
        let _ = writeln!(s, "mode = {}", t.mode.as_str());
        let _ = writeln!(s, "lambda_3d = {}", t.lambda_3d);
        let _ = writeln!(s, "lambda_2d = {}", t.lambda_2d);
        let _ = writeln!(s, "lambda_theta = {}", t.lambda_theta);
        let _ = writeln!(s, "lambda_beta = {}", t.lambda_beta);
        let _ = writeln!(s, "lambda_vert = {}", t.lambda_vert);
        let _ = writeln!(s, "loss = {}", t.loss.as_str());
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "adam_beta1 = {}", t.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", t.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", t.adam_eps);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "synth_samples = {}", t.synth_samples);
        let _ = writeln!(s, "noise_sigma = {}", t.noise_sigma);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        super::atomic_write(path.as_ref(), self.to_config_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_text() {
        let cfg = Config::default();
        let text = cfg.to_config_string();
        let back = Config::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = Config::parse("# a comment\n\nd = 16  # trailing\nbranches = 2\n").unwrap();
        assert_eq!(cfg.model.dim, 16);
        assert_eq!(cfg.model.branches, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("dd = 3\n").is_err());
    }

    #[test]
    fn divisibility_is_enforced() {
        assert!(Config::parse("d = 30\nbranches = 4\n").is_err());
        assert!(Config::parse("d = 32\nbranches = 4\nheads = 3\n").is_err());
    }

    #[test]
    fn custom_topology_roundtrips_bit_exactly() {
        let text = "topology = custom\ntopology_joint_names = a,b,c\ntopology_edges = 0-1,1-2\ntopology_root = 0\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.model.joint_count(), 3);
        let back = Config::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(cfg.model.topology, back.model.topology);
    }

    #[test]
    fn builtin_topologies_roundtrip_bit_exactly() {
        for name in [skeleton::H36M17, skeleton::COCO17] {
            let mut cfg = Config::default();
            cfg.model.topology = skeleton::topology_by_name(name).unwrap();
            let back = Config::parse(&cfg.to_config_string()).unwrap();
            assert_eq!(cfg.model.topology, back.model.topology);
        }
    }

    #[test]
    fn bad_enum_values_are_config_errors() {
        assert!(Config::parse("source_mode = nope\n").is_err());
        assert!(Config::parse("mode = sideways\n").is_err());
        assert!(Config::parse("loss = huber\n").is_err());
    }

    #[test]
    fn negative_lambda_is_rejected() {
        assert!(Config::parse("lambda_3d = -0.5\n").is_err());
    }
}
