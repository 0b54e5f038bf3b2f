//! Multi-task network: a shared 1-d convolutional backbone feeding a murmur
//! head and an outcome head from globally pooled features, plus an optional
//! per-frame segmentation head on the unpooled features.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Entry};
use crate::dataset::N_SEG_STATES;
use crate::error::{Error, Result};
use crate::optim::{AdamW, ParamUpdate};
use crate::rng::stream_seed;
use crate::tensor::{BnStats, Graph, Mode, TensorId};

pub const HEAD_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SeResnet,
    Multibranch,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::SeResnet => "se_resnet",
            Family::Multibranch => "multibranch",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se_resnet" | "se-resnet" => Ok(Family::SeResnet),
            "multibranch" => Ok(Family::Multibranch),
            other => Err(Error::invalid(format!(
                "unknown backbone family {other}; expected se_resnet or multibranch"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heads {
    Mtl2,
    Mtl3,
}

impl Heads {
    pub fn as_str(self) -> &'static str {
        match self {
            Heads::Mtl2 => "mtl2",
            Heads::Mtl3 => "mtl3",
        }
    }
}

impl FromStr for Heads {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mtl2" => Ok(Heads::Mtl2),
            "mtl3" => Ok(Heads::Mtl3),
            other => Err(Error::invalid(format!("unknown head set {other}; expected mtl2 or mtl3"))),
        }
    }
}

/// Multiplies a base kernel size by `scale` and rounds up to the next odd
/// number, keeping same-padding symmetric.
pub fn scaled_kernel(base: usize, scale: usize) -> usize {
    let k = base * scale;
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub family: Family,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stem_kernel: usize,
    pub block_kernel: usize,
    pub branch_kernels: Vec<usize>,
    pub kernel_scale: usize,
    pub se_reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            family: Family::SeResnet,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            stem_kernel: 7,
            block_kernel: 3,
            branch_kernels: vec![11, 21, 41],
            kernel_scale: 2,
            se_reduction: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("backbone: stage widths must be positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::invalid("backbone: need at least one block per stage"));
        }
        if self.stem_kernel == 0 || self.block_kernel == 0 {
            return Err(Error::invalid("backbone: kernel sizes must be positive"));
        }
        if self.family == Family::Multibranch
            && (self.branch_kernels.is_empty() || self.branch_kernels.iter().any(|&k| k == 0))
        {
            return Err(Error::invalid("backbone: branch kernels must be positive"));
        }
        if self.kernel_scale == 0 {
            return Err(Error::invalid("backbone: kernel_scale must be at least 1"));
        }
        if self.se_reduction == 0 {
            return Err(Error::invalid("backbone: se_reduction must be at least 1"));
        }
        Ok(())
    }

    /// Downsampling factor from input samples to backbone frames: the stem
    /// convolves at stride 2 and each stage transition halves once more.
    pub fn total_stride(&self) -> usize {
        1 << self.widths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: Heads,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            heads: Heads::Mtl3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One forward pass's logits plus the graph leaves backing each trainable
/// parameter, for routing gradients back into the model.
pub struct ForwardPass {
    pub murmur_logits: TensorId,
    pub outcome_logits: TensorId,
    pub seg_logits: Option<TensorId>,
    leaves: Vec<(usize, TensorId)>,
}

#[derive(Clone, Debug)]
pub struct MtlModel {
    pub config: ModelConfig,
    params: Vec<Param>,
    param_index: HashMap<String, usize>,
    bn: Vec<(String, BnStats)>,
    bn_index: HashMap<String, usize>,
    frozen: bool,
    backbone_forwards: u64,
}

enum Init {
    Uniform(f64),
    Const(f64),
}

/// Per-forward context tying the graph to the model's parameter store. When
/// `rng` is set, unknown parameters are created and initialized; otherwise an
/// unknown name is a config mismatch.
struct Net<'a> {
    g: &'a mut Graph,
    params: &'a mut Vec<Param>,
    param_index: &'a mut HashMap<String, usize>,
    bn: &'a mut Vec<(String, BnStats)>,
    bn_index: &'a mut HashMap<String, usize>,
    rng: Option<&'a mut StdRng>,
    backbone_trainable: bool,
    heads_trainable: bool,
    leaves: Vec<(usize, TensorId)>,
}

impl<'a> Net<'a> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<TensorId> {
        let idx = match self.param_index.get(name) {
            Some(&i) => {
                if self.params[i].shape != shape {
                    return Err(Error::invalid(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        self.params[i].shape
                    )));
                }
                i
            }
            None => {
                let rng = self.rng.as_mut().ok_or_else(|| {
                    Error::invalid(format!("parameter {name} missing from model"))
                })?;
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Uniform(bound) => {
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    Init::Const(v) => vec![v; n],
                };
                self.params.push(Param {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    data,
                });
                self.param_index.insert(name.to_string(), self.params.len() - 1);
                self.params.len() - 1
            }
        };
        let trainable = if name.starts_with("backbone.") {
            self.backbone_trainable
        } else {
            self.heads_trainable
        };
        let t = self.g.leaf(shape, self.params[idx].data.clone(), trainable)?;
        if trainable {
            self.leaves.push((idx, t));
        }
        Ok(t)
    }

    fn conv(
        &mut self,
        prefix: &str,
        x: TensorId,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<TensorId> {
        let c_in = self.g.shape(x)[1];
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let w = self.param(
            &format!("{prefix}.weight"),
            &[c_out, c_in, kernel],
            Init::Uniform(bound),
        )?;
        let b = self.param(&format!("{prefix}.bias"), &[c_out], Init::Uniform(bound))?;
        self.g.conv1d(x, w, b, stride)
    }

    fn linear(&mut self, prefix: &str, x: TensorId, out: usize) -> Result<TensorId> {
        let f = self.g.shape(x)[1];
        let bound = 1.0 / (f as f64).sqrt();
        let w = self.param(&format!("{prefix}.weight"), &[out, f], Init::Uniform(bound))?;
        let b = self.param(&format!("{prefix}.bias"), &[out], Init::Uniform(bound))?;
        self.g.linear(x, w, b)
    }

    fn batchnorm(&mut self, name: &str, x: TensorId, mode: Mode) -> Result<TensorId> {
        let c = self.g.shape(x)[1];
        let gamma = self.param(&format!("{name}.gamma"), &[c], Init::Const(1.0))?;
        let beta = self.param(&format!("{name}.beta"), &[c], Init::Const(0.0))?;
        let idx = match self.bn_index.get(name) {
            Some(&i) => i,
            None => {
                if self.rng.is_none() {
                    return Err(Error::invalid(format!("batchnorm {name} missing from model")));
                }
                self.bn.push((name.to_string(), BnStats::new(c)));
                self.bn_index.insert(name.to_string(), self.bn.len() - 1);
                self.bn.len() - 1
            }
        };
        self.g.batchnorm1d(x, gamma, beta, &mut self.bn[idx].1, mode)
    }

    /// Residual block: conv-BN-ReLU-conv-BN, squeeze-excitation gating, then
    /// a skip connection (1x1 projection when channel counts differ).
    fn se_block(
        &mut self,
        prefix: &str,
        x: TensorId,
        c_out: usize,
        kernel: usize,
        se_reduction: usize,
        mode: Mode,
    ) -> Result<TensorId> {
        let c_in = self.g.shape(x)[1];
        let mut y = self.conv(&format!("{prefix}.conv1"), x, c_out, kernel, 1)?;
        y = self.batchnorm(&format!("{prefix}.bn1"), y, mode)?;
        y = self.g.relu(y);
        y = self.conv(&format!("{prefix}.conv2"), y, c_out, kernel, 1)?;
        y = self.batchnorm(&format!("{prefix}.bn2"), y, mode)?;

        let hidden = (c_out / se_reduction).max(1);
        let mut s = self.g.global_avg_pool(y)?;
        s = self.linear(&format!("{prefix}.se.fc1"), s, hidden)?;
        s = self.g.relu(s);
        s = self.linear(&format!("{prefix}.se.fc2"), s, c_out)?;
        s = self.g.sigmoid(s);
        y = self.g.channel_scale(y, s)?;

        let skip = if c_in == c_out {
            x
        } else {
            let p = self.conv(&format!("{prefix}.proj.conv"), x, c_out, 1, 1)?;
            self.batchnorm(&format!("{prefix}.proj.bn"), p, mode)?
        };
        let sum = self.g.add(y, skip)?;
        Ok(self.g.relu(sum))
    }

    /// Two-layer head on pooled (N, F) features.
    fn head_mlp(&mut self, prefix: &str, x: TensorId, out: usize) -> Result<TensorId> {
        let h = self.linear(&format!("{prefix}.fc1"), x, HEAD_HIDDEN)?;
        let h = self.g.relu(h);
        self.linear(&format!("{prefix}.fc2"), h, out)
    }

    /// Per-frame head on unpooled (N, C, L) features via kernel-1 convs.
    fn head_conv(&mut self, prefix: &str, x: TensorId, out: usize) -> Result<TensorId> {
        let h = self.conv(&format!("{prefix}.conv1"), x, HEAD_HIDDEN, 1, 1)?;
        let h = self.g.relu(h);
        self.conv(&format!("{prefix}.conv2"), h, out, 1, 1)
    }
}

impl MtlModel {
    /// Creates a model with freshly initialized parameters. Weights draw from
    /// a uniform distribution with bound 1/sqrt(fan_in), seeded.
    pub fn build(config: ModelConfig, seed: u64) -> Result<MtlModel> {
        config.backbone.validate()?;
        let mut m = MtlModel {
            config,
            params: Vec::new(),
            param_index: HashMap::new(),
            bn: Vec::new(),
            bn_index: HashMap::new(),
            frozen: false,
            backbone_forwards: 0,
        };
        // A dummy forward at minimal length walks the architecture once,
        // creating every parameter in definition order.
        let mut rng = StdRng::seed_from_u64(stream_seed(seed, u64::MAX, 0));
        let mut g = Graph::new();
        let l = m.config.backbone.total_stride();
        let x = g.constant(&[1, 1, l], vec![0.0; l])?;
        m.run(&mut g, x, Mode::Eval, Some(&mut rng))?;
        m.backbone_forwards = 0;
        Ok(m)
    }

    /// Runs the network on a batch `x` of shape (N, 1, L) already present in
    /// `g`. In train mode every non-frozen parameter becomes a gradient leaf
    /// and batchnorm running statistics update.
    pub fn forward(&mut self, g: &mut Graph, x: TensorId, mode: Mode) -> Result<ForwardPass> {
        self.run(g, x, mode, None)
    }

    fn run(
        &mut self,
        g: &mut Graph,
        x: TensorId,
        mode: Mode,
        rng: Option<&mut StdRng>,
    ) -> Result<ForwardPass> {
        let sx = g.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != 1 {
            return Err(Error::invalid(format!("model: expected input (N, 1, L), got {sx:?}")));
        }
        let stride = self.config.backbone.total_stride();
        if sx[2] % stride != 0 {
            return Err(Error::invalid(format!(
                "model: input length {} not divisible by backbone stride {stride}",
                sx[2]
            )));
        }
        self.backbone_forwards += 1;
        let cfg = self.config.clone();
        let mut net = Net {
            g,
            params: &mut self.params,
            param_index: &mut self.param_index,
            bn: &mut self.bn,
            bn_index: &mut self.bn_index,
            rng,
            backbone_trainable: mode == Mode::Train && !self.frozen,
            heads_trainable: mode == Mode::Train,
            leaves: Vec::new(),
        };

        let w0 = cfg.backbone.widths[0];
        let mut h = match cfg.backbone.family {
            Family::SeResnet => {
                let k = scaled_kernel(cfg.backbone.stem_kernel, cfg.backbone.kernel_scale);
                let h = net.conv("backbone.stem.conv", x, w0, k, 2)?;
                let h = net.batchnorm("backbone.stem.bn", h, mode)?;
                net.g.relu(h)
            }
            Family::Multibranch => {
                let mut branches = Vec::with_capacity(cfg.backbone.branch_kernels.len());
                for (i, &bk) in cfg.backbone.branch_kernels.iter().enumerate() {
                    let k = scaled_kernel(bk, cfg.backbone.kernel_scale);
                    let h = net.conv(&format!("backbone.branch{i}.conv"), x, w0, k, 2)?;
                    let h = net.batchnorm(&format!("backbone.branch{i}.bn"), h, mode)?;
                    branches.push(net.g.relu(h));
                }
                net.g.concat(&branches, 1)?
            }
        };

        let block_kernel = scaled_kernel(cfg.backbone.block_kernel, cfg.backbone.kernel_scale);
        for (si, &width) in cfg.backbone.widths.iter().enumerate() {
            if si > 0 {
                h = net.g.avg_pool(h, 2, 2)?;
            }
            for b in 0..cfg.backbone.blocks_per_stage {
                h = net.se_block(
                    &format!("backbone.stage{si}.block{b}"),
                    h,
                    width,
                    block_kernel,
                    cfg.backbone.se_reduction,
                    mode,
                )?;
            }
        }

        let pooled = net.g.global_avg_pool(h)?;
        let murmur_logits = net.head_mlp("head.murmur", pooled, 3)?;
        let outcome_logits = net.head_mlp("head.outcome", pooled, 2)?;
        let seg_logits = match cfg.heads {
            Heads::Mtl3 => Some(net.head_conv("head.seg", h, N_SEG_STATES)?),
            Heads::Mtl2 => None,
        };
        Ok(ForwardPass {
            murmur_logits,
            outcome_logits,
            seg_logits,
            leaves: net.leaves,
        })
    }

    /// Steps the optimizer on every leaf of `pass` that received a gradient.
    /// Leaves without gradients (detached from the loss) are skipped.
    pub fn apply_gradients(
        &mut self,
        g: &Graph,
        pass: &ForwardPass,
        opt: &mut AdamW,
    ) -> Result<()> {
        let mut grads: HashMap<usize, &[f64]> = HashMap::new();
        for &(idx, leaf) in &pass.leaves {
            if let Some(grad) = g.grad(leaf) {
                grads.insert(idx, grad);
            }
        }
        let mut updates: Vec<ParamUpdate> = Vec::with_capacity(grads.len());
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(grad) = grads.remove(&i) {
                updates.push(ParamUpdate {
                    name: &p.name,
                    data: &mut p.data,
                    grad,
                });
            }
        }
        opt.step(&mut updates)
    }

    pub fn freeze_backbone(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze_backbone(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn backbone_forwards(&self) -> u64 {
        self.backbone_forwards
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out: Vec<Entry> = self
            .params
            .iter()
            .map(|p| Entry::new(format!("param/{}", p.name), p.shape.clone(), p.data.clone()))
            .collect();
        for (name, stats) in &self.bn {
            let c = stats.mean.len();
            out.push(Entry::new(format!("bn/{name}/mean"), vec![c], stats.mean.clone()));
            out.push(Entry::new(format!("bn/{name}/var"), vec![c], stats.var.clone()));
        }
        out
    }

    /// Restores parameters and batchnorm statistics from checkpoint entries.
    /// Entries with unrelated prefixes are ignored, so optimizer state can
    /// share the file.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<()> {
        let map: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        for p in &mut self.params {
            let key = format!("param/{}", p.name);
            let e = map
                .get(key.as_str())
                .ok_or_else(|| Error::invalid(format!("checkpoint missing parameter {}", p.name)))?;
            if e.shape != p.shape {
                return Err(Error::invalid(format!(
                    "checkpoint parameter {} has shape {:?}, expected {:?}",
                    p.name, e.shape, p.shape
                )));
            }
            p.data = e.data.clone();
        }
        for (name, stats) in &mut self.bn {
            for (field, dst) in [("mean", &mut stats.mean), ("var", &mut stats.var)] {
                let key = format!("bn/{name}/{field}");
                let e = map
                    .get(key.as_str())
                    .ok_or_else(|| Error::invalid(format!("checkpoint missing statistics {key}")))?;
                if e.data.len() != dst.len() {
                    return Err(Error::invalid(format!(
                        "checkpoint statistics {key} have {} channels, expected {}",
                        e.data.len(),
                        dst.len()
                    )));
                }
                *dst = e.data.clone();
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: &Path, config: ModelConfig) -> Result<MtlModel> {
        let entries = checkpoint::load(path)?;
        let mut m = MtlModel::build(config, 0)?;
        m.load_entries(&entries)?;
        Ok(m)
    }
}
