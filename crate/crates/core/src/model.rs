//! Model assembly: configuration, named parameters, seeded initialization,
//! graph registration and the full per-scene forward pass
//! (voxels -> BEV features -> gate -> fusion -> heads).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{extract_bev_graph, BackboneConfig};
use crate::diff::{BatchNormState, BnMode, Graph, RunningStatsUpdate, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{fuse, max_sigmoid_gate, FusionConfig};
use crate::geometry::{GridConfig, VoxelGrid};
use crate::heads;
use crate::heads::reg_channels;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Shared feature width `d` of BEV cells and text embeddings.
    pub dim: usize,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    /// Adds (vx, vy) regression channels when set.
    pub velocity: bool,
}

impl ModelConfig {
    pub fn validate(&self, grid: &GridConfig) -> Result<()> {
        grid.validate()?;
        self.backbone.validate(self.dim, grid.out_factor)?;
        self.fusion.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Learnable residual scale per sublayer (initialized to 1).
#[derive(Debug, Clone)]
pub struct ResScales {
    pub bev_self: Tensor,
    pub text_self: Tensor,
    pub text_to_bev: Tensor,
    pub bev_to_text: Tensor,
    pub ffn_bev: Tensor,
    pub ffn_text: Tensor,
}

#[derive(Debug, Clone)]
pub struct FusionBlockParams {
    pub bev_self: AttnParams,
    pub text_self: AttnParams,
    pub text_to_bev: AttnParams,
    pub bev_to_text: AttnParams,
    pub ffn_bev: FfnParams,
    pub ffn_text: FfnParams,
    pub res: ResScales,
}

#[derive(Debug, Clone)]
pub struct HeadsParams {
    pub contrastive_conv1: ConvParams,
    pub contrastive_conv2: ConvParams,
    pub loc_conv: ConvParams,
    pub loc_out: ConvParams,
    pub alpha: Tensor,
    pub beta: Tensor,
    pub bn_bev: BatchNormState,
    pub bn_text: BatchNormState,
}

/// Every parameter of the pipeline, traversable by name in a fixed order.
#[derive(Debug, Clone)]
pub struct Params {
    pub backbone: Vec<ConvParams>,
    pub fusion: Vec<FusionBlockParams>,
    pub heads: HeadsParams,
    pub step: u64,
}

fn uniform(shape: Vec<usize>, limit: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).unwrap()
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(vec![rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

fn attn_init(d: usize, rng: &mut ChaCha8Rng) -> AttnParams {
    AttnParams {
        wq: xavier(d, d, rng),
        wk: xavier(d, d, rng),
        wv: xavier(d, d, rng),
        wo: xavier(d, d, rng),
    }
}

fn ffn_init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> FfnParams {
    FfnParams {
        w1: xavier(d, hidden, rng),
        b1: Tensor::zeros(vec![hidden]),
        w2: xavier(hidden, d, rng),
        b2: Tensor::zeros(vec![d]),
    }
}

fn conv_init(kernel: [usize; 3], ci: usize, co: usize, rng: &mut ChaCha8Rng) -> ConvParams {
    let fan_in = (kernel[0] * kernel[1] * kernel[2] * ci) as f64;
    ConvParams {
        weight: uniform(
            vec![kernel[0], kernel[1], kernel[2], ci, co],
            (6.0 / fan_in).sqrt(),
            rng,
        ),
        bias: Tensor::zeros(vec![co]),
    }
}

impl Params {
    /// Seeded initialization; identical `(config, seed)` give identical
    /// parameters on every platform.
    pub fn init(cfg: &ModelConfig, grid: &GridConfig, seed: u64) -> Result<Self> {
        cfg.validate(grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;

        let mut backbone = Vec::new();
        let mut ci = 1;
        for &co in &cfg.backbone.channels {
            backbone.push(conv_init([3, 3, 3], ci, co, &mut rng));
            ci = co;
        }

        let mut fusion = Vec::new();
        for _ in 0..cfg.fusion.blocks {
            fusion.push(FusionBlockParams {
                bev_self: attn_init(d, &mut rng),
                text_self: attn_init(d, &mut rng),
                text_to_bev: attn_init(d, &mut rng),
                bev_to_text: attn_init(d, &mut rng),
                ffn_bev: ffn_init(d, cfg.fusion.ffn_hidden, &mut rng),
                ffn_text: ffn_init(d, cfg.fusion.ffn_hidden, &mut rng),
                res: ResScales {
                    bev_self: Tensor::scalar(1.0),
                    text_self: Tensor::scalar(1.0),
                    text_to_bev: Tensor::scalar(1.0),
                    bev_to_text: Tensor::scalar(1.0),
                    ffn_bev: Tensor::scalar(1.0),
                    ffn_text: Tensor::scalar(1.0),
                },
            });
        }

        let heads = HeadsParams {
            contrastive_conv1: conv_init([3, 3, 1], d, d, &mut rng),
            contrastive_conv2: conv_init([3, 3, 1], d, d, &mut rng),
            loc_conv: conv_init([3, 3, 1], d, d, &mut rng),
            loc_out: conv_init([1, 1, 1], d, reg_channels(cfg.velocity), &mut rng),
            // Start the similarity map in the soft part of the sigmoid with a
            // low-score prior: most cells are background.
            alpha: Tensor::scalar(1.0 / (d as f64).sqrt()),
            beta: Tensor::scalar(-2.0),
            bn_bev: BatchNormState::new(d),
            bn_text: BatchNormState::new(d),
        };

        Ok(Params { backbone, fusion, heads, step: 0 })
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.heads.bn_bev.mode = mode;
        self.heads.bn_text.mode = mode;
    }

    /// Learnable tensors in fixed traversal order.
    pub fn named_learnables(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.conv{}.weight", i), &c.weight));
            out.push((format!("backbone.conv{}.bias", i), &c.bias));
        }
        for (b, blk) in self.fusion.iter().enumerate() {
            for (name, attn) in [
                ("bev_self", &blk.bev_self),
                ("text_self", &blk.text_self),
                ("text_to_bev", &blk.text_to_bev),
                ("bev_to_text", &blk.bev_to_text),
            ] {
                out.push((format!("fusion.b{}.{}.wq", b, name), &attn.wq));
                out.push((format!("fusion.b{}.{}.wk", b, name), &attn.wk));
                out.push((format!("fusion.b{}.{}.wv", b, name), &attn.wv));
                out.push((format!("fusion.b{}.{}.wo", b, name), &attn.wo));
            }
            for (name, ffn) in [("ffn_bev", &blk.ffn_bev), ("ffn_text", &blk.ffn_text)] {
                out.push((format!("fusion.b{}.{}.w1", b, name), &ffn.w1));
                out.push((format!("fusion.b{}.{}.b1", b, name), &ffn.b1));
                out.push((format!("fusion.b{}.{}.w2", b, name), &ffn.w2));
                out.push((format!("fusion.b{}.{}.b2", b, name), &ffn.b2));
            }
            out.push((format!("fusion.b{}.rs.bev_self", b), &blk.res.bev_self));
            out.push((format!("fusion.b{}.rs.text_self", b), &blk.res.text_self));
            out.push((format!("fusion.b{}.rs.text_to_bev", b), &blk.res.text_to_bev));
            out.push((format!("fusion.b{}.rs.bev_to_text", b), &blk.res.bev_to_text));
            out.push((format!("fusion.b{}.rs.ffn_bev", b), &blk.res.ffn_bev));
            out.push((format!("fusion.b{}.rs.ffn_text", b), &blk.res.ffn_text));
        }
        let h = &self.heads;
        out.push(("heads.contrastive.c1.weight".into(), &h.contrastive_conv1.weight));
        out.push(("heads.contrastive.c1.bias".into(), &h.contrastive_conv1.bias));
        out.push(("heads.contrastive.c2.weight".into(), &h.contrastive_conv2.weight));
        out.push(("heads.contrastive.c2.bias".into(), &h.contrastive_conv2.bias));
        out.push(("heads.loc.conv.weight".into(), &h.loc_conv.weight));
        out.push(("heads.loc.conv.bias".into(), &h.loc_conv.bias));
        out.push(("heads.loc.out.weight".into(), &h.loc_out.weight));
        out.push(("heads.loc.out.bias".into(), &h.loc_out.bias));
        out.push(("heads.alpha".into(), &h.alpha));
        out.push(("heads.beta".into(), &h.beta));
        out.push(("heads.bn_bev.gamma".into(), &h.bn_bev.gamma));
        out.push(("heads.bn_bev.beta".into(), &h.bn_bev.beta));
        out.push(("heads.bn_text.gamma".into(), &h.bn_text.gamma));
        out.push(("heads.bn_text.beta".into(), &h.bn_text.beta));
        out
    }

    /// Mutable view, same names and order as [`Params::named_learnables`].
    pub fn named_learnables_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, c) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.conv{}.weight", i), &mut c.weight));
            out.push((format!("backbone.conv{}.bias", i), &mut c.bias));
        }
        for (b, blk) in self.fusion.iter_mut().enumerate() {
            for (name, attn) in [
                ("bev_self", &mut blk.bev_self),
                ("text_self", &mut blk.text_self),
                ("text_to_bev", &mut blk.text_to_bev),
                ("bev_to_text", &mut blk.bev_to_text),
            ] {
                out.push((format!("fusion.b{}.{}.wq", b, name), &mut attn.wq));
                out.push((format!("fusion.b{}.{}.wk", b, name), &mut attn.wk));
                out.push((format!("fusion.b{}.{}.wv", b, name), &mut attn.wv));
                out.push((format!("fusion.b{}.{}.wo", b, name), &mut attn.wo));
            }
            for (name, ffn) in [("ffn_bev", &mut blk.ffn_bev), ("ffn_text", &mut blk.ffn_text)] {
                out.push((format!("fusion.b{}.{}.w1", b, name), &mut ffn.w1));
                out.push((format!("fusion.b{}.{}.b1", b, name), &mut ffn.b1));
                out.push((format!("fusion.b{}.{}.w2", b, name), &mut ffn.w2));
                out.push((format!("fusion.b{}.{}.b2", b, name), &mut ffn.b2));
            }
            out.push((format!("fusion.b{}.rs.bev_self", b), &mut blk.res.bev_self));
            out.push((format!("fusion.b{}.rs.text_self", b), &mut blk.res.text_self));
            out.push((format!("fusion.b{}.rs.text_to_bev", b), &mut blk.res.text_to_bev));
            out.push((format!("fusion.b{}.rs.bev_to_text", b), &mut blk.res.bev_to_text));
            out.push((format!("fusion.b{}.rs.ffn_bev", b), &mut blk.res.ffn_bev));
            out.push((format!("fusion.b{}.rs.ffn_text", b), &mut blk.res.ffn_text));
        }
        let h = &mut self.heads;
        out.push(("heads.contrastive.c1.weight".into(), &mut h.contrastive_conv1.weight));
        out.push(("heads.contrastive.c1.bias".into(), &mut h.contrastive_conv1.bias));
        out.push(("heads.contrastive.c2.weight".into(), &mut h.contrastive_conv2.weight));
        out.push(("heads.contrastive.c2.bias".into(), &mut h.contrastive_conv2.bias));
        out.push(("heads.loc.conv.weight".into(), &mut h.loc_conv.weight));
        out.push(("heads.loc.conv.bias".into(), &mut h.loc_conv.bias));
        out.push(("heads.loc.out.weight".into(), &mut h.loc_out.weight));
        out.push(("heads.loc.out.bias".into(), &mut h.loc_out.bias));
        out.push(("heads.alpha".into(), &mut h.alpha));
        out.push(("heads.beta".into(), &mut h.beta));
        out.push(("heads.bn_bev.gamma".into(), &mut h.bn_bev.gamma));
        out.push(("heads.bn_bev.beta".into(), &mut h.bn_bev.beta));
        out.push(("heads.bn_text.gamma".into(), &mut h.bn_text.gamma));
        out.push(("heads.bn_text.beta".into(), &mut h.bn_text.beta));
        out
    }

    /// Non-learnable state that still belongs in checkpoints.
    pub fn named_buffers(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            ("heads.bn_bev.running_mean".into(), self.heads.bn_bev.running_mean.clone()),
            ("heads.bn_bev.running_var".into(), self.heads.bn_bev.running_var.clone()),
            ("heads.bn_text.running_mean".into(), self.heads.bn_text.running_mean.clone()),
            ("heads.bn_text.running_var".into(), self.heads.bn_text.running_var.clone()),
        ]
    }

    pub fn set_buffer(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let slot = match name {
            "heads.bn_bev.running_mean" => &mut self.heads.bn_bev.running_mean,
            "heads.bn_bev.running_var" => &mut self.heads.bn_bev.running_var,
            "heads.bn_text.running_mean" => &mut self.heads.bn_text.running_mean,
            "heads.bn_text.running_var" => &mut self.heads.bn_text.running_var,
            _ => return Err(Error::CheckpointSchema(name.to_string())),
        };
        if data.len() != slot.len() {
            return Err(Error::CheckpointFormat(format!(
                "buffer {} has {} entries, expected {}",
                name,
                data.len(),
                slot.len()
            )));
        }
        *slot = data;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ResScaleVars {
    pub bev_self: Var,
    pub text_self: Var,
    pub text_to_bev: Var,
    pub bev_to_text: Var,
    pub ffn_bev: Var,
    pub ffn_text: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionBlockVars {
    pub bev_self: AttnVars,
    pub text_self: AttnVars,
    pub text_to_bev: AttnVars,
    pub bev_to_text: AttnVars,
    pub ffn_bev: FfnVars,
    pub ffn_text: FfnVars,
    pub res: ResScaleVars,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadsVars {
    pub contrastive_conv1: ConvVars,
    pub contrastive_conv2: ConvVars,
    pub loc_conv: ConvVars,
    pub loc_out: ConvVars,
    pub alpha: Var,
    pub beta: Var,
    pub bn_bev_gamma: Var,
    pub bn_bev_beta: Var,
    pub bn_text_gamma: Var,
    pub bn_text_beta: Var,
}

/// Graph handles for every learnable, plus the flat `(name, Var)` list in
/// [`Params::named_learnables`] order (the optimizer walks both in step).
pub struct ParamVars {
    pub backbone: Vec<ConvVars>,
    pub fusion: Vec<FusionBlockVars>,
    pub heads: HeadsVars,
    pub ordered: Vec<(String, Var)>,
}

/// Register every learnable as a graph leaf.
pub fn register_params(g: &mut Graph, params: &Params, trainable: bool) -> ParamVars {
    let mut ordered: Vec<(String, Var)> = Vec::new();
    let mut reg = |g: &mut Graph, name: String, t: &Tensor| -> Var {
        let mut t = t.clone();
        t.set_requires_grad(trainable);
        let v = g.leaf(t);
        ordered.push((name, v));
        v
    };

    let backbone: Vec<ConvVars> = params
        .backbone
        .iter()
        .enumerate()
        .map(|(i, c)| ConvVars {
            weight: reg(g, format!("backbone.conv{}.weight", i), &c.weight),
            bias: reg(g, format!("backbone.conv{}.bias", i), &c.bias),
        })
        .collect();

    let mut fusion = Vec::new();
    for (b, blk) in params.fusion.iter().enumerate() {
        let mut attn = |g: &mut Graph, name: &str, a: &AttnParams| AttnVars {
            wq: reg(g, format!("fusion.b{}.{}.wq", b, name), &a.wq),
            wk: reg(g, format!("fusion.b{}.{}.wk", b, name), &a.wk),
            wv: reg(g, format!("fusion.b{}.{}.wv", b, name), &a.wv),
            wo: reg(g, format!("fusion.b{}.{}.wo", b, name), &a.wo),
        };
        let bev_self = attn(g, "bev_self", &blk.bev_self);
        let text_self = attn(g, "text_self", &blk.text_self);
        let text_to_bev = attn(g, "text_to_bev", &blk.text_to_bev);
        let bev_to_text = attn(g, "bev_to_text", &blk.bev_to_text);
        let mut ffn = |g: &mut Graph, name: &str, f: &FfnParams| FfnVars {
            w1: reg(g, format!("fusion.b{}.{}.w1", b, name), &f.w1),
            b1: reg(g, format!("fusion.b{}.{}.b1", b, name), &f.b1),
            w2: reg(g, format!("fusion.b{}.{}.w2", b, name), &f.w2),
            b2: reg(g, format!("fusion.b{}.{}.b2", b, name), &f.b2),
        };
        let ffn_bev = ffn(g, "ffn_bev", &blk.ffn_bev);
        let ffn_text = ffn(g, "ffn_text", &blk.ffn_text);
        let res = ResScaleVars {
            bev_self: reg(g, format!("fusion.b{}.rs.bev_self", b), &blk.res.bev_self),
            text_self: reg(g, format!("fusion.b{}.rs.text_self", b), &blk.res.text_self),
            text_to_bev: reg(g, format!("fusion.b{}.rs.text_to_bev", b), &blk.res.text_to_bev),
            bev_to_text: reg(g, format!("fusion.b{}.rs.bev_to_text", b), &blk.res.bev_to_text),
            ffn_bev: reg(g, format!("fusion.b{}.rs.ffn_bev", b), &blk.res.ffn_bev),
            ffn_text: reg(g, format!("fusion.b{}.rs.ffn_text", b), &blk.res.ffn_text),
        };
        fusion.push(FusionBlockVars {
            bev_self,
            text_self,
            text_to_bev,
            bev_to_text,
            ffn_bev,
            ffn_text,
            res,
        });
    }

    let h = &params.heads;
    let heads = HeadsVars {
        contrastive_conv1: ConvVars {
            weight: reg(g, "heads.contrastive.c1.weight".into(), &h.contrastive_conv1.weight),
            bias: reg(g, "heads.contrastive.c1.bias".into(), &h.contrastive_conv1.bias),
        },
        contrastive_conv2: ConvVars {
            weight: reg(g, "heads.contrastive.c2.weight".into(), &h.contrastive_conv2.weight),
            bias: reg(g, "heads.contrastive.c2.bias".into(), &h.contrastive_conv2.bias),
        },
        loc_conv: ConvVars {
            weight: reg(g, "heads.loc.conv.weight".into(), &h.loc_conv.weight),
            bias: reg(g, "heads.loc.conv.bias".into(), &h.loc_conv.bias),
        },
        loc_out: ConvVars {
            weight: reg(g, "heads.loc.out.weight".into(), &h.loc_out.weight),
            bias: reg(g, "heads.loc.out.bias".into(), &h.loc_out.bias),
        },
        alpha: reg(g, "heads.alpha".into(), &h.alpha),
        beta: reg(g, "heads.beta".into(), &h.beta),
        bn_bev_gamma: reg(g, "heads.bn_bev.gamma".into(), &h.bn_bev.gamma),
        bn_bev_beta: reg(g, "heads.bn_bev.beta".into(), &h.bn_bev.beta),
        bn_text_gamma: reg(g, "heads.bn_text.gamma".into(), &h.bn_text.gamma),
        bn_text_beta: reg(g, "heads.bn_text.beta".into(), &h.bn_text.beta),
    };

    ParamVars { backbone, fusion, heads, ordered }
}

/// Which batchnorm site a running-stats update belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSite {
    Bev,
    Text,
}

pub struct SceneForward {
    /// `n×m` similarity logits.
    pub similarity: Var,
    /// `n×c` regression map.
    pub regression: Var,
    /// `n×d` contrastive features (pre-BN), the BEV side of Eq-style scoring.
    pub contrastive_feat: Var,
    /// Fused text features `m×d`.
    pub fused_text: Var,
    /// Train-mode batch statistics to commit, in application order.
    pub bn_updates: Vec<(BnSite, RunningStatsUpdate)>,
}

/// Full forward pass for one scene. `text_var` is the `m×d` embedding matrix
/// already registered on the graph (frozen: embeddings get no gradients).
pub fn forward_scene(
    g: &mut Graph,
    vars: &ParamVars,
    params: &Params,
    grid: &VoxelGrid,
    text_var: Var,
    gcfg: &GridConfig,
    mcfg: &ModelConfig,
) -> Result<SceneForward> {
    let (h, w) = gcfg.bev_dims()?;
    let d = mcfg.dim;
    if g.value(text_var).cols() != d {
        return Err(Error::ShapeMismatch {
            op: "forward_scene",
            details: format!("text dim {} vs model dim {}", g.value(text_var).cols(), d),
        });
    }

    let occ = g.constant(grid_to_tensor(grid));
    let bev = extract_bev_graph(g, occ, &vars.backbone, &mcfg.backbone.strides, (h, w), d)?;

    let gated = max_sigmoid_gate(g, bev, text_var)?;
    let fused = fuse(g, gated, text_var, &vars.fusion, &mcfg.fusion, (h, w))?;

    let cfeat = heads::contrastive_head(
        g,
        fused.bev,
        &vars.heads.contrastive_conv1,
        &vars.heads.contrastive_conv2,
        (h, w),
    )?;
    let mut bn_updates = Vec::new();
    let (similarity, up_bev, up_text) = heads::similarity(
        g,
        cfeat,
        fused.text,
        vars.heads.alpha,
        vars.heads.beta,
        (vars.heads.bn_bev_gamma, vars.heads.bn_bev_beta, &params.heads.bn_bev),
        (vars.heads.bn_text_gamma, vars.heads.bn_text_beta, &params.heads.bn_text),
    )?;
    if let Some(u) = up_bev {
        bn_updates.push((BnSite::Bev, u));
    }
    if let Some(u) = up_text {
        bn_updates.push((BnSite::Text, u));
    }

    let regression = heads::localization_head(
        g,
        fused.bev,
        &vars.heads.loc_conv,
        &vars.heads.loc_out,
        (h, w),
    )?;

    Ok(SceneForward {
        similarity,
        regression,
        contrastive_feat: cfeat,
        fused_text: fused.text,
        bn_updates,
    })
}

/// Occupancy grid as a `[X,Y,Z,1]` feature tensor.
pub fn grid_to_tensor(grid: &VoxelGrid) -> Tensor {
    let data: Vec<f64> = grid.occupancy.iter().map(|&v| v as f64).collect();
    Tensor::new(vec![grid.dims[0], grid.dims[1], grid.dims[2], 1], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup() -> (ModelConfig, GridConfig) {
        let grid = GridConfig {
            range_min: [-4.8, -4.8],
            range_max: [4.8, 4.8],
            z_bounds: [0.0, 1.2],
            voxel_size: 0.3,
            out_factor: 2,
        };
        let cfg = ModelConfig {
            dim: 8,
            backbone: BackboneConfig { channels: vec![4, 8], strides: vec![2, 1] },
            fusion: FusionConfig { blocks: 1, window: 4, ffn_hidden: 16, pre_norm: false },
            velocity: false,
        };
        (cfg, grid)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let (cfg, grid) = tiny_setup();
        let a = Params::init(&cfg, &grid, 7).unwrap();
        let b = Params::init(&cfg, &grid, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.named_learnables().iter().zip(b.named_learnables().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
        let c = Params::init(&cfg, &grid, 8).unwrap();
        assert_ne!(
            a.named_learnables()[0].1.data(),
            c.named_learnables()[0].1.data()
        );
    }

    #[test]
    fn registration_order_matches_named_learnables() {
        let (cfg, grid) = tiny_setup();
        let mut params = Params::init(&cfg, &grid, 7).unwrap();
        let mut g = Graph::new();
        let vars = register_params(&mut g, &params, true);
        let reg_names: Vec<&String> = vars.ordered.iter().map(|(n, _)| n).collect();
        let learn_names_owned = params.named_learnables();
        let learn_names: Vec<&String> = learn_names_owned.iter().map(|(n, _)| n).collect();
        assert_eq!(reg_names, learn_names);
        let mut_names_owned = params.named_learnables_mut();
        let mut_names: Vec<&String> = mut_names_owned.iter().map(|(n, _)| n).collect();
        let reg_names2: Vec<&String> = vars.ordered.iter().map(|(n, _)| n).collect();
        assert_eq!(reg_names2, mut_names);
    }
}
