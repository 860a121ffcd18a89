use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;
use serde::Serialize;

use super::backbone::{resize_frame, stub_decode, to_tensor, StubBackbone};
use super::config::PipelineConfig;
use crate::autodiff::{Tape, Var};
use crate::cma;
use crate::ctnsr;
use crate::dense::{augment_context, augment_context_tape, dense_partition, vp_patch, vp_region, VpRegion};
use crate::error::{invalid, shape_err, Result};
use crate::exec::Exec;
use crate::layers::{take, take_linear, take_qkv, Linear, Qkv};
use crate::motion::{dynamic_context, dynamic_context_tape, patch_vp_or_center, sample_plan, Neighbor, PatchGrid};
use crate::proximity::proximity_map;
use crate::raster::GrayImage;
use crate::tensor::Tensor;
use crate::vp::{detect_vp_batch, VpEstimate};

/// Every learnable tensor of the stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub motion: Qkv<T>,
    pub dense: Qkv<T>,
    /// Class queries `c×K`.
    pub queries: T,
    pub context: Qkv<T>,
    pub layers: Vec<Qkv<T>>,
    pub head_context: Linear<T>,
    pub head_detail: Linear<T>,
}

impl ModelParams<Tensor> {
    pub fn seeded(cfg: &PipelineConfig) -> Result<Self> {
        let (c, k) = (cfg.channels, cfg.classes);
        let mut rng = SplitMix64::seed_from_u64(cfg.seed ^ 0x005E_ED0F_9A7A);
        let motion = Qkv::seeded(c, &mut rng)?;
        let dense = Qkv::seeded(c, &mut rng)?;
        let q: Vec<f32> = (0..c * k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let queries = Tensor::new(&[c, k], q)?;
        let context = Qkv::seeded(c, &mut rng)?;
        let layers = (0..cfg.motion_layers)
            .map(|_| Qkv::seeded(c, &mut rng))
            .collect::<Result<_>>()?;
        Ok(ModelParams {
            motion,
            dense,
            queries,
            context,
            layers,
            head_context: Linear::seeded(k, c, 1.0, &mut rng)?,
            head_detail: Linear::seeded(k, c, 1.0, &mut rng)?,
        })
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.visit().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn from_named(mut store: BTreeMap<String, Tensor>, cfg: &PipelineConfig) -> Result<Self> {
        let (c, k) = (cfg.channels, cfg.classes);
        let params = ModelParams {
            motion: take_qkv(&mut store, "motion", c)?,
            dense: take_qkv(&mut store, "dense", c)?,
            queries: take(&mut store, "queries", &[c, k])?,
            context: take_qkv(&mut store, "context", c)?,
            layers: (0..cfg.motion_layers)
                .map(|i| take_qkv(&mut store, &format!("layers.{i}"), c))
                .collect::<Result<_>>()?,
            head_context: take_linear(&mut store, "head_context", k, c)?,
            head_detail: take_linear(&mut store, "head_detail", k, c)?,
        };
        if let Some(extra) = store.keys().next() {
            return invalid(format!("unexpected parameter {extra}"));
        }
        Ok(params)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        ctnsr::save_named(dir, &self.to_named())
    }

    pub fn load(dir: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<Self> {
        Self::from_named(ctnsr::load_named(dir)?, cfg)
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            motion: self.motion.map(f),
            dense: self.dense.map(f),
            queries: f(&self.queries),
            context: self.context.map(f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            head_context: self.head_context.map(f),
            head_detail: self.head_detail.map(f),
        }
    }

    /// Named leaves in a fixed order.
    pub fn visit(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.motion.visit("motion", &mut out);
        self.dense.visit("dense", &mut out);
        out.push(("queries".to_string(), &self.queries));
        self.context.visit("context", &mut out);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), &mut out);
        }
        self.head_context.visit("head_context", &mut out);
        self.head_detail.visit("head_detail", &mut out);
        out
    }

    /// Same order as [`ModelParams::visit`].
    pub fn visit_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.motion.visit_mut("motion", &mut out);
        self.dense.visit_mut("dense", &mut out);
        out.push(("queries".to_string(), &mut self.queries));
        self.context.visit_mut("context", &mut out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), &mut out);
        }
        self.head_context.visit_mut("head_context", &mut out);
        self.head_detail.visit_mut("head_detail", &mut out);
        out
    }
}

/// Everything the learnable part of the stack consumes, computed once per
/// clip: detections, frozen features, sampling plans and the proximity bias.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub height: usize,
    pub width: usize,
    pub vps: Vec<VpEstimate>,
    /// Patch-level vanishing points, centre fallback for failed detections.
    pub patch_vps: Vec<(f64, f64)>,
    /// Context features `c×h×w` of every frame, current frame last.
    pub context: Vec<Tensor>,
    /// Full-resolution features `c×hd×wd` of the current frame.
    pub detail: Tensor,
    /// Proximity bias `[h·w]` of the current frame.
    pub proximity: Tensor,
    pub region: VpRegion,
    pub plan: Vec<Vec<Vec<usize>>>,
    pub grid: PatchGrid,
}

impl Prepared {
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let s = self.context[0].shape();
        (s[0], s[1], s[2])
    }

    /// Time stamp of the current frame; frame `i` sits at `i·k`.
    pub fn time(&self, cfg: &PipelineConfig) -> i64 {
        ((self.context.len() - 1) * cfg.interval) as i64
    }
}

/// Detects vanishing points and extracts features for a clip of frames
/// `interval` apart, oldest first.
pub fn prepare(frames: &[GrayImage], cfg: &PipelineConfig, backbone: &StubBackbone, exec: Exec) -> Result<Prepared> {
    cfg.validate()?;
    if frames.len() < 2 {
        return invalid("the pipeline needs the current frame and at least one earlier frame");
    }
    let (height, width) = frames[0].dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != (height, width)) {
        return shape_err(format!("frames of {:?} and {:?}", (height, width), f.dims()));
    }
    if backbone.patch() != cfg.backbone_patch || backbone.channels() != cfg.channels {
        return invalid("backbone does not match the configuration");
    }
    let (ch, cw) = cfg.context_dims(height, width)?;
    let vps = detect_vp_batch(frames, &cfg.vp(), exec)?;
    let context = exec
        .map(frames.len(), |i| {
            backbone.features(&resize_frame(&frames[i], ch, cw)?, Exec::Sequential)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let current = frames.last().expect("two or more frames");
    let detail = backbone.features(&to_tensor(current)?, exec)?;
    let (_, h, w) = context[0].dims3()?;
    let s = cfg.patch_size;
    let grid = PatchGrid::new(h, w, s)?;
    let patch_vps = vps
        .iter()
        .map(|vp| patch_vp_or_center(vp, (height, width), (h, w), s))
        .collect::<Result<Vec<_>>>()?;
    let last = *vps.last().expect("two or more frames");
    let pixel_vp = if last.valid {
        (last.x, last.y)
    } else {
        ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    };
    let proximity = proximity_map(pixel_vp, height, width, cfg.proximity)?.at_resolution(h, w)?;
    let current_patch = *patch_vps.last().expect("two or more frames");
    let region = vp_region(vp_patch(current_patch, grid), cfg.region_a, cfg.region_b, grid)?;
    let n = frames.len();
    let neighbors: Vec<(f64, f64, i64)> = (0..n - 1)
        .map(|i| (patch_vps[i].0, patch_vps[i].1, (i * cfg.interval) as i64))
        .collect();
    let plan = sample_plan(grid, ((n - 1) * cfg.interval) as i64, &neighbors, &cfg.motion())?;
    Ok(Prepared {
        height,
        width,
        vps,
        patch_vps,
        context,
        detail,
        proximity,
        region,
        plan,
        grid,
    })
}

/// Predictions and intermediates of one clip.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Context, detail and fused logits, `K×H×W`.
    pub context_logits: Tensor,
    pub detail_logits: Tensor,
    pub fused_logits: Tensor,
    /// Squashed detail attention `K×h×w`.
    pub gate: Tensor,
    /// Dynamic and augmented dynamic context, `c×h×w`.
    pub dynamic: Tensor,
    pub augmented: Tensor,
}

pub fn forward(params: &ModelParams, prep: &Prepared, cfg: &PipelineConfig, exec: Exec) -> Result<PipelineOutput> {
    let current = prep.context.last().expect("prepared clips hold two or more frames");
    let n = prep.context.len();
    let dynamic = if cfg.use_motion {
        let neighbors: Vec<Neighbor<'_>> = (0..n - 1)
            .map(|i| Neighbor {
                features: &prep.context[i],
                vp: prep.patch_vps[i],
                time: (i * cfg.interval) as i64,
            })
            .collect();
        dynamic_context(current, prep.time(cfg), &neighbors, &cfg.motion(), &params.motion, exec)?
    } else {
        current.clone()
    };
    let augmented = if cfg.use_dense {
        augment_context(&dynamic, &dense_partition(current, &prep.region)?, &params.dense)?
    } else {
        dynamic.clone()
    };
    let (h, w) = (prep.height, prep.width);
    let context_logits = stub_decode(current, &params.head_context, h, w)?;
    let detail_logits = stub_decode(&prep.detail, &params.head_detail, h, w)?;
    let qc = cma::contextualize_queries(&params.queries, current, &prep.proximity, &params.context)?;
    let merged = cma::motion_attention(&qc, &augmented, &prep.proximity, &params.layers)?;
    let (_, gate) = cma::detail_attention_map(&merged, current)?;
    let fused_logits = cma::fuse_predictions(&context_logits, &detail_logits, &gate)?;
    Ok(PipelineOutput {
        context_logits,
        detail_logits,
        fused_logits,
        gate,
        dynamic,
        augmented,
    })
}

/// Training loss of one clip.
pub fn loss(params: &ModelParams, prep: &Prepared, labels: &[u16], cfg: &PipelineConfig, exec: Exec) -> Result<f64> {
    let out = forward(params, prep, cfg, exec)?;
    cma::total_loss(&out.fused_logits, &out.detail_logits, labels, cfg.lambda_d)
}

/// Variables of a taped forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TapedForward {
    pub fused: Var,
    pub detail: Var,
    pub gate: Var,
    pub loss: Var,
}

fn decode_tape(
    tape: &mut Tape,
    features: Var,
    head: &Linear<Var>,
    dims: (usize, usize),
    out: (usize, usize),
) -> Result<Var> {
    let logits = head.apply(tape, features)?;
    let k = tape.shape(logits)[0];
    let logits = tape.reshape(logits, &[k, dims.0, dims.1])?;
    tape.resize(logits, out.0, out.1)
}

/// Records the forward pass and loss of one clip on `tape`.
pub fn forward_tape(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    prep: &Prepared,
    labels: Arc<[u16]>,
    cfg: &PipelineConfig,
) -> Result<TapedForward> {
    let (c, h, w) = prep.feature_dims();
    let flat = |t: &Tensor| t.clone().reshape(&[c, h * w]);
    let n = prep.context.len();
    let current = tape.leaf(flat(&prep.context[n - 1])?);
    let bias = tape.leaf(prep.proximity.clone());
    let dynamic = if cfg.use_motion {
        let neighbors = prep.context[..n - 1]
            .iter()
            .map(|f| Ok(tape.leaf(flat(f)?)))
            .collect::<Result<Vec<_>>>()?;
        dynamic_context_tape(tape, current, &neighbors, &prep.plan, prep.grid, &params.motion)?
    } else {
        current
    };
    let augmented = if cfg.use_dense {
        augment_context_tape(tape, dynamic, current, &prep.region.columns(w), &params.dense)?
    } else {
        dynamic
    };
    let out = (prep.height, prep.width);
    let context = decode_tape(tape, current, &params.head_context, (h, w), out)?;
    let (_, hd, wd) = prep.detail.dims3()?;
    let detail_in = tape.leaf(prep.detail.clone().reshape(&[c, hd * wd])?);
    let detail = decode_tape(tape, detail_in, &params.head_detail, (hd, wd), out)?;
    let qc = cma::tape::contextualize_queries(tape, params.queries, current, bias, &params.context)?;
    let merged = cma::tape::motion_attention(tape, qc, augmented, bias, &params.layers)?;
    let gate = cma::tape::detail_attention_map(tape, merged, current, h, w)?;
    let fused = cma::tape::fuse_predictions(tape, context, detail, gate)?;
    let loss = cma::tape::total_loss(tape, fused, detail, labels, cfg.lambda_d)?;
    Ok(TapedForward {
        fused,
        detail,
        gate,
        loss,
    })
}

/// Loss and parameter gradients of one clip, gradients in
/// [`ModelParams::visit`] order.
pub fn loss_and_gradients(
    params: &ModelParams,
    prep: &Prepared,
    labels: Arc<[u16]>,
    cfg: &PipelineConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.map(&mut |t| tape.leaf(t.clone()));
    let fwd = forward_tape(&mut tape, &vars, prep, labels, cfg)?;
    let grads = tape.backward(fwd.loss)?;
    let values = params.visit();
    let out = vars
        .visit()
        .into_iter()
        .zip(values)
        .map(|((_, &v), (_, t))| grads.get_or_zeros(v, t))
        .collect();
    Ok((tape.scalar(fwd.loss), out))
}

/// Vanishing points of a clip, as written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VpReport {
    pub frames: Vec<VpEstimate>,
    pub patch: Vec<(f64, f64)>,
    pub region: VpRegion,
    pub nominal_region_len: usize,
    pub region_len: usize,
    pub nominal_windows: usize,
    pub windows: usize,
}

impl VpReport {
    pub fn new(prep: &Prepared) -> Self {
        VpReport {
            frames: prep.vps.clone(),
            patch: prep.patch_vps.clone(),
            region: prep.region.clone(),
            nominal_region_len: prep.region.nominal_len(),
            region_len: prep.region.len(),
            nominal_windows: prep.region.nominal_windows(),
            windows: prep.region.windows().len(),
        }
    }
}

/// Full pipeline on a clip of frames `interval` apart, oldest first.
pub fn run_pipeline(
    frames: &[GrayImage],
    params: &ModelParams,
    cfg: &PipelineConfig,
    exec: Exec,
) -> Result<(Prepared, PipelineOutput)> {
    let backbone = StubBackbone::new(cfg.channels, cfg.backbone_patch, cfg.seed)?;
    let prep = prepare(frames, cfg, &backbone, exec)?;
    let out = forward(params, &prep, cfg, exec)?;
    Ok((prep, out))
}
