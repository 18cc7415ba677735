//! Hierarchical 3D windowed-attention backbone: patch embedding, windowed
//! multi-head self-attention with cyclic shifts and relative-position bias,
//! patch merging, four stages and the semantic-attention tap point.
//!
//! All index arithmetic (window partitioning, cyclic shifts, head
//! splitting/merging, patch merging, voxel-to-patch layout) is precomputed
//! into gather plans shared across forward passes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::sa::{self, SaForward, SaPlan};
use crate::tape::{Tape, Var};
use crate::volume::Volume;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Hierarchical,
    PlainVit,
}

/// Backbone geometry and stage layout.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: [usize; 3],
    pub window_size: [usize; 3],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    /// Base channel count D0; hierarchical stage k width is D0·2^(k-1).
    pub embed_dim: usize,
    /// Stage (1..=4) after which the semantic-attention module sits.
    pub sa_stage: usize,
    pub backbone: Backbone,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Smallest configuration exercising every code path; the test default.
    pub fn desk() -> Self {
        EncoderConfig {
            patch_size: [2, 2, 2],
            window_size: [2, 2, 2],
            stage_depths: [1, 1, 2, 1],
            stage_heads: [2, 2, 4, 4],
            embed_dim: 24,
            sa_stage: 3,
            backbone: Backbone::Hierarchical,
            mlp_ratio: 4,
        }
    }

    /// Publication-scale preset (stage-3 width 384, i.e. D0 = 96).
    pub fn paper() -> Self {
        EncoderConfig {
            patch_size: [2, 2, 2],
            window_size: [4, 4, 4],
            stage_depths: [2, 2, 8, 2],
            stage_heads: [4, 4, 8, 16],
            embed_dim: 96,
            sa_stage: 3,
            backbone: Backbone::Hierarchical,
            mlp_ratio: 4,
        }
    }

    pub fn n_merges(&self) -> usize {
        match self.backbone {
            Backbone::Hierarchical => 3,
            Backbone::PlainVit => 0,
        }
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        match self.backbone {
            Backbone::Hierarchical => self.embed_dim << (stage - 1),
            Backbone::PlainVit => self.embed_dim,
        }
    }

    pub fn input_grid(&self, crop: [usize; 3]) -> [usize; 3] {
        [
            crop[0] / self.patch_size[0],
            crop[1] / self.patch_size[1],
            crop[2] / self.patch_size[2],
        ]
    }

    pub fn stage_grid(&self, crop: [usize; 3], stage: usize) -> [usize; 3] {
        let g = self.input_grid(crop);
        match self.backbone {
            Backbone::Hierarchical => {
                let s = stage - 1;
                [g[0] >> s, g[1] >> s, g[2] >> s]
            }
            Backbone::PlainVit => g,
        }
    }

    pub fn sa_grid(&self, crop: [usize; 3]) -> [usize; 3] {
        self.stage_grid(crop, self.sa_stage)
    }

    pub fn sa_width(&self) -> usize {
        self.stage_width(self.sa_stage)
    }

    /// Upsample factor from the SA grid back to the input-patch grid.
    pub fn mask_upsample_factor(&self) -> [usize; 3] {
        match self.backbone {
            Backbone::Hierarchical => {
                let f = 1usize << (self.sa_stage - 1);
                [f, f, f]
            }
            Backbone::PlainVit => [1, 1, 1],
        }
    }

    /// Voxel extent covered by one stage-4 token, per dimension.
    pub fn stage4_block(&self) -> [usize; 3] {
        let f = 1usize << self.n_merges();
        [
            self.patch_size[0] * f,
            self.patch_size[1] * f,
            self.patch_size[2] * f,
        ]
    }

    pub fn validate(&self, crop: [usize; 3]) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::validation("encoder.embed_dim", "must be >= 1"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::validation("encoder.mlp_ratio", "must be >= 1"));
        }
        if !(1..=4).contains(&self.sa_stage) {
            return Err(Error::validation("encoder.sa_stage", "must be in 1..=4"));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::validation(
                "encoder.stage_depths",
                "every stage needs at least one block",
            ));
        }
        for i in 0..3 {
            if self.patch_size[i] == 0 || crop[i] % self.patch_size[i] != 0 {
                return Err(Error::validation(
                    "encoder.patch_size",
                    format!("crop {:?} not divisible by patch {:?}", crop, self.patch_size),
                ));
            }
            if self.window_size[i] == 0 {
                return Err(Error::validation("encoder.window_size", "must be >= 1"));
            }
        }
        let g1 = self.input_grid(crop);
        if self.backbone == Backbone::Hierarchical {
            for (i, &g) in g1.iter().enumerate() {
                if g % (1 << self.n_merges()) != 0 {
                    return Err(Error::validation(
                        "encoder.patch_size",
                        format!(
                            "input grid dim {i} ({g}) must divide by 2^{} for the merges",
                            self.n_merges()
                        ),
                    ));
                }
            }
        }
        for stage in 1..=4 {
            let grid = self.stage_grid(crop, stage);
            let width = self.stage_width(stage);
            let heads = self.stage_heads[stage - 1];
            if heads == 0 || width % heads != 0 {
                return Err(Error::validation(
                    "encoder.stage_heads",
                    format!("stage {stage}: {heads} heads must divide width {width}"),
                ));
            }
            for i in 0..3 {
                let w_eff = self.window_size[i].min(grid[i]);
                if grid[i] % w_eff != 0 {
                    return Err(Error::validation(
                        "encoder.window_size",
                        format!(
                            "stage {stage} grid {:?} not divisible by window {:?}",
                            grid, self.window_size
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Geometry plus the projection-head output widths; everything a model
/// instance needs besides its parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub crop_shape: [usize; 3],
    pub k_cls: usize,
    pub k_patch: usize,
    pub k_g: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.crop_shape)?;
        for (name, k) in [
            ("k_cls", self.k_cls),
            ("k_patch", self.k_patch),
            ("k_g", self.k_g),
        ] {
            if k == 0 {
                return Err(Error::validation(name, "projection width must be >= 1"));
            }
        }
        Ok(())
    }
}

/// A spatially indexed token sequence on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub grid_shape: [usize; 3],
    pub stage: usize,
}

impl TokenGrid {
    pub fn n_tokens(&self) -> usize {
        self.grid_shape.iter().product()
    }
}

/// Precomputed gather plans for one windowed-attention layout.
pub struct AttnPlan<F: Scalar> {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub windows: usize,
    pub t: usize,
    pub heads: usize,
    pub dh: usize,
    q: Arc<Vec<u32>>,
    k: Arc<Vec<u32>>,
    v: Arc<Vec<u32>>,
    merge: Arc<Vec<u32>>,
    bias: Arc<Vec<u32>>,
    shift_mask: Option<Arc<Vec<F>>>,
    /// Within-window Euclidean distances between token slots, [t, t].
    pub dist_table: Arc<Vec<f64>>,
}

/// Number of relative-position bias entries for a window.
pub fn bias_table_len(window: [usize; 3]) -> usize {
    (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1)
}

/// Build the gather plans for windowed attention on `grid` with the given
/// raw window (clamped per dimension), optional alternating shift, heads.
pub fn attention_plan<F: Scalar>(
    grid: [usize; 3],
    raw_window: [usize; 3],
    shifted: bool,
    heads: usize,
    width: usize,
) -> AttnPlan<F> {
    let w = [
        raw_window[0].min(grid[0]),
        raw_window[1].min(grid[1]),
        raw_window[2].min(grid[2]),
    ];
    // Shifting is meaningless along a dimension the window fully covers.
    let shift = if shifted {
        [
            if w[0] < grid[0] { w[0] / 2 } else { 0 },
            if w[1] < grid[1] { w[1] / 2 } else { 0 },
            if w[2] < grid[2] { w[2] / 2 } else { 0 },
        ]
    } else {
        [0, 0, 0]
    };
    assert!(width % heads == 0, "heads must divide width");
    let dh = width / heads;
    let nw = [grid[0] / w[0], grid[1] / w[1], grid[2] / w[2]];
    let windows = nw[0] * nw[1] * nw[2];
    let t = w[0] * w[1] * w[2];
    let n = grid[0] * grid[1] * grid[2];
    let d3 = 3 * width;

    // Original grid position of window token (win, slot) under the shift.
    let src_token = |win: usize, slot: usize| -> usize {
        let wz = win / (nw[1] * nw[2]);
        let wy = (win / nw[2]) % nw[1];
        let wx = win % nw[2];
        let tz = slot / (w[1] * w[2]);
        let ty = (slot / w[2]) % w[1];
        let tx = slot % w[2];
        let p = [
            (wz * w[0] + tz + shift[0]) % grid[0],
            (wy * w[1] + ty + shift[1]) % grid[1],
            (wx * w[2] + tx + shift[2]) % grid[2],
        ];
        (p[0] * grid[1] + p[1]) * grid[2] + p[2]
    };

    let mut q = Vec::with_capacity(windows * heads * t * dh);
    let mut k = Vec::with_capacity(windows * heads * t * dh);
    let mut v = Vec::with_capacity(windows * heads * t * dh);
    for win in 0..windows {
        for h in 0..heads {
            for slot in 0..t {
                let nsrc = src_token(win, slot);
                let base = nsrc * d3 + h * dh;
                for j in 0..dh {
                    q.push((base + j) as u32);
                    k.push((base + width + j) as u32);
                    v.push((base + 2 * width + j) as u32);
                }
            }
        }
    }

    // Inverse mapping: token n back to its (window, slot) under the shift.
    let mut merge = Vec::with_capacity(n * width);
    for nidx in 0..n {
        let p = [
            nidx / (grid[1] * grid[2]),
            (nidx / grid[2]) % grid[1],
            nidx % grid[2],
        ];
        let ps = [
            (p[0] + grid[0] - shift[0]) % grid[0],
            (p[1] + grid[1] - shift[1]) % grid[1],
            (p[2] + grid[2] - shift[2]) % grid[2],
        ];
        let win = ((ps[0] / w[0]) * nw[1] + ps[1] / w[1]) * nw[2] + ps[2] / w[2];
        let slot = ((ps[0] % w[0]) * w[1] + ps[1] % w[1]) * w[2] + ps[2] % w[2];
        for h in 0..heads {
            for j in 0..dh {
                merge.push((((win * heads + h) * t + slot) * dh + j) as u32);
            }
        }
    }

    // Relative-position bias expansion: identical across windows.
    let rel_index = |a: usize, b: usize| -> usize {
        let az = a / (w[1] * w[2]);
        let ay = (a / w[2]) % w[1];
        let ax = a % w[2];
        let bz = b / (w[1] * w[2]);
        let by = (b / w[2]) % w[1];
        let bx = b % w[2];
        let iz = az + w[0] - 1 - bz;
        let iy = ay + w[1] - 1 - by;
        let ix = ax + w[2] - 1 - bx;
        (iz * (2 * w[1] - 1) + iy) * (2 * w[2] - 1) + ix
    };
    let mut bias = Vec::with_capacity(windows * heads * t * t);
    for _win in 0..windows {
        for h in 0..heads {
            for a in 0..t {
                for b in 0..t {
                    bias.push((rel_index(a, b) * heads + h) as u32);
                }
            }
        }
    }

    // Wrap masking: tokens whose shifted coordinate wraps around the grid
    // boundary must not attend across the wrap.
    let shift_mask = if shift.iter().any(|&s| s > 0) {
        let neg = F::of(-1e9);
        let wrap_flags = |win: usize, slot: usize| -> [bool; 3] {
            let wz = win / (nw[1] * nw[2]);
            let wy = (win / nw[2]) % nw[1];
            let wx = win % nw[2];
            let tz = slot / (w[1] * w[2]);
            let ty = (slot / w[2]) % w[1];
            let tx = slot % w[2];
            [
                wz * w[0] + tz + shift[0] >= grid[0],
                wy * w[1] + ty + shift[1] >= grid[1],
                wx * w[2] + tx + shift[2] >= grid[2],
            ]
        };
        let mut m = Vec::with_capacity(windows * heads * t * t);
        for win in 0..windows {
            let flags: Vec<[bool; 3]> = (0..t).map(|s| wrap_flags(win, s)).collect();
            for _h in 0..heads {
                for a in 0..t {
                    for b in 0..t {
                        m.push(if flags[a] == flags[b] { F::zero() } else { neg });
                    }
                }
            }
        }
        Some(Arc::new(m))
    } else {
        None
    };

    let mut dist = Vec::with_capacity(t * t);
    for a in 0..t {
        let az = (a / (w[1] * w[2])) as f64;
        let ay = ((a / w[2]) % w[1]) as f64;
        let ax = (a % w[2]) as f64;
        for b in 0..t {
            let bz = (b / (w[1] * w[2])) as f64;
            let by = ((b / w[2]) % w[1]) as f64;
            let bx = (b % w[2]) as f64;
            dist.push(((az - bz).powi(2) + (ay - by).powi(2) + (ax - bx).powi(2)).sqrt());
        }
    }

    AttnPlan {
        grid,
        window: w,
        shift,
        windows,
        t,
        heads,
        dh,
        q: Arc::new(q),
        k: Arc::new(k),
        v: Arc::new(v),
        merge: Arc::new(merge),
        bias: Arc::new(bias),
        shift_mask,
        dist_table: Arc::new(dist),
    }
}

/// Attention parameters of one block, bound to a tape.
pub struct AttnVars {
    pub wqkv: Var,
    pub bqkv: Var,
    pub bias_table: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head scaled-dot-product attention within (cyclically shifted)
/// windows, with relative-position bias and wrap masking. Returns the
/// grid-shaped output and the softmax rows [windows·heads·t, t].
pub fn window_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    p: &AttnVars,
    plan: &AttnPlan<F>,
) -> (Var, Var) {
    let n = plan.grid.iter().product::<usize>();
    let width = plan.heads * plan.dh;
    debug_assert_eq!(tape.shape(x), &[n, width]);
    let (wh, t, dh) = (plan.windows * plan.heads, plan.t, plan.dh);

    let qkv0 = tape.matmul(x, p.wqkv);
    let qkv = tape.add_bias(qkv0, p.bqkv);
    let q = tape.gather(qkv, Arc::clone(&plan.q), &[wh, t, dh]);
    let k = tape.gather(qkv, Arc::clone(&plan.k), &[wh, t, dh]);
    let v = tape.gather(qkv, Arc::clone(&plan.v), &[wh, t, dh]);

    let scores0 = tape.bmm_nt(q, k);
    let scores1 = tape.scale(scores0, F::one() / F::of((dh as f64).sqrt()));
    let bias = tape.gather(p.bias_table, Arc::clone(&plan.bias), &[wh, t, t]);
    let mut scores = tape.add(scores1, bias);
    if let Some(mask) = &plan.shift_mask {
        let m = tape.constant_shared(Arc::clone(mask), &[wh, t, t]);
        scores = tape.add(scores, m);
    }
    let rows = tape.reshape(scores, &[wh * t, t]);
    let probs = tape.softmax_rows(rows);
    let probs3 = tape.reshape(probs, &[wh, t, t]);
    let ctx = tape.bmm_nn(probs3, v);
    let merged = tape.gather(ctx, Arc::clone(&plan.merge), &[n, width]);
    let proj = tape.matmul(merged, p.wo);
    let out = tape.add_bias(proj, p.bo);
    (out, probs)
}

/// All precomputed plans for one (config, crop) pair.
pub struct EncoderPlans<F: Scalar> {
    pub input_grid: [usize; 3],
    pub patch_vox: usize,
    patch: Arc<Vec<u32>>,
    /// Per stage: [unshifted, shifted] attention plans.
    pub stage_plans: Vec<[AttnPlan<F>; 2]>,
    merge_plans: Vec<Arc<Vec<u32>>>,
    pub stage_grids: [[usize; 3]; 4],
    pub stage_widths: [usize; 4],
    /// AMIP layout: voxel index of (stage-4 token, block offset).
    pub pred_voxels: Arc<Vec<u32>>,
    /// Input-patch token covering each (stage-4 token, block offset) slot.
    pub pred_input_token: Arc<Vec<u32>>,
    pub block_vox: usize,
}

impl<F: Scalar> EncoderPlans<F> {
    pub fn build(cfg: &EncoderConfig, crop: [usize; 3]) -> Result<Self> {
        cfg.validate(crop)?;
        let input_grid = cfg.input_grid(crop);
        let patch_vox = cfg.patch_size.iter().product();
        let n1 = input_grid.iter().product::<usize>();

        let mut patch = Vec::with_capacity(n1 * patch_vox);
        for tz in 0..input_grid[0] {
            for ty in 0..input_grid[1] {
                for tx in 0..input_grid[2] {
                    for oz in 0..cfg.patch_size[0] {
                        for oy in 0..cfg.patch_size[1] {
                            for ox in 0..cfg.patch_size[2] {
                                let z = tz * cfg.patch_size[0] + oz;
                                let y = ty * cfg.patch_size[1] + oy;
                                let x = tx * cfg.patch_size[2] + ox;
                                patch.push(((z * crop[1] + y) * crop[2] + x) as u32);
                            }
                        }
                    }
                }
            }
        }

        let mut stage_plans = Vec::with_capacity(4);
        let mut stage_grids = [[0usize; 3]; 4];
        let mut stage_widths = [0usize; 4];
        for stage in 1..=4 {
            let grid = cfg.stage_grid(crop, stage);
            let width = cfg.stage_width(stage);
            stage_grids[stage - 1] = grid;
            stage_widths[stage - 1] = width;
            let heads = cfg.stage_heads[stage - 1];
            stage_plans.push([
                attention_plan(grid, cfg.window_size, false, heads, width),
                attention_plan(grid, cfg.window_size, true, heads, width),
            ]);
        }

        let mut merge_plans = Vec::new();
        if cfg.backbone == Backbone::Hierarchical {
            for stage in 1..=3 {
                let g = cfg.stage_grid(crop, stage);
                let width = cfg.stage_width(stage);
                let out = [g[0] / 2, g[1] / 2, g[2] / 2];
                let mut plan = Vec::with_capacity(out.iter().product::<usize>() * 8 * width);
                for mz in 0..out[0] {
                    for my in 0..out[1] {
                        for mx in 0..out[2] {
                            for oz in 0..2 {
                                for oy in 0..2 {
                                    for ox in 0..2 {
                                        let src = (((2 * mz + oz) * g[1] + 2 * my + oy) * g[2]
                                            + 2 * mx
                                            + ox)
                                            * width;
                                        for c in 0..width {
                                            plan.push((src + c) as u32);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                merge_plans.push(Arc::new(plan));
            }
        }

        // AMIP prediction layout over the final token grid.
        let g4 = stage_grids[3];
        let block = cfg.stage4_block();
        let block_vox = block.iter().product();
        let mut pred_voxels = Vec::with_capacity(g4.iter().product::<usize>() * block_vox);
        let mut pred_input_token = Vec::with_capacity(pred_voxels.capacity());
        for tz in 0..g4[0] {
            for ty in 0..g4[1] {
                for tx in 0..g4[2] {
                    for oz in 0..block[0] {
                        for oy in 0..block[1] {
                            for ox in 0..block[2] {
                                let z = tz * block[0] + oz;
                                let y = ty * block[1] + oy;
                                let x = tx * block[2] + ox;
                                pred_voxels.push(((z * crop[1] + y) * crop[2] + x) as u32);
                                let iz = z / cfg.patch_size[0];
                                let iy = y / cfg.patch_size[1];
                                let ix = x / cfg.patch_size[2];
                                pred_input_token
                                    .push(((iz * input_grid[1] + iy) * input_grid[2] + ix) as u32);
                            }
                        }
                    }
                }
            }
        }

        Ok(EncoderPlans {
            input_grid,
            patch_vox,
            patch: Arc::new(patch),
            stage_plans,
            merge_plans,
            stage_grids,
            stage_widths,
            pred_voxels: Arc::new(pred_voxels),
            pred_input_token: Arc::new(pred_input_token),
            block_vox,
        })
    }
}

/// Register backbone parameters (prefix `enc.`) for a (config, crop) pair.
pub fn register_encoder_params<F: Scalar>(
    set: &mut ParamSet<F>,
    cfg: &EncoderConfig,
    crop: [usize; 3],
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let std = 0.02;
    let pv: usize = cfg.patch_size.iter().product();
    let d0 = cfg.embed_dim;
    let n1: usize = cfg.input_grid(crop).iter().product();
    set.add("enc.embed.w", vec![pv, d0], rng::trunc_normal(rng, pv * d0, std));
    set.add("enc.embed.b", vec![d0], vec![F::zero(); d0]);
    set.add(
        "enc.embed.pos",
        vec![n1, d0],
        rng::trunc_normal(rng, n1 * d0, std),
    );
    set.add("enc.mask_token", vec![d0], vec![F::zero(); d0]);

    for stage in 1..=4 {
        let width = cfg.stage_width(stage);
        let heads = cfg.stage_heads[stage - 1];
        let grid = cfg.stage_grid(crop, stage);
        let w_eff = [
            cfg.window_size[0].min(grid[0]),
            cfg.window_size[1].min(grid[1]),
            cfg.window_size[2].min(grid[2]),
        ];
        let table = bias_table_len(w_eff);
        // Zero-initialized bias: attention starts content-only.
        set.add(
            format!("enc.s{stage}.attn_bias"),
            vec![table, heads],
            vec![F::zero(); table * heads],
        );
        for b in 0..cfg.stage_depths[stage - 1] {
            let p = format!("enc.s{stage}.b{b}");
            set.add(format!("{p}.ln1.g"), vec![width], vec![F::one(); width]);
            set.add(format!("{p}.ln1.b"), vec![width], vec![F::zero(); width]);
            set.add(
                format!("{p}.attn.wqkv"),
                vec![width, 3 * width],
                rng::trunc_normal(rng, width * 3 * width, std),
            );
            set.add(
                format!("{p}.attn.bqkv"),
                vec![3 * width],
                vec![F::zero(); 3 * width],
            );
            set.add(
                format!("{p}.attn.wo"),
                vec![width, width],
                rng::trunc_normal(rng, width * width, std),
            );
            set.add(format!("{p}.attn.bo"), vec![width], vec![F::zero(); width]);
            set.add(format!("{p}.ln2.g"), vec![width], vec![F::one(); width]);
            set.add(format!("{p}.ln2.b"), vec![width], vec![F::zero(); width]);
            let hidden = cfg.mlp_ratio * width;
            set.add(
                format!("{p}.mlp.w1"),
                vec![width, hidden],
                rng::trunc_normal(rng, width * hidden, std),
            );
            set.add(format!("{p}.mlp.b1"), vec![hidden], vec![F::zero(); hidden]);
            set.add(
                format!("{p}.mlp.w2"),
                vec![hidden, width],
                rng::trunc_normal(rng, hidden * width, std),
            );
            set.add(format!("{p}.mlp.b2"), vec![width], vec![F::zero(); width]);
        }
    }

    if cfg.backbone == Backbone::Hierarchical {
        for m in 1..=3 {
            let d = cfg.stage_width(m);
            set.add(
                format!("enc.merge{m}.w"),
                vec![8 * d, 2 * d],
                rng::trunc_normal(rng, 8 * d * 2 * d, std),
            );
            set.add(format!("enc.merge{m}.b"), vec![2 * d], vec![F::zero(); 2 * d]);
        }
    }
}

/// Non-overlapping patches, linearly projected, plus the learned position
/// encoding.
pub fn patch_embed<F: Scalar>(
    tape: &mut Tape<F>,
    view: &Volume,
    bound: &Bound<F>,
    plans: &EncoderPlans<F>,
    crop: [usize; 3],
) -> Result<TokenGrid> {
    if view.shape != crop {
        return Err(Error::Shape(format!(
            "view shape {:?} does not match configured crop {:?}",
            view.shape, crop
        )));
    }
    let vox: Vec<F> = view.data.iter().map(|&v| F::of(v as f64)).collect();
    let n1: usize = plans.input_grid.iter().product();
    let voxels = tape.constant(vox, &[view.data.len()]);
    let patches = tape.gather(voxels, Arc::clone(&plans.patch), &[n1, plans.patch_vox]);
    let w = bound.var("enc.embed.w");
    let b = bound.var("enc.embed.b");
    let pos = bound.var("enc.embed.pos");
    let proj = tape.matmul(patches, w);
    let biased = tape.add_bias(proj, b);
    let tokens = tape.add(biased, pos);
    Ok(TokenGrid {
        tokens,
        grid_shape: plans.input_grid,
        stage: 0,
    })
}

/// 2×2×2 concatenate-and-project merge: grid halves, width doubles.
pub fn patch_merge<F: Scalar>(
    tape: &mut Tape<F>,
    x: &TokenGrid,
    bound: &Bound<F>,
    plans: &EncoderPlans<F>,
    merge_index: usize,
) -> Result<TokenGrid> {
    if x.grid_shape.iter().any(|&g| g % 2 != 0) {
        return Err(Error::Shape(format!(
            "patch_merge needs even grid dims, got {:?}",
            x.grid_shape
        )));
    }
    let width = *tape.shape(x.tokens).last().unwrap();
    let out_grid = [
        x.grid_shape[0] / 2,
        x.grid_shape[1] / 2,
        x.grid_shape[2] / 2,
    ];
    let n_out: usize = out_grid.iter().product();
    let plan = Arc::clone(&plans.merge_plans[merge_index - 1]);
    let gathered = tape.gather(x.tokens, plan, &[n_out, 8 * width]);
    let w = bound.var(&format!("enc.merge{merge_index}.w"));
    let b = bound.var(&format!("enc.merge{merge_index}.b"));
    let proj = tape.matmul(gathered, w);
    let tokens = tape.add_bias(proj, b);
    Ok(TokenGrid {
        tokens,
        grid_shape: out_grid,
        stage: x.stage,
    })
}

/// Attention probabilities of one block, kept for diagnostics.
pub struct AttnRecord {
    pub stage: usize,
    pub layer: usize,
    pub probs: Var,
    pub windows: usize,
    pub heads: usize,
    pub t: usize,
    pub dist_table: Arc<Vec<f64>>,
}

pub enum ForwardUntil {
    /// Stop once the SA module produced its outputs (mask pass).
    ThroughSa,
    Full,
}

pub struct EncoderForward {
    /// Raw block outputs per completed stage (before SA / merge).
    pub stages: Vec<TokenGrid>,
    pub sa: Option<SaForward>,
    pub sa_grid: [usize; 3],
    /// Mean over the final token positions; present for Full runs.
    pub pooled: Option<Var>,
    /// Final-stage tokens feeding the AMIP predictor (post SA when the SA
    /// module sits after stage 4).
    pub final_tokens: Option<TokenGrid>,
    pub attn: Vec<AttnRecord>,
}

fn transformer_block<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    bound: &Bound<F>,
    stage: usize,
    block: usize,
    plan: &AttnPlan<F>,
    path_drop: &mut dyn FnMut() -> F,
) -> (Var, Var) {
    let p = format!("enc.s{stage}.b{block}");
    let eps = F::of(LN_EPS);
    let g1 = bound.var(&format!("{p}.ln1.g"));
    let b1 = bound.var(&format!("{p}.ln1.b"));
    let ln1 = tape.layer_norm(x, g1, b1, eps);
    let attn_vars = AttnVars {
        wqkv: bound.var(&format!("{p}.attn.wqkv")),
        bqkv: bound.var(&format!("{p}.attn.bqkv")),
        bias_table: bound.var(&format!("enc.s{stage}.attn_bias")),
        wo: bound.var(&format!("{p}.attn.wo")),
        bo: bound.var(&format!("{p}.attn.bo")),
    };
    let (attn_out, probs) = window_attention(tape, ln1, &attn_vars, plan);
    let f = path_drop();
    let attn_res = if f == F::one() {
        attn_out
    } else {
        tape.scale(attn_out, f)
    };
    let x = tape.add(x, attn_res);

    let g2 = bound.var(&format!("{p}.ln2.g"));
    let b2 = bound.var(&format!("{p}.ln2.b"));
    let ln2 = tape.layer_norm(x, g2, b2, eps);
    let w1 = bound.var(&format!("{p}.mlp.w1"));
    let bb1 = bound.var(&format!("{p}.mlp.b1"));
    let w2 = bound.var(&format!("{p}.mlp.w2"));
    let bb2 = bound.var(&format!("{p}.mlp.b2"));
    let h1 = tape.matmul(ln2, w1);
    let h1b = tape.add_bias(h1, bb1);
    let act = tape.gelu(h1b);
    let h2 = tape.matmul(act, w2);
    let h2b = tape.add_bias(h2, bb2);
    let f = path_drop();
    let mlp_res = if f == F::one() {
        h2b
    } else {
        tape.scale(h2b, f)
    };
    (tape.add(x, mlp_res), probs)
}

/// Run stages 1..4 with the alternating shift pattern; invoke the SA
/// module immediately after stage `sa_stage` and feed its token output
/// onward. `path_drop` is consumed once per residual branch in a fixed
/// order (two per block; SA blocks included).
pub fn forward_stages<F: Scalar>(
    tape: &mut Tape<F>,
    input: TokenGrid,
    bound: &Bound<F>,
    cfg: &EncoderConfig,
    plans: &EncoderPlans<F>,
    sa_plan: Option<&SaPlan>,
    until: ForwardUntil,
    path_drop: &mut dyn FnMut() -> F,
) -> EncoderForward {
    let mut x = input;
    let mut out = EncoderForward {
        stages: Vec::with_capacity(4),
        sa: None,
        sa_grid: cfg.stage_grid(
            [
                plans.input_grid[0] * cfg.patch_size[0],
                plans.input_grid[1] * cfg.patch_size[1],
                plans.input_grid[2] * cfg.patch_size[2],
            ],
            cfg.sa_stage,
        ),
        pooled: None,
        final_tokens: None,
        attn: Vec::new(),
    };

    for stage in 1..=4 {
        for b in 0..cfg.stage_depths[stage - 1] {
            let plan = &plans.stage_plans[stage - 1][b % 2];
            let (tokens, probs) = transformer_block(tape, x.tokens, bound, stage, b, plan, path_drop);
            x = TokenGrid {
                tokens,
                grid_shape: x.grid_shape,
                stage,
            };
            out.attn.push(AttnRecord {
                stage,
                layer: b,
                probs,
                windows: plan.windows,
                heads: plan.heads,
                t: plan.t,
                dist_table: Arc::clone(&plan.dist_table),
            });
        }
        out.stages.push(x);

        if stage == cfg.sa_stage {
            if let Some(plan) = sa_plan {
                debug_assert_eq!(plan.n_patches, x.n_tokens());
                let seq = sa::attach_cls(tape, x.tokens, bound);
                let fwd = sa::sa_forward(tape, seq, bound, plan, path_drop);
                x = TokenGrid {
                    tokens: fwd.tokens,
                    grid_shape: x.grid_shape,
                    stage,
                };
                out.sa = Some(fwd);
                if matches!(until, ForwardUntil::ThroughSa) {
                    return out;
                }
            } else if matches!(until, ForwardUntil::ThroughSa) {
                return out;
            }
        }

        if stage < 4 && cfg.backbone == Backbone::Hierarchical {
            x = patch_merge(tape, &x, bound, plans, stage).expect("validated grids are even");
        }
    }

    out.pooled = Some(tape.mean_axis0(x.tokens));
    out.final_tokens = Some(x);
    out
}

/// Shared immutable context for one (config, crop) pair: geometry plans
/// plus the SA plan. Built once and reused across forward passes.
pub struct ModelContext<F: Scalar> {
    pub mc: ModelConfig,
    pub plans: EncoderPlans<F>,
    pub sa_plan: SaPlan,
}

impl<F: Scalar> ModelContext<F> {
    pub fn new(mc: ModelConfig) -> Result<Self> {
        mc.validate()?;
        let plans = EncoderPlans::build(&mc.encoder, mc.crop_shape)?;
        let n_sa: usize = mc.encoder.sa_grid(mc.crop_shape).iter().product();
        let sa_plan = SaPlan::new(
            n_sa,
            mc.encoder.sa_width(),
            mc.encoder.stage_heads[mc.encoder.sa_stage - 1],
        );
        Ok(ModelContext { mc, plans, sa_plan })
    }

    /// Gradient-free forward on a clean volume (no mask, no dropout).
    pub fn forward_clean(
        &self,
        params: &ParamSet<F>,
        volume: &Volume,
        until: ForwardUntil,
    ) -> Result<(Tape<F>, EncoderForward)> {
        let mut tape = Tape::new(false);
        let bound = Bound::new(&mut tape, params);
        let input = patch_embed(&mut tape, volume, &bound, &self.plans, self.mc.crop_shape)?;
        let mut keep = || F::one();
        let fwd = forward_stages(
            &mut tape,
            input,
            &bound,
            &self.mc.encoder,
            &self.plans,
            Some(&self.sa_plan),
            until,
            &mut keep,
        );
        Ok((tape, fwd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    fn encoder_set(cfg: &EncoderConfig, crop: [usize; 3], seed: u64) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        let mut r = stream(seed, &[tag::PARAM_INIT]);
        register_encoder_params(&mut set, cfg, crop, &mut r);
        sa::register_sa_params(&mut set, cfg.sa_width(), cfg.mlp_ratio, &mut r);
        set
    }

    #[test]
    fn desk_shape_arithmetic() {
        let cfg = EncoderConfig::desk();
        let crop = [32, 32, 32];
        cfg.validate(crop).unwrap();
        assert_eq!(cfg.input_grid(crop), [16, 16, 16]);
        assert_eq!(cfg.stage_grid(crop, 1), [16, 16, 16]);
        assert_eq!(cfg.stage_grid(crop, 2), [8, 8, 8]);
        assert_eq!(cfg.stage_grid(crop, 3), [4, 4, 4]);
        assert_eq!(cfg.stage_grid(crop, 4), [2, 2, 2]);
        assert_eq!(cfg.stage_width(3), 96);
        assert_eq!(cfg.mask_upsample_factor(), [4, 4, 4]);
        assert_eq!(cfg.stage4_block(), [16, 16, 16]);
    }

    #[test]
    fn paper_scale_token_count() {
        let cfg = EncoderConfig::paper();
        let crop = [128, 128, 128];
        cfg.validate(crop).unwrap();
        let g = cfg.input_grid(crop);
        assert_eq!(g, [64, 64, 64]);
        assert_eq!(g.iter().product::<usize>(), 262_144);
        assert_eq!(cfg.stage_width(3), 384);
    }

    #[test]
    fn validation_rejects_indivisible_shapes() {
        let cfg = EncoderConfig::desk();
        assert!(matches!(
            cfg.validate([30, 32, 32]),
            Err(Error::Validation { .. })
        ));
        let mut bad_heads = EncoderConfig::desk();
        bad_heads.stage_heads = [5, 2, 4, 4];
        assert!(matches!(
            bad_heads.validate([32, 32, 32]),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn patch_embed_zero_input_gives_position_encoding() {
        let cfg = EncoderConfig::desk();
        let crop = [8, 8, 8];
        // Shrink to keep the grid divisible: use plain-vit so no merges.
        let mut cfg = cfg;
        cfg.backbone = Backbone::PlainVit;
        cfg.stage_depths = [1, 1, 1, 1];
        let plans: EncoderPlans<f64> = EncoderPlans::build(&cfg, crop).unwrap();
        let set = encoder_set(&cfg, crop, 0);
        let mut tape = Tape::new(false);
        let bound = Bound::new(&mut tape, &set);
        let v = Volume::zeros(crop, [1.0; 3]);
        let tg = patch_embed(&mut tape, &v, &bound, &plans, crop).unwrap();
        assert_eq!(tg.grid_shape, [4, 4, 4]);
        assert_eq!(tape.value(tg.tokens), set.get("enc.embed.pos"));
    }

    /// Dense attention oracle: straight loops over all token pairs in f64.
    fn dense_attention_oracle(
        x: &[f64],
        n: usize,
        width: usize,
        heads: usize,
        wqkv: &[f64],
        bqkv: &[f64],
        bias_table: &[f64],
        rel_index: &dyn Fn(usize, usize) -> usize,
        wo: &[f64],
        bo: &[f64],
    ) -> Vec<f64> {
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut qkv = vec![0.0; n * 3 * width];
        for i in 0..n {
            for j in 0..3 * width {
                let mut acc = bqkv[j];
                for k in 0..width {
                    acc += x[i * width + k] * wqkv[k * 3 * width + j];
                }
                qkv[i * 3 * width + j] = acc;
            }
        }
        let mut ctx = vec![0.0; n * width];
        for h in 0..heads {
            for i in 0..n {
                let q = &qkv[i * 3 * width + h * dh..i * 3 * width + h * dh + dh];
                let mut scores = Vec::with_capacity(n);
                for j in 0..n {
                    let k = &qkv[j * 3 * width + width + h * dh..j * 3 * width + width + h * dh + dh];
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    scores.push(dot * scale + bias_table[rel_index(i, j) * heads + h]);
                }
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
                let total: f64 = exps.iter().sum();
                for j in 0..n {
                    let p = exps[j] / total;
                    let v = &qkv
                        [j * 3 * width + 2 * width + h * dh..j * 3 * width + 2 * width + h * dh + dh];
                    for d in 0..dh {
                        ctx[i * width + h * dh + d] += p * v[d];
                    }
                }
            }
        }
        let mut out = vec![0.0; n * width];
        for i in 0..n {
            for j in 0..width {
                let mut acc = bo[j];
                for k in 0..width {
                    acc += ctx[i * width + k] * wo[k * width + j];
                }
                out[i * width + j] = acc;
            }
        }
        out
    }

    #[test]
    fn full_window_equals_dense_attention() {
        // f32 implementation vs f64 brute-force dense attention, |Δ| < 1e-5.
        for (grid, width, heads) in [
            ([2usize, 2, 2], 8usize, 2usize),
            ([4, 4, 4], 16, 4),
            ([4, 2, 4], 12, 2),
        ] {
            let n: usize = grid.iter().product();
            let mut r = stream(13, &[grid[0] as u64, width as u64]);
            let x64: Vec<f64> = rng::trunc_normal(&mut r, n * width, 1.0);
            let wqkv: Vec<f64> = rng::trunc_normal(&mut r, width * 3 * width, 0.2);
            let bqkv: Vec<f64> = rng::trunc_normal(&mut r, 3 * width, 0.2);
            let table_len = bias_table_len(grid);
            let bias: Vec<f64> = rng::trunc_normal(&mut r, table_len * heads, 0.2);
            let wo: Vec<f64> = rng::trunc_normal(&mut r, width * width, 0.2);
            let bo: Vec<f64> = rng::trunc_normal(&mut r, width, 0.2);

            let mut tape: Tape<f32> = Tape::new(false);
            let plan = attention_plan::<f32>(grid, grid, false, heads, width);
            let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
            let x = tape.constant(to32(&x64), &[n, width]);
            let p = AttnVars {
                wqkv: tape.constant(to32(&wqkv), &[width, 3 * width]),
                bqkv: tape.constant(to32(&bqkv), &[3 * width]),
                bias_table: tape.constant(to32(&bias), &[table_len, heads]),
                wo: tape.constant(to32(&wo), &[width, width]),
                bo: tape.constant(to32(&bo), &[width]),
            };
            let (out, probs) = window_attention(&mut tape, x, &p, &plan);

            let rel = |a: usize, b: usize| -> usize {
                let az = a / (grid[1] * grid[2]);
                let ay = (a / grid[2]) % grid[1];
                let ax = a % grid[2];
                let bz = b / (grid[1] * grid[2]);
                let by = (b / grid[2]) % grid[1];
                let bx = b % grid[2];
                ((az + grid[0] - 1 - bz) * (2 * grid[1] - 1) + ay + grid[1] - 1 - by)
                    * (2 * grid[2] - 1)
                    + ax + grid[2] - 1 - bx
            };
            let expect = dense_attention_oracle(
                &x64, n, width, heads, &wqkv, &bqkv, &bias, &rel, &wo, &bo,
            );
            let got = tape.value(out);
            for i in 0..n * width {
                assert!(
                    (got[i] as f64 - expect[i]).abs() < 1e-5,
                    "grid {grid:?} elem {i}: {} vs {}",
                    got[i],
                    expect[i]
                );
            }
            for row in tape.value(probs).chunks(plan.t) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_token_window_is_value_projection() {
        let grid = [2usize, 2, 2];
        let width = 6usize;
        let n = 8usize;
        let mut r = stream(3, &[9]);
        let x: Vec<f64> = rng::trunc_normal(&mut r, n * width, 1.0);
        let wqkv: Vec<f64> = rng::trunc_normal(&mut r, width * 3 * width, 0.3);
        let bqkv: Vec<f64> = rng::trunc_normal(&mut r, 3 * width, 0.3);

        let mut tape: Tape<f64> = Tape::new(false);
        let plan = attention_plan::<f64>(grid, [1, 1, 1], false, 2, width);
        let xv = tape.constant(x.clone(), &[n, width]);
        // Identity output projection isolates the attention core.
        let mut eye = vec![0.0; width * width];
        for i in 0..width {
            eye[i * width + i] = 1.0;
        }
        let p = AttnVars {
            wqkv: tape.constant(wqkv.clone(), &[width, 3 * width]),
            bqkv: tape.constant(bqkv.clone(), &[3 * width]),
            bias_table: tape.constant(vec![0.5, -0.2], &[1, 2]),
            wo: tape.constant(eye, &[width, width]),
            bo: tape.constant(vec![0.0; width], &[width]),
        };
        let (out, _) = window_attention(&mut tape, xv, &p, &plan);
        // Expected: v = x·Wv + bv exactly (softmax over a single key).
        for i in 0..n {
            for j in 0..width {
                let mut acc = bqkv[2 * width + j];
                for k in 0..width {
                    acc += x[i * width + k] * wqkv[k * 3 * width + 2 * width + j];
                }
                let got = tape.value(out)[i * width + j];
                assert!((got - acc).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn shifted_attention_on_constant_field_matches_unshifted() {
        let grid = [4usize, 4, 4];
        let width = 8usize;
        let heads = 2usize;
        let n = 64usize;
        let mut r = stream(21, &[4]);
        let wqkv: Vec<f64> = rng::trunc_normal(&mut r, width * 3 * width, 0.3);
        let bqkv: Vec<f64> = rng::trunc_normal(&mut r, 3 * width, 0.3);
        let table = bias_table_len([2, 2, 2]);
        let bias: Vec<f64> = rng::trunc_normal(&mut r, table * heads, 0.3);
        let wo: Vec<f64> = rng::trunc_normal(&mut r, width * width, 0.3);
        let bo: Vec<f64> = rng::trunc_normal(&mut r, width, 0.3);

        let run = |shifted: bool| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new(false);
            let plan = attention_plan::<f64>(grid, [2, 2, 2], shifted, heads, width);
            let x = tape.constant(vec![0.75; n * width], &[n, width]);
            let p = AttnVars {
                wqkv: tape.constant(wqkv.clone(), &[width, 3 * width]),
                bqkv: tape.constant(bqkv.clone(), &[3 * width]),
                bias_table: tape.constant(bias.clone(), &[table, heads]),
                wo: tape.constant(wo.clone(), &[width, width]),
                bo: tape.constant(bo.clone(), &[width]),
            };
            let (out, _) = window_attention(&mut tape, x, &p, &plan);
            tape.value(out).to_vec()
        };
        let a = run(false);
        let b = run(true);
        for i in 0..a.len() {
            assert!((a[i] - b[i]).abs() < 1e-9, "elem {i}");
        }
    }

    #[test]
    fn patch_merge_shapes_and_constant_preservation() {
        let cfg = EncoderConfig::desk();
        let crop = [32, 32, 32];
        let plans: EncoderPlans<f64> = EncoderPlans::build(&cfg, crop).unwrap();
        let mut set = encoder_set(&cfg, crop, 1);
        // Averaging projection: out = concat(mean of 8 neighbors, twice).
        let d = 24usize;
        let mut w = vec![0.0; 8 * d * 2 * d];
        for nbr in 0..8 {
            for c in 0..d {
                w[(nbr * d + c) * 2 * d + c] = 0.125;
                w[(nbr * d + c) * 2 * d + d + c] = 0.125;
            }
        }
        set.set("enc.merge1.w", w);
        let mut tape = Tape::new(false);
        let bound = Bound::new(&mut tape, &set);
        let tokens = tape.constant(vec![1.5; 4096 * d], &[4096, d]);
        let tg = TokenGrid {
            tokens,
            grid_shape: [16, 16, 16],
            stage: 1,
        };
        let merged = patch_merge(&mut tape, &tg, &bound, &plans, 1).unwrap();
        assert_eq!(merged.grid_shape, [8, 8, 8]);
        assert_eq!(tape.shape(merged.tokens), &[512, 48]);
        assert!(tape.value(merged.tokens).iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn patch_merge_matches_gather_concat_matmul_oracle() {
        let mut cfg = EncoderConfig::desk();
        cfg.embed_dim = 6;
        cfg.stage_heads = [2, 2, 2, 2];
        let crop = [16, 16, 16];
        let plans: EncoderPlans<f64> = EncoderPlans::build(&cfg, crop).unwrap();
        let set = encoder_set(&cfg, crop, 5);
        let d = 6usize;
        let g = [8usize, 8, 8];
        let n = 512usize;
        let mut r = stream(9, &[2]);
        let x: Vec<f64> = rng::trunc_normal(&mut r, n * d, 1.0);

        let mut tape = Tape::new(false);
        let bound = Bound::new(&mut tape, &set);
        let tokens = tape.constant(x.clone(), &[n, d]);
        let tg = TokenGrid {
            tokens,
            grid_shape: g,
            stage: 1,
        };
        let merged = patch_merge(&mut tape, &tg, &bound, &plans, 1).unwrap();

        let w = set.get("enc.merge1.w");
        let b = set.get("enc.merge1.b");
        let got = tape.value(merged.tokens);
        for mz in 0..4 {
            for my in 0..4 {
                for mx in 0..4 {
                    let mut cat = Vec::with_capacity(8 * d);
                    for oz in 0..2 {
                        for oy in 0..2 {
                            for ox in 0..2 {
                                let src = ((2 * mz + oz) * 8 + 2 * my + oy) * 8 + 2 * mx + ox;
                                cat.extend_from_slice(&x[src * d..(src + 1) * d]);
                            }
                        }
                    }
                    let m = (mz * 4 + my) * 4 + mx;
                    for j in 0..2 * d {
                        let mut acc = b[j];
                        for k in 0..8 * d {
                            acc += cat[k] * w[k * 2 * d + j];
                        }
                        assert!((got[m * 2 * d + j] - acc).abs() < 1e-6, "token {m} col {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn forward_stage_grids_and_sa_tap() {
        let cfg = EncoderConfig::desk();
        let crop = [32, 32, 32];
        let plans: EncoderPlans<f64> = EncoderPlans::build(&cfg, crop).unwrap();
        let set = encoder_set(&cfg, crop, 2);
        let sa_plan = SaPlan::new(64, cfg.sa_width(), cfg.stage_heads[2]);
        let mut tape = Tape::new(false);
        let bound = Bound::new(&mut tape, &set);
        let mut r = stream(4, &[1]);
        let v = Volume::new(
            rng::trunc_normal::<f64>(&mut r, 32 * 32 * 32, 1.0)
                .iter()
                .map(|&x| x as f32)
                .collect(),
            crop,
            [1.0; 3],
        )
        .unwrap();
        let input = patch_embed(&mut tape, &v, &bound, &plans, crop).unwrap();
        let mut keep = || 1.0;
        let fwd = forward_stages(
            &mut tape,
            input,
            &bound,
            &cfg,
            &plans,
            Some(&sa_plan),
            ForwardUntil::Full,
            &mut keep,
        );
        let grids: Vec<[usize; 3]> = fwd.stages.iter().map(|s| s.grid_shape).collect();
        assert_eq!(grids, vec![[16, 16, 16], [8, 8, 8], [4, 4, 4], [2, 2, 2]]);
        let sa = fwd.sa.as_ref().unwrap();
        assert_eq!(tape.shape(sa.tokens), &[64, 96]);
        assert_eq!(fwd.sa_grid, [4, 4, 4]);
        assert_eq!(tape.shape(fwd.pooled.unwrap()), &[192]);
        // depths [1,1,2,1] -> 5 attention records.
        assert_eq!(fwd.attn.len(), 5);
        // Attention rows are probability vectors everywhere.
        for rec in &fwd.attn {
            for row in tape.value(rec.probs).chunks(rec.t) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pooled_mean_of_constant_field_is_exact() {
        let mut tape: Tape<f64> = Tape::new(false);
        let x = tape.constant(vec![2.5; 8 * 16], &[8, 16]);
        let pooled = tape.mean_axis0(x);
        assert!(tape.value(pooled).iter().all(|&v| v == 2.5));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = EncoderConfig::desk();
        let crop = [16, 16, 16];
        let mut cfg = cfg;
        cfg.embed_dim = 8;
        cfg.stage_heads = [2, 2, 2, 2];
        let plans: EncoderPlans<f32> = EncoderPlans::build(&cfg, crop).unwrap();
        let set: ParamSet<f32> = encoder_set(&cfg, crop, 7).cast();
        let sa_plan = SaPlan::new(8, cfg.sa_width(), cfg.stage_heads[2]);
        let mut r = stream(5, &[2]);
        let v = Volume::new(
            rng::trunc_normal::<f64>(&mut r, 16 * 16 * 16, 1.0)
                .iter()
                .map(|&x| x as f32)
                .collect(),
            crop,
            [1.0; 3],
        )
        .unwrap();
        let run = || -> Vec<f32> {
            let mut tape = Tape::new(false);
            let bound = Bound::new(&mut tape, &set);
            let input = patch_embed(&mut tape, &v, &bound, &plans, crop).unwrap();
            let mut keep = || 1.0f32;
            let fwd = forward_stages(
                &mut tape,
                input,
                &bound,
                &cfg,
                &plans,
                Some(&sa_plan),
                ForwardUntil::Full,
                &mut keep,
            );
            tape.value(fwd.pooled.unwrap()).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn windowed_block_gradients_match_finite_differences() {
        // One pre-norm windowed attention block on a 4^3 grid at D=8,
        // checked against central differences in f64 at h=1e-4.
        let mut cfg = EncoderConfig::desk();
        cfg.embed_dim = 8;
        cfg.stage_heads = [2, 2, 2, 2];
        cfg.stage_depths = [1, 1, 1, 1];
        let crop = [8, 8, 8];
        let plans: EncoderPlans<f64> = EncoderPlans::build(&cfg, crop).unwrap();
        let set = encoder_set(&cfg, crop, 11);
        let n = 64usize;
        let mut r = stream(6, &[3]);
        let x0: Vec<f64> = rng::trunc_normal(&mut r, n * 8, 1.0);
        let weights: Vec<f64> = (0..n * 8).map(|i| ((i % 13) as f64 - 6.0) * 0.07).collect();

        let loss_of = |p: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new(false);
            let bound = Bound::new(&mut tape, p);
            let x = tape.constant(x0.clone(), &[n, 8]);
            let plan = &plans.stage_plans[0][1]; // shifted parity
            let mut keep = || 1.0;
            let (out, _) = transformer_block(&mut tape, x, &bound, 1, 0, plan, &mut keep);
            let l = tape.dot_const(out, Arc::new(weights.clone()));
            tape.scalar_value(l)
        };

        let mut tape = Tape::new(true);
        let bound = Bound::new(&mut tape, &set);
        let x = tape.constant(x0.clone(), &[n, 8]);
        let plan = &plans.stage_plans[0][1];
        let mut keep = || 1.0;
        let (out, _) = transformer_block(&mut tape, x, &bound, 1, 0, plan, &mut keep);
        let l = tape.dot_const(out, Arc::new(weights.clone()));
        let grads = tape.backward(l);

        let h = 1e-4;
        for (name, indices) in [
            ("enc.s1.b0.attn.wqkv", vec![0usize, 17, 100]),
            ("enc.s1.b0.attn.wo", vec![3, 40]),
            ("enc.s1.attn_bias", vec![0, 5]),
            ("enc.s1.b0.mlp.w1", vec![10, 99]),
            ("enc.s1.b0.ln1.g", vec![0, 7]),
        ] {
            let ad = grads.get(bound.var(name)).unwrap().to_vec();
            for &idx in &indices {
                let mut plus = set.clone();
                let mut d = plus.get(name).to_vec();
                d[idx] += h;
                plus.set(name, d);
                let mut minus = set.clone();
                let mut d = minus.get(name).to_vec();
                d[idx] -= h;
                minus.set(name, d);
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let rel = (ad[idx] - fd).abs() / ad[idx].abs().max(fd.abs()).max(1e-9);
                assert!(rel < 1e-3, "{name}[{idx}]: ad={} fd={fd} rel={rel}", ad[idx]);
            }
        }
    }
}
