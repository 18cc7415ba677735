//! Co-distillation machinery: projection heads, sharpening and centering,
//! the four loss heads (CLS-token distillation, masked patch distillation,
//! global token distillation, masked image prediction), the weighted total
//! loss and the EMA teacher update.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::MaskVector;
use crate::num::Scalar;
use crate::params::{Bound, ParamSet};
pub use crate::params::ema_update;
use crate::rng::{self, tag};
use crate::sa;
use crate::tape::{kernels, Tape, Var};

const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DistillConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    /// EMA momentum λ_m; ramped toward 1 over training by the scheduler.
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub lambda_aitd: f64,
    pub lambda_ampd: f64,
    pub lambda_gitd: f64,
    pub k_cls: usize,
    pub k_patch: usize,
    pub k_g: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau_s: 0.1,
            tau_t: 0.04,
            ema_momentum: 0.996,
            center_momentum: 0.9,
            lambda_aitd: 0.1,
            lambda_ampd: 0.1,
            lambda_gitd: 0.1,
            k_cls: 512,
            k_patch: 512,
            k_g: 512,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0) {
            return Err(Error::validation("distill.tau_s", "temperature must be > 0"));
        }
        if !(self.tau_t > 0.0) {
            return Err(Error::validation("distill.tau_t", "temperature must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::validation("distill.ema_momentum", "must be in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(Error::validation(
                "distill.center_momentum",
                "must be in [0,1)",
            ));
        }
        for (n, l) in [
            ("distill.lambda_aitd", self.lambda_aitd),
            ("distill.lambda_ampd", self.lambda_ampd),
            ("distill.lambda_gitd", self.lambda_gitd),
        ] {
            if l < 0.0 {
                return Err(Error::validation(n, "loss weights must be >= 0"));
            }
        }
        if self.k_cls == 0 || self.k_patch == 0 || self.k_g == 0 {
            return Err(Error::validation("distill.k", "head widths must be >= 1"));
        }
        Ok(())
    }
}

/// Student/teacher parameters plus running centers and the step counter.
#[derive(Clone)]
pub struct DistillState<F: Scalar> {
    pub student: ParamSet<F>,
    pub teacher: ParamSet<F>,
    pub center_cls: Vec<F>,
    pub center_patch: Vec<F>,
    pub center_g: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> DistillState<F> {
    pub fn init(mc: &ModelConfig, dcfg: &DistillConfig, seed: u64) -> Result<Self> {
        mc.validate()?;
        dcfg.validate()?;
        let student = build_param_set(mc, seed);
        let teacher = student.clone();
        Ok(DistillState {
            student,
            teacher,
            center_cls: vec![F::zero(); dcfg.k_cls],
            center_patch: vec![F::zero(); dcfg.k_patch],
            center_g: vec![F::zero(); dcfg.k_g],
            step: 0,
        })
    }

    pub fn cast<G: Scalar>(&self) -> DistillState<G> {
        let conv = |v: &[F]| v.iter().map(|&x| G::of(x.as_f64())).collect();
        DistillState {
            student: self.student.cast(),
            teacher: self.teacher.cast(),
            center_cls: conv(&self.center_cls),
            center_patch: conv(&self.center_patch),
            center_g: conv(&self.center_g),
            step: self.step,
        }
    }
}

/// Register the three projection heads and the AMIP predictor, then build
/// the full parameter set (encoder + SA + heads) for a model config.
pub fn register_heads<F: Scalar>(
    set: &mut ParamSet<F>,
    mc: &ModelConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let d_sa = mc.encoder.sa_width();
    let d4 = mc.encoder.stage_width(4);
    for (prefix, din, k) in [
        ("head.cls", d_sa, mc.k_cls),
        ("head.patch", d_sa, mc.k_patch),
        ("head.g", d4, mc.k_g),
    ] {
        let hidden = 4 * din;
        let std = 0.02;
        set.add(
            format!("{prefix}.w1"),
            vec![din, hidden],
            rng::trunc_normal(rng, din * hidden, std),
        );
        set.add(format!("{prefix}.b1"), vec![hidden], vec![F::zero(); hidden]);
        set.add(
            format!("{prefix}.w2"),
            vec![hidden, hidden],
            rng::trunc_normal(rng, hidden * hidden, std),
        );
        set.add(format!("{prefix}.b2"), vec![hidden], vec![F::zero(); hidden]);
        set.add(
            format!("{prefix}.w3"),
            vec![hidden, k],
            rng::trunc_normal(rng, hidden * k, std),
        );
        set.add(format!("{prefix}.b3"), vec![k], vec![F::zero(); k]);
    }
    let bv: usize = mc.encoder.stage4_block().iter().product();
    set.add(
        "pred.w",
        vec![d4, bv],
        rng::trunc_normal(rng, d4 * bv, 0.02),
    );
    set.add("pred.b", vec![bv], vec![F::zero(); bv]);
}

pub fn build_param_set<F: Scalar>(mc: &ModelConfig, seed: u64) -> ParamSet<F> {
    let mut set = ParamSet::new();
    let mut rng = rng::stream(seed, &[tag::PARAM_INIT]);
    crate::encoder::register_encoder_params(&mut set, &mc.encoder, mc.crop_shape, &mut rng);
    sa::register_sa_params(&mut set, mc.encoder.sa_width(), mc.encoder.mlp_ratio, &mut rng);
    register_heads(&mut set, mc, &mut rng);
    set
}

/// The 3-layer projection MLP on the tape: lin -> gelu -> lin -> gelu -> lin.
pub fn head_forward<F: Scalar>(tape: &mut Tape<F>, x: Var, bound: &Bound<F>, prefix: &str) -> Var {
    let w1 = bound.var(&format!("{prefix}.w1"));
    let b1 = bound.var(&format!("{prefix}.b1"));
    let w2 = bound.var(&format!("{prefix}.w2"));
    let b2 = bound.var(&format!("{prefix}.b2"));
    let w3 = bound.var(&format!("{prefix}.w3"));
    let b3 = bound.var(&format!("{prefix}.b3"));
    let h1 = tape.matmul(x, w1);
    let h1b = tape.add_bias(h1, b1);
    let a1 = tape.gelu(h1b);
    let h2 = tape.matmul(a1, w2);
    let h2b = tape.add_bias(h2, b2);
    let a2 = tape.gelu(h2b);
    let h3 = tape.matmul(a2, w3);
    tape.add_bias(h3, b3)
}

/// Value-level head forward for gradient-free (teacher) paths.
pub fn head_logits_values<F: Scalar>(
    params: &ParamSet<F>,
    prefix: &str,
    x: &[F],
    rows: usize,
) -> Vec<F> {
    let lin = |x: &[F], w: &[F], b: &[F], rows: usize, din: usize, dout: usize| -> Vec<F> {
        let mut out = vec![F::zero(); rows * dout];
        kernels::mm_nn_acc(&mut out, x, w, rows, din, dout);
        for r in 0..rows {
            for j in 0..dout {
                out[r * dout + j] = out[r * dout + j] + b[j];
            }
        }
        out
    };
    let w1 = params.get(&format!("{prefix}.w1"));
    let s1 = params.shape(&format!("{prefix}.w1"));
    let (din, hidden) = (s1[0], s1[1]);
    let k = params.shape(&format!("{prefix}.w3"))[1];
    let mut h = lin(x, w1, params.get(&format!("{prefix}.b1")), rows, din, hidden);
    for v in h.iter_mut() {
        *v = kernels::gelu(*v);
    }
    let mut h2 = lin(
        &h,
        params.get(&format!("{prefix}.w2")),
        params.get(&format!("{prefix}.b2")),
        rows,
        hidden,
        hidden,
    );
    for v in h2.iter_mut() {
        *v = kernels::gelu(*v);
    }
    lin(
        &h2,
        params.get(&format!("{prefix}.w3")),
        params.get(&format!("{prefix}.b3")),
        rows,
        hidden,
        k,
    )
}

/// Rows of nonnegative entries summing to 1.
#[derive(Clone, Debug)]
pub struct TokenDistribution<F: Scalar> {
    pub probs: Vec<F>,
    pub k: usize,
}

impl<F: Scalar> TokenDistribution<F> {
    pub fn rows(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.probs.len() % self.k != 0 {
            return Err(Error::Shape("distribution width mismatch".into()));
        }
        for (i, row) in self.probs.chunks(self.k).enumerate() {
            let s: f64 = row.iter().map(|&p| p.as_f64()).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Numerical(format!(
                    "distribution row {i} sums to {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Temperature-sharpened softmax over logits rows; the teacher path
/// subtracts its running center first, the student path passes None.
pub fn sharpen<F: Scalar>(
    logits: &[F],
    k: usize,
    tau: f64,
    center: Option<&[F]>,
) -> TokenDistribution<F> {
    assert!(tau > 0.0, "temperature must be positive");
    assert_eq!(logits.len() % k, 0);
    if let Some(c) = center {
        assert_eq!(c.len(), k, "center width mismatch");
    }
    let inv_tau = F::of(1.0 / tau);
    let rows = logits.len() / k;
    let mut probs = vec![F::zero(); logits.len()];
    let mut scratch = vec![F::zero(); k];
    for r in 0..rows {
        let row = &logits[r * k..(r + 1) * k];
        for j in 0..k {
            let centered = match center {
                Some(c) => row[j] - c[j],
                None => row[j],
            };
            scratch[j] = centered * inv_tau;
        }
        kernels::softmax_row(&mut probs[r * k..(r + 1) * k], &scratch);
    }
    TokenDistribution { probs, k }
}

/// Project an embedding through a head and sharpen the result.
pub fn project_and_sharpen<F: Scalar>(
    params: &ParamSet<F>,
    prefix: &str,
    embedding: &[F],
    rows: usize,
    tau: f64,
    center: Option<&[F]>,
) -> TokenDistribution<F> {
    let logits = head_logits_values(params, prefix, embedding, rows);
    let k = logits.len() / rows;
    sharpen(&logits, k, tau, center)
}

fn cross_entropy_rows<F: Scalar>(
    p_s: &TokenDistribution<F>,
    p_t: &TokenDistribution<F>,
) -> Result<Vec<f64>> {
    if p_s.k != p_t.k || p_s.probs.len() != p_t.probs.len() {
        return Err(Error::Shape(format!(
            "distribution shapes differ: {}x{} vs {}x{}",
            p_s.rows(),
            p_s.k,
            p_t.rows(),
            p_t.k
        )));
    }
    Ok(p_s
        .probs
        .chunks(p_s.k)
        .zip(p_t.probs.chunks(p_t.k))
        .map(|(ps, pt)| {
            -pt.iter()
                .zip(ps)
                .map(|(&t, &s)| t.as_f64() * s.as_f64().max(LOG_EPS).ln())
                .sum::<f64>()
        })
        .collect())
}

/// CLS-token distillation: −Σ P_t log P_s, averaged over rows (batch).
/// The teacher side carries no gradient by construction.
pub fn loss_aitd<F: Scalar>(
    p_s: &TokenDistribution<F>,
    p_t: &TokenDistribution<F>,
) -> Result<f64> {
    let ce = cross_entropy_rows(p_s, p_t)?;
    if ce.is_empty() {
        return Err(Error::Shape("empty distribution batch".into()));
    }
    Ok(ce.iter().sum::<f64>() / ce.len() as f64)
}

/// Global-token distillation: identical form to AITD on pooled features.
pub fn loss_gitd<F: Scalar>(
    p_s: &TokenDistribution<F>,
    p_t: &TokenDistribution<F>,
) -> Result<f64> {
    loss_aitd(p_s, p_t)
}

/// Masked patch distillation: per-token CE weighted by the masked
/// indicator, divided by the masked count; exactly 0 under an empty mask.
pub fn loss_ampd<F: Scalar>(
    p_s: &TokenDistribution<F>,
    p_t: &TokenDistribution<F>,
    m_att: &MaskVector,
) -> Result<f64> {
    if p_s.rows() != m_att.len() {
        return Err(Error::Shape(format!(
            "mask length {} vs {} token rows",
            m_att.len(),
            p_s.rows()
        )));
    }
    let ce = cross_entropy_rows(p_s, p_t)?;
    let masked = m_att.masked_count();
    if masked == 0 {
        return Ok(0.0);
    }
    let total: f64 = ce
        .iter()
        .enumerate()
        .filter(|(i, _)| m_att.is_masked(*i))
        .map(|(_, &v)| v)
        .sum();
    Ok(total / masked as f64)
}

/// Masked image prediction: L1 over voxels whose covering input-patch
/// token is masked, divided by the count of such voxels.
pub fn loss_amip<F: Scalar>(pred: &[F], target: &[F], voxel_masked: &[u8]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != voxel_masked.len() {
        return Err(Error::Shape(format!(
            "prediction/target/mask lengths differ: {}/{}/{}",
            pred.len(),
            target.len(),
            voxel_masked.len()
        )));
    }
    let count = voxel_masked.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .zip(voxel_masked)
        .filter(|(_, &m)| m == 1)
        .map(|((&p, &t), _)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    Ok(total / count as f64)
}

/// L = L_AMIP + λ_AMPD·L_AMPD + λ_AITD·L_AITD + λ_GITD·L_GITD.
pub fn total_loss(amip: f64, ampd: f64, aitd: f64, gitd: f64, cfg: &DistillConfig) -> f64 {
    amip + cfg.lambda_ampd * ampd + cfg.lambda_aitd * aitd + cfg.lambda_gitd * gitd
}

/// center ← momentum·center + (1−momentum)·row-mean(batch logits).
pub fn update_center<F: Scalar>(center: &mut [F], batch_logits: &[F], momentum: F) {
    let k = center.len();
    assert!(k > 0 && batch_logits.len() % k == 0, "center width mismatch");
    let rows = batch_logits.len() / k;
    let inv = F::one() / F::of(rows as f64);
    for j in 0..k {
        let mut mean = F::zero();
        for r in 0..rows {
            mean = mean + batch_logits[r * k + j];
        }
        mean = mean * inv;
        center[j] = momentum * center[j] + (F::one() - momentum) * mean;
    }
}

/// Tape-side cross-entropy against constant teacher probabilities:
/// −Σ_i w_i Σ_k P_t[i,k]·log_softmax(logits/τ)[i,k] / denom, as one node.
pub fn tape_ce_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    tau: f64,
    teacher_probs: &[F],
    row_weights: Option<&[F]>,
    denom: f64,
) -> Var {
    let shape = tape.shape(logits).to_vec();
    let k = *shape.last().unwrap();
    let rows = teacher_probs.len() / k;
    debug_assert_eq!(shape.iter().product::<usize>(), teacher_probs.len());
    let scaled = tape.scale(logits, F::of(1.0 / tau));
    let logp = tape.log_softmax_rows(scaled);
    let neg_inv = F::of(-1.0 / denom);
    let mut coeff = Vec::with_capacity(teacher_probs.len());
    for r in 0..rows {
        let w = match row_weights {
            Some(ws) => ws[r],
            None => F::one(),
        };
        for j in 0..k {
            coeff.push(teacher_probs[r * k + j] * w * neg_inv);
        }
    }
    tape.dot_const(logp, Arc::new(coeff))
}

/// Tape-side masked L1: Σ_i w_i·|pred_i − target_i| / denom.
pub fn tape_masked_l1<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Var,
    target: &[F],
    voxel_weights: &[F],
    denom: f64,
) -> Var {
    debug_assert_eq!(tape.shape(pred).iter().product::<usize>(), target.len());
    let t = tape.constant(target.to_vec(), tape.shape(pred).to_vec().as_slice());
    let diff = tape.sub(pred, t);
    let a = tape.abs(diff);
    let inv = F::of(1.0 / denom);
    let coeff: Vec<F> = voxel_weights.iter().map(|&w| w * inv).collect();
    tape.dot_const(a, Arc::new(coeff))
}
