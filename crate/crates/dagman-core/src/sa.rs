//! Semantic attention: two transformer blocks with a global `[CLS]` token
//! appended to the patch tokens of one encoder stage. The head-averaged
//! `[CLS]`-to-patch attention row of the final block is the semantic
//! attention vector that drives attention-guided masking.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::tape::{Tape, Var};

/// Head-averaged `[CLS]` attention over patch tokens, in `[0, 1]`.
/// The `[CLS]`→`[CLS]` entry is dropped without renormalization, so the
/// entries sum to at most 1.
#[derive(Clone, Debug)]
pub struct SemanticAttention {
    pub values: Vec<f64>,
    pub grid_shape: [usize; 3],
}

impl SemanticAttention {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gather plans for the SA blocks at a fixed sequence length.
pub struct SaPlan {
    pub n_patches: usize,
    pub width: usize,
    pub heads: usize,
    /// [h, N+1, dh] <- [N+1, D] head split (same plan for q, k, v).
    split: Arc<Vec<u32>>,
    /// [N+1, D] <- [h, N+1, dh] head merge.
    merge: Arc<Vec<u32>>,
    /// [h, N+1] <- softmax rows: the CLS query row of every head.
    cls_rows: Arc<Vec<u32>>,
    /// [N, D] <- [N+1, D]: strip the CLS row.
    strip_cls: Arc<Vec<u32>>,
    /// [1, D] <- [N+1, D]: the CLS row.
    take_cls: Arc<Vec<u32>>,
    /// [N] <- [N+1]: patch entries of the head-averaged attention.
    take_patches: Arc<Vec<u32>>,
}

impl SaPlan {
    pub fn new(n_patches: usize, width: usize, heads: usize) -> Self {
        assert!(heads >= 1 && width % heads == 0, "heads must divide width");
        let n1 = n_patches + 1;
        let dh = width / heads;
        let mut split = Vec::with_capacity(heads * n1 * dh);
        for h in 0..heads {
            for i in 0..n1 {
                for j in 0..dh {
                    split.push((i * width + h * dh + j) as u32);
                }
            }
        }
        let mut merge = Vec::with_capacity(n1 * width);
        for i in 0..n1 {
            for h in 0..heads {
                for j in 0..dh {
                    merge.push(((h * n1 + i) * dh + j) as u32);
                }
            }
        }
        let mut cls_rows = Vec::with_capacity(heads * n1);
        for h in 0..heads {
            let row = h * n1 + n_patches;
            for k in 0..n1 {
                cls_rows.push((row * n1 + k) as u32);
            }
        }
        let strip_cls: Vec<u32> = (0..n_patches * width).map(|i| i as u32).collect();
        let take_cls: Vec<u32> = (0..width).map(|j| (n_patches * width + j) as u32).collect();
        let take_patches: Vec<u32> = (0..n_patches).map(|i| i as u32).collect();
        SaPlan {
            n_patches,
            width,
            heads,
            split: Arc::new(split),
            merge: Arc::new(merge),
            cls_rows: Arc::new(cls_rows),
            strip_cls: Arc::new(strip_cls),
            take_cls: Arc::new(take_cls),
            take_patches: Arc::new(take_patches),
        }
    }
}

/// Register the SA parameters (two pre-norm ViT blocks plus the learned
/// `[CLS]` vector) under the `sa.` prefix.
pub fn register_sa_params<F: Scalar>(
    set: &mut ParamSet<F>,
    width: usize,
    mlp_ratio: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) {
    let std = 0.02;
    set.add("sa.cls", vec![width], rng::trunc_normal(rng, width, std));
    for b in 0..2 {
        let p = format!("sa.b{b}");
        set.add(format!("{p}.ln1.g"), vec![width], vec![F::one(); width]);
        set.add(format!("{p}.ln1.b"), vec![width], vec![F::zero(); width]);
        for w in ["wq", "wk", "wv", "wo"] {
            set.add(
                format!("{p}.{w}"),
                vec![width, width],
                rng::trunc_normal(rng, width * width, std),
            );
        }
        for bn in ["bq", "bk", "bv", "bo"] {
            set.add(format!("{p}.{bn}"), vec![width], vec![F::zero(); width]);
        }
        set.add(format!("{p}.ln2.g"), vec![width], vec![F::one(); width]);
        set.add(format!("{p}.ln2.b"), vec![width], vec![F::zero(); width]);
        let hidden = mlp_ratio * width;
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

/// Outputs of the SA module on one token grid.
pub struct SaForward {
    /// Updated patch tokens, grid-shaped ([CLS] stripped): [N, D].
    pub tokens: Var,
    /// Final [CLS] embedding: [1, D].
    pub cls: Var,
    /// Final-block per-head [CLS] attention rows: [h, N+1].
    pub head_rows: Var,
    /// Head-averaged patch attention (Eq. 1 on the tape): [N].
    pub satt: Var,
    /// Final-block CLS query per head: [h, dh] (for oracle cross-checks).
    pub q_cls: Var,
    /// Final-block keys per head: [h, N+1, dh].
    pub keys: Var,
}

/// Append the learned `[CLS]` vector after the patch tokens: [N+1, D].
pub fn attach_cls<F: Scalar>(tape: &mut Tape<F>, x: Var, bound: &Bound<F>) -> Var {
    let width = *tape.shape(x).last().unwrap();
    let cls = bound.var("sa.cls");
    let cls_row = tape.reshape(cls, &[1, width]);
    tape.concat_rows(x, cls_row)
}

struct SaAttnOut {
    out: Var,
    rows: Var,
    q_cls: Var,
    keys: Var,
}

fn sa_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    bound: &Bound<F>,
    plan: &SaPlan,
    block: usize,
) -> SaAttnOut {
    let n1 = plan.n_patches + 1;
    let (h, d) = (plan.heads, plan.width);
    let dh = d / h;
    let p = format!("sa.b{block}");

    let project = |tape: &mut Tape<F>, w: &str, b: &str| -> Var {
        let wv = bound.var(&format!("{p}.{w}"));
        let bv = bound.var(&format!("{p}.{b}"));
        let y = tape.matmul(x, wv);
        tape.add_bias(y, bv)
    };
    let q = project(tape, "wq", "bq");
    let k = project(tape, "wk", "bk");
    let v = project(tape, "wv", "bv");

    let qh = tape.gather(q, Arc::clone(&plan.split), &[h, n1, dh]);
    let kh = tape.gather(k, Arc::clone(&plan.split), &[h, n1, dh]);
    let vh = tape.gather(v, Arc::clone(&plan.split), &[h, n1, dh]);

    let scores = tape.bmm_nt(qh, kh);
    let scaled = tape.scale(scores, F::one() / F::of((dh as f64).sqrt()));
    let rows2d = tape.reshape(scaled, &[h * n1, n1]);
    let probs = tape.softmax_rows(rows2d);
    let probs3 = tape.reshape(probs, &[h, n1, n1]);
    let ctx = tape.bmm_nn(probs3, vh);
    let merged = tape.gather(ctx, Arc::clone(&plan.merge), &[n1, d]);
    let wo = bound.var(&format!("{p}.wo"));
    let bo = bound.var(&format!("{p}.bo"));
    let proj = tape.matmul(merged, wo);
    let out = tape.add_bias(proj, bo);

    let rows = tape.gather(probs, Arc::clone(&plan.cls_rows), &[h, n1]);
    let q_cls = {
        // The CLS query of each head lives at row n_patches of qh.
        let mut idx = Vec::with_capacity(h * dh);
        for hh in 0..h {
            for j in 0..dh {
                idx.push(((hh * n1 + plan.n_patches) * dh + j) as u32);
            }
        }
        tape.gather(qh, Arc::new(idx), &[h, dh])
    };
    SaAttnOut {
        out,
        rows,
        q_cls,
        keys: kh,
    }
}

/// Run both SA blocks with full global attention over the N+1 sequence.
/// `path_drop` scales the residual branches (student stochastic depth);
/// entries are consumed in block order, two per block.
pub fn sa_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x_with_cls: Var,
    bound: &Bound<F>,
    plan: &SaPlan,
    path_drop: &mut dyn FnMut() -> F,
) -> SaForward {
    let eps = F::of(1e-5);
    let mut x = x_with_cls;
    let mut last = None;
    for block in 0..2 {
        let p = format!("sa.b{block}");
        let g1 = bound.var(&format!("{p}.ln1.g"));
        let b1 = bound.var(&format!("{p}.ln1.b"));
        let ln1 = tape.layer_norm(x, g1, b1, eps);
        let attn = sa_attention(tape, ln1, bound, plan, block);
        let scaled = tape.scale(attn.out, path_drop());
        x = tape.add(x, scaled);

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
        let scaled = tape.scale(h2b, path_drop());
        x = tape.add(x, scaled);

        last = Some(attn);
    }
    let attn = last.expect("two blocks ran");
    let n1 = plan.n_patches + 1;

    let avg = tape.mean_axis0(attn.rows); // [N+1]
    let satt = tape.gather(avg, Arc::clone(&plan.take_patches), &[plan.n_patches]);
    let tokens = tape.gather(x, Arc::clone(&plan.strip_cls), &[plan.n_patches, plan.width]);
    let cls = tape.gather(x, Arc::clone(&plan.take_cls), &[1, plan.width]);
    debug_assert_eq!(tape.shape(attn.rows), &[plan.heads, n1]);
    SaForward {
        tokens,
        cls,
        head_rows: attn.rows,
        satt,
        q_cls: attn.q_cls,
        keys: attn.keys,
    }
}

/// Eq. 1 from per-head `[CLS]` attention rows: validate each row is a
/// probability vector over N+1 keys, average over heads, drop the
/// `[CLS]`→`[CLS]` entry without renormalizing.
pub fn compute_satt(rows: &[f64], heads: usize, grid_shape: [usize; 3]) -> Result<SemanticAttention> {
    if heads == 0 || rows.len() % heads != 0 {
        return Err(Error::Shape("attention rows/head count mismatch".into()));
    }
    let n1 = rows.len() / heads;
    let n = n1 - 1;
    if n != grid_shape.iter().product::<usize>() {
        return Err(Error::Shape(format!(
            "grid {:?} does not match {} patch entries",
            grid_shape, n
        )));
    }
    for h in 0..heads {
        let row = &rows[h * n1..(h + 1) * n1];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Numerical(format!(
                "attention row {h} sums to {sum}, expected 1"
            )));
        }
    }
    let mut values = vec![0.0f64; n];
    for h in 0..heads {
        let row = &rows[h * n1..(h + 1) * n1];
        for i in 0..n {
            values[i] += row[i];
        }
    }
    let inv = 1.0 / heads as f64;
    for v in values.iter_mut() {
        *v *= inv;
    }
    Ok(SemanticAttention { values, grid_shape })
}

/// Eq. 1 end-to-end from raw per-head CLS queries and keys:
/// softmax(q·K^T/sqrt(dh)) per head, averaged, CLS entry dropped.
pub fn compute_satt_from_qk(
    q_cls: &[f64],
    keys: &[f64],
    heads: usize,
    grid_shape: [usize; 3],
) -> Result<SemanticAttention> {
    if heads == 0 || q_cls.len() % heads != 0 {
        return Err(Error::Shape("q_cls/head count mismatch".into()));
    }
    let dh = q_cls.len() / heads;
    if keys.len() % (heads * dh) != 0 {
        return Err(Error::Shape("keys/head width mismatch".into()));
    }
    let n1 = keys.len() / (heads * dh);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut rows = Vec::with_capacity(heads * n1);
    for h in 0..heads {
        let q = &q_cls[h * dh..(h + 1) * dh];
        let mut scores = Vec::with_capacity(n1);
        for i in 0..n1 {
            let k = &keys[(h * n1 + i) * dh..(h * n1 + i + 1) * dh];
            let dot: f64 = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
            scores.push(dot * scale);
        }
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        rows.extend(exps.into_iter().map(|e| e / total));
    }
    compute_satt(&rows, heads, grid_shape)
}
