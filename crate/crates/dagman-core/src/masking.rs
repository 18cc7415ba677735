//! Mask generators: attention-guided (with hint tokens), random, blockwise,
//! low-attention and teacher patch dropout, plus resolution conversion
//! between the SA grid and the input-patch grid.
//!
//! Convention: `keep[i] = 1` means token i stays visible; the masked
//! indicator used by the losses is the elementwise complement.

use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::{self, tag};
use crate::sa::SemanticAttention;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    Attention,
    Random,
    Blockwise,
    LowAttention,
    Dropout,
}

/// Per-token binary keep/mask indicator at a stated grid resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    keep: Vec<u8>,
    pub grid_shape: [usize; 3],
    pub strategy: MaskStrategy,
}

impl MaskVector {
    pub fn from_keep(keep: Vec<u8>, grid_shape: [usize; 3], strategy: MaskStrategy) -> Self {
        assert_eq!(keep.len(), grid_shape.iter().product::<usize>());
        debug_assert!(keep.iter().all(|&k| k <= 1));
        MaskVector {
            keep,
            grid_shape,
            strategy,
        }
    }

    pub fn all_visible(grid_shape: [usize; 3], strategy: MaskStrategy) -> Self {
        MaskVector {
            keep: vec![1; grid_shape.iter().product()],
            grid_shape,
            strategy,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// 1 = visible.
    pub fn keep(&self) -> &[u8] {
        &self.keep
    }

    /// m^att: 1 = masked (elementwise complement of keep).
    pub fn masked_indicator(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| 1 - k).collect()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.keep[i] == 0
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 0).count()
    }

    pub fn keep_weights<F: Scalar>(&self) -> Vec<F> {
        self.keep
            .iter()
            .map(|&k| if k == 1 { F::one() } else { F::zero() })
            .collect()
    }

    pub fn masked_weights<F: Scalar>(&self) -> Vec<F> {
        self.keep
            .iter()
            .map(|&k| if k == 0 { F::one() } else { F::zero() })
            .collect()
    }
}

/// Masking ratios: r masks, s hints, r_t teacher patch-drop. The tie rule
/// is fixed: lower flat index wins.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MaskPolicy {
    pub r: f64,
    pub s: f64,
    pub r_t: f64,
    pub block_shape: [usize; 3],
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            r: 0.7,
            s: 0.1,
            r_t: 0.7,
            block_shape: [4, 4, 4],
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::validation("mask.r", "masking ratio must be in [0,1]"));
        }
        if self.s < 0.0 || self.s > self.r {
            return Err(Error::validation("mask.s", "hint ratio must satisfy 0 <= s <= r"));
        }
        if !(0.0..=1.0).contains(&self.r_t) {
            return Err(Error::validation("mask.r_t", "patch-drop ratio must be in [0,1]"));
        }
        if self.block_shape.iter().any(|&b| b == 0) {
            return Err(Error::validation("mask.block_shape", "block dims must be >= 1"));
        }
        Ok(())
    }
}

/// Rank token indices by S_ATT, ties broken toward the lower index.
fn ranked_indices(satt: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..satt.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = if descending {
            satt[b].partial_cmp(&satt[a]).expect("finite attention")
        } else {
            satt[a].partial_cmp(&satt[b]).expect("finite attention")
        };
        ord.then(a.cmp(&b))
    });
    idx
}

/// Attention-guided mask: rank by S_ATT descending; the top ⌊sN⌋ tokens
/// are hints and stay visible, ranks (⌊sN⌋, ⌊rN⌋] are masked. Exactly
/// ⌊rN⌋−⌊sN⌋ tokens end up masked.
pub fn attention_guided_mask(satt: &SemanticAttention, policy: &MaskPolicy) -> Result<MaskVector> {
    policy.validate()?;
    let n = satt.len();
    if n == 0 {
        return Err(Error::Shape("empty semantic attention vector".into()));
    }
    let r_count = (policy.r * n as f64).floor() as usize;
    let s_count = (policy.s * n as f64).floor() as usize;
    if r_count == 0 {
        return Ok(MaskVector::all_visible(satt.grid_shape, MaskStrategy::Attention));
    }
    if s_count >= r_count {
        return Err(Error::Policy(format!(
            "hint count {s_count} >= mask count {r_count} after flooring (s={}, r={}, N={n})",
            policy.s, policy.r
        )));
    }
    let order = ranked_indices(&satt.values, true);
    let mut keep = vec![1u8; n];
    for &tok in &order[s_count..r_count] {
        keep[tok] = 0;
    }
    Ok(MaskVector::from_keep(keep, satt.grid_shape, MaskStrategy::Attention))
}

/// Low-attention baseline: rank ascending, mask the first ⌊rN⌋ ranks, no
/// hint tokens.
pub fn low_attention_mask(satt: &SemanticAttention, policy: &MaskPolicy) -> Result<MaskVector> {
    policy.validate()?;
    let n = satt.len();
    if n == 0 {
        return Err(Error::Shape("empty semantic attention vector".into()));
    }
    let r_count = (policy.r * n as f64).floor() as usize;
    let order = ranked_indices(&satt.values, false);
    let mut keep = vec![1u8; n];
    for &tok in &order[..r_count] {
        keep[tok] = 0;
    }
    Ok(MaskVector::from_keep(keep, satt.grid_shape, MaskStrategy::LowAttention))
}

/// Exactly ⌊ratio·N⌋ uniformly chosen tokens masked; deterministic per seed.
pub fn random_mask(grid_shape: [usize; 3], ratio: f64, seed: u64) -> Result<MaskVector> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation("ratio", "must be in [0,1]"));
    }
    let n: usize = grid_shape.iter().product();
    let count = (ratio * n as f64).floor() as usize;
    let mut rng = rng::stream(seed, &[tag::MASK]);
    let mut keep = vec![1u8; n];
    for i in sample(&mut rng, n, count) {
        keep[i] = 0;
    }
    Ok(MaskVector::from_keep(keep, grid_shape, MaskStrategy::Random))
}

/// Whole blocks masked in seeded random order until ⌊ratio·N⌋ tokens are
/// covered; the final block is truncated by the lowest-flat-index rule so
/// the count is exact.
pub fn blockwise_mask(
    grid_shape: [usize; 3],
    ratio: f64,
    block_shape: [usize; 3],
    seed: u64,
) -> Result<MaskVector> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation("ratio", "must be in [0,1]"));
    }
    for i in 0..3 {
        if block_shape[i] == 0 || grid_shape[i] % block_shape[i] != 0 {
            return Err(Error::validation(
                "block_shape",
                format!("grid {:?} not divisible by block {:?}", grid_shape, block_shape),
            ));
        }
    }
    let n: usize = grid_shape.iter().product();
    let target = (ratio * n as f64).floor() as usize;
    let blocks_per_dim = [
        grid_shape[0] / block_shape[0],
        grid_shape[1] / block_shape[1],
        grid_shape[2] / block_shape[2],
    ];
    let n_blocks: usize = blocks_per_dim.iter().product();
    let mut order: Vec<usize> = (0..n_blocks).collect();
    let mut rng = rng::stream(seed, &[tag::MASK, 1]);
    // Fisher-Yates with seeded draws.
    for i in (1..n_blocks).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut keep = vec![1u8; n];
    let mut masked = 0usize;
    'outer: for &b in &order {
        if masked >= target {
            break;
        }
        let bz = b / (blocks_per_dim[1] * blocks_per_dim[2]);
        let by = (b / blocks_per_dim[2]) % blocks_per_dim[1];
        let bx = b % blocks_per_dim[2];
        // Token indices of this block in flat (lowest-index) order.
        for oz in 0..block_shape[0] {
            for oy in 0..block_shape[1] {
                for ox in 0..block_shape[2] {
                    if masked >= target {
                        break 'outer;
                    }
                    let z = bz * block_shape[0] + oz;
                    let y = by * block_shape[1] + oy;
                    let x = bx * block_shape[2] + ox;
                    let idx = (z * grid_shape[1] + y) * grid_shape[2] + x;
                    if keep[idx] == 1 {
                        keep[idx] = 0;
                        masked += 1;
                    }
                }
            }
        }
    }
    Ok(MaskVector::from_keep(keep, grid_shape, MaskStrategy::Blockwise))
}

/// Nearest-neighbor replication from the SA grid to the input-patch grid:
/// an input token is masked iff its covering SA cell is masked.
pub fn upsample_mask(m: &MaskVector, factor: [usize; 3]) -> MaskVector {
    assert!(factor.iter().all(|&f| f >= 1), "factor must be >= 1");
    let out_shape = [
        m.grid_shape[0] * factor[0],
        m.grid_shape[1] * factor[1],
        m.grid_shape[2] * factor[2],
    ];
    let mut keep = Vec::with_capacity(out_shape.iter().product());
    for z in 0..out_shape[0] {
        for y in 0..out_shape[1] {
            for x in 0..out_shape[2] {
                let src = ((z / factor[0]) * m.grid_shape[1] + y / factor[1]) * m.grid_shape[2]
                    + x / factor[2];
                keep.push(m.keep[src]);
            }
        }
    }
    MaskVector::from_keep(keep, out_shape, m.strategy)
}

/// Reduce a fine-grid mask to a coarse grid: a coarse cell is masked iff
/// any covered fine token is masked. Inverse of `upsample_mask` on its
/// image (upsample then downsample is the identity).
pub fn downsample_mask_any(m: &MaskVector, factor: [usize; 3]) -> Result<MaskVector> {
    for i in 0..3 {
        if factor[i] == 0 || m.grid_shape[i] % factor[i] != 0 {
            return Err(Error::Shape(format!(
                "grid {:?} not divisible by factor {:?}",
                m.grid_shape, factor
            )));
        }
    }
    let out_shape = [
        m.grid_shape[0] / factor[0],
        m.grid_shape[1] / factor[1],
        m.grid_shape[2] / factor[2],
    ];
    let mut keep = vec![1u8; out_shape.iter().product()];
    for z in 0..m.grid_shape[0] {
        for y in 0..m.grid_shape[1] {
            for x in 0..m.grid_shape[2] {
                let src = (z * m.grid_shape[1] + y) * m.grid_shape[2] + x;
                if m.keep[src] == 0 {
                    let dst = ((z / factor[0]) * out_shape[1] + y / factor[1]) * out_shape[2]
                        + x / factor[2];
                    keep[dst] = 0;
                }
            }
        }
    }
    Ok(MaskVector::from_keep(keep, out_shape, m.strategy))
}

/// ũ = m ⊙ u: zero the masked token embeddings; visible rows unchanged.
pub fn apply_mask<F: Scalar>(tape: &mut Tape<F>, tokens: Var, m: &MaskVector) -> Result<Var> {
    let rows = tape.shape(tokens)[0];
    if rows != m.len() {
        return Err(Error::Shape(format!(
            "mask length {} vs {} token rows",
            m.len(),
            rows
        )));
    }
    Ok(tape.scale_rows(tokens, Arc::new(m.keep_weights())))
}

/// Build the teacher patch-drop mask: exactly ⌊r_t·N⌋ uniformly seeded
/// positions dropped. Fresh mask per (seed) stream.
pub fn dropout_mask(grid_shape: [usize; 3], r_t: f64, seed: u64) -> Result<MaskVector> {
    if !(0.0..=1.0).contains(&r_t) {
        return Err(Error::validation("r_t", "must be in [0,1]"));
    }
    let n: usize = grid_shape.iter().product();
    let count = (r_t * n as f64).floor() as usize;
    let mut rng = rng::stream(seed, &[tag::MASK, 2]);
    let mut keep = vec![1u8; n];
    for i in sample(&mut rng, n, count) {
        keep[i] = 0;
    }
    Ok(MaskVector::from_keep(keep, grid_shape, MaskStrategy::Dropout))
}

/// Patch dropout on a token grid: zero ⌊r_t·N⌋ seeded positions and return
/// the noise mask for inspection.
pub fn patch_dropout<F: Scalar>(
    tape: &mut Tape<F>,
    tokens: Var,
    grid_shape: [usize; 3],
    r_t: f64,
    seed: u64,
) -> Result<(Var, MaskVector)> {
    let m = dropout_mask(grid_shape, r_t, seed)?;
    let dropped = apply_mask(tape, tokens, &m)?;
    Ok((dropped, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn satt(values: Vec<f64>) -> SemanticAttention {
        let n = values.len();
        SemanticAttention {
            values,
            grid_shape: [n, 1, 1],
        }
    }

    #[test]
    fn hand_sorted_example() {
        let s = satt(vec![0.30, 0.25, 0.20, 0.10, 0.05, 0.04, 0.03, 0.02, 0.005, 0.005]);
        let policy = MaskPolicy {
            r: 0.5,
            s: 0.1,
            ..Default::default()
        };
        let m = attention_guided_mask(&s, &policy).unwrap();
        let masked: Vec<usize> = (0..10).filter(|&i| m.is_masked(i)).collect();
        assert_eq!(masked, vec![1, 2, 3, 4]);
        assert!(!m.is_masked(0), "top token is a hint");
        assert_eq!(m.masked_count(), 4);
    }

    #[test]
    fn zero_ratios_mask_nothing() {
        let s = satt(vec![0.1; 12]);
        let policy = MaskPolicy {
            r: 0.0,
            s: 0.0,
            ..Default::default()
        };
        let m = attention_guided_mask(&s, &policy).unwrap();
        assert_eq!(m.masked_count(), 0);
        assert!(m.keep().iter().all(|&k| k == 1));
    }

    #[test]
    fn uniform_ties_break_toward_lower_index() {
        let s = satt(vec![0.125; 8]);
        let policy = MaskPolicy {
            r: 0.5,
            s: 0.125,
            ..Default::default()
        };
        let m = attention_guided_mask(&s, &policy).unwrap();
        let masked: Vec<usize> = (0..8).filter(|&i| m.is_masked(i)).collect();
        assert_eq!(masked, vec![1, 2, 3]);
    }

    #[test]
    fn degenerate_hint_policy_is_an_error() {
        let s = satt(vec![0.1; 10]);
        let policy = MaskPolicy {
            r: 0.15,
            s: 0.12,
            ..Default::default()
        };
        // floor(1.5)=1 masked, floor(1.2)=1 hint -> unsatisfiable.
        assert!(matches!(
            attention_guided_mask(&s, &policy),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn random_mask_count_and_determinism() {
        let a = random_mask([100, 1, 1], 0.7, 9).unwrap();
        assert_eq!(a.masked_count(), 70);
        let b = random_mask([100, 1, 1], 0.7, 9).unwrap();
        assert_eq!(a, b);
        let c = random_mask([100, 1, 1], 0.7, 10).unwrap();
        assert_ne!(a.keep(), c.keep());
    }

    #[test]
    fn blockwise_masks_whole_blocks() {
        let m = blockwise_mask([4, 4, 4], 0.25, [2, 2, 2], 3).unwrap();
        assert_eq!(m.masked_count(), 16);
        // Masked tokens must form exactly 2 full blocks.
        let mut masked_blocks = std::collections::HashSet::new();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    if m.is_masked((z * 4 + y) * 4 + x) {
                        masked_blocks.insert((z / 2, y / 2, x / 2));
                    }
                }
            }
        }
        assert_eq!(masked_blocks.len(), 2);
        for (bz, by, bx) in masked_blocks {
            for oz in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let idx = ((bz * 2 + oz) * 4 + by * 2 + oy) * 4 + bx * 2 + ox;
                        assert!(m.is_masked(idx));
                    }
                }
            }
        }
    }

    #[test]
    fn blockwise_truncates_final_block_by_lowest_index() {
        // target = floor(0.3*64) = 19 = 2 blocks + 3 tokens.
        let m = blockwise_mask([4, 4, 4], 0.3, [2, 2, 2], 3).unwrap();
        assert_eq!(m.masked_count(), 19);
    }

    #[test]
    fn blockwise_rejects_indivisible_grid() {
        assert!(matches!(
            blockwise_mask([5, 4, 4], 0.5, [2, 2, 2], 0),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn low_attention_masks_ascending_ranks() {
        let s = satt((0..9).map(|i| i as f64).collect());
        let policy = MaskPolicy {
            r: 0.5,
            s: 0.0,
            ..Default::default()
        };
        let m = low_attention_mask(&s, &policy).unwrap();
        let masked: Vec<usize> = (0..9).filter(|&i| m.is_masked(i)).collect();
        assert_eq!(masked, vec![0, 1, 2, 3]);
    }

    #[test]
    fn upsample_identity_and_replication() {
        let m = MaskVector::from_keep(vec![1, 0, 1, 1], [4, 1, 1], MaskStrategy::Random);
        assert_eq!(upsample_mask(&m, [1, 1, 1]), m);

        let single = MaskVector::from_keep(vec![0], [1, 1, 1], MaskStrategy::Attention);
        let up = upsample_mask(&single, [4, 4, 4]);
        assert_eq!(up.masked_count(), 64);
        assert_eq!(up.grid_shape, [4, 4, 4]);
    }

    #[test]
    fn upsample_then_downsample_round_trips() {
        let m = random_mask([4, 2, 3], 0.4, 17).unwrap();
        for factor in [[2, 2, 2], [1, 3, 2], [4, 1, 1]] {
            let up = upsample_mask(&m, factor);
            let down = downsample_mask_any(&up, factor).unwrap();
            assert_eq!(down.keep(), m.keep(), "factor {factor:?}");
        }
    }

    #[test]
    fn apply_mask_zeroes_exactly_masked_rows() {
        let mut tape: Tape<f32> = Tape::new(false);
        let tokens = tape.constant(vec![1.5, -2.0, 3.0, 4.0, 5.0, -6.0], &[3, 2]);
        let m = MaskVector::from_keep(vec![1, 0, 1], [3, 1, 1], MaskStrategy::Random);
        let out = apply_mask(&mut tape, tokens, &m).unwrap();
        assert_eq!(tape.value(out), &[1.5, -2.0, 0.0, 0.0, 5.0, -6.0]);

        let all = MaskVector::all_visible([3, 1, 1], MaskStrategy::Random);
        let same = apply_mask(&mut tape, tokens, &all).unwrap();
        assert_eq!(tape.value(same), tape.value(tokens));

        let none = MaskVector::from_keep(vec![0, 0, 0], [3, 1, 1], MaskStrategy::Random);
        let zero = apply_mask(&mut tape, tokens, &none).unwrap();
        assert!(tape.value(zero).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_rejects_length_mismatch() {
        let mut tape: Tape<f32> = Tape::new(false);
        let tokens = tape.constant(vec![0.0; 6], &[3, 2]);
        let m = MaskVector::all_visible([4, 1, 1], MaskStrategy::Random);
        assert!(matches!(
            apply_mask(&mut tape, tokens, &m),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn patch_dropout_counts_and_determinism() {
        let mut tape: Tape<f32> = Tape::new(false);
        let tokens = tape.constant(vec![1.0; 4096 * 2], &[4096, 2]);
        let (_, m) = patch_dropout(&mut tape, tokens, [16, 16, 16], 0.7, 5).unwrap();
        assert_eq!(m.masked_count(), 2867); // floor(0.7 * 4096)

        let (out0, m0) = patch_dropout(&mut tape, tokens, [16, 16, 16], 0.0, 5).unwrap();
        assert_eq!(m0.masked_count(), 0);
        assert_eq!(tape.value(out0), tape.value(tokens));

        let a = dropout_mask([16, 16, 16], 0.7, 5).unwrap();
        assert_eq!(a.keep(), m.keep(), "same seed, same mask");
    }

    #[test]
    fn dropout_marginals_match_binomial_rate() {
        // Each position's drop frequency over many seeds stays within 3
        // sigma of r_t under the binomial model.
        let n = 64usize;
        let trials = 10_000u32;
        let r_t = 0.7;
        let mut hits = vec![0u32; n];
        for seed in 0..trials {
            let m = dropout_mask([n, 1, 1], r_t, seed as u64).unwrap();
            for i in 0..n {
                if m.is_masked(i) {
                    hits[i] += 1;
                }
            }
        }
        // floor(0.7*64)/64 = 44/64 is the exact per-position rate.
        let p = 44.0 / 64.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!(
                (freq - p).abs() < 3.0 * sigma + 1e-9,
                "position {i}: freq {freq} vs p {p}"
            );
        }
    }

    proptest! {
        #[test]
        fn popcounts_match_contracts(n in 1usize..400, ratio in 0.0f64..1.0, seed in 0u64..500) {
            let m = random_mask([n, 1, 1], ratio, seed).unwrap();
            prop_assert_eq!(m.masked_count(), (ratio * n as f64).floor() as usize);
        }

        #[test]
        fn attention_mask_is_rank_invariant_under_rescaling(
            n in 4usize..200, seed in 0u64..500, scale in 0.01f64..100.0,
        ) {
            let mut r = crate::rng::stream(seed, &[7]);
            let values: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            let policy = MaskPolicy { r: 0.6, s: 0.1, ..Default::default() };
            let base = attention_guided_mask(&satt(values.clone()), &policy);
            let scaled = attention_guided_mask(
                &satt(values.iter().map(|v| v * scale).collect()),
                &policy,
            );
            match (base, scaled) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.keep(), b.keep()),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "error behavior must match"),
            }
        }

        #[test]
        fn apply_mask_is_idempotent(n in 1usize..50, seed in 0u64..100) {
            let m = random_mask([n, 1, 1], 0.5, seed).unwrap();
            let mut tape: Tape<f64> = Tape::new(false);
            let mut r = crate::rng::stream(seed, &[8]);
            let data: Vec<f64> = (0..n * 3).map(|_| r.random_range(-1.0..1.0)).collect();
            let x = tape.constant(data, &[n, 3]);
            let once = apply_mask(&mut tape, x, &m).unwrap();
            let twice = apply_mask(&mut tape, once, &m).unwrap();
            prop_assert_eq!(tape.value(once), tape.value(twice));
        }
    }
}
