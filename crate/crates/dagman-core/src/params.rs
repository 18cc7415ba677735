//! Named parameter sets, the AdamW optimizer and the EMA teacher update.

use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tape::{Grads, Tape, Var};

/// Ordered, named collection of flat tensors. Insertion order is the
/// canonical order used for binding, optimizer state and checkpoints.
#[derive(Clone)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Arc<Vec<F>>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor {name}: data/shape mismatch"
        );
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.shapes.push(shape);
        self.data.push(Arc::new(data));
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn data_at(&self, i: usize) -> &[F] {
        &self.data[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &[F] {
        let i = self
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.data[i]
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        let i = self
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.shapes[i]
    }

    pub fn set(&mut self, name: &str, data: Vec<F>) {
        let i = self
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(data.len(), self.data[i].len());
        self.data[i] = Arc::new(data);
    }

    pub fn set_at(&mut self, i: usize, data: Vec<F>) {
        assert_eq!(data.len(), self.data[i].len());
        self.data[i] = Arc::new(data);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[F])> {
        (0..self.len()).map(move |i| {
            (
                self.names[i].as_str(),
                self.shapes[i].as_slice(),
                self.data[i].as_slice(),
            )
        })
    }

    /// Convert between scalar types (f32 training set -> f64 oracle set).
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for (name, shape, data) in self.iter() {
            out.add(
                name,
                shape.to_vec(),
                data.iter().map(|&v| G::of(v.as_f64())).collect(),
            );
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian payload; used by tests
    /// to assert that a parameter set did not change.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, shape, data) in self.iter() {
            h.update(name.as_bytes());
            for &d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in data {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn same_layout(&self, other: &ParamSet<F>) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }
}

/// Parameter leaves created on a tape for one forward pass.
pub struct Bound<'a, F: Scalar> {
    set: &'a ParamSet<F>,
    vars: Vec<Var>,
}

impl<'a, F: Scalar> Bound<'a, F> {
    pub fn new(tape: &mut Tape<F>, set: &'a ParamSet<F>) -> Self {
        let vars = (0..set.len())
            .map(|i| tape.param(Arc::clone(&set.data[i]), &set.shapes[i]))
            .collect();
        Bound { set, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .set
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn set(&self) -> &ParamSet<F> {
        self.set
    }

    /// Gradient per parameter in canonical order (zeros where untouched).
    pub fn collect_grads(&self, grads: &Grads<F>) -> Vec<Vec<F>> {
        (0..self.set.len())
            .map(|i| match grads.get(self.vars[i]) {
                Some(g) => g.to_vec(),
                None => vec![F::zero(); self.set.data[i].len()],
            })
            .collect()
    }
}

/// θ_t ← λ·θ_t + (1−λ)·θ_s elementwise. λ=1 and λ=0 are exact branches.
pub fn ema_update<F: Scalar>(teacher: &mut ParamSet<F>, student: &ParamSet<F>, lambda: F) {
    assert!(
        teacher.same_layout(student),
        "ema_update: parameter layouts differ"
    );
    if lambda == F::one() {
        return;
    }
    if lambda == F::zero() {
        for i in 0..teacher.len() {
            teacher.set_at(i, student.data[i].to_vec());
        }
        return;
    }
    let one_m = F::one() - lambda;
    for i in 0..teacher.len() {
        let s = &student.data[i];
        let t = &teacher.data[i];
        let new: Vec<F> = t
            .iter()
            .zip(s.iter())
            .map(|(&tv, &sv)| lambda * tv + one_m * sv)
            .collect();
        teacher.set_at(i, new);
    }
}

/// Decoupled-weight-decay Adam. Weight decay is applied to tensors of
/// rank >= 2 only (matrices/tables), never to biases or norm parameters.
pub struct AdamW<F: Scalar> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &ParamSet<F>, weight_decay: F) -> Self {
        AdamW {
            m: params.data.iter().map(|d| vec![F::zero(); d.len()]).collect(),
            v: params.data.iter().map(|d| vec![F::zero(); d.len()]).collect(),
            t: 0,
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Vec<F>], lr: F) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = F::one() - b1.powi(self.t as i32);
        let bc2 = F::one() - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let decay = if params.shapes[i].len() >= 2 {
                self.weight_decay
            } else {
                F::zero()
            };
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &params.data[i];
            let mut new = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let upd = mhat / (vhat.sqrt() + self.eps) + decay * p[j];
                new.push(p[j] - lr * upd);
            }
            params.set_at(i, new);
        }
        Ok(())
    }

    /// Flattened moment access for checkpointing.
    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Vec<F>>, v: Vec<Vec<F>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ParamSet<f32>, ParamSet<f32>) {
        let mut s = ParamSet::new();
        s.add("a", vec![2], vec![4.0, 8.0]);
        s.add("b", vec![1], vec![2.0]);
        let mut t = ParamSet::new();
        t.add("a", vec![2], vec![2.0, 4.0]);
        t.add("b", vec![1], vec![1.0]);
        (s, t)
    }

    #[test]
    fn ema_identities() {
        let (s, mut t) = toy();
        let before = t.content_hash();
        ema_update(&mut t, &s, 1.0);
        assert_eq!(t.content_hash(), before, "lambda=1 must be a no-op");

        ema_update(&mut t, &s, 0.0);
        assert_eq!(t.get("a"), s.get("a"), "lambda=0 copies the student");

        let (s, mut t) = toy();
        ema_update(&mut t, &s, 0.5);
        assert_eq!(t.get("a"), &[3.0, 6.0]);
        assert_eq!(t.get("b"), &[1.5]);
    }

    #[test]
    fn ema_is_contraction_toward_student() {
        let (s, mut t) = toy();
        let d0: Vec<f32> = t
            .get("a")
            .iter()
            .zip(s.get("a"))
            .map(|(a, b)| (a - b).abs())
            .collect();
        ema_update(&mut t, &s, 0.25);
        for (j, (&tv, &sv)) in t.get("a").iter().zip(s.get("a")).enumerate() {
            assert!(((tv - sv).abs() - 0.25 * d0[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_zero_lr_keeps_params_bitwise() {
        let (mut s, _) = toy();
        let snap_a = s.get("a").to_vec();
        let mut opt = AdamW::new(&s, 0.04);
        opt.step(&mut s, &[vec![0.3, -0.9], vec![0.5]], 0.0).unwrap();
        assert_eq!(s.get("a"), snap_a.as_slice());
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let (mut s, _) = toy();
        let mut opt = AdamW::new(&s, 0.0);
        let before = s.get("a").to_vec();
        opt.step(&mut s, &[vec![1.0, -1.0], vec![0.0]], 0.01).unwrap();
        assert!(s.get("a")[0] < before[0]);
        assert!(s.get("a")[1] > before[1]);
    }

    #[test]
    fn cast_round_trip() {
        let (s, _) = toy();
        let d = s.cast::<f64>().cast::<f32>();
        assert_eq!(s.content_hash(), d.content_hash());
    }
}
