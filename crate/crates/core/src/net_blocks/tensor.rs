use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// A dense `[batch, channels, time]` array of `f32`, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size");
        Tensor { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, b: usize, c: usize, t: usize) -> f32 {
        self.data[(b * self.shape[1] + c) * self.shape[2] + t]
    }

    /// The `[channels, time]` slab of sample `b`.
    pub fn sample(&self, b: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[b * n..(b + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates along time: `[B, C, Ta] ⊕ [B, C, Tb] → [B, C, Ta + Tb]`.
    pub fn concat_time(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape[..2], b.shape[..2], "concat_time needs equal batch and channels");
        let (ta, tb) = (a.shape[2], b.shape[2]);
        let mut out = Vec::with_capacity(a.data.len() + b.data.len());
        for (ra, rb) in a.data.chunks_exact(ta).zip(b.data.chunks_exact(tb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        Tensor::from_vec([a.shape[0], a.shape[1], ta + tb], out)
    }

    /// Inverse of [`Tensor::concat_time`] for gradients.
    pub fn split_time(x: &Tensor, ta: usize) -> (Tensor, Tensor) {
        let t = x.shape[2];
        let tb = t - ta;
        let mut a = Vec::with_capacity(x.data.len() / t * ta);
        let mut b = Vec::with_capacity(x.data.len() / t * tb);
        for row in x.data.chunks_exact(t) {
            a.extend_from_slice(&row[..ta]);
            b.extend_from_slice(&row[ta..]);
        }
        let [bs, c, _] = x.shape;
        (Tensor::from_vec([bs, c, ta], a), Tensor::from_vec([bs, c, tb], b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable; counted by `count_parameters`.
    Weight,
    /// Running statistic; saved and digested but never trained.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    /// Empty for buffers.
    pub grad: Vec<f32>,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl Param {
    pub fn weight(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Param {
            shape,
            value,
            grad: vec![0.0; n],
            kind: ParamKind::Weight,
            frozen: false,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            shape,
            value,
            grad: Vec::new(),
            kind: ParamKind::Buffer,
            frozen: false,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::weight(shape, vec![v; n])
    }

    /// Fan-in scaled normal init, reproducible from `(seed, name)` alone so a
    /// parameter's initial value does not depend on construction order.
    pub fn normal(shape: Vec<usize>, std: f32, seed: u64, name: &str) -> Self {
        let n = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
        let dist = Normal::new(0.0f32, std).expect("finite std");
        Self::weight(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.frozen
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub(crate) fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Visitor over named parameters and buffers.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn named_params(&self, prefix: &str) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, p| out.push((n, p)));
        out
    }

    /// Learnable element count (buffers excluded, frozen weights included).
    fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.kind == ParamKind::Weight {
                n += p.numel()
            }
        });
        n
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("", &mut |_, p| p.frozen = frozen);
    }

    fn is_frozen(&self) -> bool {
        let mut all = true;
        self.visit("", &mut |_, p| {
            if p.kind == ParamKind::Weight && !p.frozen {
                all = false
            }
        });
        all
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// SHA-256 over names, shapes and values of every array, in visit order.
pub fn digest_module(m: &dyn Module, prefix: &str) -> String {
    let mut h = Sha256::new();
    m.visit(prefix, &mut |name, p| {
        h.update(name.as_bytes());
        for d in &p.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &p.value {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_split_time_are_inverse() {
        let a = Tensor::from_vec([2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec([2, 1, 1], vec![9.0, 8.0]);
        let c = Tensor::concat_time(&a, &b);
        assert_eq!(c.data, vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let (a2, b2) = Tensor::split_time(&c, 2);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn init_depends_on_seed_and_name_only() {
        let p = Param::normal(vec![4, 3], 1.0, 7, "x.weight");
        let q = Param::normal(vec![4, 3], 1.0, 7, "x.weight");
        let r = Param::normal(vec![4, 3], 1.0, 7, "y.weight");
        assert_eq!(p, q);
        assert_ne!(p.value, r.value);
    }
}
