use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// The four disjoint parameter groups of the acoustic model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Encoder,
    VarianceAdaptor,
    Decoder,
    SpeakerStore,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Encoder => "encoder",
            Partition::VarianceAdaptor => "variance_adaptor",
            Partition::Decoder => "decoder",
            Partition::SpeakerStore => "speaker_store",
        })
    }
}

impl Partition {
    pub const ALL: [Partition; 4] =
        [Partition::Encoder, Partition::VarianceAdaptor, Partition::Decoder, Partition::SpeakerStore];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub partition: Partition,
    pub rows: usize,
    pub cols: usize,
}

/// An ordered collection of named tensors, each tagged with one partition.
/// Metadata is shared between clones, values are not.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    meta: Arc<[ParamMeta]>,
    pub values: Vec<Tensor<f64>>,
}

impl ParamSet {
    pub fn new(meta: Vec<ParamMeta>, values: Vec<Tensor<f64>>) -> Self {
        assert_eq!(meta.len(), values.len());
        for (m, v) in meta.iter().zip(&values) {
            assert_eq!((m.rows, m.cols), v.shape(), "tensor {} shape", m.name);
        }
        Self { meta: meta.into(), values }
    }

    pub fn meta(&self) -> &[ParamMeta] {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.name == name)
    }

    pub fn partition_of(&self, i: usize) -> Partition {
        self.meta[i].partition
    }

    /// Tensors of one partition, in layout order.
    pub fn partition(&self, p: Partition) -> impl Iterator<Item = (&ParamMeta, &Tensor<f64>)> {
        self.meta.iter().zip(&self.values).filter(move |(m, _)| m.partition == p)
    }

    /// Checks that names are unique and every tensor carries exactly one tag.
    pub fn assert_partitioned(&self) -> Result<(), String> {
        let mut seen = BTreeMap::new();
        for m in self.meta.iter() {
            if let Some(prev) = seen.insert(m.name.as_str(), m.partition) {
                return Err(format!("tensor {} listed twice ({prev} and {})", m.name, m.partition));
            }
        }
        Ok(())
    }

    /// All partitions' values equal, bitwise, for the given partition.
    pub fn partition_bits_equal(&self, other: &ParamSet, p: Partition) -> bool {
        self.meta
            .iter()
            .zip(self.values.iter().zip(&other.values))
            .filter(|(m, _)| m.partition == p)
            .all(|(_, (a, b))| a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn zeros_like(&self) -> Vec<Tensor<f64>> {
        self.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    /// Flat read access by global scalar index.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in &self.values {
            if idx < t.len() {
                return t.data[idx];
            }
            idx -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut idx: usize, v: f64) {
        for t in &mut self.values {
            if idx < t.len() {
                t.data[idx] = v;
                return;
            }
            idx -= t.len();
        }
        panic!("flat index out of range")
    }

    /// Which tensor and partition a flat index falls into.
    pub fn locate_flat(&self, mut idx: usize) -> (usize, Partition) {
        for (i, t) in self.values.iter().enumerate() {
            if idx < t.len() {
                return (i, self.meta[i].partition);
            }
            idx -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Vector helpers over per-tensor gradient lists.
pub mod vecops {
    use crate::tensor::Tensor;

    pub fn dot(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x.data.iter().zip(&y.data).map(|(p, q)| p * q).sum::<f64>()).sum()
    }

    pub fn norm(a: &[Tensor<f64>]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn scale(a: &mut [Tensor<f64>], k: f64) {
        for t in a {
            for v in &mut t.data {
                *v *= k;
            }
        }
    }

    /// `y += k·x`
    pub fn axpy(y: &mut [Tensor<f64>], k: f64, x: &[Tensor<f64>]) {
        for (ty, tx) in y.iter_mut().zip(x) {
            for (a, b) in ty.data.iter_mut().zip(&tx.data) {
                *a += k * b;
            }
        }
    }

    /// Rescale in place so the global norm is at most `max_norm`; returns
    /// the pre-clip norm.
    pub fn clip_global_norm(a: &mut [Tensor<f64>], max_norm: f64) -> f64 {
        let n = norm(a);
        if n > max_norm {
            scale(a, max_norm / n);
        }
        n
    }
}
