//! Dense tensors and the domain types built on them.
//!
//! Payloads are stored as `f32` (the on-disk precision); every reduction in
//! [`kernels`] accumulates in `f64`.

pub mod io;
pub mod kernels;

use crate::error::{Error, Result};

pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor};
pub use kernels::{
    average_ranks, cosine_distance, masked_entropy, minmax_normalize, quantile_transform, volume_entropy,
};

/// Tolerance on the per-voxel class sum of a normalized [`ProbVolume`].
pub const PROB_SUM_TOL: f64 = 1e-5;

/// Row-major dense tensor, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Dimension(format!(
                "tensors have 1 to 4 axes, got {}",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Spatial extent `H×W×D` of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Shape3 {
    pub fn new(h: usize, w: usize, d: usize) -> Self {
        Shape3 { h, w, d }
    }

    pub fn voxels(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.d + k
    }

    fn from_slice(s: &[usize]) -> Self {
        Shape3::new(s[0], s[1], s[2])
    }
}

/// Per-voxel class probabilities, `C×H×W×D`, background at class 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    sample_id: String,
    probs: Tensor,
    normalized: bool,
}

impl ProbVolume {
    /// Validates range and per-voxel normalization.
    pub fn new(sample_id: impl Into<String>, probs: Tensor) -> Result<Self> {
        let vol = ProbVolume::unnormalized(sample_id, probs)?;
        let c = vol.classes();
        let v = vol.spatial().voxels();
        let data = vol.probs.data();
        for voxel in 0..v {
            let sum: f64 = (0..c).map(|ci| data[ci * v + voxel] as f64).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Domain(format!(
                    "voxel {voxel} of {} sums to {sum}, expected 1",
                    vol.sample_id
                )));
            }
        }
        Ok(ProbVolume {
            normalized: true,
            ..vol
        })
    }

    /// Range-checked but exempt from the sum-to-one rule (masked or scaled maps).
    pub fn unnormalized(sample_id: impl Into<String>, probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "probability volumes are C×H×W×D, got shape {:?}",
                probs.shape()
            )));
        }
        if probs.shape().contains(&0) {
            return Err(Error::Dimension("probability volume has an empty axis".into()));
        }
        if let Some(bad) = probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("probability {bad} outside [0,1]")));
        }
        Ok(ProbVolume {
            sample_id: sample_id.into(),
            probs,
            normalized: false,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn spatial(&self) -> Shape3 {
        Shape3::from_slice(&self.probs.shape()[1..])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor {
        self.probs
    }

    /// Probability map of one class, flattened over voxels.
    pub fn channel(&self, class: usize) -> &[f32] {
        let v = self.spatial().voxels();
        &self.probs.data()[class * v..(class + 1) * v]
    }

    /// Class distribution of one voxel.
    pub fn voxel(&self, voxel: usize, out: &mut Vec<f64>) {
        let v = self.spatial().voxels();
        out.clear();
        out.extend((0..self.classes()).map(|c| self.probs.data()[c * v + voxel] as f64));
    }

    /// Hard labels by argmax, ties toward the lowest class index.
    pub fn argmax_labels(&self) -> Vec<u8> {
        let v = self.spatial().voxels();
        let c = self.classes();
        let data = self.probs.data();
        (0..v)
            .map(|voxel| {
                let mut best = 0usize;
                let mut best_p = data[voxel];
                for ci in 1..c {
                    let p = data[ci * v + voxel];
                    if p > best_p {
                        best = ci;
                        best_p = p;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// `{0,1}` mask over a spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Shape3,
    mask: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Shape3, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != shape.voxels() {
            return Err(Error::Dimension(format!(
                "mask of {} voxels for shape {:?}",
                mask.len(),
                shape
            )));
        }
        Ok(BinaryMask { shape, mask })
    }

    pub fn filled(shape: Shape3, value: bool) -> Self {
        BinaryMask {
            shape,
            mask: vec![value; shape.voxels()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::new(self.shape.dims().to_vec(), data).expect("mask shape is consistent")
    }

    /// Mask files hold exactly 0.0 or 1.0.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::Dimension(format!("masks are H×W×D, got shape {:?}", t.shape())));
        }
        let mask = t
            .data()
            .iter()
            .map(|&x| {
                if x == 0.0 {
                    Ok(false)
                } else if x == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::Domain(format!("mask value {x} is not 0 or 1")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        BinaryMask::new(Shape3::from_slice(t.shape()), mask)
    }
}

/// Pooled feature vector of one sample under one encoder snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVec {
    sample_id: String,
    encoder_round: u32,
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVec {
    pub fn new(sample_id: impl Into<String>, encoder_round: u32, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding has no components"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("embedding has non-finite components".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Domain("embedding has zero norm".into()));
        }
        Ok(EmbeddingVec {
            sample_id: sample_id.into(),
            encoder_round,
            values,
            norm,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn encoder_round(&self) -> u32 {
        self.encoder_round
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.values.iter().map(|&v| v as f32).collect();
        Tensor::new(vec![self.values.len()], data).expect("1-D shape matches")
    }

    pub fn from_tensor(sample_id: impl Into<String>, encoder_round: u32, t: &Tensor) -> Result<Self> {
        if t.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "embeddings are 1-D, got shape {:?}",
                t.shape()
            )));
        }
        EmbeddingVec::new(sample_id, encoder_round, t.data().iter().map(|&v| v as f64).collect())
    }
}

/// Integer label map stored as an `H×W×D` f32 tensor of class indices.
pub fn label_tensor(shape: Shape3, labels: &[u8]) -> Result<Tensor> {
    if labels.len() != shape.voxels() {
        return Err(Error::Dimension(format!(
            "{} labels for shape {:?}",
            labels.len(),
            shape
        )));
    }
    Tensor::new(shape.dims().to_vec(), labels.iter().map(|&l| l as f32).collect())
}

pub fn labels_from_tensor(t: &Tensor) -> Result<(Shape3, Vec<u8>)> {
    if t.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "label maps are H×W×D, got shape {:?}",
            t.shape()
        )));
    }
    let labels = t
        .data()
        .iter()
        .map(|&x| {
            if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(Error::Domain(format!("label value {x} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Shape3::from_slice(t.shape()), labels))
}
