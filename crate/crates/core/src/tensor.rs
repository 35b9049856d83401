//! Dense row-major `f64` tensors.
//!
//! Image-like tensors use `[N, C, H, W]` (batched) or `[C, H, W]` (single sample)
//! layout. Everything downstream treats axis 1 of a batched tensor as the channel
//! axis.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{validation_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(validation_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Like [`Tensor::new`] but panics on a length mismatch; for internal use
    /// where the length is correct by construction.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let n: f64 = StandardNormal.sample(rng);
                n * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    /// `[N, C, H, W]` dims; panics on other ranks.
    pub fn dims4(&self) -> [usize; 4] {
        match self.shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => panic!("expected rank-4 tensor, got {:?}", self.shape),
        }
    }

    /// `[C, H, W]` dims; panics on other ranks.
    pub fn dims3(&self) -> [usize; 3] {
        match self.shape[..] {
            [c, h, w] => [c, h, w],
            _ => panic!("expected rank-3 tensor, got {:?}", self.shape),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Slice `index` along the leading axis, dropping that axis.
    pub fn index_first(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Tensor { shape: self.shape[1..].to_vec(), data }
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        Tensor { shape, data }
    }

    /// Concatenate along axis 1 (channels for `[N, C, ...]`) or axis 0 for rank-3
    /// `[C, H, W]` inputs.
    pub fn concat_channels(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let rank = items[0].ndim();
        let (outer, axis) = if rank == 3 { (1, 0) } else { (items[0].shape[0], 1) };
        let inner: usize = items[0].shape[axis + 1..].iter().product();
        let total_c: usize = items.iter().map(|t| t.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_c * inner);
        for o in 0..outer {
            for t in items {
                assert_eq!(t.ndim(), rank);
                assert_eq!(t.shape[axis + 1..].iter().product::<usize>(), inner);
                let c = t.shape[axis];
                data.extend_from_slice(&t.data[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = items[0].shape.clone();
        shape[axis] = total_c;
        Tensor { shape, data }
    }

    /// Channels `[start, start + len)` along axis 1 (rank 4) or axis 0 (rank 3).
    pub fn narrow_channels(&self, start: usize, len: usize) -> Tensor {
        let (outer, axis) = if self.ndim() == 3 { (1, 0) } else { (self.shape[0], 1) };
        let c = self.shape[axis];
        assert!(start + len <= c, "narrow {start}+{len} > {c}");
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * c * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor { shape, data }
    }

    /// 2×2 average pooling over the last two axes.
    pub fn avg_pool2(&self) -> Tensor {
        let r = self.ndim();
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let planes: usize = self.shape[..r - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    dst[y * wo + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Tensor { shape, data: out }
    }

    /// Repeated 2×2 average pooling until the spatial size equals `size`.
    pub fn downsample_to(&self, size: usize) -> Tensor {
        let mut t = self.clone();
        while t.shape[t.ndim() - 1] > size {
            t = t.avg_pool2();
        }
        t
    }

    /// Nearest-neighbour 2× upsampling over the last two axes.
    pub fn upsample_nearest2(&self) -> Tensor {
        let r = self.ndim();
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let planes: usize = self.shape[..r - 2].iter().product();
        let (ho, wo) = (h * 2, w * 2);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    dst[y * wo + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        Tensor { shape, data: out }
    }
}
