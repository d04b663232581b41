use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::arch::CmnetArch;
use crate::error::{Error, Result};

/// Weights and biases of every trainable layer.
///
/// Convolution kernels are stored as `[filters, in_channels * k * k]` with the
/// column index `c * k * k + ki * k + kj`; dense layers as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmnetParams {
    pub arch: CmnetArch,
    pub conv1_w: Array2<f64>,
    pub conv1_b: Array1<f64>,
    pub conv2_w: Array2<f64>,
    pub conv2_b: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

/// Gradient buffers with the same layout as [`CmnetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv1_w: Array2<f64>,
    pub conv1_b: Array1<f64>,
    pub conv2_w: Array2<f64>,
    pub conv2_b: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

/// Index of the first dense tensor in [`TENSOR_NAMES`] order.
pub const FIRST_DENSE: usize = 4;

impl CmnetParams {
    pub fn zeros(arch: &CmnetArch) -> Result<Self> {
        arch.validate()?;
        let k2 = arch.kernel * arch.kernel;
        Ok(Self {
            conv1_w: Array2::zeros((arch.conv1_filters, arch.in_channels * k2)),
            conv1_b: Array1::zeros(arch.conv1_filters),
            conv2_w: Array2::zeros((arch.conv2_filters, arch.conv1_filters * k2)),
            conv2_b: Array1::zeros(arch.conv2_filters),
            fc1_w: Array2::zeros((arch.fc1_units, arch.flatten_len())),
            fc1_b: Array1::zeros(arch.fc1_units),
            fc2_w: Array2::zeros((arch.classes, arch.fc1_units)),
            fc2_b: Array1::zeros(arch.classes),
            arch: arch.clone(),
        })
    }

    /// Logical shape of each tensor, kernels reported as `[out, in, k, k]`.
    pub fn shapes(&self) -> [Vec<usize>; 8] {
        let a = &self.arch;
        let k = a.kernel;
        [
            vec![a.conv1_filters, a.in_channels, k, k],
            vec![a.conv1_filters],
            vec![a.conv2_filters, a.conv1_filters, k, k],
            vec![a.conv2_filters],
            vec![a.fc1_units, a.flatten_len()],
            vec![a.fc1_units],
            vec![a.classes, a.fc1_units],
            vec![a.classes],
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            self.conv1_w.as_slice().unwrap(),
            self.conv1_b.as_slice().unwrap(),
            self.conv2_w.as_slice().unwrap(),
            self.conv2_b.as_slice().unwrap(),
            self.fc1_w.as_slice().unwrap(),
            self.fc1_b.as_slice().unwrap(),
            self.fc2_w.as_slice().unwrap(),
            self.fc2_b.as_slice().unwrap(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.conv1_w.as_slice_mut().unwrap(),
            self.conv1_b.as_slice_mut().unwrap(),
            self.conv2_w.as_slice_mut().unwrap(),
            self.conv2_b.as_slice_mut().unwrap(),
            self.fc1_w.as_slice_mut().unwrap(),
            self.fc1_b.as_slice_mut().unwrap(),
            self.fc2_w.as_slice_mut().unwrap(),
            self.fc2_b.as_slice_mut().unwrap(),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// True when both convolution layers hold bitwise-identical values.
    pub fn conv_equal(&self, other: &CmnetParams) -> bool {
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        self.tensors()[..FIRST_DENSE]
            .iter()
            .zip(other.tensors()[..FIRST_DENSE].iter())
            .all(|(a, b)| bits(a) == bits(b))
    }

    pub fn check_arch(&self, expected: &CmnetArch) -> Result<()> {
        if &self.arch != expected {
            return Err(Error::ArchMismatch {
                expected: expected.to_string(),
                found: self.arch.to_string(),
            });
        }
        Ok(())
    }
}

impl Gradients {
    pub fn zeros_like(p: &CmnetParams) -> Self {
        Self {
            conv1_w: Array2::zeros(p.conv1_w.raw_dim()),
            conv1_b: Array1::zeros(p.conv1_b.raw_dim()),
            conv2_w: Array2::zeros(p.conv2_w.raw_dim()),
            conv2_b: Array1::zeros(p.conv2_b.raw_dim()),
            fc1_w: Array2::zeros(p.fc1_w.raw_dim()),
            fc1_b: Array1::zeros(p.fc1_b.raw_dim()),
            fc2_w: Array2::zeros(p.fc2_w.raw_dim()),
            fc2_b: Array1::zeros(p.fc2_b.raw_dim()),
        }
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            self.conv1_w.as_slice().unwrap(),
            self.conv1_b.as_slice().unwrap(),
            self.conv2_w.as_slice().unwrap(),
            self.conv2_b.as_slice().unwrap(),
            self.fc1_w.as_slice().unwrap(),
            self.fc1_b.as_slice().unwrap(),
            self.fc2_w.as_slice().unwrap(),
            self.fc2_b.as_slice().unwrap(),
        ]
    }
}

/// He-normal weights (variance `2 / fan_in`) and zero biases.
pub fn init_params<R: Rng + ?Sized>(arch: &CmnetArch, rng: &mut R) -> Result<CmnetParams> {
    let mut p = CmnetParams::zeros(arch)?;
    let k2 = arch.kernel * arch.kernel;
    let fan_ins = [
        arch.in_channels * k2,
        arch.conv1_filters * k2,
        arch.flatten_len(),
        arch.fc1_units,
    ];
    let weights: [&mut Array2<f64>; 4] = [&mut p.conv1_w, &mut p.conv2_w, &mut p.fc1_w, &mut p.fc2_w];
    for (w, fan_in) in weights.into_iter().zip(fan_ins) {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        w.iter_mut().for_each(|v| *v = dist.sample(rng));
    }
    Ok(p)
}
