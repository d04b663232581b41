//! Scenario parameters, Rayleigh channel draws and received-signal generation.
//!
//! The reader observes `x_n = v s_n + u_n` with `v = h` when the tag absorbs
//! (bit 0) and `v = w = h + b` when it reflects (bit 1). The reflection
//! coefficient, the source-to-tag channel and the tag-to-reader channel are
//! lumped into the backscatter vector `b`, whose entries are CN(0, zeta).

use std::path::Path;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, complex_normal, tag};

pub type CMatrix = Array2<Complex64>;
pub type CVector = Array1<Complex64>;

/// All constants describing one operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    /// Receive antennas.
    pub m: usize,
    /// Source samples per tag symbol.
    pub n_str: usize,
    /// Pilot symbols at the head of every frame.
    pub p_pilots: usize,
    /// Tag symbols per frame, pilots included.
    pub t_symbols: usize,
    /// Direct-link SNR in dB.
    pub snr_db: f64,
    /// Backscatter-to-direct average gain ratio in dB; `-inf` disables the tag.
    pub zeta_db: f64,
    /// Per-antenna noise power (linear).
    #[serde(default = "default_noise_power")]
    pub noise_power: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise_power() -> f64 {
    1.0
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            m: 16,
            n_str: 50,
            p_pilots: 10,
            t_symbols: 100,
            snr_db: 10.0,
            zeta_db: -20.0,
            noise_power: 1.0,
            seed: 0,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidParams(msg));
        if self.m < 1 {
            return fail("m must be at least 1".into());
        }
        if self.n_str < 1 {
            return fail("n_str must be at least 1".into());
        }
        if self.p_pilots < 2 {
            return fail(format!("p_pilots = {} but at least 2 are needed", self.p_pilots));
        }
        if self.t_symbols <= self.p_pilots {
            return fail(format!(
                "t_symbols = {} must exceed p_pilots = {}",
                self.t_symbols, self.p_pilots
            ));
        }
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return fail(format!("noise_power = {} must be positive", self.noise_power));
        }
        if !self.snr_db.is_finite() {
            return fail("snr_db must be finite".into());
        }
        if self.zeta_db.is_nan() || self.zeta_db == f64::INFINITY {
            return fail("zeta_db must be finite or -inf".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let params: SystemParams =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("SystemParams always serializes")
    }

    /// Data symbols per frame.
    pub fn data_symbols(&self) -> usize {
        self.t_symbols - self.p_pilots
    }

    pub fn zeta_linear(&self) -> f64 {
        db_to_linear(self.zeta_db)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Source power giving the configured direct-link SNR under unit-variance
/// Rayleigh entries: `E|h s|^2 / E|u|^2 = M sigma_s^2 / (M sigma_u^2)`.
pub fn derive_signal_power(params: &SystemParams) -> f64 {
    db_to_linear(params.snr_db) * params.noise_power
}

/// Channel state of one frame together with both hypothesis covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: CVector,
    pub w: CVector,
    pub sigma_s2: f64,
    pub noise_power: f64,
    pub sigma_0: CMatrix,
    pub sigma_1: CMatrix,
}

impl ChannelRealization {
    /// Builds the realization from explicit channel vectors.
    pub fn from_vectors(h: CVector, w: CVector, sigma_s2: f64, noise_power: f64) -> Result<Self> {
        if h.len() != w.len() || h.is_empty() {
            return Err(Error::dim(format!("h and w of equal nonzero length {}", h.len()), w.len()));
        }
        let sigma_0 = rank_one_plus_noise(&h, sigma_s2, noise_power);
        let sigma_1 = rank_one_plus_noise(&w, sigma_s2, noise_power);
        Ok(Self {
            h,
            w,
            sigma_s2,
            noise_power,
            sigma_0,
            sigma_1,
        })
    }

    pub fn m(&self) -> usize {
        self.h.len()
    }

    /// Backscatter component `w - h`.
    pub fn backscatter(&self) -> CVector {
        &self.w - &self.h
    }

    pub fn covariance(&self, bit: u8) -> &CMatrix {
        if bit == 1 {
            &self.sigma_1
        } else {
            &self.sigma_0
        }
    }
}

fn rank_one_plus_noise(v: &CVector, sigma_s2: f64, noise_power: f64) -> CMatrix {
    let m = v.len();
    Array2::from_shape_fn((m, m), |(i, j)| {
        let mut e = v[i] * v[j].conj() * sigma_s2;
        if i == j {
            // exact real diagonal
            e = Complex64::new(e.re + noise_power, 0.0);
        }
        e
    })
}

/// Draws `h ~ CN(0, I)` and `b ~ CN(0, zeta I)`, with `w = h + b`.
pub fn sample_channel<R: Rng + ?Sized>(params: &SystemParams, rng: &mut R) -> ChannelRealization {
    let m = params.m;
    let zeta = params.zeta_linear();
    let h: CVector = (0..m).map(|_| complex_normal(rng, 1.0)).collect();
    let b: CVector = (0..m).map(|_| complex_normal(rng, zeta)).collect();
    let w = &h + &b;
    ChannelRealization::from_vectors(h, w, derive_signal_power(params), params.noise_power)
        .expect("vectors have length m")
}

/// One tag symbol's M x N sampling matrix and its bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TagSymbolSample {
    pub x: CMatrix,
    pub label: u8,
}

pub fn generate_tag_symbol<R: Rng + ?Sized>(
    chan: &ChannelRealization,
    bit: u8,
    params: &SystemParams,
    rng: &mut R,
) -> TagSymbolSample {
    debug_assert!(bit <= 1);
    let m = chan.m();
    let n = params.n_str;
    let v = if bit == 1 { &chan.w } else { &chan.h };
    let mut x = CMatrix::zeros((m, n));
    for col in 0..n {
        let s = complex_normal(rng, chan.sigma_s2);
        for row in 0..m {
            x[[row, col]] = v[row] * s + complex_normal(rng, chan.noise_power);
        }
    }
    TagSymbolSample { x, label: bit }
}

/// Known pilot bits: 1, 0, 1, 0, ...
pub fn pilot_pattern(p: usize) -> Vec<u8> {
    (0..p).map(|i| if i % 2 == 0 { 1 } else { 0 }).collect()
}

/// Pilots followed by `data_bits`, all sharing the frame's channel.
pub fn generate_frame<R: Rng + ?Sized>(
    chan: &ChannelRealization,
    params: &SystemParams,
    data_bits: &[u8],
    rng: &mut R,
) -> Result<Vec<TagSymbolSample>> {
    if data_bits.len() != params.data_symbols() {
        return Err(Error::dim(
            format!("{} data bits (T - P)", params.data_symbols()),
            data_bits.len(),
        ));
    }
    if let Some(&bad) = data_bits.iter().find(|&&b| b > 1) {
        return Err(Error::InvalidParams(format!("data bit {bad} is not 0 or 1")));
    }
    Ok(pilot_pattern(params.p_pilots)
        .iter()
        .chain(data_bits)
        .map(|&bit| generate_tag_symbol(chan, bit, params, rng))
        .collect())
}

/// A complete frame drawn from a frame seed: channel, data bits and samples
/// each come from their own sub-stream of the seed.
#[derive(Debug, Clone)]
pub struct Frame {
    pub channel: ChannelRealization,
    pub symbols: Vec<TagSymbolSample>,
    pub p_pilots: usize,
}

impl Frame {
    pub fn draw(params: &SystemParams, frame_seed: u64) -> Result<Self> {
        params.validate()?;
        let channel = sample_channel(params, &mut rng::substream(frame_seed, &[tag::CHANNEL]));
        let mut bit_rng = rng::substream(frame_seed, &[tag::FRAME_BITS]);
        let data_bits: Vec<u8> = (0..params.data_symbols())
            .map(|_| bit_rng.random_range(0..=1u8))
            .collect();
        let symbols = generate_frame(
            &channel,
            params,
            &data_bits,
            &mut rng::substream(frame_seed, &[tag::FRAME_SAMPLES]),
        )?;
        Ok(Self {
            channel,
            symbols,
            p_pilots: params.p_pilots,
        })
    }

    pub fn pilots(&self) -> &[TagSymbolSample] {
        &self.symbols[..self.p_pilots]
    }

    pub fn data(&self) -> &[TagSymbolSample] {
        &self.symbols[self.p_pilots..]
    }
}
