//! Sample covariance features and the source/target training sets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, tag};
use crate::sysmodel::{self, CMatrix, SystemParams, TagSymbolSample};

/// Hermitian sample covariance matrix of one tag symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    pub r: CMatrix,
}

impl Scm {
    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    pub fn trace(&self) -> f64 {
        linalg::trace(&self.r)
    }

    pub fn scaled(&self, factor: f64) -> Scm {
        Scm {
            r: self.r.mapv(|z| z * factor),
        }
    }
}

/// `(1/N) sum_n x_n x_n^H` over the columns of `x`, stored exactly Hermitian.
pub fn scm(x: &CMatrix) -> Result<Scm> {
    let (m, n) = x.dim();
    if n == 0 {
        return Err(Error::dim("at least one column", "0 columns"));
    }
    let inv_n = 1.0 / n as f64;
    let mut r = CMatrix::zeros((m, m));
    for i in 0..m {
        let xi = x.row(i);
        r[[i, i]] = Complex64::new(xi.iter().map(|z| z.norm_sqr()).sum::<f64>() * inv_n, 0.0);
        for j in i + 1..m {
            let xj = x.row(j);
            let acc: Complex64 = xi.iter().zip(xj.iter()).map(|(a, b)| a * b.conj()).sum();
            r[[i, j]] = acc * inv_n;
            r[[j, i]] = r[[i, j]].conj();
        }
    }
    Ok(Scm { r })
}

/// Real and imaginary parts of an SCM as the network's two input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    m: usize,
    /// Real plane then imaginary plane, each row-major `m x m`.
    data: Vec<f64>,
}

impl Planes {
    pub fn from_vec(m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * m * m {
            return Err(Error::dim(2 * m * m, data.len()));
        }
        Ok(Self { m, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn real(&self) -> &[f64] {
        &self.data[..self.m * self.m]
    }

    pub fn imag(&self) -> &[f64] {
        &self.data[self.m * self.m..]
    }

    #[inline]
    pub fn get(&self, plane: usize, i: usize, j: usize) -> f64 {
        self.data[plane * self.m * self.m + i * self.m + j]
    }
}

/// Splits `r` into input planes, first dividing by `trace / M` when `normalize` is set.
pub fn to_planes(r: &Scm, normalize: bool) -> Result<Planes> {
    let m = r.m();
    let tr = r.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::InvalidParams(format!(
            "sample covariance trace {tr} is not positive"
        )));
    }
    let scale = if normalize { m as f64 / tr } else { 1.0 };
    let mut data = vec![0.0; 2 * m * m];
    let (re, im) = data.split_at_mut(m * m);
    for i in 0..m {
        for j in 0..m {
            let z = r.r[[i, j]] * scale;
            re[i * m + j] = z.re;
            im[i * m + j] = z.im;
        }
    }
    Ok(Planes { m, data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmExample {
    pub planes: Planes,
    pub label: u8,
}

impl ScmExample {
    pub fn from_sample(sample: &TagSymbolSample, normalize: bool) -> Result<Self> {
        Ok(Self {
            planes: to_planes(&scm(&sample.x)?, normalize)?,
            label: sample.label,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    normalize: bool,
    examples: Vec<ScmExample>,
    /// Parameters that generated the set, when known.
    pub meta: Option<SystemParams>,
}

impl Dataset {
    pub fn new(examples: Vec<ScmExample>, normalize: bool, meta: Option<SystemParams>) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::InvalidParams("dataset must not be empty".into()))?;
        let m = first.planes.m();
        if let Some(bad) = examples.iter().find(|e| e.planes.m() != m) {
            return Err(Error::dim(format!("M = {m} for every example"), bad.planes.m()));
        }
        if let Some(bad) = examples.iter().find(|e| e.label > 1) {
            return Err(Error::InvalidParams(format!("label {} is not 0 or 1", bad.label)));
        }
        Ok(Self {
            m,
            normalize,
            examples,
            meta,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn examples(&self) -> &[ScmExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Number of examples labelled 1.
    pub fn count_ones(&self) -> usize {
        self.examples.iter().filter(|e| e.label == 1).count()
    }

    const MAGIC: &'static [u8; 7] = b"AMBCDS1";

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(Self::MAGIC)?;
        out.write_all(&(self.m as u32).to_le_bytes())?;
        out.write_all(&(self.examples.len() as u64).to_le_bytes())?;
        out.write_all(&[self.normalize as u8])?;
        for ex in &self.examples {
            out.write_all(&[ex.label])?;
            for v in ex.planes.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let header = Self::MAGIC.len() + 4 + 8 + 1;
        if bytes.len() < header || &bytes[..7] != Self::MAGIC {
            return Err("missing AMBCDS1 header".into());
        }
        let m = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[11..19].try_into().unwrap()) as usize;
        let normalize = match bytes[19] {
            0 => false,
            1 => true,
            b => return Err(format!("normalize flag byte {b} is not 0 or 1")),
        };
        if m == 0 || count == 0 {
            return Err(format!("empty dataset (M = {m}, count = {count})"));
        }
        let per_example = 1 + 2 * m * m * 8;
        let expected = count
            .checked_mul(per_example)
            .and_then(|b| b.checked_add(header))
            .ok_or("example count overflows")?;
        if bytes.len() != expected {
            return Err(format!("expected {expected} bytes, found {}", bytes.len()));
        }
        let mut examples = Vec::with_capacity(count);
        for chunk in bytes[header..].chunks_exact(per_example) {
            let label = chunk[0];
            if label > 1 {
                return Err(format!("label byte {label} is not 0 or 1"));
            }
            let data = chunk[1..]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            examples.push(ScmExample {
                planes: Planes { m, data },
                label,
            });
        }
        Dataset::new(examples, normalize, None).map_err(|e| e.to_string())
    }
}

/// Source-domain set: every example draws its own channel, a fair bit and one tag symbol.
pub fn build_source_dataset(
    params: &SystemParams,
    k_s: usize,
    normalize: bool,
    seed: u64,
) -> Result<Dataset> {
    params.validate()?;
    if k_s < 2 {
        return Err(Error::InvalidParams(format!("k_s = {k_s} must be at least 2")));
    }
    let examples = (0..k_s)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::substream(seed, &[tag::SOURCE_DATASET, k as u64]);
            let chan = sysmodel::sample_channel(params, &mut rng);
            let bit = rng.random_range(0..=1u8);
            let sample = sysmodel::generate_tag_symbol(&chan, bit, params, &mut rng);
            ScmExample::from_sample(&sample, normalize)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, normalize, Some(params.clone()))
}

/// How target examples are produced from the pilots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    /// Pick a pilot uniformly and resample its N columns with replacement.
    Bootstrap,
    /// Cycle through the pilots without resampling.
    Identity,
}

/// Target-domain set built from one frame's pilots.
pub fn build_target_dataset(
    pilots: &[TagSymbolSample],
    k_t: usize,
    normalize: bool,
    augmentation: Augmentation,
    seed: u64,
) -> Result<Dataset> {
    let p = pilots.len();
    if p == 0 {
        return Err(Error::InvalidParams("no pilot symbols".into()));
    }
    if k_t < p {
        return Err(Error::InvalidParams(format!(
            "k_t = {k_t} is smaller than the {p} pilots"
        )));
    }
    let first = pilots[0].label;
    if pilots.iter().all(|s| s.label == first) {
        return Err(Error::SingleClass(first));
    }
    let (m, n) = pilots[0].x.dim();
    if let Some(bad) = pilots.iter().find(|s| s.x.dim() != (m, n)) {
        return Err(Error::dim(format!("{m}x{n} pilot"), format!("{:?}", bad.x.dim())));
    }
    let examples = (0..k_t)
        .into_par_iter()
        .map(|k| match augmentation {
            Augmentation::Identity => ScmExample::from_sample(&pilots[k % p], normalize),
            Augmentation::Bootstrap => {
                let mut rng = rng::substream(seed, &[tag::TARGET_DATASET, k as u64]);
                let src = &pilots[rng.random_range(0..p)];
                let mut x = CMatrix::zeros((m, n));
                for col in 0..n {
                    let pick = rng.random_range(0..n);
                    x.column_mut(col).assign(&src.x.column(pick));
                }
                Ok(ScmExample {
                    planes: to_planes(&scm(&x)?, normalize)?,
                    label: src.label,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, normalize, None)
}
