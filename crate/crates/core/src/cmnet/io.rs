//! Text model files.
//!
//! ```text
//! cmnet-model 1
//! input_dim 16
//! ...
//! padding valid
//! tensor conv1.weight 64 2 3 3
//! <row-major values, 17 significant digits>
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::arch::{CmnetArch, DropoutSemantics, Padding};
use super::params::{CmnetParams, TENSOR_NAMES};
use crate::error::{Error, Result};

const HEADER: &str = "cmnet-model 1";
const PER_LINE: usize = 6;

pub fn to_text(params: &CmnetParams) -> String {
    let a = &params.arch;
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    for (key, value) in [
        ("input_dim", a.input_dim),
        ("in_channels", a.in_channels),
        ("conv1_filters", a.conv1_filters),
        ("conv2_filters", a.conv2_filters),
        ("kernel", a.kernel),
        ("pool", a.pool),
        ("fc1_units", a.fc1_units),
        ("classes", a.classes),
    ] {
        let _ = writeln!(out, "{key} {value}");
    }
    let _ = writeln!(out, "dropout1 {:.16e}", a.dropout1);
    let _ = writeln!(out, "dropout2 {:.16e}", a.dropout2);
    let _ = writeln!(out, "dropout_semantics {}", a.dropout_semantics.as_str());
    let _ = writeln!(out, "padding {}", a.padding.as_str());
    for ((name, shape), values) in TENSOR_NAMES.iter().zip(params.shapes()).zip(params.tensors()) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
        for line in values.chunks(PER_LINE) {
            let cells: Vec<String> = line.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
    }
    out.push_str("end\n");
    out
}

struct Tokens<'a> {
    inner: std::str::SplitWhitespace<'a>,
}

type ParseResult<T> = std::result::Result<T, String>;

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> ParseResult<&'a str> {
        self.inner
            .next()
            .ok_or_else(|| format!("unexpected end of file reading {what}"))
    }

    fn field(&mut self, key: &str) -> ParseResult<&'a str> {
        let found = self.next(key)?;
        if found != key {
            return Err(format!("expected field {key}, found {found}"));
        }
        self.next(key)
    }

    fn int(&mut self, key: &str) -> ParseResult<usize> {
        self.field(key)?.parse().map_err(|e| format!("{key}: {e}"))
    }

    fn float(&mut self, key: &str) -> ParseResult<f64> {
        self.field(key)?.parse().map_err(|e| format!("{key}: {e}"))
    }
}

pub fn from_text(text: &str) -> ParseResult<CmnetParams> {
    let mut t = Tokens {
        inner: text.split_whitespace(),
    };
    if t.next("header")? != "cmnet-model" {
        return Err("missing cmnet-model header".into());
    }
    let version = t.next("version")?;
    if version != "1" {
        return Err(format!("unsupported model version {version}"));
    }
    let arch = CmnetArch {
        input_dim: t.int("input_dim")?,
        in_channels: t.int("in_channels")?,
        conv1_filters: t.int("conv1_filters")?,
        conv2_filters: t.int("conv2_filters")?,
        kernel: t.int("kernel")?,
        pool: t.int("pool")?,
        fc1_units: t.int("fc1_units")?,
        classes: t.int("classes")?,
        dropout1: t.float("dropout1")?,
        dropout2: t.float("dropout2")?,
        dropout_semantics: {
            let s = t.field("dropout_semantics")?;
            DropoutSemantics::parse(s).ok_or_else(|| format!("unknown dropout semantics {s}"))?
        },
        padding: {
            let s = t.field("padding")?;
            Padding::parse(s).ok_or_else(|| format!("unknown padding {s}"))?
        },
    };
    let mut params = CmnetParams::zeros(&arch).map_err(|e| e.to_string())?;
    let shapes = params.shapes();
    for ((name, shape), dst) in TENSOR_NAMES.iter().zip(shapes).zip(params.tensors_mut()) {
        if t.next("tensor")? != "tensor" {
            return Err(format!("expected tensor {name}"));
        }
        let found = t.next("tensor name")?;
        if found != *name {
            return Err(format!("expected tensor {name}, found {found}"));
        }
        for &d in &shape {
            let got: usize = t
                .next("tensor shape")?
                .parse()
                .map_err(|e| format!("{name} shape: {e}"))?;
            if got != d {
                return Err(format!("{name} has shape dimension {got}, architecture implies {d}"));
            }
        }
        for v in dst.iter_mut() {
            *v = t.next(name)?.parse().map_err(|e| format!("{name} value: {e}"))?;
        }
    }
    if t.next("end marker")? != "end" {
        return Err("trailing data after last tensor".into());
    }
    if t.inner.next().is_some() {
        return Err("trailing data after end marker".into());
    }
    Ok(params)
}

pub fn save_params(params: &CmnetParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_text(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<CmnetParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

/// Loads a model and checks it was built for `expected`.
pub fn load_params_for(path: impl AsRef<Path>, expected: &CmnetArch) -> Result<CmnetParams> {
    let params = load_params(path)?;
    params.check_arch(expected)?;
    Ok(params)
}
