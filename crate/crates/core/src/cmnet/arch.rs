use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; each 3x3 convolution shrinks the map by 2.
    Valid,
    /// Zero padding that keeps the spatial size.
    Same,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "valid" => Some(Padding::Valid),
            "same" => Some(Padding::Same),
            _ => None,
        }
    }
}

/// How the dropout rates in the architecture are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutSemantics {
    /// The rate is the probability that a unit is dropped.
    DropProbability,
    /// The rate is the probability that a unit is kept.
    KeepProbability,
}

impl DropoutSemantics {
    pub fn as_str(self) -> &'static str {
        match self {
            DropoutSemantics::DropProbability => "drop",
            DropoutSemantics::KeepProbability => "keep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "drop" => Some(DropoutSemantics::DropProbability),
            "keep" => Some(DropoutSemantics::KeepProbability),
            _ => None,
        }
    }
}

/// Layer sizes of the covariance-matrix CNN:
/// conv(3x3) -> ReLU -> conv(3x3) -> ReLU -> maxpool(2x2) -> flatten ->
/// dropout -> dense -> ReLU -> dropout -> dense(2) -> softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct CmnetArch {
    pub input_dim: usize,
    pub in_channels: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub fc1_units: usize,
    pub classes: usize,
    pub dropout1: f64,
    pub dropout2: f64,
    pub dropout_semantics: DropoutSemantics,
    pub padding: Padding,
}

impl CmnetArch {
    /// Full-size network for an `m x m` covariance input with the given padding.
    pub fn new(m: usize, padding: Padding) -> Self {
        Self {
            input_dim: m,
            in_channels: 2,
            conv1_filters: 64,
            conv2_filters: 64,
            kernel: 3,
            pool: 2,
            fc1_units: 128,
            classes: 2,
            dropout1: 0.5,
            dropout2: 0.25,
            dropout_semantics: DropoutSemantics::DropProbability,
            padding,
        }
    }

    /// Valid padding when the map survives two valid convolutions and a pool
    /// (M >= 6), same padding for smaller arrays.
    pub fn for_antennas(m: usize) -> Self {
        let padding = if m >= 6 { Padding::Valid } else { Padding::Same };
        Self::new(m, padding)
    }

    fn shrink(&self) -> usize {
        match self.padding {
            Padding::Valid => self.kernel - 1,
            Padding::Same => 0,
        }
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => (self.kernel - 1) / 2,
        }
    }

    pub fn conv1_out(&self) -> usize {
        self.input_dim.saturating_sub(self.shrink())
    }

    pub fn conv2_out(&self) -> usize {
        self.conv1_out().saturating_sub(self.shrink())
    }

    pub fn pooled(&self) -> usize {
        self.conv2_out() / self.pool
    }

    /// Length of the flattened feature vector fed to the first dense layer.
    pub fn flatten_len(&self) -> usize {
        self.conv2_filters * self.pooled() * self.pooled()
    }

    /// Drop probabilities of the two dropout layers.
    pub fn drop_probs(&self) -> (f64, f64) {
        match self.dropout_semantics {
            DropoutSemantics::DropProbability => (self.dropout1, self.dropout2),
            DropoutSemantics::KeepProbability => (1.0 - self.dropout1, 1.0 - self.dropout2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.in_channels == 0 || self.conv1_filters == 0 || self.conv2_filters == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.pool == 0 || self.fc1_units == 0 {
            return bad("pool and fc1 sizes must be positive".into());
        }
        if self.classes != 2 {
            return bad(format!("{} classes; the detector is binary", self.classes));
        }
        for r in [self.dropout1, self.dropout2] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("dropout rate {r} outside [0, 1]"));
            }
        }
        let (q1, q2) = self.drop_probs();
        if q1 >= 1.0 || q2 >= 1.0 {
            return bad("dropout would remove every unit".into());
        }
        if self.flatten_len() == 0 {
            return bad(format!(
                "M = {} with {} padding leaves no features after pooling",
                self.input_dim,
                self.padding.as_str()
            ));
        }
        Ok(())
    }
}

impl fmt::Display for CmnetArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "M={} c{}x{}k{} c{}k{} pool{} fc{} {} (flatten {})",
            self.input_dim,
            self.in_channels,
            self.conv1_filters,
            self.kernel,
            self.conv2_filters,
            self.kernel,
            self.pool,
            self.fc1_units,
            self.padding.as_str(),
            self.flatten_len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_pipeline_for_sixteen_antennas() {
        let a = CmnetArch::new(16, Padding::Valid);
        assert_eq!(a.conv1_out(), 14);
        assert_eq!(a.conv2_out(), 12);
        assert_eq!(a.pooled(), 6);
        assert_eq!(a.flatten_len(), 2304);
        a.validate().unwrap();
    }

    #[test]
    fn same_padding_keeps_size() {
        let a = CmnetArch::new(16, Padding::Same);
        assert_eq!(a.conv2_out(), 16);
        assert_eq!(a.flatten_len(), 64 * 64);
        let small = CmnetArch::for_antennas(4);
        assert_eq!(small.padding, Padding::Same);
        assert_eq!(small.flatten_len(), 64 * 4);
        assert_eq!(CmnetArch::for_antennas(8).flatten_len(), 64 * 4);
    }

    #[test]
    fn degenerate_sizes_rejected() {
        assert!(CmnetArch::new(4, Padding::Valid).validate().is_err());
        assert!(CmnetArch::new(1, Padding::Same).validate().is_err());
        let mut a = CmnetArch::new(16, Padding::Valid);
        a.dropout_semantics = DropoutSemantics::KeepProbability;
        assert_eq!(a.drop_probs(), (0.5, 0.75));
        a.dropout1 = 0.0;
        assert!(a.validate().is_err());
    }
}
