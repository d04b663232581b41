//! Offline learning, pilot-based transfer learning and online detection
//! with the covariance-matrix network.

use std::path::Path;

use crate::cmnet::{self, CmnetArch, CmnetParams, Scores, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::features::{scm, to_planes, Dataset, Planes, Scm};
use crate::rng::{self, tag};
use crate::sysmodel::{CMatrix, TagSymbolSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Transferred,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub params: CmnetParams,
    pub stage: Stage,
    /// Whether inputs are trace-normalized before entering the network.
    pub normalize: bool,
}

impl DetectorModel {
    pub fn pretrained(params: CmnetParams, normalize: bool) -> Self {
        Self {
            params,
            stage: Stage::Pretrained,
            normalize,
        }
    }

    pub fn arch(&self) -> &CmnetArch {
        &self.params.arch
    }
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Transferred => "transferred",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrained" => Some(Stage::Pretrained),
            "transferred" => Some(Stage::Transferred),
            _ => None,
        }
    }
}

const MODEL_PREFIX: &str = "detector";

/// Model file text: one `detector stage <s> normalize <b>` line, then the
/// network in the `cmnet-model` format.
pub fn model_to_text(model: &DetectorModel) -> String {
    format!(
        "{MODEL_PREFIX} stage {} normalize {}\n{}",
        model.stage.as_str(),
        model.normalize,
        cmnet::to_text(&model.params)
    )
}

pub fn model_from_text(text: &str) -> std::result::Result<DetectorModel, String> {
    let (first, rest) = text.split_once('\n').ok_or("empty model file")?;
    let f: Vec<&str> = first.split_whitespace().collect();
    if f.len() != 5 || f[0] != MODEL_PREFIX || f[1] != "stage" || f[3] != "normalize" {
        return Err(format!("bad model header {first:?}"));
    }
    let stage = Stage::parse(f[2]).ok_or_else(|| format!("unknown stage {:?}", f[2]))?;
    let normalize = f[4]
        .parse::<bool>()
        .map_err(|_| format!("bad normalize flag {:?}", f[4]))?;
    Ok(DetectorModel {
        params: cmnet::from_text(rest)?,
        stage,
        normalize,
    })
}

pub fn save_model(model: &DetectorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DetectorModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_text(&text).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

/// Trains a fresh network on the source-domain set.
pub fn offline_learn(
    d_s: &Dataset,
    arch: &CmnetArch,
    config: &TrainConfig,
) -> Result<(DetectorModel, TrainReport)> {
    if config.freeze_conv {
        return Err(Error::InvalidParams(
            "offline learning trains every layer; freeze_conv must be off".into(),
        ));
    }
    if arch.input_dim != d_s.m() {
        return Err(Error::ArchMismatch {
            expected: format!("M = {}", d_s.m()),
            found: arch.to_string(),
        });
    }
    let init = cmnet::init_params(arch, &mut rng::substream(config.seed, &[tag::INIT]))?;
    let (params, report) = cmnet::train(&init, d_s, config)?;
    log::info!(
        "offline learning: {} examples, {} epochs, final loss {:.5}",
        d_s.len(),
        config.epochs,
        report.final_loss()
    );
    Ok((DetectorModel::pretrained(params, d_s.normalize()), report))
}

/// Fine-tunes the dense layers of a pretrained model on a target-domain set
/// while the convolution layers stay frozen.
pub fn transfer_learn(
    pretrained: &DetectorModel,
    d_t: &Dataset,
    config: &TrainConfig,
) -> Result<(DetectorModel, TrainReport)> {
    if pretrained.stage != Stage::Pretrained {
        return Err(Error::InvalidParams("transfer starts from a pretrained model".into()));
    }
    if !config.freeze_conv {
        return Err(Error::InvalidParams(
            "transfer learning requires frozen convolution layers".into(),
        ));
    }
    if d_t.normalize() != pretrained.normalize {
        return Err(Error::InvalidParams(
            "target set and model disagree on input normalization".into(),
        ));
    }
    let ones = d_t.count_ones();
    if ones == 0 || ones == d_t.len() {
        return Err(Error::SingleClass(if ones == 0 { 0 } else { 1 }));
    }
    let (params, report) = cmnet::train(&pretrained.params, d_t, config)?;
    if !params.conv_equal(&pretrained.params) {
        return Err(Error::InvalidParams(
            "convolution tensors changed during transfer".into(),
        ));
    }
    Ok((
        DetectorModel {
            params,
            stage: Stage::Transferred,
            normalize: pretrained.normalize,
        },
        report,
    ))
}

fn model_scores(model: &DetectorModel, r: &Scm) -> Result<Scores> {
    cmnet::forward_eval(&model.params, &to_planes(r, model.normalize)?)
}

/// Posterior ratio `p1 / p0`; with equal priors this is the likelihood ratio.
pub fn cmnet_lrt(model: &DetectorModel, r: &Scm) -> Result<f64> {
    let s = model_scores(model, r)?;
    Ok(s.p1 / s.p0)
}

/// Decides 1 when the ratio exceeds 1; ties decide 0.
pub fn decide_ratio(ratio: f64) -> u8 {
    (ratio > 1.0) as u8
}

pub fn detect_symbol(model: &DetectorModel, x: &CMatrix) -> Result<u8> {
    Ok(decide_ratio(cmnet_lrt(model, &scm(x)?)?))
}

/// Decisions for many symbols, evaluated in batches.
pub fn detect_batch(model: &DetectorModel, samples: &[TagSymbolSample]) -> Result<Vec<u8>> {
    const CHUNK: usize = 128;
    let planes = samples
        .iter()
        .map(|s| to_planes(&scm(&s.x)?, model.normalize))
        .collect::<Result<Vec<Planes>>>()?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in planes.chunks(CHUNK) {
        let refs: Vec<&Planes> = chunk.iter().collect();
        out.extend(
            cmnet::forward_eval_batch(&model.params, &refs)?
                .iter()
                .map(|s| decide_ratio(s.p1 / s.p0)),
        );
    }
    Ok(out)
}
