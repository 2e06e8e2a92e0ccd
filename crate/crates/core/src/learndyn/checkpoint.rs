//! Checkpoint files: a magic line, a one-line JSON header, then the
//! parameters as little-endian `f64`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::integrators::{EulerNet, Rk4Net};
use super::lstm::LstmNet;
use super::mlp::MlpBlock;
use super::{Architecture, LearnedDynamics, Network};
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

pub const MAGIC: &str = "SSUNMIX-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub architecture: Architecture,
    pub bands: usize,
    pub layer_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lstm_dense: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lstm_units: Option<usize>,
    pub layout: Vec<ParamEntry>,
    pub num_params: usize,
}

impl Header {
    pub fn new(
        architecture: Architecture,
        bands: usize,
        layer_sizes: Vec<usize>,
        layout: Vec<(String, usize, usize)>,
    ) -> Self {
        let layout: Vec<ParamEntry> = layout
            .into_iter()
            .map(|(name, rows, cols)| ParamEntry { name, rows, cols })
            .collect();
        let num_params = layout.iter().map(|e| e.rows * e.cols).sum();
        Self {
            format_version: FORMAT_VERSION,
            architecture,
            bands,
            layer_sizes,
            h: None,
            alpha: None,
            beta: None,
            lstm_dense: None,
            lstm_units: None,
            layout,
            num_params,
        }
    }

    pub fn with_integrator(mut self, h: f64, alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        self.h = Some(h);
        self.alpha = Some(alpha);
        self.beta = Some(beta);
        self
    }

    pub fn with_lstm(mut self, dense: usize, units: usize) -> Self {
        self.lstm_dense = Some(dense);
        self.lstm_units = Some(units);
        self
    }
}

pub fn write_checkpoint<T: Real, N: LearnedDynamics<T> + ?Sized, W: Write>(net: &N, mut out: W) -> Result<()> {
    let header = net.header();
    let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{json}")?;
    for p in net.params() {
        out.write_all(&to_f64(p).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Real, R: BufRead>(mut input: R) -> Result<Network<T>> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint("missing checkpoint magic line".into()));
    }
    line.clear();
    input.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != header.num_params * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.num_params * 8,
            bytes.len()
        )));
    }
    let params: Vec<T> = bytes
        .chunks_exact(8)
        .map(|c| lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let mut net = match header.architecture {
        Architecture::Lstm => {
            let (dense, units) = header
                .lstm_dense
                .zip(header.lstm_units)
                .ok_or_else(|| Error::Checkpoint("LSTM header lacks sizes".into()))?;
            Network::Lstm(LstmNet::zeros(header.bands, dense, units)?)
        }
        arch => {
            let block = MlpBlock::zeros(&header.layer_sizes)?;
            let h = lit(header.h.ok_or_else(|| Error::Checkpoint("integrator header lacks h".into()))?);
            if arch == Architecture::Euler {
                Network::Euler(EulerNet::new(block, h)?)
            } else {
                Network::Rk4(Rk4Net::new(block, h)?)
            }
        }
    };
    if net.header() != header {
        return Err(Error::Checkpoint("header does not describe a supported network".into()));
    }
    net.set_params(&params)?;
    Ok(net)
}
