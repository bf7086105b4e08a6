//! Uniform fit/predict contract over the four regression back-ends.
//!
//! The pipeline only sees [`RegressorSpec`] and [`Model`]; everything
//! back-end specific stays behind them. Prediction is a pure per-pixel map
//! (HPT's absolute normalisation additionally scans its batch first), so
//! parallel evaluation over pixel ranges cannot change results.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, GpHyper, GpModel};
use crate::hpt::{self, HptHyper, HptModel};
use crate::raster::{Raster, TrainingSet};
use crate::rf::{self, RfHyper, RfModel};
use crate::svr::{self, SvrHyper, SvrModel};

pub const HCDM_MAGIC: &[u8; 4] = b"HCDM";
pub const HCDM_VERSION: u32 = 1;

/// Method choice plus the matching hyperparameter record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodSpec {
    Gp(GpHyper),
    Svr(SvrHyper),
    Rf(RfHyper),
    Hpt(HptHyper),
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Gp(_) => "gp",
            MethodSpec::Svr(_) => "svr",
            MethodSpec::Rf(_) => "rf",
            MethodSpec::Hpt(_) => "hpt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorSpec {
    pub method: MethodSpec,
    /// Single seed feeding every stochastic stage of the fit.
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ModelKind {
    Gp(GpModel),
    Svr(SvrModel),
    Rf(RfModel),
    Hpt(HptModel),
}

/// An opaque fitted model with fixed input/output dimensions.
#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    input_dim: usize,
    output_dim: usize,
}

pub fn fit(spec: &RegressorSpec, t: &TrainingSet) -> Result<Model> {
    let kind = match &spec.method {
        MethodSpec::Gp(h) => ModelKind::Gp(gp::gp_fit(t, h, spec.seed)?),
        MethodSpec::Svr(h) => ModelKind::Svr(svr::svr_fit(t, h)?),
        MethodSpec::Rf(h) => ModelKind::Rf(rf::rf_fit(t, h, spec.seed)?),
        MethodSpec::Hpt(h) => ModelKind::Hpt(hpt::hpt_fit(t, h)?),
    };
    Ok(Model {
        kind,
        input_dim: t.input_dim(),
        output_dim: t.output_dim(),
    })
}

impl Model {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn method_name(&self) -> &'static str {
        match &self.kind {
            ModelKind::Gp(_) => "gp",
            ModelKind::Svr(_) => "svr",
            ModelKind::Rf(_) => "rf",
            ModelKind::Hpt(_) => "hpt",
        }
    }

    /// Predicts one input vector.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} channels, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        match &self.kind {
            ModelKind::Gp(m) => {
                let xs = nalgebra::DMatrix::from_row_slice(1, x.len(), x);
                let out = m.predict_mean(&xs)?;
                Ok(out.row(0).iter().cloned().collect())
            }
            ModelKind::Svr(m) => svr::svr_predict(m, x),
            ModelKind::Rf(m) => rf::rf_predict(m, x),
            ModelKind::Hpt(m) => hpt::hpt_predict(x, m),
        }
    }

    /// Predicts a row-major batch (`input_dim` values per row).
    pub fn predict_batch(&self, xs: &[f64]) -> Result<Vec<f64>> {
        if xs.len() % self.input_dim != 0 {
            return Err(Error::Dimension("ragged prediction batch".into()));
        }
        let n = xs.len() / self.input_dim;
        match &self.kind {
            ModelKind::Hpt(m) => hpt::hpt_predict_batch(xs, m),
            ModelKind::Gp(m) => {
                // chunked matrix products; chunk boundaries are fixed so the
                // result is independent of worker count
                const CHUNK: usize = 256;
                let mut out = vec![0.0; n * self.output_dim];
                out.par_chunks_mut(CHUNK * self.output_dim)
                    .enumerate()
                    .try_for_each(|(ci, chunk)| -> Result<()> {
                        let start = ci * CHUNK;
                        let rows = chunk.len() / self.output_dim;
                        let block = nalgebra::DMatrix::from_row_slice(
                            rows,
                            self.input_dim,
                            &xs[start * self.input_dim..(start + rows) * self.input_dim],
                        );
                        let pred = m.predict_mean(&block)?;
                        for r in 0..rows {
                            for q in 0..self.output_dim {
                                chunk[r * self.output_dim + q] = pred[(r, q)];
                            }
                        }
                        Ok(())
                    })?;
                Ok(out)
            }
            ModelKind::Svr(m) => {
                let mut out = vec![0.0; n * self.output_dim];
                out.par_chunks_mut(self.output_dim)
                    .enumerate()
                    .try_for_each(|(i, chunk)| -> Result<()> {
                        let pred =
                            svr::svr_predict(m, &xs[i * self.input_dim..(i + 1) * self.input_dim])?;
                        chunk.copy_from_slice(&pred);
                        Ok(())
                    })?;
                Ok(out)
            }
            ModelKind::Rf(m) => {
                let mut out = vec![0.0; n * self.output_dim];
                out.par_chunks_mut(self.output_dim)
                    .enumerate()
                    .try_for_each(|(i, chunk)| -> Result<()> {
                        let pred =
                            rf::rf_predict(m, &xs[i * self.input_dim..(i + 1) * self.input_dim])?;
                        chunk.copy_from_slice(&pred);
                        Ok(())
                    })?;
                Ok(out)
            }
        }
    }

    /// Applies the model to every pixel of a raster.
    pub fn predict_raster(&self, r: &Raster) -> Result<Raster> {
        if r.channels() != self.input_dim {
            return Err(Error::Dimension(format!(
                "raster has {} channels, model expects {}",
                r.channels(),
                self.input_dim
            )));
        }
        let xs: Vec<f64> = r.data().iter().map(|&v| v as f64).collect();
        let out = self.predict_batch(&xs)?;
        let data: Vec<f32> = out.iter().map(|&v| v as f32).collect();
        Raster::new(r.height(), r.width(), self.output_dim, data)
    }

    fn method_tag(&self) -> u8 {
        match &self.kind {
            ModelKind::Gp(_) => 1,
            ModelKind::Svr(_) => 2,
            ModelKind::Rf(_) => 3,
            ModelKind::Hpt(_) => 4,
        }
    }

    /// Serializes as HCDM: magic, u32 version, u8 method tag, u32 dims,
    /// then a bincode payload. Round-trips preserve predictions bit-exactly.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(HCDM_MAGIC)?;
        w.write_u32::<LittleEndian>(HCDM_VERSION)?;
        w.write_u8(self.method_tag())?;
        w.write_u32::<LittleEndian>(self.input_dim as u32)?;
        w.write_u32::<LittleEndian>(self.output_dim as u32)?;
        let payload = bincode::serialize(&self.kind)
            .map_err(|e| Error::Format(format!("model encode: {e}")))?;
        w.write_u64::<LittleEndian>(payload.len() as u64)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn save_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut rd: R) -> Result<Model> {
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated HCDM header".into()))?;
        if &magic != HCDM_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected HCDM")));
        }
        let version = rd
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Format("truncated HCDM header".into()))?;
        if version != HCDM_VERSION {
            return Err(Error::Format(format!("unsupported HCDM version {version}")));
        }
        let tag = rd.read_u8()?;
        let input_dim = rd.read_u32::<LittleEndian>()? as usize;
        let output_dim = rd.read_u32::<LittleEndian>()? as usize;
        let len = rd.read_u64::<LittleEndian>()? as usize;
        let mut payload = vec![0u8; len];
        rd.read_exact(&mut payload)
            .map_err(|_| Error::Format("truncated HCDM payload".into()))?;
        let kind: ModelKind = bincode::deserialize(&payload)
            .map_err(|e| Error::Format(format!("model decode: {e}")))?;
        let decoded_tag = match &kind {
            ModelKind::Gp(_) => 1,
            ModelKind::Svr(_) => 2,
            ModelKind::Rf(_) => 3,
            ModelKind::Hpt(_) => 4,
        };
        if decoded_tag != tag {
            return Err(Error::Format("HCDM method tag does not match payload".into()));
        }
        Ok(Model {
            kind,
            input_dim,
            output_dim,
        })
    }

    pub fn load_file<P: AsRef<Path>>(path: P) -> Result<Model> {
        let f = File::open(path)?;
        Model::load(BufReader::new(f))
    }
}
