//! Image container, normalization, training-pair extraction and file I/O.
//!
//! All stages exchange [`Raster`]s: row-major, channel-interleaved grids of
//! finite `f32` values. Training data for the regressors is carried by
//! [`TrainingSet`], whose rows are pixel pairs drawn from unchanged areas.
//! The on-disk container is the HCDR format described at [`write_raster`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::util::rng_for;

pub const HCDR_MAGIC: &[u8; 4] = b"HCDR";
pub const HCDR_VERSION: u32 = 1;

/// H×W×C image of finite reals, row-major and channel-interleaved:
/// `data[(row * width + col) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Empty("raster dimensions must be nonzero".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "raster data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite raster value {v}")));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Raster::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channel values of the pixel at (row, col).
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Channel values of the i-th pixel in row-major order.
    pub fn pixel_at(&self, index: usize) -> &[f32] {
        let base = index * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Boolean per-pixel annotation; `true` means selected (training region)
/// or changed (ground truth), depending on context.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask length {} != {}x{}",
                values.len(),
                height,
                width
            )));
        }
        Ok(Mask {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.values[row * self.width + col] = v;
    }

    pub fn count_true(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    /// Converts to a single-channel raster with values in {0.0, 1.0}, the
    /// representation masks use inside HCDR files.
    pub fn to_raster(&self) -> Raster {
        let data = self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Reads a mask back from its raster representation. Values must be
    /// exactly 0.0 or 1.0.
    pub fn from_raster(r: &Raster) -> Result<Mask> {
        if r.channels != 1 {
            return Err(Error::Format(format!(
                "mask raster must have 1 channel, got {}",
                r.channels
            )));
        }
        let mut values = Vec::with_capacity(r.data.len());
        for &v in &r.data {
            if v == 0.0 {
                values.push(false);
            } else if v == 1.0 {
                values.push(true);
            } else {
                return Err(Error::Format(format!("mask value {v} not in {{0,1}}")));
            }
        }
        Ok(Mask {
            height: r.height,
            width: r.width,
            values,
        })
    }
}

/// M paired training vectors (x_m, y_m) with their source pixel locations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    input_dim: usize,
    output_dim: usize,
    pixel_indices: Vec<(u32, u32)>,
}

impl TrainingSet {
    pub fn new(
        inputs: Vec<f64>,
        targets: Vec<f64>,
        input_dim: usize,
        output_dim: usize,
        pixel_indices: Vec<(u32, u32)>,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Empty("training dimensions must be nonzero".into()));
        }
        if inputs.len() % input_dim != 0 || targets.len() % output_dim != 0 {
            return Err(Error::Dimension("ragged training matrix".into()));
        }
        let m = inputs.len() / input_dim;
        if m == 0 {
            return Err(Error::Empty("training set has no rows".into()));
        }
        if targets.len() / output_dim != m || pixel_indices.len() != m {
            return Err(Error::Dimension(format!(
                "training set row counts disagree: inputs {}, targets {}, indices {}",
                m,
                targets.len() / output_dim,
                pixel_indices.len()
            )));
        }
        Ok(TrainingSet {
            inputs,
            targets,
            input_dim,
            output_dim,
            pixel_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.pixel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_indices.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input_row(&self, m: usize) -> &[f64] {
        &self.inputs[m * self.input_dim..(m + 1) * self.input_dim]
    }

    pub fn target_row(&self, m: usize) -> &[f64] {
        &self.targets[m * self.output_dim..(m + 1) * self.output_dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn pixel_indices(&self) -> &[(u32, u32)] {
        &self.pixel_indices
    }

    /// Swaps inputs and targets, for training the reverse regression.
    pub fn reversed(&self) -> TrainingSet {
        TrainingSet {
            inputs: self.targets.clone(),
            targets: self.inputs.clone(),
            input_dim: self.output_dim,
            output_dim: self.input_dim,
            pixel_indices: self.pixel_indices.clone(),
        }
    }
}

/// Min-max scales each channel independently to [0,1]. Constant channels
/// map to 0. Exactly idempotent: a second application is the identity.
pub fn normalize_channels(r: &Raster) -> Raster {
    let c = r.channels;
    let mut lo = vec![f32::INFINITY; c];
    let mut hi = vec![f32::NEG_INFINITY; c];
    for px in r.data.chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            lo[ch] = lo[ch].min(v);
            hi[ch] = hi[ch].max(v);
        }
    }
    let mut data = Vec::with_capacity(r.data.len());
    for px in r.data.chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            let range = hi[ch] - lo[ch];
            data.push(if range > 0.0 { (v - lo[ch]) / range } else { 0.0 });
        }
    }
    Raster {
        height: r.height,
        width: r.width,
        channels: c,
        data,
    }
}

/// One training row per true mask pixel, inputs from `x` and targets from
/// `y`, in row-major scan order.
pub fn extract_pairs(x: &Raster, y: &Raster, train_mask: &Mask) -> Result<TrainingSet> {
    if x.height != y.height || x.width != y.width {
        return Err(Error::Dimension(format!(
            "rasters {}x{} vs {}x{} are not co-registered",
            x.height, x.width, y.height, y.width
        )));
    }
    if train_mask.height != x.height || train_mask.width != x.width {
        return Err(Error::Dimension("mask does not match raster shape".into()));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut pixel_indices = Vec::new();
    for row in 0..x.height {
        for col in 0..x.width {
            if train_mask.get(row, col) {
                inputs.extend(x.pixel(row, col).iter().map(|&v| v as f64));
                targets.extend(y.pixel(row, col).iter().map(|&v| v as f64));
                pixel_indices.push((row as u32, col as u32));
            }
        }
    }
    if pixel_indices.is_empty() {
        return Err(Error::Empty("training mask selects no pixels".into()));
    }
    TrainingSet::new(inputs, targets, x.channels, y.channels, pixel_indices)
}

/// Draws ⌈fraction·M⌉ rows uniformly without replacement. Deterministic for
/// a fixed seed.
pub fn subsample(t: &TrainingSet, fraction: f64, seed: u64) -> Result<TrainingSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "subsample fraction {fraction} not in (0,1]"
        )));
    }
    let m = t.len();
    let keep = ((fraction * m as f64).ceil() as usize).clamp(1, m);
    let mut rng = rng_for(seed, 0);
    let chosen = rand::seq::index::sample(&mut rng, m, keep);
    let mut inputs = Vec::with_capacity(keep * t.input_dim);
    let mut targets = Vec::with_capacity(keep * t.output_dim);
    let mut pixel_indices = Vec::with_capacity(keep);
    for i in chosen.iter() {
        inputs.extend_from_slice(t.input_row(i));
        targets.extend_from_slice(t.target_row(i));
        pixel_indices.push(t.pixel_indices[i]);
    }
    TrainingSet::new(inputs, targets, t.input_dim, t.output_dim, pixel_indices)
}

/// Selects ⌈fraction·N⌉ of the true pixels of `mask` uniformly without
/// replacement; used to draw a fresh training mask per benchmark run.
pub fn subsample_mask(mask: &Mask, fraction: f64, seed: u64) -> Result<Mask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "subsample fraction {fraction} not in (0,1]"
        )));
    }
    let true_idx: Vec<usize> = mask
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| v.then_some(i))
        .collect();
    if true_idx.is_empty() {
        return Err(Error::Empty("mask selects no pixels".into()));
    }
    let keep = ((fraction * true_idx.len() as f64).ceil() as usize).clamp(1, true_idx.len());
    let mut rng = rng_for(seed, 0);
    let chosen = rand::seq::index::sample(&mut rng, true_idx.len(), keep);
    let mut values = vec![false; mask.values.len()];
    for i in chosen.iter() {
        values[true_idx[i]] = true;
    }
    Mask::new(mask.height, mask.width, values)
}

/// Writes the HCDR container: magic `HCDR`, little-endian u32 version(=1),
/// u32 height, u32 width, u32 channels, then height·width·channels
/// little-endian f32 values, row-major, channel-interleaved.
pub fn write_raster<W: std::io::Write>(r: &Raster, mut w: W) -> Result<()> {
    w.write_all(HCDR_MAGIC)?;
    w.write_u32::<LittleEndian>(HCDR_VERSION)?;
    w.write_u32::<LittleEndian>(r.height as u32)?;
    w.write_u32::<LittleEndian>(r.width as u32)?;
    w.write_u32::<LittleEndian>(r.channels as u32)?;
    for &v in &r.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn write_raster_file<P: AsRef<Path>>(r: &Raster, path: P) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write_raster(r, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_raster<R: std::io::Read>(mut rd: R) -> Result<Raster> {
    let mut magic = [0u8; 4];
    rd.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated HCDR header".into()))?;
    if &magic != HCDR_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected HCDR")));
    }
    let version = rd
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated HCDR header".into()))?;
    if version != HCDR_VERSION {
        return Err(Error::Format(format!("unsupported HCDR version {version}")));
    }
    let height = read_header_u32(&mut rd)? as usize;
    let width = read_header_u32(&mut rd)? as usize;
    let channels = read_header_u32(&mut rd)? as usize;
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("HCDR dimensions overflow".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = rd
            .read_f32::<LittleEndian>()
            .map_err(|_| Error::Format("truncated HCDR payload".into()))?;
        data.push(v);
    }
    // trailing bytes are also a malformed file
    let mut extra = [0u8; 1];
    if rd.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after HCDR payload".into()));
    }
    Raster::new(height, width, channels, data)
}

fn read_header_u32<R: std::io::Read>(rd: &mut R) -> Result<u32> {
    rd.read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("truncated HCDR header".into()))
}

pub fn read_raster_file<P: AsRef<Path>>(path: P) -> Result<Raster> {
    let f = File::open(path)?;
    read_raster(BufReader::new(f))
}

/// 8-bit binary PGM (P5) preview of a single-channel raster; values are
/// linearly scaled from [0,1] and clamped.
pub fn write_pgm<W: std::io::Write>(r: &Raster, mut w: W) -> Result<()> {
    if r.channels != 1 {
        return Err(Error::Dimension(format!(
            "PGM export needs 1 channel, got {}",
            r.channels
        )));
    }
    write!(w, "P5\n{} {}\n255\n", r.width, r.height)?;
    let bytes: Vec<u8> = r
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm_file<P: AsRef<Path>>(r: &Raster, path: P) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write_pgm(r, &mut w)?;
    w.flush()?;
    Ok(())
}
