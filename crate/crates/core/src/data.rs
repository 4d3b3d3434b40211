//! Labelled variable-length frame sequences: text I/O, synthetic generation,
//! standardisation and SNR-controlled noise.
//!
//! Dataset files hold one sequence per line:
//!
//! ```text
//! <label>\t<T>\t<N>\t<T*N values, row-major, space separated>
//! ```
//!
//! Files ending in `.gz` are gzip-compressed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::model::SequenceModel;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<T> {
    pub label: String,
    /// `T x N`.
    pub frames: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset<T> {
    items: Vec<Sequence<T>>,
    dim: usize,
}

impl<T: Real> SequenceDataset<T> {
    pub fn new(items: Vec<Sequence<T>>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("dataset has no sequences".into()))?;
        let dim = first.frames.ncols();
        if dim == 0 {
            return Err(Error::Data("frame dimension must be positive".into()));
        }
        for (r, item) in items.iter().enumerate() {
            if item.frames.ncols() != dim {
                return Err(Error::Data(format!(
                    "sequence {r} has dimension {}, expected {dim}",
                    item.frames.ncols()
                )));
            }
            if item.frames.nrows() == 0 {
                return Err(Error::Data(format!("sequence {r} has no frames")));
            }
            if item.frames.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sequence {r} has a non-finite value")));
            }
            if item.label.is_empty() || item.label.contains(['\t', '\n']) {
                return Err(Error::Data(format!("sequence {r} has an invalid label")));
            }
        }
        Ok(SequenceDataset { items, dim })
    }

    pub fn items(&self) -> &[Sequence<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_frames(&self) -> usize {
        self.items.iter().map(|s| s.frames.nrows()).sum()
    }

    /// Sorted class vocabulary.
    pub fn classes(&self) -> Vec<String> {
        self.by_class().into_keys().collect()
    }

    /// Frames grouped by label, labels sorted.
    pub fn by_class(&self) -> BTreeMap<String, Vec<ArrayView2<'_, T>>> {
        let mut out: BTreeMap<String, Vec<ArrayView2<T>>> = BTreeMap::new();
        for item in &self.items {
            out.entry(item.label.clone()).or_default().push(item.frames.view());
        }
        out
    }

    pub fn views(&self) -> Vec<ArrayView2<'_, T>> {
        self.items.iter().map(|s| s.frames.view()).collect()
    }

    /// Applies `f` to every frame in place and revalidates.
    pub fn map_frames(&self, mut f: impl FnMut(&mut [T])) -> Result<Self> {
        let mut items = self.items.clone();
        for item in &mut items {
            for mut row in item.frames.rows_mut() {
                f(row.as_slice_mut().expect("standard layout"));
            }
        }
        SequenceDataset::new(items)
    }
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

pub fn load_dataset<T: Real>(path: impl AsRef<Path>) -> Result<SequenceDataset<T>> {
    parse_dataset(open_reader(path.as_ref())?)
}

/// Parses the line-delimited text format. Blank lines are ignored.
pub fn parse_dataset<T: Real, R: Read>(reader: R) -> Result<SequenceDataset<T>> {
    let reader = BufReader::new(reader);
    let mut items = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let mut fields = line.splitn(4, '\t');
        let label = fields.next().unwrap_or_default();
        let (len, width, values) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(err("expected 4 tab-separated fields".into())),
        };
        if label.is_empty() {
            return Err(err("empty class label".into()));
        }
        let len: usize = len
            .trim()
            .parse()
            .map_err(|_| err(format!("bad frame count {len:?}")))?;
        let width: usize = width
            .trim()
            .parse()
            .map_err(|_| err(format!("bad frame dimension {width:?}")))?;
        if len == 0 || width == 0 {
            return Err(err("frame count and dimension must be positive".into()));
        }
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(err(format!("frame dimension {width} differs from {d} on earlier lines")))
            }
            _ => {}
        }
        let parsed: Vec<T> = values
            .split_ascii_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| err(format!("bad value {tok:?}")))
            })
            .collect::<Result<_>>()?;
        if parsed.len() != len * width {
            return Err(err(format!(
                "expected {} values for {len}x{width} frames, found {}",
                len * width,
                parsed.len()
            )));
        }
        items.push(Sequence {
            label: label.to_string(),
            frames: Array2::from_shape_vec((len, width), parsed).expect("checked length"),
        });
    }
    if items.is_empty() {
        return Err(Error::Data("dataset file contains no sequences".into()));
    }
    SequenceDataset::new(items)
}

/// Decimal with 17 significant digits.
pub(crate) fn fmt_real<T: Real>(v: T) -> String {
    format!("{:.16e}", v.as_f64())
}

pub fn write_dataset<T: Real, W: Write>(ds: &SequenceDataset<T>, mut out: W) -> Result<()> {
    for item in &ds.items {
        let (len, width) = item.frames.dim();
        write!(out, "{}\t{len}\t{width}\t", item.label)?;
        for (i, v) in item.frames.iter().enumerate() {
            if i > 0 {
                out.write_all(b" ")?;
            }
            out.write_all(fmt_real(*v).as_bytes())?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset<T: Real>(ds: &SequenceDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        write_dataset(ds, &mut enc)?;
        enc.finish()?.flush()?;
    } else {
        let mut w = BufWriter::new(file);
        write_dataset(ds, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// Per-dimension mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer<T> {
    pub mean: Array1<T>,
    pub std: Array1<T>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl<T: Real> Standardizer<T> {
    pub fn fit(ds: &SequenceDataset<T>) -> Self {
        let n = T::from_usize(ds.total_frames()).unwrap();
        let mut mean = Array1::zeros(ds.dim);
        for item in &ds.items {
            mean += &item.frames.sum_axis(Axis(0));
        }
        mean.mapv_inplace(|v| v / n);
        let mut var = Array1::<T>::zeros(ds.dim);
        for item in &ds.items {
            for row in item.frames.rows() {
                for (d, &x) in row.iter().enumerate() {
                    var[d] += (x - mean[d]) * (x - mean[d]);
                }
            }
        }
        let floor = T::lit(STD_FLOOR);
        let std = var.mapv(|v| (v / n).sqrt().max(floor));
        Standardizer { mean, std }
    }

    fn check(&self, ds: &SequenceDataset<T>) -> Result<()> {
        if ds.dim != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer has {} dimensions, dataset {}",
                self.mean.len(),
                ds.dim
            )));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &SequenceDataset<T>) -> Result<SequenceDataset<T>> {
        self.check(ds)?;
        ds.map_frames(|row| {
            for (d, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[d]) / self.std[d];
            }
        })
    }

    pub fn invert(&self, ds: &SequenceDataset<T>) -> Result<SequenceDataset<T>> {
        self.check(ds)?;
        ds.map_frames(|row| {
            for (d, x) in row.iter_mut().enumerate() {
                *x = *x * self.std[d] + self.mean[d];
            }
        })
    }

    /// Two lines: `mean <values>` and `std <values>`.
    pub fn to_text(&self) -> String {
        let join = |a: &Array1<T>| a.iter().map(|v| fmt_real(*v)).collect::<Vec<_>>().join(" ");
        format!("mean {}\nstd {}\n", join(&self.mean), join(&self.std))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_ascii_whitespace();
            let key = match parts.next() {
                Some(k) => k,
                None => continue,
            };
            let values: Vec<T> = parts
                .map(|t| t.parse::<f64>().map(T::lit))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            match key {
                "mean" => mean = Some(Array1::from(values)),
                "std" => std = Some(Array1::from(values)),
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Ok(Standardizer { mean, std }),
            _ => Err(Error::Data("standardizer needs matching mean and std lines".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            other => Err(Error::Invalid(format!("unknown noise kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseReport {
    /// Indices of sequences left untouched because their power is zero.
    pub zero_power: Vec<usize>,
}

fn mean_power<T: Real>(frames: &Array2<T>) -> f64 {
    frames.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / frames.len() as f64
}

fn white_noise(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |_| rng.sample(StandardNormal))
}

/// White noise shaped to a `1/f` power spectrum along time, per coordinate.
fn pink_noise(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Array2<f64> {
    let white = white_noise(rng, len, dim);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Array2::zeros((len, dim));
    for d in 0..dim {
        let mut buf: Vec<Complex<f64>> = white.column(d).iter().map(|&x| Complex::new(x, 0.0)).collect();
        fwd.process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            let f = k.min(len - k);
            *c = if f == 0 { Complex::new(0.0, 0.0) } else { *c / (f as f64).sqrt() };
        }
        inv.process(&mut buf);
        for (t, c) in buf.iter().enumerate() {
            out[[t, d]] = c.re;
        }
    }
    if out.iter().all(|v| *v == 0.0) {
        // a single frame has no non-DC bins
        return white;
    }
    out
}

/// Adds noise scaled so that `10 log10(P_signal / P_noise) = snr_db` for each
/// sequence. `snr_db = +inf` returns the dataset unchanged. Each sequence uses
/// its own stream of `seed`, so the noise shape does not depend on `snr_db`.
pub fn add_noise<T: Real>(
    ds: &SequenceDataset<T>,
    kind: NoiseKind,
    snr_db: f64,
    seed: u64,
) -> Result<(SequenceDataset<T>, NoiseReport)> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Invalid(format!("invalid SNR {snr_db}")));
    }
    let mut report = NoiseReport { zero_power: Vec::new() };
    if snr_db == f64::INFINITY {
        return Ok((ds.clone(), report));
    }
    let mut items = ds.items.clone();
    for (r, item) in items.iter_mut().enumerate() {
        let signal = mean_power(&item.frames);
        if signal == 0.0 {
            log::warn!("sequence {r} has zero power; left without noise");
            report.zero_power.push(r);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let (len, dim) = item.frames.dim();
        let noise = match kind {
            NoiseKind::White => white_noise(&mut rng, len, dim),
            NoiseKind::Pink => pink_noise(&mut rng, len, dim),
        };
        let noise_power = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
        let target = signal / 10f64.powf(snr_db / 10.0);
        let gain = (target / noise_power).sqrt();
        for (x, n) in item.frames.iter_mut().zip(noise.iter()) {
            *x += T::lit(gain * n);
        }
    }
    Ok((SequenceDataset::new(items)?, report))
}

/// Measured `10 log10(P_clean / P_(noisy − clean))` of one sequence.
pub fn measured_snr_db<T: Real>(clean: &Array2<T>, noisy: &Array2<T>) -> f64 {
    let diff = noisy - clean;
    10.0 * (mean_power(clean) / mean_power(&diff)).log10()
}

/// One class of a synthetic dataset.
pub struct ClassSpec<'a, T> {
    pub label: String,
    pub model: &'a dyn SequenceModel<T>,
    pub count: usize,
    /// Sequence lengths are uniform in `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
}

/// Samples `count` sequences per class from ground-truth models.
pub fn make_synthetic<T: Real>(classes: &[ClassSpec<'_, T>], seed: u64) -> Result<SequenceDataset<T>> {
    if classes.is_empty() {
        return Err(Error::Invalid("no classes given for synthetic data".into()));
    }
    let dim = classes[0].model.dim();
    for c in classes {
        if c.count == 0 || c.min_len == 0 || c.min_len > c.max_len {
            return Err(Error::Invalid(format!("class {:?}: bad count or length range", c.label)));
        }
        if c.model.dim() != dim {
            return Err(Error::Invalid(format!("class {:?}: dimension differs", c.label)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for c in classes {
        for _ in 0..c.count {
            let len = rng.random_range(c.min_len..=c.max_len);
            let (_, frames) = c.model.sample_sequence(len, &mut rng)?;
            items.push(Sequence {
                label: c.label.clone(),
                frames,
            });
        }
    }
    SequenceDataset::new(items)
}
