//! Dataset directories: `manifest.json`, one raw little-endian `f64` file
//! per tensor (row-major), and CSV mirrors of the small arrays.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use ssunmix::model::{AbundanceMatrix, AugmentedState, EndmemberMatrix, ImageSequence, SpectralSeries};

use crate::config::{ExperimentConfig, Scenario};
use crate::error::{CliError, Result};

pub const FORMAT: &str = "ssunmix-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const GENERATOR: &str = concat!("ssunmix-cli ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub scenario: Scenario,
    pub bands: usize,
    pub endmembers: usize,
    pub pixels: usize,
    pub frames: usize,
    pub materials: Vec<String>,
    pub timestamps: Vec<f64>,
    pub noise_sigma: Vec<f64>,
    /// `None` for noiseless data.
    pub snr_achieved_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable_endmember: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_frames: Option<usize>,
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Oscillating-endmember data.
#[derive(Debug, Clone)]
pub struct BundleA {
    pub images: ImageSequence<f64>,
    pub truth: SpectralSeries<f64>,
    pub abundances: AbundanceMatrix<f64>,
    pub mean: DVector<f64>,
    pub initial: AugmentedState<f64>,
}

/// Illumination-driven data.
#[derive(Debug, Clone)]
pub struct BundleB {
    pub series: SpectralSeries<f64>,
    /// `L x P` albedos.
    pub albedos: DMatrix<f64>,
    pub incidence: Vec<f64>,
    pub images: ImageSequence<f64>,
    pub abundances: AbundanceMatrix<f64>,
}

#[derive(Debug, Clone)]
pub enum Bundle {
    A(BundleA),
    B(BundleB),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub bundle: Bundle,
}

fn stack(frames: &[DMatrix<f64>]) -> (Vec<usize>, Vec<f64>) {
    let (r, c) = frames.first().map(|f| f.shape()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(frames.len() * r * c);
    for f in frames {
        for i in 0..r {
            data.extend(f.row(i).iter());
        }
    }
    (vec![frames.len(), r, c], data)
}

fn unstack(shape: &[usize], data: &[f64]) -> Vec<DMatrix<f64>> {
    let (t, r, c) = (shape[0], shape[1], shape[2]);
    (0..t)
        .map(|k| DMatrix::from_row_slice(r, c, &data[k * r * c..(k + 1) * r * c]))
        .collect()
}

fn matrix_rows(m: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    let (mut shape, data) = stack(std::slice::from_ref(m));
    shape.remove(0);
    (shape, data)
}

pub(crate) fn write_raw(path: &Path, data: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_raw(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(CliError::format(
            path,
            format!("expected {} bytes, found {}", expected * 8, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes a CSV file with a header row.
pub(crate) fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    w.write_record(header).map_err(|e| CliError::format(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Header row and records of a CSV file.
pub(crate) fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format(path, format!("{other:?}")),
    })?;
    let header = r
        .headers()
        .map_err(|e| CliError::format(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| CliError::format(path, e))?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Band-indexed CSV of the columns of `m`.
fn write_spectra_csv(path: &Path, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut header = vec!["band".to_string()];
    header.extend(names.iter().cloned());
    write_csv(
        path,
        &header,
        (0..m.nrows()).map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(m.row(i).iter().map(|v| v.to_string()));
            row
        }),
    )
}

fn write_abundance_csv(path: &Path, names: &[String], a: &DMatrix<f64>) -> Result<()> {
    let mut header = vec!["pixel".to_string()];
    header.extend(names.iter().cloned());
    write_csv(
        path,
        &header,
        (0..a.ncols()).map(|j| {
            let mut row = vec![j.to_string()];
            row.extend(a.column(j).iter().map(|v| v.to_string()));
            row
        }),
    )
}

/// Reads a band-per-row CSV with a header of material names.
pub fn read_spectra_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let (header, rows) = read_csv(path)?;
    if header.is_empty() || rows.is_empty() {
        return Err(CliError::format(path, "no spectra"));
    }
    // A leading "band" column is optional.
    let skip = usize::from(header[0].eq_ignore_ascii_case("band"));
    let names: Vec<String> = header[skip..].to_vec();
    if names.is_empty() {
        return Err(CliError::format(path, "no spectra columns"));
    }
    let mut m = DMatrix::zeros(rows.len(), names.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(CliError::format(path, format!("row {} has {} fields", i + 1, row.len())));
        }
        for (j, cell) in row[skip..].iter().enumerate() {
            m[(i, j)] = cell
                .trim()
                .parse()
                .map_err(|_| CliError::format(path, format!("row {}: `{cell}` is not a number", i + 1)))?;
        }
    }
    Ok((names, m))
}

struct TensorWriter<'a> {
    dir: &'a Path,
    entries: Vec<TensorEntry>,
}

impl TensorWriter<'_> {
    fn put(&mut self, name: &str, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        let file = format!("{name}.f64");
        write_raw(&self.dir.join(&file), data)?;
        self.entries.push(TensorEntry {
            name: name.into(),
            file,
            shape,
        });
        Ok(())
    }
}

impl Dataset {
    /// Writes the dataset to `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let mut tw = TensorWriter {
            dir,
            entries: Vec::new(),
        };
        let names = &self.manifest.materials;
        match &self.bundle {
            Bundle::A(b) => {
                let (s, d) = stack(b.images.frames());
                tw.put("images", s, &d)?;
                let truth: Vec<DMatrix<f64>> = b.truth.frames().iter().map(|f| f.matrix().clone()).collect();
                let (s, d) = stack(&truth);
                tw.put("truth", s, &d)?;
                let (s, d) = matrix_rows(b.abundances.matrix());
                tw.put("abundances", s, &d)?;
                tw.put("mean", vec![b.mean.len()], b.mean.as_slice())?;
                tw.put("initial_position", vec![b.initial.position.len()], b.initial.position.as_slice())?;
                tw.put("initial_velocity", vec![b.initial.velocity.len()], b.initial.velocity.as_slice())?;
                write_spectra_csv(&dir.join("endmembers_frame0.csv"), names, &truth[0])?;
                write_abundance_csv(&dir.join("abundances.csv"), names, b.abundances.matrix())?;
            }
            Bundle::B(b) => {
                let series: Vec<DMatrix<f64>> = b.series.frames().iter().map(|f| f.matrix().clone()).collect();
                let (s, d) = stack(&series);
                tw.put("series", s, &d)?;
                let (s, d) = matrix_rows(&b.albedos);
                tw.put("albedos", s, &d)?;
                tw.put("incidence", vec![b.incidence.len()], &b.incidence)?;
                let (s, d) = stack(b.images.frames());
                tw.put("images", s, &d)?;
                let (s, d) = matrix_rows(b.abundances.matrix());
                tw.put("abundances", s, &d)?;
                write_spectra_csv(&dir.join("endmembers_frame0.csv"), names, &series[0])?;
                write_spectra_csv(&dir.join("albedos.csv"), names, &b.albedos)?;
                write_abundance_csv(&dir.join("abundances.csv"), names, b.abundances.matrix())?;
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.tensors = tw.entries;
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format(&mpath, e))?;
        if manifest.format != FORMAT || manifest.format_version != FORMAT_VERSION {
            return Err(CliError::format(&mpath, "not a supported dataset manifest"));
        }
        let (l, p, n, t) = (manifest.bands, manifest.endmembers, manifest.pixels, manifest.frames);
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| CliError::format(&mpath, format!("tensor `{name}` not listed")))?;
            if entry.shape != shape {
                return Err(CliError::format(
                    &mpath,
                    format!("tensor `{name}` has shape {:?}, expected {shape:?}", entry.shape),
                ));
            }
            read_raw(&dir.join(&entry.file), shape.iter().product())
        };
        let numeric = |e: ssunmix::Error| CliError::format(&mpath, e);
        let ts = manifest.timestamps.clone();
        let endmember_series = |frames: Vec<DMatrix<f64>>| -> Result<SpectralSeries<f64>> {
            let frames = frames
                .into_iter()
                .map(EndmemberMatrix::new)
                .collect::<ssunmix::Result<Vec<_>>>()
                .map_err(numeric)?;
            SpectralSeries::new(frames, ts.clone()).map_err(numeric)
        };
        let images = ImageSequence::new(
            unstack(&[t, l, n], &get("images", &[t, l, n])?),
            manifest.noise_sigma.clone(),
            ts.clone(),
        )
        .map_err(numeric)?;
        let abundances =
            AbundanceMatrix::new(DMatrix::from_row_slice(p, n, &get("abundances", &[p, n])?)).map_err(numeric)?;
        let bundle = match manifest.scenario {
            Scenario::A => {
                let truth = endmember_series(unstack(&[t, l, p], &get("truth", &[t, l, p])?))?;
                let initial = AugmentedState::new(
                    DVector::from_vec(get("initial_position", &[l])?),
                    DVector::from_vec(get("initial_velocity", &[l])?),
                )
                .map_err(numeric)?;
                Bundle::A(BundleA {
                    images,
                    truth,
                    abundances,
                    mean: DVector::from_vec(get("mean", &[l])?),
                    initial,
                })
            }
            Scenario::B => Bundle::B(BundleB {
                series: endmember_series(unstack(&[t, l, p], &get("series", &[t, l, p])?))?,
                albedos: DMatrix::from_row_slice(l, p, &get("albedos", &[l, p])?),
                incidence: get("incidence", &[t])?,
                images,
                abundances,
            }),
        };
        Ok(Self { manifest, bundle })
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST)
    }
}
