use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssunmix::simulate::{
    generate_scenario_a, generate_scenario_b, sample_dirichlet, synth_albedos, AlbedoSpectrum,
};

use crate::config::{ExperimentConfig, Scenario};
use crate::dataset::{
    read_spectra_csv, Bundle, BundleA, BundleB, Dataset, Manifest, Provenance, FORMAT, FORMAT_VERSION,
    GENERATOR,
};
use crate::error::{CliError, Result};

/// Stream salt for the scenario B abundance draw.
const ABUNDANCE_STREAM: u64 = 0xab0d_a9ce;

/// SNR of `noisy` against `clean` over all frames; `None` when noiseless.
fn achieved_snr(clean: &[DMatrix<f64>], noisy: &[DMatrix<f64>]) -> Option<f64> {
    let (mut signal, mut noise) = (0.0, 0.0);
    for (c, y) in clean.iter().zip(noisy) {
        signal += c.norm_squared();
        noise += (y - c).norm_squared();
    }
    (noise > 0.0).then(|| 10.0 * (signal / noise).log10())
}

fn albedos_from_csv(cfg: &ExperimentConfig, path: &Path) -> Result<(Vec<String>, Vec<AlbedoSpectrum<f64>>)> {
    let (names, m) = read_spectra_csv(path)?;
    let b = &cfg.scenario_b;
    if m.nrows() != b.bands || m.ncols() != b.endmembers {
        return Err(CliError::Config(format!(
            "albedo_csv: {} has {} bands x {} endmembers, config expects scenario_b.bands = {} and scenario_b.endmembers = {}",
            path.display(),
            m.nrows(),
            m.ncols(),
            b.bands,
            b.endmembers
        )));
    }
    let albedos = (0..m.ncols())
        .map(|j| {
            AlbedoSpectrum::new(m.column(j).into_owned())
                .map_err(|e| CliError::Config(format!("albedo_csv: column `{}`: {e}", names[j])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((names, albedos))
}

/// Generates the dataset described by `cfg` in memory.
pub fn build(cfg: &ExperimentConfig) -> Result<Dataset> {
    let provenance = Provenance {
        config_sha256: cfg.sha256(),
        seed: cfg.seed,
        generator: GENERATOR.to_string(),
    };
    match cfg.scenario {
        Scenario::A => {
            let a = &cfg.scenario_a;
            let sc = generate_scenario_a::<f64>(a)?;
            let clean: Vec<DMatrix<f64>> = sc
                .truth
                .frames()
                .iter()
                .map(|s| s.matrix() * sc.abundances.matrix())
                .collect();
            let manifest = Manifest {
                format: FORMAT.into(),
                format_version: FORMAT_VERSION,
                scenario: Scenario::A,
                bands: a.bands,
                endmembers: a.endmembers,
                pixels: a.pixels,
                frames: a.frames,
                materials: (0..a.endmembers).map(|p| format!("em{p}")).collect(),
                timestamps: sc.images.timestamps().to_vec(),
                noise_sigma: sc.images.noise_sigma().to_vec(),
                snr_achieved_db: achieved_snr(&clean, sc.images.frames()),
                variable_endmember: Some(a.variable_endmember),
                train_frames: None,
                provenance,
                config: cfg.clone(),
                tensors: Vec::new(),
            };
            Ok(Dataset {
                manifest,
                bundle: Bundle::A(BundleA {
                    images: sc.images,
                    truth: sc.truth,
                    abundances: sc.abundances,
                    mean: sc.mean.into_inner(),
                    initial: sc.initial,
                }),
            })
        }
        Scenario::B => {
            let b = &cfg.scenario_b;
            let (materials, albedos) = match &cfg.albedo_csv {
                Some(path) => albedos_from_csv(cfg, path)?,
                None => (
                    (0..b.endmembers).map(|p| format!("material{p}")).collect(),
                    synth_albedos::<f64>(b)?,
                ),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ABUNDANCE_STREAM);
            let abundances = sample_dirichlet::<f64, _>(&mut rng, &vec![1.0; b.endmembers], b.pixels)?;
            let sc = generate_scenario_b(b, &albedos, Some(&abundances))?;
            let images = sc.images.expect("abundances were supplied");
            let clean: Vec<DMatrix<f64>> = sc
                .series
                .frames()
                .iter()
                .map(|s| s.matrix() * abundances.matrix())
                .collect();
            let cols: Vec<DVector<f64>> = albedos.iter().map(|w| w.values().clone()).collect();
            let manifest = Manifest {
                format: FORMAT.into(),
                format_version: FORMAT_VERSION,
                scenario: Scenario::B,
                bands: b.bands,
                endmembers: b.endmembers,
                pixels: b.pixels,
                frames: b.frames,
                materials,
                timestamps: sc.series.timestamps().to_vec(),
                noise_sigma: images.noise_sigma().to_vec(),
                snr_achieved_db: achieved_snr(&clean, images.frames()),
                variable_endmember: None,
                train_frames: Some(b.train_frames),
                provenance,
                config: cfg.clone(),
                tensors: Vec::new(),
            };
            Ok(Dataset {
                manifest,
                bundle: Bundle::B(BundleB {
                    series: sc.series,
                    albedos: DMatrix::from_columns(&cols),
                    incidence: sc.incidence,
                    images,
                    abundances,
                }),
            })
        }
    }
}

/// Writes the dataset to `out` and returns the summary line.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let ds = build(cfg)?;
    ds.write(out)?;
    let m = &ds.manifest;
    let snr = match m.snr_achieved_db {
        Some(s) => format!("{s:.2} dB"),
        None => "noiseless".into(),
    };
    let mut line = format!(
        "scenario {:?}: L = {}, P = {}, N = {}, T = {}, SNR achieved = {snr}",
        m.scenario, m.bands, m.endmembers, m.pixels, m.frames
    );
    if let Some(tr) = m.train_frames {
        line += &format!(" ({tr} train + {} test frames)", m.frames - tr);
    }
    Ok(line)
}
