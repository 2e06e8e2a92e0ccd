use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ssunmix::learndyn::{
    predict_test, series_frames, train, write_checkpoint, Architecture, LearnedDynamics, Network,
};
use ssunmix::model::vector_rmse;
use ssunmix::unmix::{angle_cost, hungarian, vca};

use crate::config::ExperimentConfig;
use crate::dataset::{create_dir, write_csv, write_json, Bundle, Dataset};
use crate::error::{CliError, Result};

const BASELINE_STREAM: u64 = 0xba5e_11e0;
/// Test step (0-based) whose predicted spectra are exported.
pub const SPECTRA_STEP: usize = 4;

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct ArchitectureSummary {
    pub status: Status,
    pub num_params: usize,
    pub epochs_run: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Mean over test steps, per material.
    pub mean_rmse: Vec<f64>,
    /// Mean over test steps and materials.
    pub mean_test_rmse: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct LearnSummary {
    pub command: &'static str,
    pub dataset_config_sha256: String,
    pub materials: Vec<String>,
    pub train_frames: usize,
    pub test_frames: usize,
    pub frame_interval: f64,
    pub h: f64,
    pub architectures: BTreeMap<&'static str, ArchitectureSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vca_mean_rmse: Option<Vec<f64>>,
}

impl LearnSummary {
    pub fn mean_test_rmse(&self, arch: Architecture) -> Option<f64> {
        self.architectures.get(arch.name()).and_then(|a| a.mean_test_rmse)
    }
}

/// `rmse[p][k]`: RMSE of material `p` at test step `k`.
fn per_material_rmse(pred: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<Vec<Vec<f64>>> {
    let p = truth[0].ncols();
    (0..p)
        .map(|j| {
            pred.iter()
                .zip(truth)
                .map(|(a, b)| vector_rmse(&a.column(j).into_owned(), &b.column(j).into_owned()))
                .collect::<ssunmix::Result<Vec<_>>>()
                .map_err(CliError::from)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run(ds: &Dataset, cfg: &ExperimentConfig, out: &Path) -> Result<(LearnSummary, String)> {
    let Bundle::B(b) = &ds.bundle else {
        return Err(CliError::Config(
            "learn needs a scenario B dataset (pure-pixel series)".into(),
        ));
    };
    let m = &ds.manifest;
    let n_train = m
        .train_frames
        .ok_or_else(|| CliError::format(crate::dataset::MANIFEST, "missing train_frames"))?;
    let frames = series_frames(&b.series);
    let (train_set, test_set) = frames.split_at(n_train);
    let ts = &m.timestamps;
    let frame_interval = ts[1] - ts[0];
    let net_cfg = cfg.network.resolve(frame_interval);

    create_dir(out)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let mut preds: HashMap<Architecture, Vec<DMatrix<f64>>> = HashMap::new();
    let mut rmse: HashMap<Architecture, Vec<Vec<f64>>> = HashMap::new();
    let mut archs = BTreeMap::new();
    let mut warnings = Vec::new();
    for arch in Architecture::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = Network::<f64>::new(arch, m.bands, &net_cfg, &mut rng)?;
        let num_params = net.num_params();
        let report = match train(&mut net, train_set, &cfg.train) {
            Ok(r) => r,
            Err(ssunmix::Error::Diverged { epoch }) => {
                warnings.push(format!("warning: {} diverged at epoch {epoch}", arch.name()));
                archs.insert(
                    arch.name(),
                    ArchitectureSummary {
                        status: Status::Diverged { epoch },
                        num_params,
                        epochs_run: epoch,
                        initial_loss: None,
                        final_loss: None,
                        mean_rmse: Vec::new(),
                        mean_test_rmse: None,
                    },
                );
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let pred = predict_test(&net, train_set, test_set.len())?;
        let r = per_material_rmse(&pred, test_set)?;
        let path = ckpt_dir.join(format!("{}.ckpt", arch.name()));
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        write_checkpoint(&net, BufWriter::new(file))?;
        write_csv(
            &out.join(format!("loss_{}.csv", arch.name())),
            &["epoch".into(), "loss".into()],
            report
                .loss_history
                .iter()
                .enumerate()
                .map(|(k, l)| vec![k.to_string(), l.to_string()]),
        )?;
        let per_mat: Vec<f64> = r.iter().map(|v| mean(v)).collect();
        archs.insert(
            arch.name(),
            ArchitectureSummary {
                status: Status::Ok,
                num_params,
                epochs_run: report.loss_history.len(),
                initial_loss: report.loss_history.first().copied(),
                final_loss: report.final_loss(),
                mean_test_rmse: Some(mean(&per_mat)),
                mean_rmse: per_mat,
            },
        );
        preds.insert(arch, pred);
        rmse.insert(arch, r);
    }

    let vca_rmse = if cfg.learn.vca_baseline {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BASELINE_STREAM);
        let mut est = Vec::with_capacity(test_set.len());
        for (k, truth) in test_set.iter().enumerate() {
            let e = vca(b.images.frame(n_train + k), m.endmembers, &mut rng)?.endmembers;
            let perm = hungarian(&angle_cost(truth, e.matrix()));
            est.push(e.permuted(&perm).into_inner());
        }
        Some(per_material_rmse(&est, test_set)?)
    } else {
        None
    };

    let mut header: Vec<String> = vec!["step".into()];
    header.extend(Architecture::ALL.iter().map(|a| a.name().to_string()));
    if vca_rmse.is_some() {
        header.push("vca".into());
    }
    for p in 0..m.endmembers {
        write_csv(
            &out.join(format!("rmse_em{p}.csv")),
            &header,
            (0..test_set.len()).map(|k| {
                let mut row = vec![(k + 1).to_string()];
                for arch in Architecture::ALL {
                    row.push(cell(rmse.get(&arch).map(|r| r[p][k])));
                }
                if let Some(v) = &vca_rmse {
                    row.push(v[p][k].to_string());
                }
                row
            }),
        )?;
    }

    if test_set.len() > SPECTRA_STEP {
        let mut header = vec!["band".to_string()];
        for name in &m.materials {
            header.push(format!("{name}_truth"));
            for arch in Architecture::ALL {
                header.push(format!("{name}_{}", arch.name()));
            }
        }
        let truth = &test_set[SPECTRA_STEP];
        write_csv(
            &out.join(format!("spectra_frame{}.csv", n_train + SPECTRA_STEP)),
            &header,
            (0..m.bands).map(|i| {
                let mut row = vec![i.to_string()];
                for p in 0..m.endmembers {
                    row.push(truth[(i, p)].to_string());
                    for arch in Architecture::ALL {
                        row.push(cell(preds.get(&arch).map(|x| x[SPECTRA_STEP][(i, p)])));
                    }
                }
                row
            }),
        )?;
    }

    let summary = LearnSummary {
        command: "learn",
        dataset_config_sha256: m.provenance.config_sha256.clone(),
        materials: m.materials.clone(),
        train_frames: n_train,
        test_frames: test_set.len(),
        frame_interval,
        h: net_cfg.h,
        architectures: archs,
        vca_mean_rmse: vca_rmse.map(|r| r.iter().map(|v| mean(v)).collect()),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("config.json"), cfg)?;

    let mut lines = warnings;
    for arch in Architecture::ALL {
        if let Some(r) = summary.mean_test_rmse(arch) {
            lines.push(format!("{:>5}: mean test RMSE {r:.6e}", arch.name()));
        }
    }
    if let Some(v) = &summary.vca_mean_rmse {
        lines.push(format!("  vca: mean test RMSE {:.6e}", mean(v)));
    }
    Ok((summary, lines.join("\n")))
}
