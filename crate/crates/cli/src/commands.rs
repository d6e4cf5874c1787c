use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use plin_core::dataset::{load_color, load_depth, load_flow, read_manifest, save_depth, save_flow, write_dataset};
use plin_core::flow::midpoint_flows;
use plin_core::nn::model::color_tensor;
use plin_core::nn::train::write_trace_csv;
use plin_core::nn::{CascadeConfig, Checkpoint, TrainConfig, Trainer, TrainingSample};
use plin_core::pseudo_lidar::{back_project, read_intrinsics, write_ply};
use plin_core::synth::{make_sample, SynthConfig};
use plin_core::warp::assemble_motion_input;
use plin_core::{evaluate, CameraIntrinsics, DepthKind, DepthMap, MetricReport, WarpedPair};
use rayon::prelude::*;

use crate::error::{CliError, Result};
use crate::{InterpolateArgs, TrainArgs};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    read_intrinsics(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--gamma must lie in [0, 1], got {gamma}")))
    }
}

pub fn flow_mid(forward: &Path, backward: &Path, out: &Path) -> Result<()> {
    let (to_prev, to_next) = midpoint_flows(&load_flow(forward)?, &load_flow(backward)?).map_err(CliError::data)?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    save_flow(&out.join("flow_to_prev.flo"), &to_prev)?;
    save_flow(&out.join("flow_to_next.flo"), &to_next)?;
    Ok(())
}

pub fn interpolate(a: &InterpolateArgs) -> Result<()> {
    check_gamma(a.gamma)?;
    let checkpoint = match (&a.checkpoint, a.classical) {
        (_, true) => None,
        (Some(path), false) => Some(path),
        (None, false) => return Err(CliError::Usage("pass --classical or --checkpoint".into())),
    };
    if checkpoint.is_some() && a.color.is_none() {
        return Err(CliError::Usage("the network needs --color".into()));
    }
    let intrinsics = match (&a.intrinsics, a.ply) {
        (Some(path), true) => Some(load_intrinsics(path)?),
        (None, true) => return Err(CliError::Usage("--ply needs --intrinsics".into())),
        (_, false) => None,
    };

    let d_prev = load_depth(&a.d_prev)?.with_kind(DepthKind::Sparse);
    let d_next = load_depth(&a.d_next)?.with_kind(DepthKind::Sparse);
    let (flow_a, flow_b) = (load_flow(&a.flow_a)?, load_flow(&a.flow_b)?);
    let (to_prev, to_next) = if a.intermediate {
        (flow_a, flow_b)
    } else {
        midpoint_flows(&flow_a, &flow_b).map_err(CliError::data)?
    };
    let warped = WarpedPair::compute(&d_prev, &d_next, &to_prev, &to_next, a.gamma).map_err(CliError::data)?;

    let depth = match (checkpoint, &a.color) {
        (Some(path), Some(color)) => {
            let checkpoint = Checkpoint::load(path)?;
            let color = color_tensor::<f32>(&load_color(color)?);
            let stack = assemble_motion_input::<f32>(&d_prev, &d_next, &to_prev, &to_next, &warped).map_err(CliError::data)?;
            let (_, refined) = checkpoint
                .cascade
                .predict(&checkpoint.params, &stack, &color)
                .map_err(CliError::data)?;
            if refined.data().iter().any(|v| !v.is_finite()) {
                return Err(CliError::Numerical("network produced a non-finite depth".into()));
            }
            DepthMap::from_prediction(&refined)
        }
        _ => warped.fused,
    };
    save_depth(&a.out, &depth)?;
    if let Some(k) = intrinsics {
        write_bytes(&a.out.with_extension("ply"), &write_ply(&back_project(&depth, &k)))?;
    }
    Ok(())
}

pub fn convert(depth: &Path, intrinsics: &Path, out: &Path) -> Result<()> {
    let k = load_intrinsics(intrinsics)?;
    let depth = load_depth(depth)?;
    write_bytes(out, &write_ply(&back_project(&depth, &k)))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    check_gamma(a.gamma)?;
    if a.checkpoint.is_some() && (a.config.is_some() || a.residual) {
        return Err(CliError::Usage("a resumed checkpoint keeps its network; drop --config and --residual".into()));
    }
    let files = read_manifest(&a.manifest)?;
    let samples = files
        .par_iter()
        .map(|f| Ok(f.load()?.training_sample(a.gamma)?))
        .collect::<Result<Vec<TrainingSample>>>()?;
    let config = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        flip: !a.no_flip,
        ..TrainConfig::default()
    };
    let mut trainer = match &a.checkpoint {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, config)?,
        None => {
            let mut model = match &a.config {
                Some(path) => toml::from_str::<CascadeConfig>(&read_text(path)?)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
                None => CascadeConfig::default(),
            };
            model.refine.residual |= a.residual;
            Trainer::new(&model, config)?
        }
    };
    trainer.fit(&samples)?;
    trainer.checkpoint().save(&a.out)?;
    let trace_path = a.trace.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut trace = Vec::new();
    write_trace_csv(&mut trace, trainer.trace()).map_err(CliError::data)?;
    write_bytes(&trace_path, &trace)?;
    if let Some(last) = trainer.trace().last() {
        eprintln!("{} steps, final total loss {:.6}", last.step, last.total);
    }
    Ok(())
}

/// PNG files under `dir`, as sorted paths relative to it.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.extension().is_some_and(|e| e == "png") {
                out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    out.sort();
    Ok(out)
}

fn evaluate_files(pred: &Path, gt: &Path) -> Result<MetricReport> {
    evaluate(&load_depth(pred)?, &load_depth(gt)?).map_err(|e| CliError::Data(format!("{}: {e}", pred.display())))
}

pub fn eval(pred: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let rows: Vec<(String, MetricReport)> = match (pred.is_dir(), gt.is_dir()) {
        (false, false) => vec![(pred.display().to_string(), evaluate_files(pred, gt)?)],
        (true, true) => {
            let files = png_files(pred)?;
            if files.is_empty() {
                return Err(CliError::Data(format!("{}: no PNG files", pred.display())));
            }
            let mut rows = files
                .par_iter()
                .map(|rel| Ok((rel.display().to_string(), evaluate_files(&pred.join(rel), &gt.join(rel))?)))
                .collect::<Result<Vec<_>>>()?;
            let reports: Vec<MetricReport> = rows.iter().map(|r| r.1).collect();
            rows.push(("mean".into(), MetricReport::mean(&reports).map_err(CliError::data)?));
            rows
        }
        _ => return Err(CliError::Usage("pred and gt must both be files or both be directories".into())),
    };
    let mut csv = format!("sample,{}\n", MetricReport::CSV_HEADER);
    for (name, report) in &rows {
        csv.push_str(&format!("{name},{}\n", report.csv_line()));
    }
    match out {
        Some(path) => write_bytes(path, csv.as_bytes())?,
        None => std::io::stdout().write_all(csv.as_bytes()).map_err(CliError::data)?,
    }
    if rows.iter().any(|(_, r)| !r.is_finite()) {
        return Err(CliError::Numerical("non-finite metric".into()));
    }
    Ok(())
}

pub fn synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut config = SynthConfig::from_toml(&read_text(config)?).map_err(|e| CliError::Data(format!("{}: {e}", config.display())))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let specs = config.scenes().map_err(CliError::data)?;
    let camera = specs.first().map_or_else(|| config.random.camera(), |s| s.camera);
    if specs.iter().any(|s| s.camera != camera) {
        return Err(CliError::Data("all scenes of a dataset must share one camera".into()));
    }
    let samples = specs
        .par_iter()
        .map(|s| make_sample(s).map(|(sample, _, _)| sample))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(CliError::data)?;
    let manifest = write_dataset(out, &samples, &camera.intrinsics().map_err(CliError::data)?)?;
    eprintln!("{} samples, manifest {}", samples.len(), manifest.display());
    Ok(())
}
