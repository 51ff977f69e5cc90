//! Command implementations behind the `orthonet` binary: train, eval,
//! probe, and corrupt-eval, all driven by a run-config file plus optional
//! `--section.key=value` overrides (last wins). The `ORTHONET_OUT`
//! environment variable overrides the configured output directory.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use orthonet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use orthonet::config::RunConfig;
use orthonet::data::{corrupt_dataset, CorruptionKind, DatasetHandle, Split};
use orthonet::net::{build_network, NetworkSpec, ParamSet};
use orthonet::probe::{
    forward_point, induced_linear_map, isometry_ratio_stats, layer_spectra, local_region_radius,
    IsometryStats,
};
use orthonet::rng::Stream;
use orthonet::train::{evaluate, initial_loss, make_record, run_epochs, Trainer};

pub const OUT_DIR_ENV: &str = "ORTHONET_OUT";

/// Splits raw args into clap-bound args and `section.key=value` overrides
/// (accepting both `--train.epochs=30` and `--set train.epochs=30`).
pub fn split_overrides(args: impl Iterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    let mut take_next = false;
    for arg in args {
        if take_next {
            overrides.push(arg);
            take_next = false;
            continue;
        }
        if arg == "--set" {
            take_next = true;
            continue;
        }
        match arg.strip_prefix("--") {
            Some(body)
                if body.contains('=')
                    && body.split_once('=').unwrap().0.contains('.') =>
            {
                overrides.push(body.to_string());
            }
            _ => plain.push(arg),
        }
    }
    (plain, overrides)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = RunConfig::parse_with_overrides(&text, overrides)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn load_net_from_checkpoint(path: &Path) -> Result<(NetworkSpec, ParamSet)> {
    let ckpt = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((ckpt.net, ckpt.params))
}

/// `train`: runs (or resumes) a training run, writing `metrics.jsonl`,
/// per-epoch `ckpt_latest.onet`, final `ckpt_final.onet`, and
/// `summary.json` under the output directory. `stop_after` truncates the
/// run at that epoch (the schedule still follows the configured epoch
/// count), leaving checkpoints a later `--resume` continues from.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let out = &config.output_dir;
    fs::create_dir_all(out)?;

    let train_data = config
        .load_dataset(Split::Train)
        .context("loading train split")?;
    let test_data = config.load_dataset(Split::Test).ok();

    let steps_per_epoch = (train_data.len() / config.train.batch_size).max(1);
    let mut train_cfg = config.train.clone();
    train_cfg.ortho = config.ortho_mode(steps_per_epoch);

    let (mut trainer, fresh) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            (ckpt.into_trainer(train_cfg)?, false)
        }
        None => {
            let (net, params) = build_network(
                config.model.input,
                &config.model.layers,
                config.norm_variant,
                config.train.seed,
            )?;
            (Trainer::new(net, params, train_cfg)?, true)
        }
    };

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    if fresh {
        let init = initial_loss(&trainer, &train_data)?;
        let rec = make_record(&trainer, &train_data, test_data.as_ref(), init, 0.0)?;
        writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
    }

    let latest = out.join("ckpt_latest.onet");
    let records = run_epochs(
        &mut trainer,
        &train_data,
        test_data.as_ref(),
        stop_after,
        |rec| {
            let line = serde_json::to_string(rec).expect("metrics serialize");
            let _ = writeln!(metrics, "{line}");
            let test = rec
                .test_error
                .map(|e| format!("{e:.2}%"))
                .unwrap_or_else(|| "-".into());
            println!(
                "epoch {:>3}  step {:>6}  loss {:.4}  train {:.2}%  test {}",
                rec.epoch, rec.step, rec.train_loss, rec.train_error, test
            );
        },
        |t| {
            save_checkpoint(&latest, &Checkpoint::from_trainer(t))
                .map_err(|e| orthonet::train::TrainError::Config(e.to_string()))
        },
    )?;

    save_checkpoint(out.join("ckpt_final.onet").as_path(), &Checkpoint::from_trainer(&trainer))?;

    let (pmax, pmin) = records
        .last()
        .map(|r| (r.prod_sigma_max, r.prod_sigma_min))
        .unwrap_or((None, None));
    let summary = json!({
        "epochs": trainer.epoch,
        "steps": trainer.step,
        "final_train_error": records.last().map(|r| r.train_error),
        "final_test_error": records.last().and_then(|r| r.test_error),
        "prod_sigma_max": pmax,
        "prod_sigma_min": pmin,
        "max_tangency_residual": trainer.max_tangency_residual,
        "max_bbn_residual": trainer.max_bbn_residual,
        "config": config.to_text(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

/// `eval`: error rate of a checkpoint on the configured test split.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<f64> {
    let (net, params) = load_net_from_checkpoint(checkpoint)?;
    let data = config
        .load_dataset(Split::Test)
        .context("loading test split")?;
    let error = evaluate(&net, &params, &data)?;
    println!("{error:.4}");
    write_json(
        &config.output_dir.join("eval.json"),
        &json!({
            "checkpoint": checkpoint.display().to_string(),
            "dataset": data.name,
            "examples": data.len(),
            "error_percent": error,
        }),
    )?;
    Ok(error)
}

#[derive(Serialize)]
struct ProbeOutput {
    spectra: Option<orthonet::probe::SpectralReport>,
    induced: Option<InducedSummary>,
    radius: Option<RadiusSummary>,
    isometry: Option<IsometrySummary>,
}

#[derive(Serialize)]
struct InducedSummary {
    anchors: usize,
    max_reproduction_error: f64,
}

#[derive(Serialize)]
struct RadiusSummary {
    anchors: usize,
    min_radius: f64,
    mean_radius: f64,
}

#[derive(Serialize)]
struct IsometrySummary {
    same_class: IsometryStats,
    cross_class: IsometryStats,
    gaussian: IsometryStats,
}

/// `probe`: spectral/isometry reports for a checkpoint, written to
/// `probe.json` (plus `spectra.csv` when requested).
pub fn cmd_probe(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (net, params) = load_net_from_checkpoint(checkpoint)?;
    let data = config
        .load_dataset(Split::Test)
        .context("loading test split for probe anchors")?;

    let spectra = config.probe.spectra.then(|| layer_spectra(&net, &params));

    let induced = if config.probe.induced_anchors > 0 {
        let n = config.probe.induced_anchors.min(data.len());
        let mut max_err = 0.0f64;
        for i in 0..n {
            let x = data.inputs.row(i);
            let map = induced_linear_map(&net, &params, x)?;
            let (logits, _) = forward_point(&net, &params, x)?;
            for (a, b) in logits.iter().zip(&map.apply(x)) {
                max_err = max_err.max((a - b).abs());
            }
        }
        Some(InducedSummary {
            anchors: n,
            max_reproduction_error: max_err,
        })
    } else {
        None
    };

    let radius = if config.probe.radius_anchors > 0 {
        let n = config.probe.radius_anchors.min(data.len());
        let mut min = f64::INFINITY;
        let mut sum = 0.0;
        for i in 0..n {
            let r = local_region_radius(&net, &params, data.inputs.row(i))?;
            min = min.min(r);
            sum += r;
        }
        Some(RadiusSummary {
            anchors: n,
            min_radius: if min.is_finite() { min } else { 0.0 },
            mean_radius: sum / n as f64,
        })
    } else {
        None
    };

    let isometry = if config.probe.isometry_pairs > 0 {
        Some(isometry_summary(
            &net,
            &params,
            &data,
            config.probe.isometry_pairs,
            config.probe.seed,
        )?)
    } else {
        None
    };

    let out = ProbeOutput {
        spectra,
        induced,
        radius,
        isometry,
    };
    write_json(&config.output_dir.join("probe.json"), &out)?;

    if config.probe.csv {
        if let Some(report) = &out.spectra {
            let mut csv = String::from("layer_index,kind,sigma_index,sigma,effective\n");
            for layer in &report.layers {
                for (i, s) in layer.spectrum.iter().enumerate() {
                    csv.push_str(&format!("{},{},{},{},raw\n", layer.layer_index, layer.kind, i, s));
                }
                if let Some(eff) = &layer.effective_spectrum {
                    for (i, s) in eff.iter().enumerate() {
                        csv.push_str(&format!(
                            "{},{},{},{},effective\n",
                            layer.layer_index, layer.kind, i, s
                        ));
                    }
                }
            }
            fs::write(config.output_dir.join("spectra.csv"), csv)?;
        }
    }

    if let Some(report) = &out.spectra {
        println!(
            "prod_sigma_max = {:.6}  prod_sigma_min = {:.6}",
            report.prod_sigma_max, report.prod_sigma_min
        );
    }
    Ok(())
}

/// Same-class, cross-class, and Gaussian-perturbation pair statistics,
/// reported separately (expansion and contraction play different roles).
fn isometry_summary(
    net: &NetworkSpec,
    params: &ParamSet,
    data: &DatasetHandle,
    pairs: usize,
    seed: u64,
) -> Result<IsometrySummary> {
    let mut stream = Stream::new(seed);
    let n = data.len();
    if n < 2 {
        bail!("need at least 2 examples for isometry pairs");
    }
    let mut same = Vec::new();
    let mut cross = Vec::new();
    let mut gauss = Vec::new();
    let mut guard = 0;
    while (same.len() < pairs || cross.len() < pairs) && guard < 200 * pairs {
        guard += 1;
        let i = stream.bounded(n as u64) as usize;
        let j = stream.bounded(n as u64) as usize;
        if i == j {
            continue;
        }
        let pair = (data.inputs.row(i).to_vec(), data.inputs.row(j).to_vec());
        if data.labels[i] == data.labels[j] {
            if same.len() < pairs {
                same.push(pair);
            }
        } else if cross.len() < pairs {
            cross.push(pair);
        }
    }
    for _ in 0..pairs {
        let i = stream.bounded(n as u64) as usize;
        let x = data.inputs.row(i).to_vec();
        let y: Vec<f64> = x.iter().map(|v| v + 0.05 * stream.normal_f64()).collect();
        gauss.push((x, y));
    }
    Ok(IsometrySummary {
        same_class: isometry_ratio_stats(net, params, &same)?,
        cross_class: isometry_ratio_stats(net, params, &cross)?,
        gaussian: isometry_ratio_stats(net, params, &gauss)?,
    })
}

#[derive(Serialize)]
struct CorruptRow {
    kind: String,
    severities: [f64; 5],
}

/// `corrupt-eval`: clean error plus the 4-kinds x 5-severities error table
/// on the corrupted test split, written to `corrupt_eval.json`.
pub fn cmd_corrupt_eval(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    let (net, params) = load_net_from_checkpoint(checkpoint)?;
    let data = config
        .load_dataset(Split::Test)
        .context("loading test split")?;
    let clean = evaluate(&net, &params, &data)?;
    println!("clean: {clean:.2}%");

    let mut table = Vec::new();
    for kind in CorruptionKind::ALL {
        let mut severities = [0.0; 5];
        for (i, s) in (1..=5).enumerate() {
            let corrupted = corrupt_dataset(&data, kind, s, config.data.seed)?;
            severities[i] = evaluate(&net, &params, &corrupted)?;
        }
        println!(
            "{:<16} {:>6.2}% {:>6.2}% {:>6.2}% {:>6.2}% {:>6.2}%",
            kind.name(),
            severities[0],
            severities[1],
            severities[2],
            severities[3],
            severities[4]
        );
        table.push(CorruptRow {
            kind: kind.name().to_string(),
            severities,
        });
    }

    write_json(
        &config.output_dir.join("corrupt_eval.json"),
        &json!({
            "clean_error_percent": clean,
            "severities": [1, 2, 3, 4, 5],
            "table": table,
        }),
    )?;
    Ok(())
}
