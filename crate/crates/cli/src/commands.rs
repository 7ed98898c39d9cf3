use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use tpp_core::baselines::{fit_hawkes, mean_loglik, HawkesFit, KernelKind};
use tpp_core::data::{load_dataset, save_dataset, Dataset, EventSequence};
use tpp_core::eval::{
    compute_metrics, intensity_error, latent_svd, rescaling_gof, rescaling_gof_model, IntensityModel,
};
use tpp_core::hawkes::{generate_dataset, uniform_grid, HawkesSpec};
use tpp_core::model::{ModelConfig, Variant, Vntpp};
use tpp_core::objective::{train, TrainState};
use tpp_core::predict::{predict_sequences, predict_sequences_hawkes, PositionPrediction};

use crate::config::{AnalyzeConfig, AnalyzeMode, EvalConfig, GenerateConfig, Method, RunConfig, TimeNorm};
use crate::error::{CliError, Result};
use crate::output::Output;

const SUMMARY: &str = "summary.json";

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

pub fn generate(cfg: GenerateConfig, out: &mut Output) -> Result<()> {
    let spec = HawkesSpec::load(cfg.spec_path())?;
    if let Some(w) = spec.validate()? {
        log::warn!("{w}");
    }
    let horizon = cfg.horizon.or(spec.horizon).ok_or_else(|| {
        CliError::Usage("no horizon: pass --horizon or set it in the spec".into())
    })?;
    let name = cfg.name.clone().unwrap_or_else(|| {
        cfg.spec_path()
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let data = generate_dataset(&spec, cfg.n_sequences, horizon, cfg.seed, &name)?;
    let file = format!("{name}.jsonl");
    save_dataset(&out.path(&file), &data)?;
    out.record(&file);
    out.write_json("resolved_config.json", &cfg)?;
    print_json(&json!({
        "path": out.path(&file),
        "sequences": data.len(),
        "events": data.num_events(),
        "mean_length": data.mean_length(),
    }));
    Ok(())
}

/// What training leaves beside the checkpoint for later commands.
#[derive(Debug, Serialize, serde::Deserialize)]
struct RunSummary {
    method: Method,
    num_types: usize,
    mean_gap: f64,
    train_sequences: usize,
    best_epoch: Option<usize>,
    best_val: Option<f64>,
    train_loglik: Option<f64>,
    val_loglik: Option<f64>,
}

pub fn train_cmd(cfg: RunConfig, out: &mut Output) -> Result<()> {
    let train_set = load_dataset(cfg.train_path(), cfg.num_types)?;
    let k = cfg.num_types.unwrap_or(train_set.num_types);
    let val_set = match &cfg.val_data {
        Some(p) => Some(load_dataset(p, Some(k))?),
        None => None,
    };
    if val_set.as_ref().is_some_and(|v| v.num_types > k) {
        return Err(CliError::Input("validation data has more types than the training data".into()));
    }
    let mean_gap = train_set.mean_gap();
    out.write_json("resolved_config.json", &cfg)?;

    let summary = match cfg.method {
        Method::Linear | Method::Exponential => {
            let variant = if cfg.method == Method::Linear {
                Variant::Linear
            } else {
                Variant::Exponential
            };
            let mcfg = ModelConfig {
                variant,
                latent_dim: cfg.latent_dim,
                encoder: cfg.encoder.clone(),
                gap_likelihood: cfg.gap_likelihood,
                seed: cfg.seed,
            };
            let mut model = Vntpp::new(mcfg, k);
            let resume: Option<TrainState> = match &cfg.resume {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
                    Some(serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?)
                }
                None => None,
            };
            let log_path = out.path("train_log.jsonl");
            let mut log_file = OpenOptions::new()
                .create(true)
                .append(cfg.resume.is_some())
                .write(true)
                .truncate(cfg.resume.is_none())
                .open(&log_path)
                .map_err(CliError::io(&log_path))?;
            out.record("train_log.jsonl");
            let mut write_err: Option<CliError> = None;
            let outcome = train(
                &mut model,
                &train_set,
                val_set.as_ref(),
                &cfg.train,
                resume,
                |log, state| {
                    if write_err.is_some() {
                        return;
                    }
                    let line = serde_json::to_string(log).expect("serializable");
                    if let Err(e) = writeln!(log_file, "{line}") {
                        write_err = Some(CliError::io(&log_path)(e));
                        return;
                    }
                    if let Err(e) = out.write_json("train_state.json", state) {
                        write_err = Some(e);
                    }
                },
            )?;
            if let Some(e) = write_err {
                return Err(e);
            }
            let model_path = out.path("model.json");
            model.save(&model_path).map_err(CliError::io(&model_path))?;
            out.record("model.json");
            let last = outcome.state.history.last();
            print_json(&json!({
                "model": model_path,
                "epochs": outcome.state.epochs_done,
                "final_train_loss": last.map(|l| l.train.total),
                "best_val_loss": outcome.state.best_val,
                "best_epoch": outcome.state.best_epoch,
            }));
            RunSummary {
                method: cfg.method,
                num_types: k,
                mean_gap,
                train_sequences: train_set.len(),
                best_epoch: outcome.state.best_epoch,
                best_val: outcome.state.best_val,
                train_loglik: None,
                val_loglik: None,
            }
        }
        Method::HpEk | Method::HpGk => {
            let kind = if cfg.method == Method::HpEk {
                KernelKind::Exponential
            } else {
                KernelKind::Gaussian
            };
            let mut data = train_set.clone();
            data.num_types = k;
            let fit = fit_hawkes(&data, kind, &cfg.baseline)?;
            let path = out.path("hawkes_fit.json");
            fit.save(&path).map_err(CliError::io(&path))?;
            out.record("hawkes_fit.json");
            let val_ll = val_set.as_ref().map(|v| mean_loglik(&fit.spec, v));
            print_json(&json!({
                "fit": path,
                "train_loglik": fit.fit_meta.train_loglik,
                "val_loglik": val_ll,
                "converged": fit.fit_meta.converged,
            }));
            RunSummary {
                method: cfg.method,
                num_types: k,
                mean_gap,
                train_sequences: train_set.len(),
                best_epoch: None,
                best_val: None,
                train_loglik: Some(fit.fit_meta.train_loglik),
                val_loglik: val_ll,
            }
        }
    };
    out.write_json(SUMMARY, &summary)?;
    Ok(())
}

enum Checkpoint {
    Neural(Vntpp),
    Hawkes(HawkesFit),
}

impl Checkpoint {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if value.get("fit_meta").is_some() {
            let fit: HawkesFit = serde_json::from_value(value)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            fit.spec.validate()?;
            Ok(Checkpoint::Hawkes(fit))
        } else {
            Ok(Checkpoint::Neural(Vntpp::load(path).map_err(CliError::Input)?))
        }
    }

    fn num_types(&self) -> usize {
        match self {
            Checkpoint::Neural(m) => m.num_types(),
            Checkpoint::Hawkes(f) => f.spec.num_types,
        }
    }

    fn intensity_model(&self) -> &dyn IntensityModel {
        match self {
            Checkpoint::Neural(m) => m,
            Checkpoint::Hawkes(f) => &f.spec,
        }
    }
}

/// Loads a checkpoint and a dataset that must use its type vocabulary.
fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let k = ckpt.num_types();
    let data = load_dataset(data, Some(k)).map_err(|e| {
        CliError::Input(format!("dataset does not match the checkpoint's {k} event types: {e}"))
    })?;
    Ok((ckpt, data))
}

fn load_truth(path: Option<&Path>, k: usize) -> Result<Option<HawkesSpec>> {
    let Some(p) = path else { return Ok(None) };
    let spec = HawkesSpec::load(p)?;
    if spec.num_types != k {
        return Err(CliError::Input(format!(
            "truth spec has {} types, checkpoint has {k}",
            spec.num_types
        )));
    }
    Ok(Some(spec))
}

fn resolve_mean_gap(cfg: &EvalConfig, checkpoint: &Path, data: &Dataset) -> Result<f64> {
    if let Some(g) = cfg.mean_gap {
        return Ok(g);
    }
    let summary = checkpoint.with_file_name(SUMMARY);
    if summary.exists() {
        let text = std::fs::read_to_string(&summary).map_err(CliError::io(&summary))?;
        let s: RunSummary = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{}: {e}", summary.display())))?;
        return Ok(s.mean_gap);
    }
    log::warn!("no training summary beside the checkpoint; using the evaluated data's mean gap");
    Ok(data.mean_gap())
}

fn predictions(cfg: &EvalConfig, ckpt: &Checkpoint, seqs: &[&EventSequence], gap: f64) -> Result<Vec<PositionPrediction>> {
    Ok(match ckpt {
        Checkpoint::Neural(m) => predict_sequences(m, seqs, gap, cfg.n_points, cfg.scheme)?,
        Checkpoint::Hawkes(f) => predict_sequences_hawkes(&f.spec, seqs, gap, cfg.n_points, cfg.scheme),
    })
}

pub fn evaluate(cfg: EvalConfig, out: &mut Output) -> Result<()> {
    let ckpt_path = cfg.checkpoint.clone().expect("checked in resolve");
    let (ckpt, data) = load_pair(&ckpt_path, cfg.data.as_deref().expect("checked in resolve"))?;
    let k = ckpt.num_types();
    let truth = load_truth(cfg.truth_spec.as_deref(), k)?;
    let gap = resolve_mean_gap(&cfg, &ckpt_path, &data)?;
    let seqs: Vec<&EventSequence> = data.sequences.iter().collect();
    let preds = predictions(&cfg, &ckpt, &seqs, gap)?;
    let mut report = compute_metrics(&preds, k, cfg.f1_average)?;
    if cfg.time_norm == TimeNorm::MeanGap {
        report = report.with_time_scale(gap);
    }
    if let Some(spec) = &truth {
        let (r, m) = intensity_error(ckpt.intensity_model(), Some(spec), &seqs, cfg.resolution)?;
        report.intensity_rmse = Some(r);
        report.intensity_mae = Some(m);
    }
    let low = preds.iter().filter(|p| p.pdf_mass < tpp_core::predict::LOW_MASS).count();
    if low > 0 {
        log::warn!("{low} of {} predictions captured less than {} of the time density", preds.len(), tpp_core::predict::LOW_MASS);
    }
    out.write_json("metrics.json", &report)?;
    let mut resolved = cfg.clone();
    resolved.mean_gap = Some(gap);
    out.write_json("resolved_config.json", &resolved)?;
    print_json(&report);
    Ok(())
}

pub fn predict(cfg: EvalConfig, out: &mut Output) -> Result<()> {
    let ckpt_path = cfg.checkpoint.clone().expect("checked in resolve");
    let (ckpt, data) = load_pair(&ckpt_path, cfg.data.as_deref().expect("checked in resolve"))?;
    let gap = resolve_mean_gap(&cfg, &ckpt_path, &data)?;
    let seqs: Vec<&EventSequence> = data.sequences.iter().collect();
    let preds = predictions(&cfg, &ckpt, &seqs, gap)?;
    let mut buf = Vec::new();
    for p in &preds {
        serde_json::to_writer(&mut buf, p).expect("serializable");
        buf.push(b'\n');
    }
    let path = out.write("predictions.jsonl", &buf)?;
    let mut resolved = cfg.clone();
    resolved.mean_gap = Some(gap);
    out.write_json("resolved_config.json", &resolved)?;
    print_json(&json!({ "path": path, "predictions": preds.len() }));
    Ok(())
}

pub fn analyze(cfg: AnalyzeConfig, out: &mut Output) -> Result<()> {
    let (ckpt, data) = load_pair(
        cfg.checkpoint.as_deref().expect("checked in resolve"),
        cfg.data.as_deref().expect("checked in resolve"),
    )?;
    let k = ckpt.num_types();
    let seqs: Vec<&EventSequence> = data.sequences.iter().collect();
    match cfg.mode {
        AnalyzeMode::Svd => {
            let Checkpoint::Neural(model) = &ckpt else {
                return Err(CliError::Usage("svd needs a variational model checkpoint".into()));
            };
            let mut latents = model.latent_means(&seqs)?;
            latents.truncate(cfg.max_points);
            let rep = latent_svd(&latents)?;
            out.write("projections.csv", rep.to_csv().as_bytes())?;
            let summary = json!({
                "singular_values": rep.singular_values,
                "energy_top3": rep.energy_fraction(3),
                "n_points": latents.len(),
            });
            out.write_json("svd.json", &summary)?;
            print_json(&summary);
        }
        AnalyzeMode::Trace => {
            let seq = seqs.get(cfg.seq_index).ok_or_else(|| {
                CliError::Usage(format!("--seq-index {} out of range ({} sequences)", cfg.seq_index, seqs.len()))
            })?;
            let truth = load_truth(cfg.truth_spec.as_deref(), k)?;
            let grid = uniform_grid(0.0, seq.horizon(), cfg.resolution);
            let learned = ckpt.intensity_model().trace(seq, &grid)?;
            let true_vals = match &truth {
                Some(spec) => Some(spec.trace(seq, &grid)?),
                None => None,
            };
            let mut csv = String::from("t");
            for i in 0..k {
                csv.push_str(&format!(",lambda_hat_{i}"));
            }
            if true_vals.is_some() {
                for i in 0..k {
                    csv.push_str(&format!(",lambda_true_{i}"));
                }
            }
            csv.push('\n');
            for (j, t) in grid.iter().enumerate() {
                csv.push_str(&t.to_string());
                let rows = std::iter::once(&learned[j]).chain(true_vals.as_ref().map(|v| &v[j]));
                for v in rows.flatten() {
                    csv.push(',');
                    csv.push_str(&v.to_string());
                }
                csv.push('\n');
            }
            let path = out.write("trace.csv", csv.as_bytes())?;
            print_json(&json!({ "path": path, "points": grid.len() }));
        }
        AnalyzeMode::Gof => {
            let rep = match &ckpt {
                Checkpoint::Neural(m) => rescaling_gof_model(m, &seqs, cfg.gof_points)?,
                Checkpoint::Hawkes(f) => rescaling_gof(&f.spec, &seqs)?,
            };
            out.write_json("gof.json", &rep)?;
            print_json(&rep);
        }
    }
    out.write_json("resolved_config.json", &cfg)?;
    Ok(())
}
