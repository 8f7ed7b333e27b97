use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use ropelab::basis::{extrapolation_study, interpolation_study};
use ropelab::bounds::{b_curve as compute_b_curve, verify_bounds as run_bound_sweep};
use ropelab::output::{write_json, write_text, SCHEMA_VERSION};
use ropelab::toy::{
    load_checkpoint, measure_effective_window, passkey_corpus, passkey_stream, save_checkpoint,
    sliding_window_perplexity, train_with, ToyModel, TrainingParams, TrainingReport, Vocabulary,
};

use crate::config::{
    BCurveConfig, EvalPasskeyConfig, EvalPplConfig, ExtendConfig, FigExtrapolationConfig,
    TrainConfig, VerifyBoundsConfig,
};
use crate::error::CliError;

const PRETRAINED: &str = "pretrained.ckpt";
const LOG_EVERY: usize = 100;

/// Envelope of every JSON artifact.
#[derive(Serialize)]
struct Artifact<'a, C: Serialize, R: Serialize> {
    schema_version: u32,
    command: &'a str,
    seed: Option<u64>,
    config: &'a C,
    results: R,
}

fn artifact<'a, C: Serialize, R: Serialize>(
    command: &'a str,
    seed: Option<u64>,
    config: &'a C,
    results: R,
) -> Artifact<'a, C, R> {
    Artifact {
        schema_version: SCHEMA_VERSION,
        command,
        seed,
        config,
        results,
    }
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// Seeds for the data streams, kept apart from the model-init seed.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(stream)
}

pub fn fig_extrapolation(cfg: &FigExtrapolationConfig, out: &Path) -> Result<(), CliError> {
    prepare_out_dir(out)?;
    let study = extrapolation_study(&cfg.study())?;
    let interp = interpolation_study(
        &study.curve.coefficients,
        cfg.interp_start,
        cfg.interp_end,
        cfg.interp_step,
    )?;

    let mut fit = String::from("s,target,fitted\n");
    for (s, target) in study.samples.iter().enumerate() {
        fit.push_str(&format!("{s},{target},{}\n", study.curve.values[s]));
    }
    let files = ["extrapolation_fit.csv", "extrapolation_full.csv", "interpolation.csv"];
    write_text(&out.join(files[0]), &fit)?;
    write_text(&out.join(files[1]), &study.curve.to_csv())?;
    write_text(&out.join(files[2]), &interp.to_csv())?;
    let s = &study.summary;
    log::info!(
        "max |a| in range {:.4}, out of range {:.4} (ratio {:.1})",
        s.max_abs_in_range,
        s.max_abs_out_of_range,
        s.blow_up_ratio()
    );
    let results = json!({
        "summary": s,
        "blow_up_ratio": s.blow_up_ratio(),
        "in_range_is_tame": s.in_range_is_tame(),
        "files": files,
    });
    write_json(
        &out.join("extrapolation_summary.json"),
        &artifact("fig-extrapolation", Some(cfg.seed), cfg, results),
    )?;
    Ok(())
}

pub fn b_curve(cfg: &BCurveConfig, out: &Path) -> Result<(), CliError> {
    prepare_out_dir(out)?;
    let curve = compute_b_curve(cfg.d, cfg.c, cfg.s_end)?;
    let summary = curve.summary();
    write_text(&out.join("b_curve.csv"), &curve.to_csv())?;
    log::info!("min B(s)/d = {:.6} at s = {}", summary.min_b_over_d, summary.argmin_s);
    write_json(
        &out.join("b_curve_summary.json"),
        &artifact("b-curve", None, cfg, json!({ "summary": summary, "files": ["b_curve.csv"] })),
    )?;
    Ok(())
}

pub fn verify_bounds(cfg: &VerifyBoundsConfig, out: &Path) -> Result<(), CliError> {
    prepare_out_dir(out)?;
    let report = run_bound_sweep(cfg)?;
    write_json(
        &out.join("verify_bounds.json"),
        &artifact("verify-bounds", Some(cfg.seed), cfg, &report),
    )?;
    log::info!(
        "{} trials, max violation {:.3e}, min bound ratio {:.2}",
        report.trials,
        report.max_violation,
        report.ratio.min_ratio
    );
    if report.passed() {
        return Ok(());
    }
    let worst = serde_json::to_string_pretty(&report.worst_case_inputs).unwrap_or_default();
    eprintln!("worst case:\n{worst}");
    Err(CliError::Violation(format!(
        "{} interval(s) exceed the bound, worst by {:.3e}",
        report.violations, report.max_violation
    )))
}

fn progress(label: &'static str, total: usize) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if (step + 1) % LOG_EVERY == 0 || step + 1 == total {
            log::info!("{label} step {}/{total} loss {loss:.4}", step + 1);
        }
    }
}

fn run_training(
    model: &mut ToyModel,
    doc_len: usize,
    copy_fraction: f64,
    copy_warmup_steps: usize,
    seed: u64,
    steps: usize,
    params: &TrainingParams,
    label: &'static str,
) -> Result<TrainingReport, CliError> {
    let vocab = Vocabulary::new(model.config().vocab_size)?;
    let mut corpus = passkey_corpus(&vocab, doc_len, copy_fraction, seed)?
        .with_copy_warmup(copy_warmup_steps * params.batch_size);
    Ok(train_with(model, &mut corpus, steps, params, progress(label, steps))?)
}

fn checkpoint_path(configured: &mut Option<PathBuf>, out: &Path) -> PathBuf {
    configured.get_or_insert_with(|| out.join(PRETRAINED)).clone()
}

pub fn train(cfg: &TrainConfig, out: &Path) -> Result<(), CliError> {
    let mut model = ToyModel::build(cfg.model_config())?;
    let vocab = Vocabulary::new(cfg.vocab_size)?;
    prepare_out_dir(out)?;
    let held_out = passkey_stream(&vocab, cfg.window, 8, stream_seed(cfg.seed, 2))?;
    let stride = cfg.window / 2;
    let before = sliding_window_perplexity(&model, &held_out, cfg.window, stride)?;
    let report = run_training(
        &mut model,
        cfg.window,
        cfg.copy_fraction,
        cfg.copy_warmup_steps,
        stream_seed(cfg.seed, 1),
        cfg.steps,
        &cfg.training,
        "train",
    )?;
    let after = sliding_window_perplexity(&model, &held_out, cfg.window, stride)?;
    log::info!("held-out perplexity {before:.3} -> {after:.3}");

    let meta = json!({ "command": "train", "seed": cfg.seed, "config": cfg });
    save_checkpoint(&out.join(PRETRAINED), &model, &meta)?;
    write_text(&out.join("train_loss.csv"), &report.to_csv())?;
    let results = json!({
        "checkpoint": PRETRAINED,
        "parameters": model.parameter_count(),
        "final_loss": report.final_loss(),
        "held_out_ppl_before": before,
        "held_out_ppl_after": after,
    });
    write_json(
        &out.join("train_summary.json"),
        &artifact("train", Some(cfg.seed), cfg, results),
    )?;
    Ok(())
}

pub fn extend(mut cfg: ExtendConfig, out: &Path) -> Result<(), CliError> {
    let source = checkpoint_path(&mut cfg.checkpoint, out);
    let (model, _) = load_checkpoint(&source)?;
    let window = *cfg
        .extended_window
        .get_or_insert(2 * model.config().trained_window);
    let mut model = model.extend_context(window, cfg.method)?;
    prepare_out_dir(out)?;
    let report = run_training(
        &mut model,
        window,
        cfg.copy_fraction,
        0,
        stream_seed(cfg.seed, 3),
        cfg.steps,
        &cfg.training,
        "fine-tune",
    )?;
    let meta = json!({ "command": "extend", "seed": cfg.seed, "config": &cfg });
    save_checkpoint(&out.join("extended.ckpt"), &model, &meta)?;
    write_text(&out.join("extend_loss.csv"), &report.to_csv())?;
    let results = json!({
        "checkpoint": "extended.ckpt",
        "context_window": model.context_window(),
        "position_scale": model.position_map().scale(),
        "final_loss": report.final_loss(),
    });
    write_json(
        &out.join("extend_summary.json"),
        &artifact("extend", Some(cfg.seed), &cfg, results),
    )?;
    Ok(())
}

pub fn eval_ppl(mut cfg: EvalPplConfig, out: &Path) -> Result<(), CliError> {
    let source = checkpoint_path(&mut cfg.checkpoint, out);
    let (model, _) = load_checkpoint(&source)?;
    let window = *cfg.window.get_or_insert(model.context_window());
    if window > model.context_window() {
        return Err(CliError::Args(format!(
            "evaluation window {window} exceeds the model window {}",
            model.context_window()
        )));
    }
    let stride = *cfg.stride.get_or_insert((window / 2).max(1));
    let doc_len = *cfg.doc_len.get_or_insert(2 * model.config().trained_window);
    let vocab = Vocabulary::new(model.config().vocab_size)?;
    let stream = passkey_stream(&vocab, doc_len, cfg.docs, cfg.seed)?;
    let ppl = sliding_window_perplexity(&model, &stream, window, stride)?;
    log::info!("perplexity at window {window}, stride {stride}: {ppl:.4}");

    prepare_out_dir(out)?;
    write_text(&out.join("ppl.csv"), &format!("window,stride,ppl\n{window},{stride},{ppl}\n"))?;
    write_json(
        &out.join("ppl_summary.json"),
        &artifact("eval-ppl", Some(cfg.seed), &cfg, json!({ "ppl": ppl, "tokens": stream.len() })),
    )?;
    Ok(())
}

pub fn eval_passkey(mut cfg: EvalPasskeyConfig, out: &Path) -> Result<(), CliError> {
    let source = checkpoint_path(&mut cfg.checkpoint, out);
    let (model, _) = load_checkpoint(&source)?;
    let window = *cfg.extended_window.get_or_insert(model.context_window());
    let report = measure_effective_window(&model, window, cfg.distances, cfg.trials, cfg.seed)?;
    log::info!("k_max = {} at window {window}", report.k_max);

    prepare_out_dir(out)?;
    write_text(&out.join("passkey.csv"), &report.to_csv())?;
    write_json(
        &out.join("passkey_summary.json"),
        &artifact("eval-passkey", Some(cfg.seed), &cfg, &report),
    )?;
    Ok(())
}
