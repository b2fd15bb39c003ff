//! Subcommand execution. Every run writes its artifacts and a `report.json`
//! into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::alignment::{delta_trends, prop1_random_trials, AlignmentWeights};
use crate::analysis::{deviation_heatmap, prop2_verify};
use crate::attack::pgd::mean;
use crate::attack::{attack_batch, sweep, AttackConfig, SweepAxis, SweepRow};
use crate::encoder::{check_image, init_weights, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::{linalg, Precision, Tensor};
use crate::robustness::{
    adversarial_feature_distance, attack_eval, fare_finetune, gen_task, transfer_matrix, Classifier, NamedEncoder,
    ProtoTask, TaskSpec,
};
use crate::toolkit::config::*;
use crate::toolkit::io::{
    content_hash, fingerprint, matrix_rows, read_bytes, tensor_to_bytes, trace_rows, write_bundle, write_csv,
    write_ppm, write_tensor, Bundle,
};
use crate::toolkit::report::{AnalysisReport, Check};
use crate::toolkit::synth::synth_images;

pub const REPORT_FILE: &str = "report.json";

/// Runs `config`, writing into its `out_dir`.
pub fn run(config: &RunConfig) -> Result<AnalysisReport> {
    run_into(config, &config.out_dir)
}

/// Runs `config` but writes into `out` instead of the configured directory.
pub fn run_into(config: &RunConfig, out: &Path) -> Result<AnalysisReport> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ctx = Ctx {
        out: out.to_path_buf(),
        precision: match config.command {
            Command::Verify(_) => Precision::F64,
            _ => config.precision,
        },
        report: AnalysisReport::new(config.clone()),
    };
    let start = Instant::now();
    let metrics = match &config.command {
        Command::GenWeights(p) => gen_weights(&mut ctx, p)?,
        Command::Attack(p) => attack(&mut ctx, p)?,
        Command::Verify(p) => verify(&mut ctx, p)?,
        Command::Ablate(p) => ablate(&mut ctx, p)?,
        Command::Sweep(p) => run_sweep(&mut ctx, p)?,
        Command::Transfer(p) => transfer(&mut ctx, p)?,
        Command::Finetune(p) => finetune(&mut ctx, p)?,
        Command::TaskEval(p) => task_eval(&mut ctx, p)?,
    };
    ctx.report.metrics = metrics;
    ctx.report.timings.insert("total".into(), start.elapsed().as_secs_f64());
    ctx.report.write(&out.join(REPORT_FILE))?;
    Ok(ctx.report)
}

/// Re-runs the config embedded in the report at `path`, writing into
/// `scratch`, and returns the fields whose values differ.
pub fn replay(path: &Path, scratch: &Path) -> Result<Vec<String>> {
    let original = AnalysisReport::load(path)?;
    let fresh = run_into(&original.config, scratch)?;
    Ok(original.differences(&fresh))
}

struct Ctx {
    out: PathBuf,
    precision: Precision,
    report: AnalysisReport,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        *self.report.timings.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
        Ok(out)
    }

    fn input(&mut self, label: &str, hash: String) {
        self.report.inputs.insert(label.to_string(), hash);
    }

    fn check(&mut self, check: Check) {
        self.report.checks.push(check);
    }
}

/// Encoder and alignment weights for a model spec, rounded to the storage
/// precision.
pub fn load_model(spec: &ModelSpec, precision: Precision) -> Result<(EncoderWeights, AlignmentWeights, String)> {
    spec.encoder.validate()?;
    let (weights, alignment, hash) = match &spec.weights {
        Some(path) => {
            let bytes = read_bytes(path)?;
            let bundle = Bundle::from_bytes(&bytes)?;
            let weights = bundle.encoder_weights()?;
            weights.check(&spec.encoder)?;
            let alignment = match bundle.alignment()? {
                Some(a) => a,
                None => AlignmentWeights::init(spec.encoder.d_v, spec.d_m, spec.seed)?,
            };
            if alignment.d_v() != spec.encoder.d_v {
                return Err(Error::invalid(format!(
                    "{}: alignment expects d_v={}, encoder has {}",
                    path.display(),
                    alignment.d_v(),
                    spec.encoder.d_v
                )));
            }
            (weights, alignment, content_hash(&bytes))
        }
        None => {
            let weights = init_weights(&spec.encoder, spec.seed, spec.spectral_cap)?;
            let alignment = AlignmentWeights::init(spec.encoder.d_v, spec.d_m, spec.seed)?;
            let hash = fingerprint(&weights, Some(&alignment))?;
            (weights, alignment, hash)
        }
    };
    if precision == Precision::F64 {
        return Ok((weights, alignment, hash));
    }
    let rounded = Bundle::new(&weights, Some(&alignment), precision);
    let alignment = rounded.alignment()?.expect("bundle carries alignment");
    Ok((rounded.encoder_weights()?, alignment, hash))
}

/// Images for a source, rounded to the storage precision, with a content hash.
pub fn load_images(source: &ImageSource, enc: &EncoderConfig, precision: Precision) -> Result<(Vec<Tensor>, String)> {
    let images = match source {
        ImageSource::Synthetic { count, seed, spec } => synth_images(*count, *seed, spec, enc)?,
        ImageSource::Files(paths) => {
            if paths.is_empty() {
                return Err(Error::invalid("no image files given"));
            }
            paths
                .iter()
                .map(|p| {
                    let t = crate::toolkit::io::read_tensor(p)?;
                    check_image(&t, enc).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?;
                    Ok(t)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let images: Vec<Tensor> = images.iter().map(|t| t.with_precision(precision)).collect();
    let mut all = Vec::new();
    for t in &images {
        all.extend(tensor_to_bytes(t, Precision::F64)?);
    }
    Ok((images, content_hash(&all)))
}

fn load_task(spec: &TaskSpec, enc: &EncoderConfig, precision: Precision) -> Result<ProtoTask> {
    let mut task = gen_task(spec, enc)?;
    for s in task.train.iter_mut().chain(task.eval.iter_mut()) {
        s.image = s.image.with_precision(precision);
    }
    Ok(task)
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn gen_weights(ctx: &mut Ctx, p: &GenWeightsParams) -> Result<serde_json::Value> {
    let precision = ctx.precision;
    let (weights, alignment, hash) = ctx.timed("init", || load_model(&p.model, precision))?;
    ctx.input("model", hash);
    let bundle = Bundle::new(&weights, Some(&alignment), ctx.precision);
    write_bundle(&ctx.path("weights.vewts"), &bundle)?;
    let bytes = bundle.to_bytes()?;
    let mut sigmas = Vec::with_capacity(weights.layers.len());
    for l in &weights.layers {
        sigmas.push(linalg::spectral_norm(&l.wv)?);
    }
    let cap = p.model.spectral_cap;
    if p.model.weights.is_none() {
        let ok = sigmas.iter().all(|&s| s <= cap * (1.0 + 1e-6));
        ctx.check(Check::asserted("spectral cap", ok, format!("max σ(W_V) = {:.9}", sigmas.iter().cloned().fold(0.0, f64::max))));
    }
    Ok(json!({
        "bundle": "weights.vewts",
        "bundle_hash": content_hash(&bytes),
        "entries": bundle.entries.len(),
        "wv_spectral_norms": sigmas,
        "alignment_sigma_min": alignment.sigma_min(),
        "alignment_sigma_max": alignment.sigma_max(),
    }))
}

fn attack(ctx: &mut Ctx, p: &AttackParams) -> Result<serde_json::Value> {
    p.attack.validate()?;
    let precision = ctx.precision;
    let (weights, alignment, hash) = load_model(&p.model, precision)?;
    ctx.input("model", hash);
    let (images, ihash) = load_images(&p.images, &p.model.encoder, precision)?;
    ctx.input("images", ihash);
    let enc = &p.model.encoder;
    let outcomes = ctx.timed("attack", || attack_batch(&images, &weights, enc, &alignment, &p.attack))?;
    let mut per_image = Vec::with_capacity(outcomes.len());
    let mut violations = 0usize;
    for (i, o) in outcomes.iter().enumerate() {
        write_tensor(&ctx.path(&format!("adv_{i:04}.veten")), &o.adversarial, precision)?;
        let (header, rows) = trace_rows(&o.trace);
        write_csv(&ctx.path(&format!("trace_{i:04}.csv")), &header, &rows)?;
        write_csv(
            &ctx.path(&format!("heatmap_{i:04}.csv")),
            &(0..enc.n_v()).map(|t| format!("token{t}")).collect::<Vec<_>>(),
            &matrix_rows(&deviation_heatmap(&o.trace)?)?,
        )?;
        if p.ppm {
            write_ppm(&ctx.path(&format!("adv_{i:04}.ppm")), &o.adversarial)?;
        }
        let stored = o.adversarial.with_precision(precision);
        let linf = stored.sub(&images[i])?.max_abs();
        let in_range = stored.data().iter().all(|v| (0.0..=1.0).contains(v));
        if linf > p.attack.epsilon + 1e-12 || !in_range || o.trace.linf.iter().any(|&l| l > p.attack.epsilon + 1e-12) {
            violations += 1;
        }
        per_image.push(json!({
            "final_cosine": o.final_cosine,
            "delta_zv": o.delta_zv,
            "delta_zm": o.delta_zm,
            "final_linf": o.trace.final_linf,
            "final_loss": o.trace.losses.last(),
        }));
    }
    ctx.check(Check::asserted(
        "aligned-feature bound",
        outcomes.iter().all(|o| o.prop1.holds),
        "every image",
    ));
    ctx.check(Check::asserted("budget and pixel range", violations == 0, format!("{violations} violating images")));
    Ok(json!({
        "images": images.len(),
        "objective": p.attack.objective,
        "mean_final_cosine": mean(outcomes.iter().map(|o| o.final_cosine)),
        "mean_delta_zv": mean(outcomes.iter().map(|o| o.delta_zv)),
        "mean_delta_zm": mean(outcomes.iter().map(|o| o.delta_zm)),
        "per_image": per_image,
    }))
}

fn verify(ctx: &mut Ctx, p: &VerifyParams) -> Result<serde_json::Value> {
    if p.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    match p.prop {
        Proposition::One => {
            let s = ctx.timed("trials", || prop1_random_trials(p.trials, p.n_v, p.d_v, p.d_m, p.seed))?;
            ctx.check(Check::asserted(
                "aligned-feature lower bound",
                s.violations == 0,
                format!("{} of {} trials violated", s.violations, s.trials),
            ));
            ctx.check(Check::asserted(
                "singular-value sandwich",
                s.sandwich_violations == 0,
                format!("{} of {} trials violated", s.sandwich_violations, s.trials),
            ));
            let mut v = to_value(&s)?;
            v["precision"] = json!("f64");
            Ok(v)
        }
        Proposition::Two => {
            let r = ctx.timed("trials", || prop2_verify(&p.encoder, p.seed, p.trials, p.spectral_cap, p.regime))?;
            let failing = r.per_trial.iter().filter(|t| !t.holds).count();
            ctx.check(Check::asserted(
                "propagation bound",
                r.holds,
                format!("{failing} of {} trials violated; min slack {:e}", r.trials, r.min_slack),
            ));
            ctx.check(Check::observed("ratio below one", r.ratio_below_one, format!("n_v = {}", r.n_v)));
            let rows: Vec<Vec<String>> = r
                .per_trial
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    vec![
                        i.to_string(),
                        t.sigma_v.to_string(),
                        t.delta_a.to_string(),
                        t.delta_a_all_rows.to_string(),
                        t.ratio.to_string(),
                        t.full_jacobian_ratio.to_string(),
                        t.bound.to_string(),
                        t.max_m_norm.to_string(),
                        t.holds.to_string(),
                    ]
                })
                .collect();
            write_csv(
                &ctx.path("prop2_trials.csv"),
                &[
                    "trial",
                    "sigma_v",
                    "delta_a",
                    "delta_a_all_rows",
                    "ratio",
                    "full_jacobian_ratio",
                    "bound",
                    "max_m_norm",
                    "holds",
                ],
                &rows,
            )?;
            let mut v = to_value(&r)?;
            if let Some(obj) = v.as_object_mut() {
                obj.remove("per_trial");
                obj.insert("precision".into(), json!("f64"));
            }
            Ok(v)
        }
    }
}

fn ablate(ctx: &mut Ctx, p: &AblateParams) -> Result<serde_json::Value> {
    p.attack.validate()?;
    let precision = ctx.precision;
    let enc = &p.model.encoder;
    let (weights, alignment, hash) = load_model(&p.model, precision)?;
    ctx.input("model", hash);
    let task = load_task(&p.task, enc, precision)?;
    let classifier = Classifier::fit(&task, &weights, enc, &alignment, p.pooling)?;
    let objectives = p.mode.objectives();
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for obj in objectives {
        let cfg = p.attack.with_objective(obj);
        let e = ctx.timed(obj.name(), || attack_eval(&task, &classifier, &weights, enc, &alignment, &cfg))?;
        rows.push(vec![
            obj.name().to_string(),
            e.clean_acc.to_string(),
            e.adv_acc.to_string(),
            e.drop.to_string(),
            e.mean_delta_zm.to_string(),
            e.mean_final_cosine.to_string(),
        ]);
        evals.push(json!({"objective": obj, "eval": to_value(&e)?}));
    }
    write_csv(
        &ctx.path("ablate.csv"),
        &["objective", "clean_acc", "adv_acc", "drop", "mean_delta_zm", "mean_final_cosine"],
        &rows,
    )?;
    let drop = |i: usize| rows[i][3].parse::<f64>().unwrap_or(f64::NAN);
    let dzm = |i: usize| rows[i][4].parse::<f64>().unwrap_or(f64::NAN);
    // rows are (baseline, middle, cos-patch) in targets mode and
    // (euclid, kl, cos-patch) in losses mode
    match p.mode {
        AblateMode::Targets => {
            ctx.check(Check::observed(
                "drop ordering patch >= both >= cls",
                drop(2) >= drop(1) && drop(1) >= drop(0),
                format!("{} / {} / {}", drop(2), drop(1), drop(0)),
            ));
            ctx.check(Check::observed(
                "aligned deviation patch > cls",
                dzm(2) > dzm(0),
                format!("{} vs {}", dzm(2), dzm(0)),
            ));
        }
        AblateMode::Losses => {
            ctx.check(Check::observed(
                "cosine drop >= euclidean and kl",
                drop(2) >= drop(0) && drop(2) >= drop(1),
                format!("{} / {} / {}", drop(2), drop(0), drop(1)),
            ));
        }
    }
    Ok(json!({ "mode": p.mode, "rows": evals }))
}

fn sweep_rows(rows: &[SweepRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.steps.to_string(),
                r.epsilon.to_string(),
                r.mean_final_cosine.to_string(),
                r.mean_delta_zv.to_string(),
                r.mean_delta_zm.to_string(),
            ]
        })
        .collect()
}

fn run_sweep(ctx: &mut Ctx, p: &SweepParams) -> Result<serde_json::Value> {
    p.attack.validate()?;
    let precision = ctx.precision;
    let enc = &p.model.encoder;
    let (weights, alignment, hash) = load_model(&p.model, precision)?;
    ctx.input("model", hash);
    let (images, ihash) = load_images(&p.images, enc, precision)?;
    ctx.input("images", ihash);
    let rows = ctx.timed("sweep", || sweep(&images, &weights, enc, &alignment, &p.attack, &p.axis))?;
    write_csv(
        &ctx.path("sweep.csv"),
        &["steps", "epsilon", "mean_final_cosine", "mean_delta_zv", "mean_delta_zm"],
        &sweep_rows(&rows),
    )?;
    let mut out = json!({ "rows": to_value(&rows)? });
    match &p.axis {
        SweepAxis::Steps(_) if rows.len() >= 3 => {
            let c: Vec<f64> = rows.iter().map(|r| r.mean_final_cosine).collect();
            let n = c.len();
            ctx.check(Check::observed(
                "last setting within 0.05 of first",
                c[n - 1] <= c[0] + 0.05,
                format!("{} vs {}", c[n - 1], c[0]),
            ));
            ctx.check(Check::observed(
                "gains saturate",
                (c[n - 2] - c[n - 1]).abs() <= (c[0] - c[n - 2]).abs(),
                format!("{:?}", c),
            ));
        }
        SweepAxis::Epsilon(budgets) => {
            let mono = rows
                .windows(2)
                .all(|w| w[1].mean_delta_zv >= w[0].mean_delta_zv && w[1].mean_delta_zm >= w[0].mean_delta_zm);
            ctx.check(Check::observed("deviations non-decreasing in budget", mono, ""));
            if !p.trend_objectives.is_empty() {
                let trends = ctx.timed("trends", || {
                    delta_trends(&images, &weights, enc, &alignment, &p.attack, budgets, &p.trend_objectives)
                })?;
                let trows: Vec<Vec<String>> = trends
                    .iter()
                    .map(|t| {
                        vec![
                            t.objective.name().to_string(),
                            t.epsilon.to_string(),
                            t.mean_delta_zv.to_string(),
                            t.mean_delta_zm.to_string(),
                        ]
                    })
                    .collect();
                write_csv(
                    &ctx.path("trends.csv"),
                    &["objective", "epsilon", "mean_delta_zv", "mean_delta_zm"],
                    &trows,
                )?;
                out["trends"] = to_value(&trends)?;
            }
        }
        _ => {}
    }
    Ok(out)
}

fn transfer(ctx: &mut Ctx, p: &TransferParams) -> Result<serde_json::Value> {
    p.attack.validate()?;
    let precision = ctx.precision;
    let first = p
        .models
        .first()
        .ok_or_else(|| Error::invalid("transfer needs at least two models"))?;
    let enc = first.model.encoder.clone();
    let task = load_task(&p.task, &enc, precision)?;
    let train: Vec<Tensor> = task.train.iter().map(|s| s.image.clone()).collect();
    let mut encoders = Vec::with_capacity(p.models.len());
    let mut logs = serde_json::Map::new();
    for m in &p.models {
        if m.model.encoder != enc {
            return Err(Error::invalid(format!("model {} uses a different encoder config", m.name)));
        }
        let (mut weights, alignment, hash) = load_model(&m.model, precision)?;
        ctx.input(&format!("model.{}", m.name), hash);
        if let Some(fare) = &m.finetune {
            let (w, log) = ctx.timed(&format!("finetune.{}", m.name), || fare_finetune(&weights, &enc, &train, fare))?;
            weights = Bundle::new(&w, None, precision).encoder_weights()?;
            logs.insert(m.name.clone(), to_value(&log)?);
        }
        encoders.push(NamedEncoder {
            name: m.name.clone(),
            weights,
            alignment,
        });
    }
    let matrix = ctx.timed("matrix", || transfer_matrix(&encoders, &enc, &task, &p.attack, p.pooling))?;
    let (header, rows) = matrix.csv_rows();
    write_csv(&ctx.path("transfer.csv"), &header, &rows)?;
    let mut out = json!({ "matrix": to_value(&matrix)?, "finetune": logs });
    // the default pair only applies when models with those names exist
    let default_pair = TransferParams::default().mobius;
    let present = |n: &str| p.models.iter().any(|m| m.name == n);
    let mobius = p
        .mobius
        .as_ref()
        .filter(|m| (present(&m.robust) && present(&m.standard)) || Some(*m) != default_pair.as_ref());
    if let Some(m) = mobius {
        let margin = matrix.mobius_margin(&m.robust, &m.standard)?;
        let r = matrix.index(&m.robust)?;
        let s = matrix.index(&m.standard)?;
        ctx.check(Check::observed(
            "robust source transfers at least as well",
            margin >= -m.margin,
            format!(
                "acc[{robust}->{standard}] = {}, acc[{standard}->{robust}] = {}",
                matrix.accuracy[r][s],
                matrix.accuracy[s][r],
                robust = m.robust,
                standard = m.standard
            ),
        ));
        ctx.check(Check::observed(
            "robust target defends better",
            matrix.accuracy[s][r] >= matrix.accuracy[s][s],
            format!("{} vs {}", matrix.accuracy[s][r], matrix.accuracy[s][s]),
        ));
        out["mobius_margin"] = json!(margin);
    }
    Ok(out)
}

fn finetune(ctx: &mut Ctx, p: &FinetuneParams) -> Result<serde_json::Value> {
    p.attack.validate()?;
    let precision = ctx.precision;
    let enc = &p.model.encoder;
    let (weights, alignment, hash) = load_model(&p.model, precision)?;
    ctx.input("model", hash);
    let task = load_task(&p.task, enc, precision)?;
    let train = match &p.images {
        Some(src) => {
            let (images, ihash) = load_images(src, enc, precision)?;
            ctx.input("images", ihash);
            images
        }
        None => task.train.iter().map(|s| s.image.clone()).collect(),
    };
    let (tuned, log) = ctx.timed("finetune", || fare_finetune(&weights, enc, &train, &p.fare))?;
    let bundle = Bundle::new(&tuned, Some(&alignment), precision);
    write_bundle(&ctx.path("finetuned.vewts"), &bundle)?;
    let tuned = bundle.encoder_weights()?;
    let eval_images = task.eval_images();
    let fare_attack = AttackConfig {
        epsilon: p.fare.inner_eps,
        alpha: p.fare.inner_alpha,
        steps: p.fare.inner_steps,
        ..p.attack.clone()
    };
    let dist_before = adversarial_feature_distance(&weights, enc, &eval_images, &fare_attack)?;
    let dist_after = adversarial_feature_distance(&tuned, enc, &eval_images, &fare_attack)?;
    let before = ctx.timed("eval", || {
        let c = Classifier::fit(&task, &weights, enc, &alignment, p.pooling)?;
        attack_eval(&task, &c, &weights, enc, &alignment, &p.attack)
    })?;
    let after = ctx.timed("eval", || {
        let c = Classifier::fit(&task, &tuned, enc, &alignment, p.pooling)?;
        attack_eval(&task, &c, &tuned, enc, &alignment, &p.attack)
    })?;
    ctx.check(Check::observed(
        "adversarial accuracy not lower after finetuning",
        after.adv_acc >= before.adv_acc - 0.02,
        format!("{} -> {}", before.adv_acc, after.adv_acc),
    ));
    Ok(json!({
        "bundle": "finetuned.vewts",
        "bundle_hash": content_hash(&bundle.to_bytes()?),
        "losses": log.losses,
        "feature_distance_before": dist_before,
        "feature_distance_after": dist_after,
        "before": to_value(&before)?,
        "after": to_value(&after)?,
    }))
}

fn task_eval(ctx: &mut Ctx, p: &TaskEvalParams) -> Result<serde_json::Value> {
    p.attack.validate()?;
    let precision = ctx.precision;
    let enc = &p.model.encoder;
    let (weights, alignment, hash) = load_model(&p.model, precision)?;
    ctx.input("model", hash);
    let task = load_task(&p.task, enc, precision)?;
    let e = ctx.timed("eval", || {
        let c = Classifier::fit(&task, &weights, enc, &alignment, p.pooling)?;
        attack_eval(&task, &c, &weights, enc, &alignment, &p.attack)
    })?;
    ctx.check(Check::observed("clean accuracy above chance", e.clean_acc > 1.0 / p.task.classes as f64, ""));
    to_value(&e)
}
