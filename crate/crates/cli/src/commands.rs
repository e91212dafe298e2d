use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use persona_core::config::ExperimentConfig;
use persona_core::evaluation::{ablation_grid, alignment_diagnostic, evaluate, grid_verdict, summarize_alignment};
use persona_core::gradcheck::gradcheck as run_gradcheck;
use persona_core::graph::{BackwardFault, OpKind};
use persona_core::rng::Rng;
use persona_core::trainer::{train_run, TrainConfig};
use persona_core::Error;

use crate::output::{write_csv, write_json};
use crate::{Common, OUT_DIR_ENV};

pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Numeric(_)) => 3,
        _ => 1,
    }
}

struct Setup {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn load(common: &Common) -> Result<Setup> {
    let path = &common.config;
    let src = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&src)
        .map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.evaluation.seeds = vec![seed];
    }
    if let Some(steps) = common.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    let out = match (&common.out, std::env::var_os(OUT_DIR_ENV)) {
        (Some(p), _) => p.clone(),
        (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
        _ => PathBuf::from(&cfg.output.dir),
    };
    Ok(Setup { cfg, out })
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn train(common: &Common) -> Result<ExitCode> {
    let Setup { cfg, out } = load(common)?;
    let t = &cfg.train;
    let base = cfg.build_base(t.seed)?;
    let mut run = train_run(&base, t)?;
    let metrics = evaluate(
        &run.state,
        cfg.evaluation.samples_per_prompt,
        &mut Rng::new(t.seed, "evaluate"),
    )?;
    run.report.metrics = Some(metrics);
    let r = &run.report;
    write_json(&out, "report.json", r, cfg.output.format)?;
    let rows: Vec<Vec<String>> = r
        .loss_curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), num(*l)])
        .collect();
    write_csv(&out, "loss_curve.csv", &["step", "loss"], &rows)?;
    println!(
        "train mode={} seed={} steps={} initial_loss={:.6} final_loss={:.6} elapsed_s={:.2}",
        r.ablation_mode, r.seed, r.steps, r.initial_loss, r.final_loss, r.elapsed_s
    );
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(common: &Common) -> Result<ExitCode> {
    let Setup { cfg, out } = load(common)?;
    let rows = ablation_grid(
        &cfg.train,
        &cfg.evaluation.seeds,
        cfg.evaluation.samples_per_prompt,
        &mut |seed| cfg.build_base(seed),
    )?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.clone(),
                r.seed.to_string(),
                num(r.identity_sim),
                num(r.prompt_sim),
                num(r.final_loss),
                num(r.time_s),
            ]
        })
        .collect();
    write_csv(
        &out,
        "ablation.csv",
        &["mode", "seed", "identity_sim", "prompt_sim", "final_loss", "time_s"],
        &table,
    )?;
    let v = grid_verdict(&rows);
    println!(
        "ablate rows={} full_best_sum={}/{} no_ide_worst_identity={}/{}",
        rows.len(),
        v.full_best_sum,
        v.seeds,
        v.no_ide_worst_identity,
        v.seeds
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_fault(spec: &str) -> Result<BackwardFault> {
    let (op, factor) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("--corrupt-backward expects op:factor, got {spec:?}")))?;
    let factor: f64 = factor
        .parse()
        .map_err(|_| Error::Config(format!("bad factor in --corrupt-backward {spec:?}")))?;
    Ok(BackwardFault {
        op: op.parse::<OpKind>()?,
        factor,
    })
}

pub fn gradcheck(common: &Common, corrupt: Option<&str>) -> Result<ExitCode> {
    let Setup { cfg, out } = load(common)?;
    let fault = corrupt.map(parse_fault).transpose()?;
    let report = run_gradcheck(&cfg.train, fault)?;
    write_json(&out, "gradcheck.json", &report, cfg.output.format)?;
    for g in &report.groups {
        println!("gradcheck group={} max_rel_error={:e} passed={}", g.group, g.max_rel_error, g.passed);
    }
    if report.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradient check failed (tolerance {:e}): {}",
            report.tolerance,
            report.offending.join(", ")
        );
        Ok(ExitCode::from(4))
    }
}

pub fn align(common: &Common) -> Result<ExitCode> {
    let Setup { cfg, out } = load(common)?;
    let mut per_seed = Vec::with_capacity(cfg.evaluation.seeds.len());
    for &seed in &cfg.evaluation.seeds {
        let base = cfg.build_base(seed)?;
        let run = |mode: &str| {
            train_run(
                &base,
                &TrainConfig {
                    seed,
                    ablation_mode: mode.into(),
                    ..cfg.train.clone()
                },
            )
        };
        let full = run("full")?;
        let naive = run("naive_concat")?;
        per_seed.push(alignment_diagnostic(&full.state, &naive.state).context("alignment diagnostic")?);
    }
    let report = summarize_alignment(per_seed);
    write_json(&out, "alignment.json", &report, cfg.output.format)?;
    println!(
        "align dist_naive={:.6} dist_enhanced={:.6} enhanced_closer={}/{}",
        report.dist_naive,
        report.dist_enhanced,
        report.enhanced_closer,
        report.per_seed.len()
    );
    Ok(ExitCode::SUCCESS)
}
