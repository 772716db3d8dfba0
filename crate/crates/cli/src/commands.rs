//! Command implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use ghost_core::baselines::{PolicyConfig, SimilarityDirection};
use ghost_core::budget::{BudgetPlan, LayerProfile, allocate_budgets, budget_variance, mean_cosine_profile};
use ghost_core::domain::{FrameMeta, ScoreWeights, TokenLayout};
use ghost_core::engine::{Ablation, EvictionMode};
use ghost_core::report::{RunConfigEcho, RunReport, StreamSource};
use ghost_core::simgen::{
    BATTERY_SEEDS, CoverageScalars, TrajectoryConfig, generate_stream, run_experiment,
};
use ghost_core::trace;

use crate::{AblationArg, CliError, DirectionArg, ModeArg, PolicyArgs, RunArgs, SweepKind};

impl From<ModeArg> for EvictionMode {
    fn from(arg: ModeArg) -> Self {
        match arg {
            ModeArg::Standard => EvictionMode::Standard,
            ModeArg::Strict => EvictionMode::StrictProtection,
        }
    }
}

impl From<AblationArg> for Ablation {
    fn from(arg: AblationArg) -> Self {
        match arg {
            AblationArg::Full => Ablation::Full,
            AblationArg::FrameOnly => Ablation::FrameOnly,
            AblationArg::TokenOnly => Ablation::TokenOnly,
            AblationArg::NoCam => Ablation::NoCam,
            AblationArg::NoGeo => Ablation::NoGeo,
            AblationArg::NoTemp => Ablation::NoTemp,
            AblationArg::NoBoost => Ablation::NoBoost,
        }
    }
}

impl From<DirectionArg> for SimilarityDirection {
    fn from(arg: DirectionArg) -> Self {
        match arg {
            DirectionArg::RetainMostSimilar => SimilarityDirection::RetainMostSimilar,
            DirectionArg::RetainLeastSimilar => SimilarityDirection::RetainLeastSimilar,
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| CliError::io(path, e))?,
    ))
}

fn load_weights(path: Option<&Path>) -> Result<ScoreWeights, CliError> {
    let weights = match path {
        None => ScoreWeights::default(),
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| CliError::parse(p, e))?,
    };
    weights.validate()?;
    Ok(weights)
}

fn resolve_policy(
    name: &str,
    args: &PolicyArgs,
    layout: &TokenLayout,
) -> Result<PolicyConfig, CliError> {
    Ok(match name {
        "ghost" => PolicyConfig::Ghost {
            mode: args.mode.into(),
            ablation: args.ablation.into(),
        },
        "uniform_budget_ghost" => PolicyConfig::UniformBudgetGhost {
            mode: args.mode.into(),
            ablation: args.ablation.into(),
        },
        "key_similarity" => PolicyConfig::KeySimilarity {
            direction: args.direction.into(),
        },
        "sink_recent" => PolicyConfig::SinkRecent {
            sink_size: args.sink_size.unwrap_or_else(|| layout.tokens_per_frame()),
            window: args.window,
        },
        "recency_window" => PolicyConfig::RecencyWindow,
        other => {
            return Err(CliError::UnknownPolicy {
                name: other.to_string(),
            })
        }
    })
}

/// Loads the run input: a generator config (single JSON document) or a frame
/// trace (JSON lines). `.json` files must parse as a config, `.jsonl` as a
/// trace; anything else is sniffed in that order.
fn load_input(
    path: &Path,
    seed: Option<u64>,
    registers: u32,
) -> Result<(Vec<FrameMeta>, TokenLayout, StreamSource), CliError> {
    let ext = path.extension().and_then(|e| e.to_str());
    let parse_config = |text: &str| -> Result<TrajectoryConfig, serde_json::Error> {
        serde_json::from_str(text)
    };
    let from_config = |mut config: TrajectoryConfig| {
        if let Some(seed) = seed {
            config.noise_seed = seed;
        }
        let layout = config.layout();
        let stream = generate_stream(&config).map_err(CliError::from_sim)?;
        info!(
            "generated {} frames ({} tokens per frame)",
            stream.len(),
            layout.tokens_per_frame()
        );
        Ok((
            stream,
            layout,
            StreamSource::Generated { config },
        ))
    };
    let from_trace = |path: &Path| -> Result<_, CliError> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let frames = trace::read_frame_trace(BufReader::new(file))
            .map_err(|e| CliError::from_trace(path, e))?;
        let first = frames
            .first()
            .ok_or_else(|| CliError::InvalidInput("trace contains no frames".into()))?;
        let layout = TokenLayout::new(registers, first.patch_rows(), first.patch_cols());
        info!("loaded {} frames from trace", frames.len());
        Ok((
            frames,
            layout,
            StreamSource::Trace {
                path: path.display().to_string(),
            },
        ))
    };

    match ext {
        Some("json") => {
            let text = read_text(path)?;
            from_config(parse_config(&text).map_err(|e| CliError::parse(path, e))?)
        }
        Some("jsonl") => from_trace(path),
        _ => {
            let text = read_text(path)?;
            match parse_config(&text) {
                Ok(config) => from_config(config),
                Err(_) => from_trace(path),
            }
        }
    }
}

fn load_plan(path: &Path) -> Result<BudgetPlan, CliError> {
    trace::plan_from_json(&read_text(path)?).map_err(|e| CliError::from_trace(path, e))
}

pub fn profile(activation_trace: &Path, out: &Path) -> Result<(), CliError> {
    let file = File::open(activation_trace).map_err(|e| CliError::io(activation_trace, e))?;
    let samples = trace::read_activation_trace(BufReader::new(file))
        .map_err(|e| CliError::from_trace(activation_trace, e))?;
    info!("profiling {} layers", samples.len());
    let profile = mean_cosine_profile(&samples).map_err(CliError::from_budget)?;
    let mut writer = create(out)?;
    trace::write_profile_csv(&mut writer, &profile).map_err(|e| CliError::from_trace(out, e))?;
    writer.flush().map_err(|e| CliError::io(out, e))?;
    Ok(())
}

pub fn allocate(
    profile_path: &Path,
    out: &Path,
    tau: f64,
    total: usize,
    floor: usize,
) -> Result<(), CliError> {
    let file = File::open(profile_path).map_err(|e| CliError::io(profile_path, e))?;
    let profile = trace::read_profile_csv(BufReader::new(file))
        .map_err(|e| CliError::from_trace(profile_path, e))?;
    let plan = allocate_budgets(&profile, tau, total, floor).map_err(CliError::from_budget)?;
    debug!("budget variance {}", budget_variance(&plan.budgets));
    let mut writer = create(out)?;
    writer
        .write_all(trace::plan_to_json(&plan).as_bytes())
        .and_then(|_| writer.write_all(b"\n"))
        .and_then(|_| writer.flush())
        .map_err(|e| CliError::io(out, e))?;
    Ok(())
}

fn run_to_report(
    stream: &[FrameMeta],
    config: RunConfigEcho,
    plan: &BudgetPlan,
    bytes_per_token: u64,
) -> Result<RunReport, CliError> {
    if plan.layer_count() == 0 {
        return Err(CliError::InvalidInput("plan has no layers".into()));
    }
    let result = run_experiment(stream, config.layout, &config.policy, plan, &config.weights)
        .map_err(CliError::from_sim)?;
    // The report echoes the plan that actually ran; the uniform-budget
    // variant replaces the input plan's budgets with an even split.
    let effective_plan = match config.policy {
        PolicyConfig::UniformBudgetGhost { .. } => {
            ghost_core::baselines::uniform_budget_plan(plan.layer_count(), plan.total)
        }
        _ => plan.clone(),
    };
    Ok(RunReport::from_experiment(
        config,
        effective_plan,
        &result,
        bytes_per_token,
    ))
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let (stream, layout, source) = load_input(&args.input, args.seed, args.policy_args.registers)?;
    let plan = load_plan(&args.plan)?;
    let weights = load_weights(args.policy_args.weights_file.as_deref())?;
    let policy = resolve_policy(&args.policy, &args.policy_args, &layout)?;
    let report = run_to_report(
        &stream,
        RunConfigEcho {
            policy,
            weights,
            layout,
            stream: source,
            seed: args.seed,
        },
        &plan,
        args.bytes_per_token,
    )?;
    let mut writer = create(&args.out)?;
    writer
        .write_all(report.to_json().as_bytes())
        .and_then(|_| writer.write_all(b"\n"))
        .and_then(|_| writer.flush())
        .map_err(|e| CliError::io(&args.out, e))?;
    info!(
        "wrote report: {} retained tokens, {} modeled bytes",
        report.final_retained_tokens, report.modeled_cache_bytes
    );
    Ok(())
}

// ── Sweeps ──────────────────────────────────────────────────────────────────

fn default_sweep_tau() -> f64 {
    0.5
}

fn default_bytes_per_token() -> u64 {
    1
}

/// Base configuration for `sweep`: the stream family, the layer profile, and
/// the allocation/scoring parameters held fixed while one axis varies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub stream: TrajectoryConfig,
    /// Per-layer mean cosine similarities.
    pub profile: Vec<f64>,
    pub total: usize,
    #[serde(default = "default_sweep_tau")]
    pub tau: f64,
    /// Defaults to one frame's token count.
    #[serde(default)]
    pub floor: Option<usize>,
    #[serde(default)]
    pub weights: Option<ScoreWeights>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_bytes_per_token")]
    pub bytes_per_token: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeedSummary {
    seed: u64,
    coverage_reference: CoverageScalars,
    coverage_layer_mean: CoverageScalars,
    final_retained_tokens: usize,
}

/// One sweep point: the varied parameter, the plan it produced, and the
/// per-seed battery results.
#[derive(Debug, Serialize, Deserialize)]
struct SweepPointReport {
    point: String,
    tau: f64,
    weights: ScoreWeights,
    plan: BudgetPlan,
    budget_variance: f64,
    runs: Vec<SeedSummary>,
    mean: CoverageScalars,
}

fn mean_scalars(runs: &[SeedSummary]) -> CoverageScalars {
    let n = runs.len() as f64;
    let mean = |f: fn(&CoverageScalars) -> f64| {
        runs.iter().map(|r| f(&r.coverage_reference)).sum::<f64>() / n
    };
    CoverageScalars {
        pose_dispersion: mean(|s| s.pose_dispersion),
        retained_depth_variance_mass: mean(|s| s.retained_depth_variance_mass),
        retained_confidence_mass: mean(|s| s.retained_confidence_mass),
        special_survival_rate: mean(|s| s.special_survival_rate),
    }
}

fn sweep_point(
    config: &SweepConfig,
    point: &str,
    tau: f64,
    weights: &ScoreWeights,
    plan: &BudgetPlan,
    seeds: &[u64],
) -> Result<SweepPointReport, CliError> {
    let layout = config.stream.layout();
    let policy = PolicyConfig::Ghost {
        mode: EvictionMode::Standard,
        ablation: Ablation::Full,
    };
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut stream_cfg = config.stream.clone();
        stream_cfg.noise_seed = seed;
        let stream = generate_stream(&stream_cfg).map_err(CliError::from_sim)?;
        let result = run_experiment(&stream, layout, &policy, plan, weights)
            .map_err(CliError::from_sim)?;
        runs.push(SeedSummary {
            seed,
            coverage_reference: result.coverage.reference,
            coverage_layer_mean: result.coverage.layer_mean,
            final_retained_tokens: result.final_retained_tokens,
        });
    }
    let mean = mean_scalars(&runs);
    Ok(SweepPointReport {
        point: point.to_string(),
        tau,
        weights: *weights,
        plan: plan.clone(),
        budget_variance: budget_variance(&plan.budgets),
        runs,
        mean,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut writer = create(path)?;
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    writer
        .write_all(text.as_bytes())
        .and_then(|_| writer.write_all(b"\n"))
        .and_then(|_| writer.flush())
        .map_err(|e| CliError::io(path, e))
}

/// Temperature grid covered by the sensitivity sweep.
pub const TAU_GRID: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

/// The six single-weight perturbations, one group at a time.
pub const WEIGHT_PERTURBATIONS: [(&str, f64); 6] = [
    ("w_cam", 0.1),
    ("w_geo", -0.1),
    ("w_temp", 0.1),
    ("w_sal", 0.1),
    ("w_dc", -0.1),
    ("w_pc", 0.1),
];

fn perturbed(base: &ScoreWeights, field: &str, delta: f64) -> ScoreWeights {
    let mut w = *base;
    match field {
        "w_cam" => w.w_cam += delta,
        "w_geo" => w.w_geo += delta,
        "w_temp" => w.w_temp += delta,
        "w_sal" => w.w_sal += delta,
        "w_dc" => w.w_dc += delta,
        "w_pc" => w.w_pc += delta,
        _ => unreachable!("perturbation fields are fixed"),
    }
    w
}

pub fn sweep(config_path: &Path, kind: SweepKind, out_dir: &Path) -> Result<(), CliError> {
    let config: SweepConfig = serde_json::from_str(&read_text(config_path)?)
        .map_err(|e| CliError::parse(config_path, e))?;
    config.stream.validate().map_err(CliError::from_sim)?;
    let profile = LayerProfile::from_rho(config.profile.clone()).map_err(CliError::from_budget)?;
    let floor = config
        .floor
        .unwrap_or_else(|| config.stream.layout().tokens_per_frame());
    let weights = config.weights.unwrap_or_default();
    weights.validate()?;
    let seeds = config
        .seeds
        .clone()
        .unwrap_or_else(|| BATTERY_SEEDS.to_vec());
    if seeds.is_empty() {
        return Err(CliError::Usage("seed battery is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let mut points = Vec::new();
    match kind {
        SweepKind::Tau => {
            for &tau in &TAU_GRID {
                let plan = allocate_budgets(&profile, tau, config.total, floor)
                    .map_err(CliError::from_budget)?;
                let point = format!("tau_{tau}");
                let report = sweep_point(&config, &point, tau, &weights, &plan, &seeds)?;
                write_json(&out_dir.join(format!("{point}.json")), &report)?;
                points.push(report);
            }
        }
        SweepKind::Weights => {
            let plan = allocate_budgets(&profile, config.tau, config.total, floor)
                .map_err(CliError::from_budget)?;
            let default_report =
                sweep_point(&config, "default", config.tau, &weights, &plan, &seeds)?;
            write_json(&out_dir.join("default.json"), &default_report)?;
            points.push(default_report);
            for &(field, delta) in &WEIGHT_PERTURBATIONS {
                let w = perturbed(&weights, field, delta);
                w.validate()?;
                let sign = if delta >= 0.0 { "plus" } else { "minus" };
                let point = format!("{field}_{sign}");
                let report = sweep_point(&config, &point, config.tau, &w, &plan, &seeds)?;
                write_json(&out_dir.join(format!("{point}.json")), &report)?;
                points.push(report);
            }
        }
    }

    let summary_path = out_dir.join("summary.csv");
    let mut writer = create(&summary_path)?;
    writeln!(
        writer,
        "point,tau,budget_variance,pose_dispersion,depth_variance_mass,confidence_mass,special_survival"
    )
    .map_err(|e| CliError::io(&summary_path, e))?;
    for p in &points {
        writeln!(
            writer,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.point,
            p.tau,
            p.budget_variance,
            p.mean.pose_dispersion,
            p.mean.retained_depth_variance_mass,
            p.mean.retained_confidence_mass,
            p.mean.special_survival_rate
        )
        .map_err(|e| CliError::io(&summary_path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(&summary_path, e))?;
    info!("wrote {} sweep points to {}", points.len(), out_dir.display());
    Ok(())
}

pub fn compare(
    genconfig: &Path,
    plan_path: &Path,
    policies: &[String],
    out_dir: &Path,
    policy_args: &PolicyArgs,
    seed: Option<u64>,
) -> Result<(), CliError> {
    if policies.is_empty() {
        return Err(CliError::Usage("at least one policy is required".into()));
    }
    let (stream, layout, source) = load_input(genconfig, seed, policy_args.registers)?;
    let plan = load_plan(plan_path)?;
    let weights = load_weights(policy_args.weights_file.as_deref())?;
    // Validate every name before running anything.
    let configs: Vec<PolicyConfig> = policies
        .iter()
        .map(|name| resolve_policy(name, policy_args, &layout))
        .collect::<Result<_, _>>()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let mut reports = Vec::new();
    for (name, policy) in policies.iter().zip(&configs) {
        let report = run_to_report(
            &stream,
            RunConfigEcho {
                policy: *policy,
                weights,
                layout,
                stream: source.clone(),
                seed,
            },
            &plan,
            1,
        )?;
        write_json(&out_dir.join(format!("report_{name}.json")), &report)?;
        reports.push((name.clone(), report));
    }

    let table_path = out_dir.join("compare.csv");
    let mut writer = create(&table_path)?;
    writeln!(
        writer,
        "policy,pose_dispersion,depth_variance_mass,confidence_mass,special_survival,final_retained_tokens"
    )
    .map_err(|e| CliError::io(&table_path, e))?;
    for (name, report) in &reports {
        let s = &report.coverage.reference;
        writeln!(
            writer,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            name,
            s.pose_dispersion,
            s.retained_depth_variance_mass,
            s.retained_confidence_mass,
            s.special_survival_rate,
            report.final_retained_tokens
        )
        .map_err(|e| CliError::io(&table_path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(&table_path, e))?;

    // Per-step plot data: total occupancy plus the reference layer's
    // dispersion, one row per (policy, step).
    let plot_path = out_dir.join("plotdata.csv");
    let mut writer = create(&plot_path)?;
    writeln!(writer, "policy,t,occupancy_pre,occupancy_post,dispersion")
        .map_err(|e| CliError::io(&plot_path, e))?;
    for (name, report) in &reports {
        for (i, step) in report.steps.iter().enumerate() {
            let pre: usize = step.occupancy_pre_append.iter().sum();
            let post: usize = step.occupancy_post_append.iter().sum();
            writeln!(
                writer,
                "{},{},{},{},{:.6}",
                name, step.t, pre, post, report.coverage.reference_dispersion_series[i]
            )
            .map_err(|e| CliError::io(&plot_path, e))?;
        }
    }
    writer.flush().map_err(|e| CliError::io(&plot_path, e))?;
    info!("compared {} policies over {} frames", reports.len(), stream.len());
    Ok(())
}
