//! CLI acceptance: repeated runs with identical inputs produce byte-identical
//! reports once timing fields are masked, and every report validates against
//! the schema shipped in the repo.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ghost_core::report::RunReport;
use ghost_core::simgen::{DepthTexture, Motion, StreamDims, TrajectoryConfig, generate_stream};
use ghost_core::trace::write_frame_trace;

fn ghost_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ghost"))
}

fn criterion(name: &str, body: impl FnOnce() -> Result<String, String>) {
    match body() {
        Ok(detail) => println!("[acceptance] {name}: PASS ({detail})"),
        Err(msg) => {
            println!("[acceptance] {name}: FAIL ({msg})");
            panic!("{name} failed: {msg}");
        }
    }
}

fn gen_config() -> TrajectoryConfig {
    TrajectoryConfig {
        length: 25,
        motion: Motion::LoiterThenMove {
            loiter_span: 8,
            step: 0.5,
        },
        depth_texture: DepthTexture::Mixed,
        noise_seed: 5,
        dims: StreamDims {
            h: 8,
            w: 8,
            hp: 4,
            wp: 4,
            channels: 2,
        },
        registers: 2,
        key_dim: 8,
        conf_floor: 0.4,
        conf_ceil: 0.95,
    }
}

fn write_plan(dir: &Path, budgets: &[usize]) -> PathBuf {
    let path = dir.join("plan.json");
    let plan = serde_json::json!({
        "total": budgets.iter().sum::<usize>(),
        "tau": null,
        "floor": 0,
        "budgets": budgets,
    });
    fs::write(&path, serde_json::to_string_pretty(&plan).unwrap()).unwrap();
    path
}

fn masked_bytes(path: &Path) -> Result<String, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut report = RunReport::from_json(&text).map_err(|e| e.to_string())?;
    report.mask_timings();
    Ok(report.to_json())
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let output = ghost_bin().args(args).output().map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!(
            "ghost {:?} failed: {}",
            args,
            String::from_utf8_lossy(&output.stderr)
        ));
    }
    Ok(())
}

fn validate_against_schema(report_path: &Path) -> Result<(), String> {
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../schemas/report.schema.json");
    let schema: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&schema_path).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let instance: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_path).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let errors: Vec<String> = validator
        .iter_errors(&instance)
        .map(|e| format!("{}: {}", e.instance_path, e))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(format!(
            "{} schema violations: {}",
            errors.len(),
            errors.join("; ")
        ))
    }
}

/// C9: repeated `run` invocations with identical inputs produce byte-identical
/// reports with timing fields masked, over both input kinds and two policies.
#[test]
fn c9_run_determinism() {
    criterion("C9 run-determinism", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = dir.path();

        let config = gen_config();
        let gen_path = dir.join("gen.json");
        fs::write(&gen_path, serde_json::to_string_pretty(&config).unwrap())
            .map_err(|e| e.to_string())?;

        let stream = generate_stream(&config).map_err(|e| e.to_string())?;
        let trace_path = dir.join("stream.jsonl");
        let mut buffer = Vec::new();
        write_frame_trace(&mut buffer, &stream).map_err(|e| e.to_string())?;
        fs::write(&trace_path, buffer).map_err(|e| e.to_string())?;

        let n = config.layout().tokens_per_frame();
        let plan_path = write_plan(dir, &[6 * n, 6 * n]);

        let mut checked = 0;
        for (input, policy, extra) in [
            (&gen_path, "ghost", vec![]),
            (&gen_path, "sink_recent", vec!["--window", "2"]),
            (&trace_path, "ghost", vec!["--registers", "2"]),
            (
                &trace_path,
                "key_similarity",
                vec!["--registers", "2", "--direction", "retain_most_similar"],
            ),
        ] {
            let out_a = dir.join(format!("a_{policy}.json"));
            let out_b = dir.join(format!("b_{policy}.json"));
            for out in [&out_a, &out_b] {
                let mut args: Vec<&str> = vec![
                    input.to_str().unwrap(),
                    plan_path.to_str().unwrap(),
                    out.to_str().unwrap(),
                    "--policy",
                    policy,
                ];
                args.extend(extra.iter());
                let mut full = vec!["run"];
                full.extend(args);
                run_ok(&full)?;
            }
            let a = masked_bytes(&out_a)?;
            let b = masked_bytes(&out_b)?;
            if a != b {
                return Err(format!("{policy}: reports differ after timing mask"));
            }
            validate_against_schema(&out_a)?;
            checked += 1;
        }
        Ok(format!(
            "{checked} input/policy combinations byte-identical and schema-valid"
        ))
    });
}
