//! On-disk formats: frame traces and activation traces as JSON Lines with
//! base64-packed little-endian `f32` blocks (bit-exact round trips), the
//! per-layer profile CSV, and the budget plan JSON.

use std::io::{BufRead, Write};

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{BudgetPlan, LayerProfile};
use crate::domain::{
    Appearance, CoreError, FeatureGrid, FrameMeta, Grid, KeyBlock, Pose, validate_frame,
};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid base64 in {field}: {msg}")]
    Base64 {
        line: usize,
        field: &'static str,
        msg: String,
    },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: CoreError,
    },
    #[error("line {line}: frame must carry exactly one of saliency or features")]
    AppearanceConflict { line: usize },
    #[error("profile csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Packs `f32` values as base64 over raw little-endian bytes.
pub fn encode_f32s(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

/// Inverse of [`encode_f32s`]; bit-exact.
pub fn decode_f32s(data: &str) -> Result<Vec<f32>, String> {
    let bytes = B64.decode(data).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("byte length {} is not a multiple of 4", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ── Frame trace ─────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "T")]
    t: [f64; 3],
    q: [f64; 4],
    f: f64,
}

#[derive(Serialize, Deserialize)]
struct GridJson {
    h: usize,
    w: usize,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct FeaturesJson {
    h: usize,
    w: usize,
    d: usize,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct KeysJson {
    dim: usize,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    t: u64,
    pose: PoseJson,
    depth: GridJson,
    depth_conf: GridJson,
    point_conf: GridJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    saliency: Option<GridJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<FeaturesJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    keys: Option<KeysJson>,
}

fn grid_json(grid: &Grid) -> GridJson {
    GridJson {
        h: grid.rows(),
        w: grid.cols(),
        data_b64: encode_f32s(grid.data()),
    }
}

fn grid_from_json(json: &GridJson, line: usize, field: &'static str) -> Result<Grid, TraceError> {
    let data = decode_f32s(&json.data_b64).map_err(|msg| TraceError::Base64 {
        line,
        field,
        msg,
    })?;
    Grid::new(json.h, json.w, data).map_err(|source| TraceError::Invalid { line, source })
}

/// Serializes one frame as a single JSON line.
pub fn frame_to_line(frame: &FrameMeta) -> String {
    let (saliency, features) = match &frame.appearance {
        Appearance::Saliency(grid) => (Some(grid_json(grid)), None),
        Appearance::Features(grid) => (
            None,
            Some(FeaturesJson {
                h: grid.rows(),
                w: grid.cols(),
                d: grid.channels(),
                data_b64: encode_f32s(grid.data()),
            }),
        ),
    };
    let line = FrameLine {
        t: frame.frame_index,
        pose: PoseJson {
            t: frame.pose.translation(),
            q: frame.pose.quaternion(),
            f: frame.pose.focal(),
        },
        depth: grid_json(&frame.depth),
        depth_conf: grid_json(&frame.depth_conf),
        point_conf: grid_json(&frame.point_conf),
        saliency,
        features,
        keys: frame.keys.as_ref().map(|k| KeysJson {
            dim: k.dim(),
            data_b64: encode_f32s(k.data()),
        }),
    };
    serde_json::to_string(&line).expect("frame serializes")
}

/// Parses one frame line (1-based `line` for diagnostics) and validates it.
pub fn frame_from_line(text: &str, line: usize) -> Result<FrameMeta, TraceError> {
    let parsed: FrameLine = serde_json::from_str(text).map_err(|e| TraceError::Parse {
        line,
        msg: e.to_string(),
    })?;
    let appearance = match (parsed.saliency, parsed.features) {
        (Some(grid), None) => {
            Appearance::Saliency(grid_from_json(&grid, line, "saliency")?)
        }
        (None, Some(f)) => {
            let data = decode_f32s(&f.data_b64).map_err(|msg| TraceError::Base64 {
                line,
                field: "features",
                msg,
            })?;
            Appearance::Features(
                FeatureGrid::new(f.h, f.w, f.d, data)
                    .map_err(|source| TraceError::Invalid { line, source })?,
            )
        }
        _ => return Err(TraceError::AppearanceConflict { line }),
    };
    let keys = parsed
        .keys
        .map(|k| -> Result<KeyBlock, TraceError> {
            let data = decode_f32s(&k.data_b64).map_err(|msg| TraceError::Base64 {
                line,
                field: "keys",
                msg,
            })?;
            KeyBlock::new(k.dim, data).map_err(|source| TraceError::Invalid { line, source })
        })
        .transpose()?;
    let meta = FrameMeta {
        frame_index: parsed.t,
        pose: Pose::new(parsed.pose.t, parsed.pose.q, parsed.pose.f)
            .map_err(|source| TraceError::Invalid { line, source })?,
        depth: grid_from_json(&parsed.depth, line, "depth")?,
        depth_conf: grid_from_json(&parsed.depth_conf, line, "depth_conf")?,
        point_conf: grid_from_json(&parsed.point_conf, line, "point_conf")?,
        appearance,
        keys,
    };
    validate_frame(meta).map_err(|source| TraceError::Invalid { line, source })
}

pub fn write_frame_trace(mut out: impl Write, stream: &[FrameMeta]) -> Result<(), TraceError> {
    for frame in stream {
        writeln!(out, "{}", frame_to_line(frame))?;
    }
    Ok(())
}

pub fn read_frame_trace(input: impl BufRead) -> Result<Vec<FrameMeta>, TraceError> {
    let mut frames = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        frames.push(frame_from_line(&line, i + 1)?);
    }
    Ok(frames)
}

// ── Activation trace ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ActivationLine {
    layer: usize,
    sample: usize,
    x_b64: String,
    y_b64: String,
}

/// Per-layer activation pairs, flattened row-major.
pub type ActivationPairs = Vec<(Vec<f64>, Vec<f64>)>;

/// One recorded activation pair.
pub struct ActivationSample {
    pub layer: usize,
    pub sample: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn write_activation_trace(
    mut out: impl Write,
    samples: &[(usize, usize, Vec<f32>, Vec<f32>)],
) -> Result<(), TraceError> {
    for (layer, sample, x, y) in samples {
        let line = ActivationLine {
            layer: *layer,
            sample: *sample,
            x_b64: encode_f32s(x),
            y_b64: encode_f32s(y),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("line serializes"))?;
    }
    Ok(())
}

/// Reads an activation trace and groups pairs per layer: index `l` of the
/// result holds layer `l`'s samples sorted by sample id. Layers must cover
/// `0..L-1` with at least one sample each.
pub fn read_activation_trace(
    input: impl BufRead,
) -> Result<Vec<ActivationPairs>, TraceError> {
    let mut samples: Vec<ActivationSample> = Vec::new();
    let mut max_layer = 0usize;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ActivationLine =
            serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let decode = |field: &'static str, data: &str| {
            decode_f32s(data).map_err(|msg| TraceError::Base64 {
                line: i + 1,
                field,
                msg,
            })
        };
        let x = decode("x_b64", &parsed.x_b64)?;
        let y = decode("y_b64", &parsed.y_b64)?;
        max_layer = max_layer.max(parsed.layer);
        samples.push(ActivationSample {
            layer: parsed.layer,
            sample: parsed.sample,
            x: x.into_iter().map(f64::from).collect(),
            y: y.into_iter().map(f64::from).collect(),
        });
    }
    if samples.is_empty() {
        return Err(TraceError::Parse {
            line: 0,
            msg: "activation trace is empty".into(),
        });
    }
    type Tagged = Vec<(usize, Vec<f64>, Vec<f64>)>;
    let mut grouped: Vec<Tagged> = vec![Vec::new(); max_layer + 1];
    for s in samples {
        grouped[s.layer].push((s.sample, s.x, s.y));
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (layer, mut pairs) in grouped.into_iter().enumerate() {
        if pairs.is_empty() {
            return Err(TraceError::Parse {
                line: 0,
                msg: format!("layer {layer} has no samples"),
            });
        }
        pairs.sort_by_key(|&(sample, _, _)| sample);
        out.push(pairs.into_iter().map(|(_, x, y)| (x, y)).collect());
    }
    Ok(out)
}

// ── Profile CSV ─────────────────────────────────────────────────────────────

/// Writes `layer,rho_bar,samples` rows with nine-digit values.
pub fn write_profile_csv(mut out: impl Write, profile: &LayerProfile) -> Result<(), TraceError> {
    writeln!(out, "layer,rho_bar,samples")?;
    for (layer, (rho, samples)) in profile
        .rho_bar()
        .iter()
        .zip(profile.sample_count())
        .enumerate()
    {
        writeln!(out, "{layer},{rho:.9},{samples}")?;
    }
    Ok(())
}

pub fn read_profile_csv(input: impl BufRead) -> Result<LayerProfile, TraceError> {
    let mut rho = Vec::new();
    let mut counts = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 {
            if trimmed != "layer,rho_bar,samples" {
                return Err(TraceError::Csv {
                    line: 1,
                    msg: format!("expected header layer,rho_bar,samples, got {trimmed:?}"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 3 {
            return Err(TraceError::Csv {
                line: i + 1,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let layer: usize = fields[0].parse().map_err(|e| TraceError::Csv {
            line: i + 1,
            msg: format!("bad layer index: {e}"),
        })?;
        if layer != rho.len() {
            return Err(TraceError::Csv {
                line: i + 1,
                msg: format!("layer indices must ascend from 0, got {layer}"),
            });
        }
        rho.push(fields[1].parse::<f64>().map_err(|e| TraceError::Csv {
            line: i + 1,
            msg: format!("bad rho_bar: {e}"),
        })?);
        counts.push(fields[2].parse::<usize>().map_err(|e| TraceError::Csv {
            line: i + 1,
            msg: format!("bad sample count: {e}"),
        })?);
    }
    LayerProfile::new(rho, counts).map_err(|e| TraceError::Csv {
        line: 0,
        msg: e.to_string(),
    })
}

// ── Plan JSON ───────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PlanJson {
    total: usize,
    tau: Option<f64>,
    floor: usize,
    budgets: Vec<usize>,
}

pub fn plan_to_json(plan: &BudgetPlan) -> String {
    serde_json::to_string_pretty(&PlanJson {
        total: plan.total,
        tau: plan.temperature,
        floor: plan.floor,
        budgets: plan.budgets.clone(),
    })
    .expect("plan serializes")
}

pub fn plan_from_json(text: &str) -> Result<BudgetPlan, TraceError> {
    let parsed: PlanJson = serde_json::from_str(text).map_err(|e| TraceError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let plan = BudgetPlan {
        budgets: parsed.budgets,
        total: parsed.total,
        temperature: parsed.tau,
        floor: parsed.floor,
    };
    plan.validate().map_err(|e| TraceError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{DepthTexture, Motion, StreamDims, TrajectoryConfig, generate_stream};

    #[test]
    fn f32_block_roundtrip_is_bit_exact() {
        let values = vec![
            0.0f32,
            -0.0,
            1.5,
            f32::MIN_POSITIVE,
            f32::MAX,
            -std::f32::consts::PI,
            1e-38,
        ];
        let encoded = encode_f32s(&values);
        let decoded = decode_f32s(&encoded).unwrap();
        assert_eq!(values.len(), decoded.len());
        for (a, b) in values.iter().zip(&decoded) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(decode_f32s("AAA").is_err());
    }

    #[test]
    fn frame_trace_roundtrip() {
        let cfg = TrajectoryConfig {
            length: 5,
            motion: Motion::Orbit {
                radius: 2.0,
                step: 0.3,
            },
            depth_texture: DepthTexture::Blobs,
            noise_seed: 99,
            dims: StreamDims {
                h: 6,
                w: 7,
                hp: 3,
                wp: 3,
                channels: 2,
            },
            registers: 2,
            key_dim: 4,
            conf_floor: 0.4,
            conf_ceil: 0.95,
        };
        let stream = generate_stream(&cfg).unwrap();
        let mut buffer = Vec::new();
        write_frame_trace(&mut buffer, &stream).unwrap();
        let parsed = read_frame_trace(&buffer[..]).unwrap();
        assert_eq!(stream, parsed);
    }

    #[test]
    fn frame_line_errors_carry_line_numbers() {
        let err = frame_from_line("{not json", 7).unwrap_err();
        assert!(err.to_string().starts_with("line 7:"));

        // Conflicting appearance.
        let mut ok_line = frame_to_line(
            &generate_stream(&TrajectoryConfig {
                length: 2,
                motion: Motion::Corridor { step: 0.1 },
                depth_texture: DepthTexture::Flat,
                noise_seed: 1,
                dims: StreamDims::default(),
                registers: 1,
                key_dim: 0,
                conf_floor: 0.5,
                conf_ceil: 0.9,
            })
            .unwrap()[0],
        );
        ok_line.insert_str(
            ok_line.len() - 1,
            &format!(",\"saliency\":{{\"h\":4,\"w\":4,\"data_b64\":\"{}\"}}", encode_f32s(&[0.0; 16])),
        );
        assert!(matches!(
            frame_from_line(&ok_line, 3),
            Err(TraceError::AppearanceConflict { line: 3 })
        ));
    }

    #[test]
    fn activation_trace_roundtrip_and_grouping() {
        let samples = vec![
            (1usize, 0usize, vec![1.0f32, 2.0], vec![1.0f32, 2.0]),
            (0, 1, vec![0.5, 0.5], vec![0.5, -0.5]),
            (0, 0, vec![1.0, 0.0], vec![0.0, 1.0]),
        ];
        let mut buffer = Vec::new();
        write_activation_trace(&mut buffer, &samples).unwrap();
        let grouped = read_activation_trace(&buffer[..]).unwrap();
        assert_eq!(grouped.len(), 2);
        assert_eq!(grouped[0].len(), 2);
        // Sorted by sample id within the layer.
        assert_eq!(grouped[0][0].0, vec![1.0, 0.0]);
        assert_eq!(grouped[1].len(), 1);

        // A gap in layer coverage is an error.
        let gappy = vec![(0usize, 0usize, vec![1.0f32], vec![1.0f32]), (
            2,
            0,
            vec![1.0],
            vec![1.0],
        )];
        let mut buffer = Vec::new();
        write_activation_trace(&mut buffer, &gappy).unwrap();
        assert!(read_activation_trace(&buffer[..]).is_err());
    }

    #[test]
    fn profile_csv_roundtrip_and_format() {
        let profile = LayerProfile::new(vec![1.0, 0.61, -0.25], vec![13, 13, 13]).unwrap();
        let mut buffer = Vec::new();
        write_profile_csv(&mut buffer, &profile).unwrap();
        let text = String::from_utf8(buffer.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "layer,rho_bar,samples");
        assert_eq!(lines.next().unwrap(), "0,1.000000000,13");
        assert_eq!(lines.next().unwrap(), "1,0.610000000,13");
        assert_eq!(lines.next().unwrap(), "2,-0.250000000,13");

        let parsed = read_profile_csv(&buffer[..]).unwrap();
        assert_eq!(parsed.sample_count(), profile.sample_count());
        for (a, b) in parsed.rho_bar().iter().zip(profile.rho_bar()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn plan_json_roundtrip() {
        let plan = BudgetPlan {
            budgets: vec![5, 3, 2],
            total: 10,
            temperature: Some(0.5),
            floor: 1,
        };
        let text = plan_to_json(&plan);
        assert!(text.contains("\"tau\": 0.5"));
        let parsed = plan_from_json(&text).unwrap();
        assert_eq!(plan, parsed);

        // Conservation is validated on read.
        let bad = text.replace("\"total\": 10", "\"total\": 11");
        assert!(plan_from_json(&bad).is_err());
    }
}
