use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semsplat"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "semsplat {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

/// Validates against the JSON Schema keywords used by the shipped schemas.
fn validate(value: &Value, schema: &Value, at: &str) -> Result<(), String> {
    let obj = match schema {
        Value::Bool(true) => return Ok(()),
        Value::Bool(false) => return Err(format!("{at}: not allowed")),
        Value::Object(o) => o,
        _ => return Err(format!("{at}: bad schema")),
    };
    if let Some(r) = obj.get("$ref").and_then(Value::as_str) {
        validate(value, &read_json(schema_dir().join(r)), at)?;
    }
    if let Some(t) = obj.get("type") {
        let types: Vec<&str> = match t {
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            other => vec![other.as_str().unwrap()],
        };
        let matches = |t: &str| match t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            "number" => value.is_number(),
            "integer" => value.is_i64() || value.is_u64() || value.as_f64().is_some_and(|f| f.fract() == 0.0),
            _ => false,
        };
        if !types.iter().any(|t| matches(t)) {
            return Err(format!("{at}: expected {types:?}, got {value}"));
        }
    }
    if let Some(e) = obj.get("enum").and_then(Value::as_array) {
        if !e.contains(value) {
            return Err(format!("{at}: {value} not in {e:?}"));
        }
    }
    if let Some(alts) = obj.get("oneOf").and_then(Value::as_array) {
        let n = alts.iter().filter(|s| validate(value, s, at).is_ok()).count();
        if n != 1 {
            return Err(format!("{at}: {n} oneOf branches match"));
        }
    }
    if let Some(x) = value.as_f64() {
        let bound = |k: &str| obj.get(k).and_then(Value::as_f64);
        if bound("minimum").is_some_and(|m| x < m)
            || bound("maximum").is_some_and(|m| x > m)
            || bound("exclusiveMinimum").is_some_and(|m| x <= m)
            || bound("exclusiveMaximum").is_some_and(|m| x >= m)
        {
            return Err(format!("{at}: {x} out of range"));
        }
    }
    if let Some(items) = value.as_array() {
        if let Some(m) = obj.get("minItems").and_then(Value::as_u64) {
            if (items.len() as u64) < m {
                return Err(format!("{at}: fewer than {m} items"));
            }
        }
        if let Some(s) = obj.get("items") {
            for (i, item) in items.iter().enumerate() {
                validate(item, s, &format!("{at}[{i}]"))?;
            }
        }
    }
    if let Some(map) = value.as_object() {
        for key in obj.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = key.as_str().unwrap();
            if !map.contains_key(key) {
                return Err(format!("{at}: missing {key}"));
            }
        }
        let props = obj.get("properties").and_then(Value::as_object);
        for (k, v) in map {
            let path = format!("{at}.{k}");
            match props.and_then(|p| p.get(k)) {
                Some(s) => validate(v, s, &path)?,
                None => {
                    if let Some(extra) = obj.get("additionalProperties") {
                        validate(v, extra, &path)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_schema(value: &Value, schema: &str) {
    let schema = read_json(schema_dir().join(schema));
    if let Err(e) = validate(value, &schema, "$") {
        panic!("{e}\n{value:#}");
    }
}

fn synth(dir: &Path, spec: &str, out: &str) {
    std::fs::write(dir.join("spec.json"), spec).unwrap();
    ok(dir, &["synth", "spec.json", "--out", out]);
}

#[test]
fn outputs_match_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, r#"{"gaussians": 6, "cameras": 2, "resolution": 16}"#, "gt");
    check_schema(&read_json(d.join("gt/bundle.json")), "bundle_manifest.schema.json");

    ok(d, &["--seed", "3", "fit", "gt", "--perturb", "0.1", "--iterations", "4", "--out", "fit"]);
    let trace = read_json(d.join("fit/trace.json"));
    check_schema(&trace, "fit_trace.schema.json");
    assert_eq!(trace["trace"].as_array().unwrap().len(), 4);

    ok(d, &["render", "--bundle", "gt", "--scene", "fit/scene.sgs", "--codec", "fit/codec.json", "--out", "pred"]);
    check_schema(&read_json(d.join("pred/bundle.json")), "bundle_manifest.schema.json");

    let eval = ok(d, &["eval", "--pred", "pred", "--gt", "gt", "--prototypes", "gt/prototypes.json", "--out", "eval.json"]);
    let stdout: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(stdout, read_json(d.join("eval.json")));
    check_schema(&stdout, "metric_report.schema.json");
    assert!(stdout["psnr"].is_number());

    let same = ok(d, &["eval", "--pred", "gt", "--gt", "gt", "--prototypes", "gt/prototypes.json"]);
    let same: Value = serde_json::from_slice(&same.stdout).unwrap();
    check_schema(&same, "metric_report.schema.json");
    assert_eq!(same["psnr"], "inf");
    assert_eq!(same["miou"], 1.0);

    let losses = ok(d, &["losses", "--pred", "pred", "--gt", "gt"]);
    let losses: Value = serde_json::from_slice(&losses.stdout).unwrap();
    check_schema(&losses, "loss_report.schema.json");
    assert!(losses["l_total"].as_f64().unwrap() > 0.0);
}

#[test]
fn validator_rejects_malformed_reports() {
    let bad = [
        serde_json::json!({"per_class_iou": {}, "ssim": 1.5}),
        serde_json::json!({"per_class_iou": {"wall": -0.1}}),
        serde_json::json!({"per_class_iou": {}, "psnr": "nan"}),
        serde_json::json!({"per_class_iou": {}, "extra": 1}),
        serde_json::json!({}),
    ];
    let schema = read_json(schema_dir().join("metric_report.schema.json"));
    for v in bad {
        assert!(validate(&v, &schema, "$").is_err(), "{v}");
    }
}

fn error_line(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

#[test]
fn empty_spec_reports_usage() {
    let tmp = tempfile::tempdir().unwrap();
    for spec in ["", "{}", "null"] {
        std::fs::write(tmp.path().join("s.json"), spec).unwrap();
        let err = error_line(&run(tmp.path(), &["synth", "s.json", "--out", "x"]));
        assert_eq!(err["error"]["kind"], "invalid_config");
        assert!(err["error"]["message"].as_str().unwrap().contains("required fields"));
    }
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn truncated_scene_names_file_and_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, r#"{"gaussians": 3, "cameras": 1, "resolution": 16}"#, "gt");
    let bytes = std::fs::read(d.join("gt/scene.sgs")).unwrap();
    std::fs::write(d.join("cut.sgs"), &bytes[..100]).unwrap();
    let err = error_line(&run(d, &["render", "--bundle", "gt", "--scene", "cut.sgs", "--out", "o"]));
    assert_eq!(err["error"]["kind"], "format");
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("cut.sgs") && msg.contains("100"), "{msg}");
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = error_line(&run(tmp.path(), &["losses", "--pred", "nope", "--gt", "nope"]));
    assert!(err["error"]["kind"].is_string());
    assert!(err["error"]["message"].as_str().unwrap().contains("nope"));
}

#[test]
fn invalid_weights_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, r#"{"gaussians": 3, "cameras": 1, "resolution": 16}"#, "gt");
    let err = error_line(&run(d, &["--conf-ratio", "0", "losses", "--pred", "gt", "--gt", "gt"]));
    assert_eq!(err["error"]["kind"], "invalid_config");
}

#[test]
fn res_override_rescales_camera_render() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, r#"{"gaussians": 3, "cameras": 1, "resolution": 16}"#, "gt");
    ok(d, &["--res", "24", "render", "--scene", "gt/scene.sgs", "--camera", "gt/view_000/camera.json", "--codec", "gt/codec.json", "--out", "r"]);
    let ppm = std::fs::read(d.join("r/color.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n24 24\n255\n"), "{:?}", &ppm[..16]);
}

#[test]
fn synth_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("s.json"), r#"{"gaussians": 5, "cameras": 2, "resolution": 16}"#).unwrap();
    ok(d, &["--seed", "1", "synth", "s.json", "--out", "a"]);
    ok(d, &["--seed", "1", "synth", "s.json", "--out", "b"]);
    ok(d, &["--seed", "2", "synth", "s.json", "--out", "c"]);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/scene.sgs"), read("b/scene.sgs"));
    assert_eq!(read("a/view_001/color.fmap"), read("b/view_001/color.fmap"));
    assert_ne!(read("a/scene.sgs"), read("c/scene.sgs"));
}
