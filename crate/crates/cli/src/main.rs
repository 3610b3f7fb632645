use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use ovlift::backends::{serve, FixtureStore};
use ovlift::config::{PipelineConfig, ValueKind, KEYS};
use ovlift::pipeline::{export_ply, run_eval, run_pipeline, write_metrics};
use ovlift::synthbench::{export_scene, generate_scene, SceneSpec};

const WORKERS_ENV: &str = "OVLIFT_WORKERS";

/// `superpoint.k_nn` -> `superpoint-k-nn`
fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

fn cli() -> Command {
    let mut run = Command::new("run")
        .about("Segment and label the instances of a scene")
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_parser(value_parser!(PathBuf))
                .help("TOML config file with flat dotted keys"),
        );
    for (key, kind, help) in KEYS {
        let name = flag_name(key);
        let arg = Arg::new(name.clone()).long(name).help(*help);
        run = run.arg(match kind {
            ValueKind::Bool => arg.action(ArgAction::SetTrue),
            _ => arg.value_name("VALUE"),
        });
    }
    Command::new("ovlift")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Training-free open-vocabulary 3D instance segmentation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(run)
        .subcommand(
            Command::new("eval")
                .about("Score a run against the scene's ground truth")
                .arg(path_arg("pred", true, "run output directory"))
                .arg(path_arg("scene", true, "scene directory with ground truth"))
                .arg(path_arg("groups", false, "JSON object mapping label to group"))
                .arg(path_arg("out", false, "where to write metrics (default: --pred)")),
        )
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic scene in the on-disk scene layout")
                .arg(path_arg("spec", false, "scene spec JSON (default: built-in demo)"))
                .arg(path_arg("out", true, "scene directory to create"))
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(value_parser!(u64)),
                )
                .arg(
                    Arg::new("objects")
                        .long("objects")
                        .default_value("4")
                        .value_parser(value_parser!(usize))
                        .help("demo scene: number of objects (1-5)"),
                )
                .arg(
                    Arg::new("points")
                        .long("points")
                        .default_value("50000")
                        .value_parser(value_parser!(usize))
                        .help("demo scene: total points"),
                ),
        )
        .subcommand(
            Command::new("export-ply")
                .about("Write the scene colored by predicted instance")
                .arg(path_arg("scene", true, "scene directory"))
                .arg(path_arg("pred", true, "run output directory"))
                .arg(path_arg("out", true, "PLY file to write"))
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .default_value("0")
                        .value_parser(value_parser!(u64)),
                ),
        )
        .subcommand(
            Command::new("serve-fixture")
                .about("Answer the backend line protocol on stdin/stdout from a fixture")
                .arg(path_arg("fixture", true, "fixture directory")),
        )
}

fn path_arg(name: &'static str, required: bool, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .required(required)
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Applies a TOML file; relative paths resolve against the file's directory.
fn apply_file(config: &mut PipelineConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    flatten("", &table, &mut entries);
    for (key, value) in entries {
        let kind = KEYS
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, kind, _)| *kind)
            .with_context(|| format!("{}: unknown key {key:?}", path.display()))?;
        let text = match value {
            toml::Value::String(s) if kind == ValueKind::Path => {
                base.join(s).to_string_lossy().into_owned()
            }
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => bail!("{}: {key} has unsupported value {other}", path.display()),
        };
        config
            .set(&key, &text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    Ok(())
}

/// Defaults, then the config file, then `OVLIFT_WORKERS`, then flags.
fn build_config(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        apply_file(&mut config, path)?;
    }
    if let Ok(w) = std::env::var(WORKERS_ENV) {
        config
            .set("workers", &w)
            .with_context(|| format!("from {WORKERS_ENV}"))?;
    }
    for (key, kind, _) in KEYS {
        let name = flag_name(key);
        if *kind == ValueKind::Bool {
            if m.get_flag(&name) {
                config.set(key, "true")?;
            }
        } else if let Some(v) = m.get_one::<String>(&name) {
            config.set(key, v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn cmd_run(m: &ArgMatches) -> Result<()> {
    let config = build_config(m)?;
    let summary = run_pipeline(&config)?;
    for w in &summary.warnings {
        log::warn!("{w}");
    }
    println!(
        "{} instances ({} labeled) from {} prompts over {} frames; {} segmentations skipped",
        summary.instances,
        summary.labeled_instances,
        summary.prompts,
        summary.frames_used,
        summary.skipped_segmentations
    );
    println!("outputs in {}", config.output.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let pred = m.get_one::<PathBuf>("pred").expect("required");
    let scene = m.get_one::<PathBuf>("scene").expect("required");
    let report = run_eval(pred, scene, m.get_one::<PathBuf>("groups").map(PathBuf::as_path))?;
    let out = m.get_one::<PathBuf>("out").unwrap_or(pred);
    std::fs::create_dir_all(out)?;
    write_metrics(out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let spec = match m.get_one::<PathBuf>("spec") {
        Some(p) => SceneSpec::from_json_file(p)?,
        None => SceneSpec::demo(
            *m.get_one::<usize>("objects").expect("default"),
            *m.get_one::<usize>("points").expect("default"),
        ),
    };
    let out = m.get_one::<PathBuf>("out").expect("required");
    let seed = *m.get_one::<u64>("seed").expect("default");
    let (scene, gt) = generate_scene(&spec, seed)?;
    export_scene(out, &scene, &gt)?;
    let spec_path = out.join("synth_spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec)? + "\n")
        .with_context(|| format!("writing {}", spec_path.display()))?;
    println!(
        "{} points, {} instances, {} frames written to {}",
        scene.points.len(),
        gt.labels.len(),
        scene.frames.len(),
        out.display()
    );
    Ok(())
}

fn cmd_export_ply(m: &ArgMatches) -> Result<()> {
    export_ply(
        m.get_one::<PathBuf>("scene").expect("required"),
        m.get_one::<PathBuf>("pred").expect("required"),
        m.get_one::<PathBuf>("out").expect("required"),
        *m.get_one::<u64>("seed").expect("default"),
    )?;
    Ok(())
}

fn cmd_serve_fixture(m: &ArgMatches) -> Result<()> {
    let store = FixtureStore::open(m.get_one::<PathBuf>("fixture").expect("required"))?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    serve(&store, stdin, stdout)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("run", m)) => cmd_run(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("synth", m)) => cmd_synth(m),
        Some(("export-ply", m)) => cmd_export_ply(m),
        Some(("serve-fixture", m)) => cmd_serve_fixture(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
