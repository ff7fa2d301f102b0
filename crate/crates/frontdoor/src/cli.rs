//! Command line interface.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use semcolor_core::correspondence::MatchMode;
use semcolor_core::fusion::FillPolicy;
use semcolor_core::pipeline::{
    prepare, segment_image, Inputs, PipelineConfig, Source, ARTIFACT_NAMES,
};
use semcolor_core::segmentation::RemapSpec;
use semcolor_core::tensor_io::{read_image, save_tensor, write_png};
use semcolor_core::Error;

use crate::bench::{render_table, run_bench};

#[derive(Debug, Parser)]
#[command(
    name = "semcolor",
    version,
    about = "Exemplar-based colorization with class-partitioned matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Colorize a grayscale target from a color reference.
    Colorize(ColorizeArgs),
    /// Sweep the reduced class count and report matching cost per k.
    Bench(BenchArgs),
    /// Cluster a single image and write its class map.
    Segment(SegmentArgs),
    /// Run the local session service used by the editor.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Reduced class count.
    #[arg(long, default_value_t = 22)]
    pub k: usize,
    /// Initial class count before reduction.
    #[arg(long = "classes-n", default_value_t = 27)]
    pub classes_n: usize,
    /// Softmax temperature.
    #[arg(long, default_value_t = 0.01)]
    pub tau: f32,
    /// Pixels per feature cell side.
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fill for target regions without a matching reference class.
    #[arg(long, default_value = "propagate")]
    pub fill: FillPolicy,
    /// `builtin` or `<target.sptn>,<reference.sptn>` with [H, W, D] f32 features.
    #[arg(long, default_value = "builtin")]
    pub features: String,
    /// `<target.sptn>,<reference.sptn>` with [H, W] i32 labels; skips clustering.
    #[arg(long)]
    pub classmaps: Option<String>,
    /// Label overrides: a JSON file path or an inline JSON object.
    #[arg(long)]
    pub remap: Option<String>,
    /// Match against the whole reference instead of within classes.
    #[arg(long)]
    pub global: bool,
}

#[derive(Debug, Args)]
pub struct ColorizeArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for SPTN grid dumps and metadata.json.
    #[arg(long = "dump-dir")]
    pub dump_dir: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(
        long = "k-list",
        value_delimiter = ',',
        default_value = "1,4,7,10,15,20,22,27"
    )]
    pub k_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// JSON report path; a plain-text table is written next to it with a .txt extension.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out-labels")]
    pub out_labels: PathBuf,
    #[arg(long, default_value_t = 22)]
    pub k: usize,
    #[arg(long = "classes-n", default_value_t = 27)]
    pub classes_n: usize,
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Required to bind to a non-loopback address.
    #[arg(long = "allow-external")]
    pub allow_external: bool,
    /// Directory of static editor assets served at `/`.
    #[arg(long = "static-dir")]
    pub static_dir: Option<PathBuf>,
    #[arg(long = "max-sessions", default_value_t = 16)]
    pub max_sessions: usize,
}

/// A failed command and the exit status it maps to.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("cannot read input: {0:#}")]
    Input(anyhow::Error),
    #[error("invalid configuration: {0:#}")]
    Config(anyhow::Error),
    #[error("pipeline failed: {0:#}")]
    Pipeline(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Config(_) => 3,
            Failure::Pipeline(_) => 4,
        }
    }
}

fn input(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Input(e.into())
}

fn config(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn pipeline(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Pipeline(e.into())
}

fn split_pair(flag: &str, value: &str) -> Result<Source, Failure> {
    match value.split_once(',') {
        Some((t, r)) if !t.is_empty() && !r.is_empty() => Ok(Source::Files {
            target: PathBuf::from(t),
            reference: PathBuf::from(r),
        }),
        _ => Err(config(anyhow::anyhow!(
            "--{flag} expects <target>,<reference>, got {value:?}"
        ))),
    }
}

fn read_remap(value: &str) -> Result<RemapSpec, Failure> {
    let text = if value.trim_start().starts_with('{') {
        value.to_string()
    } else {
        fs::read_to_string(value)
            .map_err(|e| input(anyhow::Error::new(e).context(value.to_string())))?
    };
    serde_json::from_str(&text).map_err(|e| config(anyhow::Error::new(e).context("remap JSON")))
}

impl PipelineArgs {
    pub fn to_config(&self) -> Result<PipelineConfig, Failure> {
        let config = PipelineConfig {
            stride: self.stride,
            initial_classes: self.classes_n,
            reduced_k: self.k,
            tau: self.tau,
            seed: self.seed,
            fill: self.fill,
            matching: if self.global {
                MatchMode::Global
            } else {
                MatchMode::Spc
            },
            feature_source: match self.features.as_str() {
                "builtin" => Source::Builtin,
                other => split_pair("features", other)?,
            },
            class_source: match &self.classmaps {
                None => Source::Builtin,
                Some(v) => split_pair("classmaps", v)?,
            },
            remap: self
                .remap
                .as_deref()
                .map(read_remap)
                .transpose()?
                .unwrap_or_default(),
        };
        config.validate().map_err(config_err)?;
        Ok(config)
    }
}

fn config_err(e: Error) -> Failure {
    config(e)
}

fn load_inputs(target: &Path, reference: &Path, cfg: &PipelineConfig) -> Result<Inputs, Failure> {
    Inputs::load(target, reference, cfg).map_err(input)
}

fn write_output<T>(r: semcolor_core::Result<T>) -> Result<T, Failure> {
    r.map_err(pipeline)
}

pub fn colorize(args: &ColorizeArgs) -> Result<(), Failure> {
    let cfg = args.pipeline.to_config()?;
    let inputs = load_inputs(&args.target, &args.reference, &cfg)?;
    let prepared = prepare(&inputs, &cfg).map_err(pipeline)?;
    prepared
        .config()
        .remap
        .validate(prepared.classes())
        .map_err(config_err)?;
    let rendered = prepared.render(&cfg.remap).map_err(pipeline)?;

    write_output(write_png(&rendered.rgb, &args.out))?;
    if let Some(dir) = &args.dump_dir {
        fs::create_dir_all(dir).map_err(pipeline)?;
        for name in ARTIFACT_NAMES {
            let t = rendered.artifact(name).expect("listed artifact exists");
            write_output(save_tensor(&t, dir.join(format!("{name}.sptn"))))?;
        }
        let meta = serde_json::to_string_pretty(&prepared.metadata(&rendered)).map_err(pipeline)?;
        fs::write(dir.join("metadata.json"), meta + "\n").map_err(pipeline)?;
    }
    log::info!(
        "wrote {} ({:.1}% of cells related, fill {:?})",
        args.out.display(),
        100.0 * rendered.assembly.related_fraction,
        rendered.assembly.policy_used
    );
    Ok(())
}

pub fn bench(args: &BenchArgs) -> Result<(), Failure> {
    let cfg = args.pipeline.to_config()?;
    if cfg.class_source != Source::Builtin {
        return Err(config(anyhow::anyhow!(
            "bench clusters the inputs itself; --classmaps is not supported"
        )));
    }
    if let Some(k) = args
        .k_list
        .iter()
        .find(|&&k| k == 0 || k > cfg.initial_classes)
    {
        return Err(config(anyhow::anyhow!(
            "k = {k} outside [1, {}]",
            cfg.initial_classes
        )));
    }
    if args.repeats == 0 {
        return Err(config(anyhow::anyhow!("--repeats must be at least 1")));
    }
    let inputs = load_inputs(&args.target, &args.reference, &cfg)?;
    let prepared = prepare(&inputs, &cfg).map_err(pipeline)?;
    let report = run_bench(&prepared, &args.k_list, args.repeats).map_err(pipeline)?;
    let json = serde_json::to_string_pretty(&report).map_err(pipeline)?;
    fs::write(&args.out, json + "\n").map_err(pipeline)?;
    let table = render_table(&report);
    fs::write(args.out.with_extension("txt"), &table).map_err(pipeline)?;
    print!("{table}");
    Ok(())
}

pub fn segment(args: &SegmentArgs) -> Result<(), Failure> {
    let cfg = PipelineConfig {
        stride: args.stride,
        initial_classes: args.classes_n,
        reduced_k: args.k,
        seed: args.seed,
        ..Default::default()
    };
    cfg.validate().map_err(config_err)?;
    let img = read_image(&args.input).map_err(input)?;
    let (classes, _) = segment_image(&img, &cfg).map_err(pipeline)?;
    write_output(save_tensor(&classes.to_tensor(), &args.out_labels))
}

pub fn check_bind(args: &ServeArgs) -> Result<(), Failure> {
    if !args.addr.ip().is_loopback() && !args.allow_external {
        return Err(config(anyhow::anyhow!(
            "{} is not a loopback address; pass --allow-external to bind it",
            args.addr
        )));
    }
    if args.max_sessions == 0 {
        return Err(config(anyhow::anyhow!("--max-sessions must be at least 1")));
    }
    Ok(())
}
