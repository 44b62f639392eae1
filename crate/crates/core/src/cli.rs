//! Command-line front end.
//!
//! Every subcommand writes its outputs under `--out-dir`, refuses to replace
//! an existing output unless `--force` is given, writes a `config.json` echo
//! of all effective parameters, and prints a one-line JSON summary to stdout.
//! Failures are reported on stderr as `{"error": kind, "message": text}`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error or missing input,
//! 3 output already exists.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::json;

use crate::confidence::{self, EntropyConfig};
use crate::data::{self, ActivationSet, StepRecord};
use crate::error::{Error, Result};
use crate::geometry::{self, ChannelActivity};
use crate::io;
use crate::sae::{self, InitScheme, InputNorm, SparsityPenalty, TrainConfig};
use crate::segment::{self, KeywordTable};
use crate::steering::{self, DEFAULT_ALPHA_GRID, DEFAULT_OVERLAP_RATIO};
use crate::synth::{self, SynthConfig};

pub const CONFIG_ECHO_FILE: &str = "config.json";

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "reasonvec",
    version,
    about = "Sparse-autoencoder reasoning vectors"
)]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that relative `--out` paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Overwrite an existing output.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Split responses into steps and label them by keyword.
    Segment(SegmentArgs),
    /// Train a sparse autoencoder on an activation set.
    TrainSae(TrainSaeArgs),
    /// Top-active channels, silhouettes and 2-D coordinates per behavior.
    Analyze(AnalyzeArgs),
    /// Build a behavior steering vector and sweep its strength.
    SteerVector(SteerVectorArgs),
    /// Find entropy-reducing decoder directions through a readout head.
    DiscoverConfidence(ConfidenceArgs),
    /// Synthetic dictionary-recovery benchmark.
    SynthBench(SynthBenchArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Segment(_) => "segment",
            Command::TrainSae(_) => "train-sae",
            Command::Analyze(_) => "analyze",
            Command::SteerVector(_) => "steer-vector",
            Command::DiscoverConfidence(_) => "discover-confidence",
            Command::SynthBench(_) => "synth-bench",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SegmentArgs {
    /// JSON lines with `sample_id`, `text` and optional `response_length_tokens`.
    #[arg(long)]
    pub input: PathBuf,
    /// Keyword table JSON (default: built-in table).
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    #[arg(long, default_value = "steps.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyArg {
    /// L1 weighted by decoder row norms.
    Weighted,
    /// Plain L1.
    L1,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitArg {
    Tied,
    Independent,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainSaeArgs {
    /// Activation set directory.
    #[arg(long)]
    pub activations: PathBuf,
    /// Hidden width.
    #[arg(long = "D", visible_alias = "hidden-dim", default_value_t = 2048)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1024)]
    pub batch: usize,
    /// Total optimizer steps (overrides --epochs).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Fraction of steps spent in linear warmup.
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    #[arg(long, value_enum, default_value_t = PenaltyArg::Weighted)]
    pub penalty: PenaltyArg,
    #[arg(long, value_enum, default_value_t = InitArg::Tied)]
    pub init: InitArg,
    /// Standardize each input dimension before training.
    #[arg(long, conflicts_with = "input_scale")]
    pub standardize: bool,
    /// Multiply inputs by this factor before training.
    #[arg(long)]
    pub input_scale: Option<f64>,
    /// Save decoder rows at unit norm (encoder rescaled to match).
    #[arg(long)]
    pub unit_decoder: bool,
    #[arg(long, default_value = "sae")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SilhouetteSpace {
    /// Decoder rows of the top-active channels, labeled by behavior.
    Columns,
    /// Latent codes of the labeled steps.
    Latents,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    /// SAE checkpoint directories, one per layer.
    #[arg(long, required = true, num_args = 1..)]
    pub sae: Vec<PathBuf>,
    /// Activation set directories, paired with `--sae` in order.
    #[arg(long, required = true, num_args = 1..)]
    pub activations: Vec<PathBuf>,
    /// Behaviors to compare (default: reflection,backtracking; short,long with --length-split).
    #[arg(long, value_delimiter = ',')]
    pub behaviors: Option<Vec<String>>,
    #[arg(long, default_value_t = 32)]
    pub topk: usize,
    #[arg(long, value_enum, default_value_t = SilhouetteSpace::Columns)]
    pub space: SilhouetteSpace,
    /// Group steps by response length instead of behavior label.
    #[arg(long)]
    pub length_split: bool,
    #[arg(long, default_value_t = geometry::SHORT_MAX_TOKENS)]
    pub short_max: usize,
    #[arg(long, default_value_t = geometry::LONG_MIN_TOKENS)]
    pub long_min: usize,
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SteerVectorArgs {
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub activations: PathBuf,
    /// Behavior the vector is built for.
    #[arg(long, default_value = "reflection")]
    pub behavior: String,
    /// Behaviors whose shared channels are filtered out.
    #[arg(long, value_delimiter = ',', default_value = "reflection,backtracking")]
    pub behaviors: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub topk: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP_RATIO)]
    pub overlap: f64,
    /// Strength grid for the summary sweep.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = DEFAULT_ALPHA_GRID)]
    pub alphas: Vec<f64>,
    #[arg(long, default_value = "steering")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ConfidenceArgs {
    /// Readout head directory.
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub sae: PathBuf,
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Number of top-scoring channels combined into the confidence vector.
    #[arg(long, default_value_t = confidence::DEFAULT_TOP_K)]
    pub topk: usize,
    #[arg(long, default_value = "confidence")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthBenchArgs {
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    /// Sparsity levels to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [3])]
    pub k: Vec<usize>,
    /// Noise bounds to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.01])]
    pub noise: Vec<f64>,
    #[arg(long, default_value_t = 50_000)]
    pub n: usize,
    /// SAE width (default: m).
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub target_mu: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub alpha_max_ratio: f64,
    /// Random coefficient signs.
    #[arg(long)]
    pub signed: bool,
    /// Orthonormal dictionary (requires m <= d).
    #[arg(long)]
    pub orthogonalize: bool,
    #[arg(long, default_value_t = synth::BENCH_EPOCHS)]
    pub epochs: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 2e-3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1024)]
    pub batch: usize,
    /// Inputs are multiplied by this factor before SAE training.
    #[arg(long, default_value_t = synth::BENCH_INPUT_SCALE)]
    pub input_scale: f64,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            report_error("usage", &e.to_string());
            return 2;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            exit_code(&e)
        }
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!(
        "{}",
        json!({ "error": kind, "message": message.trim_end() })
    );
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Usage(_) | Error::MissingInput(_) => 2,
        Error::OutputExists(_) => 3,
        _ => 1,
    }
}

/// Runs the parsed command, returning its JSON summary.
pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Segment(a) => cmd_segment(cli, a),
        Command::TrainSae(a) => cmd_train_sae(cli, a),
        Command::Analyze(a) => cmd_analyze(cli, a),
        Command::SteerVector(a) => cmd_steer_vector(cli, a),
        Command::DiscoverConfidence(a) => cmd_discover_confidence(cli, a),
        Command::SynthBench(a) => cmd_synth_bench(cli, a),
    }
}

fn resolve_output(cli: &Cli, out: &Path) -> Result<PathBuf> {
    let path = if out.is_absolute() {
        out.to_path_buf()
    } else {
        cli.out_dir.join(out)
    };
    if path.exists() && !cli.force {
        return Err(Error::OutputExists(path));
    }
    Ok(path)
}

/// Prepares an output directory and writes the config echo into it.
fn output_dir<E: Serialize>(cli: &Cli, out: &Path, effective: &E) -> Result<PathBuf> {
    let dir = resolve_output(cli, out)?;
    io::ensure_dir(&dir)?;
    write_config_echo(cli, &dir.join(CONFIG_ECHO_FILE), effective)?;
    Ok(dir)
}

fn write_config_echo<E: Serialize>(cli: &Cli, path: &Path, effective: &E) -> Result<()> {
    let echo = json!({
        "command": cli.command.name(),
        "seed": cli.seed,
        "args": &cli.command,
        "effective": effective,
    });
    io::write_json(path, &echo)
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_bytes(path, text.as_bytes())
}

#[derive(Debug, serde::Deserialize)]
struct ResponseLine {
    sample_id: String,
    text: String,
    #[serde(default)]
    response_length_tokens: Option<usize>,
}

fn cmd_segment(cli: &Cli, args: &SegmentArgs) -> Result<serde_json::Value> {
    let table = match &args.keywords {
        Some(path) => KeywordTable::load(path)?,
        None => KeywordTable::default(),
    };
    let responses: Vec<ResponseLine> = io::read_jsonl(&args.input)?;
    let out = resolve_output(cli, &args.out)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        io::ensure_dir(parent)?;
    }

    let mut records = Vec::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for response in &responses {
        // Without a tokenizer, whitespace-separated words approximate the length.
        let length = response
            .response_length_tokens
            .unwrap_or_else(|| response.text.split_whitespace().count());
        for (i, step) in segment::segment_response(&response.text)
            .into_iter()
            .enumerate()
        {
            let label = segment::annotate_step(step, &table);
            *counts.entry(label.as_str()).or_default() += 1;
            records.push(StepRecord {
                sample_id: response.sample_id.clone(),
                step_index: i,
                text: step.to_string(),
                label,
                response_length_tokens: length,
            });
        }
    }
    io::write_jsonl(&out, &records)?;
    let echo_path = out.with_extension("config.json");
    write_config_echo(cli, &echo_path, &json!({ "keywords": table }))?;
    Ok(json!({
        "command": "segment",
        "responses": responses.len(),
        "steps": records.len(),
        "labels": counts,
        "out": out,
    }))
}

fn train_config(cli: &Cli, args: &TrainSaeArgs) -> TrainConfig {
    TrainConfig {
        hidden_dim: args.hidden_dim,
        batch_size: args.batch,
        learning_rate: args.lr,
        warmup_fraction: args.warmup,
        lambda: args.lambda,
        penalty: match args.penalty {
            PenaltyArg::Weighted => SparsityPenalty::DecoderWeightedL1,
            PenaltyArg::L1 => SparsityPenalty::L1,
        },
        init: match args.init {
            InitArg::Tied => InitScheme::Tied,
            InitArg::Independent => InitScheme::Independent,
        },
        steps: args.steps,
        epochs: args.epochs,
        seed: cli.seed,
        input_norm: match (args.standardize, args.input_scale) {
            (true, _) => InputNorm::Standardize,
            (false, Some(f)) => InputNorm::Scale(f),
            (false, None) => InputNorm::Raw,
        },
        ..TrainConfig::default()
    }
}

fn cmd_train_sae(cli: &Cli, args: &TrainSaeArgs) -> Result<serde_json::Value> {
    require_dir(&args.activations)?;
    let set = data::read_activation_set(&args.activations)?;
    let config = train_config(cli, args);
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let dir = output_dir(cli, &args.out, &config)?;

    let outcome = sae::train(&set, &config)?;
    let model = if args.unit_decoder {
        outcome.model.export_for_steering()?
    } else {
        outcome.model
    };
    data::save_sae(&model, &dir)?;
    sae::write_loss_csv(&outcome.log, &dir.join("loss.csv"))?;

    let data = set.data_f64();
    let latents = sae::latent_features_matrix(&model, data.view())?;
    Ok(json!({
        "command": "train-sae",
        "steps": model.trained_steps,
        "final_loss": outcome.log.last().map(|r| r.total),
        "mean_l0": sae::mean_l0(latents.view()),
        "recon_error": sae::relative_reconstruction_error(&model, data.view())?,
        "out": dir,
    }))
}

/// Group label of every row: its behavior label, or its length class.
fn group_labels(set: &ActivationSet, args: &AnalyzeArgs) -> Vec<String> {
    if args.length_split {
        geometry::length_split_labels(&set.records, args.short_max, args.long_min)
            .into_iter()
            .map(|c| c.to_string())
            .collect()
    } else {
        set.records.iter().map(|r| r.label.to_string()).collect()
    }
}

#[derive(Debug, Serialize)]
struct LayerReport {
    layer_index: usize,
    sae: PathBuf,
    activations: PathBuf,
    behaviors: Vec<String>,
    skipped_behaviors: Vec<String>,
    n_points: usize,
    silhouette: Option<f64>,
    normalized_silhouette: Option<f64>,
    note: Option<String>,
}

/// Points for the silhouette and embedding of one layer.
struct PointSet {
    vectors: Array2<f64>,
    labels: Vec<String>,
    /// Channel index (column space) or row index (latent space) of each point.
    ids: Vec<usize>,
}

fn column_points(
    w_dec: &Array2<f64>,
    tops: &BTreeMap<String, Vec<ChannelActivity>>,
    order: &[String],
) -> PointSet {
    // A channel in several top lists goes to the behavior where it is most active.
    let mut owner: BTreeMap<usize, (f64, &str)> = BTreeMap::new();
    for name in order {
        for c in tops.get(name).into_iter().flatten() {
            let entry = owner.entry(c.channel_index).or_insert((c.activity, name));
            if c.activity > entry.0 {
                *entry = (c.activity, name);
            }
        }
    }
    let (ids, labels): (Vec<usize>, Vec<String>) = owner
        .into_iter()
        .filter(|(c, _)| {
            let row = w_dec.row(*c);
            row.dot(&row) > 0.0
        })
        .map(|(c, (_, name))| (c, name.to_string()))
        .unzip();
    PointSet {
        vectors: w_dec.select(Axis(0), &ids),
        labels,
        ids,
    }
}

fn latent_points(latents: &Array2<f64>, groups: &[String], behaviors: &[String]) -> PointSet {
    let ids: Vec<usize> = (0..latents.nrows())
        .filter(|&i| behaviors.contains(&groups[i]))
        .filter(|&i| latents.row(i).iter().any(|&v| v > 0.0))
        .collect();
    let dropped = (0..latents.nrows())
        .filter(|&i| behaviors.contains(&groups[i]))
        .count()
        - ids.len();
    if dropped > 0 {
        log::warn!("{dropped} steps with all-zero latent codes left out of the silhouette");
    }
    PointSet {
        vectors: latents.select(Axis(0), &ids),
        labels: ids.iter().map(|&i| groups[i].clone()).collect(),
        ids,
    }
}

fn cmd_analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<serde_json::Value> {
    if args.sae.len() != args.activations.len() {
        return Err(Error::Usage(format!(
            "{} --sae directories but {} --activations directories",
            args.sae.len(),
            args.activations.len()
        )));
    }
    let behaviors = match &args.behaviors {
        Some(list) => list.clone(),
        None if args.length_split => vec!["short".into(), "long".into()],
        None => vec!["reflection".into(), "backtracking".into()],
    };
    let behaviors: Vec<String> = behaviors
        .into_iter()
        .filter(|b| !b.trim().is_empty())
        .collect();
    if behaviors.is_empty() {
        return Err(Error::Usage("behavior list is empty".into()));
    }
    if args.topk == 0 {
        return Err(Error::Usage("--topk must be positive".into()));
    }
    for p in args.sae.iter().chain(&args.activations) {
        require_dir(p)?;
    }
    let dir = output_dir(cli, &args.out, &json!({ "behaviors": behaviors }))?;

    let mut activity_csv = String::from("layer,behavior,rank,channel,activity\n");
    let mut coords_csv = String::from("layer,index,point,x,y,label\n");
    let mut layers = Vec::new();
    for (sae_dir, act_dir) in args.sae.iter().zip(&args.activations) {
        let model = data::load_sae(sae_dir)?;
        let set = data::read_activation_set(act_dir)?;
        let latents = sae::latent_features(&model, &set)?;
        let groups = group_labels(&set, args);
        let layer = set.layer_index;

        let (present, skipped): (Vec<String>, Vec<String>) =
            behaviors.iter().cloned().partition(|b| groups.contains(b));
        for b in &skipped {
            log::warn!("layer {layer}: no steps labeled `{b}`; behavior skipped");
        }
        let mut tops = BTreeMap::new();
        for b in &present {
            let top = geometry::top_active_channels(latents.view(), &groups, b, args.topk)?;
            for (rank, c) in top.iter().enumerate() {
                let _ = writeln!(
                    activity_csv,
                    "{layer},{b},{rank},{},{}",
                    c.channel_index, c.activity
                );
            }
            tops.insert(b.clone(), top);
        }

        let points = match args.space {
            SilhouetteSpace::Columns => column_points(&model.decoder_f64(), &tops, &present),
            SilhouetteSpace::Latents => latent_points(&latents, &groups, &present),
        };
        let n_points = points.ids.len();
        let mut note = None;
        let silhouette = if present.len() < 2 {
            note = Some("fewer than two behaviors present".to_string());
            None
        } else {
            match geometry::silhouette_cosine(points.vectors.view(), &points.labels) {
                Ok(s) => Some(s.mean),
                Err(e) => {
                    log::warn!("layer {layer}: silhouette skipped: {e}");
                    note = Some(e.to_string());
                    None
                }
            }
        };
        if n_points >= 3 {
            let embedding = geometry::embed_2d(points.vectors.view())?;
            for (i, (row, label)) in embedding
                .coords
                .rows()
                .into_iter()
                .zip(&points.labels)
                .enumerate()
            {
                let _ = writeln!(
                    coords_csv,
                    "{layer},{i},{},{},{},{label}",
                    points.ids[i], row[0], row[1]
                );
            }
            io::write_bytes(
                &dir.join(format!("normalized_layer{layer}.bin")),
                &io::f32_to_le_bytes(embedding.normalized.iter().map(|&v| v as f32)),
            )?;
        }
        layers.push(LayerReport {
            layer_index: layer,
            sae: sae_dir.clone(),
            activations: act_dir.clone(),
            behaviors: present,
            skipped_behaviors: skipped,
            n_points,
            silhouette,
            normalized_silhouette: None,
            note,
        });
    }

    let scored: Vec<(usize, f64)> = layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.silhouette.map(|s| (i, s)))
        .collect();
    if scored.len() >= 2 {
        let values: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
        match geometry::normalize_across_layers(&values) {
            Ok(normalized) => {
                for (&(i, _), n) in scored.iter().zip(normalized) {
                    layers[i].normalized_silhouette = Some(n);
                }
            }
            Err(e) => log::warn!("layer normalization skipped: {e}"),
        }
    }
    let mut silhouette_csv = String::from("layer,silhouette,normalized\n");
    for l in &layers {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            silhouette_csv,
            "{},{},{}",
            l.layer_index,
            fmt(l.silhouette),
            fmt(l.normalized_silhouette)
        );
    }
    write_text(&dir.join("activity.csv"), &activity_csv)?;
    write_text(&dir.join("coords.csv"), &coords_csv)?;
    write_text(&dir.join("silhouette.csv"), &silhouette_csv)?;
    let report =
        json!({ "space": args.space, "length_split": args.length_split, "layers": layers });
    io::write_json(&dir.join("silhouette.json"), &report)?;
    Ok(json!({
        "command": "analyze",
        "layers": layers.iter().map(|l| json!({ "layer": l.layer_index, "silhouette": l.silhouette })).collect::<Vec<_>>(),
        "out": dir,
    }))
}

fn cmd_steer_vector(cli: &Cli, args: &SteerVectorArgs) -> Result<serde_json::Value> {
    if !args.behaviors.contains(&args.behavior) {
        return Err(Error::Usage(format!(
            "--behaviors must include the target behavior `{}`",
            args.behavior
        )));
    }
    if args.topk == 0 {
        return Err(Error::Usage("--topk must be positive".into()));
    }
    require_dir(&args.sae)?;
    require_dir(&args.activations)?;
    let model = data::load_sae(&args.sae)?;
    let set = data::read_activation_set(&args.activations)?;
    let latents = sae::latent_features(&model, &set)?;
    let labels: Vec<String> = set.records.iter().map(|r| r.label.to_string()).collect();

    let mut tops = BTreeMap::new();
    for b in &args.behaviors {
        if labels.contains(b) {
            tops.insert(
                b.clone(),
                geometry::top_active_channels(latents.view(), &labels, b, args.topk)?,
            );
        } else {
            log::warn!("no steps labeled `{b}`; behavior skipped");
        }
    }
    if !tops.contains_key(&args.behavior) {
        return Err(Error::InvalidArgument(format!(
            "no steps labeled `{}`",
            args.behavior
        )));
    }
    let channels = if tops.len() >= 2 {
        steering::filter_exclusive_channels(&tops, args.overlap)?
    } else {
        log::warn!("only one behavior present; no exclusivity filtering");
        tops.iter()
            .map(|(b, list)| (b.clone(), list.iter().map(|c| c.channel_index).collect()))
            .collect()
    };
    let selected = &channels[&args.behavior];
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no channels exclusive to `{}` at overlap ratio {}",
            args.behavior, args.overlap
        )));
    }
    let vector =
        steering::build_behavior_vector(model.decoder_f64().view(), selected, &args.behavior)?;

    let dir = output_dir(
        cli,
        &args.out,
        &json!({ "alphas": args.alphas, "overlap": args.overlap }),
    )?;
    steering::save_steering(&vector, &dir)?;
    io::write_json(&dir.join("channels.json"), &channels)?;

    let u = vector.direction_f64();
    let data = set.data_f64();
    let mut sweep =
        String::from("alpha,rows,mean_projection_before,mean_projection_after,mean_norm_ratio\n");
    for &alpha in &args.alphas {
        let (mut before, mut after, mut ratio) = (0.0, 0.0, 0.0);
        for row in data.rows() {
            let h = row.to_vec();
            let steered = steering::apply_steering(&h, &vector, alpha)?;
            let proj = |x: &[f64]| x.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
            let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            before += proj(&h);
            after += proj(&steered);
            let n0 = norm(&h);
            ratio += if n0 > 0.0 { norm(&steered) / n0 } else { 1.0 };
        }
        let n = data.nrows().max(1) as f64;
        let _ = writeln!(
            sweep,
            "{alpha},{},{},{},{}",
            data.nrows(),
            before / n,
            after / n,
            ratio / n
        );
    }
    write_text(&dir.join("alpha_sweep.csv"), &sweep)?;
    Ok(json!({
        "command": "steer-vector",
        "behavior": args.behavior,
        "channels": selected,
        "out": dir,
    }))
}

fn cmd_discover_confidence(cli: &Cli, args: &ConfidenceArgs) -> Result<serde_json::Value> {
    for p in [&args.head, &args.sae, &args.activations] {
        require_dir(p)?;
    }
    let head = confidence::load_head(&args.head)?;
    let model = data::load_sae(&args.sae)?;
    let set = data::read_activation_set(&args.activations)?;
    let config = EntropyConfig {
        iters: args.iters,
        learning_rate: args.lr,
        batch_size: args.batch,
        seed: cli.seed,
    };
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    if args.topk == 0 || args.topk > model.hidden_dim() {
        return Err(Error::Usage(format!(
            "--topk must lie in 1..={}",
            model.hidden_dim()
        )));
    }
    let dir = output_dir(cli, &args.out, &config)?;

    let w_dec = model.decoder_f64();
    let outcome = confidence::optimize_scores(&head, w_dec.view(), &set, &config)?;
    confidence::save_scores(&outcome.scores, &dir)?;
    let mut trajectory = String::from("iter,entropy\n");
    for (i, v) in outcome.fit.trajectory.iter().enumerate() {
        let _ = writeln!(trajectory, "{i},{v}");
    }
    write_text(&dir.join("trajectory.csv"), &trajectory)?;

    let top = confidence::top_scoring_columns(&outcome.scores, args.topk)?;
    let mut vectors = Vec::new();
    for (rank, &c) in top.iter().enumerate() {
        let v = steering::build_behavior_vector(w_dec.view(), &[c], "confidence")?;
        steering::save_steering(&v, &dir.join("vectors").join(format!("rank{rank}")))?;
        vectors.push(v);
    }
    let fit = confidence::fit_coefficients(&head, &vectors, &set, &config)?;
    let combined = steering::combine_steering(&vectors, &fit.coefficients)?;
    match steering::SteeringVector::new(&combined, "confidence", top.clone()) {
        Ok(v) => steering::save_steering(&v, &dir.join("combined"))?,
        Err(e) => log::warn!("combined confidence vector not written: {e}"),
    }
    io::write_json(
        &dir.join("coefficients.json"),
        &json!({
            "channels": top,
            "scores": top.iter().map(|&c| outcome.scores.scores[c]).collect::<Vec<_>>(),
            "coefficients": fit.coefficients,
            "initial_entropy": fit.initial_entropy,
            "final_entropy": fit.final_entropy,
        }),
    )?;
    Ok(json!({
        "command": "discover-confidence",
        "initial_entropy": outcome.fit.initial_entropy,
        "final_entropy": outcome.scores.final_entropy,
        "top_channels": top,
        "out": dir,
    }))
}

fn cmd_synth_bench(cli: &Cli, args: &SynthBenchArgs) -> Result<serde_json::Value> {
    if args.k.is_empty() || args.noise.is_empty() {
        return Err(Error::Usage(
            "--k and --noise need at least one value".into(),
        ));
    }
    let base = SynthConfig {
        d: args.d,
        m: args.m,
        k: args.k[0],
        alpha_min: args.alpha_min,
        alpha_max_ratio: args.alpha_max_ratio,
        signed: args.signed,
        noise_bound: args.noise[0],
        n_samples: args.n,
        seed: cli.seed,
        target_mu: args.target_mu,
        orthogonalize: args.orthogonalize,
        sae_width: args.width,
        train: TrainConfig {
            hidden_dim: args.width.unwrap_or(args.m),
            batch_size: args.batch,
            learning_rate: args.lr,
            lambda: args.lambda,
            steps: args.steps,
            epochs: args.epochs,
            seed: cli.seed,
            input_norm: InputNorm::Scale(args.input_scale),
            ..TrainConfig::default()
        },
        ..SynthConfig::default()
    };
    let mut points = Vec::new();
    for &k in &args.k {
        for &noise in &args.noise {
            let config = SynthConfig {
                k,
                noise_bound: noise,
                ..base.clone()
            };
            config.validate().map_err(|e| Error::Usage(e.to_string()))?;
            config
                .train
                .validate()
                .map_err(|e| Error::Usage(e.to_string()))?;
            points.push(config);
        }
    }
    let dir = output_dir(cli, &args.out, &points)?;

    let mut csv = String::from(
        "k,noise,seed,mean_alignment,fraction_above_0.9,mu_measured,mu_true,mean_l0,recon_error,train_steps,final_loss\n",
    );
    let mut reports = Vec::new();
    for (i, config) in points.iter().enumerate() {
        let run = synth::run_recovery_experiment(config)?;
        let r = &run.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            config.k,
            config.noise_bound,
            config.seed,
            r.mean_alignment,
            r.fraction_above_0_9,
            r.mu_measured,
            r.mu_true,
            r.mean_l0,
            r.recon_error,
            r.train_steps,
            r.final_loss
        );
        sae::write_loss_csv(&run.loss_log, &dir.join(format!("loss_{i}.csv")))?;
        reports.push(json!({ "k": config.k, "noise_bound": config.noise_bound, "report": r }));
    }
    write_text(&dir.join("sweep.csv"), &csv)?;
    io::write_json(&dir.join("report.json"), &reports)?;
    Ok(json!({ "command": "synth-bench", "points": reports, "out": dir }))
}
