//! Command-line front end.
//!
//! Exit codes: 0 success, 1 domain error (infeasible schedule, invalid
//! container, ...), 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::allocator::allocate;
use crate::cost::{cost_of, trace_flops};
use crate::divprune::win_div_prune;
use crate::io::{
    budget_csv, cost_csv, load_json, read_ots_file, read_trace_csv, schedule_csv, summarize_rows, trace_csv,
    trace_rows, write_json, write_ots_file, OtsContainer,
};
use crate::pipeline::{run_pipeline, AttentionSource, PrefillTrace};
use crate::relevance::RelevanceScores;
use crate::schedule::build_schedule;
use crate::synth::{synth_generate, SynthSpec, GENERATOR};
use crate::tokens::{Boundaries, ModelConfig, RetentionSpec, WindowLayout};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Ratio flag value; values above 1 are percentages.
fn parse_ratio(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("`{s}` must be a non-negative number"));
    }
    Ok(if v > 1.0 { v / 100.0 } else { v })
}

fn parse_ratio_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected `Rv,Ra`, got `{s}`"));
    }
    Ok((parse_ratio(parts[0])?, parse_ratio(parts[1])?))
}

fn parse_boundaries(s: &str) -> std::result::Result<Boundaries, String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| format!("`{s}` is not a list of layer numbers"))?;
    match parts[..] {
        [a, b, c, d] => Ok(Boundaries::new(a, b, c, d)),
        _ => Err(format!("expected four boundaries Ls,Lm1,Lm2,Ll, got {}", parts.len())),
    }
}

#[derive(Debug, Parser)]
#[command(name = "omniprune", version, about = "Stage-adaptive token pruning for omni-modal prefill")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer retention table.
    Schedule(ScheduleArgs),
    /// Write a synthetic token stream container.
    Gen(GenArgs),
    /// Per-window diversity pruning of a container.
    PrunePre(PrunePreArgs),
    /// Budget plan for one drop layer.
    Allocate(AllocateArgs),
    /// Full three-stage run over a mock prefill.
    Run(RunArgs),
    /// FLOPs report of a trace.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Model configuration; alternative to --layers/--boundaries.
    #[arg(long, conflicts_with_all = ["layers", "boundaries"])]
    pub config: Option<PathBuf>,
    #[arg(long, requires = "boundaries")]
    pub layers: Option<usize>,
    #[arg(long, value_parser = parse_boundaries, requires = "layers")]
    pub boundaries: Option<Boundaries>,
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub lambda: f64,
    /// Per-modality ratios `Rv,Ra`; emits one column per modality.
    #[arg(long, value_parser = parse_ratio_pair, required_unless_present = "ratio")]
    pub modality_ratios: Option<(f64, f64)>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub synth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Embed the oracle's encoder attention for every group.
    #[arg(long)]
    pub attention: bool,
}

#[derive(Debug, Args)]
pub struct PrunePreArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-window kept counts as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// JSON `{"s_v": [...], "s_a": [...]}` window weights.
    #[arg(long)]
    pub relevance: PathBuf,
    /// JSON `{"n_v": [...], "n_a": [...]}` current window capacities.
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(long, value_parser = parse_ratio)]
    pub rv: f64,
    #[arg(long, value_parser = parse_ratio)]
    pub ra: f64,
    /// Original `N_v,N_a`; defaults to the layout totals.
    #[arg(long)]
    pub totals: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub synth: Option<PathBuf>,
    #[arg(long)]
    pub trace: PathBuf,
    /// Full trace as JSON, usable by `flops`.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Final stream container.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Trace CSV, or JSON written by `run --json`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Model configuration, needed for CSV traces.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowWeights {
    s_v: Vec<f64>,
    s_a: Vec<f64>,
    #[serde(default = "default_tau")]
    tau: f64,
}

fn default_tau() -> f64 {
    0.1
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn json_text<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn cmd_schedule(a: &ScheduleArgs) -> Result<()> {
    let config = match (&a.config, a.layers, a.boundaries) {
        (Some(p), _, _) => load_json::<ModelConfig>(p)?,
        (None, Some(layers), Some(boundaries)) => ModelConfig { layers, d_model: 1, d_ff: 1, n_heads: 1, boundaries },
        _ => return Err(Error::Config("need --config or --layers with --boundaries".into())),
    };
    config.validate()?;
    let (primary, second) = match (a.modality_ratios, a.ratio) {
        (Some((rv, ra)), _) => (build_schedule(&config, rv, a.lambda)?, Some(build_schedule(&config, ra, a.lambda)?)),
        (None, Some(r)) => (build_schedule(&config, r, a.lambda)?, None),
        (None, None) => unreachable!("clap requires one of the ratio flags"),
    };
    if a.json {
        let value = match &second {
            Some(s) => json!({"visual": primary, "audio": s}),
            None => json!(primary),
        };
        return emit(a.out.as_deref(), &json_text(&value));
    }
    let csv = schedule_csv(&config, &primary.per_layer_trr, second.as_ref().map(|s| s.per_layer_trr.as_slice()))?;
    let mut text = String::new();
    if a.out.is_none() {
        for (name, s) in [("", Some(&primary)), ("audio ", second.as_ref())] {
            if let Some(s) = s {
                let name = if second.is_some() && name.is_empty() { "visual " } else { name };
                text.push_str(&format!("# {name}delta={:.4} C={:.3}\n", s.delta, s.c));
            }
        }
    }
    text.push_str(&csv);
    emit(a.out.as_deref(), &text)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec: SynthSpec = load_json(&a.synth)?;
    let (stream, oracle) = synth_generate(&spec)?;
    let mut c = OtsContainer::new(stream);
    c.generator = Some(json!({"algorithm": GENERATOR, "spec": spec}));
    if a.attention {
        let s = c.stream().clone();
        let layout = s.layout();
        for t in 0..layout.windows() {
            for m in [crate::Modality::Visual, crate::Modality::Audio] {
                let rows = s.group_rows(t, m);
                if !rows.is_empty() {
                    let pos: Vec<u64> = rows.iter().map(|&r| s.position(r)).collect();
                    c.attention.insert((t as u32, m), oracle.encoder_attention(&pos));
                }
            }
        }
    }
    write_ots_file(&a.out, &c)
}

fn cmd_prune_pre(a: &PrunePreArgs) -> Result<()> {
    let c = read_ots_file(&a.input)?;
    let spec: RetentionSpec = load_json(&a.spec)?;
    spec.validate()?;
    let stream = c.stream();
    let layout = stream.layout();
    spec.check_layout(&layout)?;
    let source = c.attention_source();
    let mut err = None;
    let res = win_div_prune(stream, &layout, &spec, |g| match source.saliency(stream, &g.rows) {
        Ok(s) => s,
        Err(e) => {
            err.get_or_insert(e);
            None
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let mut out = OtsContainer::new(stream.select_rows(&res.rows));
    out.generator = c.generator.clone();
    out.query = c.query.clone();
    write_ots_file(&a.out, &out)?;
    if let Some(p) = &a.report {
        let mut text = String::from("window,kept_v,kept_a\n");
        for (t, k) in res.per_window_kept.iter().enumerate() {
            text.push_str(&format!("{t},{},{}\n", k[0], k[1]));
        }
        emit(Some(p), &text)?;
    }
    Ok(())
}

fn cmd_allocate(a: &AllocateArgs) -> Result<()> {
    let w: WindowWeights = load_json(&a.relevance)?;
    let layout: WindowLayout = load_json(&a.layout)?;
    let totals = match &a.totals {
        Some(s) => {
            let parts: Vec<usize> = s
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("--totals `{s}` is not `N_v,N_a`")))?;
            match parts[..] {
                [v, a] => (v, a),
                _ => return Err(Error::Config(format!("--totals `{s}` is not `N_v,N_a`"))),
            }
        }
        None => (layout.total_v(), layout.total_a()),
    };
    let rel = RelevanceScores::from_modality_weights(w.s_v, w.s_a, w.tau)?;
    let plan = allocate(&rel, a.rv, a.ra, totals, &layout)?;
    let text = if a.json { json_text(&plan) } else { budget_csv(&plan)? };
    emit(a.out.as_deref(), &text)
}

fn cmd_run(a: &RunArgs) -> Result<String> {
    let config: ModelConfig = load_json(&a.config)?;
    let spec: RetentionSpec = load_json(&a.spec)?;
    config.validate()?;
    spec.validate()?;
    let run = match (&a.input, &a.synth) {
        (Some(p), _) => {
            let c = read_ots_file(p)?;
            spec.check_layout(&c.stream().layout())?;
            run_pipeline(c.stream(), &c.attention_source(), &config, &spec)?
        }
        (None, Some(p)) => {
            let s: SynthSpec = load_json(p)?;
            let (stream, oracle) = synth_generate(&s)?;
            spec.check_layout(&stream.layout())?;
            run_pipeline(&stream, &oracle, &config, &spec)?
        }
        (None, None) => unreachable!("clap requires an input"),
    };
    let cost = trace_flops(&run.trace, &config);
    let rows = trace_rows(&run.trace, &cost);
    emit(Some(&a.trace), &trace_csv(&rows)?)?;
    if let Some(p) = &a.json {
        write_json(p, &run.trace)?;
    }
    if let Some(p) = &a.out {
        write_ots_file(p, &OtsContainer::new(run.output))?;
    }
    Ok(summarize_rows(&rows).to_string())
}

fn cmd_flops(a: &FlopsArgs) -> Result<()> {
    let is_json = a.trace.extension().is_some_and(|e| e == "json");
    let report = if is_json {
        let trace: PrefillTrace = load_json(&a.trace)?;
        let config = match &a.config {
            Some(p) => load_json(p)?,
            None => trace.config.clone(),
        };
        trace_flops(&trace, &config)
    } else {
        let config: ModelConfig = match &a.config {
            Some(p) => load_json(p)?,
            None => return Err(Error::Config("CSV traces need --config".into())),
        };
        let rows = read_trace_csv(&a.trace)?;
        let seq: Vec<usize> = rows.iter().map(|r| r.seq_len).collect();
        let full = rows.first().map_or(0, |r| r.total_v + r.total_a + r.text);
        cost_of(&seq, full, &config)
    };
    let text = if a.json {
        json_text(&report)
    } else {
        format!("# {}\n# ratio_vs_full={:.6} peak_kv_tokens={}\n{}", report.model, report.ratio_vs_full, report.peak_kv_tokens, cost_csv(&report)?)
    };
    emit(a.out.as_deref(), &text)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Schedule(a) => cmd_schedule(a),
        Command::Gen(a) => cmd_gen(a),
        Command::PrunePre(a) => cmd_prune_pre(a),
        Command::Allocate(a) => cmd_allocate(a),
        Command::Run(a) => {
            let summary = cmd_run(a)?;
            println!("{summary}");
            Ok(())
        }
        Command::Flops(a) => cmd_flops(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}
