//! Command-line experiment driver: train, eval, synth, gradcheck, sweep.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairsad::config::RunConfig;
use fairsad::gradcheck::{run_suite, GRADCHECK_TOLERANCE};
use fairsad::graph::split_nodes;
use fairsad::report::{load_model, report_table, write_artifacts};
use fairsad::synth::generate_synthetic;
use fairsad::train::{evaluate, load_dataset, run_experiment};
use fairsad::FairsadError;

const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "fairsad", version, about = "Fairness-aware disentangled graph learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train over all configured seeds and write report artifacts
    Train(TrainArgs),
    /// Evaluate a saved model on the configured dataset's test split
    Eval(EvalArgs),
    /// Generate a synthetic dataset as nodes/edges files
    Synth(SynthArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Re-run training while varying the channel count or the layer depth
    Sweep(SweepArgs),
}

/// Flag mirror of the run-config keys; every flag overrides the config file.
#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    nodes_path: Option<String>,
    #[arg(long)]
    edges_path: Option<String>,
    #[arg(long)]
    delimiter: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    synthetic: Option<bool>,
    #[arg(long)]
    synth_nodes_per_group: Option<usize>,
    #[arg(long)]
    synth_intra_prob: Option<f64>,
    #[arg(long)]
    synth_inter_prob: Option<f64>,
    #[arg(long)]
    synth_feature_dim: Option<usize>,
    #[arg(long)]
    synth_leakage: Option<f64>,
    #[arg(long)]
    synth_label_signal: Option<f64>,
    #[arg(long)]
    synth_label_sensitive_correlation: Option<f64>,
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    assigner_hidden: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    val_ratio: Option<f64>,
    #[arg(long)]
    test_ratio: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    disable_disentanglement: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    disable_mask: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    disable_micro: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    disable_macro: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mask_cov_train_only: Option<bool>,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        macro_rules! take {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { c.$field = v; })*
            };
        }
        take!(
            delimiter, synthetic, synth_nodes_per_group, synth_intra_prob, synth_inter_prob,
            synth_feature_dim, synth_leakage, synth_label_signal,
            synth_label_sensitive_correlation, synth_seed, channels, hidden_dim, layers,
            assigner_hidden, temperature, alpha, beta, lr, weight_decay, epochs, seeds,
            train_ratio, val_ratio, test_ratio, disable_disentanglement, disable_mask,
            disable_micro, disable_macro, mask_cov_train_only,
        );
        if self.nodes_path.is_some() {
            c.nodes_path = self.nodes_path.clone();
        }
        if self.edges_path.is_some() {
            c.edges_path = self.edges_path.clone();
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config file (flat key = value text); flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the report, curves, and model snapshots
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved model snapshot (model_seed<N>.json from a training run)
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed controlling the train/val/test split to evaluate on
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving nodes.csv and edges.csv
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random smooth points probed per check
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Channel counts to sweep, e.g. 1,2,4,8,16 (conflicts with --sweep-layers)
    #[arg(long = "sweep-channels", value_delimiter = ',', conflicts_with = "sweep_layers")]
    sweep_channels: Option<Vec<usize>>,
    /// Layer depths to sweep, e.g. 1,2,3,4,5
    #[arg(long = "sweep-layers", value_delimiter = ',')]
    sweep_layers: Option<Vec<usize>>,
    /// Optional directory for one artifact set per swept value
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn resolve_config(path: &Option<PathBuf>, overrides: &Overrides) -> Result<RunConfig, FairsadError> {
    let mut config = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut config);
    Ok(config)
}

/// A missing dataset is an invocation mistake, not a runtime failure.
fn dataset_configured(config: &RunConfig) -> bool {
    config.synthetic || (config.nodes_path.is_some() && config.edges_path.is_some())
}

fn cmd_train(args: &TrainArgs) -> Result<u8, FairsadError> {
    let config = resolve_config(&args.config, &args.overrides)?;
    if !dataset_configured(&config) {
        eprintln!(
            "usage error: no dataset; pass --synthetic or both --nodes-path and --edges-path \
             (or set them in the config file)"
        );
        return Ok(EXIT_USAGE);
    }
    config.validate()?;
    let result = run_experiment(&config)?;
    write_artifacts(&result, &args.out)?;
    print!("{}", report_table(&result.report));
    println!("artifacts written to {}", args.out.display());
    Ok(0)
}

fn cmd_eval(args: &EvalArgs) -> Result<u8, FairsadError> {
    let config = resolve_config(&args.config, &args.overrides)?;
    if !dataset_configured(&config) {
        eprintln!(
            "usage error: no dataset; pass --synthetic or both --nodes-path and --edges-path"
        );
        return Ok(EXIT_USAGE);
    }
    let model = load_model(&args.model)?;
    let graph = load_dataset(&config)?;
    let masks = split_nodes(
        &graph,
        (config.train_ratio, config.val_ratio, config.test_ratio),
        args.seed,
    )?;
    let m = evaluate(&model, &graph, &masks)?;
    println!(
        "auc {:.2}  f1 {:.2}  delta_dp {:.2}  delta_eo {:.2}",
        m.auc, m.f1, m.delta_dp, m.delta_eo
    );
    Ok(0)
}

fn cmd_synth(args: &SynthArgs) -> Result<u8, FairsadError> {
    let mut config = RunConfig::default();
    args.overrides.apply(&mut config);
    let spec = config.synthetic_spec();
    let graph = generate_synthetic(&spec)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| FairsadError::io(args.out.display().to_string(), e))?;
    let d = graph.feature_dim();
    let mut nodes = String::from("id,sensitive,label");
    for j in 0..d {
        nodes.push_str(&format!(",f{j}"));
    }
    nodes.push('\n');
    for v in 0..graph.num_nodes {
        nodes.push_str(&format!("{v},{},{}", graph.sensitive[v], graph.labels[v]));
        for j in 0..d {
            nodes.push_str(&format!(",{}", graph.attributes[[v, j]]));
        }
        nodes.push('\n');
    }
    let mut edges = String::from("src,dst\n");
    for u in 0..graph.num_nodes {
        for &v in graph.adjacency.neighbors(u) {
            if u < v {
                edges.push_str(&format!("{u},{v}\n"));
            }
        }
    }
    let write = |name: &str, text: &str| -> Result<(), FairsadError> {
        let p = args.out.join(name);
        std::fs::write(&p, text).map_err(|e| FairsadError::io(p.display().to_string(), e))
    };
    write("nodes.csv", &nodes)?;
    write("edges.csv", &edges)?;
    println!(
        "wrote {} nodes / {} undirected edges to {}",
        graph.num_nodes,
        graph.num_edges,
        args.out.display()
    );
    Ok(0)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8, FairsadError> {
    let results = run_suite(args.trials, args.seed);
    let mut ok = true;
    for r in &results {
        println!(
            "{:<34} max rel err {:>12.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    println!(
        "{} checks, tolerance {GRADCHECK_TOLERANCE:.0e}: {}",
        results.len(),
        if ok { "all passed" } else { "FAILED" }
    );
    Ok(if ok { 0 } else { 1 })
}

fn cmd_sweep(args: &SweepArgs) -> Result<u8, FairsadError> {
    let base = resolve_config(&args.config, &args.overrides)?;
    if !dataset_configured(&base) {
        eprintln!(
            "usage error: no dataset; pass --synthetic or both --nodes-path and --edges-path"
        );
        return Ok(EXIT_USAGE);
    }
    let (name, values): (&str, Vec<usize>) = match (&args.sweep_channels, &args.sweep_layers) {
        (Some(ks), None) => ("channels", ks.clone()),
        (None, Some(ls)) => ("layers", ls.clone()),
        (None, None) => ("channels", vec![1, 2, 4, 8, 16]),
        (Some(_), Some(_)) => unreachable!("clap conflict"),
    };
    println!(
        "{:<12} {:>14} {:>14} {:>14} {:>14}",
        name, "auc", "f1", "delta_dp", "delta_eo"
    );
    for &v in &values {
        let mut config = base.clone();
        match name {
            "channels" => config.channels = v,
            _ => config.layers = v,
        }
        config.validate()?;
        let result = run_experiment(&config)?;
        let r = &result.report;
        let cell = |s: &fairsad::metrics::MetricSummary| format!("{:.2}±{:.2}", s.mean, s.std);
        println!(
            "{:<12} {:>14} {:>14} {:>14} {:>14}",
            v,
            cell(&r.auc),
            cell(&r.f1),
            cell(&r.delta_dp),
            cell(&r.delta_eo)
        );
        if let Some(dir) = &args.out {
            write_artifacts(&result, Path::new(&dir.join(format!("{name}_{v}"))))?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
