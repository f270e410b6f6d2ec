use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use tsimta::attention::EncoderFamily;
use tsimta::cohort::Modality;
use tsimta::multimodal::Variant;
use tsimta::pipeline::{
    attention_dump, compare_reports, evaluate, load_run, save_run, train_cv, Cohort, MetricsReport, RunConfig,
    RESOLVED_CONFIG_FILE,
};
use tsimta::synth::{write_synth, SynthConfig};
use tsimta::{Error, Result};

/// `println!` that tolerates a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser, Debug)]
#[command(name = "tsimta", version, about = "Temporal attention survival models on irregular multimodal cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort and its ground-truth sidecar.
    Synth(SynthArgs),
    /// Train one model per cross-validation fold.
    Train(TrainArgs),
    /// Evaluate a trained run at fixed cutoffs.
    Eval(EvalArgs),
    /// Compare two metrics reports fold by fold.
    Compare(CompareArgs),
    /// Dump attention weights for one patient.
    AttnDump(AttnArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Cohort output file (one JSON record per line).
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth output file; defaults to `<out>.truth.jsonl`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// JSON file whose fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "n")]
    n_patients: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    base_hazard_per_day: Option<f64>,
    /// Per-modality signal as `blood,imaging,medication`.
    #[arg(long, value_parser = parse_triple)]
    modality_signal: Option<[f64; 3]>,
    #[arg(long)]
    p_missing_imaging: Option<f64>,
    /// Visits per month as `blood,imaging,medication`.
    #[arg(long, value_parser = parse_triple)]
    visit_rate_per_month: Option<[f64; 3]>,
    #[arg(long)]
    n_blood_features: Option<usize>,
    #[arg(long)]
    n_imaging_features: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    med_categories: Option<Vec<String>>,
    #[arg(long)]
    sparse_features: Option<bool>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON file whose fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    family: Option<EncoderFamily>,
    /// Unimodal:<modality>, Concat, ConcatSA or LateMean.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    n_inner: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    sa_heads: Option<usize>,
    #[arg(long)]
    use_positional_encoding: Option<bool>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    tau_days: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    p_modality_drop: Option<f64>,
    #[arg(long)]
    k_folds: Option<usize>,
    /// Training cutoff range as `lo,hi` in days.
    #[arg(long, value_parser = parse_pair)]
    train_cutoff_range: Option<[f64; 2]>,
    #[arg(long, value_delimiter = ',')]
    eval_cutoffs: Option<Vec<f64>>,
    #[arg(long)]
    resample_cutoffs: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Cohort file; defaults to the dataset of the resolved config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Cutoff in days; defaults to every evaluation cutoff of the run.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Report file; only valid with a single cutoff. Defaults to
    /// `<run>/metrics_<cutoff>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    report_a: PathBuf,
    report_b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttnArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    patient: String,
    #[arg(long, default_value_t = 90.0)]
    cutoff: f64,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_floats<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_triple(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_floats(s)
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    parse_floats(s)
}

fn per_modality(v: [f64; 3]) -> Value {
    serde_json::json!({ "blood": v[0], "imaging": v[1], "medication": v[2] })
}

struct Overrides(Map<String, Value>);

impl Overrides {
    fn new() -> Self {
        Self(Map::new())
    }

    fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.0.insert(key.into(), serde_json::to_value(v).expect("flag serializes"));
        }
    }
}

/// Defaults, then flags, then the config file.
fn resolve<T: Serialize + DeserializeOwned + Default>(flags: Overrides, file: Option<&Path>) -> Result<T> {
    let Value::Object(mut merged) = serde_json::to_value(T::default()).expect("defaults serialize") else {
        unreachable!("configs are JSON objects")
    };
    merged.extend(flags.0);
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => merged.extend(m),
            Ok(_) => return Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
            Err(e) => return Err(Error::Config(format!("{}: {e}", path.display()))),
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes") + "\n"
}

fn read_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        line: e.line(),
        msg: format!("{}: {e}", path.display()),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.3}"))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut o = Overrides::new();
    o.set("n_patients", args.n_patients);
    o.set("seed", args.seed);
    o.set("beta", args.beta);
    o.set("base_hazard_per_day", args.base_hazard_per_day);
    o.set("modality_signal", args.modality_signal.map(per_modality));
    o.set("p_missing_imaging", args.p_missing_imaging);
    o.set("visit_rate_per_month", args.visit_rate_per_month.map(per_modality));
    o.set("n_blood_features", args.n_blood_features);
    o.set("n_imaging_features", args.n_imaging_features);
    o.set("med_categories", args.med_categories);
    o.set("sparse_features", args.sparse_features);
    let config: SynthConfig = resolve(o, args.config.as_deref())?;
    config.validate()?;
    if config.n_patients == 0 {
        eprintln!("warning: n_patients is 0; writing an empty cohort");
    }
    let truth = args.truth.unwrap_or_else(|| {
        let mut name = args.out.clone().into_os_string();
        name.push(".truth.jsonl");
        PathBuf::from(name)
    });
    let synth = write_synth(&config, &args.out, &truth)?;
    let cohort = Cohort::from_records(&synth.records);
    say!("wrote {} patients to {}", synth.records.len(), args.out.display());
    say!("eligible: {}", cohort.eligible.len());
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for e in &cohort.excluded {
        *reasons.entry(e.reason.to_string()).or_default() += 1;
    }
    for (reason, n) in &reasons {
        say!("excluded {reason}: {n}");
    }
    for m in Modality::ALL {
        let events: usize = cohort.eligible.iter().map(|r| r.events_of(m).len()).sum();
        say!("{m} events (eligible): {events}");
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut o = Overrides::new();
    o.set("dataset", args.dataset);
    o.set("family", args.family);
    o.set("variant", args.variant);
    o.set("n_blocks", args.n_blocks);
    o.set("n_inner", args.n_inner);
    o.set("d_model", args.d_model);
    o.set("sa_heads", args.sa_heads);
    o.set("use_positional_encoding", args.use_positional_encoding);
    o.set("mlp_hidden", args.mlp_hidden);
    o.set("tau_days", args.tau_days);
    o.set("epochs", args.epochs);
    o.set("batch_size", args.batch_size);
    o.set("lr", args.lr);
    o.set("p_modality_drop", args.p_modality_drop);
    o.set("k_folds", args.k_folds);
    o.set("train_cutoff_range", args.train_cutoff_range);
    o.set("eval_cutoffs", args.eval_cutoffs);
    o.set("resample_cutoffs", args.resample_cutoffs);
    o.set("seed", args.seed);
    o.set("output_dir", args.output_dir);
    let config: RunConfig = resolve(o, args.config.as_deref())?;
    config.validate()?;
    if config.dataset.as_os_str().is_empty() {
        return Err(Error::Config("no dataset given (--dataset or \"dataset\" in the config file)".into()));
    }
    let cohort = Cohort::load(&config.dataset)?;
    say!(
        "training {} on {} eligible patients ({} excluded), {} folds",
        config.label(),
        cohort.eligible.len(),
        cohort.excluded.len(),
        config.k_folds
    );
    let run = train_cv(&config, &cohort)?;
    save_run(&run, &config.output_dir)?;
    for f in &run.folds {
        let first = f.losses.first().copied().unwrap_or(f64::NAN);
        let last = f.losses.last().copied().unwrap_or(f64::NAN);
        say!("fold {}: loss {first:.4} -> {last:.4}", f.fold);
    }
    say!("wrote {}", config.output_dir.join(RESOLVED_CONFIG_FILE).display());
    Ok(())
}

fn load_cohort_for(run_dir: &Path, dataset: Option<PathBuf>) -> Result<(tsimta::pipeline::CvRun, Cohort)> {
    let run = load_run(run_dir)?;
    let path = dataset.unwrap_or_else(|| run.config.dataset.clone());
    let cohort = Cohort::load(&path)?;
    Ok((run, cohort))
}

fn print_report(r: &MetricsReport) {
    say!("{} at cutoff {} days ({} patients)", r.run, r.cutoff_days, r.n_patients);
    for s in &r.summary {
        let a = &s.aggregate;
        let flag = if a.any_undefined { " (undefined in some fold)" } else { "" };
        say!(
            "  {:>3}: AUC {} ± {}, significant in {}/{} folds{flag}",
            s.task,
            fmt_opt(a.mean),
            fmt_opt(a.sd),
            a.n_significant,
            r.folds.len()
        );
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (run, cohort) = load_cohort_for(&args.run, args.dataset)?;
    let cutoffs = match args.cutoff {
        Some(c) => vec![c],
        None => run.config.eval_cutoffs.clone(),
    };
    if args.out.is_some() && cutoffs.len() != 1 {
        return Err(Error::Config("--out needs a single --cutoff".into()));
    }
    for cutoff in cutoffs {
        let report = evaluate(&run, &cohort, cutoff)?;
        let path = args
            .out
            .clone()
            .unwrap_or_else(|| args.run.join(format!("metrics_{cutoff}.json")));
        write_text(&path, &report.to_json())?;
        print_report(&report);
        say!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let a: MetricsReport = read_report(&args.report_a)?;
    let b: MetricsReport = read_report(&args.report_b)?;
    let cmp = compare_reports(&a, &b)?;
    say!("{} vs {} at cutoff {} days", cmp.run_a, cmp.run_b, cmp.cutoff_days);
    for t in &cmp.tasks {
        let per_fold: Vec<String> = t.folds.iter().map(|f| fmt_opt(f.p)).collect();
        let verdict = match (t.combined_p, t.degenerate) {
            (None, _) => "undefined",
            (_, true) => "degenerate",
            _ if t.significant => "significant",
            _ => "not significant",
        };
        say!(
            "  {:>3}: fold p [{}], combined p {} ({verdict})",
            t.task,
            per_fold.join(", "),
            fmt_opt(t.combined_p)
        );
    }
    if let Some(out) = args.out {
        write_text(&out, &cmp.to_json())?;
        say!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_attn(args: AttnArgs) -> Result<()> {
    let (run, cohort) = load_cohort_for(&args.run, args.dataset)?;
    let dump = attention_dump(&run, &cohort, &args.patient, args.cutoff)?;
    let text = to_json(&dump);
    match args.out {
        Some(out) => {
            write_text(&out, &text)?;
            let rows: usize = dump.modalities.values().map(Vec::len).sum();
            let names: Vec<&str> = dump.modalities.keys().map(|m: &Modality| m.name()).collect();
            say!("wrote {} attention rows ({}) to {}", rows, names.join(", "), out.display());
        }
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::AttnDump(a) => cmd_attn(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
