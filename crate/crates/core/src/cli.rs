//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::pipeline::{
    enhance, enhance_with_model, env_seed, export_cloud, gen_scene, import_cloud, load_checkpoint, load_config,
    save_config, save_report, synth_proxies, CloudFormat, FlopsComparison, PipelineConfig, Proxies, RunReport,
    SceneSpec,
};
use crate::proxy::{closest_to, sweep, AttentionVariant, FlopsConfig, SweepGrid};
use crate::verify::{gradient_suite, GRAD_TOLERANCE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "proxyform", version, about = "Proxy-guided point-cloud enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene.
    GenScene(GenSceneArgs),
    /// Run the enhancement pipeline on a cloud.
    Enhance(EnhanceArgs),
    /// Analytic FLOPs and parameter table for self, cross and proxy attention.
    Flops(FlopsArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Time the pipeline on a synthetic scene.
    Bench(BenchArgs),
    /// Convert a cloud between PLY and CSV, or write a resolved config.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Ply,
    Csv,
}

impl From<FormatArg> for CloudFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Ply => CloudFormat::Ply,
            FormatArg::Csv => CloudFormat::Csv,
        }
    }
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the quick preset (C = 64, one block per stack).
    #[arg(long, conflicts_with = "config")]
    fast: bool,
    /// Overrides PROXYFORM_SEED and the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None if self.fast => PipelineConfig::fast(),
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed.map_or_else(env_seed, |s| Ok(Some(s)))? {
            cfg.seed = seed;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct GenSceneArgs {
    #[arg(long, default_value_t = 20_000)]
    points: usize,
    /// JSON scene layout; overrides --points.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Also write one label per line (0 = background).
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Input cloud (PLY or CSV). Without it a synthetic scene is generated.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Size of the generated scene when no input is given.
    #[arg(long, default_value_t = 20_000)]
    points: usize,
    /// Parameters saved earlier; its config must match the resolved one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    /// Grid points per axis.
    #[arg(long, default_value_t = 12)]
    grid: usize,
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    #[arg(long = "c", default_value_t = 256)]
    channels: u64,
    /// Proxy tokens.
    #[arg(long, default_value_t = 32)]
    proxies: u64,
    #[arg(long, default_value_t = 4)]
    ffn_mult: u64,
    #[arg(long, default_value_t = 3)]
    layers: u64,
    /// Sequence length; defaults to the clusters kept from the grid.
    #[arg(long)]
    n_seq: Option<u64>,
    /// Count Q, K, V only, without an output projection.
    #[arg(long)]
    no_out_projection: bool,
    /// Sweep the default grid and report the point closest to --target.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value_t = 0.4055, requires = "sweep")]
    target: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Defaults to the quick preset when --config is absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 20_000)]
    points: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Cloud to convert.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    input: Option<PathBuf>,
    /// Config to resolve (defaults filled in) and write back.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

/// Parses `argv` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`.
pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenScene(a) => gen_scene_cmd(a, out),
        Command::Enhance(a) => enhance_cmd(a, out),
        Command::Flops(a) => flops_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Bench(a) => bench_cmd(a, out),
        Command::Export(a) => export_cmd(a, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn format_for(path: &Path, explicit: Option<FormatArg>) -> Result<CloudFormat> {
    explicit
        .map(CloudFormat::from)
        .or_else(|| CloudFormat::from_path(path))
        .ok_or_else(|| {
            Error::InvalidArgument(format!("cannot tell the format of {}; pass --format", path.display()))
        })
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    import_cloud(path, format_for(path, None)?)
}

fn scene_seed(flag: Option<u64>) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(0))
}

fn gen_scene_cmd(a: GenSceneArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                detail: e.to_string(),
            })?
        }
        None => SceneSpec::with_total(a.points),
    };
    let seed = scene_seed(a.seed)?;
    let scene = gen_scene(&spec, seed)?;
    export_cloud(&scene.cloud, &a.out, format_for(&a.out, a.format)?)?;
    if let Some(path) = &a.labels {
        let text: String = scene.labels.iter().map(|l| format!("{l}\n")).collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    writeln!(out, "wrote {} points (seed {seed}) to {}", scene.cloud.len(), a.out.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn proxies_for(cfg: &PipelineConfig) -> Result<Proxies> {
    synth_proxies(cfg.seed, cfg.n_text_proxies, cfg.n_views, cfg.tokens_per_view, cfg.channels)
}

fn run_enhance(cfg: &PipelineConfig, cloud: &PointCloud, checkpoint: Option<&Path>) -> Result<(PointCloud, RunReport)> {
    let proxies = proxies_for(cfg)?;
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            enhance_with_model(cfg, &ck.model, cloud, &proxies)
        }
        None => enhance(cfg, cloud, &proxies),
    }
}

fn enhance_cmd(a: EnhanceArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.config.resolve()?;
    let cloud = match &a.input {
        Some(path) => read_cloud(path)?,
        None => gen_scene(&SceneSpec::with_total(a.points), cfg.seed)?.cloud,
    };
    let (enhanced, report) = run_enhance(&cfg, &cloud, a.checkpoint.as_deref())?;
    export_cloud(&enhanced, &a.out, format_for(&a.out, a.format)?)?;
    if let Some(path) = &a.report {
        save_report(&report, path)?;
    }
    writeln!(
        out,
        "enhanced {} points: {} of {} clusters kept, {} points moved (max {:.6}), config {}",
        enhanced.len(),
        report.kept_clusters,
        report.grid_clusters,
        report.moved_points,
        report.max_displacement,
        &report.config_hash[..12],
    )
    .map_err(io_err)?;
    Ok(EXIT_OK)
}

fn flops_cmd(a: FlopsArgs, out: &mut dyn Write) -> Result<i32> {
    if a.sweep {
        let grid = SweepGrid {
            out_projection: !a.no_out_projection,
            ..SweepGrid::default()
        };
        let points = sweep(&grid);
        let best = closest_to(&points, a.target)
            .ok_or_else(|| Error::InvalidArgument("empty sweep grid".into()))?;
        if a.json {
            let doc = serde_json::json!({ "grid": grid, "points": points, "target": a.target, "closest": best });
            writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("sweep serializes")).map_err(io_err)?;
            return Ok(EXIT_OK);
        }
        writeln!(out, "{:>6} {:>4} {:>6} {:>4} {:>14} {:>14} {:>14} {:>9}", "n_seq", "C", "proxy", "ffn", "self", "cross", "proxy", "reduction")
            .map_err(io_err)?;
        for p in &points {
            writeln!(
                out,
                "{:>6} {:>4} {:>6} {:>4} {:>14} {:>14} {:>14} {:>9.3}",
                p.n_seq, p.channels, p.n_proxy, p.ffn_mult, p.self_flops, p.cross_flops, p.proxy_flops, p.reduction
            )
            .map_err(io_err)?;
        }
        writeln!(
            out,
            "closest to {:.4}: n_seq={} C={} n_proxy={} ffn_mult={} layers={} reduction={:.4}",
            a.target, best.n_seq, best.channels, best.n_proxy, best.ffn_mult, grid.layers, best.reduction
        )
        .map_err(io_err)?;
        return Ok(EXIT_OK);
    }

    if a.grid == 0 {
        return Err(Error::InvalidArgument("--grid must be positive".into()));
    }
    if !(0.0..1.0).contains(&a.beta) {
        return Err(Error::InvalidArgument(format!("--beta must lie in [0, 1), got {}", a.beta)));
    }
    let n_seq = a
        .n_seq
        .unwrap_or_else(|| crate::cluster::kept_count(a.grid.pow(3), a.beta) as u64);
    let cmp = FlopsComparison::new(FlopsConfig {
        n_seq,
        n_proxy: a.proxies,
        channels: a.channels,
        ffn_mult: a.ffn_mult,
        layers: a.layers,
        variant: AttentionVariant::Proxy,
        out_projection: !a.no_out_projection,
    });
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&cmp).expect("report serializes")).map_err(io_err)?;
        return Ok(EXIT_OK);
    }
    writeln!(
        out,
        "n_seq={n_seq} n_proxy={} C={} ffn_mult={} layers={}",
        a.proxies, a.channels, a.ffn_mult, a.layers
    )
    .map_err(io_err)?;
    writeln!(
        out,
        "{:<8} {:>14} {:>14} {:>14} {:>10} {:>14} {:>12}",
        "variant", "projections", "attn_core", "ffn", "bias", "total", "params"
    )
    .map_err(io_err)?;
    for r in cmp.variants() {
        let f = &r.flops;
        writeln!(
            out,
            "{:<8} {:>14} {:>14} {:>14} {:>10} {:>14} {:>12}",
            r.config.variant.name(),
            f.projections,
            f.attention_core,
            f.ffn,
            f.bias,
            f.total,
            r.params.total
        )
        .map_err(io_err)?;
    }
    writeln!(out, "attention-core reduction (proxy vs self): {:.3}", cmp.core_reduction).map_err(io_err)?;
    writeln!(out, "total reduction (proxy vs self): {:.3}", cmp.total_reduction).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    if a.instances == 0 {
        return Err(Error::InvalidArgument("--instances must be positive".into()));
    }
    let start = Instant::now();
    let reports = gradient_suite(a.instances, a.seed)?;
    let ok = reports.iter().all(|r| r.passed());
    if a.json {
        let doc = serde_json::json!({ "tolerance": GRAD_TOLERANCE, "passed": ok, "checks": reports });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("report serializes")).map_err(io_err)?;
    } else {
        for r in &reports {
            writeln!(
                out,
                "{:<18} instances={:<4} max_rel_err={:.3e} {}",
                r.target.name(),
                r.instances,
                r.max_error,
                if r.passed() { "PASS" } else { "FAIL" }
            )
            .map_err(io_err)?;
        }
        writeln!(out, "tolerance {GRAD_TOLERANCE:e}, {:.2}s", start.elapsed().as_secs_f64()).map_err(io_err)?;
    }
    if ok {
        Ok(EXIT_OK)
    } else {
        Err(Error::Evaluation(format!("gradient error above {GRAD_TOLERANCE:e}")))
    }
}

fn bench_cmd(a: BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::fast(),
    };
    if let Some(seed) = a.seed.map_or_else(env_seed, |s| Ok(Some(s)))? {
        cfg.seed = seed;
    }
    cfg.threads = a.threads;
    cfg.validate()?;
    if a.repeats == 0 {
        return Err(Error::InvalidArgument("--repeats must be positive".into()));
    }
    let cloud = gen_scene(&SceneSpec::with_total(a.points), cfg.seed)?.cloud;
    let proxies = proxies_for(&cfg)?;
    let mut totals = Vec::with_capacity(a.repeats);
    let mut last = None;
    for _ in 0..a.repeats {
        let start = Instant::now();
        let (_, report) = enhance(&cfg, &cloud, &proxies)?;
        totals.push(start.elapsed().as_secs_f64());
        last = Some(report);
    }
    let report = last.expect("at least one repeat");
    let best = totals.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    if a.json {
        let doc = serde_json::json!({
            "points": a.points,
            "threads": a.threads,
            "repeats": a.repeats,
            "seconds": totals,
            "best": best,
            "mean": mean,
            "last_run_stages": report.timings,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("bench serializes")).map_err(io_err)?;
        return Ok(EXIT_OK);
    }
    writeln!(
        out,
        "N={} C={} L={} threads={} repeats={}",
        a.points, cfg.channels, cfg.layers, a.threads, a.repeats
    )
    .map_err(io_err)?;
    for t in &report.timings {
        writeln!(out, "  {:<18} {:>9.4}s", t.stage, t.seconds).map_err(io_err)?;
    }
    writeln!(out, "total: best {best:.3}s, mean {mean:.3}s").map_err(io_err)?;
    Ok(EXIT_OK)
}

fn export_cmd(a: ExportArgs, out: &mut dyn Write) -> Result<i32> {
    if let Some(cfg_path) = &a.config {
        let cfg = load_config(cfg_path)?;
        save_config(&cfg, &a.out)?;
        writeln!(out, "wrote resolved config {} to {}", &cfg.hash()[..12], a.out.display()).map_err(io_err)?;
        return Ok(EXIT_OK);
    }
    let input = a.input.as_ref().expect("clap requires --input without --config");
    let cloud = read_cloud(input)?;
    export_cloud(&cloud, &a.out, format_for(&a.out, a.format)?)?;
    writeln!(out, "wrote {} points to {}", cloud.len(), a.out.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("proxyform").chain(args.iter().copied());
        let code = run_cli_with(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, _, err) = run(&["flops", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--bogus"), "{err}");
        assert_eq!(run(&["nope"]).0, EXIT_USAGE);
        assert_eq!(run(&[]).0, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("gen-scene") && out.contains("gradcheck"));
    }

    #[test]
    fn flops_table_has_three_variants() {
        let (code, out, _) = run(&["flops", "--grid", "12", "--beta", "0.6", "--c", "256", "--proxies", "32"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("n_seq=691"));
        for v in ["self", "cross", "proxy"] {
            assert!(out.lines().any(|l| l.starts_with(v)), "{out}");
        }
        assert!(out.contains("attention-core reduction (proxy vs self): 0.907"), "{out}");
    }

    #[test]
    fn flops_rejects_bad_beta_at_runtime() {
        assert_eq!(run(&["flops", "--beta", "1.5"]).0, EXIT_RUNTIME);
    }

    #[test]
    fn missing_config_is_a_runtime_error() {
        let (code, _, err) = run(&["enhance", "--config", "/nonexistent/cfg.json", "--out", "/tmp/x.ply"]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("/nonexistent/cfg.json"), "{err}");
    }
}
