use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use qfc_lab::calibration::{calibrate, fit, Anchor, CalibrationAnchors, DeviceConfig, FreeParam};
use qfc_lab::harness::{run_criteria, run_scenario, RunContext, RunManifest};
use qfc_lab::tagio;
use qfc_lab::Error;

#[derive(Parser)]
#[command(name = "qfc", version, about = "Quantum frequency conversion simulation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run manifest (TOML). Defaults to the bundled manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Device configuration (TOML); overrides the manifest's.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only run the named scenario; repeatable.
    #[arg(long)]
    scenario: Vec<String>,
    /// Global seed; overrides the manifest's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides QFC_OUT_DIR and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios and write their artifacts.
    Run(RunArgs),
    /// Run the acceptance suite and print a pass/fail table.
    Verify(RunArgs),
    /// Fit a device configuration to anchor values.
    Calibrate {
        /// Starting device configuration. Defaults to the bundled one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Anchor file with `free` parameters and `[[anchors]]`. Without it
        /// the standard anchor set is refitted.
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Where to write the fitted configuration.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing file at `--out`.
        #[arg(long)]
        force: bool,
    },
    /// Convert a tag file between binary (.qtag) and CSV (.csv).
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// Channel to extract when writing binary from a multi-channel CSV.
        #[arg(long)]
        channel: Option<u16>,
        /// Duration for CSV files that do not record one.
        #[arg(long)]
        duration_ps: Option<u64>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorFile {
    #[serde(default)]
    free: Vec<FreeParam>,
    anchors: Vec<Anchor>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args, false),
        Command::Verify(args) => cmd_run(&args, true),
        Command::Calibrate {
            config,
            anchors,
            out,
            force,
        } => cmd_calibrate(config.as_deref(), anchors.as_deref(), &out, force),
        Command::Convert {
            input,
            output,
            channel,
            duration_ps,
        } => cmd_convert(&input, &output, channel, duration_ps),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_context(args: &RunArgs) -> qfc_lab::Result<(RunManifest, RunContext)> {
    let mut manifest = match &args.manifest {
        Some(p) => RunManifest::load(p)?,
        None => RunManifest::bundled(),
    };
    if let Some(c) = &args.config {
        manifest.config = Some(c.clone());
    }
    if !args.scenario.is_empty() {
        for name in &args.scenario {
            if !manifest.scenarios.iter().any(|s| &s.name == name) {
                return Err(Error::config(format!("no scenario named `{name}` in the manifest")));
            }
        }
        manifest.scenarios.retain(|s| args.scenario.contains(&s.name));
    }
    let seed = args.seed.unwrap_or(manifest.seed);
    let out = args.out.clone().unwrap_or_else(|| manifest.resolve_output_dir());
    let ctx = RunContext::new(manifest.device_config()?, seed, out);
    Ok((manifest, ctx))
}

fn cmd_run(args: &RunArgs, verify: bool) -> qfc_lab::Result<bool> {
    let (manifest, ctx) = load_context(args)?;
    if verify {
        let report = run_criteria(&manifest, &ctx)?;
        print!("{}", report.table());
        return Ok(report.passed());
    }
    let mut ok = true;
    for s in &manifest.scenarios {
        let summary = run_scenario(s, &ctx)?;
        let verdict = if summary.passed { "ok" } else { "FAILED" };
        println!("{:<20} {:<16} {verdict}", summary.name, s.kind.label());
        for c in summary.checks.iter().filter(|c| !c.passed) {
            println!("    {} = {:?} outside {:?}", c.metric, c.value, c.bounds);
        }
        ok &= summary.passed;
    }
    println!("artifacts in {}", ctx.out_dir.display());
    Ok(ok)
}

fn cmd_calibrate(config: Option<&Path>, anchors: Option<&Path>, out: &Path, force: bool) -> qfc_lab::Result<bool> {
    if out.exists() && !force {
        return Err(Error::config(format!("{} exists; pass --force to overwrite", out.display())));
    }
    let base = match config {
        Some(p) => DeviceConfig::load(p)?,
        None => DeviceConfig::bundled(),
    };
    let fitted = match anchors {
        None => {
            let (cfg, report) = calibrate(&base, &CalibrationAnchors::default())?;
            println!("eta_nor                 {:.10e}", report.eta_nor);
            println!("uv_absorption_coeff     {:.6}", report.uv_absorption_coeff);
            println!("mode_matching           {:.6}", report.mode_matching);
            println!("pair_rate_density       {:.6}", report.pair_rate_density);
            println!("uv_luminescence_density {:.6}", report.uv_luminescence_density);
            println!("eta_int(anchor)         {:.6}", report.reproduced_eta_internal);
            println!("ion-line noise(anchor)  {:.6} Hz", report.reproduced_ion_line_noise_hz);
            cfg
        }
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let file: AnchorFile =
                toml::from_str(&text).map_err(|e| Error::config(format!("invalid anchor file: {e}")))?;
            let (cfg, report) = fit(&base, &file.anchors, &file.free)?;
            for (param, v) in &report.params {
                println!("{param:?} = {v:.10e}");
            }
            for r in &report.residuals {
                println!(
                    "{:?}: target {:.6e}, fitted {:.6e}, residual {:+.3e}",
                    r.anchor.observable, r.anchor.target, r.fitted, r.relative
                );
            }
            cfg
        }
    };
    fs::write(out, fitted.to_toml()?)?;
    println!("wrote {} (hash {})", out.display(), fitted.hash());
    Ok(true)
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn cmd_convert(input: &Path, output: &Path, channel: Option<u16>, duration_ps: Option<u64>) -> qfc_lab::Result<bool> {
    match (is_csv(input), is_csv(output)) {
        (false, true) => {
            let stream = tagio::load_binary(input)?;
            tagio::write_csv(&[stream], fs::File::create(output)?)?;
        }
        (true, false) => {
            let streams = tagio::read_csv(fs::File::open(input)?, duration_ps)?;
            let stream = match (channel, streams.len()) {
                (Some(c), _) => streams
                    .into_iter()
                    .find(|s| s.channel == c)
                    .ok_or_else(|| Error::config(format!("channel {c} not in {}", input.display())))?,
                (None, 1) => streams.into_iter().next().expect("one stream"),
                (None, n) => return Err(Error::config(format!("CSV holds {n} channels; pick one with --channel"))),
            };
            tagio::save_binary(&stream, output)?;
        }
        _ => return Err(Error::config("convert needs one .csv and one binary tag file")),
    }
    Ok(true)
}
