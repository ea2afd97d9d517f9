use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use daxs_cli::input::{load_image, load_json, load_seeds, load_tracks, InputError};
use daxs_cli::pipeline::{
    coupling_table, run_align_average, run_fit, run_sign_compare, AnticrossingSpec, PipelineConfig,
};
use daxs_cli::png::encode_png;
use daxs_core::model::SignClass;
use daxs_core::sim::{render_daxs_image, LeadModel, SimConfig};
use daxs_core::tracks::ExtractionConfig;
use daxs_core::{DaxsError, ModelParams};

#[derive(Debug, Parser)]
#[command(
    name = "daxs",
    version,
    about = "Delta-axis spectroscopy of double quantum dots"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic DAXS image from model parameters.
    Simulate(SimulateArgs),
    /// Extract peak tracks along seed curves and fit the Hamiltonian.
    Fit(FitArgs),
    /// Register scans on an anticrossing vertex and average them.
    AlignAverage(AlignAverageArgs),
    /// Fit both sign classes and build the coupling error budget.
    SignCompare(SignCompareArgs),
    /// Serve images, fit jobs and overlays over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SignClassArg {
    A,
    B,
}

impl From<SignClassArg> for SignClass {
    fn from(c: SignClassArg) -> Self {
        match c {
            SignClassArg::A => SignClass::A,
            SignClassArg::B => SignClass::B,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model parameters (JSON).
    #[arg(long)]
    pub params: PathBuf,
    /// Simulation settings: axes, linewidth, visibility, noise (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output DAXS image document.
    #[arg(long)]
    pub out: PathBuf,
    /// Noise seed; overrides the one in the settings file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lead resonances to draw (JSON).
    #[arg(long)]
    pub leads: Option<PathBuf>,
    /// Reservoir gate voltage for the lead resonances, mV.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub lead_voltage: f64,
    /// Also write a heatmap PNG.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// DAXS image document.
    #[arg(long)]
    pub image: PathBuf,
    /// Seed curves document.
    #[arg(long)]
    pub seeds: PathBuf,
    /// Extraction and fit settings (JSON with `extraction` and `fit`).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the sign class in the settings file.
    #[arg(long, value_enum)]
    pub sign_class: Option<SignClassArg>,
    /// Output fit result document.
    #[arg(long)]
    pub out: PathBuf,
    /// Output peak tracks CSV.
    #[arg(long)]
    pub tracks_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignAverageArgs {
    /// DAXS image documents; the first is the reference.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Seed curves document used to extract the anticrossing track.
    #[arg(long)]
    pub seeds: PathBuf,
    /// Track following the lower branch of the registration anticrossing.
    #[arg(long)]
    pub track: String,
    /// Detuning window around the anticrossing.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub window: Vec<f64>,
    /// Dot linewidth (FWHM) used for extraction.
    #[arg(long, default_value_t = daxs_core::sim::DEFAULT_LINEWIDTH)]
    pub linewidth: f64,
    /// Output averaged image document.
    #[arg(long)]
    pub out: PathBuf,
    /// Output alignment report.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct SignCompareArgs {
    /// Peak tracks CSV, one per scan.
    #[arg(long = "tracks", required = true)]
    pub tracks: Vec<PathBuf>,
    /// Seed curves whose branch labels bind the tracks.
    #[arg(long)]
    pub seeds: PathBuf,
    /// Extraction and fit settings (JSON with `extraction` and `fit`).
    #[arg(long)]
    pub config: PathBuf,
    /// Class whose fits give the headline values.
    #[arg(long, value_enum)]
    pub sign_class: Option<SignClassArg>,
    /// Output comparison report.
    #[arg(long)]
    pub out: PathBuf,
    /// Output error budget CSV; needs at least two scans.
    #[arg(long)]
    pub budget_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Directory holding images, artifacts and job records.
    #[arg(long, env = "DAXS_DATA_DIR", default_value = "daxs-data")]
    pub data_dir: PathBuf,
}

/// Invalid documents and settings are input errors; everything else is not.
fn core(e: DaxsError) -> anyhow::Error {
    match e {
        DaxsError::InvalidInput(_)
        | DaxsError::Format(_)
        | DaxsError::Json(_)
        | DaxsError::Csv(_) => InputError::new(e.to_string()).into(),
        other => other.into(),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::AlignAverage(a) => align_average(a),
        Command::SignCompare(a) => sign_compare(a),
        Command::Serve(a) => serve(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let params: ModelParams = load_json(&a.params)?;
    let mut cfg: SimConfig = load_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.rng_seed = seed;
    }
    let leads: Option<LeadModel> = a.leads.as_deref().map(load_json).transpose()?;
    let img = render_daxs_image(&params, &cfg, leads.as_ref(), a.lead_voltage).map_err(core)?;
    write(&a.out, img.to_json().map_err(core)?)?;
    if let Some(png) = &a.png {
        write(png, encode_png(&img)?)?;
    }
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let img = load_image(&a.image)?;
    let seeds = load_seeds(&a.seeds)?;
    let mut cfg: PipelineConfig = load_json(&a.config)?;
    if let Some(c) = a.sign_class {
        cfg.fit.sign_class = c.into();
    }
    let run = run_fit(&img, &seeds, &cfg).map_err(core)?;
    for w in &run.fit.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &a.tracks_out {
        write(path, run.extraction.tracks.to_csv().map_err(core)?)?;
    }
    write(&a.out, run.fit.to_json().map_err(core)?)?;
    println!(
        "sign class {:?}, s = {:.5}, offset = {:.4} GHz, rms = {:.4} GHz, converged = {}",
        run.fit.sign_class,
        run.fit.s,
        run.fit.delta_offset,
        run.fit.residual_rms,
        run.fit.converged
    );
    for (c, v, se) in coupling_table(&run.fit) {
        match se {
            Some(se) => println!("{c:>4} {v:>10.4} +- {se:.4}"),
            None => println!("{c:>4} {v:>10.4}"),
        }
    }
    Ok(())
}

fn align_average(a: AlignAverageArgs) -> Result<()> {
    if a.images.len() < 2 {
        return Err(InputError::new(format!(
            "averaging needs at least two images, got {}",
            a.images.len()
        ))
        .into());
    }
    let images = a
        .images
        .iter()
        .map(|p| {
            let id = p.file_stem().map_or_else(
                || p.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            );
            load_image(p).map(|img| (id, img))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = load_seeds(&a.seeds)?;
    let spec = AnticrossingSpec {
        track_id: a.track,
        x_range: [a.window[0], a.window[1]],
        extraction: ExtractionConfig::for_linewidth(a.linewidth),
    };
    let (avg, report) = run_align_average(&images, &seeds, &spec).map_err(core)?;
    write(&a.out, avg.to_json().map_err(core)?)?;
    write(&a.report, serde_json::to_string_pretty(&report)?)?;
    for r in &report.images {
        println!(
            "{}: vertex pixel {:?}, shift {:?}",
            r.image_id, r.ref_pixel, r.shift
        );
    }
    Ok(())
}

fn sign_compare(a: SignCompareArgs) -> Result<()> {
    let seeds = load_seeds(&a.seeds)?;
    let mut cfg: PipelineConfig = load_json(&a.config)?;
    if let Some(c) = a.sign_class {
        cfg.fit.sign_class = c.into();
    }
    if a.budget_out.is_some() && a.tracks.len() < 2 {
        return Err(InputError::new("an error budget needs tracks from at least two scans").into());
    }
    let scans = a
        .tracks
        .iter()
        .map(|p| {
            load_tracks(p).map(|mut t| {
                t.bind(&seeds);
                t
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = run_sign_compare(&scans, &cfg.fit, cfg.extraction.linewidth).map_err(core)?;
    write(&a.out, serde_json::to_string_pretty(&report)?)?;
    if let (Some(path), Some(budget)) = (&a.budget_out, &report.budget) {
        write(path, budget.to_csv().map_err(core)?)?;
    }
    for (k, scan) in report.scans.iter().enumerate() {
        let diffs: Vec<String> = scan
            .differences
            .iter()
            .map(|d| format!("{} {:.1}%", d.coupling, d.percent))
            .collect();
        println!("scan {k}: {}", diffs.join(", "));
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(daxs_cli::service::serve(addr, a.data_dir))?;
    Ok(())
}
