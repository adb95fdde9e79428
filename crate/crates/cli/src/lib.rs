//! Command implementations behind the `roc` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use retina_roc::dual::{default_cache_root, dual_decode, DEFAULT_BLOCK_SIZE};
use retina_roc::frame_bounds::verify_frame_condition;
use retina_roc::image_io::{psnr_8bit, read_pgm, write_pgm};
use retina_roc::{
    AnalysisOperator, Boundary, DoGParams, DualBuildOptions, DualOperatorCache, Error, GridSpec, Image,
    OperatorOptions, RankOrderCode,
};

/// Condition number quoted for the 257×257 frame, printed next to ours.
pub const REFERENCE_CONDITION: f64 = 16.0;

pub const MIN_BLOCK_SIZE: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "roc", version, about = "Rank-order retina image codec")]
pub struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a square 8-bit PGM into a rank order code.
    Encode {
        input: PathBuf,
        output: PathBuf,
        /// Number of layers (defaults to the maximum for the image size).
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, value_enum, default_value_t = BoundaryArg::Zero)]
        boundary: BoundaryArg,
    },
    /// Decode a rank order code into a PGM.
    Decode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Straightforward)]
        mode: Mode,
        /// Fraction of the code to keep, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Original image, for a PSNR report.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        cache: CacheArgs,
        /// Build the dual operator when it is not cached yet.
        #[arg(long)]
        build_dual: bool,
    },
    /// Compute and cache the inverse frame operator for one image size.
    BuildDual {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, value_enum, default_value_t = BoundaryArg::Zero)]
        boundary: BoundaryArg,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Report frame bounds and conditioning for one image size.
    Analyze {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as key=value lines.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// PSNR between two 8-bit PGMs.
    Psnr { a: PathBuf, b: PathBuf },
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    /// Cache root (defaults to $ROC_CACHE_DIR or the user cache directory).
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Straightforward,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundaryArg {
    Zero,
    Periodic,
}

impl From<BoundaryArg> for Boundary {
    fn from(b: BoundaryArg) -> Self {
        match b {
            BoundaryArg::Zero => Boundary::ZeroPad,
            BoundaryArg::Periodic => Boundary::Periodic,
        }
    }
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_RESOURCE: i32 = 5;

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) => EXIT_USAGE,
            Error::UnsupportedInput(_) | Error::Format { .. } | Error::Corruption(_) => EXIT_FORMAT,
            Error::NotPositiveDefinite { .. } | Error::Consistency(_) | Error::FrameConditionViolated { .. } => {
                EXIT_NUMERICAL
            }
            Error::Resource(_) | Error::Storage { .. } | Error::Io(_) => EXIT_RESOURCE,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError { code: EXIT_RESOURCE, message: format!("{}: {e}", path.display()) }
}

/// Runs one command and returns the text it prints on success.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Encode { input, output, layers, boundary } => encode(&input, &output, layers, boundary.into()),
        Command::Decode { input, output, mode, fraction, reference, cache, build_dual } => {
            decode(&input, &output, mode, fraction, reference.as_deref(), &cache, build_dual)
        }
        Command::BuildDual { size, layers, boundary, cache } => build_dual(size, layers, boundary.into(), &cache),
        Command::Analyze { size, layers, trials, seed, output } => analyze(size, layers, trials, seed, output.as_deref()),
        Command::Psnr { a, b } => psnr(&a, &b),
    }
}

fn operator(size: usize, layers: Option<usize>, boundary: Boundary) -> CliResult<AnalysisOperator> {
    let params = DoGParams::default();
    let grid = match layers {
        Some(k) => GridSpec::new(size, k, &params)?,
        None => GridSpec::with_max_layers(size, &params)?,
    };
    Ok(AnalysisOperator::with_options(grid, params, OperatorOptions { boundary, ..Default::default() })?)
}

fn build_options(cache: &CacheArgs) -> CliResult<DualBuildOptions> {
    if cache.block_size < MIN_BLOCK_SIZE {
        return Err(CliError::usage(format!(
            "--block-size must be at least {MIN_BLOCK_SIZE}, got {}",
            cache.block_size
        )));
    }
    Ok(DualBuildOptions {
        block_size: cache.block_size,
        cache_root: cache.cache.clone().unwrap_or_else(default_cache_root),
    })
}

fn encode(input: &Path, output: &Path, layers: Option<usize>, boundary: Boundary) -> CliResult<String> {
    let img = read_pgm(input)?;
    let op = operator(img.side(), layers, boundary)?;
    let code = RankOrderCode::from_image(&op, &img)?;
    fs::write(output, code.serialize()).map_err(|e| io_error(output, e))?;
    let g = op.grid();
    Ok(format!(
        "encoded {} -> {}: N={} K={} cells={}",
        input.display(),
        output.display(),
        g.image_side,
        g.layer_count,
        g.total_cells
    ))
}

fn decode(
    input: &Path,
    output: &Path,
    mode: Mode,
    fraction: f64,
    reference: Option<&Path>,
    cache: &CacheArgs,
    build: bool,
) -> CliResult<String> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::usage(format!("--fraction must lie in (0, 1], got {fraction}")));
    }
    let options = build_options(cache)?;
    let reference = reference.map(read_pgm).transpose()?;
    let bytes = fs::read(input).map_err(|e| io_error(input, e))?;
    let code = RankOrderCode::deserialize(&bytes)?;
    let h = code.header();
    let op = AnalysisOperator::with_options(
        h.grid()?,
        h.params,
        OperatorOptions { boundary: h.boundary, ..Default::default() },
    )?;
    let kept = code.truncate(fraction)?;
    let img = match mode {
        Mode::Straightforward => kept.normalized_straightforward_decode(&op)?,
        Mode::Dual => {
            let cache = match DualOperatorCache::open(&op, &options.cache_root)? {
                Some(c) => c,
                None if build => DualOperatorCache::build(&op, &options)?,
                None => {
                    let g = op.grid();
                    return Err(CliError {
                        code: EXIT_RESOURCE,
                        message: format!(
                            "no dual operator cached under {} for N={} K={}; run `roc build-dual --size {} --layers {} --cache {}` or pass --build-dual",
                            options.cache_root.display(),
                            g.image_side,
                            g.layer_count,
                            g.image_side,
                            g.layer_count,
                            options.cache_root.display()
                        ),
                    });
                }
            };
            dual_decode(&op, &cache, &kept)?
        }
    };
    write_pgm(output, &img)?;
    let mode_name = match mode {
        Mode::Straightforward => "straightforward",
        Mode::Dual => "dual",
    };
    let mut line = format!("mode={mode_name} N_s={} fraction={fraction}", kept.len());
    if let Some(r) = reference {
        line.push_str(&format!(" psnr={}", format_db(reconstruction_psnr(&img, &r)?)));
    }
    Ok(line)
}

fn reconstruction_psnr(img: &Image, reference: &Image) -> CliResult<f64> {
    Ok(psnr_8bit(img, reference)?)
}

fn build_dual(size: usize, layers: Option<usize>, boundary: Boundary, cache: &CacheArgs) -> CliResult<String> {
    let options = build_options(cache)?;
    let op = operator(size, layers, boundary)?;
    let built = DualOperatorCache::build(&op, &options)?;
    Ok(format!(
        "{} {}: residual={:e}",
        if built.was_hit() { "cached" } else { "built" },
        built.path().display(),
        built.residual()
    ))
}

fn analyze(size: usize, layers: Option<usize>, trials: usize, seed: u64, output: Option<&Path>) -> CliResult<String> {
    let op = operator(size, layers, Boundary::ZeroPad)?;
    let report = verify_frame_condition(&op, trials, seed)?;
    let reference = format!("reference_condition={REFERENCE_CONDITION}");
    if let Some(path) = output {
        let text = format!("{}{reference}\n", report.to_key_value());
        fs::write(path, text).map_err(|e| io_error(path, e))?;
    }
    Ok(format!("{}{reference}", report.to_table()))
}

fn psnr(a: &Path, b: &Path) -> CliResult<String> {
    let (a, b) = (read_pgm(a)?, read_pgm(b)?);
    if a.side() != b.side() {
        return Err(CliError::usage(format!("image sides differ: {} and {}", a.side(), b.side())));
    }
    Ok(format_db(psnr_8bit(&a, &b)?))
}

/// `inf` for identical inputs, otherwise dB with four decimals.
pub fn format_db(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_owned()
    } else {
        format!("{db:.4}")
    }
}
