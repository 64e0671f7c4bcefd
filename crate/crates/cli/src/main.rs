//! `fbfq`: quantize tensors, run MatMuls on the reference, fused and
//! simulated engines, inspect GGUF files, replay accelerator programs and
//! sweep the cycle model.

mod commands;
mod fbft;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fbfq_core::codec::Variant;
use fbfq_core::driver::{AccelCaps, LayerDims};
use fbfq_core::Error;

#[derive(Parser)]
#[command(
    name = "fbfq",
    version,
    about = "Block floating-point quantization and accelerator simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize an fp32 FBFT file (or raw little-endian fp32) into superblocks.
    Quantize {
        input: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Quantize along columns (for MatMul inputs: writes one Q8_K row per column).
        #[arg(long)]
        columns: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fmt: FormatArg,
    },
    /// Decode a quantized FBFT file back to fp32.
    Dequantize {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multiply weights (M×K) by inputs (K×N).
    Matmul(MatmulArgs),
    /// List GGUF tensors and the per-type element histogram.
    Inspect {
        file: PathBuf,
        #[command(flatten)]
        fmt: FormatArg,
    },
    /// Closed-form cycle estimates for a list of layer shapes.
    Bench {
        /// Layer shapes as MxKxN, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<LayerDims>,
        #[arg(long, value_enum, default_value_t = VariantArg::Q2k)]
        variant: VariantArg,
        #[arg(long, default_value_t = AccelCaps::default())]
        caps: AccelCaps,
        #[arg(long, value_delimiter = ',', default_value = "16")]
        lanes: Vec<usize>,
        #[arg(long, default_value_t = 200.0)]
        clock_mhz: f64,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run a recorded .fbfq program on a fresh simulator.
    Replay {
        program: PathBuf,
        /// Layer shape the program was built for; reorders the output into a matrix.
        #[arg(long)]
        dims: Option<LayerDims>,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        fmt: FormatArg,
    },
    /// Write a seeded fixture.
    Gen {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Pattern::Normal)]
        pattern: Pattern,
        /// Store quantized; `ones` then yields the canonical all-ones superblocks.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct MatmulArgs {
    /// FBFT weights: fp32 (quantized with --variant) or Q2_K/Q3_K.
    #[arg(long)]
    weights: PathBuf,
    /// FBFT inputs: fp32 K×N, or Q8_K with one row per column.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Engine::Fused)]
    engine: Engine,
    /// Weight variant when the weight file is fp32.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Report error statistics against the reference engine.
    #[arg(long)]
    compare: bool,
    #[command(flatten)]
    sim: SimArgs,
    /// Write the result as an fp32 FBFT file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the accelerator program (engine=sim) as .fbfq.
    #[arg(long)]
    dump_program: Option<PathBuf>,
    #[command(flatten)]
    fmt: FormatArg,
}

#[derive(Args, Clone)]
struct SimArgs {
    /// weight_cache_sb:input_cache_sb:n_fifos:out_buf_elems
    #[arg(long, default_value_t = AccelCaps::default())]
    caps: AccelCaps,
    #[arg(long, default_value_t = 16)]
    lanes: usize,
    #[arg(long, default_value_t = 200.0)]
    clock_mhz: f64,
}

#[derive(Args, Clone, Copy)]
struct FormatArg {
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
enum Engine {
    Ref,
    Fused,
    Sim,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Q2k,
    Q3k,
    Q8k,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Q2k => Variant::Q2K,
            VariantArg::Q3k => Variant::Q3K,
            VariantArg::Q8k => Variant::Q8K,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pattern {
    Normal,
    Uniform,
    Ones,
    Zeros,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fbfq: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
