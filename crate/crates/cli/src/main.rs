use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use adtool::run::{parse_assignment, parse_orders, parse_ranges, DEFAULT_RNG_SEED};
use adtool::{BenchOptions, CliError, Format, Report};
use clap::{Args, Parser, Subcommand};

#[derive(Clone)]
struct Orders(Vec<u32>);

#[derive(Clone)]
struct Ranges(Vec<(String, f64, f64)>);

#[derive(Parser)]
#[command(
    name = "adtool",
    version,
    about = "High-order derivatives of formulas by Taylor backpropagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Formula file, or `-` for standard input.
    file: PathBuf,
    /// Input value, repeatable.
    #[arg(long = "set", value_name = "VAR=VAL", value_parser = parse_assignment)]
    set: Vec<(String, f64)>,
    /// Output seed, repeatable. Seeded statements become the outputs.
    #[arg(long = "seed", value_name = "OUT=VAL", value_parser = parse_assignment)]
    seed: Vec<(String, f64)>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate outputs and selected derivatives.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Derivative request such as `d(V)*d(S)` or `d<2>(V)`, repeatable.
        #[arg(long = "request", value_name = "REQUEST")]
        request: Vec<String>,
    },
    /// All derivatives up to a total order.
    Tensor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        order: u32,
        /// Differentiation variables, default all inputs.
        #[arg(long, value_delimiter = ',')]
        vars: Option<Vec<String>>,
    },
    /// Time primal evaluation against full tensors of increasing order.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0..5", value_parser = |s: &str| parse_orders(s).map(Orders))]
        orders: Orders,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        /// Per-repetition input ranges, e.g. `S=90:110,V=0.1:0.2`.
        #[arg(long = "randomize-inputs", value_name = "SPEC", value_parser = |s: &str| parse_ranges(s).map(Ranges))]
        randomize_inputs: Option<Ranges>,
        /// Differentiation variables, default all inputs.
        #[arg(long, value_delimiter = ',')]
        vars: Option<Vec<String>>,
        #[arg(long = "rng-seed", default_value_t = DEFAULT_RNG_SEED)]
        rng_seed: u64,
    },
}

fn read_source(path: &PathBuf) -> Result<String, CliError> {
    let mut text = String::new();
    let result = if path.as_os_str() == "-" {
        std::io::stdin().read_to_string(&mut text).map(|_| ())
    } else {
        std::fs::read_to_string(path).map(|t| text = t)
    };
    result.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(text)
}

fn run(cli: Cli) -> Result<(Report, Format), CliError> {
    if let Ok(cap) = std::env::var("ADTOOL_ORDER_CAP") {
        let cap: u32 = cap
            .parse()
            .map_err(|_| CliError::Usage(format!("ADTOOL_ORDER_CAP: `{cap}` is not an integer")))?;
        adtool_core::set_order_cap(cap)
            .map_err(|e| CliError::Usage(format!("ADTOOL_ORDER_CAP: {e}")))?;
    }
    match cli.command {
        Command::Eval { common, request } => {
            let program = adtool::parse(&read_source(&common.file)?)?;
            let report = adtool::eval(&program, &common.set, &request, &common.seed)?;
            Ok((report, common.format))
        }
        Command::Tensor {
            common,
            order,
            vars,
        } => {
            let program = adtool::parse(&read_source(&common.file)?)?;
            let report =
                adtool::tensor(&program, &common.set, order, vars.as_deref(), &common.seed)?;
            Ok((report, common.format))
        }
        Command::Bench {
            common,
            orders,
            reps,
            randomize_inputs,
            vars,
            rng_seed,
        } => {
            let program = adtool::parse(&read_source(&common.file)?)?;
            let opts = BenchOptions {
                orders: orders.0,
                reps,
                ranges: randomize_inputs.map(|r| r.0).unwrap_or_default(),
                vars,
                rng_seed,
            };
            let report = adtool::bench(&program, &common.set, &common.seed, &opts)?;
            Ok((report, common.format))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((report, Format::Json)) => {
            println!("{}", report.to_json());
            ExitCode::SUCCESS
        }
        Ok((report, Format::Csv)) => {
            print!("{}", report.to_csv());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
