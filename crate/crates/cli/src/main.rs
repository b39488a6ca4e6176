mod args;
mod commands;

use std::path::PathBuf;

use anyhow::Result;
use asmrag_core::corpus::OptLevel;
use clap::{Parser, Subcommand};

use args::{EmbedArgs, GeneratorArgs, LibArgs, ListingArgs, ThresholdArgs};

#[derive(Debug, Parser)]
#[command(name = "asmrag", version, about = "Retrieval-based malware detection over assembly functions")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", env = "ASMRAG_LOG")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and canonicalize a listing; writes one canonical function per line.
    Ingest {
        #[command(flatten)]
        listing: ListingArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic labeled corpus and library.
    Synth {
        /// Output directory for corpus.jsonl, library.jsonl and params.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        families: usize,
        #[arg(long, default_value_t = 40)]
        per_family: usize,
        #[arg(long, default_value_t = 200)]
        benign: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Split a corpus chronologically or leave-one-optimization-level-out.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Hold out this optimization level instead of splitting by date.
        #[arg(long)]
        loo_opt: Option<OptLevel>,
        /// Extra samples added to the KB side of a leave-one-out split.
        #[arg(long)]
        wild: Option<PathBuf>,
    },
    /// Knowledge-base management.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Library index management.
    Libfilter {
        #[command(subcommand)]
        command: LibCommand,
    },
    /// Scan one sample listing against a KB.
    Scan {
        #[arg(long)]
        kb: PathBuf,
        #[command(flatten)]
        listing: ListingArgs,
        #[command(flatten)]
        lib: LibArgs,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        /// Also generate an explanation for a malicious verdict.
        #[arg(long)]
        explain: bool,
        #[command(flatten)]
        generator: GeneratorArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search tau_func and tau_file on a labeled validation corpus.
    Calibrate {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[command(flatten)]
        lib: LibArgs,
        #[arg(long, default_value = "0.5:0.85:0.05")]
        grid_func: String,
        #[arg(long, default_value = "0.05:0.30:0.05")]
        grid_file: String,
        #[arg(long, default_value_t = 0.01)]
        fpr_cap: f64,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain a scan report's anchor against its proof function.
    Explain {
        /// Verdict JSON written by `scan --out`.
        #[arg(long, visible_alias = "report")]
        verdict: PathBuf,
        #[command(flatten)]
        generator: GeneratorArgs,
        /// Print the prompt that a remote generator would receive.
        #[arg(long)]
        show_prompt: bool,
    },
    /// Report detection, attribution and Recall@k metrics on a test set.
    ///
    /// With `--kb` and `--test` an existing KB is evaluated. Otherwise a KB
    /// is built from `--corpus` (or a generated synthetic corpus) and split.
    Eval {
        #[arg(long, requires = "test")]
        kb: Option<PathBuf>,
        #[arg(long, requires = "kb")]
        test: Option<PathBuf>,
        #[arg(long, conflicts_with = "kb")]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        synth_seed: u64,
        #[arg(long)]
        loo_opt: Option<OptLevel>,
        /// Calibrate thresholds on the validation split before testing.
        #[arg(long)]
        calibrate: bool,
        /// Recall@k cutoffs.
        #[arg(long = "k", value_delimiter = ',', default_value = "1,5,10,20,50")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 0.70)]
        tau_func: f64,
        #[arg(long, default_value_t = 0.15)]
        tau_file: f64,
        /// Neighbors per function for voting.
        #[arg(long, default_value_t = 20)]
        vote_k: usize,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[command(flatten)]
        embed: EmbedArgs,
        #[command(flatten)]
        lib: LibArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the triage service.
    Serve {
        #[arg(long)]
        kb: PathBuf,
        #[command(flatten)]
        lib: LibArgs,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[command(flatten)]
        generator: GeneratorArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory with the triage UI bundle.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Audit log path (defaults to audit.jsonl in the KB directory).
        #[arg(long)]
        audit: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum KbCommand {
    /// Build a KB from a labeled corpus.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        embed: EmbedArgs,
        #[command(flatten)]
        lib: LibArgs,
    },
    /// Print entry counts per label and family.
    Stats {
        #[arg(long)]
        kb: PathBuf,
    },
    /// Promote a scan report's anchor embedding as a malicious entry.
    Promote {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Family to promote under (defaults to the report's attribution).
        #[arg(long)]
        family: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum LibCommand {
    /// Embed reference library functions into an index plus blocklist.
    Build {
        /// Library listing (function records or FlatAsm).
        #[arg(long = "from", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: asmrag_core::ListingFormat,
        /// Address range of the library image; omit for canonical input.
        #[arg(long)]
        addr_range: Option<asmrag_core::AddrRange>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Show per-function filter decisions for one listing.
    Apply {
        #[command(flatten)]
        lib: LibArgs,
        #[command(flatten)]
        listing: ListingArgs,
    },
    /// Grid-search tau_lib against known library and malicious functions.
    Calibrate {
        #[arg(long)]
        lib: PathBuf,
        /// Known library functions (JSONL function records, canonical).
        #[arg(long)]
        pos: PathBuf,
        /// Known malicious functions (JSONL function records, canonical).
        #[arg(long)]
        neg: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Validation corpus for the downstream detection F1.
        #[arg(long)]
        val: PathBuf,
        #[arg(long, default_value = "0.80:0.99:0.01")]
        grid: String,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match cli.command {
        Command::Ingest { listing, out } => commands::ingest(&listing, out.as_deref()),
        Command::Synth {
            out,
            families,
            per_family,
            benign,
            noise,
            seed,
        } => commands::synth(
            &out,
            asmrag_core::synth::SynthParams {
                families,
                per_family,
                benign,
                noise,
                seed,
                ..Default::default()
            },
        ),
        Command::Split {
            corpus,
            out_dir,
            loo_opt,
            wild,
        } => commands::split(&corpus, &out_dir, loo_opt, wild.as_deref()),
        Command::Kb { command } => match command {
            KbCommand::Build { corpus, out, embed, lib } => commands::kb_build(&corpus, &out, &embed, &lib),
            KbCommand::Stats { kb } => commands::kb_stats(&kb),
            KbCommand::Promote { kb, report, family } => commands::kb_promote(&kb, &report, family.as_deref()),
        },
        Command::Libfilter { command } => match command {
            LibCommand::Build {
                input,
                format,
                addr_range,
                out,
                embed,
            } => commands::lib_build(&input, format, addr_range, &out, &embed),
            LibCommand::Apply { lib, listing } => commands::lib_apply(&lib, &listing),
            LibCommand::Calibrate {
                lib,
                pos,
                neg,
                kb,
                val,
                grid,
                thresholds,
                out,
            } => commands::lib_calibrate(&lib, &pos, &neg, &kb, &val, &grid, &thresholds, out.as_deref()),
        },
        Command::Scan {
            kb,
            listing,
            lib,
            thresholds,
            explain,
            generator,
            out,
        } => commands::scan(&kb, &listing, &lib, &thresholds, explain.then_some(&generator), out.as_deref()),
        Command::Calibrate {
            kb,
            val,
            lib,
            grid_func,
            grid_file,
            fpr_cap,
            k,
            out,
        } => commands::calibrate(&kb, &val, &lib, &grid_func, &grid_file, fpr_cap, k, out.as_deref()),
        Command::Explain {
            verdict,
            generator,
            show_prompt,
        } => commands::explain(&verdict, &generator, show_prompt),
        Command::Eval {
            kb,
            test,
            corpus,
            synth_seed,
            loo_opt,
            calibrate,
            ks,
            tau_func,
            tau_file,
            vote_k,
            calibration,
            embed,
            lib,
            out,
        } => commands::eval(commands::EvalArgs {
            kb,
            test,
            corpus,
            synth_seed,
            loo_opt,
            calibrate,
            ks,
            embed,
            lib,
            thresholds: ThresholdArgs {
                tau_func,
                tau_file,
                k: vote_k,
                calibration,
            },
            out,
        }),
        Command::Serve {
            kb,
            lib,
            thresholds,
            generator,
            host,
            port,
            static_dir,
            audit,
        } => commands::serve(commands::ServeArgs {
            kb,
            lib,
            thresholds,
            generator,
            host,
            port,
            static_dir,
            audit,
        }),
    }
}
