//! `satr`: corpus generation, feature extraction, speaker embeddings,
//! hybrid CTC/attention training, decoding, scoring, and full experiment
//! runs, as subcommands over the core library.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error,
//! 4 numeric failure.

mod commands;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "satr", version, about = "Speaker-adaptive transformer ASR toolkit")]
struct Cli {
    /// Cap all internal thread pools.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or bucket synthetic corpora.
    Corpus {
        #[command(subcommand)]
        cmd: commands::CorpusCmd,
    },
    /// Extract acoustic features and CMVN statistics.
    Features {
        #[command(subcommand)]
        cmd: commands::FeaturesCmd,
    },
    /// Train the speaker-embedding extractor and build embedding stores.
    Embed {
        #[command(subcommand)]
        cmd: commands::EmbedCmd,
    },
    /// Train an ASR system.
    Train(commands::TrainArgs),
    /// Decode a manifest with a trained checkpoint.
    Decode(commands::DecodeArgs),
    /// Score hypotheses against references with duration buckets.
    Score(commands::ScoreArgs),
    /// Merge per-system scores into a comparison table.
    Report(commands::ReportArgs),
    /// Run the full experiment matrix from a config file.
    Run(commands::RunArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("satr: --threads: {e}");
            std::process::exit(2);
        }
    }
    let result = match cli.command {
        Command::Corpus { cmd } => commands::corpus(cmd),
        Command::Features { cmd } => commands::features(cmd),
        Command::Embed { cmd } => commands::embed(cmd),
        Command::Train(args) => commands::train(args),
        Command::Decode(args) => commands::decode(args),
        Command::Score(args) => commands::score(args),
        Command::Report(args) => commands::report(args),
        Command::Run(args) => commands::run(args),
    };
    if let Err(err) = result {
        eprintln!("satr: {err}");
        let code = err
            .downcast_ref::<satr_core::Error>()
            .map(|e| e.exit_code())
            .unwrap_or(3);
        std::process::exit(code);
    }
}
