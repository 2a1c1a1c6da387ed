use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pascore_cli::commands::{
    cmd_attn, cmd_decode, cmd_eval, cmd_finetune, cmd_pretrain, cmd_score, cmd_synth, AttnArgs,
    DecodeArgs, DecodeSteps, EvalArgs, FinetuneArgs, PretrainArgs, ScoreArgs, ScoreMode,
};
use pascore_cli::exit_code;

/// Pronunciation scoring with an audio-conditioned masked language model.
#[derive(Parser)]
#[command(name = "pascore", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Per-token log-likelihoods from single-mask passes.
    Unsup,
    /// Regression scores from the fine-tuned head.
    Sup,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tone corpus with known audio-text alignment.
    Synth {
        /// Output directory (receives wavs/ and manifest.jsonl).
        out_dir: PathBuf,
        /// Number of utterances.
        #[arg(long)]
        n: usize,
        /// Corpus seed; identical seeds give byte-identical corpora.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Probability of detuning a token's tone (labeled 0 instead of 2).
        #[arg(long, default_value_t = 0.0)]
        corrupt_prob: f64,
    },
    /// Masked pre-training on paired audio and text.
    Pretrain {
        /// key = value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Pronunciation lexicon (word<TAB>PH1 PH2 ...) for phoneme-level runs.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Also write the vocabulary as one token per line.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Supervised fine-tuning of a pre-trained checkpoint on labeled data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Score reference transcripts against audio; JSONL reports.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "unsup")]
        mode: ModeArg,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Dump log-mel features as CSV (one file per utterance) into this directory.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Iterative mask-predict decoding plus a WER report.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Refinement steps: a positive integer, or 'n' for one per token.
        #[arg(long)]
        steps: DecodeSteps,
        /// Hypothesis file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Evaluate score reports against labeled manifests: MSE, PCC, ACC and
    /// accuracy by rating bucket.
    Eval {
        /// Score report JSONL from `score`.
        #[arg(long)]
        scores: PathBuf,
        /// Labeled manifest JSONL.
        #[arg(long)]
        labels: PathBuf,
        /// Rating buckets as lo:hi pairs, e.g. "0:0.5,0.5:1,1:1.5,1.5:2".
        #[arg(long)]
        buckets: Option<String>,
    },
    /// Export the cross-attention alignment of one utterance as CSV and PGM.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest entry id.
        #[arg(long)]
        id: String,
        /// Output prefix; writes <prefix>.csv and <prefix>.pgm.
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> pascore::Result<()> {
    match cli.command {
        Command::Synth { out_dir, n, seed, corrupt_prob } => cmd_synth(&out_dir, n, seed, corrupt_prob),
        Command::Pretrain { config, manifest, out, lexicon, vocab_out } => cmd_pretrain(PretrainArgs {
            config: config.as_deref(),
            manifest: &manifest,
            out: &out,
            lexicon: lexicon.as_deref(),
            vocab_out: vocab_out.as_deref(),
        }),
        Command::Finetune { checkpoint, manifest, out, config, lexicon } => cmd_finetune(FinetuneArgs {
            checkpoint: &checkpoint,
            manifest: &manifest,
            out: &out,
            config: config.as_deref(),
            lexicon: lexicon.as_deref(),
        }),
        Command::Score { checkpoint, manifest, mode, out, lexicon, dump_features } => cmd_score(ScoreArgs {
            checkpoint: &checkpoint,
            manifest: &manifest,
            mode: match mode {
                ModeArg::Unsup => ScoreMode::Unsupervised,
                ModeArg::Sup => ScoreMode::Supervised,
            },
            out: out.as_deref(),
            lexicon: lexicon.as_deref(),
            dump_features: dump_features.as_deref(),
        }),
        Command::Decode { checkpoint, manifest, steps, out, lexicon } => cmd_decode(DecodeArgs {
            checkpoint: &checkpoint,
            manifest: &manifest,
            steps,
            out: out.as_deref(),
            lexicon: lexicon.as_deref(),
        }),
        Command::Eval { scores, labels, buckets } => cmd_eval(EvalArgs {
            scores: &scores,
            labels: &labels,
            buckets: buckets.as_deref(),
        }),
        Command::Attn { checkpoint, manifest, id, out_prefix, lexicon } => cmd_attn(AttnArgs {
            checkpoint: &checkpoint,
            manifest: &manifest,
            id: &id,
            out_prefix: &out_prefix,
            lexicon: lexicon.as_deref(),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
