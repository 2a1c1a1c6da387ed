//! Subcommand implementations. Argument parsing lives in `main.rs`; these
//! functions do the work and return library errors for exit-code mapping.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use pascore::dsp::{log_mel_spectrogram, read_wav, resample, write_features_csv, MelSpectrogram, MODEL_SAMPLE_RATE};
use pascore::metrics::{accuracy_by_rating, token_accuracy, wer, Bucket, ScorePair};
use pascore::score::{export_attention, mask_predict_decode, predict_supervised_scores, score_utterance, ScoreReport};
use pascore::text::{build_vocab, normalize_text, phonemize, Level, Lexicon, TokenSequence, Vocabulary};
use pascore::train::{finetune, pretrain, FinetuneInput, PretrainInput, TrainLogRecord};
use pascore::{Error, Result};

use crate::checkpoint::Checkpoint;
use crate::config;
use crate::manifest::{Manifest, ManifestEntry};
use crate::synth::{self, SynthOptions};
use crate::util::{attention_csv_bytes, attention_pgm_bytes, write_atomic};

/// Turns manifest transcripts into model token sequences, expanding words
/// through a lexicon when one is configured.
pub struct TextPipeline {
    pub vocab: Vocabulary,
    expander: Option<(Vocabulary, Lexicon)>,
}

impl TextPipeline {
    /// Build vocabularies from a training manifest.
    pub fn for_training(
        manifest: &Manifest,
        level: Level,
        lexicon: Option<Lexicon>,
        vocab_max_size: usize,
    ) -> Result<TextPipeline> {
        let transcripts: Vec<String> = manifest.entries.iter().map(|e| e.text.clone()).collect();
        match lexicon {
            None => {
                let vocab = build_vocab(&transcripts, level, vocab_max_size)?;
                Ok(TextPipeline { vocab, expander: None })
            }
            Some(lexicon) => {
                if level != Level::Phoneme {
                    return Err(Error::invalid_input(
                        "a lexicon expands words to phonemes; manifest level must be 'phoneme'",
                    ));
                }
                let word_vocab = word_vocab_for(&transcripts)?;
                let mut phoneme_texts = Vec::with_capacity(transcripts.len());
                for (entry, text) in manifest.entries.iter().zip(&transcripts) {
                    phoneme_texts.push(expand_to_phoneme_text(text, &lexicon).map_err(|e| {
                        Error::invalid_input(format!("entry '{}': {e}", entry.id))
                    })?);
                }
                let vocab = build_vocab(&phoneme_texts, Level::Phoneme, vocab_max_size)?;
                lexicon.validate(&vocab)?;
                Ok(TextPipeline { vocab, expander: Some((word_vocab, lexicon)) })
            }
        }
    }

    /// Reuse a checkpoint's vocabulary; the word-side vocabulary for lexicon
    /// expansion is rebuilt from the manifest at hand.
    pub fn from_checkpoint(
        vocab: Vocabulary,
        manifest: &Manifest,
        lexicon: Option<Lexicon>,
    ) -> Result<TextPipeline> {
        let expander = match lexicon {
            None => None,
            Some(lexicon) => {
                if vocab.level() != Level::Phoneme {
                    return Err(Error::invalid_input(
                        "a lexicon requires a phoneme-level checkpoint vocabulary",
                    ));
                }
                let transcripts: Vec<String> =
                    manifest.entries.iter().map(|e| e.text.clone()).collect();
                Some((word_vocab_for(&transcripts)?, lexicon))
            }
        };
        Ok(TextPipeline { vocab, expander })
    }

    pub fn encode(&self, entry: &ManifestEntry) -> Result<TokenSequence> {
        match &self.expander {
            None => Ok(self.vocab.encode(&entry.text)),
            Some((word_vocab, lexicon)) => {
                let words = word_vocab.encode(&entry.text);
                phonemize(&words, word_vocab, lexicon, &self.vocab)
                    .map_err(|e| match e {
                        Error::MissingPronunciation(w) => Error::MissingPronunciation(w),
                        other => Error::invalid_input(format!("entry '{}': {other}", entry.id)),
                    })
            }
        }
    }
}

fn word_vocab_for(transcripts: &[String]) -> Result<Vocabulary> {
    let mut unique: BTreeSet<String> = BTreeSet::new();
    for t in transcripts {
        for w in normalize_text(t).split_whitespace() {
            unique.insert(w.to_string());
        }
    }
    build_vocab(transcripts, Level::Word, 5 + unique.len().max(1))
}

fn expand_to_phoneme_text(text: &str, lexicon: &Lexicon) -> Result<String> {
    let mut parts = Vec::new();
    for word in normalize_text(text).split_whitespace() {
        let phones = lexicon
            .lookup(word)
            .ok_or_else(|| Error::MissingPronunciation(word.to_string()))?;
        parts.extend(phones.iter().map(|p| normalize_text(p)));
    }
    Ok(parts.join(" "))
}

fn load_lexicon(path: Option<&Path>) -> Result<Option<Lexicon>> {
    path.map(Lexicon::read_file).transpose()
}

fn entry_features(entry: &ManifestEntry, dir: &Path) -> Result<MelSpectrogram> {
    let wave = read_wav(&entry.audio_path(dir))?;
    let wave = resample(&wave, MODEL_SAMPLE_RATE)?;
    log_mel_spectrogram(&wave)
}

fn print_log_record(record: &TrainLogRecord) {
    match serde_json::to_string(record) {
        Ok(line) => println!("{line}"),
        Err(e) => eprintln!("warning: could not serialize log record: {e}"),
    }
}

fn write_lines(out: Option<&Path>, lines: &[String]) -> Result<()> {
    match out {
        Some(path) => {
            let mut body = lines.join("\n");
            body.push('\n');
            write_atomic(path, body.as_bytes())
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for line in lines {
                writeln!(w, "{line}")?;
            }
            Ok(())
        }
    }
}

pub fn cmd_synth(out_dir: &Path, n: usize, seed: u64, corrupt_prob: f64) -> Result<()> {
    let entries = synth::generate(out_dir, SynthOptions { n, seed, corrupt_prob })?;
    eprintln!("wrote {} utterances under {}", entries.len(), out_dir.display());
    Ok(())
}

pub struct PretrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub manifest: &'a Path,
    pub out: &'a Path,
    pub lexicon: Option<&'a Path>,
    pub vocab_out: Option<&'a Path>,
}

pub fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = config::load(args.config)?;
    let lexicon = load_lexicon(args.lexicon)?;
    let manifest = Manifest::load(args.manifest, lexicon.is_none())?;
    let level = manifest.level()?;
    let pipeline = TextPipeline::for_training(&manifest, level, lexicon, cfg.vocab_max_size)?;

    let mut inputs = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mel = entry_features(entry, &manifest.dir)?;
        let tokens = pipeline.encode(entry)?;
        inputs.push(PretrainInput { id: entry.id.clone(), mel, tokens });
    }

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = pipeline.vocab.size();
    let result = pretrain(&inputs, &pipeline.vocab, &model_cfg, &cfg.train, print_log_record)?;

    if let Some(vocab_path) = args.vocab_out {
        pipeline.vocab.write_file(vocab_path)?;
    }
    let ckpt = Checkpoint {
        config: model_cfg,
        vocab: pipeline.vocab,
        params: result.params,
        seed: cfg.train.seed,
        step: result.steps,
    };
    ckpt.save(args.out)?;
    eprintln!(
        "pre-trained {} steps (final loss {:.4}), checkpoint at {}",
        result.steps,
        result.final_loss,
        args.out.display()
    );
    Ok(())
}

pub struct FinetuneArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub lexicon: Option<&'a Path>,
}

pub fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let cfg = config::load(args.config)?;
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let lexicon = load_lexicon(args.lexicon)?;
    let manifest = Manifest::load(args.manifest, lexicon.is_none())?;
    let level = manifest.level()?;
    if level != ckpt.vocab.level() {
        return Err(Error::invalid_input(format!(
            "manifest level {level} does not match checkpoint level {}",
            ckpt.vocab.level()
        )));
    }
    let pipeline = TextPipeline::from_checkpoint(ckpt.vocab, &manifest, lexicon)?;

    let mut inputs = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mel = entry_features(entry, &manifest.dir)?;
        let tokens = pipeline.encode(entry)?;
        inputs.push(FinetuneInput { id: entry.id.clone(), mel, tokens, labels: entry.labels.clone() });
    }

    let result = finetune(ckpt.params, level, &inputs, &ckpt.config, &cfg.train, print_log_record)?;
    for id in &result.skipped {
        eprintln!("warning: utterance '{id}' has no labels; skipped");
    }

    let out_ckpt = Checkpoint {
        config: ckpt.config,
        vocab: pipeline.vocab,
        params: result.params,
        seed: cfg.train.seed,
        step: ckpt.step + result.steps,
    };
    out_ckpt.save(args.out)?;
    eprintln!(
        "fine-tuned {} steps (final loss {:.5}), checkpoint at {}",
        result.steps,
        result.final_loss,
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Unsupervised,
    Supervised,
}

pub struct ScoreArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub mode: ScoreMode,
    pub out: Option<&'a Path>,
    pub lexicon: Option<&'a Path>,
    pub dump_features: Option<&'a Path>,
}

pub fn cmd_score(args: ScoreArgs) -> Result<()> {
    let ckpt = Checkpoint::load(args.checkpoint)?;
    if args.mode == ScoreMode::Supervised && !ckpt.has_head() {
        return Err(Error::InvalidState(
            "checkpoint has no score head; fine-tune before --mode sup".into(),
        ));
    }
    let lexicon = load_lexicon(args.lexicon)?;
    let manifest = Manifest::load(args.manifest, lexicon.is_none())?;
    let level = ckpt.vocab.level();
    let pipeline = TextPipeline::from_checkpoint(ckpt.vocab, &manifest, lexicon)?;
    if let Some(dir) = args.dump_features {
        std::fs::create_dir_all(dir)?;
    }

    let mut lines = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mel = entry_features(entry, &manifest.dir)?;
        if let Some(dir) = args.dump_features {
            write_features_csv(&mel, &dir.join(format!("{}.csv", entry.id)))?;
        }
        let tokens = pipeline.encode(entry)?;
        let report = match args.mode {
            ScoreMode::Unsupervised => score_utterance(
                &entry.id,
                &mel,
                &tokens.ids,
                level,
                &ckpt.params,
                &ckpt.config,
                Some(pipeline.vocab.tokens()),
            )?,
            ScoreMode::Supervised => predict_supervised_scores(
                &entry.id,
                &mel,
                &tokens.ids,
                level,
                &ckpt.params,
                &ckpt.config,
                Some(pipeline.vocab.tokens()),
            )?,
        };
        lines.push(
            serde_json::to_string(&report)
                .map_err(|e| Error::Format(format!("report serialization: {e}")))?,
        );
    }
    write_lines(args.out, &lines)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeSteps {
    Fixed(usize),
    /// One step per token ("steps = n" in the inference-step schedule).
    Full,
}

impl std::str::FromStr for DecodeSteps {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("n") {
            return Ok(DecodeSteps::Full);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(DecodeSteps::Fixed(k)),
            _ => Err(format!("steps must be a positive integer or 'n', got '{s}'")),
        }
    }
}

pub struct DecodeArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub steps: DecodeSteps,
    pub out: Option<&'a Path>,
    pub lexicon: Option<&'a Path>,
}

pub fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let lexicon = load_lexicon(args.lexicon)?;
    let manifest = Manifest::load(args.manifest, lexicon.is_none())?;
    let pipeline = TextPipeline::from_checkpoint(ckpt.vocab, &manifest, lexicon)?;

    let mut lines = Vec::with_capacity(manifest.entries.len());
    let mut total_edits = 0.0f64;
    let mut total_ref = 0usize;
    for entry in &manifest.entries {
        let mel = entry_features(entry, &manifest.dir)?;
        let reference = pipeline.encode(entry)?;
        if reference.is_empty() {
            return Err(Error::invalid_input(format!("entry '{}': empty reference text", entry.id)));
        }
        let n = reference.len();
        let steps = match args.steps {
            DecodeSteps::Full => n,
            DecodeSteps::Fixed(k) => {
                if k > n {
                    eprintln!("warning: entry '{}': steps {k} > length {n}, clamped", entry.id);
                }
                k.min(n)
            }
        };
        let hyp = mask_predict_decode(&mel, n, steps, &ckpt.params, &ckpt.config)?;
        let utt_wer = wer(&hyp, &reference.ids)?;
        total_edits += utt_wer * n as f64;
        total_ref += n;

        let hyp_text = pipeline.vocab.decode(&TokenSequence { ids: hyp, level: reference.level });
        let row = serde_json::json!({
            "id": entry.id,
            "hyp": hyp_text,
            "ref": pipeline.vocab.decode(&reference),
            "wer": utt_wer,
        });
        lines.push(row.to_string());
    }
    write_lines(args.out, &lines)?;

    let steps_label = match args.steps {
        DecodeSteps::Full => "n".to_string(),
        DecodeSteps::Fixed(k) => k.to_string(),
    };
    let summary = serde_json::json!({
        "metric": "corpus_wer",
        "value": total_edits / total_ref as f64,
        "n": total_ref,
        "steps": steps_label,
    });
    println!("{summary}");
    Ok(())
}

pub struct EvalArgs<'a> {
    pub scores: &'a Path,
    pub labels: &'a Path,
    pub buckets: Option<&'a str>,
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let reports = load_reports(args.scores)?;
    let manifest = Manifest::load(args.labels, false)?;

    let mut predicted = Vec::new();
    let mut reference = Vec::new();
    let mut ratings = Vec::new();
    let mut argmax_pairs: Option<(Vec<u32>, Vec<u32>)> = Some((Vec::new(), Vec::new()));
    let mut level = None;

    for entry in &manifest.entries {
        let Some(labels) = &entry.labels else {
            eprintln!("warning: entry '{}' has no labels; skipped", entry.id);
            continue;
        };
        let Some(report) = reports.iter().find(|r| r.id == entry.id) else {
            eprintln!("warning: no scores for entry '{}'; skipped", entry.id);
            continue;
        };
        if labels.len() != report.tokens.len() {
            return Err(Error::invalid_input(format!(
                "entry '{}': {} labels but {} scored tokens",
                entry.id,
                labels.len(),
                report.tokens.len()
            )));
        }
        level.get_or_insert(report.level);
        for (tok, &label) in report.tokens.iter().zip(labels) {
            predicted.push(tok.scaled_score);
            reference.push(label as f64);
            ratings.push(label as f64);
            match (&mut argmax_pairs, tok.argmax_id) {
                (Some((preds, refs)), Some(am)) => {
                    preds.push(am);
                    refs.push(tok.token_id);
                }
                (pairs, None) => *pairs = None,
                _ => {}
            }
        }
    }
    if predicted.is_empty() {
        return Err(Error::invalid_input("eval: no (score, label) pairs to evaluate"));
    }

    let level = level.expect("non-empty");
    let pair = ScorePair::new(predicted, reference.clone())?;
    let mut metrics = Vec::new();
    metrics.push(serde_json::json!({"metric": "mse", "value": pair.mse(), "n": pair.len()}));
    match pair.pcc() {
        Ok(v) => metrics.push(serde_json::json!({"metric": "pcc", "value": v, "n": pair.len()})),
        Err(e) => {
            eprintln!("warning: pcc undefined: {e}");
            metrics.push(serde_json::json!({"metric": "pcc", "value": null, "n": pair.len()}));
        }
    }
    if let Some((preds, refs)) = &argmax_pairs {
        let acc = token_accuracy(preds, refs)?;
        metrics.push(serde_json::json!({"metric": "acc", "value": acc, "n": preds.len()}));

        let buckets = match args.buckets {
            Some(spec) => parse_buckets(spec)?,
            None => default_buckets(level),
        };
        let table = accuracy_by_rating(preds, refs, &ratings, &buckets)?;
        metrics.push(serde_json::json!({
            "metric": "acc_by_rating",
            "n": preds.len(),
            "buckets": table,
        }));
    } else {
        eprintln!("warning: supervised scores carry no argmax; accuracy metrics skipped");
    }

    println!(
        "{}",
        serde_json::to_string(&metrics).map_err(|e| Error::Format(format!("metrics JSON: {e}")))?
    );
    Ok(())
}

fn load_reports(path: &Path) -> Result<Vec<ScoreReport>> {
    let body = std::fs::read_to_string(path)?;
    let mut reports = Vec::new();
    for (ln, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        reports.push(serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), ln + 1))
        })?);
    }
    if reports.is_empty() {
        return Err(Error::invalid_input(format!("{}: no score reports", path.display())));
    }
    Ok(reports)
}

fn parse_buckets(spec: &str) -> Result<Vec<Bucket>> {
    let mut buckets = Vec::new();
    for part in spec.split(',') {
        let (lo, hi) = part
            .split_once(':')
            .ok_or_else(|| Error::invalid_input(format!("bucket '{part}' is not lo:hi")))?;
        let lo: f64 = lo.trim().parse().map_err(|_| Error::invalid_input(format!("bad bucket bound '{lo}'")))?;
        let hi: f64 = hi.trim().parse().map_err(|_| Error::invalid_input(format!("bad bucket bound '{hi}'")))?;
        if hi < lo {
            return Err(Error::invalid_input(format!("bucket '{part}' has hi < lo")));
        }
        buckets.push(Bucket { lo, hi });
    }
    if buckets.is_empty() {
        return Err(Error::invalid_input("no buckets given"));
    }
    Ok(buckets)
}

/// Rating buckets matching the per-level annotation ranges: quarters of the
/// 0-2 phoneme scale; 0-1 / 2-3 / 4-6 / 7-9 / 10 on the word scale.
fn default_buckets(level: Level) -> Vec<Bucket> {
    match level {
        Level::Phoneme => vec![
            Bucket { lo: 0.0, hi: 0.5 },
            Bucket { lo: 0.5, hi: 1.0 },
            Bucket { lo: 1.0, hi: 1.5 },
            Bucket { lo: 1.5, hi: 2.0 },
        ],
        Level::Word => vec![
            Bucket { lo: 0.0, hi: 2.0 },
            Bucket { lo: 2.0, hi: 4.0 },
            Bucket { lo: 4.0, hi: 7.0 },
            Bucket { lo: 7.0, hi: 10.0 },
            Bucket { lo: 10.0, hi: 10.0 },
        ],
    }
}

pub struct AttnArgs<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub id: &'a str,
    pub out_prefix: &'a Path,
    pub lexicon: Option<&'a Path>,
}

pub fn cmd_attn(args: AttnArgs) -> Result<()> {
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let lexicon = load_lexicon(args.lexicon)?;
    let manifest = Manifest::load(args.manifest, lexicon.is_none())?;
    let entry = manifest
        .find(args.id)
        .ok_or_else(|| Error::invalid_input(format!("no manifest entry with id '{}'", args.id)))?;
    let pipeline = TextPipeline::from_checkpoint(ckpt.vocab, &manifest, lexicon)?;

    let mel = entry_features(entry, &manifest.dir)?;
    let tokens = pipeline.encode(entry)?;
    let map = export_attention(&mel, &tokens.ids, &ckpt.params, &ckpt.config)?;

    let prefix = args.out_prefix.to_path_buf();
    write_atomic(&with_suffix(&prefix, "csv"), &attention_csv_bytes(&map))?;
    write_atomic(&with_suffix(&prefix, "pgm"), &attention_pgm_bytes(&map))?;
    eprintln!(
        "attention map for '{}': {} tokens x {} frames",
        args.id,
        map.n_tokens(),
        map.n_frames()
    );
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(ext);
    prefix.with_file_name(name)
}
