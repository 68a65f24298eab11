//! `quietstyle` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or file-format error,
//! 3 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use quietstyle::align::AlignmentPlan;
use quietstyle::dsp::{self, load_wav, mix_at_snr, stft_mel, write_wav, MelSpectrogram};
use quietstyle::nn::Checkpoint;
use quietstyle::pipeline::{evaluate, nonparallel_transfer, train, Dataset, Model, TrainConfig};
use quietstyle::teacher::{ProsodyTeacher, StyleTeacher};
use quietstyle::tts::PhonemeSequence;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "quietstyle", version, about = "Noise-robust style transfer toolkit")]
#[command(after_help = "Exit codes: 0 ok, 1 usage error, 2 data/format error, 3 numerical failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus: WAV files, noise clips and manifest.jsonl.
    GenCorpus {
        /// Output directory (created if missing).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of utterances.
        #[arg(long, value_name = "N", default_value_t = 220)]
        utterances: usize,
        #[arg(long, value_name = "U64", default_value_t = 7)]
        seed: u64,
    },
    /// Mix speech with noise at a target SNR.
    Mix {
        /// Target SNR in dB.
        #[arg(long, value_name = "DB", allow_negative_numbers = true)]
        snr: f64,
        #[arg(value_name = "SPEECH_WAV")]
        speech: PathBuf,
        #[arg(value_name = "NOISE_WAV")]
        noise: PathBuf,
        #[arg(value_name = "OUT_WAV")]
        out: PathBuf,
    },
    /// Log-mel spectrogram plus teacher style features of a WAV file.
    Features {
        #[arg(value_name = "IN_WAV")]
        input: PathBuf,
        /// Output container holding mel, hop, win, fft, sr, style and global.
        #[arg(value_name = "OUT_QSC")]
        out: PathBuf,
    },
    /// Train on the synthetic corpus.
    Train {
        /// Config file; defaults are used when omitted.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Run directory for metrics and checkpoints.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
    /// Regenerate style features from noisy audio; one JSON line per input.
    Sample {
        #[arg(long, value_name = "QSC")]
        model: PathBuf,
        /// Sampler steps; 0 uses the model's training schedule length.
        #[arg(long, value_name = "N", default_value_t = 0)]
        steps: usize,
        #[arg(long, value_name = "U64", default_value_t = 0)]
        seed: u64,
        /// Print only codeword indices, not the features.
        #[arg(long)]
        codes_only: bool,
        #[arg(value_name = "WAV", required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Describe the style-to-text alignment between two frame counts.
    Align {
        #[arg(long, value_name = "N")]
        t_style: usize,
        #[arg(long, value_name = "N")]
        t_text: usize,
        /// Print the per-frame plan instead of the summary.
        #[arg(long)]
        dump_plan: bool,
    },
    /// Evaluate a trained model on its held-out split; JSON to stdout.
    Eval {
        #[arg(long, value_name = "QSC")]
        model: PathBuf,
        /// SNRs in dB; defaults to the model config's evaluation SNRs.
        #[arg(long, value_name = "DB", value_delimiter = ',', allow_negative_numbers = true)]
        snr: Vec<f64>,
        /// Also report the clean-reference row.
        #[arg(long)]
        clean: bool,
        /// Limit on held-out utterances; 0 uses all.
        #[arg(long, value_name = "N", default_value_t = 0)]
        limit: usize,
        #[arg(long, value_name = "U64", default_value_t = 99)]
        seed: u64,
    },
    /// Speak a phoneme sequence in the style of a (noisy) reference.
    Transfer {
        #[arg(long, value_name = "QSC")]
        model: PathBuf,
        /// Reference WAV.
        #[arg(long = "ref", value_name = "WAV")]
        reference: PathBuf,
        /// Phoneme ids, e.g. "ids:3,1,4,1,5".
        #[arg(long, value_name = "IDS")]
        text: String,
        /// Frames per phoneme; predicted when omitted.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        durations: Option<Vec<usize>>,
        /// Output mel container.
        #[arg(long, value_name = "QSC")]
        out: PathBuf,
        /// Sampler steps; 0 uses the model's training schedule length.
        #[arg(long, value_name = "N", default_value_t = 0)]
        steps: usize,
        #[arg(long, value_name = "U64", default_value_t = 0)]
        seed: u64,
    },
    /// Print the full default training config.
    PrintDefaults,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<quietstyle::Error>() {
            return if err.is_numerical() {
                EXIT_NUMERICAL
            } else if err.is_data_error() {
                EXIT_DATA
            } else {
                EXIT_USAGE
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus { out, utterances, seed } => gen_corpus(&out, utterances, seed),
        Command::Mix { snr, speech, noise, out } => {
            let s = load_wav(&speech).with_context(|| format!("reading {}", speech.display()))?;
            let n = load_wav(&noise).with_context(|| format!("reading {}", noise.display()))?;
            let m = mix_at_snr(&s, &n, snr)?;
            write_wav(&m.mixture, &out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("measured snr {:.6} dB, normalization {:.6}", m.measured_snr_db(), m.scale);
            Ok(())
        }
        Command::Features { input, out } => {
            let wave = load_wav(&input).with_context(|| format!("reading {}", input.display()))?;
            let mel = stft_mel(&wave)?;
            let teacher = ProsodyTeacher::default();
            let style = teacher.extract_style_checked(&wave, &mel)?;
            let global = teacher.global_embedding(&wave)?;
            let mut ck = mel.to_checkpoint();
            ck.insert("style", style.frames);
            ck.insert("global", global.to_tensor());
            ck.meta.insert("teacher".into(), teacher.name().into());
            ck.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", json!({ "frames": mel.num_frames(), "style_dim": teacher.style_dim() }));
            Ok(())
        }
        Command::Train { config, out, seed } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let teacher = ProsodyTeacher::new(
                cfg.teacher.style_dim,
                cfg.teacher.global_dim,
                cfg.teacher.projection_seed,
            )?;
            let data = Dataset::synthetic(&cfg, &teacher)?;
            let outcome = train(&cfg, &data, Some(&out))?;
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &outcome.eval)?;
            writeln!(stdout)?;
            Ok(())
        }
        Command::Sample {
            model,
            steps,
            seed,
            codes_only,
            inputs,
        } => {
            let model = load_model(&model)?;
            let steps = if steps == 0 { model.schedule.steps } else { steps };
            let mut stdout = std::io::stdout().lock();
            for input in inputs {
                let wave = load_wav(&input).with_context(|| format!("reading {}", input.display()))?;
                let mel = stft_mel(&wave)?;
                let style = model.sample_style(&mel.frames, steps, seed)?;
                let codes = model.style_codes(&style)?;
                let mut rec = json!({
                    "input": input.to_string_lossy(),
                    "frames": style.rows(),
                    "codes": codes,
                });
                if !codes_only {
                    let rows: Vec<&[f64]> = (0..style.rows()).map(|r| style.row(r)).collect();
                    rec["style"] = json!(rows);
                }
                writeln!(stdout, "{rec}")?;
            }
            Ok(())
        }
        Command::Align {
            t_style,
            t_text,
            dump_plan,
        } => {
            let plan = AlignmentPlan::new(t_style, t_text)?;
            if dump_plan {
                println!("{}", plan.to_json());
            } else {
                println!(
                    "{}",
                    json!({ "t_style": plan.t_style, "t_text": plan.t_text, "mode": plan.mode })
                );
            }
            Ok(())
        }
        Command::Eval {
            model,
            snr,
            clean,
            limit,
            seed,
        } => {
            let model = load_model(&model)?;
            let cfg = model.config.clone();
            let data = Dataset::synthetic(&cfg, &model.teacher)?;
            let mut heldout = data.heldout;
            if limit > 0 {
                heldout.truncate(limit);
            }
            let snrs = if snr.is_empty() { cfg.eval.snr_db.clone() } else { snr };
            let mut points: Vec<Option<f64>> = snrs.into_iter().map(Some).collect();
            if clean {
                points.push(None);
            }
            let report = evaluate(&model, &heldout, &data.heldout_noise, &points, seed)?;
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &report)?;
            writeln!(stdout)?;
            Ok(())
        }
        Command::Transfer {
            model,
            reference,
            text,
            durations,
            out,
            steps,
            seed,
        } => {
            let model = load_model(&model)?;
            let reference = load_wav(&reference).with_context(|| format!("reading {}", reference.display()))?;
            let mut seq = PhonemeSequence::parse(&text)?;
            if let Some(d) = durations {
                seq = PhonemeSequence::new(seq.ids, Some(d))?;
            }
            let steps = if steps == 0 { model.schedule.steps } else { steps };
            let result = nonparallel_transfer(&model, &reference, &seq, steps, seed)?;
            let mel = MelSpectrogram::from_frames(result.mel)?;
            mel.to_checkpoint()
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}",
                json!({
                    "t_style": result.t_style,
                    "t_text": result.t_text,
                    "mode": result.mode,
                    "durations": result.durations,
                })
            );
            Ok(())
        }
        Command::PrintDefaults => {
            print!("{}", TrainConfig::default().to_toml());
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Model::from_checkpoint(&ck)?)
}

fn gen_corpus(out: &Path, utterances: usize, seed: u64) -> Result<()> {
    if utterances == 0 {
        bail!("--utterances must be at least 1");
    }
    let corpus = dsp::generate_corpus(utterances, seed)?;
    let wav_dir = out.join("wav");
    let noise_dir = out.join("noise");
    fs::create_dir_all(&wav_dir)?;
    fs::create_dir_all(&noise_dir)?;
    let mut manifest = String::new();
    for u in &corpus.utterances {
        let rel = format!("wav/{}.wav", u.id);
        write_wav(&u.clean, out.join(&rel))?;
        let rec = json!({ "id": u.id, "path": rel, "spec": u.spec, "seed": u.spec.seed });
        manifest.push_str(&rec.to_string());
        manifest.push('\n');
    }
    for (i, clip) in corpus.noise.iter().enumerate() {
        write_wav(clip, noise_dir.join(format!("noise{i:02}.wav")))?;
    }
    fs::write(out.join("manifest.jsonl"), manifest)?;
    eprintln!(
        "wrote {} utterances and {} noise clips to {}",
        corpus.utterances.len(),
        corpus.noise.len(),
        out.display()
    );
    Ok(())
}
