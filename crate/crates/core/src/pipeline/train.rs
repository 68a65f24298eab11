//! Two-stage training loop with a deterministic metrics log.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::{draw_noise, noisy_version, Dataset};
use super::eval::{evaluate, EvalReport};
use super::model::Model;
use crate::diffusion::{diffusion_loss, Draw};
use crate::dsp::stft_mel;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::teacher::StyleTeacher;
use crate::tts::{duration_loss, mel_loss};
use crate::vq::codebook_update;

pub const EVENT_STAGE_SWITCH: &str = "style_source_switch";

/// One line of the metrics log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: u8,
    pub utterance: usize,
    pub snr_db: f64,
    pub l_diff: f64,
    pub l_mel: f64,
    pub l_dur: f64,
    pub l_codebook: f64,
    pub l_commit: f64,
    /// `l_codebook + 0.25 l_commit`, plus the global codebook terms when enabled.
    pub l_vq: f64,
    pub l_total: f64,
    pub reseeded: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

/// Loss nodes of one step, kept on the tape for inspection.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub diff: Var,
    pub mel: Var,
    pub dur: Var,
    pub codebook: Var,
    pub commit: Var,
    pub vq: Var,
    pub total: Var,
}

/// A fully built but not yet applied training step.
pub struct StepGraph {
    pub graph: Graph,
    pub losses: StepLosses,
    pub utterance: usize,
    pub snr_db: f64,
    pub stage: u8,
    style: Tensor,
    style_codes: Vec<usize>,
    global: Option<(Tensor, Vec<usize>)>,
}

/// Model, optimizer and the random streams of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    vq_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let seed = config.seed;
        Ok(Self {
            model,
            adam: Adam::new(AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            }),
            step: 0,
            data_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            noise_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
            vq_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(3)),
        })
    }

    pub fn stage(&self) -> u8 {
        if self.step < self.model.config.stage1_steps {
            1
        } else {
            2
        }
    }

    /// Draws the data for the current step and records every loss on a tape.
    pub fn build_step(&mut self, data: &Dataset) -> Result<StepGraph> {
        let cfg = &self.model.config;
        if data.train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let stage = self.stage();
        let u = self.data_rng.random_range(0..data.train.len());
        let [lo, hi] = cfg.snr_db;
        let snr = if lo == hi { lo } else { self.data_rng.random_range(lo..hi) };
        let (clip, offset) = draw_noise(&data.train_noise, &mut self.data_rng)?;
        let utt = &data.train[u];
        let noisy = noisy_version(&utt.clean, &data.train_noise[clip], offset, snr)?;
        let noisy_mel = stft_mel(&noisy)?.frames;
        let global = self.model.teacher.global_embedding(&noisy)?;

        let t_max = self.model.schedule.steps;
        let draws: Vec<Draw> = (0..cfg.batch_size)
            .map(|_| {
                let t = self.noise_rng.random_range(1..=t_max);
                let eps = Tensor::standard_normal(utt.teacher.shape(), &mut self.noise_rng);
                Draw { t, eps }
            })
            .collect();
        let style = if stage == 1 {
            utt.teacher.clone()
        } else {
            let seed = self.noise_rng.random();
            self.model.sample_style(&noisy_mel, cfg.diffusion.train_sample_steps, seed)?
        };

        let model = &self.model;
        let store = &model.store;
        let mut g = Graph::new();
        let mel_var = g.constant(noisy_mel);
        let diff = diffusion_loss(&mut g, store, &model.diffusion, &model.schedule, &utt.teacher, mel_var, &draws)?;
        let out = model.acoustic(&mut g, &utt.phonemes, utt.durations(), &style, &global)?;
        let mel = mel_loss(&mut g, out.mel, &utt.clean_mel)?;
        let dur = duration_loss(&mut g, out.log_durations, utt.durations())?;
        let mut vq = out.style_vq.objective(&mut g)?;
        if let Some(q) = &out.global_vq {
            let gobj = q.objective(&mut g)?;
            vq = g.add(vq, gobj)?;
        }
        let w = &cfg.weights;
        let terms = [(mel, w.mel), (dur, w.duration), (vq, w.vq), (diff, w.diffusion)];
        let mut total: Option<Var> = None;
        for (v, weight) in terms {
            let s = g.scale(v, weight);
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        let global_codes = out.global_vq.as_ref().map(|q| (global.to_tensor(), q.indices.clone()));
        Ok(StepGraph {
            losses: StepLosses {
                diff,
                mel,
                dur,
                codebook: out.style_vq.codebook_loss,
                commit: out.style_vq.commitment,
                vq,
                total: total.expect("four terms"),
            },
            graph: g,
            utterance: u,
            snr_db: snr,
            stage,
            style,
            style_codes: out.style_vq.indices,
            global: global_codes,
        })
    }

    /// Backward pass, optimizer update and codebook bookkeeping.
    pub fn apply(&mut self, mut sg: StepGraph) -> Result<MetricsRecord> {
        let l = sg.losses;
        let val = |v: Var| sg.graph.value(v).item();
        let record = MetricsRecord {
            step: self.step,
            stage: sg.stage,
            utterance: sg.utterance,
            snr_db: sg.snr_db,
            l_diff: val(l.diff),
            l_mel: val(l.mel),
            l_dur: val(l.dur),
            l_codebook: val(l.codebook),
            l_commit: val(l.commit),
            l_vq: val(l.vq),
            l_total: val(l.total),
            reseeded: 0,
            event: (sg.stage == 2 && self.step == self.model.config.stage1_steps).then(|| EVENT_STAGE_SWITCH.to_string()),
            eval: None,
        };
        if !record.l_total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}", self.step)));
        }
        sg.graph.backward(l.total)?;
        let grads = sg.graph.param_grads();
        self.adam.step(&mut self.model.store, &grads)?;
        let mut reseeded = codebook_update(
            &mut self.model.codebook,
            &mut self.model.store,
            &sg.style,
            &sg.style_codes,
            &mut self.vq_rng,
        )?
        .len();
        if let (Some(cb), Some((g, codes))) = (self.model.global_codebook.as_mut(), sg.global.as_ref()) {
            reseeded += codebook_update(cb, &mut self.model.store, g, codes, &mut self.vq_rng)?.len();
        }
        self.step += 1;
        Ok(MetricsRecord { reseeded, ..record })
    }

    pub fn train_step(&mut self, data: &Dataset) -> Result<MetricsRecord> {
        let sg = self.build_step(data)?;
        self.apply(sg)
    }
}

/// Files written by a run with an output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    /// Wall-clock per logging interval; kept apart so the metrics log is reproducible.
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.jsonl")
    }
    pub fn final_model(&self) -> PathBuf {
        self.dir.join("model.qsc")
    }
    pub fn last_good(&self) -> PathBuf {
        self.dir.join("last_good.qsc")
    }
    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("ckpt_{step:06}.qsc"))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub eval: Option<EvalReport>,
    pub seconds: f64,
}

const TIMING_EVERY: usize = 100;

/// Runs `config.total_steps` steps. With `out_dir`, writes the metrics log,
/// the timing sidecar and checkpoints there. On a non-finite loss the
/// current (last good) parameters are saved before the error is returned.
pub fn train(config: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config)?;
    let paths = out_dir.map(|d| RunPaths { dir: d.to_path_buf() });
    let mut metrics = None;
    let mut timing = None;
    if let Some(p) = &paths {
        fs::create_dir_all(&p.dir)?;
        metrics = Some(BufWriter::new(File::create(p.metrics())?));
        timing = Some(BufWriter::new(File::create(p.timing())?));
    }
    let mut records = Vec::with_capacity(config.total_steps + 1);
    while trainer.step < config.total_steps {
        let rec = match trainer.train_step(data) {
            Ok(r) => r,
            Err(e) => {
                if let Some(p) = &paths {
                    trainer.model.to_checkpoint(trainer.step)?.save(p.last_good())?;
                }
                if let Some(w) = metrics.as_mut() {
                    w.flush()?;
                }
                return Err(e);
            }
        };
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        records.push(rec);
        let done = trainer.step;
        if let Some(w) = timing.as_mut() {
            if done % TIMING_EVERY == 0 || done == config.total_steps {
                writeln!(w, "{{\"step\":{done},\"elapsed_secs\":{:.3}}}", start.elapsed().as_secs_f64())?;
            }
        }
        if let Some(p) = &paths {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                trainer.model.to_checkpoint(done)?.save(p.checkpoint(done))?;
            }
        }
    }
    let eval = if config.eval.final_eval && !data.heldout.is_empty() {
        let snrs: Vec<Option<f64>> = config.eval.snr_db.iter().map(|&s| Some(s)).collect();
        let report = evaluate(&trainer.model, &data.heldout, &data.heldout_noise, &snrs, config.eval.seed)?;
        let rec = MetricsRecord {
            step: trainer.step,
            stage: trainer.stage(),
            event: Some("final_eval".into()),
            eval: Some(report.clone()),
            ..MetricsRecord::default()
        };
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        records.push(rec);
        Some(report)
    } else {
        None
    };
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    if let Some(w) = timing.as_mut() {
        writeln!(w, "{{\"step\":{},\"elapsed_secs\":{:.3},\"phase\":\"done\"}}", trainer.step, start.elapsed().as_secs_f64())?;
        w.flush()?;
    }
    if let Some(p) = &paths {
        trainer.model.to_checkpoint(trainer.step)?.save(p.final_model())?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        records,
        eval,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean of `l_diff` over training records with `from <= step < to`.
pub fn diffusion_loss_average(records: &[MetricsRecord], from: usize, to: usize) -> Option<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.eval.is_none() && r.step >= from && r.step < to)
        .map(|r| r.l_diff)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
