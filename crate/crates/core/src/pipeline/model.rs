//! All trainable parts plus the fixed teacher and schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::align::{style_align_var, Fusion};
use crate::diffusion::{build_schedule, reverse_sample, DiffStyle, NoiseSchedule};
use crate::dsp::{N_MELS, VOCAB};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::teacher::{GlobalEmbedding, ProsodyTeacher, StyleTeacher};
use crate::tts::{DurationPredictor, MelDecoder, PhonemeSequence, TextEncoder};
use crate::vq::{nearest_codewords, quantize, Codebook, Quantized};

const META_CONFIG: &str = "config";
const META_STEP: &str = "step";
const META_TEACHER: &str = "teacher";
const META_PROJECTION_SEED: &str = "projection_seed";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub teacher: ProsodyTeacher,
    pub schedule: NoiseSchedule,
    pub diffusion: DiffStyle,
    pub codebook: Codebook,
    pub global_codebook: Option<Codebook>,
    pub encoder: TextEncoder,
    pub durations: DurationPredictor,
    pub fusion: Fusion,
    pub decoder: MelDecoder,
}

/// Output of the acoustic path for one utterance.
#[derive(Debug, Clone)]
pub struct AcousticOutput {
    pub mel: Var,
    pub log_durations: Var,
    pub style_vq: Quantized,
    pub global_vq: Option<Quantized>,
    pub frames: usize,
}

impl Model {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let t = &config.teacher;
        let teacher = ProsodyTeacher::new(t.style_dim, t.global_dim, t.projection_seed)?;
        let schedule = build_schedule(config.diffusion.steps, config.diffusion.offset)?;
        let diffusion = DiffStyle::new(
            &mut store,
            "diff",
            t.style_dim,
            N_MELS,
            &schedule,
            &config.diffusion.denoiser,
            &mut rng,
        )?;
        let codebook = Codebook::new(&mut store, "vq", config.vq.codebook_size, t.style_dim, config.vq.init_std, &mut rng)?;
        let global_codebook = if config.vq.quantize_global {
            // Global embeddings are unit vectors; start codewords on the same scale.
            let std = 1.0 / (t.global_dim as f64).sqrt();
            Some(Codebook::new(&mut store, "gvq", config.vq.global_codebook_size, t.global_dim, std, &mut rng)?)
        } else {
            None
        };
        let tts = &config.tts;
        let encoder = TextEncoder::new(&mut store, "enc", VOCAB, tts, &mut rng);
        let durations = DurationPredictor::new(&mut store, "dur", tts, &mut rng);
        let fusion = Fusion::new(&mut store, "fuse", t.style_dim, t.global_dim, tts.text_dim, &mut rng);
        let decoder = MelDecoder::new(&mut store, "dec", N_MELS, tts, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            teacher,
            schedule,
            diffusion,
            codebook,
            global_codebook,
            encoder,
            durations,
            fusion,
            decoder,
        })
    }

    pub fn style_dim(&self) -> usize {
        self.config.teacher.style_dim
    }

    pub fn to_checkpoint(&self, step: usize) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.meta.insert(
            META_CONFIG.into(),
            serde_json::to_string(&self.config)?,
        );
        ck.meta.insert(META_STEP.into(), step.to_string());
        ck.meta.insert(META_TEACHER.into(), self.teacher.name().into());
        ck.meta.insert(META_PROJECTION_SEED.into(), self.teacher.projection_seed().to_string());
        for (name, t) in self.store.iter() {
            ck.insert(format!("param.{name}"), t.clone());
        }
        self.schedule.write_to(&mut ck, "schedule");
        self.codebook.write_counters(&mut ck, "vq");
        if let Some(gcb) = &self.global_codebook {
            gcb.write_counters(&mut ck, "gvq");
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg_text = ck
            .meta
            .get(META_CONFIG)
            .ok_or_else(|| Error::Config("checkpoint has no embedded config".into()))?;
        let config: TrainConfig = serde_json::from_str(cfg_text)?;
        let mut model = Self::new(&config)?;
        model.store.load_from(|name| ck.get(&format!("param.{name}")))?;
        let schedule = NoiseSchedule::read_from(ck, "schedule")?;
        if schedule != model.schedule {
            return Err(Error::Config("checkpoint schedule disagrees with its config".into()));
        }
        model.codebook.read_counters(ck, "vq")?;
        if let Some(gcb) = &mut model.global_codebook {
            gcb.read_counters(ck, "gvq")?;
        }
        Ok(model)
    }

    pub fn checkpoint_step(ck: &Checkpoint) -> Option<usize> {
        ck.meta.get(META_STEP).and_then(|s| s.parse().ok())
    }

    /// Style features from the noisy mel with a sampler of `steps` steps.
    pub fn sample_style(&self, mel: &Tensor, steps: usize, seed: u64) -> Result<Tensor> {
        let sched = if steps == self.schedule.steps {
            self.schedule.clone()
        } else {
            build_schedule(steps, self.schedule.offset)?
        };
        reverse_sample(
            &self.diffusion,
            &self.store,
            mel,
            self.style_dim(),
            &sched,
            self.diffusion.train_steps,
            (self.config.diffusion.clip_x0 > 0.0).then_some(self.config.diffusion.clip_x0),
            seed,
        )
    }

    /// Codeword indices of a style sequence.
    pub fn style_codes(&self, style: &Tensor) -> Result<Vec<usize>> {
        nearest_codewords(style, self.store.get(self.codebook.embeddings))
    }

    /// Encoder, duration head, quantization, alignment, fusion and decoder.
    ///
    /// `durations` sets the frame count; `style` is `[t_style, D_s]` and is
    /// aligned to that count.
    pub fn acoustic(
        &self,
        g: &mut Graph,
        seq: &PhonemeSequence,
        durations: &[usize],
        style: &Tensor,
        global: &GlobalEmbedding,
    ) -> Result<AcousticOutput> {
        let store = &self.store;
        let enc = self.encoder.forward(g, store, seq)?;
        let log_durations = self.durations.forward(g, store, enc)?;
        let text = crate::tts::length_regulate(g, enc, durations)?;
        let frames = g.value(text).rows();

        let z_e = g.constant(style.clone());
        let style_vq = quantize(g, store, &self.codebook, z_e)?;
        let chosen = if self.config.vq.fuse_quantized { style_vq.z_q } else { z_e };
        let aligned = style_align_var(g, chosen, frames)?;

        let gv = g.constant(global.to_tensor());
        let (global_var, global_vq) = match &self.global_codebook {
            Some(cb) => {
                let q = quantize(g, store, cb, gv)?;
                (q.z_q, Some(q))
            }
            None => (gv, None),
        };
        let fused = self.fusion.forward(g, store, text, aligned, global_var)?;
        let mel = self.decoder.forward(g, store, fused)?;
        Ok(AcousticOutput {
            mel,
            log_durations,
            style_vq,
            global_vq,
            frames,
        })
    }
}
