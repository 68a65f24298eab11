use std::time::Instant;

use quietstyle::dsp::mel::samples_for_frames;
use quietstyle::dsp::{Waveform, SAMPLE_RATE};
use quietstyle::error::Error;
use quietstyle::nn::{Adam, AdamConfig, Checkpoint, Graph, Tensor};
use quietstyle::pipeline::train::EVENT_STAGE_SWITCH;
use quietstyle::pipeline::{evaluate, nonparallel_transfer, train, Dataset, Model, TrainConfig, Trainer};
use quietstyle::teacher::{GlobalEmbedding, ProsodyTeacher};
use quietstyle::tts::{mel_loss, PhonemeSequence};

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.total_steps = 8;
    cfg.stage1_steps = 4;
    cfg.batch_size = 2;
    cfg.checkpoint_every = 4;
    cfg.corpus.train_utterances = 6;
    cfg.corpus.heldout_utterances = 3;
    cfg.diffusion.train_sample_steps = 5;
    cfg.eval.final_eval = false;
    cfg
}

fn dataset(cfg: &TrainConfig) -> Dataset {
    let teacher = ProsodyTeacher::new(cfg.teacher.style_dim, cfg.teacher.global_dim, cfg.teacher.projection_seed).unwrap();
    Dataset::synthetic(cfg, &teacher).unwrap()
}

fn voiced_reference(frames: usize, seed: u64) -> Waveform {
    let n = samples_for_frames(frames);
    let f0 = 110.0 + 10.0 * (seed % 7) as f64;
    let s = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let f = f0 * (1.0 + 0.1 * (2.0 * std::f64::consts::PI * 3.0 * t).sin());
            (1..6)
                .map(|h| 0.08 / h as f64 * (2.0 * std::f64::consts::PI * f * h as f64 * t).sin())
                .sum::<f64>()
        })
        .collect();
    Waveform::new(s, SAMPLE_RATE).unwrap()
}

#[test]
fn runs_are_bit_reproducible() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&cfg, &data, Some(a.path())).unwrap();
    train(&cfg, &data, Some(b.path())).unwrap();
    for f in ["metrics.jsonl", "model.qsc", "ckpt_000004.qsc"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn stage_switch_is_logged_once() {
    let cfg = tiny_config();
    let out = train(&cfg, &dataset(&cfg), None).unwrap();
    let steps: Vec<_> = out.records.iter().filter(|r| r.eval.is_none()).collect();
    assert_eq!(steps.len(), cfg.total_steps);
    let switches: Vec<_> = steps
        .iter()
        .filter(|r| r.event.as_deref() == Some(EVENT_STAGE_SWITCH))
        .collect();
    assert_eq!(switches.len(), 1);
    assert_eq!(switches[0].step, cfg.stage1_steps);
    for r in &steps {
        assert_eq!(r.stage, if r.step < cfg.stage1_steps { 1 } else { 2 });
    }
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let mut cfg = tiny_config();
    cfg.weights.mel = 0.7;
    cfg.weights.duration = 1.3;
    cfg.weights.vq = 0.4;
    cfg.weights.diffusion = 2.0;
    let out = train(&cfg, &dataset(&cfg), None).unwrap();
    for r in out.records.iter().filter(|r| r.eval.is_none()) {
        let w = &cfg.weights;
        let sum = w.mel * r.l_mel + w.duration * r.l_dur + w.vq * r.l_vq + w.diffusion * r.l_diff;
        assert!((r.l_total - sum).abs() <= 1e-12 * (1.0 + sum.abs()), "step {}", r.step);
        assert!((r.l_vq - (r.l_codebook + 0.25 * r.l_commit)).abs() <= 1e-12 * (1.0 + r.l_vq));
    }
}

#[test]
fn stage_two_denoiser_gradient_comes_only_from_diffusion_loss() {
    let mut cfg = tiny_config();
    cfg.stage1_steps = 1;
    let data = dataset(&cfg);
    let mut trainer = Trainer::new(&cfg).unwrap();
    trainer.train_step(&data).unwrap();
    assert_eq!(trainer.stage(), 2);

    let mut twin = trainer.clone();
    let mut full = trainer.build_step(&data).unwrap();
    let mut diff_only = twin.build_step(&data).unwrap();
    full.graph.backward(full.losses.total).unwrap();
    diff_only.graph.backward(diff_only.losses.diff).unwrap();
    let store = &trainer.model.store;
    let a = full.graph.param_grads();
    let b = diff_only.graph.param_grads();
    let mut checked = 0;
    for ((id, ga), (id_b, gb)) in a.iter().zip(&b) {
        assert_eq!(id, id_b);
        let name = store.name(*id);
        if name.starts_with("diff.") {
            checked += 1;
            for (x, y) in ga.iter().zip(gb) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}");
            }
        } else {
            assert!(gb.iter().all(|&v| v == 0.0), "{name} reached by the diffusion loss");
        }
    }
    assert!(checked > 0);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let out = train(&cfg, &data, None).unwrap();
    let bytes = out.model.to_checkpoint(cfg.total_steps).unwrap().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(Model::checkpoint_step(&ck), Some(cfg.total_steps));
    let restored = Model::from_checkpoint(&ck).unwrap();
    let snrs = [Some(5.0), None];
    let a = evaluate(&out.model, &data.heldout[..2], &data.heldout_noise, &snrs, 4).unwrap();
    let b = evaluate(&restored, &data.heldout[..2], &data.heldout_noise, &snrs, 4).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    // With a clean reference the teacher baseline compares a sequence with itself.
    assert!((a.per_snr[1].baseline - 1.0).abs() < 1e-12);
    assert_eq!(a.per_snr[1].snr_db, None);
}

#[test]
fn empty_heldout_set_is_rejected() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let model = Model::new(&cfg).unwrap();
    match evaluate(&model, &[], &data.heldout_noise, &[Some(5.0)], 1) {
        Err(Error::Contract(_)) => {}
        other => panic!("expected contract error, got {other:?}"),
    }
}

#[test]
fn decoder_trains_with_zeroed_style() {
    let cfg = tiny_config();
    let data = dataset(&cfg);
    let mut model = Model::new(&cfg).unwrap();
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    });
    let utt = &data.train[0];
    let style = Tensor::zeros(&[utt.frames(), cfg.teacher.style_dim]);
    let global = GlobalEmbedding(vec![0.0; cfg.teacher.global_dim]);
    let mut losses = Vec::new();
    for _ in 0..60 {
        let mut g = Graph::new();
        let out = model.acoustic(&mut g, &utt.phonemes, utt.durations(), &style, &global).unwrap();
        let l = mel_loss(&mut g, out.mel, &utt.clean_mel).unwrap();
        losses.push(g.value(l).item());
        g.backward(l).unwrap();
        adam.step(&mut model.store, &g.param_grads()).unwrap();
    }
    assert!(losses[59] < 0.7 * losses[0], "{} -> {}", losses[0], losses[59]);
}

#[test]
fn transfer_across_extreme_length_ratios() {
    let cfg = tiny_config();
    let model = Model::new(&cfg).unwrap();
    for (t_style, t_text) in [(59usize, 120usize), (200, 50)] {
        let reference = voiced_reference(t_style, t_style as u64);
        let ids: Vec<usize> = (0..10).map(|i| (i * 7) % 16).collect();
        let durations = vec![t_text / 10; 10];
        let text = PhonemeSequence::new(ids, Some(durations)).unwrap();
        let out = nonparallel_transfer(&model, &reference, &text, 10, 3).unwrap();
        assert_eq!(out.t_style, t_style);
        assert_eq!(out.mel.shape(), &[t_text, 80]);
        assert!(out.mel.data().iter().all(|v| v.is_finite()));
        assert_eq!(out.codes.len(), t_style);
    }
}

#[test]
fn teacher_and_mel_frames_agree_on_the_default_corpus() {
    let cfg = TrainConfig::default();
    let data = dataset(&cfg);
    assert_eq!(data.train.len(), 200);
    assert_eq!(data.heldout.len(), 20);
    for u in data.train.iter().chain(&data.heldout) {
        assert_eq!(u.teacher.rows(), u.clean_mel.rows(), "{}", u.id);
        assert_eq!(u.durations().iter().sum::<usize>(), u.frames());
    }
}

#[test]
fn full_reverse_pass_is_fast() {
    let cfg = TrainConfig::default();
    let model = Model::new(&cfg).unwrap();
    let mel = quietstyle::dsp::stft_mel(&voiced_reference(59, 1)).unwrap().frames;
    assert_eq!(mel.rows(), 59);
    let start = Instant::now();
    let style = model.sample_style(&mel, cfg.diffusion.steps, 7).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(style.shape(), &[59, cfg.teacher.style_dim]);
    assert!(secs < 2.0, "{secs:.2} s");
}
