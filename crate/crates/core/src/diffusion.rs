//! Conditional denoising diffusion over frame-level style features.
//!
//! The forward process noises teacher features `x0` with a cosine schedule;
//! a gated dilated-conv denoiser predicts the injected noise from `x_t`, the
//! step index and the noisy mel (through a one-layer conv conditioner); the
//! ancestral sampler inverts the chain.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Conv1d, Graph, Linear, ParamStore, Tensor, Var};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_OFFSET: f64 = 0.008;
const BETA_MAX: f64 = 0.999;

/// Per-step coefficients. Every array has length `T + 1` and is indexed by
/// the step itself; index 0 of `beta` and `alpha` is an unused placeholder
/// (`0` and `1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub offset: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

fn cosine_f(t: usize, steps: usize, s: f64) -> f64 {
    let x = ((t as f64 / steps as f64 + s) / (1.0 + s)) * PI / 2.0;
    x.cos().powi(2)
}

/// Cosine schedule: `alpha_bar_t = f(t)/f(0)` with
/// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, betas derived from successive
/// ratios and clipped at 0.999. `alpha_bar` is then recomputed as the running
/// product of `1 - beta` so the three arrays stay mutually consistent.
pub fn build_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Parameter("diffusion needs T >= 1".into()));
    }
    if !(offset > 0.0 && offset < 1.0) {
        return Err(Error::Parameter(format!("offset s = {offset} outside (0, 1)")));
    }
    let f0 = cosine_f(0, steps, offset);
    let raw: Vec<f64> = (0..=steps).map(|t| cosine_f(t, steps, offset) / f0).collect();
    let mut beta = vec![0.0; steps + 1];
    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        beta[t] = (1.0 - raw[t] / raw[t - 1]).min(BETA_MAX);
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    Ok(NoiseSchedule {
        steps,
        offset,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Index {
                index: t,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// Posterior variance used by the ancestral sampler at step `t`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }

    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert_scalar(format!("{prefix}.T"), self.steps as f64);
        ck.insert_scalar(format!("{prefix}.s"), self.offset);
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let steps = ck.scalar(&format!("{prefix}.T"))?;
        let offset = ck.scalar(&format!("{prefix}.s"))?;
        build_schedule(steps as usize, offset)
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(sched: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::dim(
            "q_sample",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    let a = sched.alpha_bar[t].sqrt();
    let b = (1.0 - sched.alpha_bar[t]).sqrt();
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub time_dim: usize,
    pub cond_kernel: usize,
    /// Per-dimension variance assumed for clean features by the output
    /// preconditioning; 0 makes the network output the noise estimate directly.
    pub data_var: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            dilations: vec![1, 2, 4, 1, 2, 4],
            kernel: 3,
            time_dim: 64,
            cond_kernel: 3,
            data_var: 0.5,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dilations.is_empty() || self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "denoiser needs channels > 0, at least one block and an even time_dim".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) || self.cond_kernel.is_multiple_of(2) || self.dilations.contains(&0) {
            return Err(Error::Config("kernels must be odd and dilations positive".into()));
        }
        if !(self.data_var >= 0.0 && self.data_var.is_finite()) {
            return Err(Error::Config("data_var must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a (possibly fractional) step index, `[1, dim]`.
pub fn time_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half.max(2).saturating_sub(1) as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Tensor::new(&[1, dim], out).expect("dim > 0")
}

/// Shallow conv mapping noisy mel frames to the denoiser width.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub conv: Conv1d,
}

impl Conditioner {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, mel_bins: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        Self {
            conv: Conv1d::new(store, name, mel_bins, cfg.channels, cfg.cond_kernel, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Result<Var> {
        self.conv.forward(g, store, mel)
    }
}

#[derive(Debug, Clone)]
struct Block {
    time: Linear,
    conv: Conv1d,
    cond: Linear,
    out: Linear,
}

/// WaveNet-style noise predictor over `[frames, D_s]`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub style_dim: usize,
    input: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    head1: Linear,
    head2: Linear,
}

impl Denoiser {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, style_dim: usize, cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let blocks = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Block {
                time: Linear::new(store, &format!("{name}.block{i}.time"), c, c, rng),
                conv: Conv1d::new(store, &format!("{name}.block{i}.conv"), c, 2 * c, cfg.kernel, d, rng),
                cond: Linear::new(store, &format!("{name}.block{i}.cond"), c, 2 * c, rng),
                out: Linear::new(store, &format!("{name}.block{i}.out"), c, 2 * c, rng),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            style_dim,
            input: Linear::new(store, &format!("{name}.input"), style_dim, c, rng),
            time1: Linear::new(store, &format!("{name}.time1"), cfg.time_dim, c, rng),
            time2: Linear::new(store, &format!("{name}.time2"), c, c, rng),
            blocks,
            head1: Linear::new(store, &format!("{name}.head1"), c, c, rng),
            // Zero output layer: the untrained model predicts eps = 0.
            head2: Linear::zeroed(store, &format!("{name}.head2"), c, style_dim),
        })
    }

    /// Per-block conditioning projections of the conditioner output.
    pub fn project_condition(&self, g: &mut Graph, store: &ParamStore, cond: Var) -> Result<Vec<Var>> {
        self.blocks.iter().map(|b| b.cond.forward(g, store, cond)).collect()
    }

    /// Predicted noise for `x_t` at (possibly rescaled) step `t`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_t: Var, t: f64, cond: &[Var]) -> Result<Var> {
        if cond.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "{} conditioning tensors for {} blocks",
                cond.len(),
                self.blocks.len()
            )));
        }
        let c = self.cfg.channels;
        let temb = g.constant(time_embedding(t, self.cfg.time_dim));
        let temb = self.time1.forward(g, store, temb)?;
        let temb = g.relu(temb);
        let temb = self.time2.forward(g, store, temb)?;
        let temb = g.relu(temb);

        let h = self.input.forward(g, store, x_t)?;
        let mut x = g.relu(h);
        let mut skip: Option<Var> = None;
        for (block, &cb) in self.blocks.iter().zip(cond) {
            let tb = block.time.forward(g, store, temb)?;
            let h = g.add(x, tb)?;
            let h = block.conv.forward(g, store, h)?;
            let h = g.add(h, cb)?;
            let h = g.gated_tanh_sigmoid(h)?;
            let o = block.out.forward(g, store, h)?;
            let res = g.slice(o, 1, 0, c)?;
            let sk = g.slice(o, 1, c, c)?;
            let sum = g.add(x, res)?;
            x = g.scale(sum, std::f64::consts::FRAC_1_SQRT_2);
            skip = Some(match skip {
                Some(s) => g.add(s, sk)?,
                None => sk,
            });
        }
        let s = g.scale(skip.expect("at least one block"), 1.0 / (self.blocks.len() as f64).sqrt());
        let s = self.head1.forward(g, store, s)?;
        let s = g.relu(s);
        self.head2.forward(g, store, s)
    }
}

/// Anything that predicts the injected noise given `x_t`, a step and a
/// noisy mel. Lets tests substitute exact stubs for the network.
pub trait NoisePredictor {
    /// Step-independent work on the noisy mel, done once per utterance.
    fn prepare(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Result<Vec<Var>>;
    fn predict(&self, g: &mut Graph, store: &ParamStore, x_t: Var, t: f64, prepared: &[Var]) -> Result<Var>;
}

/// Conditioner plus denoiser, trained on a schedule of `train_steps` steps.
///
/// With `data_var = v > 0` the noise estimate is
/// `c_skip(t) x_t + c_out(t) F(x_t, t, c)` where
/// `c_skip = sqrt(1 - ab) / (ab v + 1 - ab)` is the best linear estimate of the
/// noise for clean features of variance `v`, and
/// `c_out = sqrt(ab v / (ab v + 1 - ab))` is the spread of what remains. The
/// network then only models the residual; near `t = T` the linear part is
/// almost exact, so errors in `F` are not amplified by `1 / sqrt(ab)`.
#[derive(Debug, Clone)]
pub struct DiffStyle {
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    pub train_steps: usize,
    pub data_var: f64,
    alpha_bar: Vec<f64>,
}

impl DiffStyle {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        style_dim: usize,
        mel_bins: usize,
        sched: &NoiseSchedule,
        cfg: &DenoiserConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let conditioner = Conditioner::new(store, &format!("{name}.cond"), mel_bins, cfg, rng);
        let denoiser = Denoiser::new(store, &format!("{name}.den"), style_dim, cfg, rng)?;
        Ok(Self {
            conditioner,
            denoiser,
            train_steps: sched.steps,
            data_var: cfg.data_var,
            alpha_bar: sched.alpha_bar.clone(),
        })
    }

    /// `alpha_bar` of the training schedule, linearly interpolated at fractional `t`.
    fn alpha_bar_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.train_steps as f64);
        let lo = t.floor() as usize;
        let hi = (lo + 1).min(self.train_steps);
        let w = t - lo as f64;
        (1.0 - w) * self.alpha_bar[lo] + w * self.alpha_bar[hi]
    }

    /// `(c_skip, c_out)` at step `t`.
    pub fn preconditioning(&self, t: f64) -> (f64, f64) {
        if self.data_var == 0.0 {
            return (0.0, 1.0);
        }
        let ab = self.alpha_bar_at(t);
        let denom = ab * self.data_var + 1.0 - ab;
        ((1.0 - ab).sqrt() / denom, (ab * self.data_var / denom).sqrt())
    }
}

impl NoisePredictor for DiffStyle {
    fn prepare(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Result<Vec<Var>> {
        let c = self.conditioner.forward(g, store, mel)?;
        self.denoiser.project_condition(g, store, c)
    }

    fn predict(&self, g: &mut Graph, store: &ParamStore, x_t: Var, t: f64, prepared: &[Var]) -> Result<Var> {
        let f = self.denoiser.forward(g, store, x_t, t, prepared)?;
        if self.data_var == 0.0 {
            return Ok(f);
        }
        let (c_skip, c_out) = self.preconditioning(t);
        let skip = g.scale(x_t, c_skip);
        let res = g.scale(f, c_out);
        g.add(skip, res)
    }
}

/// One noising draw: step and the Gaussian noise to inject.
#[derive(Debug, Clone)]
pub struct Draw {
    pub t: usize,
    pub eps: Tensor,
}

/// Mean over draws of `mean((eps - eps_theta(x_t, t, tau(y_n)))^2)`.
///
/// `mel` is the noisy mel already placed on the tape so callers can share
/// it; the conditioner runs once and every draw reuses it.
pub fn diffusion_loss<M: NoisePredictor>(
    g: &mut Graph,
    store: &ParamStore,
    model: &M,
    sched: &NoiseSchedule,
    x0: &Tensor,
    mel: Var,
    draws: &[Draw],
) -> Result<Var> {
    let mel_frames = g.value(mel).rows();
    if x0.rows() != mel_frames {
        return Err(Error::Alignment {
            left: x0.rows(),
            right: mel_frames,
        });
    }
    if draws.is_empty() {
        return Err(Error::Contract("diffusion loss needs at least one draw".into()));
    }
    let prepared = model.prepare(g, store, mel)?;
    let mut total: Option<Var> = None;
    for d in draws {
        let x_t = g.constant(q_sample(sched, x0, d.t, &d.eps)?);
        let pred = model.predict(g, store, x_t, d.t as f64, &prepared)?;
        let target = g.constant(d.eps.clone());
        let l = g.mse(pred, target)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / draws.len() as f64))
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// `sched` may be shorter than the training schedule; step indices are then
/// rescaled by `train_steps / sched.steps` before reaching the network so a
/// rebuilt cosine schedule lands on the same noise levels.
///
/// Without `clip_x0` each step is
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t) + sigma_t z`.
/// With it, the implied `x0 = (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`
/// is clamped to `[-c, c]` and the step uses the posterior mean of
/// `q(x_{t-1} | x_t, x0)` instead; the two agree whenever nothing is clamped.
/// Clamping matters at `t = T`, where `1 / sqrt(alpha_T)` is about 31.6 for a
/// clipped final beta and amplifies any error in the predicted noise.
pub fn reverse_sample<M: NoisePredictor>(
    model: &M,
    store: &ParamStore,
    mel: &Tensor,
    style_dim: usize,
    sched: &NoiseSchedule,
    train_steps: usize,
    clip_x0: Option<f64>,
    seed: u64,
) -> Result<Tensor> {
    let frames = mel.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prepared: Vec<Tensor> = {
        let mut g = Graph::inference();
        let m = g.constant(mel.clone());
        let vars = model.prepare(&mut g, store, m)?;
        vars.iter().map(|&v| g.value(v).clone()).collect()
    };
    let scale = train_steps as f64 / sched.steps as f64;
    let mut x = Tensor::standard_normal(&[frames, style_dim], &mut rng);
    for t in (1..=sched.steps).rev() {
        let eps = {
            let mut g = Graph::inference();
            let cond: Vec<Var> = prepared.iter().map(|p| g.constant(p.clone())).collect();
            let xv = g.constant(x.clone());
            let e = model.predict(&mut g, store, xv, t as f64 * scale, &cond)?;
            g.value(e).clone()
        };
        let (ab, ab_prev) = (sched.alpha_bar[t], sched.alpha_bar[t - 1]);
        let sigma = if t > 1 { sched.sigma2(t).sqrt() } else { 0.0 };
        let z = if t > 1 {
            Some(Tensor::standard_normal(&[frames, style_dim], &mut rng))
        } else {
            None
        };
        let data = x.data_mut();
        match clip_x0 {
            None => {
                let a = 1.0 / sched.alpha[t].sqrt();
                let b = sched.beta[t] / (1.0 - ab).sqrt();
                for (i, v) in data.iter_mut().enumerate() {
                    let noise = z.as_ref().map_or(0.0, |z| z.data()[i]);
                    *v = a * (*v - b * eps.data()[i]) + sigma * noise;
                }
            }
            Some(c) => {
                let c0 = ab_prev.sqrt() * sched.beta[t] / (1.0 - ab);
                let ct = sched.alpha[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                for (i, v) in data.iter_mut().enumerate() {
                    let noise = z.as_ref().map_or(0.0, |z| z.data()[i]);
                    let x0 = ((*v - (1.0 - ab).sqrt() * eps.data()[i]) / ab.sqrt()).clamp(-c, c);
                    *v = c0 * x0 + ct * *v + sigma * noise;
                }
            }
        }
        if !x.is_finite() {
            return Err(Error::Numerical(format!("non-finite sample at diffusion step {t}")));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn schedule_examples() {
        let s = build_schedule(100, 0.008).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        let direct = (0.503_968_253_968_254 * PI / 2.0).cos().powi(2) / (0.008 / 1.008 * PI / 2.0).cos().powi(2);
        assert!((s.alpha_bar[50] - direct).abs() < 1e-3);
        assert!((s.alpha_bar[50] - 0.4945).abs() < 1e-3);
        assert!(s.alpha_bar[100] < 1e-4);
        for t in 1..=100 {
            assert!(s.beta[t] > 0.0 && s.beta[t] <= 0.999);
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            assert_eq!(s.alpha[t], 1.0 - s.beta[t]);
        }
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(matches!(build_schedule(0, 0.008), Err(Error::Parameter(_))));
        assert!(build_schedule(10, 0.0).is_err());
        assert!(build_schedule(10, 1.0).is_err());
    }

    #[test]
    fn shortened_schedule_matches_training_levels() {
        let full = build_schedule(100, 0.008).unwrap();
        let short = build_schedule(25, 0.008).unwrap();
        for k in 1..25 {
            assert!((short.alpha_bar[k] - full.alpha_bar[4 * k]).abs() < 1e-6 * full.alpha_bar[4 * k].max(1e-3));
        }
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = build_schedule(100, 0.008).unwrap();
        let x0 = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        let xt = q_sample(&s, &x0, 30, &zero).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*a, s.alpha_bar[30].sqrt() * b);
        }
        let xt = q_sample(&s, &zero, 30, &x0).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert_eq!(*a, (1.0 - s.alpha_bar[30]).sqrt() * b);
        }
        assert!(matches!(q_sample(&s, &x0, 0, &zero), Err(Error::Index { .. })));
        assert!(matches!(q_sample(&s, &x0, 101, &zero), Err(Error::Index { .. })));
    }

    struct Oracle(Tensor);

    impl NoisePredictor for Oracle {
        fn prepare(&self, _: &mut Graph, _: &ParamStore, _: Var) -> Result<Vec<Var>> {
            Ok(vec![])
        }
        fn predict(&self, g: &mut Graph, _: &ParamStore, _: Var, _: f64, _: &[Var]) -> Result<Var> {
            Ok(g.constant(self.0.clone()))
        }
    }

    #[test]
    fn exact_predictor_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = build_schedule(100, 0.008).unwrap();
        let eps = Tensor::standard_normal(&[10, 4], &mut rng);
        let x0 = Tensor::standard_normal(&[10, 4], &mut rng);
        let mut g = Graph::new();
        let mel = g.constant(Tensor::zeros(&[10, 80]));
        let draws = [Draw { t: 17, eps: eps.clone() }];
        let l = diffusion_loss(&mut g, &ParamStore::new(), &Oracle(eps), &s, &x0, mel, &draws).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_noise_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = build_schedule(100, 0.008).unwrap();
        let x0 = Tensor::standard_normal(&[50, 16], &mut rng);
        let draws: Vec<Draw> = (1..=40)
            .map(|t| Draw {
                t,
                eps: Tensor::standard_normal(&[50, 16], &mut rng),
            })
            .collect();
        let mut g = Graph::new();
        let mel = g.constant(Tensor::zeros(&[50, 80]));
        let oracle = Oracle(Tensor::zeros(&[50, 16]));
        let l = diffusion_loss(&mut g, &ParamStore::new(), &oracle, &s, &x0, mel, &draws).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 0.05);
    }

    #[test]
    fn frame_mismatch_is_alignment_error() {
        let s = build_schedule(100, 0.008).unwrap();
        let mut g = Graph::new();
        let mel = g.constant(Tensor::zeros(&[9, 80]));
        let draws = [Draw { t: 1, eps: Tensor::zeros(&[10, 4]) }];
        let oracle = Oracle(Tensor::zeros(&[10, 4]));
        let err = diffusion_loss(&mut g, &ParamStore::new(), &oracle, &s, &Tensor::zeros(&[10, 4]), mel, &draws);
        assert!(matches!(err, Err(Error::Alignment { left: 10, right: 9 })));
    }

    fn small_model(store: &mut ParamStore) -> DiffStyle {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sched = build_schedule(100, 0.008).unwrap();
        DiffStyle::new(store, "diff", 16, 80, &sched, &DenoiserConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn untrained_sampler_shape_and_determinism() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mel = Tensor::standard_normal(&[23, 80], &mut rng);
        let s = build_schedule(25, 0.008).unwrap();
        let a = reverse_sample(&model, &store, &mel, 16, &s, 100, Some(8.0), 9).unwrap();
        let b = reverse_sample(&model, &store, &mel, 16, &s, 100, Some(8.0), 9).unwrap();
        assert_eq!(a.shape(), &[23, 16]);
        assert!(a.is_finite());
        assert_eq!(a, b);
        let c = reverse_sample(&model, &store, &mel, 16, &s, 100, Some(8.0), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn linear_skip_leaves_residual_of_variance_c_out_squared() {
        let sched = build_schedule(100, 0.008).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = DiffStyle::new(&mut store, "d", 4, 80, &sched, &DenoiserConfig::default(), &mut rng).unwrap();
        let v = model.data_var;
        for t in [1usize, 30, 70, 100] {
            let (c_skip, c_out) = model.preconditioning(t as f64);
            let n = 200_000;
            let x0 = Tensor::standard_normal(&[n, 1], &mut rng).map(|x| x * v.sqrt());
            let eps = Tensor::standard_normal(&[n, 1], &mut rng);
            let xt = q_sample(&sched, &x0, t, &eps).unwrap();
            let resid = xt.data().iter().zip(eps.data()).map(|(x, e)| (e - c_skip * x).powi(2)).sum::<f64>() / n as f64;
            assert!((resid - c_out * c_out).abs() < 0.02 * c_out * c_out + 1e-9, "t={t}: {resid} vs {}", c_out * c_out);
        }
        assert!(model.preconditioning(100.0).0 > 0.999);
    }

    #[test]
    fn clipped_update_matches_plain_update_when_inactive() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mel = Tensor::standard_normal(&[9, 80], &mut rng);
        // A bound this wide never binds, so both branches must agree.
        let s = build_schedule(5, 0.5).unwrap();
        let plain = reverse_sample(&model, &store, &mel, 16, &s, 100, None, 3).unwrap();
        let wide = reverse_sample(&model, &store, &mel, 16, &s, 100, Some(1e12), 3).unwrap();
        assert!(plain.max_abs_diff(&wide) < 1e-9);
        let tight = reverse_sample(&model, &store, &mel, 16, &s, 100, Some(0.1), 3).unwrap();
        assert!(tight.data().iter().all(|v| v.abs() < 3.0));
    }

    #[test]
    fn denoiser_preserves_shape() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store);
        let mut g = Graph::inference();
        let mel = g.constant(Tensor::zeros(&[7, 80]));
        let prep = model.prepare(&mut g, &store, mel).unwrap();
        let x = g.constant(Tensor::zeros(&[7, 16]));
        let e = model.predict(&mut g, &store, x, 3.0, &prep).unwrap();
        assert_eq!(g.value(e).shape(), &[7, 16]);
        assert!(store.numel_with_prefix("diff.") > 100_000);
    }

    #[test]
    fn non_finite_conditioning_reports_step() {
        let mut store = ParamStore::new();
        let model = small_model(&mut store);
        // Make the output layer live so the NaN reaches the sample.
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("diff.den.head2.w") {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.1);
            }
        }
        let mut mel = Tensor::zeros(&[5, 80]);
        mel.data_mut()[0] = f64::NAN;
        let s = build_schedule(10, 0.008).unwrap();
        let err = reverse_sample(&model, &store, &mel, 16, &s, 10, None, 1).unwrap_err();
        assert!(err.to_string().contains("step 10"), "{err}");
    }
}
