//! Parameter-free alignment of style frames to the text axis, and additive
//! fusion of text encodings with style and the global embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Identity,
    Upsample,
    Downsample,
}

/// Where one output frame takes its value from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FrameSource {
    Copy { index: usize },
    /// `(1 - frac) * s[left] + frac * s[right]`.
    Interp { left: usize, right: usize, frac: f64 },
    /// Mean over the half-open span `[start, end)`.
    Span { start: usize, end: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub t_style: usize,
    pub t_text: usize,
    pub mode: AlignMode,
    pub frames: Vec<FrameSource>,
}

impl AlignmentPlan {
    pub fn new(t_style: usize, t_text: usize) -> Result<Self> {
        if t_style == 0 || t_text == 0 {
            return Err(Error::Contract(format!(
                "alignment needs nonempty sequences, got t_style = {t_style}, t_text = {t_text}"
            )));
        }
        let (mode, frames) = if t_style == t_text {
            (AlignMode::Identity, (0..t_text).map(|index| FrameSource::Copy { index }).collect())
        } else if t_style < t_text {
            // t_text > t_style >= 1 so t_text - 1 > 0.
            let frames = (0..t_text)
                .map(|j| {
                    let num = j * (t_style - 1);
                    let den = t_text - 1;
                    let left = num / den;
                    let frac = (num % den) as f64 / den as f64;
                    if frac == 0.0 {
                        FrameSource::Copy { index: left }
                    } else {
                        FrameSource::Interp {
                            left,
                            right: left + 1,
                            frac,
                        }
                    }
                })
                .collect();
            (AlignMode::Upsample, frames)
        } else {
            // round(j * ts / tt) with halves rounded up, in exact integers.
            let bound = |j: usize| (2 * j * t_style + t_text) / (2 * t_text);
            let frames = (0..t_text)
                .map(|j| FrameSource::Span {
                    start: bound(j),
                    end: bound(j + 1),
                })
                .collect();
            (AlignMode::Downsample, frames)
        };
        Ok(Self {
            t_style,
            t_text,
            mode,
            frames,
        })
    }

    /// Dense `[t_text, t_style]` weights so that `A @ style` is the aligned sequence.
    pub fn matrix(&self) -> Tensor {
        let mut a = Tensor::zeros(&[self.t_text, self.t_style]);
        for (j, src) in self.frames.iter().enumerate() {
            let row = a.row_mut(j);
            match *src {
                FrameSource::Copy { index } => row[index] = 1.0,
                FrameSource::Interp { left, right, frac } => {
                    row[left] += 1.0 - frac;
                    row[right] += frac;
                }
                FrameSource::Span { start, end } => {
                    let w = 1.0 / (end - start) as f64;
                    row[start..end].iter_mut().for_each(|v| *v = w);
                }
            }
        }
        a
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Aligns `style` (`[t_style, D_s]`) to `t_text` frames.
pub fn style_align(style: &Tensor, t_text: usize) -> Result<Tensor> {
    let (t_style, d) = style.dims2();
    let plan = AlignmentPlan::new(t_style, t_text)?;
    let mut out = Vec::with_capacity(t_text * d);
    for src in &plan.frames {
        match *src {
            FrameSource::Copy { index } => out.extend_from_slice(style.row(index)),
            FrameSource::Interp { left, right, frac } => out.extend(
                style
                    .row(left)
                    .iter()
                    .zip(style.row(right))
                    .map(|(a, b)| (1.0 - frac) * a + frac * b),
            ),
            FrameSource::Span { start, end } => {
                let n = (end - start) as f64;
                for c in 0..d {
                    out.push((start..end).map(|r| style.get2(r, c)).sum::<f64>() / n);
                }
            }
        }
    }
    Tensor::new(&[t_text, d], out)
}

/// Tape version of [`style_align`]: a matmul with the constant plan matrix.
pub fn style_align_var(g: &mut Graph, style: Var, t_text: usize) -> Result<Var> {
    let t_style = g.value(style).rows();
    let plan = AlignmentPlan::new(t_style, t_text)?;
    if plan.mode == AlignMode::Identity {
        return Ok(style);
    }
    let a = g.constant(plan.matrix());
    g.matmul(a, style)
}

/// `text + Linear(style) + Linear(global)` with the global term broadcast over frames.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub style: Linear,
    pub global: Linear,
}

impl Fusion {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, name: &str, style_dim: usize, global_dim: usize, text_dim: usize, rng: &mut R) -> Self {
        Self {
            style: Linear::new(store, &format!("{name}.style"), style_dim, text_dim, rng),
            global: Linear::new(store, &format!("{name}.global"), global_dim, text_dim, rng),
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, style_dim: usize, global_dim: usize, text_dim: usize) -> Self {
        Self {
            style: Linear::zeroed(store, &format!("{name}.style"), style_dim, text_dim),
            global: Linear::zeroed(store, &format!("{name}.global"), global_dim, text_dim),
        }
    }

    /// `text: [T, D_t]`, `style: [T, D_s]` (already aligned), `global: [1, D_g]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, text: Var, style: Var, global: Var) -> Result<Var> {
        let (tt, ts) = (g.value(text).rows(), g.value(style).rows());
        if tt != ts {
            return Err(Error::Contract(format!(
                "fusion needs aligned inputs: {tt} text frames vs {ts} style frames"
            )));
        }
        let s = self.style.forward(g, store, style)?;
        let e = self.global.forward(g, store, global)?;
        let x = g.add(text, s)?;
        g.add(x, e)
    }
}
