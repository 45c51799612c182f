//! The drift-correction network `ũ_θ(x, t, ∇log π)`: a two-hidden-layer SiLU MLP
//! over `[x, sinusoidal time features]`, optionally plus a time-gated copy of the
//! detached score. Batched forward with an explicit tape for the reverse pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetVariant {
    /// Ignores the score input.
    PisNet,
    /// Adds `γ(t)·score` with a learned scalar gate `γ`.
    PisGradNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub dim: usize,
    pub hidden: usize,
    pub embedding: usize,
    pub variant: NetVariant,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1x: usize,
    w1t: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    wg: usize,
    bg: usize,
    len: usize,
}

impl MlpArch {
    fn layout(&self) -> Layout {
        let (d, h, e) = (self.dim, self.hidden, self.embedding);
        let w1x = 0;
        let w1t = w1x + d * h;
        let b1 = w1t + e * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * d;
        let wg = b3 + d;
        let (bg, len) = match self.variant {
            NetVariant::PisNet => (wg, wg),
            NetVariant::PisGradNet => (wg + e, wg + e + 1),
        };
        Layout {
            w1x,
            w1t,
            b1,
            w2,
            b2,
            w3,
            b3,
            wg,
            bg,
            len,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().len
    }
}

/// Sinusoidal features of normalized time `t ∈ [0, 1]`.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    let freq = |k: usize| {
        if half > 1 {
            0.1 + (100.0 - 0.1) * k as f64 / (half - 1) as f64
        } else {
            1.0
        }
    };
    for k in 0..half {
        out.push((freq(k) * t).sin());
    }
    for k in 0..half {
        out.push((freq(k) * t).cos());
    }
    out
}

/// Time-dependent quantities that are shared by every particle at one step.
#[derive(Debug, Clone)]
pub struct TimeContext {
    pub step: usize,
    pub embedding: Array1<f64>,
    /// `embedding · W1t + b1`.
    bias1: Array1<f64>,
    pub gate: f64,
}

/// Values recorded by a forward pass for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    step: usize,
    x: Array2<f64>,
    score: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub arch: MlpArch,
    pub params: Vec<f64>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

fn check_finite(a: &Array2<f64>, layer: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer })
    }
}

impl Mlp {
    /// Gaussian `N(0, 1/fan_in)` hidden weights; zero output layer and gate, so
    /// the initial network is identically zero.
    pub fn init<R: Rng + ?Sized>(arch: MlpArch, rng: &mut R) -> Result<Self> {
        if arch.dim == 0 || arch.hidden == 0 || arch.embedding == 0 || arch.embedding % 2 != 0 {
            return Err(Error::Config(
                "network needs positive dim and hidden width and an even embedding width".into(),
            ));
        }
        let lay = arch.layout();
        let mut params = vec![0.0; lay.len];
        let sd1 = 1.0 / ((arch.dim + arch.embedding) as f64).sqrt();
        for p in &mut params[lay.w1x..lay.b1] {
            *p = sd1 * standard_normal(rng);
        }
        let sd2 = 1.0 / (arch.hidden as f64).sqrt();
        for p in &mut params[lay.w2..lay.b2] {
            *p = sd2 * standard_normal(rng);
        }
        Ok(Self { arch, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn mat(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[off..off + rows * cols]).expect("layout")
    }

    fn vec(&self, off: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[off..off + len])
    }

    pub fn context(&self, step: usize, total: usize) -> TimeContext {
        let a = self.arch;
        let lay = a.layout();
        let emb = Array1::from(time_embedding(step as f64 / total as f64, a.embedding));
        let bias1 = emb.dot(&self.mat(lay.w1t, a.embedding, a.hidden)) + self.vec(lay.b1, a.hidden);
        let gate = match a.variant {
            NetVariant::PisNet => 0.0,
            NetVariant::PisGradNet => emb.dot(&self.vec(lay.wg, a.embedding)) + self.params[lay.bg],
        };
        TimeContext {
            step,
            embedding: emb,
            bias1,
            gate,
        }
    }

    pub fn contexts(&self, total: usize) -> Vec<TimeContext> {
        (0..=total).map(|j| self.context(j, total)).collect()
    }

    fn check_inputs(&self, x: &ArrayView2<f64>, score: &ArrayView2<f64>) -> Result<()> {
        let d = self.arch.dim;
        if x.ncols() != d || score.ncols() != d || x.nrows() != score.nrows() {
            return Err(Error::Shape(format!(
                "network expects [B, {d}] inputs, got {:?} and {:?}",
                x.shape(),
                score.shape()
            )));
        }
        Ok(())
    }

    fn run(&self, ctx: &TimeContext, x: ArrayView2<f64>, score: ArrayView2<f64>, keep: bool) -> Result<(Array2<f64>, Option<Tape>)> {
        self.check_inputs(&x, &score)?;
        let a = self.arch;
        let lay = a.layout();
        let mut z1 = x.dot(&self.mat(lay.w1x, a.dim, a.hidden));
        z1 += &ctx.bias1;
        let h1 = z1.mapv(silu);
        check_finite(&h1, 1)?;
        let mut z2 = h1.dot(&self.mat(lay.w2, a.hidden, a.hidden));
        z2 += &self.vec(lay.b2, a.hidden);
        let h2 = z2.mapv(silu);
        check_finite(&h2, 2)?;
        let mut out = h2.dot(&self.mat(lay.w3, a.hidden, a.dim));
        out += &self.vec(lay.b3, a.dim);
        if a.variant == NetVariant::PisGradNet && ctx.gate != 0.0 {
            out.scaled_add(ctx.gate, &score);
        }
        check_finite(&out, 3)?;
        let tape = keep.then(|| Tape {
            step: ctx.step,
            x: x.to_owned(),
            score: score.to_owned(),
            z1,
            h1,
            z2,
            h2,
        });
        Ok((out, tape))
    }

    /// Batched `ũ` for rows of `x` at one time step.
    pub fn forward(&self, ctx: &TimeContext, x: ArrayView2<f64>, score: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.run(ctx, x, score, false)?.0)
    }

    pub fn forward_tape(&self, ctx: &TimeContext, x: ArrayView2<f64>, score: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        let (out, tape) = self.run(ctx, x, score, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    /// Single-point convenience wrapper.
    pub fn forward_point(&self, x: &[f64], step: usize, total: usize, score: &[f64]) -> Result<Vec<f64>> {
        let d = self.arch.dim;
        let xa = ArrayView2::from_shape((1, d), x).map_err(|e| Error::Shape(e.to_string()))?;
        let sa = ArrayView2::from_shape((1, d), score).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward(&self.context(step, total), xa, sa)?.into_raw_vec_and_offset().0)
    }

    /// Accumulates parameter gradients of `Σ cot ⊙ output` into `grads` and
    /// returns the cotangents of the `x` and `score` inputs.
    pub fn backward(&self, ctx: &TimeContext, tape: &Tape, cot: ArrayView2<f64>, grads: &mut [f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        let a = self.arch;
        let lay = a.layout();
        if grads.len() != lay.len || tape.step != ctx.step || cot.dim() != tape.x.dim() {
            return Err(Error::Shape("tape, cotangent or gradient buffer does not match the network".into()));
        }
        let (d, h, e) = (a.dim, a.hidden, a.embedding);
        let mut d_score = Array2::zeros(cot.raw_dim());
        if a.variant == NetVariant::PisGradNet {
            let d_gate: f64 = cot.iter().zip(tape.score.iter()).map(|(c, s)| c * s).sum();
            let mut wg = ArrayViewMut1::from(&mut grads[lay.wg..lay.wg + e]);
            wg.scaled_add(d_gate, &ctx.embedding);
            grads[lay.bg] += d_gate;
            d_score.scaled_add(ctx.gate, &cot);
        }
        {
            let mut w3 = ArrayViewMut2::from_shape((h, d), &mut grads[lay.w3..lay.b3]).expect("layout");
            w3 += &tape.h2.t().dot(&cot);
        }
        {
            let mut b3 = ArrayViewMut1::from(&mut grads[lay.b3..lay.b3 + d]);
            b3 += &cot.sum_axis(Axis(0));
        }
        let mut dz2 = cot.dot(&self.mat(lay.w3, h, d).t());
        dz2.zip_mut_with(&tape.z2, |g, &z| *g *= silu_grad(z));
        {
            let mut w2 = ArrayViewMut2::from_shape((h, h), &mut grads[lay.w2..lay.b2]).expect("layout");
            w2 += &tape.h1.t().dot(&dz2);
        }
        {
            let mut b2 = ArrayViewMut1::from(&mut grads[lay.b2..lay.b2 + h]);
            b2 += &dz2.sum_axis(Axis(0));
        }
        let mut dz1 = dz2.dot(&self.mat(lay.w2, h, h).t());
        dz1.zip_mut_with(&tape.z1, |g, &z| *g *= silu_grad(z));
        {
            let mut w1x = ArrayViewMut2::from_shape((d, h), &mut grads[lay.w1x..lay.w1t]).expect("layout");
            w1x += &tape.x.t().dot(&dz1);
        }
        let col = dz1.sum_axis(Axis(0));
        {
            let mut b1 = ArrayViewMut1::from(&mut grads[lay.b1..lay.b1 + h]);
            b1 += &col;
        }
        {
            let mut w1t = ArrayViewMut2::from_shape((e, h), &mut grads[lay.w1t..lay.b1]).expect("layout");
            for (r, &em) in ctx.embedding.iter().enumerate() {
                if em != 0.0 {
                    w1t.row_mut(r).scaled_add(em, &col);
                }
            }
        }
        let dx = dz1.dot(&self.mat(lay.w1x, d, h).t());
        Ok((dx, d_score))
    }
}
