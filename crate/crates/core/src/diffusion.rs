//! Variance-preserving diffusion over point-structured latents.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Module, Param, Tape, Tensor, Var};
use crate::autoencoder::{cog_tolerance, condition_column, Autoencoder, Geometry, LatentPoint};
use crate::egnn::{EgnnConfig, EgnnParams};
use crate::error::{Error, Result};
use crate::geometry::{self, GraphBatch, Rotation};
use crate::scalar::Scalar;
use crate::training::{
    minibatch, rng_stream, stream, Aborted, LossRecord, TrainConfig, TrainResult, Trained,
};

/// Lower bound on each stepwise ratio `(alpha_t / alpha_{t-1})^2`.
pub const STEP_RATIO_FLOOR: f64 = 1e-4;

/// After clipping, `alpha_t^2` is mapped to `(1 - 2s) alpha_t^2 + s` for
/// `t >= 1`, keeping `alpha_T^2 >= s` so the last reverse steps stay bounded.
pub const NOISE_PRECISION: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha_t = (1 - (t/T)^2)^2`
    Polynomial,
    /// `alpha_t = 1 - t/T`
    Linear,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Polynomial => "polynomial",
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "polynomial" => Ok(ScheduleKind::Polynomial),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::invalid(format!(
                "unknown schedule kind `{other}` (polynomial | linear)"
            ))),
        }
    }
}

/// Discrete schedule. Index `t` runs over `0..=T`; `beta[0]` and `rho[0]`
/// are unused zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    alpha2: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    beta: Vec<f64>,
    rho: Vec<f64>,
}

impl NoiseSchedule {
    /// The target curve is turned into stepwise ratios, each floored at
    /// [`STEP_RATIO_FLOOR`], multiplied back up and offset by
    /// [`NOISE_PRECISION`], so `alpha_T^2 > s` and every `beta_t` lies in
    /// `[0, 1)`.
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!(
                "schedule needs T >= 2, got {steps}"
            )));
        }
        let tf = steps as f64;
        let curve = |t: usize| -> f64 {
            let u = t as f64 / tf;
            match kind {
                ScheduleKind::Polynomial => (1.0 - u * u).powi(2),
                ScheduleKind::Linear => 1.0 - u,
            }
        };
        let mut clipped = vec![1.0; steps + 1];
        for t in 1..=steps {
            let (prev, cur) = (curve(t - 1).powi(2), curve(t).powi(2));
            clipped[t] = clipped[t - 1] * (cur / prev).clamp(STEP_RATIO_FLOOR, 1.0);
        }
        let s = NOISE_PRECISION;
        let alpha2: Vec<f64> = clipped
            .iter()
            .enumerate()
            .map(|(t, &a)| if t == 0 { 1.0 } else { (1.0 - 2.0 * s) * a + s })
            .collect();
        let mut beta = vec![0.0; steps + 1];
        for t in 1..=steps {
            beta[t] = 1.0 - alpha2[t] / alpha2[t - 1];
        }
        let alpha: Vec<f64> = alpha2.iter().map(|a| a.sqrt()).collect();
        let sigma: Vec<f64> = alpha2.iter().map(|a| (1.0 - a).sqrt()).collect();
        let mut rho = vec![0.0; steps + 1];
        for t in 2..=steps {
            rho[t] = (sigma[t - 1] / sigma[t]).sqrt() * beta[t];
        }
        Ok(Self {
            kind,
            steps,
            alpha2,
            alpha,
            sigma,
            beta,
            rho,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha2(&self, t: usize) -> f64 {
        self.alpha2[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Reverse-step noise scale; zero at `t = 1`.
    pub fn rho(&self, t: usize) -> f64 {
        self.rho[t]
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::invalid(format!(
                "time step {t} outside [{lo}, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// `w(0) = -1`, `w(t) = beta_t^2 / (2 rho_t^2 (1 - beta_t)(1 - alpha_t^2))`.
    /// `w(1)` is infinite because `rho_1 = 0`.
    pub fn vlb_weight(&self, t: usize) -> Result<f64> {
        self.check_t(t, 0)?;
        if t == 0 {
            return Ok(-1.0);
        }
        let b = self.beta[t];
        let r2 = self.rho[t] * self.rho[t];
        if r2 == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(b * b / (2.0 * r2 * (1.0 - b) * (1.0 - self.alpha2[t])))
    }

    /// The same weight after substituting `rho_t^2 = (sigma_{t-1}/sigma_t) beta_t^2`.
    pub fn vlb_weight_reduced(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        let b = self.beta[t];
        Ok(self.sigma[t] / (2.0 * self.sigma[t - 1] * (1.0 - b) * (1.0 - self.alpha2[t])))
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..=self.steps)
            .map(|t| self.vlb_weight(t).expect("in range"))
            .collect()
    }
}

/// A batch of latents sharing `k`, with optional per-item conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T> {
    pub items: Vec<LatentPoint<T>>,
    pub conditions: Option<Vec<f64>>,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn new(items: Vec<LatentPoint<T>>, conditions: Option<Vec<f64>>) -> Result<Self> {
        let k = items
            .first()
            .map(|z| z.k())
            .ok_or_else(|| Error::invalid("empty latent batch"))?;
        if let Some(z) = items.iter().find(|z| z.k() != k) {
            return Err(Error::WidthMismatch {
                what: "latent batch member features",
                expected: k,
                actual: z.k(),
            });
        }
        if conditions.as_ref().is_some_and(|c| c.len() != items.len()) {
            return Err(Error::invalid("one condition per latent required"));
        }
        Ok(Self { items, conditions })
    }

    pub fn k(&self) -> usize {
        self.items[0].k()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.items.iter().map(LatentPoint::n).collect()
    }
}

/// `z_t = alpha_t z_0 + sigma_t eps`; `eps_x` must already be centred.
pub fn diffuse<T: Scalar>(
    z0: &LatentPoint<T>,
    t: usize,
    eps_x: &Tensor<T>,
    eps_h: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<LatentPoint<T>> {
    s.check_t(t, 1)?;
    check_noise(z0, eps_x, eps_h)?;
    let (a, sg) = (T::of(s.alpha(t)), T::of(s.sigma(t)));
    let zx = Tensor::from_fn(z0.n(), 3, |i, c| {
        a * z0.z_x.get(i, c) + sg * eps_x.get(i, c)
    });
    let zh = Tensor::from_fn(z0.n(), z0.k(), |i, c| {
        a * z0.z_h.get(i, c) + sg * eps_h.get(i, c)
    });
    LatentPoint::new(zx, zh)
}

fn check_noise<T: Scalar>(z: &LatentPoint<T>, eps_x: &Tensor<T>, eps_h: &Tensor<T>) -> Result<()> {
    if eps_x.shape() != z.z_x.shape() || eps_h.shape() != z.z_h.shape() {
        return Err(Error::ShapeMismatch {
            op: "latent noise",
            lhs: [z.z_x.shape(), z.z_h.shape()].concat(),
            rhs: [eps_x.shape(), eps_h.shape()].concat(),
        });
    }
    let cog = geometry::cog_norm(eps_x);
    if cog > cog_tolerance(eps_x) {
        return Err(Error::invalid(format!(
            "coordinate noise is not centred (|CoG| = {cog:e})"
        )));
    }
    Ok(())
}

/// One forward transition `z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step<T: Scalar>(
    z: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Tensor<T> {
    let (a, b) = (T::of((1.0 - s.beta(t)).sqrt()), T::of(s.beta(t).sqrt()));
    Tensor::from_fn(z.rows(), z.cols(), |i, c| {
        a * z.get(i, c) + b * eps.get(i, c)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub k: usize,
    pub hidden: usize,
    pub layers: usize,
    pub conditional: bool,
    pub coord_init_gain: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            k: 1,
            hidden: 64,
            layers: 4,
            conditional: false,
            coord_init_gain: 0.001,
        }
    }
}

/// Time-conditional EGNN predicting the injected noise. Node inputs are
/// `[z_h, t/T]`, plus the condition when enabled.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub net: EgnnParams<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        if config.k == 0 || config.hidden == 0 {
            return Err(Error::invalid("denoiser needs k >= 1 and hidden >= 1"));
        }
        let ec = EgnnConfig {
            coord_init_gain: config.coord_init_gain,
            ..EgnnConfig::new(
                config.k + 1 + usize::from(config.conditional),
                config.k,
                config.hidden,
                config.layers,
            )
        };
        Ok(Self {
            config,
            net: EgnnParams::new("denoiser", &ec, rng),
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// `(eps_x, eps_h)` predictions; `time` is the `[n_nodes, 1]` column of
    /// `t/T` values.
    pub(crate) fn predict_on(
        &self,
        tape: &mut Tape<T>,
        graph: &GraphBatch,
        zx: Var,
        zh: Var,
        time: Var,
        s: Option<Var>,
    ) -> Result<(Var, Var)> {
        let extra = match s {
            Some(s) => tape.concat(&[time, s])?,
            None => time,
        };
        let (xl, eh) = self.net.forward(tape, graph, zx, zh, Some(extra))?;
        let d = tape.sub(xl, zx)?;
        let ex = graph.project_cog(tape, d)?;
        Ok((ex, eh))
    }

    /// Batched value-level prediction. `t[g]` is the step of graph `g`.
    pub fn predict_batch(
        &self,
        graph: &GraphBatch,
        zx: &Tensor<T>,
        zh: &Tensor<T>,
        t: &[usize],
        steps: usize,
        cond: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let time = time_column(graph, t, steps);
        let (zxv, zhv) = (tape.constant(zx.clone()), tape.constant(zh.clone()));
        let tv = tape.constant(time);
        let sv = cond.map(|c| tape.constant(c.clone()));
        let (ex, eh) = self.predict_on(&mut tape, graph, zxv, zhv, tv, sv)?;
        Ok((tape.value(ex).clone(), tape.value(eh).clone()))
    }

    fn condition_for(&self, n: usize, s: Option<f64>) -> Result<Option<Tensor<T>>> {
        match (self.config.conditional, s) {
            (false, None) => Ok(None),
            (false, Some(_)) => Err(Error::invalid(
                "condition supplied to an unconditional denoiser",
            )),
            (true, s) => Ok(Some(condition_column(std::iter::once((n, s)))?)),
        }
    }
}

impl<T: Scalar> Module<T> for Denoiser<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.net.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.net.visit_mut(f);
    }
}

fn time_column<T: Scalar>(graph: &GraphBatch, t: &[usize], steps: usize) -> Tensor<T> {
    let ng = graph.node_graph();
    Tensor::from_fn(graph.n_nodes(), 1, |i, _| {
        T::of(t[ng[i]] as f64 / steps as f64)
    })
}

/// Noise prediction for one latent at step `t`.
pub fn denoiser_predict<T: Scalar>(
    den: &Denoiser<T>,
    z_t: &LatentPoint<T>,
    t: usize,
    schedule: &NoiseSchedule,
    condition: Option<f64>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    schedule.check_t(t, 1)?;
    if z_t.k() != den.k() {
        return Err(Error::WidthMismatch {
            what: "denoiser latent features",
            expected: den.k(),
            actual: z_t.k(),
        });
    }
    let graph = GraphBatch::single(z_t.n())?;
    let cond = den.condition_for(z_t.n(), condition)?;
    den.predict_batch(
        &graph,
        &z_t.z_x,
        &z_t.z_h,
        &[t],
        schedule.steps(),
        cond.as_ref(),
    )
}

/// Per-graph column of a per-step schedule quantity.
fn per_node<T: Scalar>(graph: &GraphBatch, t: &[usize], f: impl Fn(usize) -> f64) -> Tensor<T> {
    let ng = graph.node_graph();
    Tensor::from_fn(graph.n_nodes(), 1, |i, _| T::of(f(t[ng[i]])))
}

/// Stacked inputs of one diffusion training step.
pub(crate) struct LdmBatch<T> {
    pub graph: GraphBatch,
    pub z0x: Tensor<T>,
    pub z0h: Tensor<T>,
    pub t: Vec<usize>,
    pub eps_x: Tensor<T>,
    pub eps_h: Tensor<T>,
    pub cond: Option<Tensor<T>>,
}

/// Mean over all latent entries of `(eps - eps_hat)^2`.
pub(crate) fn ldm_objective<T: Scalar>(
    tape: &mut Tape<T>,
    den: &Denoiser<T>,
    b: &LdmBatch<T>,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let g = &b.graph;
    let a = per_node::<T>(g, &b.t, |t| schedule.alpha(t));
    let s = per_node::<T>(g, &b.t, |t| schedule.sigma(t));
    let mix = |z: &Tensor<T>, e: &Tensor<T>| {
        Tensor::from_fn(z.rows(), z.cols(), |i, c| {
            a.get(i, 0) * z.get(i, c) + s.get(i, 0) * e.get(i, c)
        })
    };
    let ztx = tape.constant(mix(&b.z0x, &b.eps_x));
    let zth = tape.constant(mix(&b.z0h, &b.eps_h));
    let time = tape.constant(time_column(g, &b.t, schedule.steps()));
    let cond = b.cond.as_ref().map(|c| tape.constant(c.clone()));
    let (px, ph) = den.predict_on(tape, g, ztx, zth, time, cond)?;
    let ex = tape.constant(b.eps_x.clone());
    let eh = tape.constant(b.eps_h.clone());
    let dx = tape.sub(px, ex)?;
    let dh = tape.sub(ph, eh)?;
    let dx = tape.square(dx);
    let dh = tape.square(dh);
    let sx = tape.sum(dx);
    let sh = tape.sum(dh);
    let tot = tape.add(sx, sh)?;
    let entries = b.z0x.numel() + b.z0h.numel();
    Ok(tape.scale(tot, T::one() / T::of(entries as f64)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdmSample<T> {
    pub loss: f64,
    pub t: usize,
    pub eps_x: Tensor<T>,
    pub eps_h: Tensor<T>,
}

/// Diffusion loss of one latent with `t ~ U{1..T}` and fresh noise.
pub fn ldm_loss<T: Scalar, R: Rng + ?Sized>(
    z0: &LatentPoint<T>,
    den: &Denoiser<T>,
    schedule: &NoiseSchedule,
    condition: Option<f64>,
    rng: &mut R,
) -> Result<LdmSample<T>> {
    let t = rng.random_range(1..=schedule.steps());
    let eps_x = geometry::project_cog(&geometry::gaussian(rng, z0.n(), 3));
    let eps_h = geometry::gaussian(rng, z0.n(), z0.k());
    let loss = ldm_loss_with(z0, den, schedule, condition, t, &eps_x, &eps_h)?;
    Ok(LdmSample {
        loss,
        t,
        eps_x,
        eps_h,
    })
}

/// Diffusion loss of one latent at a given step and noise.
pub fn ldm_loss_with<T: Scalar>(
    z0: &LatentPoint<T>,
    den: &Denoiser<T>,
    schedule: &NoiseSchedule,
    condition: Option<f64>,
    t: usize,
    eps_x: &Tensor<T>,
    eps_h: &Tensor<T>,
) -> Result<f64> {
    schedule.check_t(t, 1)?;
    check_noise(z0, eps_x, eps_h)?;
    let batch = LdmBatch {
        graph: GraphBatch::single(z0.n())?,
        z0x: z0.z_x.clone(),
        z0h: z0.z_h.clone(),
        t: vec![t],
        eps_x: eps_x.clone(),
        eps_h: eps_h.clone(),
        cond: den.condition_for(z0.n(), condition)?,
    };
    let mut tape = Tape::new();
    let l = ldm_objective(&mut tape, den, &batch, schedule)?;
    Ok(tape.value(l).values()[0].as_f64())
}

/// Encoder means of a dataset under a frozen autoencoder.
pub fn encode_dataset<T: Scalar>(
    ae: &Autoencoder<T>,
    data: &[Geometry<T>],
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    data.iter().map(|g| ae.encode(g)).collect()
}

/// Adam on the diffusion objective. Latents are drawn every iteration as
/// `mu + sigma0 eps` from the frozen encoder means.
pub fn train_ldm<T: Scalar>(
    mut den: Denoiser<T>,
    ae: &Autoencoder<T>,
    data: &[Geometry<T>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> TrainResult<Denoiser<T>> {
    let mut log = Vec::with_capacity(cfg.iterations);
    let abort = |den, log, iteration, error| {
        Box::new(Aborted {
            last_good: den,
            log,
            iteration,
            error,
        })
    };
    if data.is_empty() {
        return Err(abort(
            den,
            log,
            0,
            Error::invalid("diffusion training set is empty"),
        ));
    }
    if den.k() != ae.k() || den.config.conditional != ae.config.conditional {
        let e = Error::invalid(format!(
            "denoiser (k={}, conditional={}) does not match autoencoder (k={}, conditional={})",
            den.k(),
            den.config.conditional,
            ae.k(),
            ae.config.conditional
        ));
        return Err(abort(den, log, 0, e));
    }
    let means = match encode_dataset(ae, data) {
        Ok(m) => m,
        Err(e) => return Err(abort(den, log, 0, e)),
    };
    let mut rng = rng_stream(cfg.seed, stream::TRAIN_LDM);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let sigma0 = T::of(ae.sigma0());
    let k = den.k();
    for it in 0..cfg.iterations {
        opt.config.lr = cfg.lr_at(it);
        let idx = minibatch(&mut rng, data.len(), cfg.batch_size);
        let sizes: Vec<usize> = idx.iter().map(|&i| data[i].n()).collect();
        let graph = GraphBatch::new(&sizes).expect("molecules are nonempty");
        let n = graph.n_nodes();
        let mux =
            Tensor::vcat(&idx.iter().map(|&i| &means[i].0).collect::<Vec<_>>()).expect("width 3");
        let muh =
            Tensor::vcat(&idx.iter().map(|&i| &means[i].1).collect::<Vec<_>>()).expect("width k");
        let rx = graph.project_cog_values(&geometry::gaussian::<T, _>(&mut rng, n, 3));
        let rh = geometry::gaussian::<T, _>(&mut rng, n, k);
        let z0x = Tensor::from_fn(n, 3, |i, c| mux.get(i, c) + sigma0 * rx.get(i, c));
        let z0h = Tensor::from_fn(n, k, |i, c| muh.get(i, c) + sigma0 * rh.get(i, c));
        let t: Vec<usize> = idx
            .iter()
            .map(|_| rng.random_range(1..=schedule.steps()))
            .collect();
        let eps_x = graph.project_cog_values(&geometry::gaussian::<T, _>(&mut rng, n, 3));
        let eps_h = geometry::gaussian::<T, _>(&mut rng, n, k);
        let cond = if den.config.conditional {
            match condition_column(idx.iter().map(|&i| (data[i].n(), data[i].condition))) {
                Ok(c) => Some(c),
                Err(e) => return Err(abort(den, log, it, e)),
            }
        } else {
            None
        };
        let batch = LdmBatch {
            graph,
            z0x,
            z0h,
            t,
            eps_x,
            eps_h,
            cond,
        };
        let mut tape = Tape::new();
        let loss_var = match ldm_objective(&mut tape, &den, &batch, schedule) {
            Ok(v) => v,
            Err(e) => return Err(abort(den, log, it, e)),
        };
        let loss = tape.value(loss_var).values()[0];
        if !loss.is_finite() {
            return Err(abort(
                den,
                log,
                it,
                Error::NonFinite(format!("diffusion loss {loss}")),
            ));
        }
        if let Err(e) = tape.backward(loss_var) {
            return Err(abort(den, log, it, e));
        }
        den.zero_grad();
        den.pull_grads(&tape);
        if let Err(e) = opt.step(&mut [&mut den]) {
            return Err(abort(den, log, it, e));
        }
        log.push(LossRecord {
            iteration: it,
            loss: loss.as_f64(),
        });
    }
    Ok(Trained { model: den, log })
}

/// `z_{t-1} = (z_t - beta_t / sqrt(1 - alpha_t^2) eps_hat) / sqrt(1 - beta_t) + rho_t eps`.
pub fn denoise_step<T: Scalar>(
    z: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    noise: &Tensor<T>,
    s: &NoiseSchedule,
) -> Tensor<T> {
    let b = s.beta(t);
    let c_eps = T::of(b / s.sigma(t));
    let c_z = T::of(1.0 / (1.0 - b).sqrt());
    let r = T::of(s.rho(t));
    Tensor::from_fn(z.rows(), z.cols(), |i, c| {
        c_z * (z.get(i, c) - c_eps * eps_hat.get(i, c)) + r * noise.get(i, c)
    })
}

/// Source of the Gaussian draws of one sampling trajectory.
pub trait TrajectoryNoise<T> {
    /// `(x, h)` noise for the initial latent, `x` not yet centred.
    fn initial(&mut self, n: usize, k: usize) -> (Tensor<T>, Tensor<T>);
    /// `(x, h)` noise injected when stepping from `t` to `t - 1`.
    fn step(&mut self, t: usize, n: usize, k: usize) -> (Tensor<T>, Tensor<T>);
}

/// Standard normal draws from an RNG.
pub struct RngNoise<R>(pub R);

impl<T: Scalar, R: Rng> TrajectoryNoise<T> for RngNoise<R> {
    fn initial(&mut self, n: usize, k: usize) -> (Tensor<T>, Tensor<T>) {
        (
            geometry::gaussian(&mut self.0, n, 3),
            geometry::gaussian(&mut self.0, n, k),
        )
    }
    fn step(&mut self, _t: usize, n: usize, k: usize) -> (Tensor<T>, Tensor<T>) {
        (
            geometry::gaussian(&mut self.0, n, 3),
            geometry::gaussian(&mut self.0, n, k),
        )
    }
}

/// Wraps another source and rotates every coordinate draw by a fixed matrix.
pub struct RotatedNoise<N> {
    pub inner: N,
    pub rotation: Rotation,
}

impl<T: Scalar, N: TrajectoryNoise<T>> TrajectoryNoise<T> for RotatedNoise<N> {
    fn initial(&mut self, n: usize, k: usize) -> (Tensor<T>, Tensor<T>) {
        let (x, h) = self.inner.initial(n, k);
        (geometry::rotate(&x, &self.rotation), h)
    }
    fn step(&mut self, t: usize, n: usize, k: usize) -> (Tensor<T>, Tensor<T>) {
        let (x, h) = self.inner.step(t, n, k);
        (geometry::rotate(&x, &self.rotation), h)
    }
}

/// Reverse chain from `z_T` to `z_0`. The last step injects no noise.
pub fn sample_latent<T: Scalar, N: TrajectoryNoise<T>>(
    den: &Denoiser<T>,
    schedule: &NoiseSchedule,
    n: usize,
    condition: Option<f64>,
    noise: &mut N,
) -> Result<LatentPoint<T>> {
    let graph = GraphBatch::single(n)?;
    let k = den.k();
    let cond = den.condition_for(n, condition)?;
    let (x0, h0) = noise.initial(n, k);
    let mut zx = geometry::project_cog(&x0);
    let mut zh = h0;
    for t in (1..=schedule.steps()).rev() {
        let (ex, eh) =
            den.predict_batch(&graph, &zx, &zh, &[t], schedule.steps(), cond.as_ref())?;
        let (nx, nh) = if t > 1 {
            let (nx, nh) = noise.step(t, n, k);
            (geometry::project_cog(&nx), nh)
        } else {
            (Tensor::zeros(n, 3), Tensor::zeros(n, k))
        };
        zx = denoise_step(&zx, t, &ex, &nx, schedule);
        zh = denoise_step(&zh, t, &eh, &nh, schedule);
        if !zx.all_finite() || !zh.all_finite() {
            return Err(Error::NonFinite(format!(
                "latent after denoising step t={t}"
            )));
        }
    }
    LatentPoint::new(geometry::project_cog(&zx), zh)
}

/// A generated molecule in network form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled<T> {
    pub latent: LatentPoint<T>,
    pub x: Tensor<T>,
    pub types: Vec<usize>,
    pub charges: Vec<i32>,
}

/// Denoise a latent of `n` nodes, then decode it.
pub fn sample_with_noise<T: Scalar, N: TrajectoryNoise<T>>(
    den: &Denoiser<T>,
    ae: &Autoencoder<T>,
    schedule: &NoiseSchedule,
    n: usize,
    condition: Option<f64>,
    noise: &mut N,
) -> Result<Sampled<T>> {
    let z = sample_latent(den, schedule, n, condition, noise)?;
    let d = ae.decode(&z, condition)?;
    Ok(Sampled {
        x: d.x.clone(),
        types: d.types(),
        charges: d.charges(),
        latent: z,
    })
}

pub fn sample<T: Scalar, R: Rng>(
    den: &Denoiser<T>,
    ae: &Autoencoder<T>,
    schedule: &NoiseSchedule,
    n: usize,
    condition: Option<f64>,
    rng: R,
) -> Result<Sampled<T>> {
    sample_with_noise(den, ae, schedule, n, condition, &mut RngNoise(rng))
}

/// Molecule `i` of the run is drawn from stream `SAMPLE_BASE + i` of `seed`,
/// so output does not depend on thread count.
pub fn sample_many<T: Scalar>(
    den: &Denoiser<T>,
    ae: &Autoencoder<T>,
    schedule: &NoiseSchedule,
    sizes: &[usize],
    conditions: Option<&[f64]>,
    seed: u64,
) -> Result<Vec<Sampled<T>>> {
    if conditions.is_some_and(|c| c.len() != sizes.len()) {
        return Err(Error::invalid(
            "one condition per requested molecule required",
        ));
    }
    sizes
        .par_iter()
        .enumerate()
        .map(|(i, &n)| {
            let rng = rng_stream(seed, stream::SAMPLE_BASE + i as u64);
            sample(den, ae, schedule, n, conditions.map(|c| c[i]), rng)
        })
        .collect()
}
