//! Invariant battery behind `geolatent check`: equivariance of every network,
//! finite-difference gradients of both losses, schedule identities, paired
//! noise invariance of the losses and of sampling, and zero-CoG latents.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference_check, Tape, Tensor, DEFAULT_FD_STEP};
use crate::autoencoder::{
    Autoencoder, AutoencoderConfig, Batch, Geometry, LatentPoint, Regularizer,
};
use crate::diffusion::{
    denoiser_predict, forward_step, ldm_loss_with, ldm_objective, sample_with_noise, Denoiser,
    DenoiserConfig, LdmBatch, NoiseSchedule, RngNoise, RotatedNoise, ScheduleKind,
};
use crate::egnn::{audit_map, AuditReport, PointCloudState};
use crate::error::Result;
use crate::geometry::{self, GraphBatch};
use crate::training::{rng_stream, stream};

/// One named check: the worst deviation seen against its tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub deviation: f64,
    pub tolerance: f64,
    pub error: Option<String>,
}

impl CheckOutcome {
    fn measured(name: &str, r: Result<f64>, tolerance: f64) -> Self {
        let (deviation, error) = match r {
            Ok(d) => (d, None),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        Self {
            name: name.to_string(),
            deviation,
            tolerance,
            error,
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.deviation < self.tolerance
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        match &self.error {
            Some(e) => format!("{verdict} {:<28} error: {e}", self.name),
            None => format!(
                "{verdict} {:<28} max_dev={:.3e} tol={:.0e}",
                self.name, self.deviation, self.tolerance
            ),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub passed: usize,
    pub failed: usize,
    pub failing: Vec<String>,
}

pub fn summarize(outcomes: &[CheckOutcome]) -> CheckSummary {
    let failing: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name.clone())
        .collect();
    CheckSummary {
        passed: outcomes.len() - failing.len(),
        failed: failing.len(),
        failing,
    }
}

/// Sizes of the battery. The defaults are the acceptance settings.
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub seed: u64,
    pub equivariance_trials: usize,
    pub loss_trials: usize,
    pub sampling_steps: usize,
    pub nodes: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            equivariance_trials: 100,
            loss_trials: 50,
            sampling_steps: 100,
            nodes: 12,
        }
    }
}

pub const EQUIVARIANCE_TOL: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const PAIRED_TOL: f64 = 1e-6;

/// Models with a unit coordinate-init gain so the coordinate paths are not
/// negligible under audit.
pub fn audit_models<R: Rng + ?Sized>(
    rng: &mut R,
    hidden: usize,
    conditional: bool,
    gain: f64,
) -> Result<(Autoencoder<f64>, Denoiser<f64>)> {
    let ae = Autoencoder::new(
        AutoencoderConfig {
            hidden,
            encoder_layers: 2,
            decoder_layers: 3,
            regularizer: Regularizer::DEFAULT_KL,
            conditional,
            coord_init_gain: gain,
            ..AutoencoderConfig::default()
        },
        rng,
    )?;
    let den = Denoiser::new(
        DenoiserConfig {
            hidden,
            layers: 3,
            conditional,
            coord_init_gain: gain,
            ..DenoiserConfig::default()
        },
        rng,
    )?;
    Ok((ae, den))
}

/// Input centroid added back to an output, so maps that act on centred data
/// can be audited against `R f(x) + t`.
fn with_centroid(out: Tensor<f64>, input: &Tensor<f64>) -> Tensor<f64> {
    let c = geometry::centroid(input);
    Tensor::from_fn(out.rows(), 3, |i, a| out.get(i, a) + c[a])
}

/// Encoder means, decoder outputs and denoiser predictions under random rigid
/// motions (`trials` proper rotations with translation, then a fifth as many
/// reflections). Coordinates must co-move, features must not change.
pub fn equivariance_checks(seed: u64, trials: usize, n: usize) -> Vec<CheckOutcome> {
    let mut rng = rng_stream(seed, stream::CHECK);
    let models = audit_models(&mut rng, 64, false, 1.0);
    let (ae, den) = match models {
        Ok(m) => m,
        Err(e) => {
            return vec![CheckOutcome::measured(
                "equivariance",
                Err(e),
                EQUIVARIANCE_TOL,
            )]
        }
    };
    let schedule = NoiseSchedule::build(100, ScheduleKind::Polynomial).expect("valid schedule");
    let k = ae.k();

    let mut encoder = |s: &PointCloudState<f64>| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let graph = GraphBatch::single(n)?;
        let mut tape = Tape::new();
        let (x, h) = (tape.constant(s.x.clone()), tape.constant(s.h.clone()));
        let (mx, mh) = ae.encode_on(&mut tape, &graph, x, h, None)?;
        Ok((
            with_centroid(tape.value(mx).clone(), &s.x),
            tape.value(mh).clone(),
        ))
    };
    let mut decoder = |s: &PointCloudState<f64>| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let z = LatentPoint::new(geometry::project_cog(&s.x), s.h.clone())?;
        let d = ae.decode(&z, None)?;
        Ok((
            with_centroid(d.x, &s.x),
            Tensor::hcat(&[&d.logits, &d.charge])?,
        ))
    };
    let mut denoiser = |s: &PointCloudState<f64>| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let z = LatentPoint::new(geometry::project_cog(&s.x), s.h.clone())?;
        let (ex, eh) = denoiser_predict(&den, &z, 37, &schedule, None)?;
        Ok((with_centroid(ex, &s.x), eh))
    };

    let in_enc = ae.config.n_types + 1;
    let mut run = |name: &str,
                   f: &mut dyn FnMut(
        &PointCloudState<f64>,
    ) -> Result<(Tensor<f64>, Tensor<f64>)>,
                   width: usize| {
        let r = (|| -> Result<f64> {
            let proper: AuditReport = audit_map(&mut *f, n, width, trials, false, true, &mut rng)?;
            let improper = audit_map(&mut *f, n, width, (trials / 5).max(1), true, true, &mut rng)?;
            Ok(proper.merge(improper).max())
        })();
        CheckOutcome::measured(name, r, EQUIVARIANCE_TOL)
    };
    vec![
        run("equivariance.encoder", &mut encoder, in_enc),
        run("equivariance.decoder", &mut decoder, k),
        run("equivariance.denoiser", &mut denoiser, k),
    ]
}

/// Tiny conditional model: 1-layer encoder, 2-layer decoder, 2-layer
/// denoiser, width 16, molecules of 4 and 2 atoms.
pub fn gradient_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = rng_stream(seed, stream::CHECK + 1);
    let r = (|| -> Result<(f64, f64)> {
        let mut ae = Autoencoder::<f64>::new(
            AutoencoderConfig {
                hidden: 16,
                encoder_layers: 1,
                decoder_layers: 2,
                regularizer: Regularizer::DEFAULT_KL,
                conditional: true,
                coord_init_gain: 1.0,
                ..AutoencoderConfig::default()
            },
            &mut rng,
        )?;
        let mut den = Denoiser::<f64>::new(
            DenoiserConfig {
                hidden: 16,
                layers: 2,
                conditional: true,
                coord_init_gain: 1.0,
                ..DenoiserConfig::default()
            },
            &mut rng,
        )?;
        let a = Geometry::new(
            geometry::gaussian(&mut rng, 4, 3),
            vec![1, 0, 0, 3],
            vec![0, 0, 1, -1],
            Some(0.8),
        )?;
        let b = Geometry::new(
            geometry::gaussian(&mut rng, 2, 3),
            vec![4, 0],
            vec![0, 0],
            Some(1.3),
        )?;
        let batch = Batch::new(&[&a, &b], ae.config.n_types, true)?;
        let ex = geometry::gaussian(&mut rng, 6, 3);
        let eh = geometry::gaussian(&mut rng, 6, 1);
        let ae_rep = finite_difference_check(
            &mut ae,
            |m, tape| Ok(m.objective(tape, &batch, &ex, &eh, true)?.total),
            DEFAULT_FD_STEP,
        )?;

        let schedule = NoiseSchedule::build(20, ScheduleKind::Polynomial)?;
        let graph = GraphBatch::new(&[4, 2])?;
        let lb = LdmBatch {
            z0x: graph.project_cog_values(&geometry::gaussian(&mut rng, 6, 3)),
            z0h: geometry::gaussian(&mut rng, 6, 1),
            t: vec![3, 17],
            eps_x: graph.project_cog_values(&geometry::gaussian(&mut rng, 6, 3)),
            eps_h: geometry::gaussian(&mut rng, 6, 1),
            cond: Some(Tensor::from_rows(&[
                [0.8],
                [0.8],
                [0.8],
                [0.8],
                [1.3],
                [1.3],
            ])),
            graph,
        };
        let ldm_rep = finite_difference_check(
            &mut den,
            |m, tape| ldm_objective(tape, m, &lb, &schedule),
            DEFAULT_FD_STEP,
        )?;
        Ok((ae_rep.max_rel_err, ldm_rep.max_rel_err))
    })();
    match r {
        Ok((a, l)) => vec![
            CheckOutcome::measured("gradient.autoencoder", Ok(a), GRADIENT_TOL),
            CheckOutcome::measured("gradient.diffusion", Ok(l), GRADIENT_TOL),
        ],
        Err(e) => vec![CheckOutcome::measured("gradient", Err(e), GRADIENT_TOL)],
    }
}

/// Schedule identities: variance preservation, stepwise composition against
/// the closed-form marginal, `w(0) = -1`, and the reduced weight formula.
pub fn schedule_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut variance = 0.0f64;
    let mut reduced = 0.0f64;
    let mut w0 = 0.0f64;
    for kind in [ScheduleKind::Polynomial, ScheduleKind::Linear] {
        for steps in [10, 50, 250, 1000] {
            let s = NoiseSchedule::build(steps, kind).expect("valid schedule");
            for t in 0..=steps {
                variance = variance.max((s.alpha2(t) + s.sigma(t).powi(2) - 1.0).abs());
            }
            w0 = w0.max((s.vlb_weight(0).expect("t = 0 in range") + 1.0).abs());
            for t in 2..=steps {
                let w = s.vlb_weight(t).expect("in range");
                let r = s.vlb_weight_reduced(t).expect("in range");
                reduced = reduced.max((w - r).abs() / w.abs().max(1.0));
            }
        }
    }
    out.push(CheckOutcome::measured(
        "schedule.variance",
        Ok(variance),
        1e-15,
    ));
    out.push(CheckOutcome::measured(
        "schedule.vlb_weight_zero",
        Ok(w0),
        1e-15,
    ));
    out.push(CheckOutcome::measured(
        "schedule.vlb_weight_reduced",
        Ok(reduced),
        1e-12,
    ));

    let mut rng = rng_stream(seed, stream::CHECK + 2);
    let mut composed = 0.0f64;
    for kind in [ScheduleKind::Polynomial, ScheduleKind::Linear] {
        for steps in [5, 20, 50] {
            let s = NoiseSchedule::build(steps, kind).expect("valid schedule");
            let z0: Tensor<f64> = geometry::gaussian(&mut rng, 4, 4);
            let mut z = z0.clone();
            // accumulated noise under the same draws, composed analytically
            let mut acc = Tensor::<f64>::zeros(4, 4);
            let mut var = 0.0f64;
            for t in 1..=steps {
                let e = geometry::gaussian(&mut rng, 4, 4);
                z = forward_step(&z, t, &e, &s);
                let a = (1.0 - s.beta(t)).sqrt();
                acc = Tensor::from_fn(4, 4, |i, c| {
                    a * acc.get(i, c) + s.beta(t).sqrt() * e.get(i, c)
                });
                var = (1.0 - s.beta(t)) * var + s.beta(t);
                let closed =
                    Tensor::from_fn(4, 4, |i, c| s.alpha(t) * z0.get(i, c) + acc.get(i, c));
                composed = composed
                    .max(z.max_abs_diff(&closed))
                    .max((var.sqrt() - s.sigma(t)).abs());
            }
        }
    }
    out.push(CheckOutcome::measured(
        "schedule.composition",
        Ok(composed),
        1e-10,
    ));
    out
}

/// Losses under `x -> Rx + t`, `eps_x -> R eps_x` with `eps_h` unchanged.
pub fn paired_loss_checks(seed: u64, trials: usize, n: usize) -> Vec<CheckOutcome> {
    let mut rng = rng_stream(seed, stream::CHECK + 3);
    let r = (|| -> Result<(f64, f64)> {
        let (ae, den) = audit_models(&mut rng, 32, false, 1.0)?;
        let schedule = NoiseSchedule::build(100, ScheduleKind::Polynomial)?;
        let (mut recon, mut ldm) = (0.0f64, 0.0f64);
        for _ in 0..trials {
            let types: Vec<usize> = (0..n)
                .map(|_| rng.random_range(0..ae.config.n_types))
                .collect();
            let g = Geometry::new(geometry::gaussian(&mut rng, n, 3), types, vec![0; n], None)?;
            let rot = geometry::random_orthogonal(&mut rng, true);
            let shift = [0, 1, 2].map(|_| rng.random_range(-5.0..5.0));
            let gm = g.transformed(&rot, shift);

            let ex = geometry::gaussian(&mut rng, n, 3);
            let eh = geometry::gaussian(&mut rng, n, ae.k());
            let a = ae.reconstruction_objective(&g, &ex, &eh)?.total;
            let b = ae
                .reconstruction_objective(&gm, &geometry::rotate(&ex, &rot), &eh)?
                .total;
            recon = recon.max((a - b).abs());

            let (mx, mh) = ae.encode(&g)?;
            let (mxr, mhr) = ae.encode(&gm)?;
            let z = LatentPoint::new(mx, mh)?;
            let zr = LatentPoint::new(mxr, mhr)?;
            let t = rng.random_range(1..=schedule.steps());
            let ex = geometry::project_cog(&geometry::gaussian(&mut rng, n, 3));
            let eh = geometry::gaussian(&mut rng, n, ae.k());
            let a = ldm_loss_with(&z, &den, &schedule, None, t, &ex, &eh)?;
            let b = ldm_loss_with(
                &zr,
                &den,
                &schedule,
                None,
                t,
                &geometry::rotate(&ex, &rot),
                &eh,
            )?;
            ldm = ldm.max((a - b).abs());
        }
        Ok((recon, ldm))
    })();
    match r {
        Ok((a, b)) => vec![
            CheckOutcome::measured("paired_loss.reconstruction", Ok(a), PAIRED_TOL),
            CheckOutcome::measured("paired_loss.diffusion", Ok(b), PAIRED_TOL),
        ],
        Err(e) => vec![CheckOutcome::measured("paired_loss", Err(e), PAIRED_TOL)],
    }
}

/// Worst absolute deviation between sampling with trajectory noise `e` and
/// sampling with every coordinate draw rotated by a random `R` (compared
/// against `R` times the first result), plus the largest coordinate seen.
/// Discrete features that differ give an infinite deviation.
pub fn paired_sampling_deviation<R: Rng + ?Sized>(
    ae: &Autoencoder<f64>,
    den: &Denoiser<f64>,
    schedule: &NoiseSchedule,
    n: usize,
    trials: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let rot = geometry::random_orthogonal(rng, true);
        let noise_seed = rng.random::<u64>();
        let a = sample_with_noise(
            den,
            ae,
            schedule,
            n,
            None,
            &mut RngNoise(rng_stream(noise_seed, 0)),
        )?;
        let b = sample_with_noise(
            den,
            ae,
            schedule,
            n,
            None,
            &mut RotatedNoise {
                inner: RngNoise(rng_stream(noise_seed, 0)),
                rotation: rot,
            },
        )?;
        if a.types != b.types || a.charges != b.charges {
            return Ok((f64::INFINITY, scale));
        }
        worst = worst.max(b.x.max_abs_diff(&geometry::rotate(&a.x, &rot)));
        scale = scale.max(a.x.max_abs());
    }
    Ok((worst, scale))
}

/// Paired-trajectory sampling on untrained models. Their reverse chains drift
/// far from the origin, so the deviation is reported relative to
/// `max(1, max |x|)`.
pub fn paired_sampling_check(seed: u64, steps: usize, n: usize) -> CheckOutcome {
    let mut rng = rng_stream(seed, stream::CHECK + 4);
    let r = (|| -> Result<f64> {
        let (ae, den) = audit_models(&mut rng, 32, false, 1.0)?;
        let schedule = NoiseSchedule::build(steps, ScheduleKind::Polynomial)?;
        let (dev, scale) = paired_sampling_deviation(&ae, &den, &schedule, n, 3, &mut rng)?;
        Ok(dev / scale.max(1.0))
    })();
    CheckOutcome::measured("paired_sampling.relative", r, PAIRED_TOL)
}

/// Encoder means and sampled latents lie in the zero-CoG subspace, and the
/// decoder places its output at the latent's centre of gravity.
pub fn cog_checks(seed: u64, n: usize) -> Vec<CheckOutcome> {
    let mut rng = rng_stream(seed, stream::CHECK + 5);
    let r = (|| -> Result<(f64, f64, f64)> {
        let (ae, den) = audit_models(&mut rng, 32, false, 1.0)?;
        let schedule = NoiseSchedule::build(20, ScheduleKind::Polynomial)?;
        let (mut enc, mut dec, mut smp) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..10 {
            let shift = [0, 1, 2].map(|_| rng.random_range(-5.0..5.0));
            let x = geometry::transform(
                &geometry::gaussian(&mut rng, n, 3),
                &geometry::IDENTITY,
                shift,
            );
            let g = Geometry::new(x, vec![0; n], vec![0; n], None)?;
            let (mx, mh) = ae.encode(&g)?;
            enc = enc.max(raw_cog(&mx) / mx.max_abs().max(1.0));
            let zx = geometry::project_cog(&geometry::gaussian(&mut rng, n, 3));
            let d = ae.decode(&LatentPoint::new(zx, mh)?, None)?;
            dec = dec.max(raw_cog(&d.x) / d.x.max_abs().max(1.0));
            let s = sample_with_noise(
                &den,
                &ae,
                &schedule,
                n,
                None,
                &mut RngNoise(rng_stream(seed, stream::CHECK + 6)),
            )?;
            smp = smp.max(raw_cog(&s.latent.z_x) / s.latent.z_x.max_abs().max(1.0));
        }
        Ok((enc, dec, smp))
    })();
    match r {
        Ok((a, b, c)) => vec![
            CheckOutcome::measured("cog.encoder", Ok(a), 1e-12),
            CheckOutcome::measured("cog.decoder", Ok(b), 1e-12),
            CheckOutcome::measured("cog.sample", Ok(c), 1e-12),
        ],
        Err(e) => vec![CheckOutcome::measured("cog", Err(e), 1e-12)],
    }
}

/// Norm of the centroid, computed directly so it does not pass through the
/// projection being checked.
fn raw_cog(x: &Tensor<f64>) -> f64 {
    let n = x.rows().max(1) as f64;
    (0..3)
        .map(|a| ((0..x.rows()).map(|i| x.get(i, a)).sum::<f64>() / n).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn run_all(opts: &CheckOptions) -> Vec<CheckOutcome> {
    let mut out = equivariance_checks(opts.seed, opts.equivariance_trials, opts.nodes);
    out.extend(gradient_checks(opts.seed));
    out.extend(schedule_checks(opts.seed));
    out.extend(paired_loss_checks(opts.seed, opts.loss_trials, opts.nodes));
    out.push(paired_sampling_check(
        opts.seed,
        opts.sampling_steps,
        opts.nodes,
    ));
    out.extend(cog_checks(opts.seed, opts.nodes));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> CheckOptions {
        CheckOptions {
            equivariance_trials: 10,
            loss_trials: 5,
            sampling_steps: 20,
            nodes: 6,
            ..CheckOptions::default()
        }
    }

    #[test]
    fn clean_build_passes() {
        let out = run_all(&quick());
        for o in &out {
            assert!(o.passed(), "{}", o.line());
        }
        assert_eq!(summarize(&out).failed, 0);
    }

    #[test]
    fn outcome_formatting() {
        let ok = CheckOutcome::measured("x", Ok(1e-9), 1e-6);
        assert!(ok.passed() && ok.line().starts_with("PASS"));
        let nan = CheckOutcome::measured("y", Ok(f64::NAN), 1e-6);
        assert!(!nan.passed());
        let err = CheckOutcome::measured("z", Err(crate::Error::invalid("boom")), 1e-6);
        assert!(!err.passed() && err.line().contains("boom"));
    }
}
