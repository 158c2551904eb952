//! Acceptance criteria, one line each: `PASS`, `FAIL` or `SKIPPED`.
//!
//! Runs as a plain binary (`harness = false`) so the lines always print in
//! order. Exits nonzero if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use geolatent::config::RunConfig;
use geolatent::data::{default_templates, read_xyz, Vocabulary};
use geolatent::diffusion::{NoiseSchedule, ScheduleKind};
use geolatent::pipeline::{self, AeModel, LdmModel};
use geolatent::selfcheck::{self, CheckOutcome, PAIRED_TOL};
use geolatent::training::rng_stream;
use geolatent::{autoencoder, data, Result};

const SEED: u64 = 0;
const QM9_ENV: &str = "GEOLATENT_QM9_XYZ";

/// Setting of the end-to-end run (criteria 5 and 7).
const E2E_CONFIG: &str = "
steps = 250
synthetic_count = 2000
jitter = 0.02
ae_iterations = 2000
ae_lr = 1e-3
ldm_iterations = 8000
ldm_lr = 3e-4
lr_decay = 0.3
";

/// Small but complete pipeline for the determinism criterion.
const DETERMINISM_CONFIG: &str = "
steps = 50
synthetic_count = 64
ae_hidden = 16
decoder_layers = 2
denoiser_hidden = 16
denoiser_layers = 2
ae_iterations = 60
es_warmup = 30
ldm_iterations = 60
batch_size = 16
lr = 1e-3
";

enum Verdict {
    Pass(String),
    Fail(String),
    Skipped(String),
}

struct Report {
    failed: usize,
}

impl Report {
    fn record(
        &mut self,
        id: usize,
        name: &str,
        budget: Option<Duration>,
        run: impl FnOnce() -> Verdict,
    ) {
        let start = Instant::now();
        let mut verdict = run();
        let took = start.elapsed();
        if let (Verdict::Pass(detail), Some(b)) = (&verdict, budget) {
            if took > b {
                verdict = Verdict::Fail(format!("{detail}; over the {}s budget", b.as_secs()));
            }
        }
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
            Verdict::Skipped(d) => ("SKIPPED", d),
        };
        println!(
            "{tag} criterion {id} {name}: {detail} ({:.1}s)",
            took.as_secs_f64()
        );
    }
}

fn from_checks(outcomes: &[CheckOutcome]) -> Verdict {
    let detail = outcomes
        .iter()
        .map(|o| match &o.error {
            Some(e) => format!("{} error {e}", o.name),
            None => format!("{} {:.2e}<{:.0e}", o.name, o.deviation, o.tolerance),
        })
        .collect::<Vec<_>>()
        .join(", ");
    if !outcomes.is_empty() && outcomes.iter().all(CheckOutcome::passed) {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn verdict(r: Result<Verdict>) -> Verdict {
    r.unwrap_or_else(|e| Verdict::Fail(format!("error: {e}")))
}

struct Trained {
    ae: AeModel,
    ldm: LdmModel,
}

fn train(cfg: &RunConfig) -> Result<(Vec<data::Molecule>, Trained)> {
    let molecules = pipeline::generate_synthetic(cfg, default_templates())?;
    let ae = pipeline::train_ae_stage(&molecules, cfg)?;
    if let Some(e) = ae.aborted {
        return Err(e);
    }
    let ldm = pipeline::train_ldm_stage(&molecules, &ae.model, cfg)?;
    if let Some(e) = ldm.aborted {
        return Err(e);
    }
    Ok((
        molecules,
        Trained {
            ae: ae.model,
            ldm: ldm.model,
        },
    ))
}

fn seeded(text: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(text).expect("built-in config parses");
    cfg.seed = SEED;
    cfg
}

fn autoencoder_overfit() -> Result<Verdict> {
    let cfg = seeded("synthetic_count = 32\nae_iterations = 4000\nes_warmup = 1000\nae_lr = 1e-3\nregularizer = \"es\"\n");
    let molecules = pipeline::generate_synthetic(&cfg, default_templates())?;
    let stage = pipeline::train_ae_stage(&molecules, &cfg)?;
    if let Some(e) = stage.aborted {
        return Err(e);
    }
    let geoms = pipeline::geometries(&molecules, &stage.model.vocab, false)?;
    let (rmse, acc) = autoencoder::reconstruction_quality(&stage.model.ae, &geoms)?;
    let detail = format!(
        "{} molecules, {} iterations, rmse {rmse:.4} A (< 0.1), type accuracy {acc}",
        molecules.len(),
        cfg.ae_iterations
    );
    Ok(if rmse < 0.1 && acc == 1.0 {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    })
}

fn paired_sampling(t: &Trained) -> Result<Verdict> {
    let schedule = NoiseSchedule::build(100, ScheduleKind::Polynomial)?;
    let mut rng = rng_stream(SEED, 100);
    let mut worst = 0.0f64;
    for n in [2, 3, 5] {
        let (dev, _) =
            selfcheck::paired_sampling_deviation(&t.ae.ae, &t.ldm.den, &schedule, n, 4, &mut rng)?;
        worst = worst.max(dev);
    }
    let detail = format!("trained models, T = 100, 12 trajectories, max deviation {worst:.2e} (< {PAIRED_TOL:.0e}), discrete features identical");
    Ok(if worst < PAIRED_TOL {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    })
}

fn end_to_end(t: &Trained, train_time: Duration) -> Result<Verdict> {
    let start = Instant::now();
    let samples = pipeline::sample_molecules(&t.ae, &t.ldm, 500, None, SEED)?;
    let rate = pipeline::template_match_rate(&samples, &default_templates(), 0.15);
    let total = train_time + start.elapsed();
    let detail = format!("{} of 500 match a template within 0.15 A ({:.1}%, need >= 90%), training plus sampling {:.0}s", (rate * 500.0).round(), rate * 100.0, total.as_secs_f64());
    Ok(if rate >= 0.9 && total < Duration::from_secs(3600) {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    })
}

fn qm9_anchor() -> Result<Verdict> {
    let Some(path) = std::env::var_os(QM9_ENV).map(PathBuf::from) else {
        return Ok(Verdict::Skipped(format!(
            "set {QM9_ENV} to an XYZ file of >= 1000 QM9 molecules"
        )));
    };
    let molecules = read_xyz(&path, &Vocabulary::default())?;
    if molecules.len() < 1000 {
        return Ok(Verdict::Fail(format!(
            "{} holds {} molecules, need >= 1000",
            path.display(),
            molecules.len()
        )));
    }
    let r = pipeline::evaluate(&molecules)?;
    let (atom, mol) = (r.atom_stability * 100.0, r.molecule_stability * 100.0);
    let detail = format!("{} molecules, atom stability {atom:.2}% (99.0 +- 1.5), molecule stability {mol:.2}% (95.2 +- 3.0)", molecules.len());
    Ok(if (atom - 99.0).abs() <= 1.5 && (mol - 95.2).abs() <= 3.0 {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    })
}

fn determinism() -> Result<Verdict> {
    let cfg = seeded(DETERMINISM_CONFIG);
    let run = || -> Result<(Vec<u8>, Vec<u8>, String)> {
        let (_, t) = train(&cfg)?;
        let samples = pipeline::sample_molecules(&t.ae, &t.ldm, 24, None, SEED)?;
        Ok((
            t.ae.to_checkpoint().to_bytes()?,
            t.ldm.to_checkpoint().to_bytes()?,
            data::format_xyz(&samples, ""),
        ))
    };
    let a = run()?;
    let b = run()?;
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    let detail = format!(
        "autoencoder bytes equal {}, denoiser bytes equal {}, 24 sampled molecules equal {}",
        same[0], same[1], same[2]
    );
    Ok(if same.iter().all(|&s| s) {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    })
}

fn main() {
    let mut report = Report { failed: 0 };
    let opts = selfcheck::CheckOptions::default();

    report.record(1, "equivariance", Some(Duration::from_secs(60)), || {
        let mut all = selfcheck::equivariance_checks(SEED, opts.equivariance_trials, 16);
        all.extend(selfcheck::equivariance_checks(
            SEED + 1,
            opts.equivariance_trials,
            3,
        ));
        from_checks(&all)
    });
    report.record(2, "gradients", Some(Duration::from_secs(300)), || {
        from_checks(&selfcheck::gradient_checks(SEED))
    });
    report.record(3, "schedule identities", None, || {
        from_checks(&selfcheck::schedule_checks(SEED))
    });
    report.record(4, "paired-noise loss invariance", None, || {
        from_checks(&selfcheck::paired_loss_checks(
            SEED,
            opts.loss_trials,
            opts.nodes,
        ))
    });

    let cfg = seeded(E2E_CONFIG);
    let start = Instant::now();
    let trained = train(&cfg);
    let train_time = start.elapsed();
    match &trained {
        Ok((_, t)) => {
            report.record(5, "paired-trajectory sampling", None, || {
                verdict(paired_sampling(t))
            });
            report.record(
                6,
                "autoencoder overfit",
                Some(Duration::from_secs(600)),
                || verdict(autoencoder_overfit()),
            );
            report.record(7, "end-to-end generation", None, || {
                verdict(end_to_end(t, train_time))
            });
        }
        Err(e) => {
            report.record(5, "paired-trajectory sampling", None, || {
                Verdict::Fail(format!("training failed: {e}"))
            });
            report.record(
                6,
                "autoencoder overfit",
                Some(Duration::from_secs(600)),
                || verdict(autoencoder_overfit()),
            );
            report.record(7, "end-to-end generation", None, || {
                Verdict::Fail(format!("training failed: {e}"))
            });
        }
    }
    report.record(8, "QM9 data-row anchor", None, || verdict(qm9_anchor()));
    report.record(9, "determinism", None, || verdict(determinism()));

    if report.failed > 0 {
        println!("{} criterion(s) failed", report.failed);
        std::process::exit(1);
    }
}
