//! Two-stage training, sampling and evaluation on molecule datasets, plus the
//! mapping between trained models and checkpoint files.

use crate::autodiff::Module;
use crate::autoencoder::{train_autoencoder, Autoencoder, AutoencoderConfig, Geometry};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    condition_value, gen_synthetic_templates, match_template, Molecule, SizeDistribution,
    SyntheticConfig, Template, Vocabulary,
};
use crate::diffusion::{
    sample_many, train_ldm, Denoiser, DenoiserConfig, NoiseSchedule, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_set, ChemTables, MetricsReport};
use crate::training::{rng_stream, stream, Aborted, LossRecord, TrainResult};

pub const KIND_AUTOENCODER: &str = "autoencoder";
pub const KIND_DENOISER: &str = "denoiser";

/// A trained first-stage model with what sampling needs alongside it.
#[derive(Clone, Debug)]
pub struct AeModel {
    pub ae: Autoencoder<f64>,
    pub vocab: Vocabulary,
    pub sizes: SizeDistribution,
    pub seed: u64,
}

/// A trained second-stage model. `ae_fingerprint` identifies the autoencoder
/// whose latents it was trained on.
#[derive(Clone, Debug)]
pub struct LdmModel {
    pub den: Denoiser<f64>,
    pub schedule: NoiseSchedule,
    pub vocab: Vocabulary,
    pub sizes: SizeDistribution,
    pub seed: u64,
    pub ae_fingerprint: String,
}

/// Result of a training stage. A stage stopped by a non-finite loss keeps the
/// last finite parameters and reports the failure in `aborted`.
#[derive(Debug)]
pub struct Stage<M> {
    pub model: M,
    pub log: Vec<LossRecord>,
    pub aborted: Option<Error>,
}

fn settle<M, O>(r: TrainResult<M>, wrap: impl FnOnce(M) -> O) -> Stage<O> {
    match r {
        Ok(t) => Stage {
            model: wrap(t.model),
            log: t.log,
            aborted: None,
        },
        Err(a) => {
            let Aborted {
                last_good,
                log,
                iteration,
                error,
            } = *a;
            Stage {
                model: wrap(last_good),
                log,
                aborted: Some(Error::NonFinite(format!(
                    "training aborted at iteration {iteration}: {error}"
                ))),
            }
        }
    }
}

fn encode_sizes(d: &SizeDistribution) -> String {
    d.support()
        .iter()
        .zip(d.probs())
        .map(|(n, p)| format!("{n}:{p:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn decode_sizes(s: &str) -> Result<SizeDistribution> {
    let mut support = Vec::new();
    let mut probs = Vec::new();
    for part in s.split(',') {
        let bad = || Error::Checkpoint(format!("bad size distribution entry `{part}`"));
        let (n, p) = part.split_once(':').ok_or_else(bad)?;
        support.push(n.parse().map_err(|_| bad())?);
        probs.push(p.parse().map_err(|_| bad())?);
    }
    SizeDistribution::from_parts(support, probs)
}

fn expect_kind(c: &Checkpoint, kind: &str) -> Result<()> {
    let got = c.get("kind")?;
    if got != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found `{got}`"
        )));
    }
    Ok(())
}

fn json_meta<V: serde::de::DeserializeOwned>(c: &Checkpoint, key: &str) -> Result<V> {
    serde_json::from_str(c.get(key)?)
        .map_err(|e| Error::Checkpoint(format!("metadata `{key}`: {e}")))
}

impl AeModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let cfg = &self.ae.config;
        c.set("kind", KIND_AUTOENCODER)
            .set("k", cfg.k)
            .set("sigma0", format!("{:?}", cfg.sigma0))
            .set("conditional", cfg.conditional)
            .set("vocab", self.vocab.to_csv())
            .set("seed", self.seed)
            .set("sizes", encode_sizes(&self.sizes))
            .set("fingerprint", self.ae.fingerprint())
            .set(
                "config",
                serde_json::to_string(cfg).expect("config serialises"),
            );
        c.add_module(&self.ae);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        expect_kind(c, KIND_AUTOENCODER)?;
        let cfg: AutoencoderConfig = json_meta(c, "config")?;
        cfg.validate()?;
        let vocab = Vocabulary::from_csv(c.get("vocab")?)?;
        if vocab.len() != cfg.n_types {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} symbols, model expects {}",
                vocab.len(),
                cfg.n_types
            )));
        }
        // parameters are overwritten below; the initialiser only fixes shapes
        let mut ae = Autoencoder::new(cfg, &mut rng_stream(0, stream::INIT_AE))?;
        c.load_module(&mut ae)?;
        ae.set_trainable(false);
        Ok(Self {
            ae,
            vocab,
            sizes: decode_sizes(c.get("sizes")?)?,
            seed: c.parse("seed")?,
        })
    }
}

impl LdmModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        let cfg = &self.den.config;
        c.set("kind", KIND_DENOISER)
            .set("k", cfg.k)
            .set("schedule", self.schedule.kind().name())
            .set("steps", self.schedule.steps())
            .set("conditional", cfg.conditional)
            .set("vocab", self.vocab.to_csv())
            .set("seed", self.seed)
            .set("sizes", encode_sizes(&self.sizes))
            .set("ae_fingerprint", &self.ae_fingerprint)
            .set(
                "config",
                serde_json::to_string(cfg).expect("config serialises"),
            );
        c.add_module(&self.den);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        expect_kind(c, KIND_DENOISER)?;
        let cfg: DenoiserConfig = json_meta(c, "config")?;
        let mut den = Denoiser::new(cfg, &mut rng_stream(0, stream::INIT_LDM))?;
        c.load_module(&mut den)?;
        den.set_trainable(false);
        Ok(Self {
            den,
            schedule: NoiseSchedule::build(
                c.parse("steps")?,
                ScheduleKind::parse(c.get("schedule")?)?,
            )?,
            vocab: Vocabulary::from_csv(c.get("vocab")?)?,
            sizes: decode_sizes(c.get("sizes")?)?,
            seed: c.parse("seed")?,
            ae_fingerprint: c.get("ae_fingerprint")?.to_string(),
        })
    }
}

/// Network inputs for a dataset. Conditional runs use each molecule's stored
/// property, falling back to its radius of gyration.
pub fn geometries(
    data: &[Molecule],
    vocab: &Vocabulary,
    conditional: bool,
) -> Result<Vec<Geometry<f64>>> {
    data.iter()
        .map(|m| {
            let mut g = m.to_geometry::<f64>(vocab)?;
            if conditional && g.condition.is_none() {
                g.condition = Some(condition_value(m));
            }
            Ok(g)
        })
        .collect()
}

/// Synthetic template dataset drawn from the data stream of `cfg.seed`.
pub fn generate_synthetic(cfg: &RunConfig, templates: Vec<Template>) -> Result<Vec<Molecule>> {
    let sc = SyntheticConfig {
        templates,
        jitter: cfg.jitter,
        count: cfg.synthetic_count,
    };
    gen_synthetic_templates(&sc, &mut rng_stream(cfg.seed, stream::DATA))
}

pub fn train_ae_stage(data: &[Molecule], cfg: &RunConfig) -> Result<Stage<AeModel>> {
    cfg.validate()?;
    let vocab = Vocabulary::default();
    let sizes = SizeDistribution::from_dataset(data)?;
    let geoms = geometries(data, &vocab, cfg.conditional)?;
    let ae = Autoencoder::new(
        cfg.autoencoder(),
        &mut rng_stream(cfg.seed, stream::INIT_AE),
    )?;
    let seed = cfg.seed;
    Ok(settle(
        train_autoencoder(ae, &geoms, &cfg.ae_training()),
        |ae| AeModel {
            ae,
            vocab,
            sizes,
            seed,
        },
    ))
}

/// Second stage on the latents of a frozen autoencoder. The run config must
/// agree with the autoencoder on `k` and on conditioning.
pub fn train_ldm_stage(
    data: &[Molecule],
    ae: &AeModel,
    cfg: &RunConfig,
) -> Result<Stage<LdmModel>> {
    cfg.validate()?;
    if cfg.k != ae.ae.k() {
        return Err(Error::invalid(format!(
            "config has k = {}, autoencoder checkpoint has k = {}",
            cfg.k,
            ae.ae.k()
        )));
    }
    if cfg.conditional != ae.ae.config.conditional {
        return Err(Error::invalid(format!(
            "config has conditional = {}, autoencoder checkpoint has conditional = {}",
            cfg.conditional, ae.ae.config.conditional
        )));
    }
    let schedule = cfg.noise_schedule()?;
    let sizes = SizeDistribution::from_dataset(data)?;
    let geoms = geometries(data, &ae.vocab, cfg.conditional)?;
    let den = Denoiser::new(cfg.denoiser(), &mut rng_stream(cfg.seed, stream::INIT_LDM))?;
    let fp = ae.ae.fingerprint();
    let trained = train_ldm(den, &ae.ae, &geoms, &schedule, &cfg.ldm_training());
    Ok(settle(trained, |den| LdmModel {
        den,
        schedule,
        vocab: ae.vocab.clone(),
        sizes,
        seed: cfg.seed,
        ae_fingerprint: fp,
    }))
}

/// Refuse checkpoint pairs that were not trained together.
pub fn check_compatible(ae: &AeModel, ldm: &LdmModel) -> Result<()> {
    if ae.ae.k() != ldm.den.k() {
        return Err(Error::invalid(format!(
            "autoencoder k = {} but denoiser k = {}",
            ae.ae.k(),
            ldm.den.k()
        )));
    }
    if ae.vocab != ldm.vocab {
        return Err(Error::invalid(format!(
            "vocabularies differ: {} vs {}",
            ae.vocab.to_csv(),
            ldm.vocab.to_csv()
        )));
    }
    if ae.ae.config.conditional != ldm.den.config.conditional {
        return Err(Error::invalid(
            "one checkpoint is conditional and the other is not",
        ));
    }
    if ae.ae.fingerprint() != ldm.ae_fingerprint {
        return Err(Error::invalid(
            "denoiser was trained on a different autoencoder",
        ));
    }
    Ok(())
}

/// `n` molecules with sizes drawn from the denoiser's stored p(N). Everything
/// random derives from `seed`.
pub fn sample_molecules(
    ae: &AeModel,
    ldm: &LdmModel,
    n: usize,
    condition: Option<f64>,
    seed: u64,
) -> Result<Vec<Molecule>> {
    check_compatible(ae, ldm)?;
    match (ldm.den.config.conditional, condition) {
        (false, Some(_)) => {
            return Err(Error::invalid(
                "a condition was given but the checkpoints are unconditional",
            ))
        }
        (true, None) => {
            return Err(Error::invalid(
                "conditional checkpoints need a condition value",
            ))
        }
        _ => {}
    }
    let mut size_rng = rng_stream(seed, stream::SIZES);
    let sizes: Vec<usize> = (0..n).map(|_| ldm.sizes.sample(&mut size_rng)).collect();
    let conds = condition.map(|s| vec![s; n]);
    let out = sample_many(
        &ldm.den,
        &ae.ae,
        &ldm.schedule,
        &sizes,
        conds.as_deref(),
        seed,
    )?;
    out.into_iter()
        .map(|s| {
            let g = Geometry::new(s.x, s.types, s.charges, condition)?;
            Molecule::from_geometry(&g, &ae.vocab)
        })
        .collect()
}

pub fn evaluate(molecules: &[Molecule]) -> Result<MetricsReport> {
    evaluate_set(molecules, &ChemTables::default())
}

/// Fraction of molecules matching some template by element multiset and
/// sorted pairwise distances within `tol` Å per entry.
pub fn template_match_rate(molecules: &[Molecule], templates: &[Template], tol: f64) -> f64 {
    if molecules.is_empty() {
        return 0.0;
    }
    let hits = molecules
        .iter()
        .filter(|m| match_template(m, templates, tol).is_some())
        .count();
    hits as f64 / molecules.len() as f64
}

/// Loss log as tab-separated `iteration loss` lines.
pub fn format_log(log: &[LossRecord]) -> String {
    let mut s = String::from("iteration\tloss\n");
    for r in log {
        s.push_str(&format!("{}\t{:?}\n", r.iteration, r.loss));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_templates;

    fn tiny() -> RunConfig {
        RunConfig {
            seed: 5,
            steps: 20,
            ae_hidden: 8,
            decoder_layers: 2,
            denoiser_hidden: 8,
            denoiser_layers: 2,
            batch_size: 4,
            ae_iterations: 5,
            ldm_iterations: 5,
            es_warmup: 3,
            synthetic_count: 12,
            ..RunConfig::default()
        }
    }

    #[test]
    fn checkpoints_restore_models_exactly() {
        let cfg = tiny();
        let data = generate_synthetic(&cfg, default_templates()).unwrap();
        let ae = train_ae_stage(&data, &cfg).unwrap().model;
        let back = AeModel::from_checkpoint(
            &Checkpoint::from_bytes(&ae.to_checkpoint().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.ae.fingerprint(), ae.ae.fingerprint());
        assert_eq!(back.sizes, ae.sizes);
        let ldm = train_ldm_stage(&data, &ae, &cfg).unwrap().model;
        let lback = LdmModel::from_checkpoint(&ldm.to_checkpoint()).unwrap();
        assert_eq!(lback.den.fingerprint(), ldm.den.fingerprint());
        assert_eq!(lback.schedule, ldm.schedule);
        let a = sample_molecules(&back, &lback, 3, None, 1).unwrap();
        let b = sample_molecules(&ae, &ldm, 3, None, 1).unwrap();
        assert_eq!(a, b);
        assert!(AeModel::from_checkpoint(&ldm.to_checkpoint()).is_err());
    }

    #[test]
    fn stage_contracts() {
        let cfg = tiny();
        let data = generate_synthetic(&cfg, default_templates()).unwrap();
        let ae = train_ae_stage(&data, &cfg).unwrap().model;
        let bad_k = RunConfig {
            k: 2,
            ..cfg.clone()
        };
        assert!(train_ldm_stage(&data, &ae, &bad_k).is_err());
        let ldm = train_ldm_stage(&data, &ae, &cfg).unwrap().model;
        assert!(sample_molecules(&ae, &ldm, 2, Some(1.0), 0).is_err());
        assert!(sample_molecules(&ae, &ldm, 0, None, 0).unwrap().is_empty());
        let other = train_ae_stage(&data, &RunConfig { seed: 6, ..cfg })
            .unwrap()
            .model;
        assert!(sample_molecules(&other, &ldm, 1, None, 0).is_err());
    }

    #[test]
    fn size_distribution_survives_text_encoding() {
        let d = SizeDistribution::from_sizes([2, 2, 3, 7, 7, 7, 7]).unwrap();
        assert_eq!(decode_sizes(&encode_sizes(&d)).unwrap(), d);
        assert!(decode_sizes("3").is_err());
    }
}
