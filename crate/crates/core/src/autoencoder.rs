//! First-stage geometric autoencoder.
//!
//! The encoder maps a molecule to point-structured latents: equivariant
//! coordinates `z_x` on the zero-CoG subspace and `k` invariant scalars `z_h`
//! per atom. The decoder maps them back to coordinates, atom-type logits and a
//! real-valued charge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Module, Param, Tape, Tensor, Var};
use crate::egnn::{EgnnConfig, EgnnParams};
use crate::error::{Error, Result};
use crate::geometry::{self, GraphBatch};
use crate::scalar::Scalar;
use crate::training::{
    minibatch, rng_stream, stream, Aborted, LossRecord, TrainConfig, TrainResult, Trained,
};

/// A molecule in network form: coordinates, atom-type indices, integer charges
/// and an optional scalar condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry<T> {
    pub x: Tensor<T>,
    pub types: Vec<usize>,
    pub charges: Vec<i32>,
    pub condition: Option<f64>,
}

impl<T: Scalar> Geometry<T> {
    pub fn new(
        x: Tensor<T>,
        types: Vec<usize>,
        charges: Vec<i32>,
        condition: Option<f64>,
    ) -> Result<Self> {
        let n = types.len();
        if n == 0 || x.shape() != [n, 3] || charges.len() != n {
            return Err(Error::invalid(format!(
                "geometry needs N >= 1 atoms with matching coordinates and charges (coords {:?}, {} types, {} charges)",
                x.shape(),
                n,
                charges.len()
            )));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("geometry coordinates".into()));
        }
        Ok(Self {
            x,
            types,
            charges,
            condition,
        })
    }

    pub fn n(&self) -> usize {
        self.types.len()
    }

    /// `[one-hot(type) | charge]`, width `n_types + 1`.
    pub fn features(&self, n_types: usize) -> Tensor<T> {
        Tensor::from_fn(self.n(), n_types + 1, |i, c| {
            if c == n_types {
                T::of(self.charges[i] as f64)
            } else if c == self.types[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// The same molecule after `x -> R x + t`.
    pub fn transformed(&self, rot: &geometry::Rotation, shift: [f64; 3]) -> Self {
        Self {
            x: geometry::transform(&self.x, rot, shift),
            ..self.clone()
        }
    }
}

/// Point-structured latent of one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPoint<T> {
    pub z_x: Tensor<T>,
    pub z_h: Tensor<T>,
}

impl<T: Scalar> LatentPoint<T> {
    pub fn new(z_x: Tensor<T>, z_h: Tensor<T>) -> Result<Self> {
        if z_x.cols() != 3 || z_x.rows() == 0 || z_h.rows() != z_x.rows() || z_h.cols() == 0 {
            return Err(Error::ShapeMismatch {
                op: "latent point",
                lhs: z_x.shape().to_vec(),
                rhs: z_h.shape().to_vec(),
            });
        }
        let tol = cog_tolerance(&z_x);
        let cog = geometry::cog_norm(&z_x);
        if cog > tol {
            return Err(Error::invalid(format!(
                "latent coordinates off the zero-CoG subspace (|CoG| = {cog:e})"
            )));
        }
        Ok(Self { z_x, z_h })
    }

    pub fn n(&self) -> usize {
        self.z_x.rows()
    }

    pub fn k(&self) -> usize {
        self.z_h.cols()
    }
}

/// Zero-CoG acceptance threshold: 1e-9 in double precision, scaled by the
/// coordinate magnitude for wider rounding.
pub(crate) fn cog_tolerance<T: Scalar>(x: &Tensor<T>) -> f64 {
    let eps = T::epsilon().as_f64();
    1e-9_f64.max(64.0 * eps * x.max_abs().as_f64().max(1.0))
}

/// Largest charge magnitude read from or written to molecule files.
pub const MAX_ABS_CHARGE: i32 = 99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    /// KL penalty of the encoder posterior against N(0, I).
    Kl { weight: f64 },
    /// Train the encoder for `warmup` iterations, then freeze it.
    EarlyStop { warmup: usize },
}

impl Regularizer {
    pub const DEFAULT_KL: Regularizer = Regularizer::Kl { weight: 0.01 };
    pub const DEFAULT_ES: Regularizer = Regularizer::EarlyStop { warmup: 1000 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub n_types: usize,
    pub k: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub sigma0: f64,
    pub regularizer: Regularizer,
    pub conditional: bool,
    pub coord_init_gain: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            n_types: 5,
            k: 1,
            hidden: 32,
            encoder_layers: 1,
            decoder_layers: 4,
            sigma0: 0.01,
            regularizer: Regularizer::DEFAULT_ES,
            conditional: false,
            coord_init_gain: 0.001,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma0 must be positive, got {}",
                self.sigma0
            )));
        }
        if self.k == 0 || self.n_types == 0 || self.hidden == 0 {
            return Err(Error::invalid("k, n_types and hidden width must be >= 1"));
        }
        if let Regularizer::Kl { weight } = self.regularizer {
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(Error::invalid(format!(
                    "KL weight must be finite and >= 0, got {weight}"
                )));
            }
        }
        Ok(())
    }

    fn cond_width(&self) -> usize {
        usize::from(self.conditional)
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T> {
    pub config: AutoencoderConfig,
    pub encoder: EgnnParams<T>,
    pub decoder: EgnnParams<T>,
}

/// Decoder output for one molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<T> {
    pub x: Tensor<T>,
    pub logits: Tensor<T>,
    pub charge: Tensor<T>,
}

impl<T: Scalar> Decoded<T> {
    /// Argmax type per atom; ties go to the lowest index.
    pub fn types(&self) -> Vec<usize> {
        (0..self.logits.rows())
            .map(|i| {
                let row = self.logits.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Rounded charge predictions, clamped to `±MAX_ABS_CHARGE`.
    pub fn charges(&self) -> Vec<i32> {
        let m = MAX_ABS_CHARGE as f64;
        self.charge
            .values()
            .iter()
            .map(|v| v.as_f64().round().clamp(-m, m) as i32)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Mean over atoms of the squared Euclidean coordinate error.
    pub coord: f64,
    /// Mean categorical cross-entropy (nats).
    pub cross_entropy: f64,
    pub charge: f64,
    pub type_accuracy: f64,
    pub total: f64,
}

/// Stacked minibatch of geometries.
pub(crate) struct Batch<T> {
    pub graph: GraphBatch,
    pub x: Tensor<T>,
    pub h: Tensor<T>,
    pub types: Vec<usize>,
    pub charges: Tensor<T>,
    pub condition: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(items: &[&Geometry<T>], n_types: usize, conditional: bool) -> Result<Self> {
        let sizes: Vec<usize> = items.iter().map(|g| g.n()).collect();
        let graph = GraphBatch::new(&sizes)?;
        let mut types = Vec::with_capacity(graph.n_nodes());
        for g in items {
            if let Some(&t) = g.types.iter().find(|&&t| t >= n_types) {
                return Err(Error::invalid(format!(
                    "atom type index {t} outside vocabulary of {n_types}"
                )));
            }
            types.extend_from_slice(&g.types);
        }
        let xs: Vec<Tensor<T>> = items.iter().map(|g| geometry::project_cog(&g.x)).collect();
        let hs: Vec<Tensor<T>> = items.iter().map(|g| g.features(n_types)).collect();
        let x = Tensor::vcat(&xs.iter().collect::<Vec<_>>())?;
        let h = Tensor::vcat(&hs.iter().collect::<Vec<_>>())?;
        let charges = Tensor::from_fn(graph.n_nodes(), 1, |i, _| h.get(i, n_types));
        let condition = if conditional {
            Some(condition_column(
                items.iter().map(|g| (g.n(), g.condition)),
            )?)
        } else {
            None
        };
        Ok(Self {
            graph,
            x,
            h,
            types,
            charges,
            condition,
        })
    }
}

/// `[sum N, 1]` column repeating each molecule's condition over its atoms.
pub(crate) fn condition_column<T: Scalar>(
    items: impl Iterator<Item = (usize, Option<f64>)>,
) -> Result<Tensor<T>> {
    let mut col = Vec::new();
    for (n, s) in items {
        let s = s.ok_or_else(|| {
            Error::invalid("conditional model requires a condition value for every molecule")
        })?;
        if !s.is_finite() {
            return Err(Error::NonFinite("condition value".into()));
        }
        col.extend(std::iter::repeat_n(T::of(s), n));
    }
    let n = col.len();
    Ok(Tensor::matrix(n, 1, col))
}

/// Tape handles of one autoencoder objective evaluation.
pub(crate) struct AeTerms {
    pub total: Var,
    pub coord: Var,
    pub ce: Var,
    pub charge: Var,
    pub logits: Var,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new<R: Rng + ?Sized>(config: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.cond_width();
        let enc = EgnnConfig {
            coord_init_gain: config.coord_init_gain,
            ..EgnnConfig::new(
                config.n_types + 1 + c,
                config.k,
                config.hidden,
                config.encoder_layers,
            )
        };
        let dec = EgnnConfig {
            coord_init_gain: config.coord_init_gain,
            ..EgnnConfig::new(
                config.k + c,
                config.n_types + 1,
                config.hidden,
                config.decoder_layers,
            )
        };
        Ok(Self {
            config,
            encoder: EgnnParams::new("encoder", &enc, rng),
            decoder: EgnnParams::new("decoder", &dec, rng),
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn sigma0(&self) -> f64 {
        self.config.sigma0
    }

    pub(crate) fn encode_on(
        &self,
        tape: &mut Tape<T>,
        graph: &GraphBatch,
        x: Var,
        h: Var,
        s: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (xl, mu_h) = self.encoder.forward(tape, graph, x, h, s)?;
        let mu_x = graph.project_cog(tape, xl)?;
        Ok((mu_x, mu_h))
    }

    /// `(x, logits, charge)` on the tape. Output coordinates are recentred
    /// onto the latent centroid so decoding commutes with translations.
    pub(crate) fn decode_on(
        &self,
        tape: &mut Tape<T>,
        graph: &GraphBatch,
        zx: Var,
        zh: Var,
        s: Option<Var>,
    ) -> Result<(Var, Var, Var)> {
        let (xl, out) = self.decoder.forward(tape, graph, zx, zh, s)?;
        let x = graph.project_cog(tape, xl)?;
        let x = if geometry::fault::broken_cog() {
            x
        } else {
            let mz = graph.node_means(tape, zx)?;
            tape.add(x, mz)?
        };
        let nt = self.config.n_types;
        let logits = tape.slice_cols(out, 0, nt)?;
        let charge = tape.slice_cols(out, nt, nt + 1)?;
        Ok((x, logits, charge))
    }

    fn condition_tensor(&self, n: usize, s: Option<f64>) -> Result<Option<Tensor<T>>> {
        match (self.config.conditional, s) {
            (false, None) => Ok(None),
            (false, Some(_)) => Err(Error::invalid(
                "condition supplied to an unconditional autoencoder",
            )),
            (true, s) => Ok(Some(condition_column(std::iter::once((n, s)))?)),
        }
    }

    /// The molecule's condition if this model is conditional; stored
    /// properties are ignored otherwise.
    fn own_condition(&self, g: &Geometry<T>) -> Option<f64> {
        if self.config.conditional {
            g.condition
        } else {
            None
        }
    }

    /// Encoder means `(mu_x, mu_h)` of one molecule.
    pub fn encode(&self, g: &Geometry<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let graph = GraphBatch::single(g.n())?;
        let mut tape = Tape::new();
        let x = tape.constant(g.x.clone());
        let h = tape.constant(g.features(self.config.n_types));
        let s = self
            .condition_tensor(g.n(), self.own_condition(g))?
            .map(|s| tape.constant(s));
        let (mx, mh) = self.encode_on(&mut tape, &graph, x, h, s)?;
        Ok((tape.value(mx).clone(), tape.value(mh).clone()))
    }

    pub fn decode(&self, z: &LatentPoint<T>, condition: Option<f64>) -> Result<Decoded<T>> {
        if z.k() != self.k() {
            return Err(Error::WidthMismatch {
                what: "latent features",
                expected: self.k(),
                actual: z.k(),
            });
        }
        let graph = GraphBatch::single(z.n())?;
        let mut tape = Tape::new();
        let zx = tape.constant(z.z_x.clone());
        let zh = tape.constant(z.z_h.clone());
        let s = self
            .condition_tensor(z.n(), condition)?
            .map(|s| tape.constant(s));
        let (x, l, c) = self.decode_on(&mut tape, &graph, zx, zh, s)?;
        Ok(Decoded {
            x: tape.value(x).clone(),
            logits: tape.value(l).clone(),
            charge: tape.value(c).clone(),
        })
    }

    /// Full objective on a batch with explicit reparameterisation noise.
    /// `eps_x` is projected per molecule before use.
    pub(crate) fn objective(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        eps_x: &Tensor<T>,
        eps_h: &Tensor<T>,
        with_reg: bool,
    ) -> Result<AeTerms> {
        let g = &batch.graph;
        let n_total = T::of(g.n_nodes() as f64);
        let x = tape.constant(batch.x.clone());
        let h = tape.constant(batch.h.clone());
        let s = batch.condition.as_ref().map(|s| tape.constant(s.clone()));
        let (mu_x, mu_h) = self.encode_on(tape, g, x, h, s)?;

        let sigma = T::of(self.config.sigma0);
        let ex = tape.constant(g.project_cog_values(eps_x));
        let eh = tape.constant(eps_h.clone());
        let ex = tape.scale(ex, sigma);
        let eh = tape.scale(eh, sigma);
        let zx = tape.add(mu_x, ex)?;
        let zh = tape.add(mu_h, eh)?;

        let (xr, logits, charge) = self.decode_on(tape, g, zx, zh, s)?;

        let dx = tape.sub(xr, x)?;
        let dx = tape.square(dx);
        let coord = tape.sum(dx);
        let coord = tape.scale(coord, T::one() / n_total);

        let onehot = Tensor::from_fn(g.n_nodes(), self.config.n_types, |i, c| {
            if batch.types[i] == c {
                T::one()
            } else {
                T::zero()
            }
        });
        let onehot = tape.constant(onehot);
        let lp = tape.log_softmax(logits);
        let picked = tape.mul(lp, onehot)?;
        let ce = tape.sum(picked);
        let ce = tape.scale(ce, -T::one() / n_total);

        let target_q = tape.constant(batch.charges.clone());
        let dq = tape.sub(charge, target_q)?;
        let dq = tape.square(dq);
        let dq = tape.sum(dq);
        let charge_loss = tape.scale(dq, T::one() / n_total);

        let mut total = tape.add(coord, ce)?;
        total = tape.add(total, charge_loss)?;
        if with_reg {
            if let Regularizer::Kl { weight } = self.config.regularizer {
                let kl = kl_on(tape, g, mu_x, mu_h, self.config.sigma0)?;
                let kl = tape.scale(kl, T::of(weight / g.n_graphs() as f64));
                total = tape.add(total, kl)?;
            }
        }
        Ok(AeTerms {
            total,
            coord,
            ce,
            charge: charge_loss,
            logits,
        })
    }

    /// Reconstruction-only objective of one molecule with explicit noise.
    pub fn reconstruction_objective(
        &self,
        g: &Geometry<T>,
        eps_x: &Tensor<T>,
        eps_h: &Tensor<T>,
    ) -> Result<ReconstructionReport> {
        let batch = Batch::new(&[g], self.config.n_types, self.config.conditional)?;
        let mut tape = Tape::new();
        let t = self.objective(&mut tape, &batch, eps_x, eps_h, false)?;
        let v = |v: Var| tape.value(v).values()[0].as_f64();
        let pred = argmax_rows(tape.value(t.logits));
        let acc = pred
            .iter()
            .zip(&batch.types)
            .filter(|(a, b)| a == b)
            .count() as f64
            / pred.len() as f64;
        Ok(ReconstructionReport {
            coord: v(t.coord),
            cross_entropy: v(t.ce),
            charge: v(t.charge),
            type_accuracy: acc,
            total: v(t.total),
        })
    }

    /// Deterministic round trip through the encoder means.
    pub fn reconstruct(&self, g: &Geometry<T>) -> Result<Decoded<T>> {
        let (mx, mh) = self.encode(g)?;
        self.decode(&LatentPoint::new(mx, mh)?, self.own_condition(g))
    }
}

impl<T: Scalar> Module<T> for Autoencoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    Decoded {
        x: Tensor::zeros(0, 3),
        logits: t.clone(),
        charge: Tensor::zeros(0, 1),
    }
    .types()
}

/// `z = mu + sigma0 * eps` with `eps_x` projected onto the zero-CoG subspace.
pub fn reparameterize<T: Scalar>(
    mu_x: &Tensor<T>,
    mu_h: &Tensor<T>,
    sigma0: f64,
    eps_x: &Tensor<T>,
    eps_h: &Tensor<T>,
) -> Result<LatentPoint<T>> {
    if mu_x.shape() != eps_x.shape() || mu_h.shape() != eps_h.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            lhs: [mu_x.shape(), mu_h.shape()].concat(),
            rhs: [eps_x.shape(), eps_h.shape()].concat(),
        });
    }
    let s = T::of(sigma0);
    let ex = geometry::project_cog(eps_x);
    let zx = Tensor::from_fn(mu_x.rows(), 3, |i, a| mu_x.get(i, a) + s * ex.get(i, a));
    let zh = Tensor::from_fn(mu_h.rows(), mu_h.cols(), |i, c| {
        mu_h.get(i, c) + s * eps_h.get(i, c)
    });
    LatentPoint::new(zx, zh)
}

/// KL of N(mu, sigma0^2 I) against N(0, I) over `3(N-1) + kN` dimensions.
pub fn kl_regularizer<T: Scalar>(mu_x: &Tensor<T>, mu_h: &Tensor<T>, sigma0: f64) -> f64 {
    let n = mu_x.rows();
    let dims = 3 * n.saturating_sub(1) + mu_h.numel();
    let sq: f64 = mu_x
        .values()
        .iter()
        .chain(mu_h.values())
        .map(|v| v.as_f64().powi(2))
        .sum();
    0.5 * sq + dims as f64 * kl_per_dim_constant(sigma0)
}

/// `(sigma0^2 - 1 - 2 ln sigma0) / 2`, the KL of one zero-mean dimension.
pub fn kl_per_dim_constant(sigma0: f64) -> f64 {
    0.5 * (sigma0 * sigma0 - 1.0 - 2.0 * sigma0.ln())
}

fn kl_on<T: Scalar>(
    tape: &mut Tape<T>,
    g: &GraphBatch,
    mu_x: Var,
    mu_h: Var,
    sigma0: f64,
) -> Result<Var> {
    let k = tape.shape(mu_h)[1];
    let dims: usize = g.sizes().iter().map(|&n| 3 * (n - 1) + k * n).sum();
    let a = tape.square(mu_x);
    let a = tape.sum(a);
    let b = tape.square(mu_h);
    let b = tape.sum(b);
    let s = tape.add(a, b)?;
    let s = tape.scale(s, T::of(0.5));
    Ok(tape.add_scalar(s, T::of(dims as f64 * kl_per_dim_constant(sigma0))))
}

/// Value-level reconstruction report of a decoded molecule against its target.
pub fn reconstruction_loss<T: Scalar>(
    decoded: &Decoded<T>,
    target: &Geometry<T>,
) -> Result<ReconstructionReport> {
    let n = target.n();
    if decoded.x.shape() != target.x.shape()
        || decoded.logits.rows() != n
        || decoded.charge.shape() != [n, 1]
    {
        return Err(Error::ShapeMismatch {
            op: "reconstruction loss",
            lhs: decoded.x.shape().to_vec(),
            rhs: target.x.shape().to_vec(),
        });
    }
    let nt = decoded.logits.cols();
    if let Some(&t) = target.types.iter().find(|&&t| t >= nt) {
        return Err(Error::invalid(format!(
            "target type {t} outside {nt} logits"
        )));
    }
    let nf = n as f64;
    let coord = (0..n)
        .map(|i| {
            (0..3)
                .map(|a| (decoded.x.get(i, a) - target.x.get(i, a)).as_f64().powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / nf;
    let mut ce = 0.0;
    for i in 0..n {
        let row: Vec<f64> = decoded.logits.row(i).iter().map(|v| v.as_f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - row[target.types[i]];
    }
    ce /= nf;
    let charge = (0..n)
        .map(|i| (decoded.charge.get(i, 0).as_f64() - target.charges[i] as f64).powi(2))
        .sum::<f64>()
        / nf;
    let pred = decoded.types();
    let acc = pred
        .iter()
        .zip(&target.types)
        .filter(|(a, b)| a == b)
        .count() as f64
        / nf;
    Ok(ReconstructionReport {
        coord,
        cross_entropy: ce,
        charge,
        type_accuracy: acc,
        total: coord + ce + charge,
    })
}

/// Root-mean-square coordinate error and type accuracy of deterministic
/// reconstructions over a set.
pub fn reconstruction_quality<T: Scalar>(
    ae: &Autoencoder<T>,
    data: &[Geometry<T>],
) -> Result<(f64, f64)> {
    let (mut se, mut atoms, mut correct) = (0.0, 0usize, 0usize);
    for g in data {
        let d = ae.reconstruct(g)?;
        let target = geometry::project_cog(&g.x);
        for i in 0..g.n() {
            se += (0..3)
                .map(|a| (d.x.get(i, a) - target.get(i, a)).as_f64().powi(2))
                .sum::<f64>();
        }
        correct += d
            .types()
            .iter()
            .zip(&g.types)
            .filter(|(a, b)| a == b)
            .count();
        atoms += g.n();
    }
    if atoms == 0 {
        return Err(Error::invalid("reconstruction quality of an empty set"));
    }
    Ok(((se / atoms as f64).sqrt(), correct as f64 / atoms as f64))
}

/// Minibatch Adam training of the autoencoder.
///
/// With early-stop regularisation the encoder is frozen once `warmup`
/// iterations have run; afterwards only the decoder moves.
pub fn train_autoencoder<T: Scalar>(
    mut ae: Autoencoder<T>,
    data: &[Geometry<T>],
    cfg: &TrainConfig,
) -> TrainResult<Autoencoder<T>> {
    let mut log = Vec::with_capacity(cfg.iterations);
    let abort = |ae, log, iteration, error| {
        Box::new(Aborted {
            last_good: ae,
            log,
            iteration,
            error,
        })
    };
    if data.is_empty() {
        return Err(abort(
            ae,
            log,
            0,
            Error::invalid("autoencoder training set is empty"),
        ));
    }
    let mut rng = rng_stream(cfg.seed, stream::TRAIN_AE);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let nt = ae.config.n_types;
    for it in 0..cfg.iterations {
        opt.config.lr = cfg.lr_at(it);
        if let Regularizer::EarlyStop { warmup } = ae.config.regularizer {
            if it == warmup {
                ae.encoder.set_trainable(false);
            }
        }
        let idx = minibatch(&mut rng, data.len(), cfg.batch_size);
        let items: Vec<&Geometry<T>> = idx.iter().map(|&i| &data[i]).collect();
        let batch = match Batch::new(&items, nt, ae.config.conditional) {
            Ok(b) => b,
            Err(e) => return Err(abort(ae, log, it, e)),
        };
        let n = batch.graph.n_nodes();
        let eps_x = geometry::gaussian(&mut rng, n, 3);
        let eps_h = geometry::gaussian(&mut rng, n, ae.k());
        let mut tape = Tape::new();
        let terms = match ae.objective(&mut tape, &batch, &eps_x, &eps_h, true) {
            Ok(t) => t,
            Err(e) => return Err(abort(ae, log, it, e)),
        };
        let loss = tape.value(terms.total).values()[0];
        if !loss.is_finite() {
            return Err(abort(
                ae,
                log,
                it,
                Error::NonFinite(format!("autoencoder loss {loss}")),
            ));
        }
        if let Err(e) = tape.backward(terms.total) {
            return Err(abort(ae, log, it, e));
        }
        ae.zero_grad();
        ae.pull_grads(&tape);
        if let Err(e) = opt.step(&mut [&mut ae]) {
            return Err(abort(ae, log, it, e));
        }
        log.push(LossRecord {
            iteration: it,
            loss: loss.as_f64(),
        });
    }
    Ok(Trained { model: ae, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, DEFAULT_FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    fn small_config() -> AutoencoderConfig {
        AutoencoderConfig {
            hidden: 8,
            decoder_layers: 2,
            coord_init_gain: 1.0,
            ..AutoencoderConfig::default()
        }
    }

    fn water() -> Geometry<f64> {
        let x = Tensor::from_rows(&[
            [0.0, 0.0, 0.1173],
            [0.0, 0.7572, -0.4692],
            [0.0, -0.7572, -0.4692],
        ]);
        Geometry::new(x, vec![3, 0, 0], vec![0, 0, 0], None).unwrap()
    }

    #[test]
    fn features_are_one_hot_plus_charge() {
        let g = Geometry::<f64>::new(Tensor::zeros(2, 3), vec![0, 3], vec![0, -1], None).unwrap();
        let h = g.features(5);
        assert_eq!(h.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(h.row(1), &[0.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    }

    #[test]
    fn encoder_means_are_centred_and_single_atoms_map_to_origin() {
        let ae = Autoencoder::<f64>::new(small_config(), &mut rng()).unwrap();
        let (mx, mh) = ae.encode(&water()).unwrap();
        assert!(geometry::cog_norm(&mx) < 1e-12);
        assert_eq!(mh.shape(), &[3, 1]);
        let one = Geometry::new(
            Tensor::from_rows(&[[1.0, 2.0, 3.0]]),
            vec![1],
            vec![0],
            None,
        )
        .unwrap();
        let (mx, _) = ae.encode(&one).unwrap();
        assert!(mx.max_abs() < 1e-15);
    }

    #[test]
    fn reparameterize_cases() {
        let mu_x = geometry::project_cog(&Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]));
        let mu_h = Tensor::from_rows(&[[0.5], [-0.5]]);
        let z = reparameterize(
            &mu_x,
            &mu_h,
            0.01,
            &Tensor::zeros(2, 3),
            &Tensor::zeros(2, 1),
        )
        .unwrap();
        assert_eq!(z.z_x, mu_x);
        assert_eq!(z.z_h, mu_h);

        let v = Tensor::<f64>::from_rows(&[[1.0, -2.0, 3.0], [-1.0, 2.0, -3.0]]);
        let z = reparameterize(
            &Tensor::zeros(2, 3),
            &Tensor::zeros(2, 1),
            0.01,
            &v,
            &Tensor::zeros(2, 1),
        )
        .unwrap();
        assert!(z.z_x.max_abs_diff(&v.map(|a| 0.01 * a)) < 1e-15);

        let mut r = rng();
        for _ in 0..20 {
            let e: Tensor<f64> = geometry::gaussian(&mut r, 7, 3);
            let z = reparameterize(
                &mu_x.slice_rows(0, 2),
                &mu_h,
                0.3,
                &e.slice_rows(0, 2),
                &Tensor::zeros(2, 1),
            )
            .unwrap();
            assert!(geometry::cog_norm(&z.z_x) < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let zeros = |n| (Tensor::<f64>::zeros(n, 3), Tensor::<f64>::zeros(n, 1));
        let (x, h) = zeros(3);
        assert!(kl_regularizer(&x, &h, 1.0).abs() < 1e-15);
        let expect = 0.5 * (1e-4 - 1.0 + 2.0 * 100f64.ln());
        assert!((kl_per_dim_constant(0.01) - expect).abs() < 1e-12);
        assert!((kl_per_dim_constant(0.01) - 4.1052).abs() < 1e-4);
        // feature part is additive in N
        let feat = |n| {
            let (x, h) = zeros(n);
            kl_regularizer(&x, &h, 0.01) - 3.0 * (n as f64 - 1.0) * kl_per_dim_constant(0.01)
        };
        assert!((feat(8) - 2.0 * feat(4)).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_conventions() {
        let g = water();
        let mut logits = Tensor::zeros(3, 5);
        for (i, &t) in g.types.iter().enumerate() {
            logits.set(i, t, 20.0);
        }
        let perfect = Decoded {
            x: g.x.clone(),
            logits: logits.clone(),
            charge: Tensor::zeros(3, 1),
        };
        let r = reconstruction_loss(&perfect, &g).unwrap();
        assert_eq!(r.coord, 0.0);
        assert!(r.cross_entropy < 1e-8);
        assert_eq!(r.type_accuracy, 1.0);

        let uniform = Decoded {
            logits: Tensor::zeros(3, 5),
            ..perfect.clone()
        };
        assert!(
            (reconstruction_loss(&uniform, &g).unwrap().cross_entropy - 5f64.ln()).abs() < 1e-12
        );

        let shifted = Decoded {
            x: geometry::transform(&g.x, &geometry::IDENTITY, [1.0, 0.0, 0.0]),
            ..perfect
        };
        assert!((reconstruction_loss(&shifted, &g).unwrap().coord - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let d = Decoded::<f64> {
            x: Tensor::zeros(1, 3),
            logits: Tensor::from_rows(&[[0.0, 2.0, 2.0, 1.0]]),
            charge: Tensor::from_rows(&[[-0.6]]),
        };
        assert_eq!(d.types(), vec![1]);
        assert_eq!(d.charges(), vec![-1]);
    }

    #[test]
    fn decoder_width_mismatch_rejected() {
        let ae = Autoencoder::<f64>::new(small_config(), &mut rng()).unwrap();
        let z = LatentPoint::new(Tensor::zeros(2, 3), Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(
            ae.decode(&z, None),
            Err(Error::WidthMismatch {
                expected: 1,
                actual: 2,
                ..
            })
        ));
    }

    #[test]
    fn latent_point_rejects_offset_coordinates() {
        assert!(LatentPoint::new(Tensor::<f64>::full(2, 3, 1.0), Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn paired_noise_reconstruction_invariance() {
        let ae = Autoencoder::<f64>::new(small_config(), &mut rng()).unwrap();
        let mut r = rng();
        let g = water();
        for _ in 0..10 {
            let ex: Tensor<f64> = geometry::gaussian(&mut r, 3, 3);
            let eh: Tensor<f64> = geometry::gaussian(&mut r, 3, 1);
            let rot = geometry::random_rotation(&mut r);
            let a = ae.reconstruction_objective(&g, &ex, &eh).unwrap();
            let b = ae
                .reconstruction_objective(
                    &g.transformed(&rot, [1.0, -2.0, 0.5]),
                    &geometry::rotate(&ex, &rot),
                    &eh,
                )
                .unwrap();
            assert!((a.total - b.total).abs() < 1e-9, "{a:?} {b:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = AutoencoderConfig {
            regularizer: Regularizer::DEFAULT_KL,
            ..small_config()
        };
        let mut ae = Autoencoder::<f64>::new(cfg, &mut rng()).unwrap();
        let g = water();
        let batch = Batch::new(&[&g], 5, false).unwrap();
        let ex = geometry::gaussian(&mut rng(), 3, 3);
        let eh = geometry::gaussian(&mut rng(), 3, 1);
        let rep = finite_difference_check(
            &mut ae,
            |m, tape| Ok(m.objective(tape, &batch, &ex, &eh, true)?.total),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn training_is_seed_deterministic_and_freezes_encoder() {
        let cfg = AutoencoderConfig {
            regularizer: Regularizer::EarlyStop { warmup: 3 },
            ..small_config()
        };
        let data = vec![
            water(),
            water().transformed(&geometry::random_rotation(&mut rng()), [0.0; 3]),
        ];
        let tc = TrainConfig {
            iterations: 8,
            batch_size: 2,
            lr: 1e-3,
            seed: 4,
            lr_decay: 0.0,
        };
        let a = train_autoencoder(
            Autoencoder::<f64>::new(cfg, &mut rng()).unwrap(),
            &data,
            &tc,
        )
        .unwrap();
        let b = train_autoencoder(
            Autoencoder::<f64>::new(cfg, &mut rng()).unwrap(),
            &data,
            &tc,
        )
        .unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.fingerprint(), b.model.fingerprint());

        let short = TrainConfig {
            iterations: 3,
            ..tc
        };
        let c = train_autoencoder(
            Autoencoder::<f64>::new(cfg, &mut rng()).unwrap(),
            &data,
            &short,
        )
        .unwrap();
        assert_eq!(c.model.encoder.fingerprint(), a.model.encoder.fingerprint());
        assert_ne!(c.model.decoder.fingerprint(), a.model.decoder.fingerprint());
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_params() {
        let mut ae = Autoencoder::<f64>::new(small_config(), &mut rng()).unwrap();
        ae.decoder.head.weight.tensor_mut().values_mut()[0] = f64::NAN;
        let before = ae.fingerprint();
        let err = train_autoencoder(ae, &[water()], &TrainConfig::default()).unwrap_err();
        assert_eq!(err.iteration, 0);
        assert_eq!(err.last_good.fingerprint(), before);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ae = Autoencoder::<f64>::new(small_config(), &mut rng()).unwrap();
        assert!(train_autoencoder(ae, &[], &TrainConfig::default()).is_err());
    }
}
