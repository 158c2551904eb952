//! E(3)-equivariant graph convolutions over fully connected point clouds.
//!
//! One layer computes, for every ordered pair `i != j`,
//!
//! ```text
//! m_ij  = phi_e(h_i, h_j, d_ij^2, a_ij)
//! h_i'  = phi_h(h_i, sum_j sigmoid(phi_inf(m_ij)) * m_ij)
//! x_i'  = x_i + sum_j (x_i - x_j) / (d_ij + 1) * phi_x(h_i, h_j, d_ij^2, a_ij)
//! ```
//!
//! Features only ever see distances, and coordinates only move along relative
//! directions, so rotations, reflections and translations commute with the
//! layer. The edge attribute `a_ij` is the pairwise distance at network input.

use rand::Rng;

use crate::autodiff::{uniform, Linear, Module, Param, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, GraphBatch, Rotation};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgnnConfig {
    pub in_width: usize,
    pub out_width: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Symmetric bound on the per-edge coordinate scalar; `None` disables it.
    pub coord_clip: Option<f64>,
    /// Xavier gain of the last coordinate layer.
    pub coord_init_gain: f64,
}

impl EgnnConfig {
    pub fn new(in_width: usize, out_width: usize, hidden: usize, layers: usize) -> Self {
        Self {
            in_width,
            out_width,
            hidden,
            layers,
            coord_clip: Some(100.0),
            coord_init_gain: 0.001,
        }
    }
}

/// First layer of an edge MLP, i.e. a linear map on `[h_i, h_j, d_ij^2, a_ij]`,
/// stored as blocks so the node parts are multiplied before the edge gather.
#[derive(Clone, Debug)]
pub struct EdgeInput<T> {
    pub w_recv: Param<T>,
    pub w_send: Param<T>,
    pub w_edge: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> EdgeInput<T> {
    fn new<R: Rng + ?Sized>(name: &str, features: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((2 * features + 2) as f64).sqrt();
        Self {
            w_recv: Param::new(format!("{name}.w_recv"), uniform(rng, features, out, bound)),
            w_send: Param::new(format!("{name}.w_send"), uniform(rng, features, out, bound)),
            w_edge: Param::new(format!("{name}.w_edge"), uniform(rng, 2, out, bound)),
            bias: Param::new(format!("{name}.b"), uniform(rng, 1, out, bound)),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        graph: &GraphBatch,
        h: Var,
        edge_feats: Var,
    ) -> Result<Var> {
        let wr = tape.param(&self.w_recv);
        let ws = tape.param(&self.w_send);
        let we = tape.param(&self.w_edge);
        let b = tape.param(&self.bias);
        let hr = tape.matmul(h, wr)?;
        let hs = tape.matmul(h, ws)?;
        let hr = tape.gather_rows(hr, graph.src().clone())?;
        let hs = tape.gather_rows(hs, graph.dst().clone())?;
        let e = tape.matmul(edge_feats, we)?;
        let y = tape.add(hr, hs)?;
        let y = tape.add(y, e)?;
        tape.add(y, b)
    }
}

impl<T: Scalar> Module<T> for EdgeInput<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.w_recv);
        f(&self.w_send);
        f(&self.w_edge);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w_recv);
        f(&mut self.w_send);
        f(&mut self.w_edge);
        f(&mut self.bias);
    }
}

/// Parameters of one equivariant graph convolution. Each learnable map is a
/// two-layer perceptron with SiLU in between.
#[derive(Clone, Debug)]
pub struct EgclParams<T> {
    pub edge_in: EdgeInput<T>,
    pub edge_out: Linear<T>,
    pub gate_in: Linear<T>,
    pub gate_out: Linear<T>,
    pub node_in: Linear<T>,
    pub node_out: Linear<T>,
    pub coord_in: EdgeInput<T>,
    pub coord_out: Linear<T>,
    pub coord_clip: Option<f64>,
}

impl<T: Scalar> EgclParams<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        hidden: usize,
        coord_clip: Option<f64>,
        coord_gain: f64,
        rng: &mut R,
    ) -> Self {
        let nf = hidden;
        let xavier = coord_gain * (6.0 / (nf + 1) as f64).sqrt();
        Self {
            edge_in: EdgeInput::new(&format!("{name}.edge_in"), nf, nf, rng),
            edge_out: Linear::new(&format!("{name}.edge_out"), nf, nf, true, rng),
            gate_in: Linear::new(&format!("{name}.gate_in"), nf, nf, true, rng),
            gate_out: Linear::new(&format!("{name}.gate_out"), nf, 1, true, rng),
            node_in: Linear::new(&format!("{name}.node_in"), 2 * nf, nf, true, rng),
            node_out: Linear::new(&format!("{name}.node_out"), nf, nf, true, rng),
            coord_in: EdgeInput::new(&format!("{name}.coord_in"), nf, nf, rng),
            coord_out: Linear::with_bound(&format!("{name}.coord_out"), nf, 1, false, xavier, rng),
            coord_clip,
        }
    }

    pub fn width(&self) -> usize {
        self.edge_out.output_width()
    }

    /// Zero the last coordinate layer, turning the layer into a pure feature update.
    pub fn freeze_coordinates(&mut self) {
        self.coord_out
            .weight
            .tensor_mut()
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = T::zero());
    }

    /// One layer on the tape. `attr` is the `[E, 1]` edge attribute.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        graph: &GraphBatch,
        x: Var,
        h: Var,
        attr: Var,
    ) -> Result<(Var, Var)> {
        let n = graph.n_nodes();
        let xr = tape.gather_rows(x, graph.src().clone())?;
        let xs = tape.gather_rows(x, graph.dst().clone())?;
        let diff = tape.sub(xr, xs)?;
        let sq = tape.square(diff);
        let d2 = tape.sum_cols(sq);
        let d = tape.sqrt(d2);
        if !tape.value(d).all_finite() {
            return Err(Error::NonFinite(
                "pairwise distance in equivariant layer".into(),
            ));
        }
        let edge_feats = tape.concat(&[d2, attr])?;

        let m = self.edge_in.forward(tape, graph, h, edge_feats)?;
        let m = tape.silu(m);
        let m = self.edge_out.forward(tape, m)?;
        let m = tape.silu(m);

        let g = self.gate_in.forward(tape, m)?;
        let g = tape.silu(g);
        let g = self.gate_out.forward(tape, g)?;
        let g = tape.sigmoid(g);
        let gm = tape.mul(m, g)?;
        let agg = tape.scatter_add_rows(gm, graph.src().clone(), n)?;

        let hn = tape.concat(&[h, agg])?;
        let hn = self.node_in.forward(tape, hn)?;
        let hn = tape.silu(hn);
        let h_new = self.node_out.forward(tape, hn)?;

        let s = self.coord_in.forward(tape, graph, h, edge_feats)?;
        let s = tape.silu(s);
        let mut s = self.coord_out.forward(tape, s)?;
        if let Some(c) = self.coord_clip {
            s = tape.clamp(s, T::of(-c), T::of(c));
        }
        let denom = tape.add_scalar(d, T::one());
        let w = tape.div(s, denom)?;
        let step = tape.mul(diff, w)?;
        let dx = tape.scatter_add_rows(step, graph.src().clone(), n)?;
        let x_new = tape.add(x, dx)?;
        Ok((x_new, h_new))
    }
}

impl<T: Scalar> Module<T> for EgclParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.edge_in.visit(f);
        self.edge_out.visit(f);
        self.gate_in.visit(f);
        self.gate_out.visit(f);
        self.node_in.visit(f);
        self.node_out.visit(f);
        self.coord_in.visit(f);
        self.coord_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.edge_in.visit_mut(f);
        self.edge_out.visit_mut(f);
        self.gate_in.visit_mut(f);
        self.gate_out.visit_mut(f);
        self.node_in.visit_mut(f);
        self.node_out.visit_mut(f);
        self.coord_in.visit_mut(f);
        self.coord_out.visit_mut(f);
    }
}

/// Input projection, `L` stacked layers, output projection.
#[derive(Clone, Debug)]
pub struct EgnnParams<T> {
    pub embed: Linear<T>,
    pub layers: Vec<EgclParams<T>>,
    pub head: Linear<T>,
}

/// Coordinates `[N, 3]` and invariant features `[N, f]` of one point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudState<T> {
    pub x: Tensor<T>,
    pub h: Tensor<T>,
}

impl<T: Scalar> PointCloudState<T> {
    pub fn new(x: Tensor<T>, h: Tensor<T>) -> Result<Self> {
        if x.rows() == 0 || x.cols() != 3 || h.rows() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "point cloud state",
                lhs: x.shape().to_vec(),
                rhs: h.shape().to_vec(),
            });
        }
        if !x.all_finite() || !h.all_finite() {
            return Err(Error::NonFinite("point cloud state".into()));
        }
        Ok(Self { x, h })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }
}

impl<T: Scalar> EgnnParams<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &EgnnConfig, rng: &mut R) -> Self {
        let embed = Linear::new(
            &format!("{name}.embed"),
            cfg.in_width,
            cfg.hidden,
            true,
            rng,
        );
        let layers = (0..cfg.layers)
            .map(|l| {
                EgclParams::new(
                    &format!("{name}.layer{l}"),
                    cfg.hidden,
                    cfg.coord_clip,
                    cfg.coord_init_gain,
                    rng,
                )
            })
            .collect();
        let head = Linear::new(
            &format!("{name}.head"),
            cfg.hidden,
            cfg.out_width,
            true,
            rng,
        );
        Self {
            embed,
            layers,
            head,
        }
    }

    pub fn in_width(&self) -> usize {
        self.embed.input_width()
    }

    pub fn out_width(&self) -> usize {
        self.head.output_width()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Run the network on a batch. `extra` scalars (time, condition) are
    /// concatenated to `h` before the input projection.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        graph: &GraphBatch,
        x: Var,
        h: Var,
        extra: Option<Var>,
    ) -> Result<(Var, Var)> {
        let h_in = match extra {
            Some(e) => tape.concat(&[h, e])?,
            None => h,
        };
        let width = tape.shape(h_in)[1];
        if width != self.in_width() {
            return Err(Error::WidthMismatch {
                what: "network input features",
                expected: self.in_width(),
                actual: width,
            });
        }
        let xr = tape.gather_rows(x, graph.src().clone())?;
        let xs = tape.gather_rows(x, graph.dst().clone())?;
        let diff = tape.sub(xr, xs)?;
        let sq = tape.square(diff);
        let d2 = tape.sum_cols(sq);
        let attr = tape.sqrt(d2);

        let mut hh = self.embed.forward(tape, h_in)?;
        let mut xx = x;
        for layer in &self.layers {
            (xx, hh) = layer.forward(tape, graph, xx, hh, attr)?;
        }
        let out = self.head.forward(tape, hh)?;
        Ok((xx, out))
    }

    /// Value-level forward pass for a single point cloud.
    pub fn apply(
        &self,
        state: &PointCloudState<T>,
        extra: Option<&Tensor<T>>,
    ) -> Result<PointCloudState<T>> {
        let graph = GraphBatch::single(state.n())?;
        let mut tape = Tape::new();
        let x = tape.constant(state.x.clone());
        let h = tape.constant(state.h.clone());
        let e = extra.map(|e| tape.constant(e.clone()));
        let (xo, ho) = self.forward(&mut tape, &graph, x, h, e)?;
        Ok(PointCloudState {
            x: tape.value(xo).clone(),
            h: tape.value(ho).clone(),
        })
    }
}

impl<T: Scalar> Module<T> for EgnnParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.embed.visit(f);
        for l in &self.layers {
            l.visit(f);
        }
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.embed.visit_mut(f);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Single-layer forward pass on values, with optional explicit edge attributes
/// (defaults to the current pairwise distances).
pub fn egcl_forward<T: Scalar>(
    state: &PointCloudState<T>,
    layer: &EgclParams<T>,
    edge_attr: Option<&Tensor<T>>,
) -> Result<PointCloudState<T>> {
    let graph = GraphBatch::single(state.n())?;
    let mut tape = Tape::new();
    let x = tape.constant(state.x.clone());
    let h = tape.constant(state.h.clone());
    let attr = match edge_attr {
        Some(a) => {
            if a.rows() != graph.n_edges() || a.cols() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "edge attributes",
                    lhs: vec![graph.n_edges(), 1],
                    rhs: a.shape().to_vec(),
                });
            }
            tape.constant(a.clone())
        }
        None => tape.constant(pairwise_edge_distances(&state.x, &graph)),
    };
    let (xo, ho) = layer.forward(&mut tape, &graph, x, h, attr)?;
    Ok(PointCloudState {
        x: tape.value(xo).clone(),
        h: tape.value(ho).clone(),
    })
}

/// `[E, 1]` distances in the batch edge order.
pub fn pairwise_edge_distances<T: Scalar>(x: &Tensor<T>, graph: &GraphBatch) -> Tensor<T> {
    Tensor::from_fn(graph.n_edges(), 1, |e, _| {
        let (i, j) = (graph.src()[e], graph.dst()[e]);
        (0..3)
            .map(|a| (x.get(i, a) - x.get(j, a)).powi(2))
            .sum::<T>()
            .sqrt()
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuditReport {
    /// max ||f(Rx+t)_x - (R f(x)_x + t)||_inf
    pub coord_deviation: f64,
    /// max ||f(Rx+t)_h - f(x)_h||_inf
    pub feature_deviation: f64,
    pub trials: usize,
}

impl AuditReport {
    pub fn max(&self) -> f64 {
        self.coord_deviation.max(self.feature_deviation)
    }

    pub fn merge(self, other: AuditReport) -> AuditReport {
        AuditReport {
            coord_deviation: self.coord_deviation.max(other.coord_deviation),
            feature_deviation: self.feature_deviation.max(other.feature_deviation),
            trials: self.trials + other.trials,
        }
    }
}

/// Rigid-motion audit of an arbitrary map on point clouds.
///
/// `f` returns transformed coordinates and invariant features; each trial
/// draws a fresh input of `n` points, an orthogonal matrix (proper unless
/// `improper`) and a translation (unless `translate` is false).
pub fn audit_map<T, R, F>(
    mut f: F,
    n: usize,
    in_width: usize,
    trials: usize,
    improper: bool,
    translate: bool,
    rng: &mut R,
) -> Result<AuditReport>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&PointCloudState<T>) -> Result<(Tensor<T>, Tensor<T>)>,
{
    if trials == 0 {
        return Err(Error::invalid(
            "equivariance audit needs at least one trial",
        ));
    }
    let mut report = AuditReport {
        trials,
        ..AuditReport::default()
    };
    for _ in 0..trials {
        let x: Tensor<T> = uniform(rng, n, 3, 1.5);
        let h: Tensor<T> = uniform(rng, n, in_width, 1.0);
        let rot = geometry::random_orthogonal(rng, !improper);
        let shift = if translate {
            [0, 1, 2].map(|_| rng.random_range(-3.0..3.0))
        } else {
            [0.0; 3]
        };
        let (x0, h0) = f(&PointCloudState::new(x.clone(), h.clone())?)?;
        let moved = geometry::transform(&x, &rot, shift);
        let (x1, h1) = f(&PointCloudState::new(moved, h)?)?;
        let expected = geometry::transform(&x0, &rot, shift);
        report.coord_deviation = report
            .coord_deviation
            .max(x1.max_abs_diff(&expected).as_f64());
        report.feature_deviation = report.feature_deviation.max(h1.max_abs_diff(&h0).as_f64());
    }
    Ok(report)
}

/// Equivariance audit of an EGNN under random rigid motions.
pub fn equivariance_audit<T: Scalar, R: Rng + ?Sized>(
    params: &EgnnParams<T>,
    n: usize,
    trials: usize,
    improper: bool,
    rng: &mut R,
) -> Result<AuditReport> {
    audit_map(
        |s| {
            let out = params.apply(s, None)?;
            Ok((out.x, out.h))
        },
        n,
        params.in_width(),
        trials,
        improper,
        true,
        rng,
    )
}

/// Apply one rotation and translation pair to a set of coordinates; a thin
/// wrapper so callers do not need the geometry module for audits.
pub fn rigid<T: Scalar>(x: &Tensor<T>, rot: &Rotation, shift: [f64; 3]) -> Tensor<T> {
    geometry::transform(x, rot, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, DEFAULT_FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn audit_config(in_w: usize, out_w: usize, hidden: usize, layers: usize) -> EgnnConfig {
        EgnnConfig {
            coord_init_gain: 1.0,
            ..EgnnConfig::new(in_w, out_w, hidden, layers)
        }
    }

    #[test]
    fn three_four_five_distance_and_divisor() {
        let x = Tensor::<f64>::from_rows(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]);
        let g = GraphBatch::single(2).unwrap();
        let d = pairwise_edge_distances(&x, &g);
        assert_eq!(d.values(), &[5.0, 5.0]);

        // With phi_x pinned to 1 (zero weights, then a constant via the clip
        // bound), node 0 moves by (x0 - x1) / 6.
        let mut layer = EgclParams::<f64>::new("l", 4, Some(1.0), 1.0, &mut rng());
        layer.freeze_coordinates();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = tape.constant(Tensor::zeros(2, 4));
        let a = tape.constant(d.clone());
        // force phi_x = +1 by a huge positive bias on coord_in then clipping
        let (xo, _) = layer.forward(&mut tape, &g, xv, hv, a).unwrap();
        assert_eq!(tape.value(xo), &x);

        let mut unit = layer.clone();
        unit.coord_out.weight = Param::new("l.coord_out.w", Tensor::full(4, 1, 1e6));
        unit.coord_in.bias = Param::new("l.coord_in.b", Tensor::full(1, 4, 10.0));
        unit.coord_in.w_recv = Param::new("l.coord_in.w_recv", Tensor::zeros(4, 4));
        unit.coord_in.w_send = Param::new("l.coord_in.w_send", Tensor::zeros(4, 4));
        unit.coord_in.w_edge = Param::new("l.coord_in.w_edge", Tensor::zeros(2, 4));
        let out = egcl_forward(
            &PointCloudState::new(x.clone(), Tensor::zeros(2, 4)).unwrap(),
            &unit,
            Some(&d),
        )
        .unwrap();
        let expected0 = [-3.0 / 6.0, -4.0 / 6.0, 0.0];
        for a in 0..3 {
            assert!((out.x.get(0, a) - expected0[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coordinate_head_is_a_fixed_point() {
        let mut p = EgnnParams::<f64>::new("n", &audit_config(3, 2, 8, 3), &mut rng());
        for l in &mut p.layers {
            l.freeze_coordinates();
        }
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [2.0, 0.0, -0.7]]);
        let s = PointCloudState::new(x.clone(), Tensor::full(3, 3, 0.5)).unwrap();
        let out = p.apply(&s, None).unwrap();
        assert_eq!(out.x, x);
    }

    #[test]
    fn single_node_uses_empty_sums() {
        let layer = EgclParams::<f64>::new("l", 4, Some(100.0), 1.0, &mut rng());
        let s = PointCloudState::new(
            Tensor::from_rows(&[[1.0, 2.0, 3.0]]),
            Tensor::full(1, 4, 0.3),
        )
        .unwrap();
        let out = egcl_forward(&s, &layer, None).unwrap();
        assert_eq!(out.x, s.x);
        // h' = phi_h(h, 0)
        let mut tape = Tape::new();
        let h = tape.constant(s.h.clone());
        let z = tape.constant(Tensor::zeros(1, 4));
        let hn = tape.concat(&[h, z]).unwrap();
        let hn = layer.node_in.forward(&mut tape, hn).unwrap();
        let hn = tape.silu(hn);
        let hn = layer.node_out.forward(&mut tape, hn).unwrap();
        assert_eq!(tape.value(hn), &out.h);
    }

    #[test]
    fn identity_network_with_no_layers() {
        let p = EgnnParams::<f64> {
            embed: Linear::identity("e", 4),
            layers: vec![],
            head: Linear::identity("h", 4),
        };
        let s = PointCloudState::new(
            Tensor::from_rows(&[[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]),
            Tensor::from_fn(2, 4, |i, j| (i + j) as f64),
        )
        .unwrap();
        assert_eq!(p.apply(&s, None).unwrap(), s);
    }

    #[test]
    fn width_mismatch_names_both() {
        let p = EgnnParams::<f64>::new("n", &EgnnConfig::new(3, 2, 8, 1), &mut rng());
        let s = PointCloudState::new(Tensor::zeros(2, 3), Tensor::zeros(2, 2)).unwrap();
        match p.apply(&s, None) {
            Err(Error::WidthMismatch {
                expected: 3,
                actual: 2,
                ..
            }) => {}
            other => panic!("{other:?}"),
        }
        // appending one extra scalar satisfies the contract
        let extra = Tensor::zeros(2, 1);
        assert!(p.apply(&s, Some(&extra)).is_ok());
    }

    #[test]
    fn translation_moves_outputs_exactly() {
        let p = EgnnParams::<f64>::new("n", &audit_config(3, 2, 8, 2), &mut rng());
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [2.0, 0.0, -0.7]]);
        let h = Tensor::full(3, 3, 0.2);
        let a = p
            .apply(&PointCloudState::new(x.clone(), h.clone()).unwrap(), None)
            .unwrap();
        let t = [0.5, -2.0, 1.25];
        let b = p
            .apply(
                &PointCloudState::new(geometry::transform(&x, &geometry::IDENTITY, t), h).unwrap(),
                None,
            )
            .unwrap();
        assert!(b.x.max_abs_diff(&geometry::transform(&a.x, &geometry::IDENTITY, t)) < 1e-12);
        assert!(b.h.max_abs_diff(&a.h) < 1e-12);
    }

    #[test]
    fn four_layer_audit_rotations_and_reflections() {
        let mut r = rng();
        let p = EgnnParams::<f64>::new("n", &audit_config(5, 3, 16, 4), &mut r);
        let proper = equivariance_audit(&p, 8, 100, false, &mut r).unwrap();
        assert!(proper.max() < 1e-6, "{proper:?}");
        let improper = equivariance_audit(&p, 8, 20, true, &mut r).unwrap();
        assert!(improper.max() < 1e-6, "{improper:?}");
    }

    #[test]
    fn identity_transform_has_zero_deviation() {
        let p = EgnnParams::<f64>::new("n", &audit_config(3, 3, 8, 2), &mut rng());
        let s = PointCloudState::new(
            Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]),
            Tensor::full(2, 3, 0.1),
        )
        .unwrap();
        let a = p.apply(&s, None).unwrap();
        let moved = PointCloudState::new(
            geometry::transform(&s.x, &geometry::IDENTITY, [0.0; 3]),
            s.h.clone(),
        )
        .unwrap();
        assert_eq!(p.apply(&moved, None).unwrap(), a);
    }

    #[test]
    fn permutation_equivariance() {
        let p = EgnnParams::<f64>::new("n", &audit_config(2, 2, 8, 2), &mut rng());
        let x = Tensor::from_rows(&[
            [0.1, 0.2, 0.3],
            [1.0, -1.0, 0.5],
            [2.0, 0.0, -0.7],
            [0.0, 0.9, 0.1],
        ]);
        let h = Tensor::from_fn(4, 2, |i, j| (i as f64) * 0.3 - j as f64);
        let perm = [2usize, 0, 3, 1];
        let a = p
            .apply(&PointCloudState::new(x.clone(), h.clone()).unwrap(), None)
            .unwrap();
        let px = Tensor::from_fn(4, 3, |i, c| x.get(perm[i], c));
        let ph = Tensor::from_fn(4, 2, |i, c| h.get(perm[i], c));
        let b = p
            .apply(&PointCloudState::new(px, ph).unwrap(), None)
            .unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((b.x.get(i, c) - a.x.get(perm[i], c)).abs() < 1e-12);
            }
            for c in 0..2 {
                assert!((b.h.get(i, c) - a.h.get(perm[i], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut p = EgnnParams::<f64>::new("n", &audit_config(3, 2, 6, 1), &mut rng());
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.4, 0.0, -0.7]]);
        let h = Tensor::from_fn(3, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let graph = GraphBatch::single(3).unwrap();
        let report = finite_difference_check(
            &mut p,
            |m, tape| {
                let xv = tape.constant(x.clone());
                let hv = tape.constant(h.clone());
                let (xo, ho) = m.forward(tape, &graph, xv, hv, None)?;
                let a = tape.square(xo);
                let a = tape.sum(a);
                let b = tape.square(ho);
                let b = tape.mean(b);
                tape.add(a, b)
            },
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn runs_in_single_precision() {
        let p = EgnnParams::<f32>::new("n", &audit_config(3, 2, 8, 2), &mut rng());
        let s = PointCloudState::new(
            Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
            Tensor::full(3, 3, 0.1f32),
        )
        .unwrap();
        let out = p.apply(&s, None).unwrap();
        assert!(out.x.all_finite() && out.h.all_finite());
    }
}
