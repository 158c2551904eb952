//! Point-cloud helpers: centre-of-gravity projection, rigid motions and the
//! fully connected batch graph used by every network.

use std::sync::Arc;

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Process-wide fault switches for exercising the self-check battery.
#[doc(hidden)]
pub mod fault {
    use std::sync::atomic::{AtomicBool, Ordering};

    static BROKEN_COG: AtomicBool = AtomicBool::new(false);

    /// When set, every centre-of-gravity projection returns its input unchanged.
    pub fn set_broken_cog(on: bool) {
        BROKEN_COG.store(on, Ordering::SeqCst);
    }

    pub fn broken_cog() -> bool {
        BROKEN_COG.load(Ordering::Relaxed)
    }
}

pub type Rotation = [[f64; 3]; 3];

pub const IDENTITY: Rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Haar-uniform orthogonal matrix from the QR factorisation of a Gaussian
/// matrix (with the sign of `R`'s diagonal folded into `Q`).
///
/// `proper = true` yields det = +1, otherwise det = -1.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, proper: bool) -> Rotation {
    let g = Matrix3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for c in 0..3 {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    let want = if proper { 1.0 } else { -1.0 };
    if q.determinant() * want < 0.0 {
        q.column_mut(2).neg_mut();
    }
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = q[(i, j)];
        }
    }
    out
}

pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    random_orthogonal(rng, true)
}

pub fn determinant(r: &Rotation) -> f64 {
    Matrix3::from_fn(|i, j| r[i][j]).determinant()
}

/// `x_i -> R x_i + t` for every row of an `[N, 3]` tensor.
pub fn transform<T: Scalar>(points: &Tensor<T>, rot: &Rotation, shift: [f64; 3]) -> Tensor<T> {
    let n = points.rows();
    Tensor::from_fn(n, 3, |i, a| {
        let mut acc = T::of(shift[a]);
        for (b, &r) in rot[a].iter().enumerate() {
            acc += T::of(r) * points.get(i, b);
        }
        acc
    })
}

pub fn rotate<T: Scalar>(points: &Tensor<T>, rot: &Rotation) -> Tensor<T> {
    transform(points, rot, [0.0; 3])
}

pub fn centroid<T: Scalar>(points: &Tensor<T>) -> [T; 3] {
    let n = points.rows().max(1);
    let mut c = [T::zero(); 3];
    for i in 0..points.rows() {
        for (a, ca) in c.iter_mut().enumerate() {
            *ca += points.get(i, a);
        }
    }
    c.map(|v| v / T::of(n as f64))
}

/// Subtract the mean row, placing the points on the zero-CoG subspace.
pub fn project_cog<T: Scalar>(points: &Tensor<T>) -> Tensor<T> {
    if fault::broken_cog() {
        return points.clone();
    }
    let c = centroid(points);
    Tensor::from_fn(points.rows(), 3, |i, a| points.get(i, a) - c[a])
}

/// Largest absolute per-axis centroid component.
pub fn cog_norm<T: Scalar>(points: &Tensor<T>) -> f64 {
    centroid(points)
        .iter()
        .fold(0.0, |m, v| m.max(v.as_f64().abs()))
}

/// `[rows, cols]` tensor of independent standard normal draws.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| {
        T::of(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Disjoint union of fully connected graphs (no self-edges).
///
/// Edges are ordered by graph, then receiver `i`, then sender `j`, which fixes
/// the summation order of every aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    node_graph: Arc<[usize]>,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
}

impl GraphBatch {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "graph sizes must be non-empty and >= 1, got {sizes:?}"
            )));
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut node_graph = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut base = 0;
        for (g, &n) in sizes.iter().enumerate() {
            offsets.push(base);
            node_graph.extend(std::iter::repeat_n(g, n));
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        src.push(base + i);
                        dst.push(base + j);
                    }
                }
            }
            base += n;
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            offsets,
            node_graph: node_graph.into(),
            src: src.into(),
            dst: dst.into(),
        })
    }

    pub fn single(n: usize) -> Result<Self> {
        Self::new(&[n])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn n_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn n_graphs(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    /// Receiving node of each edge.
    pub fn src(&self) -> &Arc<[usize]> {
        &self.src
    }

    /// Sending node of each edge.
    pub fn dst(&self) -> &Arc<[usize]> {
        &self.dst
    }

    pub fn node_graph(&self) -> &Arc<[usize]> {
        &self.node_graph
    }

    /// Per-graph mean of the rows of `x`, broadcast back to every node.
    pub fn node_means<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let sums = tape.scatter_add_rows(x, self.node_graph.clone(), self.n_graphs())?;
        let inv = Tensor::from_fn(self.n_graphs(), 1, |g, _| {
            T::one() / T::of(self.sizes[g] as f64)
        });
        let inv = tape.constant(inv);
        let means = tape.mul(sums, inv)?;
        tape.gather_rows(means, self.node_graph.clone())
    }

    /// Per-graph centre-of-gravity removal recorded on the tape.
    pub fn project_cog<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if fault::broken_cog() {
            return Ok(x);
        }
        let m = self.node_means(tape, x)?;
        tape.sub(x, m)
    }

    /// Per-graph centre-of-gravity removal on values.
    pub fn project_cog_values<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let parts: Vec<Tensor<T>> = self.split(x).iter().map(project_cog).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::vcat(&refs).expect("blocks share a width")
    }

    /// Largest per-graph centroid component.
    pub fn max_cog<T: Scalar>(&self, x: &Tensor<T>) -> f64 {
        self.split(x).iter().map(cog_norm).fold(0.0, f64::max)
    }

    /// Split a stacked `[n_nodes, c]` tensor back into per-graph blocks.
    pub fn split<T: Scalar>(&self, t: &Tensor<T>) -> Vec<Tensor<T>> {
        self.offsets
            .iter()
            .zip(&self.sizes)
            .map(|(&o, &n)| t.slice_rows(o, o + n))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn project_cog_examples() {
        let p = Tensor::<f64>::from_rows(&[[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]]);
        let c = project_cog(&p);
        assert_eq!(c.values(), &[-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        assert_eq!(project_cog(&c), c);
        let single = Tensor::<f64>::from_rows(&[[4.0, -2.0, 7.5]]);
        assert_eq!(project_cog(&single).values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rotations_are_orthogonal_with_requested_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for proper in [true, false] {
            for _ in 0..20 {
                let r = random_orthogonal(&mut rng, proper);
                let m = Matrix3::from_fn(|i, j| r[i][j]);
                assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-12);
                let want = if proper { 1.0 } else { -1.0 };
                assert!((determinant(&r) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_graph_edges() {
        let g = GraphBatch::new(&[1, 3]).unwrap();
        assert_eq!(g.n_nodes(), 4);
        assert_eq!(g.n_edges(), 6);
        assert_eq!(&g.src()[..2], &[1, 1]);
        assert_eq!(&g.dst()[..2], &[2, 3]);
        assert!(GraphBatch::new(&[2, 0]).is_err());
    }

    #[test]
    fn tape_projection_matches_value_projection() {
        let g = GraphBatch::new(&[2, 3]).unwrap();
        let x = Tensor::<f64>::from_fn(5, 3, |i, a| (i * 3 + a) as f64 * 0.7 - 1.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = g.project_cog(&mut tape, v).unwrap();
        let parts = g.split(tape.value(p));
        for (part, orig) in parts.iter().zip(g.split(&x)) {
            assert!(part.max_abs_diff(&project_cog(&orig)) < 1e-15);
        }
    }
}
