//! Shared ID embeddings, per-view shallow propagation with layer averaging,
//! and mean fusion of the two views.
//!
//! Users and items are stacked into one node space `[users; items]`, so a view
//! is a single sparse operator and a layer is one sparse product.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{MagnetError, Result};
use crate::graph::{View, ViewGraph};
use crate::scalar::Scalar;
use crate::tensor::{Csr, Matrix};

/// Uniform `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-a..=a))).collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub users: Matrix<T>,
    pub items: Matrix<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn init<R: Rng + ?Sized>(num_users: usize, num_items: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            users: glorot_uniform(num_users, dim, rng),
            items: glorot_uniform(num_items, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    /// `[users; items]` as one matrix.
    pub fn stacked(&self) -> Matrix<T> {
        let mut data = self.users.data().to_vec();
        data.extend_from_slice(self.items.data());
        Matrix::from_vec(self.users.rows() + self.items.rows(), self.dim(), data)
    }
}

/// Per-layer activations and their average for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings<T> {
    pub view: View,
    pub num_users: usize,
    /// `e^(0) .. e^(L)` over stacked nodes.
    pub layers: Vec<Matrix<T>>,
    /// Layer average over stacked nodes.
    pub z: Matrix<T>,
}

impl<T: Scalar> ViewEmbeddings<T> {
    pub fn user(&self, u: usize) -> &[T] {
        self.z.row(u)
    }

    pub fn item(&self, i: usize) -> &[T] {
        self.z.row(self.num_users + i)
    }
}

/// Propagation operators for `layers` layers. Without a fanout every layer
/// uses the full normalized adjacency; with a fanout each node keeps a uniform
/// sample of at most `fanout` neighbors per layer and coefficients are
/// recomputed from the sampled neighborhood sizes.
pub fn layer_operators<T: Scalar, R: Rng + ?Sized>(
    graph: &ViewGraph,
    layers: usize,
    fanout: Option<usize>,
    rng: &mut R,
) -> Vec<Rc<Csr<T>>> {
    match fanout {
        None => {
            let full = Rc::new(graph.propagation_matrix());
            vec![full; layers]
        }
        Some(f) => {
            let adj = graph.adjacency();
            (0..layers).map(|_| Rc::new(sampled_operator(&adj, f, rng))).collect()
        }
    }
}

fn sampled_operator<T: Scalar, R: Rng + ?Sized>(adj: &[Vec<usize>], fanout: usize, rng: &mut R) -> Csr<T> {
    let sampled: Vec<Vec<usize>> = adj
        .iter()
        .map(|nbrs| {
            if nbrs.len() <= fanout {
                nbrs.clone()
            } else {
                let mut pick: Vec<usize> = sample(rng, nbrs.len(), fanout).into_iter().map(|k| nbrs[k]).collect();
                pick.sort_unstable();
                pick
            }
        })
        .collect();
    let lists: Vec<Vec<(usize, T)>> = sampled
        .iter()
        .map(|nbrs| {
            nbrs.iter()
                .map(|&m| (m, T::of(1.0 / ((nbrs.len() * sampled[m].len()) as f64).sqrt())))
                .collect()
        })
        .collect();
    Csr::from_row_lists(adj.len(), &lists)
}

/// Applies the per-layer operators to `e0` and returns the layer average.
/// Also returns the individual layer nodes.
pub fn propagate_on_tape<T: Scalar>(tape: &mut Tape<T>, ops: &[Rc<Csr<T>>], e0: Var) -> (Var, Vec<Var>) {
    let mut layers = vec![e0];
    let mut cur = e0;
    let mut sum = e0;
    for op in ops {
        cur = tape.spmm(op.clone(), cur);
        layers.push(cur);
        sum = tape.add(sum, cur);
    }
    let avg = if ops.is_empty() {
        e0
    } else {
        tape.scale(sum, T::one() / T::from_usize(ops.len() + 1).unwrap())
    };
    (avg, layers)
}

/// Mean of the two view averages; a single view passes through unchanged.
pub fn fuse_on_tape<T: Scalar>(tape: &mut Tape<T>, ui: Var, uig: Option<Var>) -> Var {
    match uig {
        None => ui,
        Some(b) => {
            let s = tape.add(ui, b);
            tape.scale(s, T::of(0.5))
        }
    }
}

/// Forward propagation of one view outside of training.
pub fn propagate_view<T: Scalar, R: Rng + ?Sized>(
    graph: &ViewGraph,
    emb: &EmbeddingTable<T>,
    layers: usize,
    fanout: Option<usize>,
    rng: &mut R,
) -> Result<ViewEmbeddings<T>> {
    if fanout == Some(0) {
        return Err(MagnetError::Parameter("fanout must be at least 1".into()));
    }
    if emb.users.rows() != graph.num_users || emb.items.rows() != graph.num_items {
        return Err(MagnetError::Shape("embedding table does not match the graph".into()));
    }
    let ops = layer_operators(graph, layers, fanout, rng);
    let mut tape = Tape::new();
    let e0 = tape.constant(emb.stacked());
    let (z, nodes) = propagate_on_tape(&mut tape, &ops, e0);
    Ok(ViewEmbeddings {
        view: graph.view,
        num_users: graph.num_users,
        layers: nodes.iter().map(|&v| tape.value(v).clone()).collect(),
        z: tape.value(z).clone(),
    })
}

pub fn fuse_views<T: Scalar>(ui: &ViewEmbeddings<T>, uig: Option<&ViewEmbeddings<T>>) -> Result<Matrix<T>> {
    let Some(b) = uig else {
        return Ok(ui.z.clone());
    };
    if ui.z.shape() != b.z.shape() {
        return Err(MagnetError::Shape(format!("view shapes {:?} and {:?}", ui.z.shape(), b.z.shape())));
    }
    let mut tape = Tape::new();
    let x = tape.constant(ui.z.clone());
    let y = tape.constant(b.z.clone());
    let z = fuse_on_tape(&mut tape, x, Some(y));
    Ok(tape.value(z).clone())
}
