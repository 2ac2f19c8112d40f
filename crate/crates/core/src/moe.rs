//! Triplet-template expert pool, modality cues, dense routing, Top-K
//! activation and aggregation.
//!
//! The per-token functions here are a direct, unbatched reading of the scoring
//! path. The batched training path in [`crate::model`] is checked against them.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{entropy, softmax_in_place};
use crate::data::{FeatureMatrix, InteractionSet};
use crate::encoder::glorot_uniform;
use crate::error::{MagnetError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Csr, Matrix};

/// Evidence sources, in global triplet order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    B,
    A,
    S,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::B, Group::A, Group::S];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Dom,
    Bal,
    Com,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Dom, Family::Bal, Family::Com];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.2,
            delta: 0.5,
            epsilon: 0.05,
        }
    }
}

impl TemplateParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MagnetError::Parameter(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("alpha", self.alpha)?;
        unit("beta", self.beta)?;
        unit("delta", self.delta)?;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0 / 3.0) {
            return Err(MagnetError::Parameter(format!("epsilon = {} is outside (0, 1/3)", self.epsilon)));
        }
        Ok(())
    }
}

/// Canonical `[anchor, aux1, aux2]` weights of one template.
pub fn evaluate_template(family: Family, p: &TemplateParams) -> Result<[f64; 3]> {
    p.validate()?;
    Ok(match family {
        Family::Dom => {
            let (a, r) = (p.alpha, 1.0 - p.alpha);
            [r * 0.5 + a, r * 0.25, r * 0.25]
        }
        Family::Bal => {
            let b = p.beta;
            [1.0 / 3.0 + b / 6.0, 1.0 / 3.0 - b / 12.0, 1.0 / 3.0 - b / 12.0]
        }
        Family::Com => {
            let e = p.epsilon;
            [e, (1.0 - e) * p.delta, (1.0 - e) * (1.0 - p.delta)]
        }
    })
}

/// Places a canonical triplet in global `[B, A, S]` order. Auxiliaries keep
/// the global order with the anchor removed.
pub fn to_global(group: Group, canonical: [f64; 3]) -> [f64; 3] {
    let [anchor, x1, x2] = canonical;
    match group {
        Group::B => [anchor, x1, x2],
        Group::A => [x1, anchor, x2],
        Group::S => [x1, x2, anchor],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub group: Group,
    pub family: Family,
    /// Global-order triplet `[w_B, w_A, w_S]`.
    pub triplet: [f64; 3],
}

/// Expert `e = (3·group + family)·replicas + replica`.
pub fn expert_specs(p: &TemplateParams, replicas: usize) -> Result<Vec<ExpertSpec>> {
    if replicas == 0 {
        return Err(MagnetError::Parameter("expert replication factor must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(9 * replicas);
    for group in Group::ALL {
        for family in Family::ALL {
            let triplet = to_global(group, evaluate_template(family, p)?);
            out.extend(std::iter::repeat_n(ExpertSpec { group, family, triplet }, replicas));
        }
    }
    Ok(out)
}

/// Affine map stored as `w: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: glorot_uniform(input, output, rng),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.w.rows(), "affine input width");
        let mut out = self.b.data().to_vec();
        for (k, &xk) in x.iter().enumerate() {
            if xk == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.w.row(k)) {
                *o += xk * w;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPool<T> {
    pub specs: Vec<ExpertSpec>,
    /// Per expert: `2d → d`.
    pub transforms: Vec<Affine<T>>,
}

impl<T: Scalar> ExpertPool<T> {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn group_of(&self, e: usize) -> Group {
        self.specs[e].group
    }

    pub fn family_of(&self, e: usize) -> Family {
        self.specs[e].family
    }
}

pub fn instantiate_pool<T: Scalar, R: Rng + ?Sized>(
    p: &TemplateParams,
    d: usize,
    replicas: usize,
    rng: &mut R,
) -> Result<ExpertPool<T>> {
    let specs = expert_specs(p, replicas)?;
    let transforms = specs.iter().map(|_| Affine::init(2 * d, d, rng)).collect();
    Ok(ExpertPool { specs, transforms })
}

/// Item and user cues for both content modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityCues<T> {
    pub item_a: Matrix<T>,
    pub item_s: Matrix<T>,
    pub user_a: Matrix<T>,
    pub user_s: Matrix<T>,
    /// Users with no training items; their cues are zero.
    pub cold_users: Vec<usize>,
}

/// Row-stochastic `users × items` operator averaging each training history.
pub fn history_mean_operator<T: Scalar>(train: &InteractionSet) -> Csr<T> {
    let lists: Vec<Vec<(usize, T)>> = train
        .histories()
        .iter()
        .map(|h| {
            let w = T::one() / T::from_usize(h.len().max(1)).unwrap();
            h.iter().map(|&i| (i, w)).collect()
        })
        .collect();
    Csr::from_row_lists(train.num_items(), &lists)
}

pub fn feature_matrix<T: Scalar>(f: &FeatureMatrix) -> Matrix<T> {
    Matrix::from_vec(f.rows, f.dim, f.values.iter().map(|&v| T::of(v as f64)).collect())
}

pub fn compute_modality_cues<T: Scalar>(
    feat_a: &FeatureMatrix,
    feat_s: &FeatureMatrix,
    train: &InteractionSet,
    proj_a: &Affine<T>,
    proj_s: &Affine<T>,
) -> Result<ModalityCues<T>> {
    for f in [feat_a, feat_s] {
        if f.rows != train.num_items() {
            return Err(MagnetError::Shape(format!(
                "{:?} features have {} rows for {} items",
                f.modality,
                f.rows,
                train.num_items()
            )));
        }
    }
    let project = |f: &FeatureMatrix, p: &Affine<T>| {
        let x = feature_matrix::<T>(f);
        let mut out = x.matmul(&p.w);
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(p.b.data()) {
                *o += b;
            }
        }
        out
    };
    let item_a = project(feat_a, proj_a);
    let item_s = project(feat_s, proj_s);
    let hist = history_mean_operator::<T>(train);
    Ok(ModalityCues {
        user_a: hist.spmm(&item_a),
        user_s: hist.spmm(&item_s),
        item_a,
        item_s,
        cold_users: (0..train.num_users()).filter(|&u| train.history(u).is_empty()).collect(),
    })
}

/// `softmax(W·[z_u; z_i] + b)`.
pub fn route_dense<T: Scalar>(z_u: &[T], z_i: &[T], router: &Affine<T>) -> Vec<T> {
    let q: Vec<T> = z_u.iter().chain(z_i).copied().collect();
    let mut logits = router.apply(&q);
    softmax_in_place(&mut logits);
    logits
}

/// Indices of the `k` largest entries, ties to the smaller index, in
/// descending probability order.
pub fn topk_indices<T: Scalar>(pi: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pi.len()).collect();
    idx.sort_by(|&a, &b| pi[b].partial_cmp(&pi[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn topk_renormalize<T: Scalar>(pi: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    if k == 0 || k > pi.len() {
        return Err(MagnetError::Parameter(format!("top_k = {k} must lie in 1..={}", pi.len())));
    }
    let gamma = topk_indices(pi, k);
    let mass: T = gamma.iter().map(|&e| pi[e]).sum();
    let weights = gamma.iter().map(|&e| pi[e] / mass).collect();
    Ok((gamma, weights))
}

/// Everything one `(u, i)` token needs from the encoder and cue stage.
#[derive(Clone, Copy, Debug)]
pub struct TokenInputs<'a, T> {
    pub z_u: &'a [T],
    pub z_i: &'a [T],
    pub a_u: &'a [T],
    pub s_u: &'a [T],
    pub a_i: &'a [T],
    pub s_i: &'a [T],
}

impl<'a, T: Scalar> TokenInputs<'a, T> {
    pub fn gather(z: &'a Matrix<T>, num_users: usize, cues: &'a ModalityCues<T>, u: usize, i: usize) -> Self {
        Self {
            z_u: z.row(u),
            z_i: z.row(num_users + i),
            a_u: cues.user_a.row(u),
            s_u: cues.user_s.row(u),
            a_i: cues.item_a.row(i),
            s_i: cues.item_s.row(i),
        }
    }
}

/// `w_B·z + w_A·h^A + w_S·h^S`.
pub fn triplet_mix<T: Scalar>(w: [T; 3], z: &[T], a: &[T], s: &[T]) -> Vec<T> {
    z.iter().zip(a).zip(s).map(|((&z, &a), &s)| w[0] * z + w[1] * a + w[2] * s).collect()
}

/// `tanh(W_e·[x_u; x_i] + b_e)`.
pub fn expert_forward<T: Scalar>(e: usize, x: &TokenInputs<'_, T>, pool: &ExpertPool<T>) -> Vec<T> {
    let w = pool.specs[e].triplet.map(T::of);
    expert_forward_with(w, &pool.transforms[e], x)
}

pub fn expert_forward_with<T: Scalar>(w: [T; 3], transform: &Affine<T>, x: &TokenInputs<'_, T>) -> Vec<T> {
    let mut input = triplet_mix(w, x.z_u, x.a_u, x.s_u);
    input.extend(triplet_mix(w, x.z_i, x.a_i, x.s_i));
    transform.apply(&input).into_iter().map(|v| v.tanh()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingResult<T> {
    pub pi: Vec<T>,
    pub gamma: Vec<usize>,
    pub weights: Vec<T>,
    pub s: Vec<T>,
    pub score: T,
}

impl<T: Scalar> RoutingResult<T> {
    pub fn entropy(&self) -> T {
        entropy(&self.pi)
    }
}

pub fn score_pair<T: Scalar>(
    x: &TokenInputs<'_, T>,
    pool: &ExpertPool<T>,
    router: &Affine<T>,
    score: &Affine<T>,
    k: usize,
) -> Result<RoutingResult<T>> {
    let pi = route_dense(x.z_u, x.z_i, router);
    let (gamma, weights) = topk_renormalize(&pi, k)?;
    let mut s = vec![T::zero(); x.z_u.len()];
    for (&e, &w) in gamma.iter().zip(&weights) {
        for (acc, v) in s.iter_mut().zip(expert_forward(e, x, pool)) {
            *acc += w * v;
        }
    }
    let y = score.apply(&s)[0];
    Ok(RoutingResult {
        pi,
        gamma,
        weights,
        s,
        score: y,
    })
}
