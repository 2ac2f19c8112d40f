//! The full scoring model: parameters, batched tape forward, and frozen
//! inference.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{FeatureMatrix, InteractionSet};
use crate::encoder::{fuse_on_tape, layer_operators, propagate_on_tape, EmbeddingTable};
use crate::error::{MagnetError, Result};
use crate::graph::{build_view_graph, InducedEdges, View, ViewGraph};
use crate::moe::{
    expert_specs, feature_matrix, history_mean_operator, topk_indices, Affine, ExpertPool, ModalityCues,
    TemplateParams, TokenInputs,
};
use crate::scalar::Scalar;
use crate::tensor::{Csr, Matrix};

/// How the pair representation is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Fixed triplet templates with Top-K routing.
    Moe,
    /// Per-expert trainable triplets projected onto the simplex.
    FreeTemplates,
    /// A single head over `[z; h^A; h^S]` of both sides, no routing.
    NoMoe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub fanout: Option<usize>,
    pub replicas: usize,
    pub top_k: usize,
    pub templates: TemplateParams,
    pub dropout: f64,
    pub dual_view: bool,
    pub fusion: FusionMode,
    /// Start the router at zero so every token is routed uniformly.
    #[serde(default)]
    pub uniform_router: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            fanout: None,
            replicas: 1,
            top_k: 4,
            templates: TemplateParams::default(),
            dropout: 0.1,
            dual_view: true,
            fusion: FusionMode::Moe,
            uniform_router: false,
        }
    }
}

impl ModelConfig {
    pub fn experts(&self) -> usize {
        9 * self.replicas
    }

    pub fn validate(&self) -> Result<()> {
        self.templates.validate()?;
        if self.embed_dim == 0 {
            return Err(MagnetError::Parameter("embed_dim must be at least 1".into()));
        }
        if self.replicas == 0 {
            return Err(MagnetError::Parameter("experts must be a positive multiple of 9".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts() {
            return Err(MagnetError::Parameter(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k,
                self.experts()
            )));
        }
        if self.fanout == Some(0) {
            return Err(MagnetError::Parameter("fanout must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MagnetError::Parameter(format!("dropout = {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Graphs, features and history pooling for one training split.
#[derive(Clone, Debug)]
pub struct ModelInputs<T> {
    pub num_users: usize,
    pub num_items: usize,
    pub ui: ViewGraph,
    /// Present in dual-view mode.
    pub uig: Option<ViewGraph>,
    /// Whether the augmented view actually adds edges.
    pub has_induced: bool,
    pub history: Rc<Csr<T>>,
    pub features_a: Rc<Matrix<T>>,
    pub features_s: Rc<Matrix<T>>,
    ui_full: Rc<Csr<T>>,
    uig_full: Option<Rc<Csr<T>>>,
}

/// Per-layer operators of both views for one forward pass.
#[derive(Clone, Debug)]
pub struct ViewOps<T> {
    pub ui: Vec<Rc<Csr<T>>>,
    pub uig: Option<Vec<Rc<Csr<T>>>>,
}

impl<T: Scalar> ModelInputs<T> {
    pub fn new(
        train: &InteractionSet,
        induced: Option<&InducedEdges>,
        dual_view: bool,
        features_a: &FeatureMatrix,
        features_s: &FeatureMatrix,
    ) -> Result<Self> {
        for f in [features_a, features_s] {
            if f.rows != train.num_items() {
                return Err(MagnetError::Shape(format!(
                    "{:?} features have {} rows for {} items",
                    f.modality,
                    f.rows,
                    train.num_items()
                )));
            }
        }
        let ui = build_view_graph(train, None, View::UI);
        let uig = dual_view.then(|| build_view_graph(train, induced, View::UIG));
        let has_induced = uig.as_ref().is_some_and(|g| g.edges.len() > ui.edges.len());
        let ui_full = Rc::new(ui.propagation_matrix());
        let uig_full = uig.as_ref().map(|g| Rc::new(g.propagation_matrix()));
        Ok(Self {
            num_users: train.num_users(),
            num_items: train.num_items(),
            ui,
            uig,
            has_induced,
            history: Rc::new(history_mean_operator(train)),
            features_a: Rc::new(feature_matrix(features_a)),
            features_s: Rc::new(feature_matrix(features_s)),
            ui_full,
            uig_full,
        })
    }

    pub fn dual_view(&self) -> bool {
        self.uig.is_some()
    }

    /// Full-graph operators (evaluation and fanout-free training).
    pub fn full_ops(&self, layers: usize) -> ViewOps<T> {
        ViewOps {
            ui: vec![self.ui_full.clone(); layers],
            uig: self.uig_full.as_ref().map(|m| vec![m.clone(); layers]),
        }
    }

    pub fn sampled_ops<R: Rng + ?Sized>(&self, layers: usize, fanout: Option<usize>, rng: &mut R) -> ViewOps<T> {
        if fanout.is_none() {
            return self.full_ops(layers);
        }
        ViewOps {
            ui: layer_operators(&self.ui, layers, fanout, rng),
            uig: self.uig.as_ref().map(|g| layer_operators(g, layers, fanout, rng)),
        }
    }
}

/// Inverted dropout with masks drawn from a counter-based hash, so a mask
/// depends only on `(seed, token, expert, column)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Dropout {
    fn keep(&self, token: usize, expert: usize, col: usize) -> bool {
        let h = mix64(mix64(mix64(self.seed ^ token as u64) ^ expert as u64) ^ col as u64);
        ((h >> 11) as f64 / (1u64 << 53) as f64) >= self.rate
    }

    fn mask<T: Scalar>(&self, tokens: &[usize], expert: usize, cols: usize) -> Matrix<T> {
        let scale = T::of(1.0 / (1.0 - self.rate));
        let mut m = Matrix::zeros(tokens.len(), cols);
        for (r, &t) in tokens.iter().enumerate() {
            for (c, o) in m.row_mut(r).iter_mut().enumerate() {
                if self.keep(t, expert, c) {
                    *o = scale;
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub num_users: usize,
    pub num_items: usize,
    pub embeddings: EmbeddingTable<T>,
    pub proj_a: Affine<T>,
    pub proj_s: Affine<T>,
    /// `2d → E`; absent without routing.
    pub router: Option<Affine<T>>,
    /// Experts; transforms are empty without routing.
    pub pool: ExpertPool<T>,
    /// Raw `E × 3` triplets under free templates.
    pub free_triplets: Option<Matrix<T>>,
    /// `6d → d` head without routing.
    pub fusion_head: Option<Affine<T>>,
    pub score: Affine<T>,
}

/// Parameter leaves of one model on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    user: Var,
    item: Var,
    proj_a: (Var, Var),
    proj_s: (Var, Var),
    router: Option<(Var, Var)>,
    experts: Vec<(Var, Var)>,
    triplets: Option<Var>,
    fusion: Option<(Var, Var)>,
    score: (Var, Var),
}

/// Encoder outputs over stacked `[users; items]` nodes.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub z: Var,
    pub z_ui: Var,
    pub z_uig: Option<Var>,
    pub cue_a: Var,
    pub cue_s: Var,
}

#[derive(Clone, Debug)]
pub struct Scored {
    /// `n × 1` scores.
    pub y: Var,
    /// `n × E` dense routing, absent without routing.
    pub pi: Option<Var>,
    pub selection: Option<Rc<[Vec<usize>]>>,
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        num_users: usize,
        num_items: usize,
        dim_a: usize,
        dim_s: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let e = config.experts();
        let embeddings = EmbeddingTable::init(num_users, num_items, d, rng);
        let proj_a = Affine::init(dim_a, d, rng);
        let proj_s = Affine::init(dim_s, d, rng);
        let specs = expert_specs(&config.templates, config.replicas)?;
        let routed = config.fusion != FusionMode::NoMoe;
        let mut router = routed.then(|| Affine::init(2 * d, e, rng));
        if config.uniform_router {
            if let Some(r) = router.as_mut() {
                r.w = Matrix::zeros(2 * d, e);
            }
        }
        let transforms = if routed {
            specs.iter().map(|_| Affine::init(2 * d, d, rng)).collect()
        } else {
            Vec::new()
        };
        let free_triplets = (config.fusion == FusionMode::FreeTemplates).then(|| {
            let data = specs.iter().flat_map(|s| s.triplet.map(T::of)).collect();
            Matrix::from_vec(e, 3, data)
        });
        let fusion_head = (!routed).then(|| Affine::init(6 * d, d, rng));
        let score = Affine::init(d, 1, rng);
        Ok(Self {
            config,
            num_users,
            num_items,
            embeddings,
            proj_a,
            proj_s,
            router,
            pool: ExpertPool { specs, transforms },
            free_triplets,
            fusion_head,
            score,
        })
    }

    pub fn experts(&self) -> usize {
        self.pool.len()
    }

    pub fn routed(&self) -> bool {
        self.router.is_some()
    }

    /// Every trainable matrix with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("user_emb".to_string(), &self.embeddings.users),
            ("item_emb".to_string(), &self.embeddings.items),
            ("proj_a.w".to_string(), &self.proj_a.w),
            ("proj_a.b".to_string(), &self.proj_a.b),
            ("proj_s.w".to_string(), &self.proj_s.w),
            ("proj_s.b".to_string(), &self.proj_s.b),
        ];
        if let Some(r) = &self.router {
            out.push(("router.w".into(), &r.w));
            out.push(("router.b".into(), &r.b));
        }
        for (e, t) in self.pool.transforms.iter().enumerate() {
            out.push((format!("expert.{e}.w"), &t.w));
            out.push((format!("expert.{e}.b"), &t.b));
        }
        if let Some(t) = &self.free_triplets {
            out.push(("triplets".into(), t));
        }
        if let Some(f) = &self.fusion_head {
            out.push(("fusion.w".into(), &f.w));
            out.push(("fusion.b".into(), &f.b));
        }
        out.push(("score.w".into(), &self.score.w));
        out.push(("score.b".into(), &self.score.b));
        out
    }

    /// Same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![
            &mut self.embeddings.users,
            &mut self.embeddings.items,
            &mut self.proj_a.w,
            &mut self.proj_a.b,
            &mut self.proj_s.w,
            &mut self.proj_s.b,
        ];
        if let Some(r) = &mut self.router {
            out.push(&mut r.w);
            out.push(&mut r.b);
        }
        for t in &mut self.pool.transforms {
            out.push(&mut t.w);
            out.push(&mut t.b);
        }
        if let Some(t) = &mut self.free_triplets {
            out.push(t);
        }
        if let Some(f) = &mut self.fusion_head {
            out.push(&mut f.w);
            out.push(&mut f.b);
        }
        out.push(&mut self.score.w);
        out.push(&mut self.score.b);
        out
    }

    pub fn num_coordinates(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let aff = |a: &Affine<T>| Affine {
            w: a.w.cast(),
            b: a.b.cast(),
        };
        Model {
            config: self.config.clone(),
            num_users: self.num_users,
            num_items: self.num_items,
            embeddings: EmbeddingTable {
                users: self.embeddings.users.cast(),
                items: self.embeddings.items.cast(),
            },
            proj_a: aff(&self.proj_a),
            proj_s: aff(&self.proj_s),
            router: self.router.as_ref().map(aff),
            pool: ExpertPool {
                specs: self.pool.specs.clone(),
                transforms: self.pool.transforms.iter().map(aff).collect(),
            },
            free_triplets: self.free_triplets.as_ref().map(Matrix::cast),
            fusion_head: self.fusion_head.as_ref().map(aff),
            score: aff(&self.score),
        }
    }

    /// Effective global-order triplet of expert `e`.
    pub fn triplet(&self, e: usize) -> [f64; 3] {
        match &self.free_triplets {
            Some(t) => {
                let p = crate::autograd::project_simplex(t.row(e));
                [p[0].f64(), p[1].f64(), p[2].f64()]
            }
            None => self.pool.specs[e].triplet,
        }
    }

    /// Pushes every parameter onto the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, m)| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter count");
        let user = next();
        let item = next();
        let proj_a = (next(), next());
        let proj_s = (next(), next());
        let router = self.router.as_ref().map(|_| (next(), next()));
        let experts = self.pool.transforms.iter().map(|_| (next(), next())).collect();
        let triplets = self.free_triplets.as_ref().map(|_| next());
        let fusion = self.fusion_head.as_ref().map(|_| (next(), next()));
        let score = (next(), next());
        Bound {
            vars,
            user,
            item,
            proj_a,
            proj_s,
            router,
            experts,
            triplets,
            fusion,
            score,
        }
    }

    pub fn encode(&self, tape: &mut Tape<T>, b: &Bound, inputs: &ModelInputs<T>, ops: &ViewOps<T>) -> Encoded {
        let e0 = tape.concat_rows(&[b.user, b.item]);
        let (z_ui, _) = propagate_on_tape(tape, &ops.ui, e0);
        let z_uig = ops.uig.as_ref().map(|o| propagate_on_tape(tape, o, e0).0);
        let z = fuse_on_tape(tape, z_ui, z_uig);
        let mut cue = |features: &Rc<Matrix<T>>, (w, bias): (Var, Var)| {
            let x = tape.constant(features.as_ref().clone());
            let h = tape.matmul(x, w);
            let items = tape.add_row(h, bias);
            let users = tape.spmm(inputs.history.clone(), items);
            tape.concat_rows(&[users, items])
        };
        let cue_a = cue(&inputs.features_a, b.proj_a);
        let cue_s = cue(&inputs.features_s, b.proj_s);
        Encoded {
            z,
            z_ui,
            z_uig,
            cue_a,
            cue_s,
        }
    }

    /// Scores the tokens `(users[k], items[k])`. With `frozen` the Top-K
    /// selection is taken as given instead of being read off the routing.
    #[allow(clippy::too_many_arguments)]
    pub fn score_tokens(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        enc: &Encoded,
        users: &[usize],
        items: &[usize],
        dropout: Option<Dropout>,
        frozen: Option<Rc<[Vec<usize>]>>,
    ) -> Result<Scored> {
        assert_eq!(users.len(), items.len(), "token lists must align");
        let n = users.len();
        if n == 0 {
            return Err(MagnetError::Empty("no tokens to score".into()));
        }
        let u_idx: Rc<[usize]> = users.into();
        let i_idx: Rc<[usize]> = items.iter().map(|&i| self.num_users + i).collect();
        let zu = tape.gather_rows(enc.z, u_idx.clone());
        let zi = tape.gather_rows(enc.z, i_idx.clone());
        let au = tape.gather_rows(enc.cue_a, u_idx.clone());
        let su = tape.gather_rows(enc.cue_s, u_idx);
        let ai = tape.gather_rows(enc.cue_a, i_idx.clone());
        let si = tape.gather_rows(enc.cue_s, i_idx);
        let d = self.config.embed_dim;
        let all: Vec<usize> = (0..n).collect();

        let Some((rw, rb)) = b.router else {
            let (fw, fb) = b.fusion.expect("fusion head without routing");
            let mut x = tape.concat_cols(&[zu, au, su, zi, ai, si]);
            if let Some(drop) = dropout {
                let m = tape.constant(drop.mask(&all, 0, 6 * d));
                x = tape.mul(x, m);
            }
            let h = tape.matmul(x, fw);
            let h = tape.add_row(h, fb);
            let h = tape.tanh(h);
            let y = tape.matmul(h, b.score.0);
            let y = tape.add_row(y, b.score.1);
            return Ok(Scored {
                y,
                pi: None,
                selection: None,
            });
        };

        let q = tape.concat_cols(&[zu, zi]);
        let logits = tape.matmul(q, rw);
        let logits = tape.add_row(logits, rb);
        let pi = tape.softmax_rows(logits);
        let selection: Rc<[Vec<usize>]> = match frozen {
            Some(s) => {
                if s.len() != n {
                    return Err(MagnetError::Shape(format!("frozen selection has {} rows for {n} tokens", s.len())));
                }
                s
            }
            None => {
                let p = tape.value(pi);
                (0..n).map(|r| topk_indices(p.row(r), self.config.top_k)).collect()
            }
        };
        let pit = tape.topk_renorm(pi, selection.clone());
        let trip = b.triplets.map(|t| tape.simplex_rows(t));

        let mut routed: Vec<Vec<usize>> = vec![Vec::new(); self.experts()];
        for (r, sel) in selection.iter().enumerate() {
            for &e in sel {
                routed[e].push(r);
            }
        }
        let mut s: Option<Var> = None;
        for (e, tokens) in routed.into_iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            let idx: Rc<[usize]> = tokens.into();
            let mut mix = |z: Var, a: Var, c: Var| {
                let parts = [z, a, c].map(|v| tape.gather_rows(v, idx.clone()));
                let scaled: Vec<Var> = parts
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| match trip {
                        Some(t) => tape.scale_by(v, t, 3 * e + k),
                        None => tape.scale(v, T::of(self.pool.specs[e].triplet[k])),
                    })
                    .collect();
                let x = tape.add(scaled[0], scaled[1]);
                tape.add(x, scaled[2])
            };
            let xu = mix(zu, au, su);
            let xi = mix(zi, ai, si);
            let mut x = tape.concat_cols(&[xu, xi]);
            if let Some(drop) = dropout {
                let m = tape.constant(drop.mask(&idx, e, 2 * d));
                x = tape.mul(x, m);
            }
            let (w, bias) = b.experts[e];
            let h = tape.matmul(x, w);
            let h = tape.add_row(h, bias);
            let h = tape.tanh(h);
            let g = tape.gather_col(pit, idx.clone(), e);
            let h = tape.mul_col(h, g);
            let h = tape.scatter_add_rows(h, idx, n);
            s = Some(match s {
                None => h,
                Some(acc) => tape.add(acc, h),
            });
        }
        let s = s.expect("at least one expert is active");
        let y = tape.matmul(s, b.score.0);
        let y = tape.add_row(y, b.score.1);
        Ok(Scored {
            y,
            pi: Some(pi),
            selection: Some(selection),
        })
    }

    /// Full-graph encoder outputs as plain matrices.
    pub fn freeze(&self, inputs: &ModelInputs<T>) -> Frozen<T> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &b, inputs, &inputs.full_ops(self.config.layers));
        Frozen {
            num_users: self.num_users,
            z: tape.value(enc.z).clone(),
            z_ui: tape.value(enc.z_ui).clone(),
            z_uig: enc.z_uig.map(|v| tape.value(v).clone()),
            cue_a: tape.value(enc.cue_a).clone(),
            cue_s: tape.value(enc.cue_s).clone(),
        }
    }

    pub fn scorer<'a>(&'a self, frozen: &'a Frozen<T>) -> Scorer<'a, T> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let enc = Encoded {
            z: tape.constant(frozen.z.clone()),
            z_ui: tape.constant(Matrix::zeros(0, 0)),
            z_uig: None,
            cue_a: tape.constant(frozen.cue_a.clone()),
            cue_s: tape.constant(frozen.cue_s.clone()),
        };
        let mark = tape.len();
        Scorer {
            model: self,
            tape,
            bound,
            enc,
            mark,
        }
    }
}

/// Encoder outputs of a fixed model over stacked `[users; items]` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen<T> {
    pub num_users: usize,
    pub z: Matrix<T>,
    pub z_ui: Matrix<T>,
    pub z_uig: Option<Matrix<T>>,
    pub cue_a: Matrix<T>,
    pub cue_s: Matrix<T>,
}

impl<T: Scalar> Frozen<T> {
    pub fn token(&self, u: usize, i: usize) -> TokenInputs<'_, T> {
        let it = self.num_users + i;
        TokenInputs {
            z_u: self.z.row(u),
            z_i: self.z.row(it),
            a_u: self.cue_a.row(u),
            s_u: self.cue_s.row(u),
            a_i: self.cue_a.row(it),
            s_i: self.cue_s.row(it),
        }
    }

    pub fn cues(&self) -> ModalityCues<T> {
        let split = |m: &Matrix<T>| {
            let d = m.cols();
            let (u, i) = m.data().split_at(self.num_users * d);
            (Matrix::from_vec(self.num_users, d, u.to_vec()), Matrix::from_vec(m.rows() - self.num_users, d, i.to_vec()))
        };
        let (user_a, item_a) = split(&self.cue_a);
        let (user_s, item_s) = split(&self.cue_s);
        ModalityCues {
            item_a,
            item_s,
            user_a,
            user_s,
            cold_users: Vec::new(),
        }
    }
}

/// Scores of a batch of tokens at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenScores<T> {
    pub y: Vec<T>,
    /// Dense routing, one row per token.
    pub pi: Option<Matrix<T>>,
    pub selection: Option<Vec<Vec<usize>>>,
}

/// Reusable inference state: parameters and encoder outputs are pushed once,
/// and each call only records the token-level ops.
pub struct Scorer<'a, T: Scalar> {
    model: &'a Model<T>,
    tape: Tape<T>,
    bound: Bound,
    enc: Encoded,
    mark: usize,
}

impl<T: Scalar> Scorer<'_, T> {
    pub fn score(&mut self, users: &[usize], items: &[usize]) -> Result<TokenScores<T>> {
        self.tape.truncate(self.mark);
        let out = self.model.score_tokens(&mut self.tape, &self.bound, &self.enc, users, items, None, None)?;
        let res = TokenScores {
            y: self.tape.value(out.y).data().to_vec(),
            pi: out.pi.map(|p| self.tape.value(p).clone()),
            selection: out.selection.map(|s| s.to_vec()),
        };
        self.tape.truncate(self.mark);
        Ok(res)
    }
}
