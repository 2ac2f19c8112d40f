//! Criterion 1: every worked example value, in one pass.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use magnet::data::{
    generate_synthetic, load_features, parse_interactions, sample_negatives, split_interactions, FeatureMatrix, InteractionSet,
    Modality, SplitRatios, SyntheticSpec,
};
use magnet::diagnostics::{mean_routing, routing_diagnostics};
use magnet::encoder::{fuse_views, propagate_view, EmbeddingTable, ViewEmbeddings};
use magnet::eval::{rank_items, user_metrics};
use magnet::fixtures::{micro_instance, micro_model_config, planted_split};
use magnet::graph::{build_view_graph, cosine, expand_candidates, InducedEdges, NeighborIndex, View};
use magnet::losses::{bpr_loss, confidence_loss, coverage_loss, info_nce, view_contrastive_loss, LossBreakdown, LossWeights};
use magnet::model::{Model, ModelConfig};
use magnet::moe::{
    compute_modality_cues, evaluate_template, expert_forward, expert_specs, route_dense, score_pair, to_global, topk_renormalize,
    triplet_mix, Affine, ExpertPool, ExpertSpec, Family, Group, TemplateParams, TokenInputs,
};
use magnet::schedule::{batch_entropy_stats, stage_weights, update_stage, ScheduleConfig, ScheduleState, WeightStrategy};
use magnet::tensor::Matrix;
use magnet::train::{build_objective, gradient_check, GradCheckOptions, LossConfig, Trainer, TrainerConfig};
use magnet::MagnetError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use crate::cli::{jsonl, magnet, planted, read_json, s, train};
use crate::{within, Checks, Outcome};

pub fn criterion() -> Outcome {
    let started = Instant::now();
    let mut c = Checks::default();
    data(&mut c);
    graph(&mut c);
    encoder(&mut c);
    moe(&mut c);
    schedule(&mut c);
    losses(&mut c);
    training(&mut c);
    evaluation(&mut c);
    diagnostics(&mut c);
    if let Err(e) = command_line(&mut c) {
        c.ok(&format!("command line: {e}"), false);
    }
    within(Duration::from_secs(10), started, c.outcome())
}

fn mem() -> &'static Path {
    Path::new("mem.tsv")
}

fn data(c: &mut Checks) {
    let mut text = String::new();
    for (u, n) in [("a", 5), ("b", 4), ("c", 2)] {
        for i in 0..n {
            text.push_str(&format!("{u}\t{i}\n"));
        }
    }
    c.ok("min-interaction filter keeps 2 users", parse_interactions(mem(), &text, 4).unwrap().interactions.num_users() == 2);
    let dup = parse_interactions(mem(), "u0\ti3\nu0\ti3\n", 1).unwrap();
    c.ok("duplicate pair kept once", dup.interactions.num_edges() == 1);

    let ten = InteractionSet::new(1, 20, (0..10).map(|i| (0, i)).collect()).unwrap();
    let sp = split_interactions(&ten, SplitRatios::default(), 3).unwrap();
    c.ok("10 edges split 8/1/1", (sp.train.num_edges(), sp.valid.len(), sp.test.len()) == (8, 1, 1));
    let hundred = InteractionSet::new(1, 200, (0..100).map(|i| (0, i)).collect()).unwrap();
    let a = split_interactions(&hundred, SplitRatios::default(), 11).unwrap();
    let b = split_interactions(&hundred, SplitRatios::default(), 11).unwrap();
    let d = split_interactions(&hundred, SplitRatios::default(), 12).unwrap();
    c.ok("same split seed gives the same bundle", a == b);
    let part = |x: &magnet::data::SplitBundle| {
        let mut v: Vec<(usize, u8)> = x.train.edges().iter().map(|e| (e.1, 0)).collect();
        v.extend(x.valid.iter().map(|e| (e.1, 1)));
        v.extend(x.test.iter().map(|e| (e.1, 2)));
        v.sort_unstable();
        v
    };
    c.ok("different split seed gives a different partition", part(&a) != part(&d));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let four = InteractionSet::new(1, 5, vec![(0, 0), (0, 1), (0, 2), (0, 3)]).unwrap();
    c.ok("forced complement negative", (0..50).all(|_| sample_negatives(0, &four, 1, &mut rng).unwrap() == vec![4]));
    let half = InteractionSet::new(1, 20, (0..10).map(|i| (0, 2 * i)).collect()).unwrap();
    c.ok(
        "negatives never in the history",
        (0..50).all(|_| sample_negatives(0, &half, 3, &mut rng).unwrap().iter().all(|&j| !half.contains(0, j))),
    );

    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("f.mgf");
    let f = FeatureMatrix::new(Modality::A, 6, 40, (0..240).map(|k| k as f32 * 0.5).collect()).unwrap();
    f.save(&path).unwrap();
    c.ok("feature header and payload round trip", load_features(&path, Modality::A, 6).map(|g| g.dim == 40 && g == f).unwrap_or(false));
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    c.ok("short payload is a truncation error", matches!(load_features(&path, Modality::A, 6), Err(MagnetError::Truncated { .. })));
    let nan = FeatureMatrix::new(Modality::S, 3, 2, vec![1.0, 2.0, 3.0, 4.0, f32::NAN, f32::NAN]);
    c.ok("NaN row names its row", matches!(nan, Err(MagnetError::NonFinite { row: 2, .. })));

    let clean = SyntheticSpec {
        noise: 0.0,
        ..Default::default()
    };
    let g = generate_synthetic(&clean).unwrap();
    c.ok("noise 0 keeps every edge in block", g.interactions.edges().iter().all(|&(u, i)| clean.user_block(u) == clean.item_block(i)));
    let within_block = (0..10u64).all(|seed| {
        let spec = SyntheticSpec {
            seed,
            ..Default::default()
        };
        let g = generate_synthetic(&spec).unwrap();
        let inside = g.interactions.edges().iter().filter(|&&(u, i)| spec.user_block(u) == spec.item_block(i)).count();
        inside as f64 >= 0.85 * g.interactions.num_edges() as f64
    });
    c.ok("noise 0.1 keeps at least 85% in block over 10 seeds", within_block);
    let (x, y) = (generate_synthetic(&SyntheticSpec::default()).unwrap(), generate_synthetic(&SyntheticSpec::default()).unwrap());
    c.ok(
        "synthetic data is deterministic",
        x.interactions == y.interactions && x.features_a.to_bytes() == y.features_a.to_bytes() && x.features_s.to_bytes() == y.features_s.to_bytes(),
    );
}

fn index(modality: Modality, lists: Vec<Vec<(usize, f64)>>) -> NeighborIndex {
    NeighborIndex { modality, k: 2, lists }
}

fn graph(c: &mut Checks) {
    c.close("identical vectors", cosine(&[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0]), 1.0);
    c.close("orthogonal vectors", cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    c.close("[1,0] vs [1,1]", cosine(&[1.0, 0.0], &[1.0, 1.0]), 1.0 / 2f64.sqrt());

    let one = InteractionSet::new(1, 3, vec![(0, 0)]).unwrap();
    let ind = expand_candidates(
        &one,
        &index(Modality::A, vec![vec![(1, 0.8)], vec![], vec![]]),
        &index(Modality::S, vec![vec![(1, 0.6)], vec![], vec![]]),
        5,
    )
    .unwrap();
    c.close("single history item candidate score", ind.candidates[0][0].1, 0.7);
    let two = InteractionSet::new(1, 4, vec![(0, 0), (0, 1)]).unwrap();
    let ind = expand_candidates(
        &two,
        &index(Modality::A, vec![vec![(2, 0.7), (1, 0.9)], vec![(2, 0.5)], vec![], vec![]]),
        &index(Modality::S, vec![vec![(2, 0.7)], vec![(2, 0.5), (0, 0.9)], vec![], vec![]]),
        5,
    )
    .unwrap();
    c.ok("history items are never candidates", ind.candidates[0].iter().all(|&(j, _)| j >= 2));
    c.close("scores add over the history", ind.candidates[0][0].1, 1.2);

    let single = build_view_graph(&one, None, View::UI);
    c.close("unit degrees give coefficient 1", single.coefficients[0], 1.0);
    let star = InteractionSet::new(1, 4, (0..4).map(|i| (0, i)).collect()).unwrap();
    let g = build_view_graph(&star, None, View::UI);
    c.close("user degree 4, item degree 1", g.coefficients[0], 0.5);
    let t = InteractionSet::new(2, 3, vec![(0, 0), (0, 2), (1, 1)]).unwrap();
    let ui = build_view_graph(&t, None, View::UI);
    let uig = build_view_graph(&t, Some(&InducedEdges::empty(2)), View::UIG);
    c.ok("empty induced set collapses the views", ui.edges == uig.edges && ui.coefficients == uig.coefficients);
}

fn table(users: Vec<Vec<f64>>, items: Vec<Vec<f64>>) -> EmbeddingTable<f64> {
    EmbeddingTable {
        users: Matrix::from_rows(&users),
        items: Matrix::from_rows(&items),
    }
}

fn encoder(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = InteractionSet::new(1, 1, vec![(0, 0)]).unwrap();
    let g = build_view_graph(&t, None, View::UI);
    let emb = table(vec![vec![1.0, 2.0]], vec![vec![3.0, -4.0]]);
    c.ok("zero layers is the identity", propagate_view(&g, &emb, 0, None, &mut rng).unwrap().z == emb.stacked());
    let out = propagate_view(&g, &emb, 1, None, &mut rng).unwrap();
    c.close_all("single edge, one layer", out.user(0), &[2.0, -1.0]);
    let t2 = InteractionSet::new(2, 1, vec![(0, 0)]).unwrap();
    let g2 = build_view_graph(&t2, None, View::UI);
    let out = propagate_view(&g2, &table(vec![vec![1.0], vec![6.0]], vec![vec![3.0]]), 1, None, &mut rng).unwrap();
    c.close_all("isolated node halves", out.user(1), &[3.0]);

    let mk = |z: Vec<f64>, view| ViewEmbeddings {
        view,
        num_users: 1,
        layers: vec![],
        z: Matrix::from_rows(&[z]),
    };
    let (a, b) = (mk(vec![1.0, 0.0], View::UI), mk(vec![0.0, 1.0], View::UIG));
    c.close_all("fusion of [1,0] and [0,1]", fuse_views(&a, Some(&b)).unwrap().data(), &[0.5, 0.5]);
    c.ok("fusion of identical views", fuse_views(&a, Some(&a)).unwrap() == a.z);
    c.ok("single view passes through", fuse_views(&a, None).unwrap() == a.z);
}

fn moe(c: &mut Checks) {
    let mut p = TemplateParams {
        alpha: 1.0,
        ..Default::default()
    };
    c.close_all("Dom at alpha 1", &evaluate_template(Family::Dom, &p).unwrap(), &[1.0, 0.0, 0.0]);
    p.alpha = 0.6;
    c.close_all("Dom at alpha 0.6", &evaluate_template(Family::Dom, &p).unwrap(), &[0.8, 0.1, 0.1]);
    p.beta = 0.0;
    c.close_all("Bal at beta 0", &evaluate_template(Family::Bal, &p).unwrap(), &[1.0 / 3.0; 3]);
    p.delta = 0.8;
    p.epsilon = 0.05;
    c.close_all("Com at delta 0.8", &evaluate_template(Family::Com, &p).unwrap(), &[0.05, 0.76, 0.19]);
    let specs = expert_specs(&TemplateParams::default(), 1).unwrap();
    c.ok(
        "group B keeps the canonical triplet",
        specs.iter().filter(|s| s.group == Group::B).all(|s| s.triplet == evaluate_template(s.family, &TemplateParams::default()).unwrap()),
    );
    c.close_all("group A permutation", &to_global(Group::A, [0.8, 0.1, 0.1]), &[0.1, 0.8, 0.1]);

    let t = InteractionSet::new(3, 2, vec![(0, 0), (1, 0), (1, 1)]).unwrap();
    let fa = FeatureMatrix::new(Modality::A, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let fs = FeatureMatrix::new(Modality::S, 2, 1, vec![3.0, 5.0]).unwrap();
    let ident = Affine {
        w: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        b: Matrix::zeros(1, 2),
    };
    let ps = Affine {
        w: Matrix::from_rows(&[vec![1.0, 1.0]]),
        b: Matrix::zeros(1, 2),
    };
    let cues = compute_modality_cues::<f64>(&fa, &fs, &t, &ident, &ps).unwrap();
    c.ok("one history item gives that item's cue", cues.user_a.row(0) == cues.item_a.row(0));
    c.close_all("mean of [1,0] and [0,1]", cues.user_a.row(1), &[0.5, 0.5]);
    c.ok("empty history gives a flagged zero cue", cues.user_a.row(2) == [0.0, 0.0] && cues.cold_users == vec![2]);

    let zero = Affine {
        w: Matrix::<f64>::zeros(4, 9),
        b: Matrix::zeros(1, 9),
    };
    c.close_all("zero logits are uniform", &route_dense(&[1.0, 2.0], &[3.0, 4.0], &zero), &[1.0 / 9.0; 9]);
    let two = Affine {
        w: Matrix::<f64>::zeros(2, 2),
        b: Matrix::from_vec(1, 2, vec![2f64.ln(), 0.0]),
    };
    c.close_all("logits [ln 2, 0]", &route_dense(&[0.0], &[0.0], &two), &[2.0 / 3.0, 1.0 / 3.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let closed = (0..100).all(|_| {
        let r = Affine {
            w: Matrix::from_vec(4, 9, (0..36).map(|_| rng.random_range(-30.0..30.0)).collect()),
            b: Matrix::from_vec(1, 9, (0..9).map(|_| rng.random_range(-5.0..5.0)).collect()),
        };
        let pi = route_dense(&[rng.random_range(-3.0..3.0), 1.0], &[0.5, rng.random_range(-3.0..3.0)], &r);
        pi.iter().all(|&p| p > 0.0) && (pi.iter().sum::<f64>() - 1.0).abs() < 1e-12
    });
    c.ok("routing rows are positive and sum to 1", closed);

    let (g, w) = topk_renormalize(&[0.4, 0.3, 0.2, 0.1], 2).unwrap();
    c.ok("top-2 of [.4,.3,.2,.1]", g == vec![0, 1]);
    c.close_all("renormalized top-2", &w, &[4.0 / 7.0, 3.0 / 7.0]);
    let pi = [0.1, 0.6, 0.3];
    let (g, w) = topk_renormalize(&pi, 3).unwrap();
    c.ok("K = E keeps every expert", g == vec![1, 2, 0]);
    c.close_all("K = E keeps the weights", &w, &[0.6, 0.3, 0.1]);
    let (g, w) = topk_renormalize(&[0.25; 4], 2).unwrap();
    c.ok("uniform ties go to smaller indices", g == vec![0, 1]);
    c.close_all("uniform top-2 weights", &w, &[0.5, 0.5]);

    c.ok("behavior-only triplet", triplet_mix([1.0, 0.0, 0.0], &[2.0, -3.0], &[5.0, 2.0], &[9.0, 9.0]) == vec![2.0, -3.0]);
    c.close_all("half behavior, half appearance", &triplet_mix([0.5, 0.5, 0.0], &[2.0, 0.0], &[0.0, 2.0], &[9.0, 9.0]), &[1.0, 1.0]);

    let tr = Affine {
        w: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]),
        b: Matrix::zeros(1, 2),
    };
    let mut neg = tr.clone();
    neg.w = neg.w.map(|v| -v);
    let spec = ExpertSpec {
        group: Group::B,
        family: Family::Dom,
        triplet: [1.0, 0.0, 0.0],
    };
    let pool = ExpertPool {
        specs: vec![spec, spec],
        transforms: vec![tr, neg],
    };
    let router = Affine {
        w: Matrix::zeros(4, 2),
        b: Matrix::zeros(1, 2),
    };
    let score = Affine {
        w: Matrix::from_rows(&[vec![3.0], vec![-1.0]]),
        b: Matrix::from_vec(1, 1, vec![0.25]),
    };
    let v = [0.3f64, -0.7];
    let x = TokenInputs {
        z_u: &v,
        z_i: &v,
        a_u: &v,
        s_u: &v,
        a_i: &v,
        s_i: &v,
    };
    let k1 = score_pair(&x, &pool, &router, &score, 1).unwrap();
    c.ok("K = 1 returns the single expert output", k1.s == expert_forward(0, &x, &pool));
    let k2 = score_pair(&x, &pool, &router, &score, 2).unwrap();
    c.close_all("opposite experts cancel", &k2.s, &[0.0, 0.0]);
    c.close("cancelled score is the bias", k2.score, 0.25);
}

fn schedule(c: &mut Checks) {
    let uniform = vec![1.0 / 9.0; 9];
    let st = batch_entropy_stats([uniform.as_slice(), uniform.as_slice()]).unwrap();
    c.close("uniform H", st.h, 9f64.ln());
    c.close("uniform normalized H", st.h_norm, 1.0);
    c.close("uniform N_eff", st.n_eff, 9.0);
    let mut one = vec![0.0; 9];
    one[2] = 1.0;
    let st = batch_entropy_stats([one.as_slice(), one.as_slice()]).unwrap();
    c.close("one-hot H", st.h, 0.0);
    c.close("one-hot N_eff", st.n_eff, 1.0);
    let mut half = vec![0.0; 9];
    half[0] = 0.5;
    half[1] = 0.5;
    let st = batch_entropy_stats([half.as_slice()]).unwrap();
    c.close("two-way H", st.h, 2f64.ln());
    c.close("two-way normalized H", st.h_norm, 2f64.ln() / 9f64.ln());
    c.close("two-way N_eff", st.n_eff, 2.0);

    let mut s = ScheduleState::new(ScheduleConfig::default());
    let mut stages = Vec::new();
    for h in [0.95, 0.95, 0.80, 0.95, 0.95, 0.95] {
        s.update(h, 1);
        stages.push(s.stage);
    }
    c.ok("switch after the 6th update", stages == vec![1, 1, 1, 1, 1, 2]);
    c.ok("stage 2 is absorbing", [0.0, 0.5, 0.95, 1.0].iter().all(|&h| update_stage(2, 0, h, 0.9, 3).0 == 2));
    c.ok("window 1 switches at once", update_stage(1, 0, 0.95, 0.9, 1).0 == 2);

    let w = |stage, h| stage_weights(stage, 0.3, WeightStrategy::LinEnt, h);
    c.close_all("stage 1 at H 0.5", &<[f64; 2]>::from(w(1, 0.5)), &[0.15, 0.0]);
    c.close_all("stage 1 at H 1", &<[f64; 2]>::from(w(1, 1.0)), &[0.0, 0.0]);
    c.close_all("stage 2 at H 1", &<[f64; 2]>::from(w(2, 1.0)), &[0.0, 0.3]);
}

fn losses(c: &mut Checks) {
    c.close("BPR at equal scores", bpr_loss(&[0.7], &[0.7]), 2f64.ln());
    c.close("BPR at margin ln 3", bpr_loss(&[3f64.ln()], &[0.0]), (4.0f64 / 3.0).ln());
    c.ok("BPR saturates at margin 50", bpr_loss(&[50.0], &[0.0]) < 1e-20);
    c.ok("BPR stays finite at margin -50", bpr_loss(&[-50.0], &[0.0]).is_finite());

    let u = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    c.close("orthonormal users at tau 1", info_nce(&u, &u, 1.0), (1.0 + (-1f64).exp()).ln());
    let v = vec![vec![0.3, 1.0], vec![-2.0, 0.4], vec![1.0, 1.0]];
    let w = vec![vec![1.0, -0.2], vec![0.1, 0.9], vec![-0.5, 2.0]];
    let i = vec![vec![0.0, 1.0], vec![2.0, 1.0]];
    let j = vec![vec![1.0, 1.0], vec![0.3, -1.0]];
    c.close(
        "swapping the views leaves the loss unchanged",
        view_contrastive_loss(&w, &v, &j, &i, 0.5),
        view_contrastive_loss(&v, &w, &i, &j, 0.5),
    );
    c.ok(
        "one user and one item give no negatives",
        view_contrastive_loss(&[vec![1.0]], &[vec![2.0]], &[vec![1.0]], &[vec![3.0]], 0.5) == 0.0,
    );

    let uniform = [1.0 / 9.0; 9];
    let mut one = [0.0; 9];
    one[0] = 1.0;
    let mut half = [0.0; 9];
    half[0] = 0.5;
    half[1] = 0.5;
    c.close("coverage at uniform", coverage_loss(&uniform), 0.0);
    c.close("coverage at one-hot", coverage_loss(&one), 8.0 / 9.0);
    c.close("coverage at two-way", coverage_loss(&half), 2.0 * (0.5f64 - 1.0 / 9.0).powi(2) + 7.0 / 81.0);
    c.close("confidence at one-hot", confidence_loss([one.as_slice(), one.as_slice()]), 0.0);
    c.close("confidence at uniform", confidence_loss([uniform.as_slice()]), 9f64.ln());
    c.close("confidence half and half", confidence_loss([one.as_slice(), uniform.as_slice()]), 9f64.ln() / 2.0);

    let w = LossWeights {
        ctr: 0.01,
        cov: 0.0,
        conf: 0.0,
        l2: 2e-5,
    };
    c.close("no routing weight", LossBreakdown::compose(1.5, 2.0, 0.4, 1.1, 100.0, w).total, 1.5 + 0.02 + 0.002);
    c.close("single equal-score triplet", LossBreakdown::compose(2f64.ln(), 0.0, 0.0, 0.0, 0.0, LossWeights::default()).total, 2f64.ln());

    let micro = micro_instance().unwrap();
    let model = Model::<f64>::init(
        ModelConfig {
            dual_view: false,
            ..micro_model_config()
        },
        3,
        4,
        3,
        2,
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let sv = micro.inputs(false).unwrap();
    let plan = micro.plan(&sv, 0.0, 1).unwrap();
    let obj = build_objective(&model, &sv, &plan, &LossConfig::default(), |_| (0.1, 0.0)).unwrap();
    c.ok("single view has no contrastive term", obj.breakdown.ctr == 0.0 && obj.breakdown.weights.ctr == 0.0);
}

fn micro_model(seed: u64) -> Model<f64> {
    Model::init(micro_model_config(), 3, 4, 3, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn training(c: &mut Checks) {
    let micro = micro_instance().unwrap();
    let inputs = micro.inputs(true).unwrap();
    let plan = micro.plan(&inputs, 0.0, 1).unwrap();
    let loss = LossConfig {
        lambda_ctr: 0.0,
        ..Default::default()
    };
    let b = build_objective(&micro_model(2), &inputs, &plan, &loss, |_| (0.0, 0.0)).unwrap().breakdown;
    c.close("no regularizers leaves BPR and L2", b.total, b.bpr + loss.weight_decay * b.l2);

    let base = Trainer::<f64> {
        model: micro_model(3),
        ..Trainer::new(
            TrainerConfig {
                model: micro_model_config(),
                ..Default::default()
            },
            3,
            4,
            3,
            2,
        )
        .unwrap()
    };
    let (mut t1, mut t2) = (base.clone(), base);
    t1.train_step(&inputs, &plan, 1).unwrap();
    t2.train_step(&inputs, &plan, 1).unwrap();
    c.ok("identical step, identical parameters", t1.model == t2.model);

    let check = |loss: &LossConfig, weights, corrupt: Option<(String, usize)>| {
        let model = micro_model(5);
        let opts = GradCheckOptions {
            corrupt,
            max_coords: model.num_coordinates(),
            ..Default::default()
        };
        gradient_check(&model, &inputs, &micro.plan(&inputs, 0.1, 9).unwrap(), loss, weights, &opts).unwrap()
    };
    let bpr_only = LossConfig {
        lambda_ctr: 0.0,
        weight_decay: 0.0,
        ..Default::default()
    };
    c.ok("gradient check, BPR only", check(&bpr_only, (0.0, 0.0), None).passed);
    c.ok("gradient check, stage 1", check(&LossConfig::default(), (0.24, 0.0), None).passed);
    let bad = check(&LossConfig::default(), (0.24, 0.0), Some(("router.w".into(), 5)));
    c.ok("corrupted gradient names its group", !bad.passed && bad.failing == vec!["router.w".to_string()]);

    let run = planted_split(
        &SyntheticSpec {
            num_users: 40,
            num_items: 24,
            feature_dim_a: 6,
            feature_dim_s: 4,
            density: 0.25,
            seed: 3,
            ..Default::default()
        },
        3,
        5,
    )
    .unwrap();
    let config = TrainerConfig {
        model: ModelConfig {
            embed_dim: 8,
            ..Default::default()
        },
        batch_size: 32,
        max_epochs: 200,
        ..Default::default()
    };
    let mut t = Trainer::<f32>::new(config.clone(), 40, 24, 6, 4).unwrap();
    for v in [0.1, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2] {
        t.epoch += 1;
        t.observe_validation(Some(v));
    }
    c.ok("patience stops after epoch 7 with best epoch 2", t.finished() && t.epoch == 7 && t.best.as_ref().map(|b| b.epoch) == Some(2));
    let data = run.train_data::<f32>(true).unwrap();
    let mut t = Trainer::<f32>::new(
        TrainerConfig {
            max_epochs: 1,
            patience: 0,
            ..config
        },
        40,
        24,
        6,
        4,
    )
    .unwrap();
    let s = t.fit(&data, &mut |_| {}, &mut |_, _| Ok(())).unwrap();
    c.ok("epoch cap of 1 runs one epoch", s.epochs == 1);
}

fn evaluation(c: &mut Checks) {
    c.ok("ranking of [3,1,2]", rank_items(&[3.0, 1.0, 2.0], &[]) == vec![0, 2, 1]);
    c.ok("masked item never ranked", !rank_items(&[3.0, 1.0, 2.0, 9.0], &[3]).contains(&3));
    c.ok("ties in ascending id order", rank_items(&[0.5; 5], &[]) == vec![0, 1, 2, 3, 4]);
    let (r, g) = user_metrics(&[4, 1, 2], &[4], 1);
    c.close_all("hit at rank 1", &[r, g], &[1.0, 1.0]);
    c.close("hit at rank 2", user_metrics(&[1, 4], &[4], 2).1, 1.0 / 3f64.log2());
    let (r, g) = user_metrics(&[1, 2, 4], &[4], 2);
    c.close_all("miss outside the cutoff", &[r, g], &[0.0, 0.0]);
}

fn diagnostics(c: &mut Checks) {
    let mut a = vec![0.0; 9];
    a[0] = 1.0;
    let mut b = vec![0.0; 9];
    b[1] = 1.0;
    c.ok("mean of one pair", mean_routing([a.as_slice()]).unwrap() == a);
    let mut want = vec![0.0; 9];
    want[0] = 0.5;
    want[1] = 0.5;
    c.close_all("mean of two pairs", &mean_routing([a.as_slice(), b.as_slice()]).unwrap(), &want);

    let specs = expert_specs(&TemplateParams::default(), 1).unwrap();
    let groups: Vec<_> = specs.iter().map(|s| s.group).collect();
    let families: Vec<_> = specs.iter().map(|s| s.family).collect();
    let triplets: Vec<_> = specs.iter().map(|s| s.triplet).collect();
    let prof = |m: &[f64]| routing_diagnostics(m, &groups, &families, &triplets).unwrap();
    let p = prof(&[1.0 / 9.0; 9]);
    c.close_all("uniform HHI, Div, N_eff", &[p.hhi, p.div, p.n_eff], &[1.0 / 9.0, 1.0, 9.0]);
    let p = prof(&a);
    c.close_all("one-hot HHI, Div, N_eff", &[p.hhi, p.div, p.n_eff], &[1.0, 0.0, 1.0]);
    let p = prof(&want);
    c.close_all("two-way HHI, Div", &[p.hhi, p.div], &[0.5, 2f64.ln() / 9f64.ln()]);
}

fn command_line(c: &mut Checks) -> Result<(), String> {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    magnet(&["synth", "--seed", "7", "--out", s(&a)], &[])?;
    magnet(&["synth", "--seed", "7", "--out", s(&b)], &[])?;
    c.ok("synth is byte-identical", crate::cli::dir_bytes(&a) == crate::cli::dir_bytes(&b));

    let prep = planted(tmp.path())?;
    let small = ["--set", "embed_dim=16", "--set", "batch_size=256", "--set", "max_epochs=2"];
    let off = tmp.path().join("off");
    let mut args = small.to_vec();
    args.extend(["--set", "lambda_r=0"]);
    train(&prep, &off, &args, &[])?;
    let steps = jsonl(&off.join("steps.jsonl"))?;
    c.ok(
        "lambda_r=0 logs zero routing losses",
        !steps.is_empty() && steps.iter().all(|r| r["loss_cov"].as_f64() == Some(0.0) && r["loss_conf"].as_f64() == Some(0.0)),
    );

    let run = tmp.path().join("run");
    let report = train(&prep, &run, &small, &[])?;
    let best = report["summary"]["best_epoch"].as_u64().ok_or("no best epoch")? as usize;
    let logged = jsonl(&run.join("metrics.jsonl"))?[best - 1]["val_ndcg20"].as_f64();
    let ckpt = run.join("checkpoint");
    let replay = magnet(&["evaluate", "--data", s(&prep), "--checkpoint", s(&ckpt), "--split", "valid"], &[])?;
    c.ok("replayed validation NDCG matches the log", logged.is_some() && replay["metrics"]["ndcg@20"].as_f64() == logged);
    let rep = read_json(&run.join("report.json"))?;
    let (got, pop) = (rep["test"]["recall@20"].as_f64(), rep["popularity"]["recall@20"].as_f64());
    c.ok("planted run beats popularity", matches!((got, pop), (Some(g), Some(p)) if g > p));
    Ok(())
}
