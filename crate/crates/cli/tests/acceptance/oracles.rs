//! Criteria 2-4: gradients, reference implementations and the stage machine.

use std::time::{Duration, Instant};

use magnet::data::{FeatureMatrix, InteractionSet, Modality};
use magnet::encoder::{propagate_view, EmbeddingTable};
use magnet::eval::{compute_metrics, rank_items};
use magnet::fixtures::{micro_instance, micro_model_config};
use magnet::graph::{build_neighbor_index, build_view_graph, cosine, expand_candidates, NeighborIndex, View};
use magnet::model::{FusionMode, Model, ModelConfig};
use magnet::schedule::{stage_weights, update_stage, ScheduleConfig, ScheduleState, SwitchRule, WeightStrategy};
use magnet::tensor::Matrix;
use magnet::train::{gradient_check, GradCheckOptions, LossConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{within, Checks, Outcome};

pub fn gradient() -> Outcome {
    let started = Instant::now();
    let micro = micro_instance().map_err(|e| e.to_string())?;
    let inputs = micro.inputs(true).map_err(|e| e.to_string())?;
    let plan = micro.plan(&inputs, 0.1, 9).map_err(|e| e.to_string())?;
    let bpr_only = LossConfig {
        lambda_ctr: 0.0,
        weight_decay: 0.0,
        ..Default::default()
    };
    let full = LossConfig::default();
    let scopes = [
        ("bpr", bpr_only, (0.0, 0.0)),
        ("stage 1", full, stage_weights(1, 0.3, WeightStrategy::LinEnt, 0.2)),
        ("stage 2", full, stage_weights(2, 0.3, WeightStrategy::LinEnt, 0.9)),
    ];
    let mut c = Checks::default();
    let mut coords = 0;
    for fusion in [FusionMode::Moe, FusionMode::FreeTemplates] {
        let config = ModelConfig {
            fusion,
            ..micro_model_config()
        };
        let model = Model::<f64>::init(config, 3, 4, 3, 2, &mut ChaCha8Rng::seed_from_u64(5)).map_err(|e| e.to_string())?;
        for (name, loss, weights) in scopes {
            let opts = GradCheckOptions {
                max_coords: model.num_coordinates(),
                ..Default::default()
            };
            let report = gradient_check(&model, &inputs, &plan, &loss, weights, &opts).map_err(|e| e.to_string())?;
            coords += report.groups.iter().map(|g| g.checked).sum::<usize>();
            let all = report.groups.iter().all(|g| g.checked == g.coords);
            c.ok(&format!("{fusion:?} {name}: every coordinate checked"), all);
            c.ok(&format!("{fusion:?} {name}: max rel {:.2e}, failing {:?}", report.max_rel, report.failing), report.passed);
        }
    }
    let detail = c.outcome().map(|d| format!("{d}, {coords} coordinates"));
    within(Duration::from_secs(120), started, detail)
}

pub fn equivalence() -> Outcome {
    let started = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2026);
    for case in 0..20 {
        propagation_case(&mut c, &mut rng, case);
    }
    for case in 0..20 {
        neighbor_case(&mut c, &mut rng, case);
    }
    for case in 0..100 {
        metric_case(&mut c, &mut rng, case);
    }
    within(Duration::from_secs(120), started, c.outcome())
}

fn random_set(rng: &mut ChaCha8Rng, nu: usize, ni: usize, p: f64) -> InteractionSet {
    let edges = (0..nu).flat_map(|u| (0..ni).map(move |i| (u, i))).filter(|_| rng.random_bool(p)).collect();
    InteractionSet::new(nu, ni, edges).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Dense `[[0, R], [R^T, 0]]` propagation with degrees counted from scratch.
fn propagation_case(c: &mut Checks, rng: &mut ChaCha8Rng, case: usize) {
    let (nu, ni, d) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..5));
    let train = random_set(rng, nu, ni, 0.3);
    let layers = rng.random_range(0..4);
    let emb = EmbeddingTable {
        users: random_matrix(rng, nu, d),
        items: random_matrix(rng, ni, d),
    };
    let n = nu + ni;
    let mut adj = vec![vec![0.0f64; n]; n];
    for &(u, i) in train.edges() {
        adj[u][nu + i] = 1.0;
        adj[nu + i][u] = 1.0;
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let mut e: Vec<Vec<f64>> = (0..n).map(|k| emb.stacked().row(k).to_vec()).collect();
    let mut sum = e.clone();
    for _ in 0..layers {
        let next: Vec<Vec<f64>> = (0..n)
            .map(|a| {
                (0..d)
                    .map(|col| (0..n).filter(|&b| adj[a][b] != 0.0).map(|b| e[b][col] / (deg[a] * deg[b]).sqrt()).sum())
                    .collect()
            })
            .collect();
        for (s, x) in sum.iter_mut().zip(&next) {
            for (p, q) in s.iter_mut().zip(x) {
                *p += q;
            }
        }
        e = next;
    }
    let g = build_view_graph(&train, None, View::UI);
    let got = propagate_view(&g, &emb, layers, None, rng).unwrap();
    let err = (0..n)
        .flat_map(|k| (0..d).map(move |col| (k, col)))
        .map(|(k, col)| (got.z.get(k, col) - sum[k][col] / (layers + 1) as f64).abs())
        .fold(0.0, f64::max);
    c.ok(&format!("propagation case {case}: max error {err:.1e}"), err <= 1e-10);
}

fn brute_neighbors(f: &FeatureMatrix, k: usize) -> Vec<Vec<(usize, f64)>> {
    (0..f.rows)
        .map(|i| {
            let mut all: Vec<(usize, f64)> = (0..f.rows).filter(|&j| j != i).map(|j| (j, cosine(f.row(i), f.row(j)))).collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            all.truncate(k);
            all
        })
        .collect()
}

fn brute_candidates(train: &InteractionSet, a: &NeighborIndex, s: &NeighborIndex, r: usize) -> Vec<Vec<(usize, f64)>> {
    let sim = |idx: &NeighborIndex, i: usize, j: usize| idx.lists[i].iter().find(|p| p.0 == j).map_or(0.0, |p| p.1);
    (0..train.num_users())
        .map(|u| {
            let hist = train.history(u);
            let mut pool: Vec<(usize, f64)> = (0..train.num_items())
                .filter(|j| !hist.contains(j))
                .filter(|&j| hist.iter().any(|&i| a.lists[i].iter().chain(&s.lists[i]).any(|p| p.0 == j)))
                .map(|j| (j, hist.iter().map(|&i| (sim(a, i, j) + sim(s, i, j)) / 2.0).sum()))
                .collect();
            pool.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            pool.truncate(r);
            pool
        })
        .collect()
}

fn random_features(rng: &mut ChaCha8Rng, modality: Modality, rows: usize, dim: usize) -> FeatureMatrix {
    // a coarse grid makes exact ties likely
    let values = (0..rows * dim).map(|_| rng.random_range(-2i32..3) as f32).collect();
    FeatureMatrix::new(modality, rows, dim, values).unwrap()
}

fn neighbor_case(c: &mut Checks, rng: &mut ChaCha8Rng, case: usize) {
    let (nu, ni) = (rng.random_range(1..10), rng.random_range(3..15));
    let (da, ds) = (rng.random_range(1..4), rng.random_range(1..4));
    let fa = random_features(rng, Modality::A, ni, da);
    let fs = random_features(rng, Modality::S, ni, ds);
    let k = rng.random_range(1..ni);
    let r = rng.random_range(1..ni + 2);
    let ia = build_neighbor_index(&fa, k).unwrap();
    let is = build_neighbor_index(&fs, k).unwrap();
    c.ok(&format!("knn case {case}, modality A"), ia.lists == brute_neighbors(&fa, k));
    c.ok(&format!("knn case {case}, modality S"), is.lists == brute_neighbors(&fs, k));
    let train = random_set(rng, nu, ni, 0.25);
    let got = expand_candidates(&train, &ia, &is, r).unwrap();
    let want = brute_candidates(&train, &ia, &is, r);
    let same = got.candidates.len() == want.len()
        && got.candidates.iter().zip(&want).all(|(g, w)| {
            g.len() == w.len() && g.iter().zip(w).all(|(x, y)| x.0 == y.0 && (x.1 - y.1).abs() <= 1e-12)
        });
    c.ok(&format!("expansion case {case}"), same);
}

fn metric_case(c: &mut Checks, rng: &mut ChaCha8Rng, case: usize) {
    let ni = rng.random_range(2..40);
    let nusers = rng.random_range(1..6);
    let cutoffs = [1, rng.random_range(1..25), 20];
    let (mut users, mut rankings, mut positives) = (Vec::new(), Vec::new(), Vec::new());
    let (mut want_r, mut want_g) = (vec![0.0; 3], vec![0.0; 3]);
    for u in 0..nusers {
        let scores: Vec<f64> = (0..ni).map(|_| rng.random_range(0..6) as f64).collect();
        let mut items: Vec<usize> = (0..ni).collect();
        items.shuffle(rng);
        let mut masked: Vec<usize> = items[..rng.random_range(0..ni / 2 + 1)].to_vec();
        masked.sort_unstable();
        let mut pos: Vec<usize> = items[masked.len()..].iter().copied().filter(|_| rng.random_bool(0.3)).collect();
        if pos.is_empty() {
            pos.push(items[ni - 1]);
        }
        pos.sort_unstable();
        // reference order: stable sort of ascending ids by descending score
        let mut order: Vec<usize> = (0..ni).filter(|i| !masked.contains(i)).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        c.ok(&format!("ranking case {case}.{u}"), rank_items(&scores, &masked) == order);
        for (k, &n) in cutoffs.iter().enumerate() {
            let top = &order[..n.min(order.len())];
            let hits = top.iter().filter(|i| pos.contains(i)).count();
            let dcg: f64 = top.iter().enumerate().filter(|(_, i)| pos.contains(i)).map(|(r, _)| 1.0 / (r as f64 + 2.0).log2()).sum();
            let idcg: f64 = (0..n.min(pos.len())).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
            want_r[k] += hits as f64 / pos.len() as f64 / nusers as f64;
            want_g[k] += dcg / idcg / nusers as f64;
        }
        users.push(u);
        rankings.push(order);
        positives.push(pos);
    }
    let rep = compute_metrics(&users, &rankings, &positives, &cutoffs);
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    c.ok(&format!("metric case {case}"), close(&rep.recall, &want_r) && close(&rep.ndcg, &want_g));
}

/// Reference automaton: stage 2 from the first step that closes a run of
/// `window` consecutive values at or above the threshold.
fn automaton(hs: &[f64], threshold: f64, window: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(hs.len());
    let mut switched = false;
    for t in 0..hs.len() {
        if !switched && t + 1 >= window && hs[t + 1 - window..=t].iter().all(|&h| h >= threshold) {
            switched = true;
        }
        out.push(if switched { 2 } else { 1 });
    }
    out
}

pub fn stage_machine() -> Outcome {
    let started = Instant::now();
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut switches = 0;
    for stream in 0..1000 {
        let threshold = [0.5, 0.8, 0.9, 0.95, 1.0][rng.random_range(0..5)];
        let window = rng.random_range(1..6);
        let len = rng.random_range(1..60);
        let bias = rng.random_range(0.0..1.0);
        let hs: Vec<f64> = (0..len)
            .map(|_| match rng.random_range(0..10) {
                0 => threshold,
                _ if rng.random_bool(bias) => rng.random_range(threshold..=1.0),
                _ => rng.random_range(0.0..threshold),
            })
            .collect();
        let want = automaton(&hs, threshold, window);
        let mut state = ScheduleState::new(ScheduleConfig {
            threshold,
            window,
            rule: SwitchRule::Entropy,
            ..Default::default()
        });
        let (mut stage, mut counter) = (1u8, 0usize);
        let mut got = Vec::with_capacity(len);
        let mut pure = Vec::with_capacity(len);
        for &h in &hs {
            state.update(h, 1);
            got.push(state.stage);
            (stage, counter) = update_stage(stage, counter, h, threshold, window);
            pure.push(stage);
        }
        let first = want.iter().position(|&s| s == 2).map(|t| t + 1);
        switches += usize::from(first.is_some());
        c.ok(&format!("stream {stream}: stages"), got == want);
        c.ok(&format!("stream {stream}: pure transition"), pure == want);
        c.ok(&format!("stream {stream}: switch step"), state.switched_at == first);
        let weights_ok = hs.iter().zip(&want).all(|(&h, &s)| {
            let (cov, conf) = stage_weights(s, 0.3, WeightStrategy::LinEnt, h);
            if s == 1 {
                conf == 0.0 && (cov - 0.3 * (1.0 - h)).abs() < 1e-15
            } else {
                cov == 0.0 && (conf - 0.3 * h).abs() < 1e-15
            }
        });
        c.ok(&format!("stream {stream}: weights"), weights_ok);
    }
    c.ok("streams exercise both outcomes", switches > 100 && switches < 900);
    let detail = c.outcome().map(|d| format!("{d}, {switches} of 1000 streams switch"));
    within(Duration::from_secs(60), started, detail)
}
