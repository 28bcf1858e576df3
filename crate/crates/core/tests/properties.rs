#[allow(dead_code)]
#[path = "../../verify/src/lib.rs"]
mod oracles;

use hpdp::checkpoint::Checkpoint;
use hpdp::hcma::{generate_film_params, modulate, propagate, FilmGenerator, LayerNormAffine};
use hpdp::heads::{cox_nll, cross_entropy, proto_supervision, SurvivalRecord};
use hpdp::maps::{aggregate, route, route_adaptive, route_prior, ExpertBank};
use hpdp::metrics::{auc, c_index, km_curve, logrank};
use hpdp::model::{ModelParams, Task, Toggles};
use hpdp::numerics::attention::MhaWeights;
use hpdp::numerics::ops::{cosine_sim_matrix, layer_norm, softmax_rows};
use hpdp::priors::{kmeans, kmeans_with, lloyd, KMeansOptions};
use hpdp::rng::stream;
use hpdp::spe::{encode_coords, encode_position, Coord};
use hpdp::synthdata::{generate_cohort, phenotype_archetypes, split_cohort, GeneratorConfig};
use hpdp::trainer::{architecture_for, evaluate, train, train_from, TrainConfig};
use hpdp::Matrix;
use oracles::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn sized_matrix(max_rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows).prop_flat_map(move |r| matrix(r, cols, -5.0, 5.0))
}

fn records(max: usize) -> impl Strategy<Value = Vec<SurvivalRecord>> {
    prop::collection::vec((1u32..6, any::<bool>()), 1..=max).prop_map(|v| {
        v.into_iter()
            .map(|(t, e)| SurvivalRecord::new(t as f64, e).unwrap())
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_is_row_stochastic(m in sized_matrix(6, 5), tau in 0.01f64..10.0) {
        let s = softmax_rows(&m.scale(40.0), tau).unwrap();
        for r in 0..s.rows() {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_ignores_row_shift(m in sized_matrix(5, 6), shift in -100.0f64..100.0) {
        let (g, b) = (Matrix::filled(1, 6, 1.0), Matrix::zeros(1, 6));
        let (a, _) = layer_norm(&m, &g, &b, 1e-5).unwrap();
        let (s, _) = layer_norm(&m.map(|v| v + shift), &g, &b, 1e-5).unwrap();
        prop_assert!(a.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn cosine_ignores_positive_row_scale(a in sized_matrix(5, 4), b in sized_matrix(4, 4),
                                         scales in prop::collection::vec(1e-3f64..1e3, 5)) {
        let mut s = a.clone();
        for r in 0..s.rows() {
            s.row_mut(r).iter_mut().for_each(|v| *v *= scales[r]);
        }
        let lhs = cosine_sim_matrix(&s, &b).unwrap();
        let rhs = cosine_sim_matrix(&a, &b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn spe_is_bounded_and_axis_separable(x in 0.0f64..1e4, y in 0.0f64..1e4, y2 in 0.0f64..1e4) {
        let a = encode_position(Coord::new(x, y), 16).unwrap();
        let b = encode_position(Coord::new(x, y2), 16).unwrap();
        prop_assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(&a[..8], &b[..8]);
        prop_assert_eq!(a, encode_position(Coord::new(x, y), 16).unwrap());
    }

    #[test]
    fn routing_is_row_stochastic(h in sized_matrix(8, 4), pp in matrix(3, 4, -2.0, 2.0), pa in matrix(2, 4, -2.0, 2.0)) {
        let bank = ExpertBank::new(&pp, &pa, 0.1, 2.0).unwrap();
        for a in [route_prior(&h, &bank).unwrap(), route_adaptive(&h, &bank).unwrap()] {
            for r in 0..a.rows() {
                prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant(h in sized_matrix(10, 4), pp in matrix(3, 4, -2.0, 2.0),
                                          pa in matrix(2, 4, -2.0, 2.0), seed in any::<u64>()) {
        let bank = ExpertBank::new(&pp, &pa, 0.1, 2.0).unwrap();
        let m = aggregate(&route(&h, &bank).unwrap(), &h).unwrap();
        let mut perm: Vec<usize> = (0..h.rows()).collect();
        perm.shuffle(&mut stream(seed, "perm"));
        let hp = h.select_rows(&perm);
        let mp = aggregate(&route(&hp, &bank).unwrap(), &hp).unwrap();
        prop_assert!(m.max_abs_diff(&mp) < 1e-12);
    }

    #[test]
    fn prior_routing_ignores_instance_scale(h in sized_matrix(8, 4), pp in matrix(3, 4, -2.0, 2.0),
                                            scales in prop::collection::vec(1e-3f64..1e3, 8)) {
        let pa = Matrix::zeros(0, 4);
        let bank = ExpertBank::new(&pp, &pa, 0.1, 2.0).unwrap();
        let mut s = h.clone();
        for r in 0..s.rows() {
            s.row_mut(r).iter_mut().for_each(|v| *v *= scales[r]);
        }
        let a = route_prior(&h, &bank).unwrap();
        prop_assert!(a.max_abs_diff(&route_prior(&s, &bank).unwrap()) < 1e-12);
    }

    #[test]
    fn cross_entropy_is_nonnegative(logits in sized_matrix(6, 3), labels in prop::collection::vec(0usize..3, 6)) {
        let (l, _) = cross_entropy(&logits, &labels[..logits.rows()]).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn cox_matches_risk_set_enumeration(recs in records(6), raw in prop::collection::vec(-5.0f64..5.0, 6)) {
        let risks = &raw[..recs.len()];
        for eps in [0.0, 1e-8] {
            let got = cox_nll(risks, &recs, eps).unwrap().value;
            prop_assert!((got - brute_cox(risks, &recs, eps)).abs() <= 1e-12);
        }
    }

    #[test]
    fn cox_is_shift_invariant(recs in records(12), raw in prop::collection::vec(-5.0f64..5.0, 12)) {
        let risks = &raw[..recs.len()];
        let base = cox_nll(risks, &recs, 0.0).unwrap().value;
        for c in [-3.0, 1.0, 7.0] {
            let shifted: Vec<f64> = risks.iter().map(|r| r + c).collect();
            prop_assert!((cox_nll(&shifted, &recs, 0.0).unwrap().value - base).abs() < 1e-10);
        }
    }

    #[test]
    fn cox_eps_drift_is_bounded(recs in records(12), raw in prop::collection::vec(-2.0f64..2.0, 12), c in -3.0f64..3.0) {
        // Each event moves by at most eps·|1/S − 1/S'| with every risk-set sum ≥ e^-5.
        let risks = &raw[..recs.len()];
        let shifted: Vec<f64> = risks.iter().map(|r| r + c).collect();
        let drift = (cox_nll(&shifted, &recs, 1e-8).unwrap().value - cox_nll(risks, &recs, 1e-8).unwrap().value).abs();
        prop_assert!(drift <= 1e-8 * 5f64.exp() + 1e-12, "drift {drift}");
    }

    #[test]
    fn auc_matches_pair_counting(pairs in prop::collection::vec((-16i32..16, any::<bool>()), 1..=50)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 8.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let got = auc(&scores, &labels).unwrap();
        prop_assert_eq!(got, brute_auc(&scores, &labels));
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let aff: Vec<f64> = scores.iter().map(|s| 2.5 * s - 1.0).collect();
        prop_assert_eq!(auc(&exp, &labels).unwrap(), got);
        prop_assert_eq!(auc(&aff, &labels).unwrap(), got);
    }

    #[test]
    fn c_index_matches_pair_counting(recs in records(50), raw in prop::collection::vec(-16i32..16, 50)) {
        let risks: Vec<f64> = raw[..recs.len()].iter().map(|&r| r as f64 / 8.0).collect();
        let got = c_index(&risks, &recs).unwrap();
        prop_assert_eq!(got, brute_c_index(&risks, &recs));
        let exp: Vec<f64> = risks.iter().map(|s| s.exp()).collect();
        let aff: Vec<f64> = risks.iter().map(|s| 3.0 * s + 2.0).collect();
        prop_assert_eq!(c_index(&exp, &recs).unwrap(), got);
        prop_assert_eq!(c_index(&aff, &recs).unwrap(), got);
    }

    #[test]
    fn km_is_monotone_and_bounded(recs in records(40)) {
        let curve = km_curve(&recs);
        prop_assert!(curve.iter().all(|&(_, s)| (0.0..=1.0).contains(&s)));
        prop_assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].0 >= w[0].0));
    }

    #[test]
    fn logrank_of_identical_groups_is_unit(recs in records(20)) {
        prop_assert_eq!(logrank(&recs, &recs).unwrap().p_value, 1.0);
    }

    #[test]
    fn lloyd_inertia_never_increases(pts in matrix(40, 3, -5.0, 5.0), k in 1usize..6, seed in any::<u64>()) {
        let run = lloyd(&pts, k, 100, 1e-9, &mut stream(seed, "kmeans")).unwrap();
        prop_assert!(run.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
        let mut used = vec![false; k];
        run.bank.assignments.iter().for_each(|&a| used[a] = true);
        prop_assert!(used.iter().all(|&u| u));
    }
}

#[test]
fn cross_entropy_is_log_c_at_uniform_logits() {
    for c in 2..7 {
        let (l, _) = cross_entropy(&Matrix::filled(3, c, 0.7), &[0, 1, c - 1]).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-14);
    }
}

#[test]
fn spe_is_injective_on_the_desk_grid() {
    let coords: Vec<Coord> = (0..=50)
        .flat_map(|x| (0..=50).map(move |y| Coord::new(x as f64, y as f64)))
        .collect();
    let e = encode_coords(&coords, 8).unwrap();
    let mut min = f64::INFINITY;
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let d = e
                .row(i)
                .iter()
                .zip(e.row(j))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            min = min.min(d);
        }
    }
    assert!(min > 1e-6, "closest pair at max-norm {min}");
}

#[test]
fn kmeans_is_deterministic_and_order_free() {
    let mut rng = stream(3, "pts");
    let centres = [[8.0, 0.0], [-8.0, 0.0], [0.0, 8.0]];
    let rows: Vec<[f64; 2]> = (0..90)
        .map(|i| {
            let c = centres[i % 3];
            [c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0)]
        })
        .collect();
    let pts = Matrix::from_rows(&rows);
    let a = kmeans_with(&pts, &KMeansOptions::new(3, 11)).unwrap();
    assert_eq!(a, kmeans_with(&pts, &KMeansOptions::new(3, 11)).unwrap());
    let mut perm: Vec<usize> = (0..90).collect();
    perm.shuffle(&mut rng);
    let b = kmeans_with(&pts.select_rows(&perm), &KMeansOptions::new(3, 11)).unwrap();
    assert!((a.inertia - b.inertia).abs() <= 1e-9 * a.inertia);
}

#[test]
fn proto_loss_is_minimal_at_aligned_experts() {
    let k = 4;
    let teachers = Matrix::identity(k);
    let (aligned, _) = proto_supervision(&teachers, &teachers, 0.07).unwrap();
    let mut rng = stream(0, "perturb");
    for _ in 0..1000 {
        let mut p = teachers.add(&Matrix::random_normal(k, k, 0.3, &mut rng)).unwrap();
        for r in 0..k {
            let n = p.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            p.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let (l, _) = proto_supervision(&p, &teachers, 0.07).unwrap();
        assert!(l >= aligned, "{l} < {aligned}");
    }
}

struct HcmaWeights {
    film: Vec<Matrix>,
    mha: Vec<Matrix>,
    gain: Matrix,
    bias: Matrix,
}

impl HcmaWeights {
    fn random(d: usize, seed: u64, zero_out: bool) -> Self {
        let mut rng = stream(seed, "hcma");
        let film = [(d, d), (1, d), (d, d), (1, d), (d, d), (1, d)]
            .iter()
            .map(|&(r, c)| {
                if zero_out {
                    Matrix::zeros(r, c)
                } else {
                    Matrix::random_normal(r, c, 0.5, &mut rng)
                }
            })
            .collect();
        let mha = (0..8)
            .map(|i| {
                let shape = if i % 2 == 0 { (d, d) } else { (1, d) };
                if zero_out && i >= 6 {
                    Matrix::zeros(shape.0, shape.1)
                } else {
                    Matrix::random_normal(shape.0, shape.1, 0.5, &mut rng)
                }
            })
            .collect();
        Self {
            film,
            mha,
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }

    fn run(&self, m: &Matrix, text: &Matrix) -> Matrix {
        let f = &self.film;
        let gen = FilmGenerator {
            w_hidden: &f[0],
            b_hidden: &f[1],
            w_gamma: &f[2],
            b_gamma: &f[3],
            w_beta: &f[4],
            b_beta: &f[5],
        };
        let w = &self.mha;
        let mha = MhaWeights {
            w_q: &w[0],
            b_q: &w[1],
            w_k: &w[2],
            b_k: &w[3],
            w_v: &w[4],
            b_v: &w[5],
            w_o: &w[6],
            b_o: &w[7],
        };
        let ln = LayerNormAffine {
            gain: &self.gain,
            bias: &self.bias,
            eps: 1e-5,
        };
        let (film, _) = generate_film_params(text, &gen).unwrap();
        let (h_mod, _) = modulate(m, &film, ln).unwrap();
        propagate(m, &h_mod, mha, 4, ln).unwrap().0
    }
}

#[test]
fn hcma_reduces_to_layer_norm_at_zero() {
    let d = 8;
    let w = HcmaWeights::random(d, 1, true);
    let m = Matrix::random_normal(5, d, 2.0, &mut stream(1, "m"));
    let t = Matrix::random_normal(1, d, 1.0, &mut stream(1, "t"));
    let out = w.run(&m, &t);
    assert_eq!(out.shape(), m.shape());
    let (ln1, _) = layer_norm(&m, &w.gain, &w.bias, 1e-5).unwrap();
    assert!(out.max_abs_diff(&ln1) < 1e-12);
    let (ln2, _) = layer_norm(&ln1, &w.gain, &w.bias, 1e-5).unwrap();
    assert!(out.max_abs_diff(&ln2) < 1e-4);
}

#[test]
fn hcma_output_depends_on_text() {
    let d = 8;
    let w = HcmaWeights::random(d, 2, false);
    let m = Matrix::random_normal(5, d, 1.0, &mut stream(2, "m"));
    let t1 = Matrix::random_normal(1, d, 1.0, &mut stream(2, "t1"));
    let t2 = Matrix::random_normal(1, d, 1.0, &mut stream(2, "t2"));
    assert!(w.run(&m, &t1).max_abs_diff(&w.run(&m, &t2)) > 0.0);
}

#[test]
fn generator_is_thread_count_independent() {
    let cfg = GeneratorConfig {
        n_bags: 24,
        seed: 9,
        ..GeneratorConfig::default()
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| generate_cohort(&cfg).unwrap());
    let b = four.install(|| generate_cohort(&cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
fn censoring_rate_matches_config() {
    let cfg = GeneratorConfig {
        n_bags: 10_000,
        instances_per_bag: [4, 6],
        seed: 5,
        ..GeneratorConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let censored = cohort.bags.iter().filter(|b| !b.survival.event).count() as f64 / 10_000.0;
    assert!((censored - 0.3).abs() <= 0.02, "censored fraction {censored}");
}

#[test]
fn tumor_fraction_separates_classes_and_shortens_survival() {
    let cohort = generate_cohort(&GeneratorConfig::default()).unwrap();
    let f: Vec<f64> = cohort.bags.iter().map(|b| b.tumor_fraction).collect();
    let labels: Vec<bool> = cohort.bags.iter().map(|b| b.label == 1).collect();
    assert_eq!(auc(&f, &labels).unwrap(), Some(1.0));

    let (ft, t): (Vec<f64>, Vec<f64>) = cohort
        .bags
        .iter()
        .filter(|b| b.survival.event)
        .map(|b| (b.tumor_fraction, b.survival.time))
        .unzip();
    assert!(spearman(&ft, &t) < 0.0);
}

#[test]
fn kmeans_recovers_planted_archetypes() {
    let cfg = GeneratorConfig::default();
    let cohort = generate_cohort(&cfg).unwrap();
    let bank = kmeans(&cohort.pooled_features(), cfg.n_phenotypes, 0, 100, 1e-6).unwrap();
    let matched = matched_cosines(&bank.centroids, &phenotype_archetypes(&cfg));
    assert!(matched.iter().all(|&c| c >= 0.95), "{matched:?}");
}

fn tiny_split(seed: u64) -> (hpdp::synthdata::Cohort, hpdp::synthdata::Cohort) {
    let cohort = generate_cohort(&GeneratorConfig {
        n_bags: 40,
        instances_per_bag: [8, 12],
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let (tr, va, te) = split_cohort(&cohort, (0.5, 0.25, 0.25), seed).unwrap();
    let mut val = va;
    val.bags.extend(te.bags);
    (tr, val)
}

fn teachers_for(cohort: &hpdp::synthdata::Cohort) -> Matrix {
    kmeans(&cohort.pooled_features(), 4, 0, 100, 1e-6).unwrap().teachers()
}

#[test]
fn frozen_model_stops_after_one_stale_epoch() {
    let (tr, va) = tiny_split(1);
    let cfg = TrainConfig {
        lr_init: 0.0,
        lr_final: 0.0,
        patience: 1,
        max_epochs: 10,
        ..TrainConfig::default()
    };
    let out = train(&tr, &va, Some(&teachers_for(&tr)), &cfg).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn training_is_bit_reproducible_and_respects_patience() {
    let (tr, va) = tiny_split(2);
    let teachers = teachers_for(&tr);
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 3,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = pool.install(|| train(&tr, &va, Some(&teachers), &cfg).unwrap());
    let b = pool.install(|| train(&tr, &va, Some(&teachers), &cfg).unwrap());
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert!(a.history.len() <= a.best_epoch + cfg.patience + 1);
}

#[test]
fn evaluation_is_deterministic_and_task_gated() {
    let (tr, va) = tiny_split(3);
    let cfg = TrainConfig {
        task: Task::Survival,
        max_epochs: 3,
        patience: 3,
        ..TrainConfig::default()
    };
    let out = train(&tr, &va, Some(&teachers_for(&tr)), &cfg).unwrap();
    let r1 = evaluate(&out.checkpoint, &va).unwrap();
    let r2 = evaluate(&out.checkpoint, &va).unwrap();
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    assert!(r1.c_index.is_some());
    assert!(r1.auc.is_none());
}

#[test]
fn training_beats_initialization_on_the_training_set() {
    let cohort = generate_cohort(&GeneratorConfig {
        n_bags: 60,
        seed: 4,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let (tr, va, _) = split_cohort(&cohort, (0.6, 0.2, 0.2), 4).unwrap();
    let teachers = teachers_for(&tr);
    let cfg = TrainConfig {
        max_epochs: 15,
        toggles: Toggles::all(),
        ..TrainConfig::default()
    };
    let arch = architecture_for(&cfg, &tr);
    let init = ModelParams::init(&arch, None, &mut stream(cfg.seed, "init")).unwrap();
    let frozen = Checkpoint {
        arch: arch.clone(),
        config: cfg.clone(),
        params: init.clone(),
        teachers: Some(teachers.clone()),
        epoch: 0,
        best_val: None,
    };
    let trained = train_from(&tr, &va, Some(&teachers), &cfg, &arch, init).unwrap();
    let before = evaluate(&frozen, &tr).unwrap().auc.unwrap();
    let after = evaluate(&trained.checkpoint, &tr).unwrap().auc.unwrap();
    assert!(after >= before, "{after} < {before}");
}
