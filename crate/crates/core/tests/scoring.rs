//! Scoring invariants and the exhaustive quantization oracle.

mod common;

use comet::config::SelectionConfig;
use comet::ndmath::{squared_distance, Matrix, Rng};
use comet::network::forward_window;
use comet::patching::coverage;
use comet::scoring::{
    aggregate, ema_normalize, local_scaling_distance, memory_score_query, per_variable_scores, select_variables,
    EmaState, MemoryTable,
};
use comet::vq::{build_memory_bank, quantize, ActivationSet, Codebook};
use common::{random_matrix, shared_drift_model};
use proptest::prelude::*;

fn scan_nearest(q: &[f64], cb: &Codebook) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for m in 0..cb.len() {
        let d: f64 = q.iter().zip(cb.entry(m)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

#[test]
fn quantization_matches_exhaustive_scan() {
    let mut rng = Rng::new(2024);
    let mut ties = 0;
    for n in 0..1000 {
        let d = 1 + (n % 6);
        let m = 1 + (n % 9);
        // integer grids make exact ties common
        let grid = |rng: &mut Rng| (rng.uniform() * 3.0).floor() - 1.0;
        let entries: Vec<f64> = (0..m * d).map(|_| if n % 2 == 0 { grid(&mut rng) } else { rng.normal() }).collect();
        let cb = Codebook {
            scale: 0,
            entries: Matrix::from_vec(m, d, entries).unwrap(),
        };
        let q: Vec<f64> = (0..d).map(|_| if n % 2 == 0 { grid(&mut rng) } else { rng.normal() }).collect();
        let got = quantize(&q, &cb).unwrap();
        let want = scan_nearest(&q, &cb);
        assert_eq!(got.index, want, "pair {n}");
        assert_eq!(got.z_q, cb.entry(want));
        let dists: Vec<f64> = (0..m).map(|j| squared_distance(&q, cb.entry(j))).collect();
        if dists.iter().filter(|&&x| x == dists[want]).count() > 1 {
            ties += 1;
        }
    }
    assert!(ties > 50, "too few ties exercised: {ties}");
}

fn rotate(v: &[f64], c: f64, s: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    for pair in out.chunks_mut(2) {
        if let [a, b] = pair {
            let (x, y) = (*a, *b);
            *a = c * x - s * y;
            *b = s * x + c * y;
        }
    }
    out
}

proptest! {
    #[test]
    fn memory_score_is_rotation_invariant(seed in 0u64..500, angle in 0.0f64..6.3, n in 1usize..6) {
        let mut rng = Rng::new(seed);
        let entries = random_matrix(7, 4, &mut rng);
        let q: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut act = ActivationSet::new();
        for m in [0, 2, 3, 5, 6] {
            act.record(0, m);
        }
        let cb = Codebook { scale: 0, entries: entries.clone() };
        let rotated_rows: Vec<Vec<f64>> =
            (0..7).map(|r| rotate(entries.row(r), angle.cos(), angle.sin())).collect();
        let rcb = Codebook { scale: 0, entries: Matrix::from_rows(&rotated_rows).unwrap() };
        let bank = build_memory_bank(&[cb], &act, 3).unwrap();
        let rbank = build_memory_bank(&[rcb], &act, 3).unwrap();
        let a = memory_score_query(&q, &bank.scales[0], n, 1e-8, true).unwrap();
        let b = memory_score_query(&rotate(&q, angle.cos(), angle.sin()), &rbank.scales[0], n, 1e-8, true).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn local_distance_is_symmetric_in_scales(
        q in prop::collection::vec(-3.0f64..3.0, 3),
        m in prop::collection::vec(-3.0f64..3.0, 3),
        s1 in 0.0f64..5.0,
        s2 in 0.0f64..5.0,
    ) {
        prop_assert_eq!(
            local_scaling_distance(&q, s1, &m, s2, 1e-8),
            local_scaling_distance(&q, s2, &m, s1, 1e-8)
        );
        let base = local_scaling_distance(&q, s1, &m, s2, 0.0);
        let wide = local_scaling_distance(&q, 10.0 * s1, &m, 10.0 * s2, 0.0);
        if s1 + s2 > 1e-6 {
            prop_assert!((base - 10.0 * wide).abs() <= 1e-9 * base.max(1.0));
        }
    }

    #[test]
    fn selection_never_empty_and_budget_is_exact(
        seed in 0u64..1000,
        vars in 1usize..7,
        len in 1usize..20,
        budget in 1usize..9,
        rho in 0.0f64..=100.0,
    ) {
        let mut rng = Rng::new(seed);
        let s = random_matrix(vars, len, &mut rng);
        let p = select_variables(&s, &SelectionConfig::Percentile { rho }, 1e-8).unwrap();
        prop_assert!(p.selected.iter().all(|set| set.contains(&0)));
        let b = select_variables(&s, &SelectionConfig::Budget { budget }, 1e-8).unwrap();
        for set in &b.selected {
            prop_assert_eq!(set.len(), budget.min(vars));
            prop_assert!(set.contains(&0));
        }
    }

    #[test]
    fn argmax_survives_affine_rescaling_at_zero_momentum(
        seed in 0u64..1000,
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let mut rng = Rng::new(seed);
        let mem: Vec<f64> = (0..30).map(|_| rng.uniform() * 4.0).collect();
        let quant: Vec<f64> = (0..30).map(|_| rng.uniform() * 2.0).collect();
        let fold = |m: &[f64], q: &[f64]| {
            let nm = ema_normalize(m, &mut EmaState::new(0.0), 1e-8).unwrap();
            let nq = ema_normalize(q, &mut EmaState::new(0.0), 1e-8).unwrap();
            aggregate(&nm, &nq, 0.5).unwrap()
        };
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
        let base = fold(&mem, &quant);
        let mut sorted = base.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        prop_assume!(sorted[0] - sorted[1] > 1e-6);
        let tm: Vec<f64> = mem.iter().map(|s| a * s + b).collect();
        let tq: Vec<f64> = quant.iter().map(|s| a * s + b).collect();
        prop_assert_eq!(argmax(&base), argmax(&fold(&tm, &tq)));
    }
}

#[test]
fn ema_closed_form_fold() {
    let gamma = 0.75;
    let mins = [2.0, 6.0, -1.0, 3.5, 0.25];
    let mut state = EmaState::new(gamma);
    for (t, &m) in mins.iter().enumerate() {
        state.update(m, m + 1.0);
        let closed = gamma.powi(t as i32) * mins[0]
            + (1..=t).map(|s| (1.0 - gamma) * gamma.powi((t - s) as i32) * mins[s]).sum::<f64>();
        assert!((state.mu_min - closed).abs() <= 1e-12);
    }
}

#[test]
fn quant_and_memory_scores_match_brute_force() {
    let det = &shared_drift_model().0.detector;
    let test = &shared_drift_model().1.test.values;
    let len = det.config.window.length;
    let window = Matrix::from_vec(len, 2, test.data()[300 * 2..(300 + len) * 2].to_vec()).unwrap();
    let fwd = forward_window(&det.params, &window).unwrap();
    let sc = &det.config.scoring;
    let table = MemoryTable::build(&det.params.codebooks, &det.bank, sc.n_neighbors, sc.epsilon, true).unwrap();
    let covs: Vec<_> = det.params.scale_specs.iter().map(|&s| coverage(s, len).unwrap()).collect();
    let (mem, quant) = per_variable_scores(&fwd, &table, &covs).unwrap();

    let k_count = det.params.scale_specs.len() as f64;
    for i in 0..2 {
        for t in 0..len {
            let mut q_sum = 0.0;
            let mut m_sum = 0.0;
            for (k, spec) in det.params.scale_specs.iter().enumerate() {
                let sf = &fwd.scales[k];
                let n = sf.num_patches();
                let covering: Vec<usize> =
                    (0..n).filter(|&j| j * spec.stride <= t && t < j * spec.stride + spec.patch).collect();
                let covering = if covering.is_empty() { vec![n - 1] } else { covering };
                let c = covering.len() as f64;
                for &j in &covering {
                    q_sum += squared_distance(sf.z_e[i].row(j), sf.z_q[i].row(j)).sqrt() / c;
                    let zq = sf.z_q[i].row(j);
                    m_sum += memory_score_query(zq, &det.bank.scales[k], sc.n_neighbors, sc.epsilon, true).unwrap() / c;
                }
            }
            assert!((quant.get(i, t) - q_sum / k_count).abs() <= 1e-12);
            assert!((mem.get(i, t) - m_sum / k_count).abs() <= 1e-12 * m_sum.abs().max(1.0));
        }
    }
}

#[test]
fn frozen_scoring_is_deterministic_across_thread_counts() {
    let det = &shared_drift_model().0.detector;
    let test = &shared_drift_model().1.test.values;
    let a = det.score(test).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| det.score(test).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.len(), test.rows());
    assert!(a.score.iter().all(|s| s.is_finite()));
}
