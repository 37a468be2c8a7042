use drl_core::causal::{Better, DiscreteCpt, Outcome};
use proptest::prelude::*;

/// Independent enumeration over the benchmark table written out by hand.
fn oracle() -> ([f64; 2], [f64; 2]) {
    let pu = [0.8, 0.2];
    let p_t1 = [0.24, 0.77];
    let p_r1 = [[0.93, 0.73], [0.87, 0.69]]; // [category][u]
    let e = |c: usize, u: usize| p_r1[c][u] * -1.0 + (1.0 - p_r1[c][u]) * -200.0;
    let mut cond = [0.0; 2];
    let mut intv = [0.0; 2];
    for c in 0..2 {
        let pa = |u: usize| if c == 0 { p_t1[u] } else { 1.0 - p_t1[u] };
        let z: f64 = (0..2).map(|u| pu[u] * pa(u)).sum();
        cond[c] = (0..2).map(|u| pu[u] * pa(u) / z * e(c, u)).sum();
        intv[c] = (0..2).map(|u| pu[u] * e(c, u)).sum();
    }
    (cond, intv)
}

#[test]
fn benchmark_expectations_match_enumeration() {
    let cpt = DiscreteCpt::benchmark();
    let (cond, intv) = oracle();
    for a in 0..2 {
        let c = cpt.conditional_query(a, Outcome::Expectation).unwrap();
        let d = cpt.backdoor_adjust(a, Outcome::Expectation).unwrap();
        assert!((c - cond[a]).abs() < 1e-9);
        assert!((d - intv[a]).abs() < 1e-9);
    }
    assert!((cond[0] + 32.6445).abs() < 1e-4);
    assert!((cond[1] + 29.389).abs() < 1e-3);
    assert!((intv[0] + 22.890).abs() < 1e-9);
    assert!((intv[1] + 34.034).abs() < 1e-9);
}

#[test]
fn benchmark_simpson_expectation() {
    let r = DiscreteCpt::benchmark()
        .simpson_check(Outcome::Expectation, Better::Higher)
        .unwrap();
    assert_eq!(r.preferred_action_observational, 1);
    assert_eq!(r.preferred_action_interventional, 0);
    assert!(r.paradox_flag);
    assert!(r.stratum_reversal);
}

#[test]
fn benchmark_simpson_probability() {
    let cpt = DiscreteCpt::benchmark();
    let r = cpt.simpson_check(Outcome::Prob(0), Better::Higher).unwrap();
    assert!((r.interventional[0] - 0.890).abs() < 1e-12);
    assert!((r.interventional[1] - 0.834).abs() < 1e-12);
    assert!((r.observational[0] - 0.8410).abs() < 1e-4);
    assert!((r.observational[1] - 0.8573).abs() < 1e-4);
    assert!(r.paradox_flag);
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        let mut out: Vec<f64> = v.iter().map(|x| x / s).collect();
        let head: f64 = out[..out.len() - 1].iter().sum();
        *out.last_mut().unwrap() = 1.0 - head;
        out
    })
}

fn cpt_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
    (
        simplex(3),
        prop::collection::vec(simplex(2), 3),
        prop::collection::vec(prop::collection::vec(simplex(3), 3), 2),
        prop::collection::vec(simplex(2), 3),
    )
}

proptest! {
    #[test]
    fn do_query_properties((pu, pa, py, pa2) in cpt_strategy()) {
        let cpt = DiscreteCpt::new(pu.clone(), pa, py.clone(), None).unwrap();
        let other = DiscreteCpt::new(pu, pa2, py, None).unwrap();
        for a in 0..2 {
            let mut total = 0.0;
            for y in 0..3 {
                let d = cpt.backdoor_adjust(a, Outcome::Prob(y)).unwrap();
                let c = cpt.conditional_query(a, Outcome::Prob(y)).unwrap();
                prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&c));
                // the intervention ignores p(a|u)
                prop_assert_eq!(d, other.backdoor_adjust(a, Outcome::Prob(y)).unwrap());
                total += d;
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_policy_means_no_confounding((pu, _pa, py, _) in cpt_strategy(), p in 0.05..0.95f64) {
        let pa = vec![vec![p, 1.0 - p]; 3];
        let cpt = DiscreteCpt::new(pu, pa, py, None).unwrap();
        for a in 0..2 {
            for y in 0..3 {
                let d = cpt.backdoor_adjust(a, Outcome::Prob(y)).unwrap();
                let c = cpt.conditional_query(a, Outcome::Prob(y)).unwrap();
                prop_assert!((d - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stratum_dominance_decides_do_preference((pu, pa, _, _) in cpt_strategy(), lo in prop::collection::vec(0.0..0.5f64, 3), gap in prop::collection::vec(0.01..0.5f64, 3)) {
        let py = vec![
            (0..3).map(|u| vec![lo[u] + gap[u], 1.0 - lo[u] - gap[u]]).collect::<Vec<_>>(),
            (0..3).map(|u| vec![lo[u], 1.0 - lo[u]]).collect::<Vec<_>>(),
        ];
        let cpt = DiscreteCpt::new(pu, pa, py, None).unwrap();
        let r = cpt.simpson_check(Outcome::Prob(0), Better::Higher).unwrap();
        prop_assert_eq!(r.preferred_action_interventional, 0);
    }
}
