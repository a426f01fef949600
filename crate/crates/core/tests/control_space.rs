use proptest::prelude::*;
use rsmp::control_space::{
    dirac_embed, mix, pair, validate, BoxBounds, CellPartition, ControlGrid, FeedbackMode, RegularControl, RelaxedControl,
};
use rsmp::smp::realize_regular;
use rsmp::Error;

fn grid(k: usize) -> ControlGrid {
    ControlGrid::uniform(&BoxBounds::new(vec![-1.0], vec![2.0]).unwrap(), k).unwrap()
}

fn simplex_rows(rows: usize, k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::collection::vec(1e-6f64..1.0, k), rows).prop_map(|rs| {
        rs.into_iter()
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(move |v| v / s)
            })
            .collect()
    })
}

fn control(weights: Vec<f64>, k: usize, steps: usize) -> RelaxedControl {
    RelaxedControl::from_weights(grid(k), 1.0, steps, FeedbackMode::OpenLoop, weights).unwrap()
}

const K: usize = 4;
const N: usize = 6;

proptest! {
    #[test]
    fn mixing_stays_on_the_simplex(a in simplex_rows(N, K), b in simplex_rows(N, K), eps in 0.0f64..=1.0) {
        let (a, b) = (control(a, K, N), control(b, K, N));
        let m = mix(&a, &b, eps).unwrap();
        prop_assert!(validate(&m).is_valid());
        for (i, w) in m.weights().iter().enumerate() {
            let expect = (1.0 - eps) * a.weights()[i] + eps * b.weights()[i];
            prop_assert!((w - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn mixing_identities(a in simplex_rows(N, K), b in simplex_rows(N, K), e1 in 0.0f64..=1.0, e2 in 0.0f64..=1.0) {
        let (a, b) = (control(a, K, N), control(b, K, N));
        prop_assert_eq!(&mix(&a, &b, 0.0).unwrap(), &a);
        prop_assert_eq!(&mix(&a, &b, 1.0).unwrap(), &b);
        // mixing twice towards b composes the weights
        let twice = mix(&mix(&a, &b, e1).unwrap(), &b, e2).unwrap();
        let once = mix(&a, &b, 1.0 - (1.0 - e1) * (1.0 - e2)).unwrap();
        for (x, y) in twice.weights().iter().zip(once.weights()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn pairing_is_affine_in_the_measure(a in simplex_rows(N, K), b in simplex_rows(N, K), eps in 0.0f64..=1.0) {
        let (a, b) = (control(a, K, N), control(b, K, N));
        let phi = |t: f64, u: &[f64]| (1.0 + t) * u[0] * u[0] - u[0];
        let lhs = pair(phi, &mix(&a, &b, eps).unwrap(), None).unwrap();
        let rhs = (1.0 - eps) * pair(phi, &a, None).unwrap() + eps * pair(phi, &b, None).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }

    #[test]
    fn refinement_preserves_time_independent_pairings(a in simplex_rows(N, K), f in 1usize..5) {
        let a = control(a, K, N);
        let phi = |_: f64, u: &[f64]| u[0].sin();
        let fine = a.refine(f).unwrap();
        prop_assert_eq!(fine.time_steps(), N * f);
        prop_assert!((pair(phi, &a, None).unwrap() - pair(phi, &fine, None).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn chattering_apportionment_error_is_bounded(a in simplex_rows(N, K), r in 1usize..20) {
        let a = control(a, K, N);
        let reg = realize_regular(&a, r).unwrap();
        prop_assert_eq!(reg.time_steps(), N * r);
        let g = grid(K);
        for k in 0..N {
            for (i, w) in a.weights_at(k, 0).iter().enumerate() {
                let slots = (0..r).filter(|s| reg.value_at(k * r + s, 0) == g.point(i)).count();
                prop_assert!((slots as f64 / r as f64 - w).abs() <= 1.0 / r as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip(a in simplex_rows(N, K)) {
        let a = control(a, K, N);
        let s = serde_json::to_string(&a).unwrap();
        let back: RelaxedControl = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(back, a);
    }
}

#[test]
fn validation_reports_violations() {
    let u = RelaxedControl::from_weights_unchecked(grid(2), 1.0, 2, FeedbackMode::OpenLoop, vec![0.5, 0.5, 1.2, -0.2]).unwrap();
    let report = validate(&u);
    assert!(!report.is_valid());
    assert!(RelaxedControl::from_weights(grid(2), 1.0, 2, FeedbackMode::OpenLoop, vec![0.5, 0.5, 1.2, -0.2]).is_err());
    assert!(RelaxedControl::from_weights(grid(2), 1.0, 1, FeedbackMode::OpenLoop, vec![0.5, 0.6]).is_err());
    assert!(RelaxedControl::from_weights(grid(2), 1.0, 1, FeedbackMode::OpenLoop, vec![f64::NAN, 1.0]).is_err());
}

#[test]
fn mixing_checks_shape_and_weight() {
    let a = RelaxedControl::uniform(grid(3), 1.0, 4, FeedbackMode::OpenLoop).unwrap();
    let b = RelaxedControl::uniform(grid(3), 1.0, 5, FeedbackMode::OpenLoop).unwrap();
    assert!(matches!(mix(&a, &b, 0.5), Err(Error::ShapeMismatch(_))));
    assert!(matches!(mix(&a, &a, 1.5), Err(Error::DomainError(_))));
}

#[test]
fn feedback_pairing_needs_paths() {
    let part = CellPartition::new(vec![-1.0], vec![1.0], 2).unwrap();
    let u = RelaxedControl::uniform(grid(2), 1.0, 3, FeedbackMode::StateFeedback { partition: part }).unwrap();
    assert_eq!(pair(|_, _| 1.0, &u, None), Err(Error::MissingPaths));
}

#[test]
fn dirac_embedding_is_one_hot() {
    let g = grid(4);
    let reg = RegularControl::from_fn(g.bounds().clone(), 1.0, 4, FeedbackMode::OpenLoop, |k, _| g.point(k).to_vec()).unwrap();
    let u = dirac_embed(&reg, &g).unwrap();
    for k in 0..4 {
        let w = u.weights_at(k, 0);
        assert_eq!(w[k], 1.0);
        assert_eq!(w.iter().sum::<f64>(), 1.0);
    }
    // a value away from every atom is rejected
    let off = RegularControl::from_fn(g.bounds().clone(), 1.0, 1, FeedbackMode::OpenLoop, |_, _| vec![0.1]).unwrap();
    assert!(matches!(dirac_embed(&off, &g), Err(Error::ValueOffGrid { .. })));
}

#[test]
fn cells_clamp_at_the_edges() {
    let part = CellPartition::new(vec![0.0, 0.0], vec![1.0, 2.0], 4).unwrap();
    assert_eq!(part.num_cells(), 16);
    assert_eq!(part.cell_of(&[-5.0, -5.0]), part.cell_of(&[0.01, 0.01]));
    assert_eq!(part.cell_of(&[5.0, 5.0]), part.cell_of(&[0.99, 1.99]));
}
