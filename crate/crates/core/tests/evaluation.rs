use kspace_dx::classifier::ClassifierNet;
use kspace_dx::masking::fraction_to_count;
use kspace_dx::metrics::{
    evaluate, evaluate_at_rates, evaluate_per_line, initial_masks, lines_for_rate, rollouts, Acquisition,
    DEFAULT_THRESHOLD,
};
use kspace_dx::phantom::{generate, DatasetSpec, Slice};
use kspace_dx::policy::PolicyNet;

const COLS: usize = 32;

fn setup() -> (Vec<Slice>, ClassifierNet<f64>, PolicyNet<f64>) {
    let data = generate(&DatasetSpec {
        n_slices: 40,
        rows: 32,
        cols: COLS,
        lesion_band: 21..24,
        positive_fraction: 0.4,
        seed: 2,
        ..DatasetSpec::default()
    })
    .unwrap();
    (data, ClassifierNet::new(32, COLS, 4).unwrap(), PolicyNet::new(COLS, 6))
}

#[test]
fn full_sampling_agrees_across_acquisition() {
    let (data, net, policy) = setup();
    let inits = initial_masks(&data, COLS, 0.05, 0.0, 1).unwrap();
    let a = evaluate_at_rates(&net, Acquisition::Policy(&policy), &data, &inits, &[1.0]).unwrap();
    let b = evaluate_at_rates(&net, Acquisition::Random { seed: 3 }, &data, &inits, &[1.0]).unwrap();
    assert_eq!(a[0].lines, COLS - fraction_to_count(0.05, COLS));
    let (x, y) = (&a[0].result, &b[0].result);
    assert!((x.auc - y.auc).abs() < 1e-9);
    assert!((x.recall - y.recall).abs() < 1e-9 && (x.specificity - y.specificity).abs() < 1e-9);
}

#[test]
fn evaluation_is_deterministic() {
    let (data, net, policy) = setup();
    let inits = initial_masks(&data, COLS, 0.05, 0.01, 1).unwrap();
    let rates = [0.1, 0.25];
    for acq in [Acquisition::Policy(&policy), Acquisition::Random { seed: 11 }] {
        let a = evaluate_at_rates(&net, acq, &data, &inits, &rates).unwrap();
        let b = evaluate_at_rates(&net, acq, &data, &inits, &rates).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(inits, initial_masks(&data, COLS, 0.05, 0.01, 1).unwrap());
}

#[test]
fn per_line_curve_matches_rates_and_initial_state() {
    let (data, net, policy) = setup();
    let inits = initial_masks(&data, COLS, 0.05, 0.0, 9).unwrap();
    let initial = inits[0].len();
    let max_lines = 10;
    let curve = evaluate_per_line(&net, &policy, &data, &inits, max_lines).unwrap();
    assert_eq!(curve.len(), max_lines + 1);
    assert_eq!(curve.last().unwrap().sampled, initial + max_lines);

    let scores: Vec<f64> = data.iter().zip(&inits).map(|(s, m)| net.predict_masked(&s.kspace.cast::<f64>(), m).unwrap().prob).collect();
    let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
    let at_zero = evaluate(&scores, &labels, DEFAULT_THRESHOLD).unwrap();
    assert!((curve[0].result.auc - at_zero.auc).abs() < 1e-9);

    let rate = 0.25;
    let lines = lines_for_rate(rate, initial, COLS).unwrap();
    let by_rate = evaluate_at_rates(&net, Acquisition::Policy(&policy), &data, &inits, &[rate]).unwrap();
    assert!((by_rate[0].result.auc - curve[lines].result.auc).abs() < 1e-12);
}

#[test]
fn traces_respect_budget_and_order() {
    let (data, net, policy) = setup();
    let inits = initial_masks(&data, COLS, 0.05, 0.05, 0).unwrap();
    let traces = rollouts(&net, Acquisition::Policy(&policy), &data, &inits, 6, None).unwrap();
    for (t, init) in traces.iter().zip(&inits) {
        assert_eq!(t.lines(), 6);
        assert_eq!(&t.final_mask.order()[..init.len()], init.order());
        let chosen: Vec<usize> = t.steps[1..].iter().map(|s| s.column.unwrap()).collect();
        assert_eq!(&t.final_mask.order()[init.len()..], chosen.as_slice());
    }
    assert!(rollouts(&net, Acquisition::Policy(&policy), &data, &inits[1..], 6, None).is_err());
    assert!(lines_for_rate(0.01, 2, COLS).is_err());
}
