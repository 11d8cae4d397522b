mod common;

use turbogan::generator::{Generator, GeneratorConfig};

fn desk() -> (Generator, turbogan::nn::ParamStore<f64>) {
    let g = Generator::new(GeneratorConfig::desk()).unwrap();
    let store = g.init_params::<f64>(7);
    (g, store)
}

#[test]
fn perturbation_stays_inside_receptive_field() {
    let (g, store) = desk();
    let n = 8192;
    let (left, right) = g.receptive_radius();
    assert!(left + right + 1 < n / 2, "field {left}+{right} too wide for the probe length");
    let r = common::locality(&g, &store, n, &[0, 1000, 4097, 6001, n - 1]);
    assert!(r.violations.is_empty(), "{:?}", &r.violations[..r.violations.len().min(10)]);
    assert!(r.changed_inside > 0);
}

#[test]
fn shift_by_quantum_shifts_interior() {
    let (g, store) = desk();
    let q = g.config.length_quantum();
    assert_eq!(q, 16);
    assert_eq!(common::shift_mismatch(&g, &store, 8192, q), 0.0);
    // a shift off the pooling grid does not commute
    assert!(common::shift_mismatch(&g, &store, 8192, q / 2) > 0.0);
}
