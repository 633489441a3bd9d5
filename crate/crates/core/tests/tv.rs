use ldct_core::linalg;
use ldct_core::phantom::EllipsePhantomSpec;
use ldct_core::tv::{grad, reconstruct_tv, solve_tv, tv_objective, TvParams};
use ldct_core::{FbpOperator, FidelityWeights, Projector, ScanGeometry};

fn setup(width: usize) -> (Projector, FbpOperator, EllipsePhantomSpec) {
    let g = ScanGeometry::preset("desk_small").unwrap();
    let spec = EllipsePhantomSpec {
        width,
        seed: 13,
        ..Default::default()
    };
    let shape = spec.shape();
    (Projector::new(g, shape), FbpOperator::new(g, shape), spec)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    linalg::norm(&linalg::sub(a, b)) / linalg::norm(b)
}

#[test]
fn weak_penalty_beats_fbp_on_clean_data() {
    let (projector, fbp, spec) = setup(32);
    let x = spec.generate(0);
    let y = projector.forward(&x).unwrap();
    let fbp_err = relative_error(fbp.reconstruct(&y).unwrap().values(), x.values());
    let params = TvParams {
        outer_iters: 30,
        ..TvParams::new(1e-8)
    };
    let tv = reconstruct_tv(&projector, &y, &params, None).unwrap();
    let tv_err = relative_error(tv.values(), x.values());
    assert!(tv_err <= fbp_err, "tv {tv_err} fbp {fbp_err}");
}

#[test]
fn objective_falls_and_constraint_closes() {
    let (projector, fbp, spec) = setup(32);
    let x = spec.generate(1);
    let clean = projector.forward(&x).unwrap();
    let noise = ldct_core::noise::NoiseModel::new(5e4, 10.0, 3).unwrap();
    let y = noise.log_transform(&noise.simulate_counts(&clean).unwrap()).unwrap();
    let params = TvParams::new(0.01);
    let w = FidelityWeights::Identity;
    let start = tv_objective(&projector, &y, &fbp.reconstruct(&y).unwrap(), &w, params.lambda).unwrap();
    let state = solve_tv(&projector, &y, &w, &params, None).unwrap();
    let end = tv_objective(&projector, &y, &state.x, &w, params.lambda).unwrap();
    assert!(end < start, "{end} >= {start}");
    let relative = state.primal_residual() / grad(&state.x).norm();
    assert!(relative < 1e-3, "{relative}");
}

#[test]
fn warm_start_is_respected() {
    let (projector, fbp, spec) = setup(16);
    let y = projector.forward(&spec.generate(2)).unwrap();
    let params = TvParams {
        outer_iters: 0,
        ..TvParams::new(0.01)
    };
    assert_eq!(
        reconstruct_tv(&projector, &y, &params, None).unwrap(),
        fbp.reconstruct(&y).unwrap()
    );
    let init = spec.generate(3);
    assert_eq!(
        reconstruct_tv(&projector, &y, &params, Some(init.clone())).unwrap(),
        init
    );
    let bad = TvParams { lambda: -1.0, ..params };
    assert!(reconstruct_tv(&projector, &y, &bad, None).is_err());
}
