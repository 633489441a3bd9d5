use rand::Rng;

use super::tensor::Tensor;

pub fn random_tensor<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences with `h = 1e-5`, compared entrywise at 1e-4 relative.
/// Entries far below the largest gradient are compared against that scale,
/// and differences under the finite-difference roundoff level pass.
pub fn assert_gradients_match(name: &str, at: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) {
    assert_eq!(at.len(), analytic.len(), "{name}: length");
    let h = 1e-5;
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut v = at.to_vec();
    let noise_floor = 1e-8 * f(&v).abs().max(1.0);
    for i in 0..v.len() {
        let orig = v[i];
        v[i] = orig + h;
        let up = f(&v);
        v[i] = orig - h;
        let down = f(&v);
        v[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
        let diff = (analytic[i] - numeric).abs();
        let rel = diff / denom;
        assert!(
            rel <= 1e-4 || diff <= noise_floor,
            "{name}[{i}]: analytic {} vs numeric {numeric} (rel {rel:e})",
            analytic[i]
        );
    }
}
