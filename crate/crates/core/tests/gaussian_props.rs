use drl_core::numerics::{gaussian_logpdf, kl_diag_gaussians, DiagGaussian, Tape, Tensor};
use proptest::prelude::*;

fn vecs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-5.0..5.0f64, n),
        prop::collection::vec(0.01..10.0f64, n),
        prop::collection::vec(-5.0..5.0f64, n),
        prop::collection::vec(0.01..10.0f64, n),
    )
}

proptest! {
    #[test]
    fn kl_is_nonnegative((mq, vq, mp, vp) in vecs(4)) {
        let tape = Tape::new();
        let q = DiagGaussian::new(tape.constant(Tensor::row(&mq)), tape.constant(Tensor::row(&vq)));
        let p = DiagGaussian::new(tape.constant(Tensor::row(&mp)), tape.constant(Tensor::row(&vp)));
        prop_assert!(kl_diag_gaussians(&q, &p).unwrap().scalar() >= -1e-12);
        prop_assert!(kl_diag_gaussians(&q, &q).unwrap().scalar().abs() < 1e-12);
    }

    #[test]
    fn logpdf_peaks_at_mean((m, v, x, _) in vecs(3)) {
        let tape = Tape::new();
        let g = DiagGaussian::new(tape.constant(Tensor::row(&m)), tape.constant(Tensor::row(&v)));
        let at_mean = gaussian_logpdf(tape.constant(Tensor::row(&m)), &g).unwrap().scalar();
        let at_x = gaussian_logpdf(tape.constant(Tensor::row(&x)), &g).unwrap().scalar();
        prop_assert!(at_mean >= at_x);
    }
}
