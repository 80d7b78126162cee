use bws_core::networks::LatentGaussian;
use bws_tensor::Rng;

/// Monte-Carlo estimate of `E_q[log q(z) - log p(z)]` for a diagonal Gaussian.
pub fn kl_monte_carlo(q: &LatentGaussian, samples: usize, rng: &mut Rng) -> f64 {
    let var = q.variance();
    let mut total = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for i in 0..q.dim() {
            let e = rng.normal();
            let z = q.mean[i] + var[i].sqrt() * e;
            // log q - log p; the 2π terms cancel.
            log_ratio += -0.5 * (q.log_var[i] + e * e) + 0.5 * z * z;
        }
        total += log_ratio;
    }
    total / samples as f64
}
