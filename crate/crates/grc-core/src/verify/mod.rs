//! Runtime verification suites and independent oracles.
//!
//! The oracles here deliberately avoid the code paths they check: the dense
//! convolution below densifies into a box array and runs plain nested loops,
//! the KL check below draws Monte-Carlo samples, the projection check replays
//! the projection formulas point by point.


/// One named check with its worst observed error.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_err: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, max_err: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            max_err,
            detail,
        }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Direct dense 3D convolution over the bounding box of the occupied set,
/// with zeros at empty sites, evaluated at `out_keys`.
///
/// `kernel` is tap-major [27*c_in x c_out] where tap index runs
/// lexicographically over (di, dj, dk) in {-1,0,1}^3. For stride 2 the output
/// coordinate J reads input sites 2J + delta.
#[allow(clippy::too_many_arguments)]
pub fn dense_conv3d_oracle(
    in_keys: &[[i64; 3]],
    in_features: &[f64],
    c_in: usize,
    kernel: &[f64],
    c_out: usize,
    bias: &[f64],
    stride: i64,
    out_keys: &[[i64; 3]],
) -> Vec<f64> {
    // densify
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for k in in_keys {
        for ax in 0..3 {
            lo[ax] = lo[ax].min(k[ax]);
            hi[ax] = hi[ax].max(k[ax]);
        }
    }
    if in_keys.is_empty() {
        lo = [0; 3];
        hi = [-1; 3];
    }
    let dims = [
        (hi[0] - lo[0] + 1).max(0) as usize,
        (hi[1] - lo[1] + 1).max(0) as usize,
        (hi[2] - lo[2] + 1).max(0) as usize,
    ];
    let mut dense = vec![0.0; dims[0] * dims[1] * dims[2] * c_in];
    let at = |i: i64, j: i64, k: i64| -> Option<usize> {
        if i < lo[0] || i > hi[0] || j < lo[1] || j > hi[1] || k < lo[2] || k > hi[2] {
            return None;
        }
        let (ii, jj, kk) = (
            (i - lo[0]) as usize,
            (j - lo[1]) as usize,
            (k - lo[2]) as usize,
        );
        Some(((ii * dims[1] + jj) * dims[2] + kk) * c_in)
    };
    for (row, key) in in_keys.iter().enumerate() {
        let base = at(key[0], key[1], key[2]).expect("key inside its own bbox");
        dense[base..base + c_in].copy_from_slice(&in_features[row * c_in..(row + 1) * c_in]);
    }

    // direct convolution at the requested output sites
    let mut out = vec![0.0; out_keys.len() * c_out];
    for (o, okey) in out_keys.iter().enumerate() {
        let orow = &mut out[o * c_out..(o + 1) * c_out];
        orow.copy_from_slice(bias);
        let mut tap = 0usize;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    if let Some(base) = at(
                        stride * okey[0] + di,
                        stride * okey[1] + dj,
                        stride * okey[2] + dk,
                    ) {
                        for ci in 0..c_in {
                            let x = dense[base + ci];
                            if x != 0.0 {
                                let krow = (tap * c_in + ci) * c_out;
                                for co in 0..c_out {
                                    orow[co] += x * kernel[krow + co];
                                }
                            }
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
    out
}

/// Monte-Carlo estimate of KL(p || q) for diagonal Gaussians given as
/// (mu, sigma) pairs: E_p[ln p(x) - ln q(x)] over `samples` draws.
/// Returns (estimate, standard_error).
pub fn kl_monte_carlo(
    mu_p: &[f64],
    sigma_p: &[f64],
    mu_q: &[f64],
    sigma_q: &[f64],
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = crate::rng::SplitMix64::new(seed);
    let c = mu_p.len();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for i in 0..c {
            let x = mu_p[i] + sigma_p[i] * rng.normal();
            let zp = (x - mu_p[i]) / sigma_p[i];
            let zq = (x - mu_q[i]) / sigma_q[i];
            // ln p - ln q for the i-th coordinate
            log_ratio += -0.5 * zp * zp - sigma_p[i].ln() + 0.5 * zq * zq + sigma_q[i].ln();
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Single-stage full cross-attention oracle used only at tiny sizes in tests;
/// see the fusion suite.
pub fn composed_equal(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

mod suites;
pub use suites::{fusion_suite, grad_suite, kl_suite, projection_suite, run_named_suite};

/// Suite names accepted by the verification command.
pub fn suite_names() -> &'static [&'static str] {
    &["grad", "kl", "projection", "fusion", "all"]
}
