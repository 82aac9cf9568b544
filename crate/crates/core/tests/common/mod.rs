//! Shared test support: an independent brute-force oracle for the built-in
//! experiments and the randomized property suites.
#![allow(dead_code)]

pub mod oracle;
pub mod props;

/// `|observed - expected| <= 4σ` for a binomial frequency over `n` draws.
pub fn within_4_sigma(count: u64, n: u64, p: f64) -> bool {
    let f = count as f64 / n as f64;
    let sigma = (p * (1.0 - p)).max(0.0).sqrt() / (n as f64).sqrt();
    (f - p).abs() <= 4.0 * sigma + 1e-9
}
