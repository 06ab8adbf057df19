//! Deterministic RNG streams and small shared helpers.
//!
//! Every random decision in the toolkit draws from a stream derived from
//! (base seed, purpose tags). Streams are independent of thread scheduling
//! and batch composition, so parallel runs reproduce serial runs exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, 64-bit. Stable across Rust releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a named RNG stream from a base seed and purpose tags.
///
/// Tags typically look like `["specaug", utt_id, "epoch3"]`.
pub fn stream_rng(seed: u64, tags: &[&str]) -> ChaCha8Rng {
    let mut buf = Vec::with_capacity(8 + tags.iter().map(|t| t.len() + 1).sum::<usize>());
    buf.extend_from_slice(&seed.to_le_bytes());
    for t in tags {
        buf.push(0x1f); // separator so ["ab","c"] != ["a","bc"]
        buf.extend_from_slice(t.as_bytes());
    }
    ChaCha8Rng::seed_from_u64(fnv1a(&buf))
}

/// log(exp(a) + exp(b)) without overflow; handles -inf inputs.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log-sum-exp over a slice; returns -inf for an empty or all -inf slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
