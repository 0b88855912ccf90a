use crate::nn::fnv1a;

/// Deterministic hashed bag-of-words embedding: lowercase whitespace tokens
/// are hashed into `d_t` buckets, counted, and the count vector is
/// L2-normalised. Empty text gives the zero vector.
pub fn toy_text_encode(text: &str, d_t: usize, seed: u64) -> Vec<f64> {
    assert!(d_t >= 8, "d_t must be at least 8");
    let counts = bucket_counts(text, d_t, seed);
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return counts;
    }
    counts.into_iter().map(|c| c / norm).collect()
}

pub(crate) fn bucket(token: &str, d_t: usize, seed: u64) -> usize {
    (fnv1a(seed, token.as_bytes()) % d_t as u64) as usize
}

fn bucket_counts(text: &str, d_t: usize, seed: u64) -> Vec<f64> {
    let mut counts = vec![0.0; d_t];
    for tok in text.split_whitespace() {
        counts[bucket(&tok.to_lowercase(), d_t, seed)] += 1.0;
    }
    counts
}
