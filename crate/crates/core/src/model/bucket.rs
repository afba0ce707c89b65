//! T5 relative-position bucketing.

/// Maps `relative_position = key_pos − query_pos` to a bucket.
///
/// Bidirectional tables spend half their buckets on each sign; the decoder's
/// unidirectional table only distinguishes keys at or before the query. In
/// each half the first `half/2` distances get their own bucket and the rest
/// are spread logarithmically up to `max_distance`, beyond which everything
/// shares the last bucket. Arithmetic is done in `f32` like the reference.
pub fn relative_position_bucket(relative_position: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets;
    let mut base = 0;
    let distance = if bidirectional {
        buckets /= 2;
        if relative_position > 0 {
            base = buckets;
        }
        relative_position.unsigned_abs() as usize
    } else {
        (-relative_position.min(0)) as usize
    };
    let max_exact = buckets / 2;
    if distance < max_exact {
        return base + distance;
    }
    let scaled = ((distance as f32 / max_exact as f32).ln() / (max_distance as f32 / max_exact as f32).ln()
        * (buckets - max_exact) as f32) as usize;
    base + (max_exact + scaled).min(buckets - 1)
}

/// Bucket indices for every (query, key) pair, row-major over queries.
pub fn bucket_matrix(
    query_positions: &[usize],
    key_positions: &[usize],
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(query_positions.len() * key_positions.len());
    for &q in query_positions {
        for &k in key_positions {
            let rp = k as i64 - q as i64;
            out.push(relative_position_bucket(rp, bidirectional, num_buckets, max_distance));
        }
    }
    out
}
