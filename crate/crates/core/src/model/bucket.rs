/// Maps a key-minus-query offset to a relative position bucket.
///
/// Half of the buckets (per direction, when bidirectional) hold exact small
/// offsets; the rest grow logarithmically up to `max_distance`, beyond which
/// everything shares the last bucket. In unidirectional mode future offsets
/// (positive) collapse to bucket 0.
pub fn relative_bucket(
    relative_distance: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets;
    let mut offset = 0;
    let distance = if bidirectional {
        buckets /= 2;
        if relative_distance > 0 {
            offset = buckets;
        }
        relative_distance.unsigned_abs() as usize
    } else {
        (-relative_distance.min(0)) as usize
    };
    let max_exact = buckets / 2;
    if distance < max_exact {
        return offset + distance;
    }
    let log_ratio = (distance as f64 / max_exact as f64).ln()
        / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (log_ratio * (buckets - max_exact) as f64) as usize;
    offset + large.min(buckets - 1)
}

/// Bucket matrix indexed `[query][key]`.
pub fn bucket_matrix(
    query_len: usize,
    key_len: usize,
    query_offset: usize,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> Vec<Vec<usize>> {
    (0..query_len)
        .map(|i| {
            let qpos = (i + query_offset) as i64;
            (0..key_len)
                .map(|j| relative_bucket(j as i64 - qpos, bidirectional, num_buckets, max_distance))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_offset() {
        assert_eq!(relative_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_bucket(0, false, 32, 128), 0);
    }

    #[test]
    fn sign_split() {
        let neg = relative_bucket(-1, true, 32, 128);
        let pos = relative_bucket(1, true, 32, 128);
        assert_ne!(neg, pos);
        assert_eq!((neg, pos), (1, 17));
    }

    // Hand-evaluated with 32 buckets, max distance 128:
    // bidirectional: 16 per direction, 8 exact; |d| >= 8 gives
    //   8 + floor(ln(|d|/8) / ln(16) * 8).
    // unidirectional: 32 buckets, 16 exact, only non-positive offsets count.
    #[test]
    fn table_minus8_to_8() {
        let expected_bi = [
            (-8, 8),
            (-7, 7),
            (-6, 6),
            (-5, 5),
            (-4, 4),
            (-3, 3),
            (-2, 2),
            (-1, 1),
            (0, 0),
            (1, 17),
            (2, 18),
            (3, 19),
            (4, 20),
            (5, 21),
            (6, 22),
            (7, 23),
            (8, 24),
        ];
        for (d, b) in expected_bi {
            assert_eq!(relative_bucket(d, true, 32, 128), b, "bidirectional {d}");
        }
        for d in -8i64..=8 {
            let expected = if d > 0 { 0 } else { (-d) as usize };
            assert_eq!(relative_bucket(d, false, 32, 128), expected, "causal {d}");
        }
    }

    #[test]
    fn logarithmic_region() {
        // 8 + floor(ln(12/8)/ln(16)*8) = 8 + floor(1.1699) = 9
        assert_eq!(relative_bucket(-12, true, 32, 128), 9);
        // 8 + floor(ln(64/8)/ln(16)*8) = 8 + 6 = 14
        assert_eq!(relative_bucket(-64, true, 32, 128), 14);
        // clamps to last bucket of the direction
        assert_eq!(relative_bucket(-1000, true, 32, 128), 15);
        assert_eq!(relative_bucket(1000, true, 32, 128), 31);
        // unidirectional: 16 + floor(ln(32/16)/ln(8)*16) = 16 + 5 = 21
        assert_eq!(relative_bucket(-32, false, 32, 128), 21);
        assert_eq!(relative_bucket(-500, false, 32, 128), 31);
    }

    #[test]
    fn monotone_in_distance() {
        for bidirectional in [true, false] {
            let mut last = 0;
            for d in 0..400i64 {
                let b = relative_bucket(-d, bidirectional, 32, 128);
                assert!(b >= last);
                last = b;
            }
        }
    }
}
