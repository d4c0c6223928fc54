use serde::{Deserialize, Serialize};

/// Exact size statistics over committed blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub count: u64,
    pub total_bytes: u64,
    pub mean: f64,
    /// Middle element, or the mean of the two middle elements for even counts.
    pub median: f64,
    pub max: u64,
    pub threshold: Option<ThresholdStats>,
}

/// What would remain if every blob larger than `threshold` were discarded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub threshold: u64,
    pub retained_count: u64,
    pub retained_bytes: u64,
    pub count_fraction: f64,
    pub byte_fraction: f64,
}

pub fn size_stats(sizes: impl IntoIterator<Item = u64>, threshold: Option<u64>) -> SizeStats {
    let mut sizes: Vec<u64> = sizes.into_iter().collect();
    sizes.sort_unstable();
    let count = sizes.len() as u64;
    let total_bytes: u64 = sizes.iter().sum();
    let (mean, median) = if sizes.is_empty() {
        (0.0, 0.0)
    } else {
        let mid = sizes.len() / 2;
        let median = if sizes.len() % 2 == 1 {
            sizes[mid] as f64
        } else {
            (sizes[mid - 1] as f64 + sizes[mid] as f64) / 2.0
        };
        (total_bytes as f64 / count as f64, median)
    };

    let threshold = threshold.map(|t| {
        let retained = sizes.partition_point(|&s| s <= t);
        let retained_bytes: u64 = sizes[..retained].iter().sum();
        ThresholdStats {
            threshold: t,
            retained_count: retained as u64,
            retained_bytes,
            count_fraction: ratio(retained as u64, count),
            byte_fraction: ratio(retained_bytes, total_bytes),
        }
    });

    SizeStats {
        count,
        total_bytes,
        mean,
        median,
        max: sizes.last().copied().unwrap_or(0),
        threshold,
    }
}

fn ratio(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        1.0
    } else {
        part as f64 / whole as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_examples() {
        let s = size_stats([10, 20, 30], Some(25));
        assert_eq!(s.median, 20.0);
        assert_eq!(s.mean, 20.0);
        let t = s.threshold.unwrap();
        assert_eq!(t.count_fraction, 2.0 / 3.0);
        assert_eq!(t.byte_fraction, 30.0 / 60.0);
    }

    #[test]
    fn even_count_median() {
        assert_eq!(size_stats([4, 1, 3, 2], None).median, 2.5);
    }

    #[test]
    fn empty_store() {
        let s = size_stats([], Some(5));
        assert_eq!((s.count, s.total_bytes, s.mean, s.median), (0, 0, 0.0, 0.0));
        assert_eq!(s.threshold.unwrap().count_fraction, 1.0);
    }
}
