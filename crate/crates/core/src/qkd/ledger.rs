use std::collections::BTreeMap;

/// Set of consumed half-open offset ranges `[start, end)`.
///
/// Adjacent ranges are merged so long runs of sequential draws stay O(1) in
/// memory. Inserting a range that intersects an existing one is reported as an
/// overlap and leaves the ledger unchanged.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OffsetLedger {
    runs: BTreeMap<u64, u64>,
    total: u64,
    overlaps: u64,
}

impl OffsetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// True if any bit of `[start, start + len)` is already recorded.
    pub fn intersects(&self, start: u64, len: u64) -> bool {
        let end = start + len;
        if let Some((_, &e)) = self.runs.range(..end).next_back() {
            if e > start {
                return true;
            }
        }
        false
    }

    /// Records `[start, start + len)`. Returns false on overlap.
    pub fn insert(&mut self, start: u64, len: u64) -> bool {
        if len == 0 {
            return true;
        }
        if self.intersects(start, len) {
            self.overlaps += 1;
            return false;
        }
        let mut s = start;
        let mut e = start + len;
        if let Some((&ps, &pe)) = self.runs.range(..s).next_back() {
            if pe == s {
                self.runs.remove(&ps);
                s = ps;
            }
        }
        if let Some(ne) = self.runs.remove(&e) {
            e = ne;
        }
        self.runs.insert(s, e);
        self.total += len;
        true
    }

    pub fn total_bits(&self) -> u64 {
        self.total
    }

    /// Number of rejected overlapping inserts so far.
    pub fn overlap_count(&self) -> u64 {
        self.overlaps
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.runs.iter().map(|(&s, &e)| (s, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_adjacent_runs() {
        let mut l = OffsetLedger::new();
        assert!(l.insert(0, 500));
        assert!(l.insert(500, 256));
        assert!(l.insert(1000, 10));
        assert!(l.insert(756, 244));
        assert_eq!(l.run_count(), 1);
        assert_eq!(l.total_bits(), 1010);
    }

    #[test]
    fn detects_overlap() {
        let mut l = OffsetLedger::new();
        l.insert(100, 50);
        assert!(!l.insert(149, 2));
        assert!(!l.insert(90, 11));
        assert!(!l.insert(120, 5));
        assert!(l.insert(150, 1));
        assert!(l.insert(99, 1));
        assert_eq!(l.overlap_count(), 3);
    }

    proptest::proptest! {
        #[test]
        fn matches_bitmap_oracle(ops in proptest::collection::vec((0u64..300, 1u64..40), 1..60)) {
            let mut l = OffsetLedger::new();
            let mut used = vec![false; 400];
            for (s, n) in ops {
                let clash = (s..s + n).any(|i| used[i as usize]);
                proptest::prop_assert_eq!(l.insert(s, n), !clash);
                if !clash {
                    for i in s..s + n { used[i as usize] = true; }
                }
            }
            proptest::prop_assert_eq!(l.total_bits(), used.iter().filter(|&&b| b).count() as u64);
        }
    }
}
