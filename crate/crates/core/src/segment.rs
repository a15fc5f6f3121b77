//! Contiguous segmentations of a token sequence, consumed by segment
//! max-pooling.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of `0..n` into `k` non-empty contiguous segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    ids: Vec<usize>,
    boundaries: Vec<usize>,
}

impl SegmentMap {
    /// Builds a map from segment start offsets. `boundaries[0]` must be 0 and
    /// offsets must be strictly increasing and below `n`.
    pub fn from_boundaries(boundaries: Vec<usize>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if boundaries.first() != Some(&0) {
            return Err(Error::Input("first segment must start at 0".into()));
        }
        for w in boundaries.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Input(format!("boundaries not increasing: {boundaries:?}")));
            }
        }
        if let Some(&last) = boundaries.last() {
            if last >= n {
                return Err(Error::Index { index: last, len: n });
            }
        }
        let mut ids = Vec::with_capacity(n);
        for (k, &start) in boundaries.iter().enumerate() {
            let end = boundaries.get(k + 1).copied().unwrap_or(n);
            ids.extend(std::iter::repeat_n(k, end - start));
        }
        Ok(SegmentMap { ids, boundaries })
    }

    /// Builds a map from per-token ids, which must start at 0 and step by 0 or 1.
    pub fn from_ids(ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids[0] != 0 {
            return Err(Error::Input("segment ids must start at 0".into()));
        }
        let mut boundaries = vec![0];
        for (i, w) in ids.windows(2).enumerate() {
            match w[1].checked_sub(w[0]) {
                Some(0) => {}
                Some(1) => boundaries.push(i + 1),
                _ => return Err(Error::Input(format!("segment ids not contiguous at {}", i + 1))),
            }
        }
        Ok(SegmentMap { ids: ids.to_vec(), boundaries })
    }

    /// Even split into `k` segments; the first `n mod k` segments get one
    /// extra token.
    pub fn even(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::InvalidK { k, n });
        }
        let base = n / k;
        let extra = n % k;
        let mut boundaries = Vec::with_capacity(k);
        let mut start = 0;
        for seg in 0..k {
            boundaries.push(start);
            start += base + usize::from(seg < extra);
        }
        Self::from_boundaries(boundaries, n)
    }

    /// Whole sequence as one segment.
    pub fn whole(n: usize) -> Result<Self> {
        Self::even(n, 1)
    }

    /// Every `cls_id` or `sep_id` token is a segment of its own; each maximal
    /// run of other tokens forms one segment.
    pub fn by_separators(tokens: &[u32], cls_id: u32, sep_id: u32) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let special = |t: u32| t == cls_id || t == sep_id;
        let mut boundaries = vec![0];
        for i in 1..tokens.len() {
            if special(tokens[i]) || special(tokens[i - 1]) {
                boundaries.push(i);
            }
        }
        Self::from_boundaries(boundaries, tokens.len())
    }

    /// Breaks immediately after every marker position.
    pub fn by_markers(markers: &[usize], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if let Some(&bad) = markers.iter().find(|&&m| m >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        let mut starts: Vec<usize> = markers.iter().map(|m| m + 1).filter(|&s| s < n).collect();
        starts.push(0);
        starts.sort_unstable();
        starts.dedup();
        Self::from_boundaries(starts, n)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Number of tokens covered.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len()
    }

    pub fn segment_of(&self, token: usize) -> usize {
        self.ids[token]
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        let end = self.boundaries.get(k + 1).copied().unwrap_or(self.ids.len());
        self.boundaries[k]..end
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.num_segments()).map(|k| self.range(k).len()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_split_examples() {
        let s = SegmentMap::even(10, 4).unwrap();
        assert_eq!(s.lengths(), vec![3, 3, 2, 2]);
        assert_eq!(s.ids(), &[0, 0, 0, 1, 1, 1, 2, 2, 3, 3]);
        assert!(SegmentMap::even(8, 1).unwrap().ids().iter().all(|&i| i == 0));
        assert_eq!(SegmentMap::even(6, 6).unwrap().ids(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn even_split_rejects_bad_k() {
        assert_eq!(SegmentMap::even(3, 4), Err(Error::InvalidK { k: 4, n: 3 }));
        assert_eq!(SegmentMap::even(3, 0), Err(Error::InvalidK { k: 0, n: 3 }));
    }

    #[test]
    fn even_split_exhaustive_balance() {
        for n in 1..=64 {
            for k in 1..=n {
                let s = SegmentMap::even(n, k).unwrap();
                let lens = s.lengths();
                assert_eq!(lens.iter().sum::<usize>(), n);
                let (lo, hi) = (lens.iter().min().unwrap(), lens.iter().max().unwrap());
                assert!(hi - lo <= 1 && *lo >= 1, "n={n} k={k} {lens:?}");
            }
        }
    }

    const CLS: u32 = 101;
    const SEP: u32 = 102;

    #[test]
    fn separator_split_single_and_pair() {
        let s = SegmentMap::by_separators(&[CLS, 7, 8, SEP], CLS, SEP).unwrap();
        assert_eq!(s.ids(), &[0, 1, 1, 2]);
        let s = SegmentMap::by_separators(&[CLS, 7, SEP, 8, 8, SEP], CLS, SEP).unwrap();
        assert_eq!(s.ids(), &[0, 1, 2, 3, 3, 4]);
        assert_eq!(s.num_segments(), 5);
        let s = SegmentMap::by_separators(&[5, 5, 5], CLS, SEP).unwrap();
        assert_eq!(s.ids(), &[0, 0, 0]);
        assert_eq!(SegmentMap::by_separators(&[], CLS, SEP), Err(Error::EmptySequence));
    }

    #[test]
    fn marker_split() {
        assert_eq!(SegmentMap::by_markers(&[1], 5).unwrap().ids(), &[0, 0, 1, 1, 1]);
        assert_eq!(SegmentMap::by_markers(&[], 4).unwrap().ids(), &[0, 0, 0, 0]);
        assert_eq!(SegmentMap::by_markers(&[4], 5).unwrap().ids(), &[0; 5]);
        assert_eq!(SegmentMap::by_markers(&[5], 5), Err(Error::Index { index: 5, len: 5 }));
    }

    #[test]
    fn marker_split_matches_hand_scan() {
        // oracle: walk tokens, bump the id on the token after a marker
        let (n, markers) = (6, [0usize, 3]);
        let mut expect = Vec::new();
        let mut id = 0;
        for t in 0..n {
            if t > 0 && markers.contains(&(t - 1)) {
                id += 1;
            }
            expect.push(id);
        }
        assert_eq!(expect, vec![0, 1, 1, 1, 2, 2]);
        assert_eq!(SegmentMap::by_markers(&markers, n).unwrap().ids(), &expect[..]);
    }

    #[test]
    fn from_ids_validates() {
        assert!(SegmentMap::from_ids(&[0, 0, 1, 2, 2]).is_ok());
        assert!(SegmentMap::from_ids(&[0, 2]).is_err());
        assert!(SegmentMap::from_ids(&[1, 1]).is_err());
        assert!(SegmentMap::from_ids(&[0, 1, 0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn check_invariants(s: &SegmentMap, n: usize) {
            assert_eq!(s.len(), n);
            assert_eq!(s.boundaries()[0], 0);
            assert!(s.boundaries().windows(2).all(|w| w[0] < w[1]));
            assert!(s.ids().windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
            assert_eq!(*s.ids().last().unwrap() + 1, s.num_segments());
            assert_eq!(s.lengths().iter().sum::<usize>(), n);
            assert!(s.lengths().iter().all(|&l| l > 0));
        }

        proptest! {
            #[test]
            fn separators_yield_valid_maps(tokens in prop::collection::vec(0u32..6, 1..40)) {
                let s = SegmentMap::by_separators(&tokens, 0, 1).unwrap();
                check_invariants(&s, tokens.len());
            }

            #[test]
            fn markers_yield_valid_maps(n in 1usize..40, raw in prop::collection::vec(0usize..40, 0..8)) {
                let markers: Vec<usize> = raw.into_iter().filter(|&m| m < n).collect();
                let s = SegmentMap::by_markers(&markers, n).unwrap();
                check_invariants(&s, n);
            }
        }
    }
}
