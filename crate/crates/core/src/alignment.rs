//! Word-level alignment sets, subword-level alignment matrices and the
//! Pharaoh text format (`i-j` sure links, `i?j` possible links).

use std::collections::BTreeMap;
use std::fmt;

/// Links between source word `i` and target word `j`.
///
/// Each link is either sure or possible; the sure links form a subset of all
/// links, so [`AlignmentSet::len`] is the size of the possible set.
/// Predictions are stored as sure links.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AlignmentSet {
    links: BTreeMap<(usize, usize), bool>,
}

impl AlignmentSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a link. Re-adding an existing link only ever upgrades it to sure.
    pub fn insert(&mut self, i: usize, j: usize, sure: bool) {
        let e = self.links.entry((i, j)).or_insert(sure);
        *e |= sure;
    }

    pub fn insert_sure(&mut self, i: usize, j: usize) {
        self.insert(i, j, true);
    }

    pub fn insert_possible(&mut self, i: usize, j: usize) {
        self.insert(i, j, false);
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.links.contains_key(&(i, j))
    }

    pub fn is_sure(&self, i: usize, j: usize) -> bool {
        self.links.get(&(i, j)).copied().unwrap_or(false)
    }

    /// Number of links (the possible set, sure links included).
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn sure_len(&self) -> usize {
        self.links.values().filter(|&&s| s).count()
    }

    /// `(i, j, sure)` sorted by `(i, j)`.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        self.links.iter().map(|(&(i, j), &s)| (i, j, s))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.keys().copied()
    }

    pub fn sure_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().filter(|(_, &s)| s).map(|(&k, _)| k)
    }

    /// Swaps source and target sides.
    pub fn transpose(&self) -> Self {
        AlignmentSet {
            links: self.links.iter().map(|(&(i, j), &s)| ((j, i), s)).collect(),
        }
    }

    /// Largest source and target word index, if any link exists.
    pub fn max_indices(&self) -> Option<(usize, usize)> {
        self.links.keys().fold(None, |acc, &(i, j)| match acc {
            None => Some((i, j)),
            Some((a, b)) => Some((a.max(i), b.max(j))),
        })
    }

    /// Parses one Pharaoh line. Indices in the text start at `index_base`.
    pub fn parse_pharaoh(line: &str, index_base: usize) -> Result<Self, String> {
        let mut set = AlignmentSet::new();
        for token in line.split_whitespace() {
            let (i, j, sure) = parse_link(token, index_base)?;
            set.insert(i, j, sure);
        }
        Ok(set)
    }

    /// Pharaoh text with 0-based indices: sure links as `i-j`, possible-only as `i?j`.
    pub fn to_pharaoh(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AlignmentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (i, j, sure)) in self.links().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{i}{}{j}", if sure { '-' } else { '?' })?;
        }
        Ok(())
    }
}

impl FromIterator<(usize, usize)> for AlignmentSet {
    /// Collects sure links.
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        let mut set = AlignmentSet::new();
        for (i, j) in iter {
            set.insert_sure(i, j);
        }
        set
    }
}

fn parse_link(token: &str, base: usize) -> Result<(usize, usize, bool), String> {
    if token.starts_with('-') {
        return Err(format!("negative index in link `{token}`"));
    }
    let sep = token
        .find(['-', '?'])
        .ok_or_else(|| format!("malformed link `{token}`, expected i-j or i?j"))?;
    let sure = token.as_bytes()[sep] == b'-';
    let (left, right) = (&token[..sep], &token[sep + 1..]);
    if right.starts_with('-') {
        return Err(format!("negative index in link `{token}`"));
    }
    let index = |s: &str| -> Result<usize, String> {
        let v: usize = s
            .parse()
            .map_err(|_| format!("malformed link `{token}`, expected i-j or i?j"))?;
        v.checked_sub(base)
            .ok_or_else(|| format!("index {v} in link `{token}` is below the index base {base}"))
    };
    Ok((index(left)?, index(right)?, sure))
}

/// Dense boolean `rows × cols` matrix of subword links.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AlignmentMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        AlignmentMatrix {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        AlignmentMatrix { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Set positions in row-major order.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cols = self.cols;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| (k / cols, k % cols))
    }

    pub fn transpose(&self) -> Self {
        AlignmentMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Elementwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &AlignmentMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_sure_and_possible() {
        let set = AlignmentSet::parse_pharaoh("0-0 1?2", 0).unwrap();
        assert_eq!(set.sure_pairs().collect::<Vec<_>>(), [(0, 0)]);
        assert_eq!(set.pairs().collect::<Vec<_>>(), [(0, 0), (1, 2)]);
        assert_eq!(set.to_pharaoh(), "0-0 1?2");
    }

    #[test]
    fn empty_line_and_duplicates() {
        assert!(AlignmentSet::parse_pharaoh("", 0).unwrap().is_empty());
        assert!(AlignmentSet::parse_pharaoh("   ", 0).unwrap().is_empty());
        let set = AlignmentSet::parse_pharaoh("0-0 0-0", 0).unwrap();
        assert_eq!(set.len(), 1);
        // a sure annotation wins over a possible one for the same pair
        let set = AlignmentSet::parse_pharaoh("3?4 3-4", 0).unwrap();
        assert!(set.is_sure(3, 4));
    }

    #[test]
    fn rejects_malformed_and_negative() {
        for bad in ["0_0", "a-1", "1-", "-1-0", "0--1", "1-2-3", "0?"] {
            assert!(AlignmentSet::parse_pharaoh(bad, 0).is_err(), "{bad}");
        }
        assert!(AlignmentSet::parse_pharaoh("0-1", 1).is_err());
    }

    #[test]
    fn one_based_input() {
        let set = AlignmentSet::parse_pharaoh("1-1 2?3", 1).unwrap();
        assert_eq!(set.to_pharaoh(), "0-0 1?2");
    }

    #[test]
    fn matrix_basics() {
        let m = AlignmentMatrix::from_fn(2, 3, |i, j| i == 1 && j == 2);
        assert_eq!(m.count(), 1);
        assert_eq!(m.ones().collect::<Vec<_>>(), [(1, 2)]);
        assert!(m.transpose().get(2, 1));
        assert!(AlignmentMatrix::zeros(2, 3).is_subset_of(&m));
        assert!(!m.is_subset_of(&AlignmentMatrix::zeros(2, 3)));
    }

    proptest! {
        #[test]
        fn pharaoh_roundtrip(links in proptest::collection::vec((0usize..40, 0usize..40, any::<bool>()), 0..30)) {
            let mut set = AlignmentSet::new();
            for (i, j, s) in links {
                set.insert(i, j, s);
            }
            let text = set.to_pharaoh();
            prop_assert_eq!(AlignmentSet::parse_pharaoh(&text, 0).unwrap(), set);
        }
    }
}
