//! Compact 2-D bit matrix used for relevance and clicked-pair lookups.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitGrid {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
}

impl BitGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        let n_bits = rows * cols;
        BitGrid {
            rows,
            cols,
            words: vec![0; n_bits.div_ceil(64)],
        }
    }

    #[inline]
    fn offsets(&self, row: usize, col: usize) -> (usize, u32) {
        debug_assert!(row < self.rows && col < self.cols);
        let idx = row * self.cols + col;
        (idx / 64, (idx % 64) as u32)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        let (w, b) = self.offsets(row, col);
        (self.words[w] >> b) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let (w, b) = self.offsets(row, col);
        if value {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Number of set bits in one row.
    pub fn row_count(&self, row: usize) -> u64 {
        (0..self.cols).filter(|&c| self.get(row, c)).count() as u64
    }

    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let n_bytes = (self.rows * self.cols).div_ceil(8);
        let mut out = vec![0u8; n_bytes];
        for (i, byte) in out.iter_mut().enumerate() {
            let word = self.words[i / 8];
            *byte = (word >> ((i % 8) * 8)) as u8;
        }
        out
    }

    pub(crate) fn from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Option<Self> {
        let n_bits = rows * cols;
        if bytes.len() != n_bits.div_ceil(8) {
            return None;
        }
        let mut grid = BitGrid::new(rows, cols);
        for (i, &byte) in bytes.iter().enumerate() {
            grid.words[i / 8] |= (byte as u64) << ((i % 8) * 8);
        }
        // trailing padding bits must be zero
        for idx in n_bits..grid.words.len() * 64 {
            if (grid.words[idx / 64] >> (idx % 64)) & 1 == 1 {
                return None;
            }
        }
        Some(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_roundtrip() {
        let mut g = BitGrid::new(5, 67);
        g.set(0, 0, true);
        g.set(4, 66, true);
        g.set(2, 33, true);
        g.set(2, 33, false);
        assert!(g.get(0, 0));
        assert!(g.get(4, 66));
        assert!(!g.get(2, 33));
        assert_eq!(g.count_ones(), 2);
    }

    #[test]
    fn byte_roundtrip() {
        let mut g = BitGrid::new(3, 21);
        for (r, c) in [(0, 1), (1, 20), (2, 0), (2, 19)] {
            g.set(r, c, true);
        }
        let bytes = g.to_bytes();
        let back = BitGrid::from_bytes(3, 21, &bytes).unwrap();
        assert_eq!(g, back);
    }
}
