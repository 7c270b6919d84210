//! CSR and the slice-partitioned CSR variant.
//!
//! A sliced matrix splits every row into runs of at most `slice_cap` non-zeros.
//! The CSR row-offset array is replaced by two arrays:
//!
//! * `row_indices[s]`: the row that slice `s` belongs to;
//! * `slice_offsets[s]..slice_offsets[s + 1]`: the range of slice `s` in the
//!   column/value arrays.
//!
//! Rows are packed greedily, so every slice of a row except the last holds
//! exactly `slice_cap` entries, and empty rows produce no slices at all.
//!
//! Rows are edge sources: entry `(r, c, w)` is the edge `r -> c` with weight `w`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of non-zeros one slice may hold.
pub const DEFAULT_SLICE_CAP: usize = 32;

const SCSR_MAGIC: &[u8; 4] = b"SCSR";
const SCSR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Csr {
    row_offsets: Vec<u32>,
    col_indices: Vec<u32>,
    values: Vec<f32>,
}

impl Csr {
    pub fn empty(node_count: usize) -> Self {
        Csr {
            row_offsets: vec![0; node_count + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a validated matrix from raw arrays.
    pub fn new(row_offsets: Vec<u32>, col_indices: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        let csr = Csr {
            row_offsets,
            col_indices,
            values,
        };
        csr.validate()?;
        Ok(csr)
    }

    /// Builds a square `node_count × node_count` matrix from an edge list.
    /// Edges may be in any order; duplicate `(src, dst)` pairs are rejected.
    pub fn from_edges(node_count: usize, edges: &[(u32, u32, f32)]) -> Result<Self> {
        let mut sorted = edges.to_vec();
        sorted.sort_by_key(|&(s, d, _)| (s, d));
        let mut row_offsets = vec![0u32; node_count + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        for (i, &(s, d, w)) in sorted.iter().enumerate() {
            for (v, what) in [(s, "edge source"), (d, "edge destination")] {
                if v as usize >= node_count {
                    return Err(Error::Bounds {
                        what,
                        index: v as usize,
                        bound: node_count,
                    });
                }
            }
            if i > 0 && sorted[i - 1].0 == s && sorted[i - 1].1 == d {
                return Err(Error::Validation(format!("duplicate edge ({s}, {d})")));
            }
            row_offsets[s as usize + 1] += 1;
            col_indices.push(d);
            values.push(w);
        }
        for r in 0..node_count {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(Csr {
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Checks the structural invariants, naming the first violation.
    pub fn validate(&self) -> Result<()> {
        let offs = &self.row_offsets;
        if offs.is_empty() {
            return Err(Error::Validation(
                "row_offsets must hold node_count + 1 entries".into(),
            ));
        }
        if offs[0] != 0 {
            return Err(Error::Validation("row_offsets[0] must be 0".into()));
        }
        if self.col_indices.len() != self.values.len() {
            return Err(Error::Validation(format!(
                "col_indices ({}) and values ({}) differ in length",
                self.col_indices.len(),
                self.values.len()
            )));
        }
        let n = self.node_count();
        for r in 0..n {
            if offs[r + 1] < offs[r] {
                return Err(Error::Validation(format!(
                    "row_offsets must be non-decreasing (row {r})"
                )));
            }
        }
        if offs[n] as usize != self.col_indices.len() {
            return Err(Error::Validation(format!(
                "row_offsets[last] = {} must equal nnz = {}",
                offs[n],
                self.col_indices.len()
            )));
        }
        for r in 0..n {
            let cols = self.row(r).0;
            for (k, &c) in cols.iter().enumerate() {
                if c as usize >= n {
                    return Err(Error::Validation(format!(
                        "column {c} out of range in row {r}"
                    )));
                }
                if k > 0 && cols[k - 1] >= c {
                    return Err(Error::Validation(format!(
                        "column indices must strictly increase within row {r}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[u32] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (lo, hi) = (
            self.row_offsets[r] as usize,
            self.row_offsets[r + 1] as usize,
        );
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn degree(&self, r: usize) -> usize {
        (self.row_offsets[r + 1] - self.row_offsets[r]) as usize
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, f32)> + '_ {
        (0..self.node_count()).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter()
                .zip(vals)
                .map(move |(&c, &w)| (r as u32, c, w))
        })
    }

    pub fn contains(&self, src: u32, dst: u32) -> bool {
        self.row(src as usize).0.binary_search(&dst).is_ok()
    }

    /// Entrywise sum of two matrices with disjoint supports.
    pub fn disjoint_sum(&self, other: &Csr) -> Result<Csr> {
        if self.node_count() != other.node_count() {
            return Err(Error::Argument("node counts differ".into()));
        }
        let mut edges: Vec<_> = self.edges().collect();
        edges.extend(other.edges());
        Csr::from_edges(self.node_count(), &edges)
    }
}

/// Row-slice representation; see the module docs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicedCsr {
    row_indices: Vec<u32>,
    slice_offsets: Vec<u32>,
    col_indices: Vec<u32>,
    values: Vec<f32>,
    slice_cap: usize,
}

impl SlicedCsr {
    pub fn empty(slice_cap: usize) -> Self {
        SlicedCsr {
            row_indices: Vec::new(),
            slice_offsets: vec![0],
            col_indices: Vec::new(),
            values: Vec::new(),
            slice_cap,
        }
    }

    /// Greedy left-to-right packing of each row into `⌈row_nnz / cap⌉` slices.
    pub fn from_csr(csr: &Csr, slice_cap: usize) -> Result<Self> {
        if slice_cap == 0 {
            return Err(Error::Argument("slice_cap must be at least 1".into()));
        }
        csr.validate()?;
        let mut row_indices = Vec::new();
        let mut slice_offsets = vec![0u32];
        for r in 0..csr.node_count() {
            let lo = csr.row_offsets[r] as usize;
            let hi = csr.row_offsets[r + 1] as usize;
            let mut start = lo;
            while start < hi {
                let end = (start + slice_cap).min(hi);
                row_indices.push(r as u32);
                slice_offsets.push(end as u32);
                start = end;
            }
        }
        Ok(SlicedCsr {
            row_indices,
            slice_offsets,
            col_indices: csr.col_indices.clone(),
            values: csr.values.clone(),
            slice_cap,
        })
    }

    pub fn from_parts(
        row_indices: Vec<u32>,
        slice_offsets: Vec<u32>,
        col_indices: Vec<u32>,
        values: Vec<f32>,
        slice_cap: usize,
    ) -> Result<Self> {
        let s = SlicedCsr {
            row_indices,
            slice_offsets,
            col_indices,
            values,
            slice_cap,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let cap = self.slice_cap;
        if cap == 0 {
            return Err(Error::Validation("slice_cap must be at least 1".into()));
        }
        if self.slice_offsets.len() != self.row_indices.len() + 1 {
            return Err(Error::Validation(
                "slice_offsets must hold n_slices + 1 entries".into(),
            ));
        }
        if self.slice_offsets[0] != 0 {
            return Err(Error::Validation("slice_offsets[0] must be 0".into()));
        }
        if self.col_indices.len() != self.values.len() {
            return Err(Error::Validation(
                "col_indices and values differ in length".into(),
            ));
        }
        if *self.slice_offsets.last().unwrap() as usize != self.col_indices.len() {
            return Err(Error::Validation(
                "slice_offsets[last] must equal nnz".into(),
            ));
        }
        for s in 0..self.n_slices() {
            let len = self.slice_len(s);
            if self.slice_offsets[s + 1] < self.slice_offsets[s] || len == 0 || len > cap {
                return Err(Error::Validation(format!(
                    "slice {s} holds {len} entries, must be within 1..={cap}"
                )));
            }
            let (row, cols, _) = self.slice(s);
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!(
                    "column indices must strictly increase within slice {s}"
                )));
            }
            if s > 0 {
                let prev_row = self.row_indices[s - 1];
                if prev_row > row {
                    return Err(Error::Validation(format!(
                        "row_indices must be non-decreasing (slice {s})"
                    )));
                }
                if prev_row == row {
                    if self.slice_len(s - 1) != cap {
                        return Err(Error::Validation(format!(
                            "slice {} of row {row} is not full but is followed by another slice",
                            s - 1
                        )));
                    }
                    let prev_last = self.col_indices[self.slice_offsets[s] as usize - 1];
                    if prev_last >= cols[0] {
                        return Err(Error::Validation(format!(
                            "column indices must increase across slices of row {row}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`SlicedCsr::from_csr`].
    pub fn to_csr(&self, node_count: usize) -> Result<Csr> {
        let mut row_offsets = vec![0u32; node_count + 1];
        for s in 0..self.n_slices() {
            let row = self.row_indices[s] as usize;
            if row >= node_count {
                return Err(Error::Bounds {
                    what: "row index",
                    index: row,
                    bound: node_count,
                });
            }
            row_offsets[row + 1] += self.slice_len(s) as u32;
        }
        for r in 0..node_count {
            row_offsets[r + 1] += row_offsets[r];
        }
        Csr::new(row_offsets, self.col_indices.clone(), self.values.clone())
    }

    pub fn slice_cap(&self) -> usize {
        self.slice_cap
    }

    pub fn n_slices(&self) -> usize {
        self.row_indices.len()
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.col_indices.is_empty()
    }

    pub fn row_indices(&self) -> &[u32] {
        &self.row_indices
    }

    pub fn slice_offsets(&self) -> &[u32] {
        &self.slice_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn slice_len(&self, s: usize) -> usize {
        (self.slice_offsets[s + 1] - self.slice_offsets[s]) as usize
    }

    /// `(row, columns, values)` of slice `s`.
    pub fn slice(&self, s: usize) -> (u32, &[u32], &[f32]) {
        let lo = self.slice_offsets[s] as usize;
        let hi = self.slice_offsets[s + 1] as usize;
        (
            self.row_indices[s],
            &self.col_indices[lo..hi],
            &self.values[lo..hi],
        )
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, f32)> + '_ {
        (0..self.n_slices()).flat_map(move |s| {
            let (row, cols, vals) = self.slice(s);
            cols.iter().zip(vals).map(move |(&c, &w)| (row, c, w))
        })
    }

    /// Array entries this structure occupies under the storage formula.
    pub fn storage_entries(&self) -> u64 {
        storage_cost(StorageFormat::Sliced, self.nnz(), 0, self.n_slices())
    }

    /// Number of non-zeros per row, for rows `0..node_count`.
    pub fn row_degrees(&self, node_count: usize) -> Vec<u32> {
        let mut deg = vec![0u32; node_count];
        for s in 0..self.n_slices() {
            deg[self.row_indices[s] as usize] += self.slice_len(s) as u32;
        }
        deg
    }

    /// Serializes to the little-endian `SCSR` layout.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(SCSR_MAGIC)?;
        w.write_all(&SCSR_VERSION.to_le_bytes())?;
        w.write_all(&(self.slice_cap as u32).to_le_bytes())?;
        w.write_all(&(self.n_slices() as u64).to_le_bytes())?;
        w.write_all(&(self.nnz() as u64).to_le_bytes())?;
        for arr in [&self.row_indices, &self.slice_offsets, &self.col_indices] {
            for v in arr.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 4 * (2 * self.n_slices() + 1 + 2 * self.nnz()));
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != SCSR_MAGIC {
            return Err(Error::Validation("bad SCSR magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SCSR_VERSION {
            return Err(Error::Validation(format!(
                "unsupported SCSR version {version}"
            )));
        }
        let slice_cap = read_u32(&mut r)? as usize;
        let n_slices = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let row_indices = read_u32_array(&mut r, n_slices)?;
        let slice_offsets = read_u32_array(&mut r, n_slices + 1)?;
        let col_indices = read_u32_array(&mut r, nnz)?;
        let values = read_u32_array(&mut r, nnz)?
            .into_iter()
            .map(f32::from_bits)
            .collect();
        SlicedCsr::from_parts(row_indices, slice_offsets, col_indices, values, slice_cap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageFormat {
    Csr,
    Sliced,
    Coo,
}

/// Number of array entries each format needs:
///
/// * sliced: `2·nnz + 2·n_slices + 1`
/// * csr: `2·nnz + node_count + 1`
/// * coo: `3·nnz`
pub fn storage_cost(format: StorageFormat, nnz: usize, node_count: usize, n_slices: usize) -> u64 {
    let (nnz, n, s) = (nnz as u64, node_count as u64, n_slices as u64);
    match format {
        StorageFormat::Sliced => 2 * nnz + 2 * s + 1,
        StorageFormat::Csr => 2 * nnz + n + 1,
        StorageFormat::Coo => 3 * nnz,
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Validation(format!("truncated SCSR stream: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32_array<R: Read>(r: &mut R, len: usize) -> Result<Vec<u32>> {
    let mut bytes = vec![0u8; len * 4];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row0_three() -> Csr {
        // 4 nodes; row 0 -> {1, 2, 3}
        Csr::from_edges(4, &[(0, 1, 1.0), (0, 2, 2.0), (0, 3, 3.0)]).unwrap()
    }

    #[test]
    fn packs_row_into_two_slices_with_cap_two() {
        let s = SlicedCsr::from_csr(&row0_three(), 2).unwrap();
        assert_eq!(s.row_indices(), &[0, 0]);
        assert_eq!(s.slice_offsets(), &[0, 2, 3]);
        assert_eq!(s.slice(0).1, &[1, 2]);
        assert_eq!(s.slice(1).1, &[3]);
        assert_eq!(s.slice(1).2, &[3.0]);
    }

    #[test]
    fn empty_matrix_has_no_slices() {
        let s = SlicedCsr::from_csr(&Csr::empty(5), 32).unwrap();
        assert!(s.row_indices().is_empty());
        assert_eq!(s.slice_offsets(), &[0]);
        assert_eq!(s.to_csr(5).unwrap(), Csr::empty(5));
    }

    #[test]
    fn one_slice_per_nonempty_row_when_rows_fit() {
        let csr = Csr::from_edges(
            6,
            &[(0, 1, 1.0), (0, 2, 1.0), (3, 0, 1.0), (5, 4, 1.0), (5, 5, 1.0)],
        )
        .unwrap();
        let s = SlicedCsr::from_csr(&csr, 2).unwrap();
        assert_eq!(s.n_slices(), 3);
        assert_eq!(s.row_indices(), &[0, 3, 5]);
    }

    #[test]
    fn round_trip_example() {
        let csr = row0_three();
        let s = SlicedCsr::from_csr(&csr, 2).unwrap();
        assert_eq!(s.to_csr(4).unwrap(), csr);
    }

    #[test]
    fn zero_cap_rejected() {
        assert!(matches!(
            SlicedCsr::from_csr(&row0_three(), 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn invalid_csr_names_violation() {
        let bad = Csr {
            row_offsets: vec![0, 2, 2],
            col_indices: vec![1, 1],
            values: vec![1.0, 1.0],
        };
        let err = SlicedCsr::from_csr(&bad, 4).unwrap_err().to_string();
        assert!(err.contains("strictly increase within row 0"), "{err}");

        let bad = Csr {
            row_offsets: vec![1, 1],
            col_indices: vec![],
            values: vec![],
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("row_offsets[0]"), "{err}");
    }

    #[test]
    fn to_csr_bounds_error() {
        let s = SlicedCsr::from_csr(&row0_three(), 2).unwrap();
        // row index 0 is fine, but the column 3 check happens in validate;
        // a node_count of 0 leaves the row index itself out of range.
        assert!(matches!(s.to_csr(0), Err(Error::Bounds { .. })));
    }

    #[test]
    fn storage_formulas() {
        assert_eq!(storage_cost(StorageFormat::Sliced, 10, 0, 4), 29);
        assert_eq!(storage_cost(StorageFormat::Csr, 10, 8, 0), 29);
        assert_eq!(storage_cost(StorageFormat::Coo, 10, 0, 0), 30);
    }

    #[test]
    fn golden_scsr_bytes() {
        // cap 2, RI = [0, 0], SO = [0, 2, 3], cols = [1, 2, 3], vals = [1, 2, 3]
        let s = SlicedCsr::from_csr(&row0_three(), 2).unwrap();
        #[rustfmt::skip]
        let expected: Vec<u8> = vec![
            b'S', b'C', b'S', b'R',
            1, 0, 0, 0,                 // version
            2, 0, 0, 0,                 // slice_cap
            2, 0, 0, 0, 0, 0, 0, 0,     // n_slices
            3, 0, 0, 0, 0, 0, 0, 0,     // nnz
            0, 0, 0, 0, 0, 0, 0, 0,     // RI
            0, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, // SO
            1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, // cols
            0x00, 0x00, 0x80, 0x3f,     // 1.0
            0x00, 0x00, 0x00, 0x40,     // 2.0
            0x00, 0x00, 0x40, 0x40,     // 3.0
        ];
        assert_eq!(s.to_bytes(), expected);
        assert_eq!(SlicedCsr::read_from(&expected[..]).unwrap(), s);
    }

    #[test]
    fn rejects_corrupt_stream() {
        let mut bytes = SlicedCsr::from_csr(&row0_three(), 2).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(SlicedCsr::read_from(&bytes[..]).is_err());
        let bytes = SlicedCsr::from_csr(&row0_three(), 2).unwrap().to_bytes();
        assert!(SlicedCsr::read_from(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn validate_rejects_underfull_leading_slice() {
        let err = SlicedCsr::from_parts(vec![0, 0], vec![0, 1, 3], vec![1, 2, 3], vec![1.0; 3], 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("not full"), "{err}");
    }

    fn arb_csr() -> impl Strategy<Value = Csr> {
        (1usize..40).prop_flat_map(|n| {
            proptest::collection::btree_set((0..n as u32, 0..n as u32), 0..(n * n).min(200))
                .prop_map(move |set| {
                    let edges: Vec<_> = set
                        .into_iter()
                        .map(|(s, d)| (s, d, (s * 31 + d) as f32 * 0.5))
                        .collect();
                    Csr::from_edges(n, &edges).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn sliced_round_trip_and_invariants(csr in arb_csr(), cap in 1usize..40) {
            let s = SlicedCsr::from_csr(&csr, cap).unwrap();
            s.validate().unwrap();
            let expected: usize = (0..csr.node_count())
                .map(|r| csr.degree(r).div_ceil(cap))
                .sum();
            prop_assert_eq!(s.n_slices(), expected);
            prop_assert_eq!(s.to_csr(csr.node_count()).unwrap(), csr);
            let back = SlicedCsr::read_from(&s.to_bytes()[..]).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
