//! Rank order code: cell responses sorted by decreasing magnitude.
//!
//! Stream layout (all little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ROC1"
//!      4     4  N (u32)
//!      8     2  K (u16)
//!     10     1  boundary convention (0 zero padding, 1 periodic)
//!     11     8  w_c (f64)
//!     19     8  w_s (f64)
//!     27     8  sigma_ratio (f64)
//!     35     8  sigma_c_finest (f64)
//!     43     8  total_cells (u64)
//!     51     8  N_s (u64)
//!     59  16·N_s records {p: u64, c_p: f64}
//! ```

use std::cmp::Ordering;
use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::analysis::{AnalysisOperator, Boundary, Image};
use crate::error::{Error, Result};
use crate::pyramid::{max_layers, DoGParams, GridSpec};

pub const MAGIC: &[u8; 4] = b"ROC1";
pub const HEADER_LEN: usize = 59;
pub const RECORD_LEN: usize = 16;

/// Everything a decoder needs to rebuild the analysis operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeHeader {
    pub image_side: u32,
    pub layer_count: u16,
    pub boundary: Boundary,
    pub params: DoGParams,
    pub total_cells: u64,
}

impl CodeHeader {
    pub fn for_operator(op: &AnalysisOperator) -> Self {
        let g = op.grid();
        Self {
            image_side: g.image_side as u32,
            layer_count: g.layer_count as u16,
            boundary: op.boundary(),
            params: *op.params(),
            total_cells: g.total_cells as u64,
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.image_side as usize, self.layer_count as usize, &self.params)
    }

    /// Exact match against an operator, parameters compared bit for bit.
    pub fn matches(&self, op: &AnalysisOperator) -> bool {
        let other = Self::for_operator(op);
        self.image_side == other.image_side
            && self.layer_count == other.layer_count
            && self.boundary == other.boundary
            && self.total_cells == other.total_cells
            && params_bits(&self.params) == params_bits(&other.params)
    }

    pub(crate) fn ensure_matches(&self, op: &AnalysisOperator) -> Result<()> {
        if self.matches(op) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "code header (N = {}, K = {}) does not match the analysis operator (N = {}, K = {})",
                self.image_side,
                self.layer_count,
                op.grid().image_side,
                op.grid().layer_count
            )))
        }
    }
}

pub(crate) fn params_bits(p: &DoGParams) -> [u64; 4] {
    [p.w_c.to_bits(), p.w_s.to_bits(), p.sigma_ratio.to_bits(), p.sigma_c_finest.to_bits()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeEntry {
    pub index: u64,
    pub value: f64,
}

/// Decreasing magnitude, ties by ascending cell index.
fn rank_order(a: &CodeEntry, b: &CodeEntry) -> Ordering {
    b.value.abs().total_cmp(&a.value.abs()).then(a.index.cmp(&b.index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOrderCode {
    header: CodeHeader,
    entries: Vec<CodeEntry>,
}

impl RankOrderCode {
    /// Sorts the full coefficient vector `c` into a code.
    pub fn encode(c: &[f64], header: CodeHeader) -> Result<Self> {
        if c.len() as u64 != header.total_cells {
            return Err(Error::invalid(format!(
                "coefficient vector has length {}, header declares {} cells",
                c.len(),
                header.total_cells
            )));
        }
        Self::from_pairs(header, c.iter().enumerate().map(|(p, &v)| (p as u64, v)))
    }

    /// Builds a code from `(p, c_p)` pairs in any order.
    pub fn from_pairs(header: CodeHeader, pairs: impl IntoIterator<Item = (u64, f64)>) -> Result<Self> {
        let mut entries: Vec<CodeEntry> = pairs.into_iter().map(|(index, value)| CodeEntry { index, value }).collect();
        let mut seen = vec![false; header.total_cells as usize];
        for e in &entries {
            if !e.value.is_finite() {
                return Err(Error::invalid(format!("coefficient {} is not finite", e.index)));
            }
            match seen.get_mut(e.index as usize) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::invalid(format!("cell index {} appears twice", e.index))),
                None => {
                    return Err(Error::invalid(format!(
                        "cell index {} >= total cells {}",
                        e.index, header.total_cells
                    )))
                }
            }
        }
        entries.sort_unstable_by(rank_order);
        Ok(Self { header, entries })
    }

    /// Analyses `f` with `op` and sorts the responses.
    pub fn from_image(op: &AnalysisOperator, f: &Image) -> Result<Self> {
        Self::encode(&op.forward(f)?, CodeHeader::for_operator(op))
    }

    pub fn header(&self) -> &CodeHeader {
        &self.header
    }

    pub fn entries(&self) -> &[CodeEntry] {
        &self.entries
    }

    /// Retained count `N_s`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps the first `ceil(fraction · total_cells)` entries.
    pub fn truncate(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
        }
        let keep = retained_count(fraction, self.header.total_cells as usize).min(self.entries.len());
        Ok(Self { header: self.header, entries: self.entries[..keep].to_vec() })
    }

    /// Dense coefficient vector with the dropped cells set to zero.
    pub fn masked_coefficients(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.header.total_cells as usize];
        for e in &self.entries {
            c[e.index as usize] = e.value;
        }
        c
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.entries.len());
        out.extend_from_slice(MAGIC);
        let h = &self.header;
        // Writes into a Vec cannot fail.
        out.write_u32::<LittleEndian>(h.image_side).unwrap();
        out.write_u16::<LittleEndian>(h.layer_count).unwrap();
        out.write_u8(h.boundary.code()).unwrap();
        for v in [h.params.w_c, h.params.w_s, h.params.sigma_ratio, h.params.sigma_c_finest] {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        out.write_u64::<LittleEndian>(h.total_cells).unwrap();
        out.write_u64::<LittleEndian>(self.entries.len() as u64).unwrap();
        for e in &self.entries {
            out.write_u64::<LittleEndian>(e.index).unwrap();
            out.write_f64::<LittleEndian>(e.value).unwrap();
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, format!("stream ends inside the {HEADER_LEN}-byte header")));
        }
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"ROC1\""));
        }
        let image_side = r.read_u32::<LittleEndian>()?;
        let layer_count = r.read_u16::<LittleEndian>()?;
        let boundary_code = r.read_u8()?;
        let mut floats = [0.0; 4];
        for f in &mut floats {
            *f = r.read_f64::<LittleEndian>()?;
        }
        let total_cells = r.read_u64::<LittleEndian>()?;
        let retained = r.read_u64::<LittleEndian>()?;

        if image_side == 0 {
            return Err(Error::format(4, "image side is zero"));
        }
        if layer_count == 0 || layer_count as usize > max_layers(image_side as usize) {
            return Err(Error::format(8, format!("layer count {layer_count} is not admissible for N = {image_side}")));
        }
        let boundary = Boundary::from_code(boundary_code)
            .ok_or_else(|| Error::format(10, format!("unknown boundary convention {boundary_code}")))?;
        let params =
            DoGParams { w_c: floats[0], w_s: floats[1], sigma_ratio: floats[2], sigma_c_finest: floats[3] };
        params.validate().map_err(|e| Error::format(11, e.to_string()))?;
        let grid = GridSpec::new(image_side as usize, layer_count as usize, &params)
            .map_err(|e| Error::format(4, e.to_string()))?;
        if grid.total_cells as u64 != total_cells {
            return Err(Error::format(
                43,
                format!("header declares {total_cells} cells, the grid has {}", grid.total_cells),
            ));
        }
        if retained > total_cells {
            return Err(Error::format(51, format!("N_s = {retained} exceeds total cells {total_cells}")));
        }
        let expected_len = HEADER_LEN as u64 + RECORD_LEN as u64 * retained;
        if bytes.len() as u64 != expected_len {
            return Err(Error::format(
                bytes.len().min(expected_len as usize) as u64,
                format!("stream is {} bytes, header implies {expected_len}", bytes.len()),
            ));
        }

        let header = CodeHeader { image_side, layer_count, boundary, params, total_cells };
        let mut entries = Vec::with_capacity(retained as usize);
        let mut seen = vec![false; total_cells as usize];
        for i in 0..retained as usize {
            let offset = (HEADER_LEN + i * RECORD_LEN) as u64;
            let index = r.read_u64::<LittleEndian>()?;
            let value = r.read_f64::<LittleEndian>()?;
            if index >= total_cells {
                return Err(Error::format(offset, format!("cell index {index} >= total cells {total_cells}")));
            }
            if std::mem::replace(&mut seen[index as usize], true) {
                return Err(Error::format(offset, format!("cell index {index} repeated")));
            }
            if !value.is_finite() {
                return Err(Error::format(offset + 8, "coefficient is not finite"));
            }
            let entry = CodeEntry { index, value };
            if let Some(prev) = entries.last() {
                if rank_order(prev, &entry) != Ordering::Less {
                    return Err(Error::format(offset, "records are not in decreasing magnitude order"));
                }
            }
            entries.push(entry);
        }
        Ok(Self { header, entries })
    }

    /// Plain weighted sum of the retained analysis filters, `Φ*(masked c)`.
    pub fn straightforward_decode(&self, op: &AnalysisOperator) -> Result<Image> {
        self.header.ensure_matches(op)?;
        op.adjoint(&self.masked_coefficients())
    }

    /// [`straightforward_decode`](Self::straightforward_decode) divided by
    /// the flat-field gain of the frame operator, bringing the estimate back
    /// to the input's intensity scale.
    pub fn normalized_straightforward_decode(&self, op: &AnalysisOperator) -> Result<Image> {
        let raw = self.straightforward_decode(op)?;
        Ok(raw.scaled(1.0 / op.flat_field_gain()))
    }
}

/// `ceil(fraction · total)`.
pub fn retained_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64).ceil() as usize).min(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::DoGParams;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn header(total: u64) -> CodeHeader {
        // A grid with exactly `total` cells is not needed for in-memory codes.
        CodeHeader {
            image_side: 1,
            layer_count: 1,
            boundary: Boundary::ZeroPad,
            params: DoGParams::default(),
            total_cells: total,
        }
    }

    fn real_header() -> (AnalysisOperator, CodeHeader) {
        let op = AnalysisOperator::for_image_side(9, DoGParams::default()).unwrap();
        let h = CodeHeader::for_operator(&op);
        (op, h)
    }

    #[test]
    fn sorts_by_magnitude() {
        let code = RankOrderCode::encode(&[0.0, -5.0, 3.0], header(3)).unwrap();
        let got: Vec<(u64, f64)> = code.entries().iter().map(|e| (e.index, e.value)).collect();
        assert_eq!(got, vec![(1, -5.0), (2, 3.0), (0, 0.0)]);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let c = [0.0, 1.0, 7.0, 0.5, -7.0];
        let code = RankOrderCode::encode(&c, header(5)).unwrap();
        assert_eq!(code.entries()[0].index, 2);
        assert_eq!(code.entries()[1].index, 4);
    }

    #[test]
    fn random_vector_sort_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<f64> = (0..1000).map(|_| rng.random_range(-10.0..10.0)).collect();
        let code = RankOrderCode::encode(&c, header(1000)).unwrap();
        let mut reference: Vec<usize> = (0..1000).collect();
        reference.sort_by(|&a, &b| c[b].abs().partial_cmp(&c[a].abs()).unwrap().then(a.cmp(&b)));
        let got: Vec<usize> = code.entries().iter().map(|e| e.index as usize).collect();
        assert_eq!(got, reference);
        assert!(code.entries().windows(2).all(|w| w[0].value.abs() >= w[1].value.abs()));
    }

    #[test]
    fn permutation_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c: Vec<f64> = (0..200).map(|i| ((i % 17) as f64 - 8.0) * 0.5).collect();
        let base = RankOrderCode::encode(&c, header(200)).unwrap();
        let mut pairs: Vec<(u64, f64)> = c.iter().enumerate().map(|(p, &v)| (p as u64, v)).collect();
        for _ in 0..5 {
            pairs.shuffle(&mut rng);
            let again = RankOrderCode::from_pairs(header(200), pairs.clone()).unwrap();
            assert_eq!(again, base);
        }
    }

    #[test]
    fn encode_rejects_bad_input() {
        assert!(RankOrderCode::encode(&[1.0, 2.0], header(3)).is_err());
        assert!(RankOrderCode::encode(&[1.0, f64::INFINITY], header(2)).is_err());
        assert!(RankOrderCode::from_pairs(header(2), [(0, 1.0), (0, 2.0)]).is_err());
        assert!(RankOrderCode::from_pairs(header(2), [(2, 1.0)]).is_err());
    }

    #[test]
    fn truncation_counts() {
        let c: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let code = RankOrderCode::encode(&c, header(1000)).unwrap();
        assert_eq!(code.truncate(1.0).unwrap(), code);
        assert_eq!(code.truncate(0.005).unwrap().len(), 5);
        assert_eq!(code.truncate(0.0051).unwrap().len(), 6);
        assert_eq!(code.truncate(0.0001).unwrap().len(), 1);
        for bad in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(code.truncate(bad), Err(Error::InvalidParameter(_))));
        }
        assert_eq!(retained_count(0.005, 87894), 440);
    }

    #[test]
    fn straightforward_decode_edge_cases() {
        let (op, h) = real_header();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Image::from_fn(9, |_, _| rng.random_range(0.0..255.0));
        let c = op.forward(&f).unwrap();
        let code = RankOrderCode::encode(&c, h).unwrap();
        let full = code.straightforward_decode(&op).unwrap();
        assert_eq!(full, op.adjoint(&c).unwrap());

        let empty = RankOrderCode::from_pairs(h, []).unwrap();
        assert!(empty.straightforward_decode(&op).unwrap().as_slice().iter().all(|&v| v == 0.0));

        let other = AnalysisOperator::for_image_side(10, DoGParams::default()).unwrap();
        assert!(matches!(code.straightforward_decode(&other), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn truncated_decode_matches_direct_summation() {
        let (op, h) = real_header();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = Image::from_fn(9, |_, _| rng.random_range(0.0..255.0));
        let code = RankOrderCode::from_image(&op, &f).unwrap().truncate(0.1).unwrap();
        let g = op.grid();
        // Direct sum of c_p · DoG_k(u_k(i) - x, u_k(j) - y) over retained cells.
        let mut expected = vec![0.0; 81];
        for e in code.entries() {
            let (k, i, j) = g.cell_of(e.index as usize).unwrap();
            let kernel = &op.kernels()[k];
            let m = kernel.half_width as isize;
            let gain = crate::analysis::layer_gain(k, g.layer_count);
            let (ux, uy) = (g.sample_position(k, i) as isize, g.sample_position(k, j) as isize);
            for x in 0..9isize {
                for y in 0..9isize {
                    let (a, b) = (ux - x, uy - y);
                    if a.abs() <= m && b.abs() <= m {
                        expected[(x * 9 + y) as usize] += e.value * gain * kernel.at(a, b);
                    }
                }
            }
        }
        let got = code.straightforward_decode(&op).unwrap();
        for (a, b) in got.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(h.total_cells as usize, g.total_cells);
    }

    #[test]
    fn energy_capture_is_monotone() {
        let (op, h) = real_header();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = Image::from_fn(9, |_, _| rng.random_range(0.0..255.0));
        let code = RankOrderCode::encode(&op.forward(&f).unwrap(), h).unwrap();
        let energy = |fr: f64| code.truncate(fr).unwrap().masked_coefficients().iter().map(|v| v * v).sum::<f64>();
        let fractions = [0.005, 0.01, 0.05, 0.1, 0.3, 0.7, 1.0];
        for w in fractions.windows(2) {
            assert!(energy(w[0]) <= energy(w[1]));
        }
    }

    #[test]
    fn empty_code_round_trips() {
        let (_, h) = real_header();
        let code = RankOrderCode::from_pairs(h, []).unwrap();
        let bytes = code.serialize();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(RankOrderCode::deserialize(&bytes).unwrap(), code);
    }

    #[test]
    fn stream_layout() {
        let (op, h) = real_header();
        let c = op.forward(&Image::from_fn(9, |x, y| (x * 9 + y) as f64)).unwrap();
        let code = RankOrderCode::encode(&c, h).unwrap().truncate(0.5).unwrap();
        let bytes = code.serialize();
        assert_eq!(&bytes[0..4], b"ROC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 9);
        assert_eq!(u16::from_le_bytes(bytes[8..10].try_into().unwrap()), 4);
        assert_eq!(bytes[10], 0);
        assert_eq!(f64::from_le_bytes(bytes[27..35].try_into().unwrap()), 1.0 / 3.0);
        assert_eq!(u64::from_le_bytes(bytes[43..51].try_into().unwrap()), h.total_cells);
        assert_eq!(u64::from_le_bytes(bytes[51..59].try_into().unwrap()), code.len() as u64);
        let first = code.entries()[0];
        assert_eq!(u64::from_le_bytes(bytes[59..67].try_into().unwrap()), first.index);
        assert_eq!(f64::from_le_bytes(bytes[67..75].try_into().unwrap()), first.value);
    }

    #[test]
    fn rejects_structural_corruption() {
        let (op, h) = real_header();
        let c = op.forward(&Image::from_fn(9, |x, y| ((x * 7 + y * 3) % 11) as f64)).unwrap();
        let bytes = RankOrderCode::encode(&c, h).unwrap().serialize();
        // Magic, N, K, boundary, sign/exponent bytes of every parameter,
        // total_cells and N_s.
        let mut positions: Vec<usize> = (0..11).collect();
        positions.extend([18, 26, 34, 42]);
        positions.extend(43..59);
        for pos in positions {
            let mut bad = bytes.clone();
            bad[pos] ^= 0xFF;
            assert!(RankOrderCode::deserialize(&bad).is_err(), "byte {pos} corruption accepted");
        }
        assert!(matches!(RankOrderCode::deserialize(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(RankOrderCode::deserialize(&bytes[..20]), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(RankOrderCode::deserialize(&extra).is_err());
    }

    #[test]
    fn rejects_corrupted_records() {
        let (op, h) = real_header();
        let c = op.forward(&Image::from_fn(9, |x, y| ((x * 7 + y * 3) % 11) as f64)).unwrap();
        let bytes = RankOrderCode::encode(&c, h).unwrap().serialize();
        // Out-of-range index in the third record.
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 2 * RECORD_LEN + 7] = 0x80;
        match RankOrderCode::deserialize(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, (HEADER_LEN + 2 * RECORD_LEN) as u64),
            other => panic!("unexpected {other:?}"),
        }
        // Swapping two records breaks the ordering.
        let mut swapped = bytes.clone();
        let (a, b) = (HEADER_LEN, HEADER_LEN + RECORD_LEN);
        let first: Vec<u8> = swapped[a..b].to_vec();
        let second: Vec<u8> = swapped[b..b + RECORD_LEN].to_vec();
        swapped[a..b].copy_from_slice(&second);
        swapped[b..b + RECORD_LEN].copy_from_slice(&first);
        if first[8..] != second[8..] {
            assert!(RankOrderCode::deserialize(&swapped).is_err());
        }
    }

    proptest! {
        #[test]
        fn serialize_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 102), fraction in 0.001f64..=1.0) {
            let (_, h) = real_header();
            prop_assume!(h.total_cells == 102);
            let code = RankOrderCode::encode(&values, h).unwrap().truncate(fraction).unwrap();
            let back = RankOrderCode::deserialize(&code.serialize()).unwrap();
            prop_assert_eq!(back, code);
        }
    }

    #[test]
    fn nine_pixel_grid_has_102_cells() {
        let (_, h) = real_header();
        assert_eq!(h.total_cells, 102);
    }
}
