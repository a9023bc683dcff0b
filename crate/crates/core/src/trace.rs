//! Attention traces and the `.att1` container.
//!
//! A trace holds post-softmax attention rows for every `(layer, head, step)`
//! of a decoding run. Step `0` is the final prefill row, negative steps are
//! earlier prefill rows, and steps `1..=num_decode_steps` are decode rows. The
//! row at step `s` has `prefill_len + s` entries.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "ATT1"
//! version          u16      1
//! num_layers       u32
//! num_heads        u32
//! prefill_len      u32
//! num_decode_steps u32
//! has_qk           u8       0 | 1
//! head_dim         u32      0 when has_qk = 0
//! first_step_offset i32     <= 0
//! rows_per_head    u32      num_decode_steps + 1 - first_step_offset
//! rows             layer-major, head, step; each: u32 len + len * f32
//! queries, keys    only when has_qk = 1; each (layer, head, position) * head_dim f32
//! ```

use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ATT1";
pub const VERSION: u16 = 1;
/// Size of the fixed header in bytes.
pub const HEADER_LEN: usize = 4 + 2 + 4 * 4 + 1 + 4 + 4 + 4;
/// Maximum allowed deviation of a row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub num_layers: u32,
    pub num_heads: u32,
    pub prefill_len: u32,
    pub num_decode_steps: u32,
    pub has_qk: bool,
    pub head_dim: u32,
    /// Step index of the first stored row; `-(H-1)` keeps the last `H` prefill rows.
    pub first_step_offset: i32,
}

impl TraceHeader {
    pub fn rows_per_head(&self) -> usize {
        self.num_decode_steps as usize + 1 + self.first_step_offset.unsigned_abs() as usize
    }

    pub fn steps(&self) -> RangeInclusive<i64> {
        self.first_step_offset as i64..=self.num_decode_steps as i64
    }

    pub fn row_len(&self, step: i64) -> usize {
        (self.prefill_len as i64 + step) as usize
    }

    /// Number of token positions that own a query/key vector.
    pub fn num_positions(&self) -> usize {
        self.prefill_len as usize + self.num_decode_steps as usize
    }

    pub fn num_heads_total(&self) -> usize {
        self.num_layers as usize * self.num_heads as usize
    }

    fn check(&self) -> Result<()> {
        if self.prefill_len < 1 {
            return Err(Error::Format("prefill_len must be at least 1".into()));
        }
        if self.first_step_offset > 0 {
            return Err(Error::Format("first_step_offset must be <= 0".into()));
        }
        if self.first_step_offset.unsigned_abs() >= self.prefill_len {
            return Err(Error::Format(format!(
                "first_step_offset {} reaches before the first prefill row",
                self.first_step_offset
            )));
        }
        if self.has_qk != (self.head_dim > 0) {
            return Err(Error::Format(
                "head_dim must be non-zero exactly when has_qk is set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    header: TraceHeader,
    rows: Vec<Vec<f32>>,
    queries: Option<Vec<f32>>,
    keys: Option<Vec<f32>>,
}

impl AttentionTrace {
    /// Assembles a trace, checking shapes. Row values are checked by [`validate`](Self::validate).
    ///
    /// `rows` are ordered layer-major, then head, then step. `qk` holds flat
    /// `(layer, head, position, dim)` query and key tensors.
    pub fn new(
        header: TraceHeader,
        rows: Vec<Vec<f32>>,
        qk: Option<(Vec<f32>, Vec<f32>)>,
    ) -> Result<Self> {
        header.check()?;
        let per_head = header.rows_per_head();
        let expected_rows = header.num_heads_total() * per_head;
        if rows.len() != expected_rows {
            return Err(Error::Dimension(format!(
                "expected {expected_rows} rows, got {}",
                rows.len()
            )));
        }
        for (idx, row) in rows.iter().enumerate() {
            let (layer, head, step) = Self::locate(&header, idx);
            if row.len() != header.row_len(step) {
                return Err(Error::Dimension(format!(
                    "row at layer {layer}, head {head}, step {step} has length {}, expected {}",
                    row.len(),
                    header.row_len(step)
                )));
            }
        }
        let (queries, keys) = match (header.has_qk, qk) {
            (true, Some((q, k))) => {
                let n = header.num_heads_total() * header.num_positions() * header.head_dim as usize;
                if q.len() != n || k.len() != n {
                    return Err(Error::Dimension(format!(
                        "query/key tensors must hold {n} values each"
                    )));
                }
                (Some(q), Some(k))
            }
            (false, None) => (None, None),
            (true, None) => {
                return Err(Error::Dimension("has_qk set but no q/k tensors given".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Dimension("q/k tensors given but has_qk is unset".into()))
            }
        };
        Ok(Self {
            header,
            rows,
            queries,
            keys,
        })
    }

    fn locate(header: &TraceHeader, idx: usize) -> (u32, u32, i64) {
        let per_head = header.rows_per_head();
        let head_idx = idx / per_head;
        let step = (idx % per_head) as i64 + header.first_step_offset as i64;
        (
            (head_idx / header.num_heads as usize) as u32,
            (head_idx % header.num_heads as usize) as u32,
            step,
        )
    }

    fn row_index(&self, layer: u32, head: u32, step: i64) -> usize {
        let h = &self.header;
        assert!(layer < h.num_layers && head < h.num_heads, "layer/head out of range");
        assert!(h.steps().contains(&step), "step {step} not stored in trace");
        let head_idx = layer as usize * h.num_heads as usize + head as usize;
        head_idx * h.rows_per_head() + (step - h.first_step_offset as i64) as usize
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn row(&self, layer: u32, head: u32, step: i64) -> &[f32] {
        &self.rows[self.row_index(layer, head, step)]
    }

    /// All stored rows of one head, oldest first.
    pub fn head_rows(&self, layer: u32, head: u32) -> &[Vec<f32>] {
        let start = self.row_index(layer, head, self.header.first_step_offset as i64);
        &self.rows[start..start + self.header.rows_per_head()]
    }

    pub fn rows(&self) -> &[Vec<f32>] {
        &self.rows
    }

    pub fn has_qk(&self) -> bool {
        self.queries.is_some()
    }

    fn qk_offset(&self, layer: u32, head: u32, position: usize) -> usize {
        let h = &self.header;
        let head_idx = layer as usize * h.num_heads as usize + head as usize;
        (head_idx * h.num_positions() + position) * h.head_dim as usize
    }

    /// Query vector at a token position (post position encoding), if stored.
    pub fn query(&self, layer: u32, head: u32, position: usize) -> Option<&[f32]> {
        let d = self.header.head_dim as usize;
        let off = self.qk_offset(layer, head, position);
        self.queries.as_ref().map(|q| &q[off..off + d])
    }

    pub fn key(&self, layer: u32, head: u32, position: usize) -> Option<&[f32]> {
        let d = self.header.head_dim as usize;
        let off = self.qk_offset(layer, head, position);
        self.keys.as_ref().map(|k| &k[off..off + d])
    }

    /// All keys of a head, flat `(position, dim)`.
    pub fn head_keys(&self, layer: u32, head: u32) -> Option<&[f32]> {
        let n = self.header.num_positions() * self.header.head_dim as usize;
        let off = self.qk_offset(layer, head, 0);
        self.keys.as_ref().map(|k| &k[off..off + n])
    }

    pub fn head_queries(&self, layer: u32, head: u32) -> Option<&[f32]> {
        let n = self.header.num_positions() * self.header.head_dim as usize;
        let off = self.qk_offset(layer, head, 0);
        self.queries.as_ref().map(|q| &q[off..off + n])
    }

    /// Checks the value invariants: finite, non-negative rows summing to 1.
    pub fn validate(&self) -> Result<()> {
        for (idx, row) in self.rows.iter().enumerate() {
            check_row(row).map_err(|reason| {
                let (layer, head, step) = Self::locate(&self.header, idx);
                Error::Validation {
                    layer,
                    head,
                    step,
                    reason,
                }
            })?;
        }
        for t in [&self.queries, &self.keys].into_iter().flatten() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite value in q/k tensors".into()));
            }
        }
        Ok(())
    }
}

fn check_row(row: &[f32]) -> std::result::Result<(), String> {
    let mut sum = 0.0f64;
    for (j, &v) in row.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(format!("entry {j} is {v}"));
        }
        sum += v as f64;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

/// Serializes a trace. Returns the number of bytes written.
pub fn write_trace<W: Write>(trace: &AttentionTrace, sink: W) -> Result<u64> {
    trace.validate()?;
    let mut w = BufWriter::new(sink);
    let h = &trace.header;
    let mut n = 0u64;
    let mut put = |w: &mut BufWriter<W>, bytes: &[u8]| -> io::Result<()> {
        n += bytes.len() as u64;
        w.write_all(bytes)
    };
    put(&mut w, &MAGIC)?;
    put(&mut w, &VERSION.to_le_bytes())?;
    put(&mut w, &h.num_layers.to_le_bytes())?;
    put(&mut w, &h.num_heads.to_le_bytes())?;
    put(&mut w, &h.prefill_len.to_le_bytes())?;
    put(&mut w, &h.num_decode_steps.to_le_bytes())?;
    put(&mut w, &[h.has_qk as u8])?;
    put(&mut w, &h.head_dim.to_le_bytes())?;
    put(&mut w, &h.first_step_offset.to_le_bytes())?;
    put(&mut w, &(h.rows_per_head() as u32).to_le_bytes())?;
    for row in &trace.rows {
        put(&mut w, &(row.len() as u32).to_le_bytes())?;
        for v in row {
            put(&mut w, &v.to_le_bytes())?;
        }
    }
    for t in [&trace.queries, &trace.keys].into_iter().flatten() {
        for v in t {
            put(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(n)
}

pub fn write_trace_file(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<u64> {
    let f = std::fs::File::create(path)?;
    write_trace(trace, f)
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn header_eof(e: io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Format("file ends inside the header".into())
    } else {
        Error::Io(e)
    }
}

fn read_header(r: &mut impl Read) -> Result<TraceHeader> {
    let magic: [u8; 4] = read_array(r).map_err(header_eof)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"ATT1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u16::from_le_bytes(read_array(r).map_err(header_eof)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut u32_field = || -> Result<u32> { Ok(u32::from_le_bytes(read_array(r).map_err(header_eof)?)) };
    let num_layers = u32_field()?;
    let num_heads = u32_field()?;
    let prefill_len = u32_field()?;
    let num_decode_steps = u32_field()?;
    let [flag] = read_array::<1>(r).map_err(header_eof)?;
    let has_qk = match flag {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("has_qk flag byte is {other}"))),
    };
    let head_dim = u32::from_le_bytes(read_array(r).map_err(header_eof)?);
    let first_step_offset = i32::from_le_bytes(read_array(r).map_err(header_eof)?);
    let rows_per_head = u32::from_le_bytes(read_array(r).map_err(header_eof)?);
    let header = TraceHeader {
        num_layers,
        num_heads,
        prefill_len,
        num_decode_steps,
        has_qk,
        head_dim,
        first_step_offset,
    };
    header.check()?;
    if rows_per_head as usize != header.rows_per_head() {
        return Err(Error::Format(format!(
            "rows_per_head {rows_per_head} disagrees with step range ({} expected)",
            header.rows_per_head()
        )));
    }
    Ok(header)
}

fn read_f32s(r: &mut impl Read, out: &mut Vec<f32>, count: usize) -> io::Result<()> {
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        out.push(f32::from_le_bytes(buf));
    }
    Ok(())
}

/// Parses and validates a trace.
pub fn read_trace<R: Read>(source: R) -> Result<AttentionTrace> {
    let mut r = BufReader::new(source);
    let header = read_header(&mut r)?;
    let total = header.num_heads_total() * header.rows_per_head();
    let mut rows = Vec::new();
    for idx in 0..total {
        let (layer, head, step) = AttentionTrace::locate(&header, idx);
        let corrupt = |e: io::Error| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Corrupt { layer, head, step }
            } else {
                Error::Io(e)
            }
        };
        let len = u32::from_le_bytes(read_array(&mut r).map_err(corrupt)?) as usize;
        if len != header.row_len(step) {
            return Err(Error::Corrupt { layer, head, step });
        }
        let mut row = Vec::with_capacity(len);
        read_f32s(&mut r, &mut row, len).map_err(corrupt)?;
        rows.push(row);
    }
    let qk = if header.has_qk {
        let n = header.num_heads_total() * header.num_positions() * header.head_dim as usize;
        let mut tensors = [Vec::new(), Vec::new()];
        for (name, t) in ["query", "key"].iter().zip(tensors.iter_mut()) {
            read_f32s(&mut r, t, n).map_err(|e| {
                if e.kind() == ErrorKind::UnexpectedEof {
                    Error::CorruptSection(format!("{name} block truncated"))
                } else {
                    Error::Io(e)
                }
            })?;
        }
        let [q, k] = tensors;
        Some((q, k))
    } else {
        None
    };
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after declared content".into()));
    }
    let trace = AttentionTrace::new(header, rows, qk)?;
    trace.validate()?;
    Ok(trace)
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let f = std::fs::File::open(path)?;
    read_trace(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rows: Vec<Vec<f32>>) -> AttentionTrace {
        let header = TraceHeader {
            num_layers: 1,
            num_heads: 1,
            prefill_len: 4,
            num_decode_steps: rows.len() as u32 - 1,
            has_qk: false,
            head_dim: 0,
            first_step_offset: 0,
        };
        AttentionTrace::new(header, rows, None).unwrap()
    }

    #[test]
    fn single_row_layout_size() {
        let t = tiny(vec![vec![0.25; 4]]);
        let mut buf = Vec::new();
        let n = write_trace(&t, &mut buf).unwrap();
        assert_eq!(HEADER_LEN, 35);
        assert_eq!(n as usize, 35 + 4 + 16);
        assert_eq!(buf.len(), 55);
        assert_eq!(&buf[..4], b"ATT1");
        // row length prefix directly after the header
        assert_eq!(u32::from_le_bytes(buf[35..39].try_into().unwrap()), 4);
    }

    #[test]
    fn round_trip_is_identity() {
        let t = tiny(vec![vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.2, 0.2]]);
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), t);
    }

    #[test]
    fn bad_row_sum_is_rejected_on_write() {
        let t = tiny(vec![vec![0.3, 0.3, 0.2, 0.1]]);
        match write_trace(&t, Vec::new()) {
            Err(Error::Validation { layer: 0, head: 0, step: 0, .. }) => {}
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let t = tiny(vec![vec![0.25; 4]]);
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        buf[..4].copy_from_slice(b"XYZ1");
        assert!(matches!(read_trace(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let t = tiny(vec![vec![0.25; 4]]);
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        buf[4] = 2;
        assert!(matches!(read_trace(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_names_the_row() {
        let t = tiny(vec![vec![0.25; 4], vec![0.2; 5]]);
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        // cut inside the second row's floats
        buf.truncate(buf.len() - 6);
        match read_trace(&buf[..]) {
            Err(Error::Corrupt { layer: 0, head: 0, step: 1 }) => {}
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let t = tiny(vec![vec![0.25; 4]]);
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        buf.push(0);
        assert!(matches!(read_trace(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn negative_steps_hold_prefill_rows() {
        let header = TraceHeader {
            num_layers: 1,
            num_heads: 2,
            prefill_len: 3,
            num_decode_steps: 1,
            has_qk: false,
            head_dim: 0,
            first_step_offset: -2,
        };
        assert_eq!(header.rows_per_head(), 4);
        let mut rows = Vec::new();
        for _head in 0..2 {
            for step in header.steps() {
                let n = header.row_len(step);
                rows.push(vec![1.0 / n as f32; n]);
            }
        }
        let t = AttentionTrace::new(header, rows, None).unwrap();
        assert_eq!(t.row(0, 1, -2).len(), 1);
        assert_eq!(t.row(0, 1, 1).len(), 4);
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), t);
    }

    #[test]
    fn offset_reaching_past_prefill_is_rejected() {
        let header = TraceHeader {
            num_layers: 1,
            num_heads: 1,
            prefill_len: 2,
            num_decode_steps: 0,
            has_qk: false,
            head_dim: 0,
            first_step_offset: -2,
        };
        assert!(AttentionTrace::new(header, vec![], None).is_err());
    }
}
