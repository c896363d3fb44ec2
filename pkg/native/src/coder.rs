//! rANS coder over quantized CDF tables.
//!
//! Byte-for-byte compatible with the reference Python coder: 16-bit
//! probabilities, 32-bit encoder state renormalized a byte at a time,
//! reverse-order encoding with a 4-byte flushed state at the front of the
//! stream, and escape coding for symbols outside a table's support (the
//! reserved last slot, then a sign bit and 4-bit magnitude chunks, each
//! chunk followed by a continuation bit).

pub const RANS_L: u64 = 1 << 16;
pub const BYPASS_BITS: u32 = 4;
pub const MAX_BYPASS_CHUNKS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoderError {
    /// Mismatched lengths, out-of-range table id, or null input.
    InvalidArgument,
    /// Table definition rejected at construction.
    InvalidTable,
    /// Stream ended while symbols were still expected.
    Truncated,
    /// Stream is internally inconsistent (bad flush, runaway escape).
    Desync,
    /// Value cannot be represented (escape chunk cap, int32 overflow).
    Symbol,
}

struct Table {
    offset: i64,
    /// `slots + 1` entries rising from 0 to `1 << precision`; the last
    /// slot is the escape.
    cdf: Vec<u32>,
    freqs: Vec<u32>,
    /// Cumulative frequency to slot index, one entry per probability unit.
    lut: Vec<u16>,
}

pub struct TableSet {
    precision: u32,
    tables: Vec<Table>,
}

impl TableSet {
    /// Build from concatenated CDFs plus per-table entry counts and offsets.
    ///
    /// Every table is validated up front: at least one coded slot plus the
    /// escape, endpoints 0 and `1 << precision`, strictly increasing.
    pub fn from_flat(
        flat: &[u32],
        lens: &[u32],
        offsets: &[i32],
        precision: u32,
    ) -> Result<TableSet, CoderError> {
        if !(1..=16).contains(&precision) || lens.is_empty() || lens.len() != offsets.len() {
            return Err(CoderError::InvalidTable);
        }
        let total = 1u32 << precision;
        let mut tables = Vec::with_capacity(lens.len());
        let mut at = 0usize;
        for (&len, &off) in lens.iter().zip(offsets) {
            let len = len as usize;
            if len < 3 || flat.len() - at < len {
                return Err(CoderError::InvalidTable);
            }
            let cdf = &flat[at..at + len];
            at += len;
            if cdf[0] != 0 || cdf[len - 1] != total {
                return Err(CoderError::InvalidTable);
            }
            let mut freqs = Vec::with_capacity(len - 1);
            let mut lut = vec![0u16; total as usize];
            for s in 0..len - 1 {
                if cdf[s + 1] <= cdf[s] || cdf[s + 1] > total {
                    return Err(CoderError::InvalidTable);
                }
                freqs.push(cdf[s + 1] - cdf[s]);
                for cf in cdf[s]..cdf[s + 1] {
                    lut[cf as usize] = s as u16;
                }
            }
            tables.push(Table { offset: off as i64, cdf: cdf.to_vec(), freqs, lut });
        }
        if at != flat.len() {
            return Err(CoderError::InvalidTable);
        }
        Ok(TableSet { precision, tables })
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), CoderError> {
        let n = self.tables.len() as u32;
        if ids.iter().any(|&t| t >= n) {
            return Err(CoderError::InvalidArgument);
        }
        Ok(())
    }

    /// Encode one value per entry of `ids`; returns the stream bytes.
    pub fn encode(&self, symbols: &[i32], ids: &[u32]) -> Result<Vec<u8>, CoderError> {
        if symbols.len() != ids.len() {
            return Err(CoderError::InvalidArgument);
        }
        self.check_ids(ids)?;
        let precision = self.precision;
        let bit_limit = 1u32 << (8 + precision - 1);
        let chunk_limit = 1u32 << (8 + precision - BYPASS_BITS);
        let mut buf: Vec<u8> = Vec::with_capacity(symbols.len() * 2 + 4);
        let mut state: u32 = RANS_L as u32;

        for i in (0..symbols.len()).rev() {
            let table = &self.tables[ids[i] as usize];
            let rel = symbols[i] as i64 - table.offset;
            let escape = (table.freqs.len() - 1) as i64;
            let slot = if 0 <= rel && rel < escape {
                rel as usize
            } else {
                // Escape: push the chunked magnitude high-to-low so the
                // decoder pops it low-to-high, then the sign, then fall
                // through to the escape slot itself.
                let (sign, mut mag) = if rel < 0 {
                    (1u32, (-rel - 1) as u64)
                } else {
                    (0u32, (rel - escape) as u64)
                };
                let mut chunks = [0u32; MAX_BYPASS_CHUNKS as usize];
                let mut n = 0usize;
                loop {
                    if n == chunks.len() {
                        return Err(CoderError::Symbol);
                    }
                    chunks[n] = (mag & 0xF) as u32;
                    n += 1;
                    mag >>= BYPASS_BITS;
                    if mag == 0 {
                        break;
                    }
                }
                for j in (0..n).rev() {
                    let flag = u32::from(j != n - 1);
                    while state >= bit_limit {
                        buf.push((state & 0xFF) as u8);
                        state >>= 8;
                    }
                    state = (state << 1) | flag;
                    while state >= chunk_limit {
                        buf.push((state & 0xFF) as u8);
                        state >>= 8;
                    }
                    state = (state << BYPASS_BITS) | chunks[j];
                }
                while state >= bit_limit {
                    buf.push((state & 0xFF) as u8);
                    state >>= 8;
                }
                state = (state << 1) | sign;
                escape as usize
            };
            let f = self.tables[ids[i] as usize].freqs[slot];
            let limit = f << 8;
            while state >= limit {
                buf.push((state & 0xFF) as u8);
                state >>= 8;
            }
            state = ((state / f) << precision) + (state % f) + self.tables[ids[i] as usize].cdf[slot];
        }

        buf.extend_from_slice(&state.to_le_bytes());
        buf.reverse();
        Ok(buf)
    }

    /// Decode one value per entry of `ids` into `out`; verifies the flush.
    pub fn decode(&self, stream: &[u8], ids: &[u32], out: &mut [i32]) -> Result<(), CoderError> {
        if ids.len() != out.len() {
            return Err(CoderError::InvalidArgument);
        }
        self.check_ids(ids)?;
        let mut dec = Decoder::new(self, stream)?;
        for (dst, &t) in out.iter_mut().zip(ids) {
            let v = dec.decode_symbol(t)?;
            *dst = i32::try_from(v).map_err(|_| CoderError::Symbol)?;
        }
        dec.finish()
    }
}

/// Incremental decoder over one stream.
///
/// The state is carried as u64: a well-formed stream keeps it below 2^24,
/// and for arbitrary corrupt bytes it still cannot grow past ~2^33 (each
/// symbol maps state to at most `state + 2^16`), so the arithmetic here is
/// exact for every input and corruption surfaces as an error, never as
/// overflow.
pub struct Decoder<'a> {
    set: &'a TableSet,
    stream: &'a [u8],
    pos: usize,
    state: u64,
}

impl<'a> Decoder<'a> {
    pub fn new(set: &'a TableSet, stream: &'a [u8]) -> Result<Decoder<'a>, CoderError> {
        if stream.len() < 4 {
            return Err(CoderError::Truncated);
        }
        let state = u32::from_be_bytes([stream[0], stream[1], stream[2], stream[3]]) as u64;
        Ok(Decoder { set, stream, pos: 4, state })
    }

    fn renorm(&mut self) -> Result<(), CoderError> {
        while self.state < RANS_L {
            if self.pos >= self.stream.len() {
                return Err(CoderError::Truncated);
            }
            self.state = (self.state << 8) | self.stream[self.pos] as u64;
            self.pos += 1;
        }
        Ok(())
    }

    fn read_bits(&mut self, nbits: u32) -> Result<u32, CoderError> {
        let val = (self.state & ((1 << nbits) - 1)) as u32;
        self.state >>= nbits;
        self.renorm()?;
        Ok(val)
    }

    /// Decoded values are exact up to the full 16-chunk escape range, which
    /// overflows i64, so they come back as i128 and the caller narrows.
    pub fn decode_symbol(&mut self, table_id: u32) -> Result<i128, CoderError> {
        let table = self
            .set
            .tables
            .get(table_id as usize)
            .ok_or(CoderError::InvalidArgument)?;
        let precision = self.set.precision;
        let escape = table.freqs.len() - 1;

        let cf = self.state & ((1 << precision) - 1);
        let slot = table.lut[cf as usize] as usize;
        self.state = table.freqs[slot] as u64 * (self.state >> precision) + cf
            - table.cdf[slot] as u64;
        self.renorm()?;
        if slot != escape {
            return Ok(slot as i128 + table.offset as i128);
        }
        let sign = self.read_bits(1)?;
        let mut mag: u64 = 0;
        let mut shift: u32 = 0;
        loop {
            mag |= (self.read_bits(BYPASS_BITS)? as u64) << shift;
            shift += BYPASS_BITS;
            if self.read_bits(1)? == 0 {
                break;
            }
            if shift >= BYPASS_BITS * MAX_BYPASS_CHUNKS {
                return Err(CoderError::Desync);
            }
        }
        let rel = if sign != 0 {
            -(mag as i128 + 1)
        } else {
            escape as i128 + mag as i128
        };
        Ok(rel + table.offset as i128)
    }

    pub fn finish(&self) -> Result<(), CoderError> {
        if self.state != RANS_L || self.pos != self.stream.len() {
            return Err(CoderError::Desync);
        }
        Ok(())
    }
}
