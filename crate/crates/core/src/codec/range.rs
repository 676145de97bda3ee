//! Byte-oriented range coder with 32-bit state and 16-bit frequency tables.
//!
//! The encoder follows the classic carry-propagating design (low register of
//! 33 bits, one cached byte plus a run of pending `0xFF`s). Two small tweaks
//! keep streams short: the leading byte, which is always zero, is never
//! written, and the final flush picks the value with the most trailing zero
//! bits inside the last interval so that the trailing zero bytes can be
//! dropped. The decoder reads zeros past the end of its input.

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
const TOP: u32 = 1 << 24;

/// Cumulative frequencies of one alphabet; `cdf[0] = 0`, `cdf[n] = TOTAL`,
/// every symbol has a nonzero slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cdf: Vec<u32>,
}

impl CdfTable {
    pub fn new(cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() != TOTAL {
            return Err(Error::Domain(format!(
                "a CDF table must run from 0 to {TOTAL} over at least one symbol"
            )));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("CDF table is not strictly increasing".into()));
        }
        Ok(CdfTable { cdf })
    }

    /// Quantise a probability vector, giving every symbol at least one slot.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self> {
        let n = pmf.len();
        if n == 0 || n as u32 > TOTAL / 2 {
            return Err(Error::Domain(format!("alphabet size {n} out of range")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain("probabilities must be finite and nonnegative".into()));
        }
        let mass: f64 = pmf.iter().sum();
        if mass <= 0.0 {
            return Err(Error::Domain("probabilities sum to zero".into()));
        }
        let spare = (TOTAL - n as u32) as f64;
        let mut freq: Vec<u32> = pmf.iter().map(|p| 1 + (p / mass * spare).floor() as u32).collect();
        let used: u32 = freq.iter().sum();
        let peak = (0..n).max_by(|&a, &b| pmf[a].total_cmp(&pmf[b]).then(b.cmp(&a))).unwrap_or(0);
        freq[peak] += TOTAL - used;
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        Self::new(cdf)
    }

    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self, symbol: usize) -> u32 {
        self.cdf[symbol]
    }

    pub fn freq(&self, symbol: usize) -> u32 {
        self.cdf[symbol + 1] - self.cdf[symbol]
    }

    /// Code length of `symbol` in bits under the quantised table.
    pub fn bits(&self, symbol: usize) -> f64 {
        (TOTAL as f64 / self.freq(symbol) as f64).log2()
    }

    /// Symbol whose slot contains `target`.
    fn lookup(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }
}

#[derive(Debug, Default)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    first: bool,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        if std::mem::take(&mut self.first) {
            debug_assert_eq!(byte, 0);
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn encode(&mut self, table: &CdfTable, symbol: usize) {
        let r = self.range >> PRECISION_BITS;
        self.low += u64::from(r) * u64::from(table.start(symbol));
        self.range = r * table.freq(symbol);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let end = self.low + u64::from(self.range);
        // Largest power of two k with a multiple of 2^k inside [low, end).
        let value = (0..=32u32)
            .rev()
            .map(|k| {
                let m = (1u64 << k) - 1;
                (self.low + m) & !m
            })
            .find(|&v| v < end)
            .unwrap_or(self.low);
        self.low = value;
        for _ in 0..5 {
            self.shift_low();
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            input,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= TOTAL {
            return Err(Error::Corrupt(format!(
                "range decoder target {target} outside the table near byte {}",
                self.pos
            )));
        }
        let s = table.lookup(target);
        self.code -= r * table.start(s);
        self.range = r * table.freq(s);
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.range <<= 8;
        }
        Ok(s)
    }

    /// Errors if the input holds bytes the decoder never needed.
    pub fn finish(self) -> Result<()> {
        if self.input.len() > self.pos {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after the last symbol",
                self.input.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Encode `symbols[i]` with `tables[select(i)]`.
pub fn range_encode(symbols: &[usize], tables: &[CdfTable], select: impl Fn(usize) -> usize) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let table = tables
            .get(select(i))
            .ok_or_else(|| Error::Domain(format!("no CDF table for symbol {i}")))?;
        if s >= table.len() {
            return Err(Error::Domain(format!(
                "symbol {s} at position {i} outside a {}-symbol table",
                table.len()
            )));
        }
        enc.encode(table, s);
    }
    Ok(enc.finish())
}

pub fn range_decode(
    bytes: &[u8],
    tables: &[CdfTable],
    count: usize,
    select: impl Fn(usize) -> usize,
) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes);
    let out = (0..count)
        .map(|i| {
            let table = tables
                .get(select(i))
                .ok_or_else(|| Error::Domain(format!("no CDF table for symbol {i}")))?;
            dec.decode(table)
        })
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
