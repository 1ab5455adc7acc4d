//! Power packet frames: bit-level construction and recovery.
//!
//! Every frame is exactly [`FRAME_BITS`] bits long. The first three bits are
//! the sync pattern 010, bits 4..=7 carry the destination address MSB first,
//! and bits 8..=100 are driven high for the whole payload. The payload bits
//! are not data; they gate the power transfer, so "decoding" a frame means
//! recovering the address and then counting bits until the packet ends.
//!
//! Receivers run their own bit clock. [`synchronize`] recovers the sub-bit
//! phase of an incoming stream by shifting the sampling phase in steps of
//! [`ClockConfig::phase_step`] until a bit edge is pinned down, after which
//! mid-bit sampling is reliable and [`HeaderScanner`] can latch onto the
//! sync pattern.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fixed frame length shared by every router in a network.
pub const FRAME_BITS: usize = 100;
/// Sync prefix length.
pub const SYNC_BITS: usize = 3;
/// Address field width.
pub const ADDRESS_BITS: usize = 4;
/// Header length: sync prefix plus address field.
pub const HEADER_BITS: usize = SYNC_BITS + ADDRESS_BITS;
/// Payload length; all payload bits are high.
pub const PAYLOAD_BITS: usize = FRAME_BITS - HEADER_BITS;
/// The sync prefix, transmitted first.
pub const SYNC_PATTERN: [bool; SYNC_BITS] = [false, true, false];
/// Default bit width in seconds (10 kHz modulation).
pub const DEFAULT_BIT_WIDTH: f64 = 100e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("address {0} does not fit the 4-bit field")]
    AddressRange(u8),
    #[error("header sync bits {found:?} are not 010")]
    SyncPattern { found: [bool; SYNC_BITS] },
    #[error("header requires {HEADER_BITS} samples, got {0}")]
    TruncatedHeader(usize),
    #[error("no signal: sampler stayed low for the whole search budget")]
    NoSignal,
    #[error("no bit transitions within the search budget")]
    NoTransitions,
    #[error("invalid clock config: {0}")]
    ClockConfig(String),
}

/// 4-bit destination address, transmitted MSB first.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Address(u8);

impl Address {
    pub const MAX: u8 = 0b1111;

    pub fn new(value: u8) -> Result<Self, CodecError> {
        if value > Self::MAX {
            return Err(CodecError::AddressRange(value));
        }
        Ok(Address(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Field bits in transmission order (MSB first).
    pub fn bits(self) -> [bool; ADDRESS_BITS] {
        let mut out = [false; ADDRESS_BITS];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = self.0 & (1 << (ADDRESS_BITS - 1 - i)) != 0;
        }
        out
    }

    pub fn from_bits(bits: [bool; ADDRESS_BITS]) -> Self {
        let mut v = 0u8;
        for bit in bits {
            v = (v << 1) | bit as u8;
        }
        Address(v)
    }

    /// All sixteen addresses in ascending order.
    pub fn all() -> impl Iterator<Item = Address> {
        (0..=Self::MAX).map(Address)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04b}", self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({:04b})", self.0)
    }
}

impl FromStr for Address {
    type Err = CodecError;

    /// Parses the 4-character binary form used in scenario files, e.g. "0001".
    fn from_str(s: &str) -> Result<Self, CodecError> {
        let mut v = 0u8;
        if s.len() != ADDRESS_BITS {
            return Err(CodecError::AddressRange(u8::MAX));
        }
        for c in s.chars() {
            v = (v << 1)
                | match c {
                    '0' => 0,
                    '1' => 1,
                    _ => return Err(CodecError::AddressRange(u8::MAX)),
                };
        }
        Address::new(v)
    }
}

impl TryFrom<String> for Address {
    type Error = CodecError;

    fn try_from(s: String) -> Result<Self, CodecError> {
        s.parse()
    }
}

impl From<Address> for String {
    fn from(a: Address) -> String {
        a.to_string()
    }
}

/// One complete frame plus the bit width it is transmitted at.
#[derive(Clone)]
pub struct BitFrame {
    bits: [bool; FRAME_BITS],
    bit_width: f64,
}

impl BitFrame {
    /// Builds the frame for `address`: 010, the address MSB first, then a
    /// continuous-high payload.
    pub fn encode(address: Address, bit_width: f64) -> Self {
        let mut bits = [true; FRAME_BITS];
        bits[..SYNC_BITS].copy_from_slice(&SYNC_PATTERN);
        bits[SYNC_BITS..HEADER_BITS].copy_from_slice(&address.bits());
        BitFrame { bits, bit_width }
    }

    pub fn with_default_width(address: Address) -> Self {
        Self::encode(address, DEFAULT_BIT_WIDTH)
    }

    /// Bit by zero-based index; index 0 is the first sync bit.
    pub fn bit(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn bits(&self) -> &[bool; FRAME_BITS] {
        &self.bits
    }

    pub fn header(&self) -> &[bool] {
        &self.bits[..HEADER_BITS]
    }

    pub fn address(&self) -> Address {
        let mut field = [false; ADDRESS_BITS];
        field.copy_from_slice(&self.bits[SYNC_BITS..HEADER_BITS]);
        Address::from_bits(field)
    }

    pub fn bit_width(&self) -> f64 {
        self.bit_width
    }

    pub fn duration(&self) -> f64 {
        self.bit_width * FRAME_BITS as f64
    }
}

impl fmt::Debug for BitFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BitFrame(addr {}, {} s/bit)",
            self.address(),
            self.bit_width
        )
    }
}

/// Recovers the destination address from sampled header bits.
///
/// `samples` must cover at least the [`HEADER_BITS`] slots of one frame,
/// starting at the frame's first bit.
pub fn decode_header(samples: &[bool]) -> Result<Address, CodecError> {
    if samples.len() < HEADER_BITS {
        return Err(CodecError::TruncatedHeader(samples.len()));
    }
    if samples[..SYNC_BITS] != SYNC_PATTERN {
        let mut found = [false; SYNC_BITS];
        found.copy_from_slice(&samples[..SYNC_BITS]);
        return Err(CodecError::SyncPattern { found });
    }
    let mut field = [false; ADDRESS_BITS];
    field.copy_from_slice(&samples[SYNC_BITS..HEADER_BITS]);
    Ok(Address::from_bits(field))
}

/// True exactly when `bit_counter` has counted out a whole frame.
///
/// The counter is expected to run from 1 at the first sync bit; packets have
/// no footer, so this is the only end-of-packet condition.
pub fn end_of_packet(bit_counter: u32) -> bool {
    bit_counter == FRAME_BITS as u32
}

/// Receiver clock parameters for [`synchronize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockConfig {
    /// Bit period in seconds. Fixed in advance for the whole network.
    pub period: f64,
    /// Bit periods granted to each full sweep position before giving up;
    /// the total search budget is `ceil(1/phase_step) * sync_window` periods.
    pub sync_window: u32,
    /// Fraction of the period the sampling phase shifts per probe.
    pub phase_step: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig {
            period: DEFAULT_BIT_WIDTH,
            sync_window: 10,
            phase_step: 0.1,
        }
    }
}

impl ClockConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.period > 0.0) {
            return Err(CodecError::ClockConfig(format!(
                "period must be positive, got {}",
                self.period
            )));
        }
        if self.sync_window < SYNC_BITS as u32 {
            return Err(CodecError::ClockConfig(format!(
                "sync_window must cover at least {} bits, got {}",
                SYNC_BITS, self.sync_window
            )));
        }
        if !(self.phase_step > 0.0 && self.phase_step < 1.0) {
            return Err(CodecError::ClockConfig(format!(
                "phase_step must be in (0, 1), got {}",
                self.phase_step
            )));
        }
        Ok(())
    }
}

/// Recovers the bit-grid phase of an incoming stream.
///
/// The sampler yields the line's logic level at an arbitrary time. The search
/// advances the probe instant by `phase_step * period` per sample until two
/// consecutive probes disagree; the edge between them fixes the bit grid, and
/// the returned offset (the edge position modulo the period) is accurate to
/// half a phase step. Sampling at `offset + (k + 1/2) * period` afterwards
/// reads each bit at its midpoint.
///
/// The search consumes at most `ceil(1/phase_step) * sync_window` bit
/// periods, enough to cover one full frame with the default config, so a live
/// packet stream always presents an edge in time. A line that stays low for
/// the whole budget reports [`CodecError::NoSignal`]; one that stays high
/// reports [`CodecError::NoTransitions`].
pub fn synchronize<S: FnMut(f64) -> bool>(
    mut sampler: S,
    cfg: &ClockConfig,
) -> Result<f64, CodecError> {
    cfg.validate()?;
    let step = cfg.phase_step * cfg.period;
    let sweeps = (1.0 / cfg.phase_step).ceil();
    let budget = cfg.sync_window as f64 * sweeps * cfg.period;
    let samples = (budget / step).ceil() as u64;

    let mut prev = sampler(0.0);
    let mut any_high = prev;
    for i in 1..=samples {
        let t = i as f64 * step;
        let cur = sampler(t);
        any_high |= cur;
        if cur != prev {
            return Ok((t - 0.5 * step).rem_euclid(cfg.period));
        }
        prev = cur;
    }
    Err(if any_high {
        CodecError::NoTransitions
    } else {
        CodecError::NoSignal
    })
}

/// Streaming matcher for the 010 sync prefix and the address that follows.
///
/// Feed one sampled bit per period while listening for a header. On the bit
/// that completes the address field, `push` returns the decoded address; the
/// caller is then 7 bits into the frame and switches to counting payload
/// bits. Idle lines (all low) never trigger a match.
#[derive(Debug, Clone)]
pub struct HeaderScanner {
    state: ScanState,
}

#[derive(Debug, Clone)]
enum ScanState {
    Seeking {
        last: [bool; 2],
        filled: u8,
    },
    Collecting {
        bits: [bool; ADDRESS_BITS],
        count: u8,
    },
}

impl Default for HeaderScanner {
    fn default() -> Self {
        Self::new()
    }
}

impl HeaderScanner {
    pub fn new() -> Self {
        HeaderScanner {
            state: ScanState::Seeking {
                last: [false; 2],
                filled: 0,
            },
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new();
    }

    /// Consumes one bit; yields the address when a header completes.
    pub fn push(&mut self, bit: bool) -> Option<Address> {
        match &mut self.state {
            ScanState::Seeking { last, filled } => {
                if *filled >= 2
                    && last[0] == SYNC_PATTERN[0]
                    && last[1] == SYNC_PATTERN[1]
                    && bit == SYNC_PATTERN[2]
                {
                    self.state = ScanState::Collecting {
                        bits: [false; ADDRESS_BITS],
                        count: 0,
                    };
                } else {
                    last[0] = last[1];
                    last[1] = bit;
                    *filled = (*filled + 1).min(2);
                }
                None
            }
            ScanState::Collecting { bits, count } => {
                bits[*count as usize] = bit;
                *count += 1;
                if *count as usize == ADDRESS_BITS {
                    let addr = Address::from_bits(*bits);
                    self.reset();
                    Some(addr)
                } else {
                    None
                }
            }
        }
    }
}
