//! Per-router packet machinery: the receive-side mode machine that decides
//! frame by frame whether to close the rectifier, and the transmit-side
//! cursor that walks a frame onto the line one bit period at a time.
//!
//! The receive path mirrors the two-switch front end of a wireless router.
//! During a header the demodulator switch is closed and payload rectification
//! is open; once the address field completes the router either latches onto
//! the payload (own address, input allowed) or detaches to the end of the
//! packet. The two switches are never closed together.

use crate::codec::{end_of_packet, Address, BitFrame, HeaderScanner, FRAME_BITS, HEADER_BITS};
use serde::{Deserialize, Serialize};

/// Receive-side switching state, advancing at most once per bit period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RxMode {
    /// Demodulator closed, rectifier open: scanning for a header.
    HeaderListen,
    /// Rectifier closed, demodulator open: storing payload energy.
    PayloadReceive,
    /// Both switches open: the frame on the air belongs to someone else.
    Detached,
}

impl RxMode {
    pub fn demodulator_on(self) -> bool {
        matches!(self, RxMode::HeaderListen)
    }

    pub fn rectifier_on(self) -> bool {
        matches!(self, RxMode::PayloadReceive)
    }
}

/// Outcome of the header decision at the end of the address field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxDecision {
    /// Own address: rectifier closes for the payload run.
    Accepted(Address),
    /// Another router's frame: sit out to the end of the packet.
    Rejected(Address),
    /// Own address while an output of the same router was in flight; the
    /// input stays open because the router never converts both ways at once.
    Deferred(Address),
}

/// What one bit period did to the receiver.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct RxStep {
    pub decision: Option<RxDecision>,
    /// The 100th bit just ended and the receiver re-armed for a new header.
    pub frame_end: bool,
}

/// Wireless receive front end of one router.
#[derive(Debug, Clone)]
pub struct WirelessReceiver {
    address: Address,
    mode: RxMode,
    scanner: HeaderScanner,
    bit_counter: u32,
}

impl WirelessReceiver {
    pub fn new(address: Address) -> Self {
        WirelessReceiver {
            address,
            mode: RxMode::HeaderListen,
            scanner: HeaderScanner::new(),
            bit_counter: 0,
        }
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn mode(&self) -> RxMode {
        self.mode
    }

    /// Consumes the bit whose period just ended. `defer_input` reports
    /// whether the router is currently transmitting; a header for this
    /// address is then deferred instead of accepted.
    ///
    /// Within [`RxMode::HeaderListen`] the bit feeds the header scanner; in
    /// the other modes the line is ignored and only the bit counter runs,
    /// re-arming the receiver exactly at the frame boundary.
    pub fn step_bit(&mut self, bit: bool, defer_input: bool) -> RxStep {
        match self.mode {
            RxMode::HeaderListen => {
                let Some(addr) = self.scanner.push(bit) else {
                    return RxStep::default();
                };
                self.bit_counter = HEADER_BITS as u32;
                let decision = if addr != self.address {
                    self.mode = RxMode::Detached;
                    RxDecision::Rejected(addr)
                } else if defer_input {
                    self.mode = RxMode::Detached;
                    RxDecision::Deferred(addr)
                } else {
                    self.mode = RxMode::PayloadReceive;
                    RxDecision::Accepted(addr)
                };
                RxStep {
                    decision: Some(decision),
                    frame_end: false,
                }
            }
            RxMode::PayloadReceive | RxMode::Detached => {
                self.bit_counter += 1;
                if end_of_packet(self.bit_counter) {
                    self.mode = RxMode::HeaderListen;
                    self.scanner.reset();
                    self.bit_counter = 0;
                    RxStep {
                        decision: None,
                        frame_end: true,
                    }
                } else {
                    RxStep::default()
                }
            }
        }
    }
}

/// A frame in flight from an output port, one bit per period.
#[derive(Debug, Clone)]
pub struct OutgoingFrame {
    frame: BitFrame,
    bit_index: usize,
}

impl OutgoingFrame {
    pub fn new(frame: BitFrame) -> Self {
        OutgoingFrame {
            frame,
            bit_index: 0,
        }
    }

    /// Bit on the line during the current period.
    pub fn current_bit(&self) -> bool {
        self.frame.bit(self.bit_index)
    }

    /// True while the continuous-high payload run is on the line.
    pub fn in_payload(&self) -> bool {
        self.bit_index >= HEADER_BITS
    }

    pub fn address(&self) -> Address {
        self.frame.address()
    }

    pub fn frame(&self) -> &BitFrame {
        &self.frame
    }

    pub fn bits_sent(&self) -> usize {
        self.bit_index
    }

    /// Moves past the bit that just ended; true once the frame is done.
    pub fn advance(&mut self) -> bool {
        self.bit_index += 1;
        self.bit_index == FRAME_BITS
    }
}

/// Wired hops carry the tag as clean logic levels, so the destination reads
/// the address directly and latches its payload switch when it matches.
pub fn wired_input_accept(frame: &BitFrame, own: Address) -> bool {
    frame.address() == own
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(v: u8) -> Address {
        Address::new(v).unwrap()
    }

    /// Runs one whole frame through a receiver, asserting switch exclusion on
    /// every bit, and returns the decisions and frame-end count observed.
    fn feed_frame(
        rx: &mut WirelessReceiver,
        frame: &BitFrame,
        defer: bool,
    ) -> (Vec<RxDecision>, u32) {
        let mut decisions = Vec::new();
        let mut ends = 0;
        for i in 0..FRAME_BITS {
            let step = rx.step_bit(frame.bit(i), defer);
            let m = rx.mode();
            assert!(!(m.demodulator_on() && m.rectifier_on()));
            if let Some(d) = step.decision {
                assert_eq!(i, HEADER_BITS - 1, "decision must land at the address end");
                decisions.push(d);
            }
            if step.frame_end {
                assert_eq!(i, FRAME_BITS - 1, "re-arm must land at the frame end");
                ends += 1;
            }
        }
        (decisions, ends)
    }

    #[test]
    fn own_frame_is_accepted_then_rearms() {
        let mut rx = WirelessReceiver::new(addr(3));
        let frame = BitFrame::with_default_width(addr(3));
        let (decisions, ends) = feed_frame(&mut rx, &frame, false);
        assert_eq!(decisions, vec![RxDecision::Accepted(addr(3))]);
        assert_eq!(ends, 1);
        assert_eq!(rx.mode(), RxMode::HeaderListen);
    }

    #[test]
    fn rectifier_is_closed_for_the_whole_payload() {
        let mut rx = WirelessReceiver::new(addr(3));
        let frame = BitFrame::with_default_width(addr(3));
        for i in 0..FRAME_BITS {
            rx.step_bit(frame.bit(i), false);
            if i >= HEADER_BITS - 1 && i < FRAME_BITS - 1 {
                assert_eq!(rx.mode(), RxMode::PayloadReceive, "bit {}", i);
            }
        }
    }

    #[test]
    fn foreign_frame_is_rejected_and_unloaded() {
        let mut rx = WirelessReceiver::new(addr(3));
        let frame = BitFrame::with_default_width(addr(5));
        let (decisions, ends) = feed_frame(&mut rx, &frame, false);
        assert_eq!(decisions, vec![RxDecision::Rejected(addr(5))]);
        assert_eq!(ends, 1);
    }

    #[test]
    fn own_frame_is_deferred_while_transmitting() {
        let mut rx = WirelessReceiver::new(addr(3));
        let frame = BitFrame::with_default_width(addr(3));
        let (decisions, _) = feed_frame(&mut rx, &frame, true);
        assert_eq!(decisions, vec![RxDecision::Deferred(addr(3))]);
        assert_eq!(rx.mode(), RxMode::HeaderListen);
    }

    #[test]
    fn defer_does_not_touch_foreign_frames() {
        let mut rx = WirelessReceiver::new(addr(3));
        let frame = BitFrame::with_default_width(addr(7));
        let (decisions, _) = feed_frame(&mut rx, &frame, true);
        assert_eq!(decisions, vec![RxDecision::Rejected(addr(7))]);
    }

    #[test]
    fn selectivity_matrix_is_exact() {
        for own in Address::all() {
            for sent in Address::all() {
                let mut rx = WirelessReceiver::new(own);
                let frame = BitFrame::with_default_width(sent);
                let (decisions, ends) = feed_frame(&mut rx, &frame, false);
                assert_eq!(decisions.len(), 1);
                assert_eq!(ends, 1);
                let expect = if own == sent {
                    RxDecision::Accepted(sent)
                } else {
                    RxDecision::Rejected(sent)
                };
                assert_eq!(decisions[0], expect, "own {} sent {}", own, sent);
            }
        }
    }

    #[test]
    fn back_to_back_frames_each_get_a_decision() {
        let mut rx = WirelessReceiver::new(addr(3));
        let first = BitFrame::with_default_width(addr(5));
        let second = BitFrame::with_default_width(addr(3));
        let (d1, e1) = feed_frame(&mut rx, &first, false);
        let (d2, e2) = feed_frame(&mut rx, &second, false);
        assert_eq!(d1, vec![RxDecision::Rejected(addr(5))]);
        assert_eq!(d2, vec![RxDecision::Accepted(addr(3))]);
        assert_eq!(e1 + e2, 2);
    }

    #[test]
    fn idle_line_never_decides() {
        let mut rx = WirelessReceiver::new(addr(3));
        for _ in 0..1000 {
            let step = rx.step_bit(false, false);
            assert_eq!(step, RxStep::default());
        }
        assert_eq!(rx.mode(), RxMode::HeaderListen);
    }

    #[test]
    fn outgoing_frame_walks_every_bit_once() {
        let frame = BitFrame::with_default_width(addr(9));
        let mut out = OutgoingFrame::new(frame.clone());
        for i in 0..FRAME_BITS {
            assert_eq!(out.current_bit(), frame.bit(i));
            assert_eq!(out.in_payload(), i >= HEADER_BITS);
            let done = out.advance();
            assert_eq!(done, i == FRAME_BITS - 1);
        }
    }

    #[test]
    fn wired_accept_matches_only_the_tagged_address() {
        for own in Address::all() {
            for sent in Address::all() {
                let frame = BitFrame::with_default_width(sent);
                assert_eq!(wired_input_accept(&frame, own), own == sent);
            }
        }
    }
}
