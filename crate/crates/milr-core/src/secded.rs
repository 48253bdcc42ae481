//! SECDED-protected parameter memory.
//!
//! Each 32-bit data word is stored as a 39-bit extended Hamming codeword:
//! 38 Hamming positions (1-indexed; check bits at the power-of-two positions
//! 1, 2, 4, 8, 16, 32; data bits at the rest) plus one overall parity bit in
//! codeword bit 38. Single-bit errors anywhere in the 39 bits are corrected,
//! double-bit errors are detected but not correctable.
//!
//! [`EccMemory`] is the authoritative storage for a network's parameters:
//! faults under an ECC policy are injected into the codewords, and
//! [`EccMemory::scrub`] writes the (corrected) data view back into the
//! network.

use crate::network::Network;
use crate::tensor::Dtype;

pub const CODEWORD_BITS: u32 = 39;
const HAMMING_BITS: u32 = 38;
const PARITY_BIT: u32 = 38; // 0-indexed position of the overall parity bit

/// 1-indexed Hamming positions that hold data bits (non powers of two).
fn data_positions() -> impl Iterator<Item = u32> {
    (3..=HAMMING_BITS).filter(|p| !p.is_power_of_two())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecdedStatus {
    Clean,
    Corrected,
    DetectedUncorrectable,
}

/// Encodes a 32-bit data word into a 39-bit codeword (stored in a u64).
pub fn encode(data: u32) -> u64 {
    let mut code: u64 = 0;
    for (bit, pos) in data_positions().enumerate() {
        if data >> bit & 1 == 1 {
            code |= 1u64 << (pos - 1);
        }
    }
    for j in 0..6 {
        let mask = 1u32 << j;
        let mut parity = 0u64;
        for pos in 1..=HAMMING_BITS {
            if pos & mask != 0 {
                parity ^= code >> (pos - 1) & 1;
            }
        }
        if parity == 1 {
            code |= 1u64 << ((1u32 << j) - 1);
        }
    }
    let overall = (code.count_ones() & 1) as u64;
    code | overall << PARITY_BIT
}

fn extract_data(code: u64) -> u32 {
    let mut data = 0u32;
    for (bit, pos) in data_positions().enumerate() {
        if code >> (pos - 1) & 1 == 1 {
            data |= 1u32 << bit;
        }
    }
    data
}

/// Decodes a codeword, returning the best-effort data word and the outcome.
pub fn decode(code: u64) -> (u32, SecdedStatus) {
    let code = code & (1u64 << CODEWORD_BITS) - 1;
    let mut syndrome = 0u32;
    for pos in 1..=HAMMING_BITS {
        if code >> (pos - 1) & 1 == 1 {
            syndrome ^= pos;
        }
    }
    let parity_err = code.count_ones() & 1 == 1;
    match (syndrome, parity_err) {
        (0, false) => (extract_data(code), SecdedStatus::Clean),
        (0, true) => {
            // The overall parity bit itself flipped; data is intact.
            (extract_data(code), SecdedStatus::Corrected)
        }
        (s, true) if s <= HAMMING_BITS => {
            let fixed = code ^ 1u64 << (s - 1);
            (extract_data(fixed), SecdedStatus::Corrected)
        }
        _ => (extract_data(code), SecdedStatus::DetectedUncorrectable),
    }
}

/// Check-bit storage cost: 7 extra bits per 32 data bits.
pub fn ecc_overhead_bytes(param_count: usize, dtype: Dtype) -> usize {
    let words_per_param = dtype.byte_size() / 4;
    param_count * words_per_param * 7 / 8
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScrubReport {
    pub clean: usize,
    pub corrected: usize,
    pub uncorrectable: usize,
}

/// SECDED codewords covering every parameter word of a network, in layer
/// order. f64 parameters occupy two codewords each (low half first).
#[derive(Debug, Clone)]
pub struct EccMemory {
    codewords: Vec<u64>,
    /// (layer index, parameter element count) per parameterized layer.
    layout: Vec<(usize, usize)>,
    words_per_param: usize,
}

impl EccMemory {
    pub fn from_network(net: &Network) -> Self {
        let words_per_param = net.dtype().byte_size() / 4;
        let mut codewords = Vec::new();
        let mut layout = Vec::new();
        for (idx, layer) in net.layers().iter().enumerate() {
            let Some(params) = layer.spec.params() else {
                continue;
            };
            layout.push((idx, params.len()));
            for i in 0..params.len() {
                let word = params.word(i);
                codewords.push(encode(word as u32));
                if words_per_param == 2 {
                    codewords.push(encode((word >> 32) as u32));
                }
            }
        }
        EccMemory {
            codewords,
            layout,
            words_per_param,
        }
    }

    pub fn codeword_count(&self) -> usize {
        self.codewords.len()
    }

    /// Total bit positions exposed to fault injection.
    pub fn bit_count(&self) -> u64 {
        self.codewords.len() as u64 * CODEWORD_BITS as u64
    }

    pub fn flip_bit(&mut self, word_idx: usize, bit: u32) {
        debug_assert!(bit < CODEWORD_BITS);
        self.codewords[word_idx] ^= 1u64 << bit;
    }

    /// Decodes every codeword, repairs correctable ones in place, and writes
    /// the resulting data view back into the network's parameters.
    pub fn scrub(&mut self, net: &mut Network) -> ScrubReport {
        let mut report = ScrubReport::default();
        let mut cursor = 0usize;
        for &(layer_idx, count) in &self.layout.clone() {
            let params = net
                .params_mut(layer_idx)
                .expect("ECC layout references a parameterized layer");
            for i in 0..count {
                let mut word = 0u64;
                for half in 0..self.words_per_param {
                    let (data, status) = decode(self.codewords[cursor]);
                    match status {
                        SecdedStatus::Clean => report.clean += 1,
                        SecdedStatus::Corrected => {
                            report.corrected += 1;
                            self.codewords[cursor] = encode(data);
                        }
                        SecdedStatus::DetectedUncorrectable => report.uncorrectable += 1,
                    }
                    word |= (data as u64) << (32 * half);
                    cursor += 1;
                }
                params.set_word(i, word);
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::builtin;
    use crate::rng::SplitMix64;

    const SAMPLES: [u32; 6] = [
        0x0000_0000,
        0xFFFF_FFFF,
        0xDEAD_BEEF,
        0x8000_0001,
        0x3F80_0000, // 1.0f32
        0x5555_5555,
    ];

    #[test]
    fn clean_roundtrip() {
        for &d in &SAMPLES {
            let (out, status) = decode(encode(d));
            assert_eq!(out, d);
            assert_eq!(status, SecdedStatus::Clean);
        }
    }

    #[test]
    fn every_single_bit_error_is_corrected() {
        for &d in &SAMPLES {
            let code = encode(d);
            for bit in 0..CODEWORD_BITS {
                let (out, status) = decode(code ^ 1u64 << bit);
                assert_eq!(status, SecdedStatus::Corrected, "data {d:#x} bit {bit}");
                assert_eq!(out, d, "data {d:#x} bit {bit}");
            }
        }
    }

    #[test]
    fn every_double_bit_error_is_detected() {
        for &d in &SAMPLES {
            let code = encode(d);
            for b1 in 0..CODEWORD_BITS {
                for b2 in b1 + 1..CODEWORD_BITS {
                    let (_, status) = decode(code ^ 1u64 << b1 ^ 1u64 << b2);
                    assert_eq!(
                        status,
                        SecdedStatus::DetectedUncorrectable,
                        "data {d:#x} bits {b1},{b2}"
                    );
                }
            }
        }
    }

    #[test]
    fn overhead_matches_pinned_examples() {
        assert_eq!(ecc_overhead_bytes(1_669_290, Dtype::F32), 1_460_628);
        assert_eq!(ecc_overhead_bytes(8, Dtype::F64), 14);
    }

    #[test]
    fn scrub_repairs_single_flips_and_flags_doubles() {
        let mut net = builtin("mnist", Dtype::F32, 9).unwrap();
        let pristine = net.clone();
        let mut mem = EccMemory::from_network(&net);
        let mut rng = SplitMix64::new(5);
        // 50 isolated single-bit flips in distinct codewords.
        let n = mem.codeword_count();
        let mut hit = std::collections::HashSet::new();
        while hit.len() < 50 {
            let w = (rng.next_u64() % n as u64) as usize;
            if hit.insert(w) {
                mem.flip_bit(w, (rng.next_u64() % CODEWORD_BITS as u64) as u32);
            }
        }
        // One codeword with a double flip, distinct from the singles.
        let double = (0..n).find(|w| !hit.contains(w)).unwrap();
        mem.flip_bit(double, 3);
        mem.flip_bit(double, 17);
        let report = mem.scrub(&mut net);
        assert_eq!(report.corrected, 50);
        assert_eq!(report.uncorrectable, 1);
        assert_eq!(report.clean, n - 51);
        // Every corrected word restored exactly; only the double-flip word
        // may differ from the pristine network.
        let mut diffs = 0;
        for (a, b) in net.layers().iter().zip(pristine.layers()) {
            if let (Some(x), Some(y)) = (a.spec.params(), b.spec.params()) {
                for i in 0..x.len() {
                    if x.word(i) != y.word(i) {
                        diffs += 1;
                    }
                }
            }
        }
        assert!(diffs <= 1, "{diffs} words differ after scrub");
    }

    #[test]
    fn f64_memory_uses_two_codewords_per_param() {
        let net = builtin("mnist", Dtype::F64, 1).unwrap();
        let mem = EccMemory::from_network(&net);
        assert_eq!(mem.codeword_count(), 2 * net.param_count());
    }
}
