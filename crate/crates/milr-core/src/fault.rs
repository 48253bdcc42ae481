//! Bit-level fault injection into network parameters.
//!
//! Three fault models are supported:
//! - independent bit flips at a fixed raw bit-error rate, sampled with
//!   geometric gaps so sparse rates stay O(flips) rather than O(bits);
//! - whole-weight corruption, where each selected weight has every stored
//!   bit inverted;
//! - whole-layer corruption, where a layer's parameters are replaced with
//!   fresh uniform values in [-1, 1).
//!
//! Every flip is an XOR, so applying the same records twice restores the
//! original bits exactly.

use crate::error::{MilrError, Result};
use crate::network::Network;
use crate::rng::SplitMix64;
use crate::secded::{EccMemory, CODEWORD_BITS};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One flipped bit: layer index into the network, flat element index within
/// that layer's parameters, and the bit position within the stored word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub layer: usize,
    pub elem: usize,
    pub bit: u32,
}

/// Flat view of all parameter elements across the network's layers.
struct ParamSpace {
    /// (layer index, element count), in layer order.
    entries: Vec<(usize, usize)>,
    total_elems: u64,
}

impl ParamSpace {
    fn of(net: &Network) -> Self {
        let mut entries = Vec::new();
        let mut total = 0u64;
        for (idx, layer) in net.layers().iter().enumerate() {
            if let Some(p) = layer.spec.params() {
                entries.push((idx, p.len()));
                total += p.len() as u64;
            }
        }
        ParamSpace {
            entries,
            total_elems: total,
        }
    }

    fn locate(&self, mut elem: u64) -> (usize, usize) {
        for &(layer, len) in &self.entries {
            if elem < len as u64 {
                return (layer, elem as usize);
            }
            elem -= len as u64;
        }
        unreachable!("element index out of parameter space");
    }
}

/// Yields positions selected independently with probability `rate` from
/// `0..space`, via geometric gap sampling.
fn sample_positions(space: u64, rate: f64, rng: &mut SplitMix64) -> Vec<u64> {
    let mut out = Vec::new();
    if space == 0 || rate <= 0.0 {
        return out;
    }
    if rate >= 1.0 {
        return (0..space).collect();
    }
    let log_q = (1.0 - rate).ln();
    let mut pos: u64 = 0;
    loop {
        let gap = (rng.next_open01().ln() / log_q).floor() as u64;
        pos = match pos.checked_add(gap) {
            Some(p) if p < space => p,
            _ => break,
        };
        out.push(pos);
        pos += 1;
        if pos >= space {
            break;
        }
    }
    out
}

/// Flips each parameter bit independently with probability `rate`.
pub fn inject_bitflips(net: &mut Network, rate: f64, rng: &mut SplitMix64) -> Vec<FlipRecord> {
    let space = ParamSpace::of(net);
    let bits = net.dtype().bits() as u64;
    let records: Vec<FlipRecord> = sample_positions(space.total_elems * bits, rate, rng)
        .into_iter()
        .map(|p| {
            let (layer, elem) = space.locate(p / bits);
            FlipRecord {
                layer,
                elem,
                bit: (p % bits) as u32,
            }
        })
        .collect();
    apply_flips(net, &records);
    records
}

/// Selects each weight independently with probability `rate` and inverts
/// every bit of its stored word.
pub fn inject_whole_weight(net: &mut Network, rate: f64, rng: &mut SplitMix64) -> Vec<FlipRecord> {
    let space = ParamSpace::of(net);
    let bits = net.dtype().bits();
    let mut records = Vec::new();
    for p in sample_positions(space.total_elems, rate, rng) {
        let (layer, elem) = space.locate(p);
        for bit in 0..bits {
            records.push(FlipRecord { layer, elem, bit });
        }
    }
    apply_flips(net, &records);
    records
}

/// Replaces the parameters of `layer_idx` with uniform values in [-1, 1),
/// re-drawing if the replacement happens to be bitwise identical. Returns the
/// original parameter tensor.
pub fn corrupt_layer(net: &mut Network, layer_idx: usize, rng: &mut SplitMix64) -> Result<Tensor> {
    let dtype = net.dtype();
    let params = net
        .params_mut(layer_idx)
        .ok_or_else(|| MilrError::Domain(format!("layer {layer_idx} has no parameters")))?;
    let original = params.clone();
    loop {
        let fresh = rng.fill_tensor(original.shape(), dtype);
        if !fresh.bit_eq(&original) {
            *params = fresh;
            return Ok(original);
        }
    }
}

/// XORs each recorded bit; its own inverse, so this both applies and undoes.
pub fn apply_flips(net: &mut Network, records: &[FlipRecord]) {
    for r in records {
        net.params_mut(r.layer)
            .expect("flip record references a parameterized layer")
            .flip_bit(r.elem, r.bit);
    }
}

/// Flips each bit of the 39-bit ECC codeword space independently with
/// probability `rate`. Returns the number of flipped bits.
pub fn inject_bitflips_ecc(mem: &mut EccMemory, rate: f64, rng: &mut SplitMix64) -> u64 {
    let space = mem.codeword_count() as u64 * CODEWORD_BITS as u64;
    let positions = sample_positions(space, rate, rng);
    let n = positions.len() as u64;
    for p in positions {
        mem.flip_bit(
            (p / CODEWORD_BITS as u64) as usize,
            (p % CODEWORD_BITS as u64) as u32,
        );
    }
    n
}

/// Whole-weight corruption in ECC storage: inverts all 39 bits of every
/// codeword backing each selected weight.
pub fn inject_whole_weight_ecc(
    mem: &mut EccMemory,
    words_per_param: usize,
    rate: f64,
    rng: &mut SplitMix64,
) -> u64 {
    let weights = (mem.codeword_count() / words_per_param) as u64;
    let positions = sample_positions(weights, rate, rng);
    let n = positions.len() as u64;
    for p in positions {
        for half in 0..words_per_param {
            let idx = p as usize * words_per_param + half;
            for bit in 0..CODEWORD_BITS {
                mem.flip_bit(idx, bit);
            }
        }
    }
    n * words_per_param as u64 * CODEWORD_BITS as u64
}

/// Serializes flip records as JSON lines.
pub fn write_flip_records(w: &mut impl std::io::Write, records: &[FlipRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r).map_err(|e| MilrError::Format(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_flip_records(r: impl std::io::BufRead) -> Result<Vec<FlipRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MilrError::Format(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::builtin;
    use crate::tensor::Dtype;

    fn nets_bit_eq(a: &Network, b: &Network) -> bool {
        a.layers().iter().zip(b.layers()).all(|(x, y)| {
            match (x.spec.params(), y.spec.params()) {
                (Some(p), Some(q)) => p.bit_eq(q),
                (None, None) => true,
                _ => false,
            }
        })
    }

    #[test]
    fn bitflip_count_tracks_rate() {
        let mut net = builtin("mnist", Dtype::F32, 1).unwrap();
        let mut rng = SplitMix64::new(99);
        let rate = 1e-5;
        let records = inject_bitflips(&mut net, rate, &mut rng);
        let bits = net.param_count() as f64 * 32.0;
        let expected = bits * rate;
        let sd = (bits * rate * (1.0 - rate)).sqrt();
        let n = records.len() as f64;
        assert!(
            (n - expected).abs() < 6.0 * sd,
            "{n} flips, expected about {expected}"
        );
    }

    #[test]
    fn reapplying_records_restores_network() {
        let mut net = builtin("mnist", Dtype::F32, 2).unwrap();
        let pristine = net.clone();
        let mut rng = SplitMix64::new(4);
        let records = inject_bitflips(&mut net, 1e-5, &mut rng);
        assert!(!records.is_empty());
        assert!(!nets_bit_eq(&net, &pristine));
        apply_flips(&mut net, &records);
        assert!(nets_bit_eq(&net, &pristine));
    }

    #[test]
    fn whole_weight_flips_every_bit_of_selected_words() {
        let mut net = builtin("cifar-small", Dtype::F32, 3).unwrap();
        let pristine = net.clone();
        let mut rng = SplitMix64::new(8);
        let records = inject_whole_weight(&mut net, 1e-4, &mut rng);
        assert_eq!(records.len() % 32, 0);
        assert!(!records.is_empty());
        // Every touched word is the bitwise complement of the original.
        for chunk in records.chunks(32) {
            let r = chunk[0];
            let now = net.layers()[r.layer].spec.params().unwrap().word(r.elem);
            let was = pristine.layers()[r.layer].spec.params().unwrap().word(r.elem);
            assert_eq!(now, !was & 0xFFFF_FFFF);
        }
    }

    #[test]
    fn whole_layer_replaces_in_range() {
        let mut net = builtin("mnist", Dtype::F32, 5).unwrap();
        let layer = net.parameterized_layers()[0];
        let mut rng = SplitMix64::new(11);
        let original = corrupt_layer(&mut net, layer, &mut rng).unwrap();
        let params = net.layers()[layer].spec.params().unwrap();
        assert!(!params.bit_eq(&original));
        for i in 0..params.len() {
            let v = params.get(i);
            assert!((-1.0..1.0).contains(&v));
        }
    }

    #[test]
    fn corrupt_layer_rejects_parameterless_layers() {
        let mut net = builtin("mnist", Dtype::F32, 5).unwrap();
        let mut rng = SplitMix64::new(1);
        assert!(corrupt_layer(&mut net, 0, &mut rng).is_err());
    }

    #[test]
    fn rate_one_flips_everything_rate_zero_nothing() {
        let mut net = builtin("mnist", Dtype::F32, 6).unwrap();
        let mut rng = SplitMix64::new(2);
        assert!(inject_bitflips(&mut net, 0.0, &mut rng).is_empty());
        let records = inject_bitflips(&mut net, 1.0, &mut rng);
        assert_eq!(records.len(), net.param_count() * 32);
    }

    #[test]
    fn flip_records_roundtrip_as_json_lines() {
        let records = vec![
            FlipRecord { layer: 1, elem: 42, bit: 31 },
            FlipRecord { layer: 9, elem: 0, bit: 0 },
        ];
        let mut buf = Vec::new();
        write_flip_records(&mut buf, &records).unwrap();
        assert_eq!(read_flip_records(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn ecc_scrub_absorbs_sparse_bitflips() {
        let mut net = builtin("mnist", Dtype::F32, 7).unwrap();
        let pristine = net.clone();
        let mut mem = EccMemory::from_network(&net);
        let mut rng = SplitMix64::new(3);
        // At 1e-7 the chance of two flips landing in one 39-bit codeword is
        // negligible for this seed; everything should correct.
        let n = inject_bitflips_ecc(&mut mem, 1e-7, &mut rng);
        assert!(n > 0);
        let report = mem.scrub(&mut net);
        assert_eq!(report.uncorrectable, 0);
        assert_eq!(report.corrected as u64, n);
        assert!(nets_bit_eq(&net, &pristine));
    }
}
