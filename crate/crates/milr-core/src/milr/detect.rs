//! Error detection: regenerate each layer's probe input from its seed, run
//! the layer forward, and compare the designated outputs bit-for-bit against
//! the stored partial checkpoint.

use super::crc::CrcCoord;
use super::{build_probe, DetectionProbe, MilrState};
use crate::error::Result;
use crate::network::Network;

#[derive(Debug, Clone)]
pub struct DetectionEntry {
    pub layer: usize,
    /// Nearest checkpoint position at or before this layer's input.
    pub prev_ckpt: usize,
    /// Nearest checkpoint position at or after this layer's output.
    pub next_ckpt: usize,
    /// CRC-localized parameter coordinates, for partial-CRC conv layers.
    pub crc_flagged: Option<Vec<CrcCoord>>,
}

#[derive(Debug, Clone, Default)]
pub struct DetectionLog {
    pub entries: Vec<DetectionEntry>,
}

impl DetectionLog {
    pub fn is_clean(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.layer).collect()
    }
}

fn probes_match(stored: &DetectionProbe, fresh: &DetectionProbe) -> bool {
    match (stored, fresh) {
        (
            DetectionProbe::DenseColumns { outputs: a },
            DetectionProbe::DenseColumns { outputs: b },
        ) => a.bit_eq(b),
        (
            DetectionProbe::ConvFilters { outputs: a, .. },
            DetectionProbe::ConvFilters { outputs: b, .. },
        ) => a.bit_eq(b),
        (DetectionProbe::BiasSum { sum: a }, DetectionProbe::BiasSum { sum: b }) => a.bit_eq(b),
        _ => false,
    }
}

/// Compares every detection record against the network's current parameters.
/// A clean network always yields an empty log.
pub fn detect(net: &Network, state: &MilrState) -> Result<DetectionLog> {
    let mut entries = Vec::new();
    for record in &state.detections {
        let fresh = build_probe(net, record.layer, record.seed)?;
        let probe_bad = !probes_match(&record.probe, &fresh);
        let crc_flagged = match &record.crc {
            Some(grid) => {
                let params = net.layer(record.layer).spec.params().expect("crc layer");
                Some(grid.localize(params))
            }
            None => None,
        };
        let crc_bad = crc_flagged.as_ref().is_some_and(|f| !f.is_empty());
        if probe_bad || crc_bad {
            entries.push(DetectionEntry {
                layer: record.layer,
                prev_ckpt: state.prev_checkpoint(record.layer),
                next_ckpt: state.next_checkpoint(record.layer),
                crc_flagged,
            });
        }
    }
    Ok(DetectionLog { entries })
}
