//! Magnitudes of learned implicit filter coefficients.

use nfm_core::autodiff::Graph;
use nfm_core::layers::NfmModel;
use nfm_core::{NfmError, Result};

use crate::batch;
use crate::config::RunConfig;
use crate::dataset::Split;

/// `|R[k]|` of one mixer block averaged over the probe items: `mags[k][ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDump {
    pub mags: Vec<Vec<f64>>,
}

impl FilterDump {
    pub fn bins(&self) -> usize {
        self.mags.len()
    }

    /// Mean over hidden channels per bin.
    pub fn channel_mean(&self) -> Vec<f64> {
        self.mags
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect()
    }

    /// Share of channel-mean magnitude inside the inclusive bin range.
    pub fn band_ratio(&self, band: (usize, usize)) -> f64 {
        let m = self.channel_mean();
        let total: f64 = m.iter().sum();
        let inside: f64 = m
            .iter()
            .enumerate()
            .filter(|(k, _)| (band.0..=band.1).contains(k))
            .map(|(_, v)| v)
            .sum();
        if total > 0.0 {
            inside / total
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let d = self.mags.first().map_or(0, Vec::len);
        let mut out = String::from("k");
        for ch in 0..d {
            out.push_str(&format!(",r{ch}"));
        }
        out.push_str(",mean\n");
        for (k, (row, mean)) in self.mags.iter().zip(self.channel_mean()).enumerate() {
            out.push_str(&k.to_string());
            for v in row {
                out.push_str(&format!(",{v:e}"));
            }
            out.push_str(&format!(",{mean:e}\n"));
        }
        out
    }
}

pub fn dump_filter(
    model: &NfmModel,
    cfg: &RunConfig,
    probe: &Split,
    ids: &[usize],
    block: usize,
) -> Result<FilterDump> {
    if block >= model.blocks.len() {
        return Err(NfmError::invalid(format!(
            "block {block} out of range ({} blocks)",
            model.blocks.len()
        )));
    }
    if ids.is_empty() {
        return Err(NfmError::invalid("empty probe"));
    }
    let b = batch::build(cfg, probe, ids, 1)?;
    let mut g = Graph::new(false, 0);
    let x = g.constant(b.input.clone());
    let out = model.forward(&mut g, x, &b.factors)?;
    let r = g.value(out.filters[block]);
    let (items, bins, d) = (r.shape()[0], r.shape()[1], r.shape()[2]);
    let mut mags = vec![vec![0.0; d]; bins];
    for (j, pair) in r.data().chunks_exact(2).enumerate() {
        let ch = j % d;
        let k = (j / d) % bins;
        mags[k][ch] += pair[0].hypot(pair[1]) / items as f64;
    }
    Ok(FilterDump { mags })
}
