use crate::error::{Error, Result};
use crate::layout::CompressionConfig;

/// Attended (query, key) pairs of the unified pattern vs. causal attention over the raw stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryCount {
    pub sparse: u64,
    pub dense: u64,
}

impl EntryCount {
    /// `dense / sparse`: the hardware-independent speed-up estimate.
    pub fn ratio(&self) -> f64 {
        self.dense as f64 / self.sparse as f64
    }
}

/// Exact number of true entries in the unified mask, in closed form.
///
/// Per unit `u` (with `w = min(u, k)` earlier window units):
/// raw query `i` sees `s + u + w*r + i + 1` keys and the gist sees
/// `s + u + 1 + (w + 1)*r`. Sink `i` sees `i + 1`.
pub fn attended_entry_count(raw_len: usize, config: &CompressionConfig) -> Result<EntryCount> {
    let r = config.ratio as u64;
    if raw_len as u64 % r != 0 {
        return Err(Error::NonDivisibleLength {
            len: raw_len,
            divisor: config.ratio,
        });
    }
    let (s, k) = (config.sink_count as u64, config.window_units as u64);
    let units = raw_len as u64 / r;

    let sum_u = units * units.saturating_sub(1) / 2;
    let sum_w = if units <= k + 1 {
        sum_u
    } else {
        k * (k + 1) / 2 + k * (units - k - 1)
    };

    let sinks = s * (s + 1) / 2;
    let raws = r * (s * units + sum_u + r * sum_w) + units * r * (r + 1) / 2;
    let gists = units * (s + 1 + r) + sum_u + r * sum_w;
    let t = raw_len as u64;
    Ok(EntryCount {
        sparse: sinks + raws + gists,
        dense: t * (t + 1) / 2,
    })
}
