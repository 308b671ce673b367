use crate::error::{Error, Result};

/// Per-link transfer time `size / bandwidth + overhead` and the chain total.
///
/// Sizes are in bytes, bandwidth in bytes per second, overhead in seconds.
pub fn estimate_latency(
    interface_bytes: &[f64],
    bandwidth: f64,
    per_link_overhead: f64,
) -> Result<(Vec<f64>, f64)> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    if interface_bytes.iter().any(|s| !(*s >= 0.0)) || !(per_link_overhead >= 0.0) {
        return Err(Error::InvalidArgument("sizes and overhead must be >= 0".into()));
    }
    let per_link: Vec<f64> = interface_bytes
        .iter()
        .map(|s| s / bandwidth + per_link_overhead)
        .collect();
    let total = per_link.iter().sum();
    Ok((per_link, total))
}

/// Bytes of one `batch x width` f64 activation.
pub fn activation_bytes(batch: usize, width: usize) -> f64 {
    (batch * width * std::mem::size_of::<f64>()) as f64
}
