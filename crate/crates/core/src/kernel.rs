//! Compact-support kernels and the rule-of-thumb bandwidth.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("sample is degenerate (all values identical)")]
    DegenerateSample,
    #[error("bandwidth selection needs at least 2 values, got {0}")]
    TooFewValues(usize),
}

/// Kernel families on `[-1, 1]`: bounded, integrate to one, zero first
/// moment, finite second moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelFamily {
    #[default]
    Epanechnikov,
    Triweight,
}

impl KernelFamily {
    /// The base kernel `K(u)` on the standardised scale.
    pub fn k(&self, u: f64) -> f64 {
        if u.abs() > 1.0 {
            return 0.0;
        }
        let t = 1.0 - u * u;
        match self {
            KernelFamily::Epanechnikov => 0.75 * t,
            KernelFamily::Triweight => (35.0 / 32.0) * t * t * t,
        }
    }
}

/// A kernel family with its bandwidth, in the data units of the smoothed
/// variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0, "bandwidth must be positive");
        KernelSpec { family, bandwidth }
    }

    pub fn epanechnikov(bandwidth: f64) -> Self {
        Self::new(KernelFamily::Epanechnikov, bandwidth)
    }
}

/// `K_h(d) = K(d/h)/h` for a raw difference `d`. Zero outside `|d| <= h`,
/// symmetric, maximal at `d = 0`.
pub fn kernel_weight(spec: &KernelSpec, d: f64) -> f64 {
    spec.family.k(d / spec.bandwidth) / spec.bandwidth
}

/// Type-7 (linear interpolation) quantile of an already sorted slice.
fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Silverman's rule of thumb: `h = 0.9 * min(sd, IQR/1.34) * m^(-1/5)`.
///
/// The sample standard deviation uses the `m - 1` denominator and the IQR
/// uses type-7 quantiles, so results are reproducible bit for bit. When the
/// IQR is zero but the sample is not degenerate, the standard deviation
/// alone sets the scale.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64, KernelError> {
    let m = values.len();
    if m < 2 {
        return Err(KernelError::TooFewValues(m));
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let sd = (ss / (m - 1) as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_type7(&sorted, 0.75) - quantile_type7(&sorted, 0.25);
    let scale = if iqr > 0.0 {
        sd.min(iqr / 1.34)
    } else {
        sd
    };
    if scale <= 0.0 || !scale.is_finite() {
        return Err(KernelError::DegenerateSample);
    }
    Ok(0.9 * scale * (m as f64).powf(-0.2))
}
