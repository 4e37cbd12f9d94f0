use crate::imagery::Frame;

use super::CueError;

/// Per-channel marginal RGB histograms of an image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchHistogram {
    bins: usize,
    /// `3 * bins` entries, channel-major.
    counts: Vec<f64>,
    total_weight: f64,
}

impl PatchHistogram {
    /// Raw per-channel tally over the `(2r+1)^2` window clipped to the image.
    pub fn tally(
        frame: &Frame,
        center: (usize, usize),
        radius: usize,
        bins: usize,
    ) -> Result<Self, CueError> {
        if bins < 2 {
            return Err(CueError::TooFewBins(bins));
        }
        let (cx, cy) = center;
        let (w, h) = (frame.width(), frame.height());
        if cx >= w || cy >= h {
            return Err(CueError::CenterOutside {
                x: cx,
                y: cy,
                width: w,
                height: h,
            });
        }
        let mut counts = vec![0.0; 3 * bins];
        let (x0, x1) = (cx.saturating_sub(radius), (cx + radius).min(w - 1));
        let (y0, y1) = (cy.saturating_sub(radius), (cy + radius).min(h - 1));
        let data = frame.data();
        for y in y0..=y1 {
            let row = &data[(y * w + x0) * 3..(y * w + x1 + 1) * 3];
            for px in row.chunks_exact(3) {
                for (c, &v) in px.iter().enumerate() {
                    counts[c * bins + bin_of(v, bins)] += 1.0;
                }
            }
        }
        let total_weight = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        Ok(Self {
            bins,
            counts,
            total_weight,
        })
    }

    /// Adds `eps` to every bin and renormalizes each channel to unit mass.
    pub fn smoothed(&self, eps: f64) -> Self {
        let denom = self.total_weight + eps * self.bins as f64;
        Self {
            bins: self.bins,
            counts: self.counts.iter().map(|c| (c + eps) / denom).collect(),
            total_weight: 1.0,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.counts[c * self.bins..(c + 1) * self.bins]
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }
}

fn bin_of(v: u8, bins: usize) -> usize {
    usize::from(v) * bins / 256
}

/// Smoothed patch histogram around `center`.
pub fn patch_histogram(
    frame: &Frame,
    center: (usize, usize),
    radius: usize,
    bins: usize,
    eps: f64,
) -> Result<PatchHistogram, CueError> {
    Ok(PatchHistogram::tally(frame, center, radius, bins)?.smoothed(eps))
}

/// Symmetric KL divergence `½[KL(a‖b) + KL(b‖a)]`, summed over the three
/// channel marginals. Infinite when one histogram has mass where the other
/// has none.
pub fn sym_kl(a: &PatchHistogram, b: &PatchHistogram) -> Result<f64, CueError> {
    if a.bins != b.bins {
        return Err(CueError::BinMismatch(a.bins, b.bins));
    }
    let mut total = 0.0;
    for (&ca, &cb) in a.counts.iter().zip(&b.counts) {
        let p = ca / a.total_weight;
        let q = cb / b.total_weight;
        if p == q {
            continue;
        }
        // ½(p ln p/q + q ln q/p) = ½(p − q)(ln p − ln q), exactly symmetric.
        total += (p - q) * (p.ln() - q.ln());
    }
    Ok(0.5 * total)
}

/// Similarity weight `exp(−alpha · sym_kl)` in `(0, 1]`.
pub fn motion_weight(a: &PatchHistogram, b: &PatchHistogram, alpha: f64) -> Result<f64, CueError> {
    if alpha == 0.0 {
        // keeps w = 1 even for infinite divergence
        if a.bins != b.bins {
            return Err(CueError::BinMismatch(a.bins, b.bins));
        }
        return Ok(1.0);
    }
    Ok((-alpha * sym_kl(a, b)?).exp())
}
