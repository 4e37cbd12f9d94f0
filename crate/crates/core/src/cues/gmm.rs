//! Diagonal-covariance Gaussian mixtures fit by EM, one per semantic class.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imagery::{Frame, LabelMap, VOID};

use super::{CueConfig, CueError, U_MAX};

const SIDECAR_MAGIC: &[u8; 8] = b"PGTGMM01";

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: [f64; 3],
    pub variance: [f64; 3],
}

impl GaussianComponent {
    pub fn log_density(&self, x: &[f64; 3]) -> f64 {
        let mut acc = 0.0;
        for d in 0..3 {
            let diff = x[d] - self.mean[d];
            acc += (2.0 * PI * self.variance[d]).ln() + diff * diff / self.variance[d];
        }
        -0.5 * acc
    }
}

/// Result of fitting one mixture, with the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct MixtureFit {
    pub components: Vec<GaussianComponent>,
    pub log_likelihood: Vec<f64>,
}

/// Per-class color mixtures; classes without enough pixels have none.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAppearanceModel {
    mixtures: Vec<Option<Vec<GaussianComponent>>>,
}

impl ClassAppearanceModel {
    pub fn new(mixtures: Vec<Option<Vec<GaussianComponent>>>) -> Self {
        Self { mixtures }
    }

    pub fn num_classes(&self) -> usize {
        self.mixtures.len()
    }

    pub fn mixture(&self, class: usize) -> Option<&[GaussianComponent]> {
        self.mixtures.get(class).and_then(|m| m.as_deref())
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.mixture(class).is_some()
    }

    pub fn classes_present(&self) -> Vec<usize> {
        (0..self.mixtures.len())
            .filter(|&c| self.is_present(c))
            .collect()
    }

    /// `log Σ w_k N(x; μ_k, Σ_k)`, unclamped; `None` for absent classes.
    pub fn log_likelihood(&self, class: usize, color: &[f64; 3]) -> Option<f64> {
        self.mixture(class).map(|m| mixture_log_density(m, color))
    }

    /// Writes the binary sidecar: magic `PGTGMM01`, `u32` class count, then per
    /// class a `u8` presence flag, `u32` component count and per component
    /// seven `f64` values (weight, mean[3], variance[3]); all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CueError> {
        w.write_all(SIDECAR_MAGIC)?;
        w.write_all(&(self.mixtures.len() as u32).to_le_bytes())?;
        for m in &self.mixtures {
            match m {
                None => {
                    w.write_all(&[0])?;
                    w.write_all(&0u32.to_le_bytes())?;
                }
                Some(comps) => {
                    w.write_all(&[1])?;
                    w.write_all(&(comps.len() as u32).to_le_bytes())?;
                    for c in comps {
                        let vals = [c.weight]
                            .into_iter()
                            .chain(c.mean)
                            .chain(c.variance);
                        for v in vals {
                            w.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CueError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SIDECAR_MAGIC {
            return Err(CueError::Sidecar("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut f64buf = [0u8; 8];
        r.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        if n == 0 || n > 255 {
            return Err(CueError::Sidecar(format!("bad class count {n}")));
        }
        let mut mixtures = Vec::with_capacity(n);
        for _ in 0..n {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            r.read_exact(&mut u32buf)?;
            let k = u32::from_le_bytes(u32buf) as usize;
            match flag[0] {
                0 => mixtures.push(None),
                1 if k > 0 && k < 4096 => {
                    let mut comps = Vec::with_capacity(k);
                    for _ in 0..k {
                        let mut v = [0.0; 7];
                        for x in &mut v {
                            r.read_exact(&mut f64buf)?;
                            *x = f64::from_le_bytes(f64buf);
                        }
                        comps.push(GaussianComponent {
                            weight: v[0],
                            mean: [v[1], v[2], v[3]],
                            variance: [v[4], v[5], v[6]],
                        });
                    }
                    mixtures.push(Some(comps));
                }
                f => return Err(CueError::Sidecar(format!("bad class record ({f}, {k})"))),
            }
        }
        Ok(Self { mixtures })
    }

    pub fn save(&self, path: &Path) -> Result<(), CueError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CueError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn mixture_log_density(components: &[GaussianComponent], x: &[f64; 3]) -> f64 {
    let logs: Vec<f64> = components
        .iter()
        .map(|c| c.weight.ln() + c.log_density(x))
        .collect();
    log_sum_exp(&logs)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `−log P(color | class)` clamped to `[0, U_MAX]`; absent classes cost `U_MAX`.
pub fn neg_log_likelihood(
    model: &ClassAppearanceModel,
    class: usize,
    color: &[f64; 3],
) -> Result<f64, CueError> {
    if class >= model.num_classes() {
        return Err(CueError::ClassOutOfRange {
            class,
            num_classes: model.num_classes(),
        });
    }
    Ok(match model.log_likelihood(class, color) {
        None => U_MAX,
        Some(ll) if ll.is_nan() => U_MAX,
        Some(ll) => (-ll).clamp(0.0, U_MAX),
    })
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

fn nearest(x: &[f64; 3], centers: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding; stops early when every point coincides with a center.
fn kmeans_pp(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            // rounding walked off the end; take the last point with mass
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        }
        let c = points[pick];
        centers.push(c);
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
    }
    centers
}

fn data_log_likelihood(points: &[[f64; 3]], comps: &[GaussianComponent]) -> f64 {
    points.iter().map(|p| mixture_log_density(comps, p)).sum()
}

/// Fits a diagonal GMM with at most `k` components by EM.
///
/// The log-likelihood is checked after every iteration; a decrease beyond
/// rounding is reported as an error.
pub fn fit_mixture(
    points: &[[f64; 3]],
    k: usize,
    seed: u64,
    cfg: &CueConfig,
) -> Result<MixtureFit, CueError> {
    if k == 0 {
        return Err(CueError::NoComponents);
    }
    assert!(!points.is_empty(), "fit_mixture needs data");
    let n = points.len() as f64;
    let floor = cfg.variance_floor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(points, k, &mut rng);

    // hard assignment to the seeds gives the starting parameters
    let kk = centers.len();
    let mut cnt = vec![0.0; kk];
    let mut sum = vec![[0.0; 3]; kk];
    let mut sumsq = vec![[0.0; 3]; kk];
    for p in points {
        let (j, _) = nearest(p, &centers);
        cnt[j] += 1.0;
        for d in 0..3 {
            sum[j][d] += p[d];
            sumsq[j][d] += p[d] * p[d];
        }
    }
    let mut comps: Vec<GaussianComponent> = (0..kk)
        .filter(|&j| cnt[j] > 0.0)
        .map(|j| {
            let mean = [sum[j][0] / cnt[j], sum[j][1] / cnt[j], sum[j][2] / cnt[j]];
            let variance =
                std::array::from_fn(|d| (sumsq[j][d] / cnt[j] - mean[d] * mean[d]).max(floor));
            GaussianComponent {
                weight: cnt[j] / n,
                mean,
                variance,
            }
        })
        .collect();

    let mut trace = vec![data_log_likelihood(points, &comps)];
    let mut resp = vec![0.0; points.len() * comps.len()];
    for iteration in 1..=cfg.max_em_iterations {
        let m = comps.len();
        resp.resize(points.len() * m, 0.0);
        // E-step
        for (i, p) in points.iter().enumerate() {
            let r = &mut resp[i * m..(i + 1) * m];
            for (j, c) in comps.iter().enumerate() {
                r[j] = c.weight.ln() + c.log_density(p);
            }
            let lse = log_sum_exp(r);
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        // M-step
        let mut next = Vec::with_capacity(m);
        for j in 0..m {
            let nk: f64 = (0..points.len()).map(|i| resp[i * m + j]).sum();
            if nk < 1e-10 * n {
                continue;
            }
            let mut mean = [0.0; 3];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * m + j];
                for d in 0..3 {
                    mean[d] += r * p[d];
                }
            }
            mean.iter_mut().for_each(|v| *v /= nk);
            let mut var = [0.0; 3];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * m + j];
                for d in 0..3 {
                    var[d] += r * (p[d] - mean[d]).powi(2);
                }
            }
            let variance = std::array::from_fn(|d| (var[d] / nk).max(floor));
            next.push(GaussianComponent {
                weight: nk,
                mean,
                variance,
            });
        }
        let wsum: f64 = next.iter().map(|c| c.weight).sum();
        next.iter_mut().for_each(|c| c.weight /= wsum);
        comps = next;

        let ll = data_log_likelihood(points, &comps);
        let prev = *trace.last().expect("trace starts non-empty");
        if ll < prev - 1e-9 * prev.abs().max(1.0) {
            return Err(CueError::LikelihoodDecreased {
                iteration,
                before: prev,
                after: ll,
            });
        }
        trace.push(ll);
        if (ll - prev) / n < cfg.em_tolerance {
            break;
        }
    }
    Ok(MixtureFit {
        components: comps,
        log_likelihood: trace,
    })
}

/// Fits one mixture per class from the pixels of a labeled frame.
///
/// Classes with fewer than `max(K, min_class_pixels)` pixels are absent.
pub fn fit_appearance(
    frame: &Frame,
    labels: &LabelMap,
    num_classes: usize,
    cfg: &CueConfig,
) -> Result<ClassAppearanceModel, CueError> {
    if !frame.same_size(labels) {
        return Err(CueError::DimensionMismatch(
            frame.width(),
            frame.height(),
            labels.width(),
            labels.height(),
        ));
    }
    let k = cfg.components_per_class;
    if k == 0 {
        return Err(CueError::NoComponents);
    }
    let mut per_class: Vec<Vec<[f64; 3]>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.labels().iter().enumerate() {
        if l != VOID && usize::from(l) < num_classes {
            per_class[usize::from(l)].push(frame.color_at(i));
        }
    }
    let min_pixels = k.max(cfg.min_class_pixels);
    let mut mixtures = Vec::with_capacity(num_classes);
    for (class, pts) in per_class.iter().enumerate() {
        if pts.len() < min_pixels {
            mixtures.push(None);
            continue;
        }
        let seed = cfg
            .gmm_seed
            .wrapping_add((class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        mixtures.push(Some(fit_mixture(pts, k, seed, cfg)?.components));
    }
    Ok(ClassAppearanceModel { mixtures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blob_frame(w: usize, h: usize, split: usize, a: [u8; 3], b: [u8; 3]) -> Frame {
        let mut f = Frame::filled(w, h, a).unwrap();
        for y in 0..h {
            for x in split..w {
                f.set_pixel(x, y, b);
            }
        }
        f
    }

    #[test]
    fn single_color_class_collapses_to_floor() {
        let f = Frame::filled(6, 6, [51, 102, 204]).unwrap();
        let l = LabelMap::filled(6, 6, 0, 2).unwrap();
        let cfg = CueConfig::default();
        let m = fit_appearance(&f, &l, 2, &cfg).unwrap();
        let mix = m.mixture(0).unwrap();
        assert_eq!(mix.len(), 1);
        assert_eq!(mix[0].weight, 1.0);
        for (m, e) in mix[0].mean.iter().zip([0.2, 0.4, 0.8]) {
            assert!((m - e).abs() < 1e-12);
        }
        assert_eq!(mix[0].variance, [cfg.variance_floor; 3]);
        assert!(!m.is_present(1));
        assert_eq!(m.classes_present(), vec![0]);
    }

    #[test]
    fn two_blobs_recover_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 6.0).unwrap();
        let (ca, cb) = ([40.0f64, 60.0, 200.0], [220.0, 180.0, 30.0]);
        let (w, h) = (40, 20);
        let mut f = blob_frame(w, h, 20, [0; 3], [0; 3]);
        let mut sums = [[0.0f64; 3]; 2];
        for y in 0..h {
            for x in 0..w {
                let base = if x < 20 { ca } else { cb };
                let px: [u8; 3] =
                    std::array::from_fn(|d| (base[d] + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8);
                f.set_pixel(x, y, px);
                for d in 0..3 {
                    sums[usize::from(x >= 20)][d] += f64::from(px[d]) / 255.0;
                }
            }
        }
        let blob_means: Vec<[f64; 3]> = sums
            .iter()
            .map(|s| std::array::from_fn(|d| s[d] / 400.0))
            .collect();
        let l = LabelMap::filled(w, h, 0, 1).unwrap();
        let cfg = CueConfig {
            components_per_class: 2,
            ..CueConfig::default()
        };
        let m = fit_appearance(&f, &l, 1, &cfg).unwrap();
        let mix = m.mixture(0).unwrap();
        assert_eq!(mix.len(), 2);
        for bm in &blob_means {
            let best = mix
                .iter()
                .map(|c| (0..3).map(|d| (c.mean[d] - bm[d]).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.02, "blob mean {bm:?} not matched: {mix:?}");
        }
        let wsum: f64 = mix.iter().map(|c| c.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn em_trace_nondecreasing_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|i| {
                let c = (i % 3) as f64 * 0.3;
                [c + rng.random::<f64>() * 0.1, rng.random::<f64>(), 0.5]
            })
            .collect();
        let cfg = CueConfig::default();
        let fit = fit_mixture(&pts, 5, 9, &cfg).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
        for c in &fit.components {
            assert!(c.weight > 0.0 && c.weight <= 1.0);
            assert!(c.variance.iter().all(|&v| v >= cfg.variance_floor));
        }
        let again = fit_mixture(&pts, 5, 9, &cfg).unwrap();
        assert_eq!(fit.components, again.components);
    }

    #[test]
    fn empty_class_absent_and_mismatch_rejected() {
        let f = blob_frame(6, 6, 3, [0; 3], [255; 3]);
        let l = LabelMap::filled(6, 6, 1, 3).unwrap();
        let m = fit_appearance(&f, &l, 3, &CueConfig::default()).unwrap();
        assert!(!m.is_present(0));
        assert!(!m.is_present(2));
        assert_eq!(neg_log_likelihood(&m, 0, &[0.5; 3]).unwrap(), U_MAX);
        assert!(matches!(
            neg_log_likelihood(&m, 3, &[0.5; 3]),
            Err(CueError::ClassOutOfRange { .. })
        ));
        let small = LabelMap::filled(5, 6, 1, 3).unwrap();
        assert!(fit_appearance(&f, &small, 3, &CueConfig::default()).is_err());
    }

    #[test]
    fn nll_matches_closed_form_density() {
        let comp = GaussianComponent {
            weight: 1.0,
            mean: [0.3, 0.6, 0.1],
            variance: [1.0, 1.0, 1.0],
        };
        let m = ClassAppearanceModel::new(vec![Some(vec![comp.clone()])]);
        // N(μ; μ, I) = (2π)^{-3/2}
        let expected = 1.5 * (2.0 * PI).ln();
        let got = neg_log_likelihood(&m, 0, &comp.mean).unwrap();
        assert!((got - expected).abs() < 1e-12);

        // at the variance floor the density exceeds 1 and the cost clamps to 0
        let tight = GaussianComponent {
            variance: [1e-4; 3],
            ..comp
        };
        let m = ClassAppearanceModel::new(vec![Some(vec![tight.clone()])]);
        let raw = -(1.5 * (2.0 * PI).ln() + 1.5 * 1e-4f64.ln());
        assert!((m.log_likelihood(0, &tight.mean).unwrap() - raw).abs() < 1e-12);
        assert_eq!(neg_log_likelihood(&m, 0, &tight.mean).unwrap(), 0.0);
    }

    #[test]
    fn mixture_matches_naive_sum() {
        let comps = vec![
            GaussianComponent { weight: 0.2, mean: [0.1, 0.2, 0.3], variance: [0.01, 0.02, 0.03] },
            GaussianComponent { weight: 0.5, mean: [0.7, 0.1, 0.4], variance: [0.05, 0.01, 0.2] },
            GaussianComponent { weight: 0.3, mean: [0.4, 0.9, 0.8], variance: [0.3, 0.1, 0.02] },
        ];
        let m = ClassAppearanceModel::new(vec![Some(comps.clone())]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x: [f64; 3] = std::array::from_fn(|_| rng.random());
            let mut p = 0.0;
            for c in &comps {
                let mut dens = c.weight;
                for d in 0..3 {
                    let v = c.variance[d];
                    dens *= (-(x[d] - c.mean[d]).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                }
                p += dens;
            }
            let expected = (-p.ln()).clamp(0.0, U_MAX);
            let got = neg_log_likelihood(&m, 0, &x).unwrap();
            assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        }
    }

    #[test]
    fn sidecar_roundtrip() {
        let f = blob_frame(10, 10, 5, [10, 20, 30], [200, 100, 50]);
        let mut labels = vec![0u8; 100];
        for (i, l) in labels.iter_mut().enumerate() {
            if i % 10 >= 5 {
                *l = 2;
            }
        }
        let l = LabelMap::new(10, 10, labels, 4).unwrap();
        let m = fit_appearance(&f, &l, 4, &CueConfig::default()).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(ClassAppearanceModel::read_from(buf.as_slice()).unwrap(), m);
        buf[0] = b'X';
        assert!(ClassAppearanceModel::read_from(buf.as_slice()).is_err());
    }
}
