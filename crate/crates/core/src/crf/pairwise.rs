use crate::imagery::{Frame, LabelMap, VOID};

use super::{Beta, CrfConfig, CrfError, UnaryField};

/// Square neighborhood offsets `(dx, dy, distance)`, excluding the center.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    offsets: Vec<(isize, isize, f64)>,
}

impl Neighborhood {
    pub fn square(radius: usize) -> Self {
        let r = radius as isize;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if (dx, dy) != (0, 0) {
                    offsets.push((dx, dy, ((dx * dx + dy * dy) as f64).sqrt()));
                }
            }
        }
        Self { offsets }
    }

    pub fn offsets(&self) -> &[(isize, isize, f64)] {
        &self.offsets
    }

    /// Offsets that visit each unordered pair once.
    pub fn is_forward(dx: isize, dy: isize) -> bool {
        dy > 0 || (dy == 0 && dx > 0)
    }
}

fn color_dist2(frame: &Frame, a: usize, b: usize) -> f64 {
    let (ca, cb) = (frame.color_at(a), frame.color_at(b));
    (0..3).map(|d| (ca[d] - cb[d]) * (ca[d] - cb[d])).sum()
}

/// `β = 1 / (2 · mean ‖h_m − h_n‖²)` over all neighbor pairs; 0 for a
/// constant image.
pub fn auto_beta(frame: &Frame, radius: usize) -> f64 {
    let nb = Neighborhood::square(radius);
    let (w, h) = (frame.width() as isize, frame.height() as isize);
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            for &(dx, dy, _) in nb.offsets() {
                if !Neighborhood::is_forward(dx, dy) {
                    continue;
                }
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                sum += color_dist2(frame, (y * w + x) as usize, (ny * w + nx) as usize);
                count += 1;
            }
        }
    }
    if count == 0 || sum == 0.0 {
        0.0
    } else {
        1.0 / (2.0 * sum / count as f64)
    }
}

pub(crate) fn resolve_beta(cfg: &CrfConfig, frame: &Frame) -> f64 {
    match cfg.beta {
        Beta::Fixed(b) => b,
        Beta::Auto(_) => auto_beta(frame, cfg.neighborhood_radius),
    }
}

/// Contrast-sensitive Potts cost of one neighbor pair.
pub fn pairwise_cost(
    frame: &Frame,
    beta: f64,
    m: (usize, usize),
    n: (usize, usize),
    l_m: u8,
    l_n: u8,
) -> Result<f64, CrfError> {
    if m == n {
        return Err(CrfError::SamePixel);
    }
    if l_m == l_n {
        return Ok(0.0);
    }
    let w = frame.width();
    let dx = m.0 as f64 - n.0 as f64;
    let dy = m.1 as f64 - n.1 as f64;
    let dist = (dx * dx + dy * dy).sqrt();
    Ok((-beta * color_dist2(frame, m.1 * w + m.0, n.1 * w + n.0)).exp() / dist)
}

/// Precomputed Potts edge weights `exp(−β‖h_m − h_n‖²) / dis(m, n)` for
/// every pixel and every neighborhood offset (0 where the neighbor falls
/// outside the image).
#[derive(Debug, Clone)]
pub struct PairwiseGraph {
    width: usize,
    height: usize,
    neighborhood: Neighborhood,
    weights: Vec<f64>,
}

impl PairwiseGraph {
    pub fn new(frame: &Frame, beta: f64, radius: usize) -> Self {
        let neighborhood = Neighborhood::square(radius);
        let (w, h) = (frame.width(), frame.height());
        let k = neighborhood.offsets.len();
        let mut weights = vec![0.0; w * h * k];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for (j, &(dx, dy, dist)) in neighborhood.offsets.iter().enumerate() {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    weights[i * k + j] = (-beta * color_dist2(frame, i, n)).exp() / dist;
                }
            }
        }
        Self {
            width: w,
            height: h,
            neighborhood,
            weights,
        }
    }

    pub fn from_config(frame: &Frame, cfg: &CrfConfig) -> Self {
        Self::new(frame, resolve_beta(cfg, frame), cfg.neighborhood_radius)
    }

    pub fn neighborhood(&self) -> &Neighborhood {
        &self.neighborhood
    }

    /// `(neighbor index, weight)` for every in-image neighbor of `i`.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let k = self.neighborhood.offsets.len();
        let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
        self.neighborhood
            .offsets
            .iter()
            .zip(&self.weights[i * k..(i + 1) * k])
            .filter_map(move |(&(dx, dy, _), &wgt)| {
                let (nx, ny) = (x + dx, y + dy);
                (nx >= 0 && ny >= 0 && nx < self.width as isize && ny < self.height as isize)
                    .then(|| (ny as usize * self.width + nx as usize, wgt))
            })
    }

    /// Like [`neighbors`](Self::neighbors) but only forward offsets, so each
    /// unordered pair appears once over all pixels.
    pub fn forward_neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let k = self.neighborhood.offsets.len();
        let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
        self.neighborhood
            .offsets
            .iter()
            .zip(&self.weights[i * k..(i + 1) * k])
            .filter_map(move |(&(dx, dy, _), &wgt)| {
                let (nx, ny) = (x + dx, y + dy);
                (Neighborhood::is_forward(dx, dy)
                    && nx >= 0
                    && ny >= 0
                    && nx < self.width as isize
                    && ny < self.height as isize)
                    .then(|| (ny as usize * self.width + nx as usize, wgt))
            })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Energy of a labeling given as a raw slice; shared by [`total_energy`]
/// and the mean-field decoder so both report identical values.
pub(crate) fn labeling_energy(
    labels: &[u8],
    motion: &UnaryField,
    appearance: &UnaryField,
    lambda1: f64,
    lambda2: f64,
    graph: &PairwiseGraph,
) -> f64 {
    let mut unary_m = 0.0;
    let mut unary_a = 0.0;
    let mut potts = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let l = usize::from(l);
        unary_m += motion.get(i, l);
        unary_a += appearance.get(i, l);
        for (n, wgt) in graph.forward_neighbors(i) {
            if labels[n] != labels[i] {
                potts += wgt;
            }
        }
    }
    unary_m + lambda1 * unary_a + lambda2 * potts
}

/// `Σ motion + λ1 Σ appearance + λ2 Σ_{pairs} potts`, each unordered
/// neighbor pair counted once.
pub fn total_energy(
    labels: &LabelMap,
    motion: &UnaryField,
    appearance: &UnaryField,
    frame: &Frame,
    cfg: &CrfConfig,
) -> Result<f64, CrfError> {
    motion.check_like(appearance)?;
    if !(frame.same_size(labels)
        && labels.width() == motion.width()
        && labels.height() == motion.height())
    {
        return Err(CrfError::DimensionMismatch(format!(
            "labels {}x{}, frame {}x{}, unaries {}x{}",
            labels.width(),
            labels.height(),
            frame.width(),
            frame.height(),
            motion.width(),
            motion.height()
        )));
    }
    if let Some(i) = labels
        .labels()
        .iter()
        .position(|&l| l == VOID || usize::from(l) >= motion.num_classes())
    {
        return Err(CrfError::InvalidLabel(i));
    }
    let graph = PairwiseGraph::from_config(frame, cfg);
    Ok(labeling_energy(
        labels.labels(),
        motion,
        appearance,
        cfg.lambda1,
        cfg.lambda2,
        &graph,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Frame {
        Frame::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn pairwise_examples() {
        let mut f = Frame::filled(3, 3, [0, 0, 0]).unwrap();
        assert_eq!(pairwise_cost(&f, 2.0, (0, 0), (1, 0), 1, 1).unwrap(), 0.0);
        assert_eq!(pairwise_cost(&f, 2.0, (0, 0), (1, 0), 0, 1).unwrap(), 1.0);
        assert!(matches!(
            pairwise_cost(&f, 2.0, (1, 1), (1, 1), 0, 1),
            Err(CrfError::SamePixel)
        ));
        // a red difference of 0.5 is not representable in 8 bits; a full-scale
        // difference with β = 0.5 gives the same β‖Δh‖² as (0.5, 0, 0) with β = 2
        f.set_pixel(1, 1, [255, 0, 0]);
        let full = pairwise_cost(&f, 0.5, (0, 0), (1, 1), 0, 1).unwrap();
        let expected = (1.0 / 2f64.sqrt()) * (-2.0f64 * 0.25).exp();
        assert!((full - expected).abs() < 1e-15);
    }

    #[test]
    fn auto_beta_constant_and_two_tone() {
        assert_eq!(auto_beta(&Frame::filled(4, 4, [9; 3]).unwrap(), 1), 0.0);
        // 2x1 image, one pair with ‖Δh‖² = 3 → β = 1/6
        let f = Frame::new(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        assert!((auto_beta(&f, 1) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn decoupled_energy_is_sum_of_minima() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_frame(4, 4, &mut rng);
        let costs: Vec<f64> = (0..16 * 3).map(|_| rng.random_range(0.0..3.0)).collect();
        let motion = UnaryField::from_costs(4, 4, 3, costs).unwrap();
        let appearance = UnaryField::zeros(4, 4, 3);
        let labels: Vec<u8> = (0..16)
            .map(|i| {
                let r = motion.pixel(i);
                (0..3).fold(0, |b, l| if r[l] < r[b] { l } else { b }) as u8
            })
            .collect();
        let minima: f64 = (0..16).map(|i| motion.pixel(i).iter().copied().fold(f64::INFINITY, f64::min)).sum();
        let cfg = CrfConfig { lambda1: 0.0, lambda2: 0.0, ..Default::default() };
        let lm = LabelMap::new(4, 4, labels, 3).unwrap();
        let e = total_energy(&lm, &motion, &appearance, &f, &cfg).unwrap();
        assert!((e - minima).abs() < 1e-12);
    }

    /// Independent evaluator: loops over all ordered pixel pairs and halves.
    fn brute_energy(labels: &[u8], motion: &UnaryField, app: &UnaryField, frame: &Frame, l1: f64, l2: f64, beta: f64) -> f64 {
        let (w, h) = (frame.width(), frame.height());
        let mut e = 0.0;
        for i in 0..w * h {
            e += motion.get(i, usize::from(labels[i])) + l1 * app.get(i, usize::from(labels[i]));
        }
        let mut pair = 0.0;
        for a in 0..w * h {
            for b in 0..w * h {
                let (ax, ay, bx, by) = ((a % w) as i64, (a / w) as i64, (b % w) as i64, (b / w) as i64);
                if a == b || (ax - bx).abs() > 1 || (ay - by).abs() > 1 {
                    continue;
                }
                pair += pairwise_cost(frame, beta, (ax as usize, ay as usize), (bx as usize, by as usize), labels[a], labels[b]).unwrap();
            }
        }
        e + l2 * pair / 2.0
    }

    #[test]
    fn two_by_two_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_frame(2, 2, &mut rng);
        let motion = UnaryField::from_costs(2, 2, 2, (0..8).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
        let app = UnaryField::from_costs(2, 2, 2, (0..8).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
        let cfg = CrfConfig { beta: Beta::Fixed(1.7), lambda1: 0.4, lambda2: 1.3, ..Default::default() };
        for code in 0..16u32 {
            let labels: Vec<u8> = (0..4).map(|b| ((code >> b) & 1) as u8).collect();
            let lm = LabelMap::new(2, 2, labels.clone(), 2).unwrap();
            let e = total_energy(&lm, &motion, &app, &f, &cfg).unwrap();
            let b = brute_energy(&labels, &motion, &app, &f, 0.4, 1.3, 1.7);
            assert!((e - b).abs() <= 1e-12 * b.abs().max(1.0), "{code}: {e} vs {b}");
        }
    }

    #[test]
    fn unary_shift_adds_k_times_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_frame(5, 3, &mut rng);
        let motion = UnaryField::from_costs(5, 3, 3, (0..45).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
        let app = UnaryField::zeros(5, 3, 3);
        let cfg = CrfConfig::default();
        let k = 0.75;
        for _ in 0..10 {
            let lm = LabelMap::new(5, 3, (0..15).map(|_| rng.random_range(0..3)).collect(), 3).unwrap();
            let e0 = total_energy(&lm, &motion, &app, &f, &cfg).unwrap();
            let e1 = total_energy(&lm, &motion.shifted(k), &app, &f, &cfg).unwrap();
            assert!((e1 - e0 - k * 15.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_void_labels_and_mismatch() {
        let f = Frame::filled(2, 2, [0; 3]).unwrap();
        let u = UnaryField::zeros(2, 2, 2);
        let lm = LabelMap::new(2, 2, vec![0, VOID, 1, 0], 2).unwrap();
        assert!(matches!(total_energy(&lm, &u, &u, &f, &CrfConfig::default()), Err(CrfError::InvalidLabel(1))));
        let u3 = UnaryField::zeros(2, 2, 3);
        assert!(total_energy(&LabelMap::filled(2, 2, 0, 2).unwrap(), &u, &u3, &f, &CrfConfig::default()).is_err());
    }
}
