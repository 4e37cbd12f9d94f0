//! Ambiguous-label jitter: per-region border dilation followed by a small
//! random translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::imagery::{LabelMap, VOID};

const MAX_SHIFT: u32 = 8;

const DIRECTIONS: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    pub dilation_radius: usize,
    pub shift_min: u32,
    pub shift_max: u32,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            dilation_radius: 1,
            shift_min: 2,
            shift_max: 4,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.shift_min > self.shift_max || self.shift_max > MAX_SHIFT {
            return Err(DatasetError::InvalidArgument(format!(
                "shift range [{}, {}] must lie within [0, {MAX_SHIFT}]",
                self.shift_min, self.shift_max
            )));
        }
        Ok(())
    }
}

/// 4-connected components of equal non-void labels. Returns a region id per
/// pixel (`usize::MAX` for void) and each region's `(size, class)`.
fn regions(labels: &LabelMap) -> (Vec<usize>, Vec<(usize, u8)>) {
    let (w, h) = (labels.width(), labels.height());
    let lab = labels.labels();
    let mut id = vec![usize::MAX; lab.len()];
    let mut info = Vec::new();
    let mut stack = Vec::new();
    for start in 0..lab.len() {
        if lab[start] == VOID || id[start] != usize::MAX {
            continue;
        }
        let r = info.len();
        let class = lab[start];
        let mut size = 0;
        id[start] = r;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if id[j] == usize::MAX && lab[j] == class {
                    id[j] = r;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        info.push((size, class));
    }
    (id, info)
}

/// Boundary-pixel count per region: pixels with a 4-neighbor (inside the
/// image) belonging to another region or void.
pub fn region_perimeters(labels: &LabelMap) -> Vec<usize> {
    let (w, h) = (labels.width(), labels.height());
    let (id, info) = regions(labels);
    let mut per = vec![0; info.len()];
    for i in 0..id.len() {
        if id[i] == usize::MAX {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let differs = (x > 0 && id[i - 1] != id[i])
            || (x + 1 < w && id[i + 1] != id[i])
            || (y > 0 && id[i - w] != id[i])
            || (y + 1 < h && id[i + w] != id[i]);
        if differs {
            per[id[i]] += 1;
        }
    }
    per
}

/// Dilates every connected region by `cfg.dilation_radius` (square element),
/// then translates each region by a seeded shift of Chebyshev magnitude in
/// `[shift_min, shift_max]` along one of 8 compass directions. Vacated
/// pixels keep their dilated label; void pixels never change.
pub fn jitter_labels(labels: &LabelMap, cfg: &JitterConfig, seed: u64) -> Result<LabelMap, DatasetError> {
    cfg.validate()?;
    let (w, h) = (labels.width(), labels.height());
    let lab = labels.labels();
    let (id, info) = regions(labels);
    // contested pixels: larger region, then lower class, then lower id
    let beats = |a: usize, b: usize| {
        let (sa, ca) = info[a];
        let (sb, cb) = info[b];
        sa > sb || (sa == sb && (ca < cb || (ca == cb && a < b)))
    };

    let r = cfg.dilation_radius as i64;
    let mut owner = id.clone();
    if r > 0 {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = (y as usize) * w + x as usize;
                if id[i] == usize::MAX {
                    continue;
                }
                let mut best = id[i];
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let c = id[(ny as usize) * w + nx as usize];
                        if c != usize::MAX && beats(c, best) {
                            best = c;
                        }
                    }
                }
                owner[i] = best;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<(i64, i64)> = (0..info.len())
        .map(|_| {
            let m = rng.random_range(cfg.shift_min..=cfg.shift_max) as i64;
            let (dx, dy) = DIRECTIONS[rng.random_range(0..DIRECTIONS.len())];
            (dx * m, dy * m)
        })
        .collect();

    let mut out: Vec<u8> = owner
        .iter()
        .zip(lab)
        .map(|(&o, &l)| if o == usize::MAX { l } else { info[o].1 })
        .collect();

    // larger regions first so smaller ones end up on top
    let mut order: Vec<usize> = (0..info.len()).collect();
    order.sort_by(|&a, &b| {
        if beats(a, b) {
            std::cmp::Ordering::Less
        } else if beats(b, a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); info.len()];
    for (i, &o) in owner.iter().enumerate() {
        if o != usize::MAX {
            members[o].push(i);
        }
    }
    for reg in order {
        let (sx, sy) = shifts[reg];
        if sx == 0 && sy == 0 {
            continue;
        }
        let class = info[reg].1;
        for &i in &members[reg] {
            let (tx, ty) = ((i % w) as i64 + sx, (i / w) as i64 + sy);
            if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                continue;
            }
            let t = ty as usize * w + tx as usize;
            if lab[t] != VOID {
                out[t] = class;
            }
        }
    }
    Ok(LabelMap::new(w, h, out, labels.num_classes())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blocks(w: usize, h: usize, rects: &[(usize, usize, usize, usize, u8)]) -> LabelMap {
        let mut m = LabelMap::filled(w, h, 0, 4).unwrap();
        for &(x0, y0, rw, rh, c) in rects {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    m.set(x, y, c).unwrap();
                }
            }
        }
        m
    }

    #[test]
    fn identity_configuration() {
        let m = blocks(20, 16, &[(3, 3, 5, 4, 1), (10, 8, 6, 6, 2)]);
        let cfg = JitterConfig {
            dilation_radius: 0,
            shift_min: 0,
            shift_max: 0,
        };
        assert_eq!(jitter_labels(&m, &cfg, 9).unwrap(), m);
    }

    #[test]
    fn perimeter_of_a_block() {
        let m = blocks(10, 10, &[(2, 2, 4, 3, 1)]);
        // background boundary ring: 4x3 block has 4*2+3*2 outer neighbors plus none at corners
        assert_eq!(region_perimeters(&m), vec![14, 10]);
    }

    #[test]
    fn dilation_only_grows_smaller_region_loses() {
        let m = blocks(12, 12, &[(4, 4, 3, 3, 2)]);
        let cfg = JitterConfig {
            dilation_radius: 1,
            shift_min: 0,
            shift_max: 0,
        };
        // background is larger, so it wins every contested pixel
        let j = jitter_labels(&m, &cfg, 0).unwrap();
        assert_eq!(j.labels().iter().filter(|&&l| l == 2).count(), 1);
    }

    #[test]
    fn shift_moves_small_region() {
        let m = blocks(16, 16, &[(6, 6, 3, 3, 1)]);
        let cfg = JitterConfig {
            dilation_radius: 0,
            shift_min: 3,
            shift_max: 3,
        };
        let j = jitter_labels(&m, &cfg, 5).unwrap();
        assert!(j.labels().iter().filter(|&&l| l == 1).count() >= 9);
        assert_ne!(j, m);
    }

    #[test]
    fn void_untouched() {
        let mut m = blocks(12, 12, &[(2, 2, 4, 4, 1)]);
        for x in 0..12 {
            m.set(x, 7, VOID).unwrap();
        }
        let j = jitter_labels(&m, &JitterConfig::default(), 3).unwrap();
        for x in 0..12 {
            assert_eq!(j.get(x, 7), VOID);
        }
        assert_eq!(j.count_void(), 12);
    }

    #[test]
    fn rejects_bad_range() {
        let m = blocks(4, 4, &[]);
        for (a, b) in [(3, 2), (0, 9)] {
            let cfg = JitterConfig {
                dilation_radius: 1,
                shift_min: a,
                shift_max: b,
            };
            assert!(jitter_labels(&m, &cfg, 0).is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn bounded_deterministic_inventory(
            rects in proptest::collection::vec((0usize..20, 0usize..20, 2usize..8, 2usize..8, 1u8..4), 0..4),
            seed in any::<u64>(),
        ) {
            let m = blocks(28, 28, &rects);
            let cfg = JitterConfig::default();
            let a = jitter_labels(&m, &cfg, seed).unwrap();
            let b = jitter_labels(&m, &cfg, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let bound: usize = region_perimeters(&m).iter().sum::<usize>()
                * (cfg.dilation_radius + cfg.shift_max as usize);
            prop_assert!(a.diff_count(&m) <= bound, "{} > {}", a.diff_count(&m), bound);
            let present = |l: &LabelMap| {
                let mut p = [false; 4];
                for &v in l.labels() { p[v as usize] = true; }
                p
            };
            let (pi, po) = (present(&m), present(&a));
            for c in 0..4 {
                prop_assert!(!po[c] || pi[c]);
            }
        }
    }
}
