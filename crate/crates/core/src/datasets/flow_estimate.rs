//! Exhaustive block-matching flow.

use super::DatasetError;
use crate::imagery::{FlowField, Frame};
use crate::par::Exec;

/// Per-block integer displacement `d` minimizing the sum of absolute RGB
/// differences between `prev` at `p` and `next` at `p + d`, with
/// `|dx|, |dy| <= search`. Only displacements that keep the whole block
/// inside the image compete. Ties prefer zero, then smaller `(dx, dy)`.
pub fn estimate_flow(prev: &Frame, next: &Frame, block: usize, search: usize) -> Result<FlowField, DatasetError> {
    estimate_flow_with(prev, next, block, search, Exec::default())
}

pub fn estimate_flow_with(
    prev: &Frame,
    next: &Frame,
    block: usize,
    search: usize,
    exec: Exec,
) -> Result<FlowField, DatasetError> {
    if !prev.same_size(next) {
        return Err(DatasetError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    if block == 0 {
        return Err(DatasetError::InvalidArgument("block size must be positive".into()));
    }
    let (w, h) = (prev.width(), prev.height());
    let (bw, bh) = (w.div_ceil(block), h.div_ceil(block));
    let s = search as i64;

    let best: Vec<(i64, i64)> = exec.map_range(bw * bh, |b| {
        let (x0, y0) = ((b % bw) * block, (b / bw) * block);
        let (x1, y1) = ((x0 + block).min(w), (y0 + block).min(h));
        let mut best = (u64::MAX, true, 0i64, 0i64);
        for dx in -s..=s {
            for dy in -s..=s {
                if (x0 as i64 + dx) < 0
                    || (y0 as i64 + dy) < 0
                    || (x1 as i64 + dx) > w as i64
                    || (y1 as i64 + dy) > h as i64
                {
                    continue;
                }
                let mut sad = 0u64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let a = prev.pixel(x, y);
                        let c = next.pixel((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                        sad += (0..3).map(|k| a[k].abs_diff(c[k]) as u64).sum::<u64>();
                    }
                }
                let key = (sad, dx != 0 || dy != 0, dx, dy);
                if key < best {
                    best = key;
                }
            }
        }
        (best.2, best.3)
    });

    let mut vectors = vec![[0f32; 2]; w * h];
    for (i, v) in vectors.iter_mut().enumerate() {
        let (x, y) = (i % w, i / w);
        let (dx, dy) = best[(y / block) * bw + x / block];
        *v = [dx as f32, dy as f32];
    }
    Ok(FlowField::new(w, h, vectors)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    fn shifted(f: &Frame, sx: usize) -> Frame {
        let mut g = f.clone();
        for y in 0..f.height() {
            for x in sx..f.width() {
                g.set_pixel(x, y, f.pixel(x - sx, y));
            }
        }
        g
    }

    #[test]
    fn identical_frames_zero_flow() {
        let f = Frame::filled(24, 24, [7, 7, 7]).unwrap();
        let flow = estimate_flow(&f, &f, 8, 7).unwrap();
        assert!(flow.vectors().iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn zero_search_zero_flow() {
        let a = noise(24, 24, 1);
        let b = noise(24, 24, 2);
        let flow = estimate_flow(&a, &b, 8, 0).unwrap();
        assert!(flow.vectors().iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn recovers_horizontal_shift() {
        let a = noise(32, 32, 3);
        let b = shifted(&a, 2);
        let flow = estimate_flow(&a, &b, 8, 3).unwrap();
        // interior blocks: columns 0..24 of prev map inside next
        for by in 0..4 {
            for bx in 0..3 {
                assert_eq!(flow.get(bx * 8 + 4, by * 8 + 4), [2.0, 0.0], "block {bx},{by}");
            }
        }
    }

    #[test]
    fn matches_exhaustive_oracle_and_exec() {
        let a = noise(20, 14, 4);
        let b = noise(20, 14, 5);
        let seq = estimate_flow_with(&a, &b, 5, 2, Exec::Sequential).unwrap();
        let par = estimate_flow_with(&a, &b, 5, 2, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        // independently minimize the block at (5,5)
        let mut best = (u64::MAX, 0i64, 0i64);
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let mut sad = 0u64;
                for y in 5..10 {
                    for x in 5..10 {
                        let p = a.pixel(x, y);
                        let q = b.pixel((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                        for k in 0..3 {
                            sad += (p[k] as i64 - q[k] as i64).unsigned_abs();
                        }
                    }
                }
                if sad < best.0 {
                    best = (sad, dx, dy);
                }
            }
        }
        assert_eq!(seq.get(6, 6), [best.1 as f32, best.2 as f32]);
    }

    #[test]
    fn size_mismatch() {
        let a = noise(8, 8, 0);
        let b = noise(9, 8, 0);
        assert!(matches!(estimate_flow(&a, &b, 4, 1), Err(DatasetError::DimensionMismatch(_))));
    }
}
