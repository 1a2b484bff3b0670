use rand::Rng;

use crate::error::{bail, Result};
use crate::types::Mask;

/// Reduces a full-resolution mask to a grid `factor` times coarser. A cell
/// is set when at least half of its pixels are; a nonempty mask that would
/// vanish keeps its best-covered cell, so a single pixel survives.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Mask {
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut counts = vec![0usize; h * w];
    for y in 0..h * factor {
        for x in 0..w * factor {
            if mask.get(y, x) {
                counts[(y / factor) * w + x / factor] += 1;
            }
        }
    }
    let area = factor * factor;
    let mut out = Mask {
        height: h,
        width: w,
        data: counts.iter().map(|&c| 2 * c >= area && c > 0).collect(),
    };
    if out.is_empty() {
        if let Some((best, &c)) = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) {
            if c > 0 {
                out.data[best] = true;
            }
        }
    }
    out
}

/// Splits a mask into `q_o` disjoint parts of (near) equal pixel count by
/// ordering its pixels along their principal axis.
pub fn split_mask_into_segments(mask: &Mask, q_o: usize) -> Result<Vec<Mask>> {
    if q_o == 0 {
        bail!(InvalidInput, "q_o must be at least 1");
    }
    let pts = mask.points();
    if pts.is_empty() {
        bail!(InvalidInput, "cannot split an empty mask");
    }
    let n = pts.len() as f64;
    let (my, mx) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), &(y, x)| (a + y as f64 / n, b + x as f64 / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(y, x) in &pts {
        let (dy, dx) = (y as f64 - my, x as f64 - mx);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (s, c) = theta.sin_cos();
    let mut order: Vec<(f64, usize)> = pts
        .iter()
        .enumerate()
        .map(|(i, &(y, x))| (x as f64 * c + y as f64 * s, i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let total = pts.len();
    let mut out = vec![Mask::empty(mask.height, mask.width); q_o];
    for (rank, &(_, i)) in order.iter().enumerate() {
        let seg = rank * q_o / total;
        let (y, x) = pts[i];
        out[seg].set(y, x, true);
    }
    Ok(out)
}

/// All mask pixels when there are at most `p_max`, otherwise exactly
/// `p_max` distinct pixels drawn uniformly, in row-major order.
pub fn subsample_points<R: Rng>(mask: &Mask, p_max: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let pts = mask.points();
    if pts.is_empty() {
        bail!(InvalidInput, "cannot sample points from an empty mask");
    }
    if pts.len() <= p_max {
        return Ok(pts);
    }
    let mut idx = rand::seq::index::sample(rng, pts.len(), p_max).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pts[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_segment_is_the_mask() {
        let m = Mask::from_fn(8, 8, |y, x| (y + x) % 3 == 0);
        assert_eq!(split_mask_into_segments(&m, 1).unwrap(), vec![m]);
    }

    #[test]
    fn two_by_two_mask_splits_into_pixels() {
        let m = Mask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        let segs = split_mask_into_segments(&m, 4).unwrap();
        let mut pix: Vec<_> = segs
            .iter()
            .map(|s| {
                assert_eq!(s.area(), 1);
                s.points()[0]
            })
            .collect();
        pix.sort();
        assert_eq!(pix, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn elongated_mask_splits_along_its_length() {
        let m = Mask::from_fn(4, 16, |y, _| y == 1 || y == 2);
        let segs = split_mask_into_segments(&m, 4).unwrap();
        for (k, s) in segs.iter().enumerate() {
            assert!(s.points().iter().all(|&(_, x)| x / 4 == k));
        }
    }

    #[test]
    fn empty_mask_errors() {
        assert!(split_mask_into_segments(&Mask::empty(4, 4), 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(subsample_points(&Mask::empty(4, 4), 2, &mut rng).is_err());
    }

    #[test]
    fn small_mask_keeps_all_points() {
        let m = Mask::from_fn(10, 10, |y, x| y == 0 && x < 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(subsample_points(&m, 64, &mut rng).unwrap(), m.points());
    }

    #[test]
    fn large_mask_yields_exactly_p_max_distinct_points() {
        let m = Mask::from_fn(25, 20, |_, _| true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = subsample_points(&m, 64, &mut rng).unwrap();
        assert_eq!(p.len(), 64);
        let set: std::collections::BTreeSet<_> = p.iter().collect();
        assert_eq!(set.len(), 64);
        assert!(p.iter().all(|&(y, x)| m.get(y, x)));
    }

    #[test]
    fn subsampling_is_uniform() {
        // 10k draws of 10 points from a 100-pixel mask; each pixel is
        // expected 1000 times. Chi-square with 99 dof, 0.999 quantile 148.2.
        let m = Mask::from_fn(10, 10, |_, _| true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 100];
        for _ in 0..10_000 {
            for (y, x) in subsample_points(&m, 10, &mut rng).unwrap() {
                counts[y * 10 + x] += 1;
            }
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        assert!(chi2 < 148.2, "chi2 = {chi2}");
    }

    #[test]
    fn point_survives_downsampling() {
        let mut m = Mask::empty(32, 32);
        m.set(13, 6, true);
        let d = downsample_mask(&m, 4);
        assert_eq!(d.points(), vec![(3, 1)]);
    }

    #[test]
    fn downsampling_uses_half_coverage() {
        let m = Mask::from_fn(8, 8, |y, x| y < 4 && x < 6);
        assert_eq!(downsample_mask(&m, 4).points(), vec![(0, 0), (0, 1)]);
        let m = Mask::from_fn(8, 8, |y, x| y < 4 && x < 5);
        assert_eq!(downsample_mask(&m, 4).points(), vec![(0, 0)]);
    }

    proptest! {
        #[test]
        fn segments_partition_the_mask(bits in proptest::collection::vec(any::<bool>(), 64), q_o in 1usize..6) {
            let m = Mask { height: 8, width: 8, data: bits };
            prop_assume!(!m.is_empty());
            let segs = split_mask_into_segments(&m, q_o).unwrap();
            prop_assert_eq!(segs.len(), q_o);
            for i in 0..64 {
                let owners = segs.iter().filter(|s| s.data[i]).count();
                prop_assert_eq!(owners, usize::from(m.data[i]));
            }
            if m.area() >= q_o {
                prop_assert!(segs.iter().all(|s| !s.is_empty()));
            }
        }
    }
}
