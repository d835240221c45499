//! Randomized invariants over the public API.

use proptest::prelude::*;

use qtmt_core::codec::Plane;
use qtmt_core::data::{read_pgm, write_pgm};
use qtmt_core::eval::{bd_rate, RatePoint};
use qtmt_core::net::{softmax, threshold_filter};
use qtmt_core::qtmt::{
    sample_tree, CuGeometry, CuShape, ModeSet, PartitionConfig, PartitionTree, SplitMode,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn leaves(tree: &PartitionTree, out: &mut Vec<CuGeometry>) {
    if tree.children.is_empty() {
        out.push(tree.cu);
    } else {
        for c in &tree.children {
            leaves(c, out);
        }
    }
}

proptest! {
    /// Random legal partition trees tile the CTU exactly: every pixel is
    /// covered by exactly one leaf.
    #[test]
    fn random_trees_tile_the_ctu(seed in any::<u64>()) {
        let cfg = PartitionConfig::vvc_intra();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = sample_tree(CuGeometry::root(cfg.ctu_size), &cfg, &mut rng).unwrap();
        let mut ls = Vec::new();
        leaves(&tree, &mut ls);
        let n = cfg.ctu_size as usize;
        let mut cover = vec![0u8; n * n];
        for cu in &ls {
            for y in cu.y..cu.y + cu.h {
                for x in cu.x..cu.x + cu.w {
                    cover[y as usize * n + x as usize] += 1;
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c == 1));
    }

    /// Raising the keep threshold can only shrink the candidate set, and the
    /// best mode always survives.
    #[test]
    fn threshold_filter_is_monotone(
        raw in prop::collection::vec(0.0f64..1.0, 2..=6),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let modes: Vec<SplitMode> = (0..raw.len() as u8)
            .map(|c| SplitMode::from_code(c).unwrap())
            .collect();
        let kept_lo = threshold_filter(&raw, &modes, lo);
        let kept_hi = threshold_filter(&raw, &modes, hi);
        prop_assert_eq!(kept_hi.intersect(kept_lo), kept_hi, "not a subset");
        let amax = raw
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| modes[i])
            .unwrap();
        prop_assert!(kept_hi.contains(amax));
        prop_assert!(!kept_hi.is_empty());
    }

    /// Softmax outputs a probability vector and preserves the argmax.
    #[test]
    fn softmax_is_a_distribution(raw in prop::collection::vec(-20.0f64..20.0, 1..=6)) {
        let mut p = raw.clone();
        softmax(&mut p);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        let am_raw = raw.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let am_p = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(am_raw, am_p);
    }

    /// Shape construction canonicalizes to wide orientation and keeps area.
    #[test]
    fn shapes_canonicalize_wide(we in 0u32..6, he in 0u32..6) {
        let (w, h) = (4u32 << we, 4u32 << he);
        let s = CuShape::new(w, h);
        prop_assert!(s.w >= s.h);
        prop_assert_eq!(s.area(), w * h);
        prop_assert_eq!(s.min_side(), w.min(h));
    }

    /// Mode set bitmask representation round-trips.
    #[test]
    fn mode_set_bits_roundtrip(bits in 0u8..64) {
        let set = ModeSet::from_bits(bits).unwrap();
        prop_assert_eq!(set.bits(), bits);
        prop_assert_eq!(set.len() as u32, bits.count_ones());
    }

    /// A window shares every pixel with its source plane.
    #[test]
    fn plane_window_matches_source(
        seed in any::<u64>(),
        x0 in 0usize..32,
        y0 in 0usize..32,
        we in 0u32..4,
        he in 0u32..4,
    ) {
        let (w, h) = (4usize << we, 4usize << he);
        let img = qtmt_core::synth::synth_image(64, 64, seed);
        prop_assume!(x0 + w <= 64 && y0 + h <= 64);
        let win = img.window(x0, y0, w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(win.get(x, y), img.get(x0 + x, y0 + y));
            }
        }
    }

    /// Scaling every rate by a constant factor is measured exactly by the
    /// rate delta, independent of the curve.
    #[test]
    fn bd_rate_sees_uniform_scaling(
        seed in any::<u64>(),
        factor in 0.6f64..1.8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let mut rate = rng.gen_range(1e4..1e5);
        let mut q = rng.gen_range(30.0..36.0);
        let mut a = Vec::new();
        for qp in [37u8, 32, 27, 22] {
            a.push(RatePoint { qp, rate, psnr: q, seconds: 1.0 });
            rate *= rng.gen_range(1.5..2.5);
            q += rng.gen_range(1.0..3.0);
        }
        let t: Vec<RatePoint> = a.iter().map(|p| RatePoint { rate: p.rate * factor, ..*p }).collect();
        let bd = bd_rate(&a, &t).unwrap();
        prop_assert!((bd - (factor - 1.0) * 100.0).abs() < 1e-6, "bd {} factor {}", bd, factor);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Grayscale image files round-trip bit-exactly.
    #[test]
    fn pgm_roundtrip(
        w in 1usize..48,
        h in 1usize..48,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let data: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
        let img = Plane::from_vec(w, h, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        prop_assert_eq!(img, back);
    }
}
