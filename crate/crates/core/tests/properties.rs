use proptest::prelude::*;
use rangecast::data::NormalizationSpec;
use rangecast::geometry::{apply_mask, chamfer_distance, spherical_project, unproject, Grid, PointCloud, RangeImage, SensorModel};
use rangecast::losses::{mask_loss, range_loss, MASK_EPS};

fn sensor() -> SensorModel {
    SensorModel {
        fov_up: 12.0,
        fov_down: -18.0,
        height: 8,
        width: 32,
        max_range: 50.0,
    }
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-40.0..40.0f64, -40.0..40.0f64, -8.0..8.0f64]
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(point(), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_center_points_project_back_to_their_pixel(v in 0usize..8, u in 0usize..32, r in 0.5..50.0f64) {
        let s = sensor();
        let d = s.pixel_ray(v, u);
        let p = [r * d[0], r * d[1], r * d[2]];
        let (v2, u2, r2) = s.locate(&p).expect("inside the field of view");
        prop_assert_eq!((v2, u2), (v, u));
        prop_assert!((r2 - r).abs() < 1e-9 * r.max(1.0));
    }

    #[test]
    fn projection_keeps_the_nearest_return_and_ignores_order(mut pts in cloud(60), seed in any::<u64>()) {
        let s = sensor();
        let img = spherical_project(&PointCloud::new(pts.clone()), &s).unwrap();
        for k in 0..img.range.len() {
            let (v, u) = (k / s.width, k % s.width);
            let nearest = pts
                .iter()
                .filter_map(|p| s.locate(p))
                .filter(|&(pv, pu, _)| (pv, pu) == (v, u))
                .map(|(_, _, r)| r)
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(img.get(v, u), nearest.is_finite().then_some(nearest));
        }
        // Deterministic shuffle.
        let n = pts.len();
        let mut state = seed | 1;
        for i in (1..n).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            pts.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let shuffled = spherical_project(&PointCloud::new(pts), &s).unwrap();
        prop_assert_eq!(img, shuffled);
    }

    #[test]
    fn unprojection_has_one_point_per_valid_pixel(pts in cloud(60)) {
        let s = sensor();
        let img = spherical_project(&PointCloud::new(pts), &s).unwrap();
        let back = unproject(&img, &s);
        prop_assert_eq!(back.len(), img.valid_count());
        let again = spherical_project(&back, &s).unwrap();
        prop_assert_eq!(again.valid.clone(), img.valid.clone());
        for (a, b) in again.range.iter().zip(&img.range) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(a in cloud(40), b in cloud(40)) {
        let (a, b) = (PointCloud::new(a), PointCloud::new(b));
        let ab = chamfer_distance(&a, &b).unwrap();
        prop_assert_eq!(ab, chamfer_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mask_application(
        cells in prop::collection::vec((-10.0..60.0f64, 0.0..=1.0f64), 32)
    ) {
        let max_range = 50.0;
        let range = Grid::new(4, 8, cells.iter().map(|c| c.0).collect()).unwrap();
        let prob = Grid::new(4, 8, cells.iter().map(|c| c.1).collect()).unwrap();
        let img = apply_mask(&range, &prob, max_range).unwrap();
        for (i, &(r, p)) in cells.iter().enumerate() {
            let keep = p > 0.5 && r > 0.0 && r <= max_range;
            prop_assert_eq!(img.valid[i], keep);
            if keep {
                prop_assert_eq!(img.range[i], r);
            }
        }
        let everything = apply_mask(&range, &Grid::filled(4, 8, 1.0), max_range).unwrap();
        prop_assert!(everything.valid_count() >= img.valid_count());
        prop_assert_eq!(apply_mask(&range, &Grid::filled(4, 8, 0.5), max_range).unwrap().valid_count(), 0);
    }

    #[test]
    fn normalization_round_trips(cells in prop::collection::vec(prop::option::of(0.01..50.0f64), 32)) {
        let norm = NormalizationSpec::new(50.0).unwrap();
        let mut img = RangeImage::empty(4, 8);
        for (i, c) in cells.iter().enumerate() {
            if let Some(r) = c {
                img.valid[i] = true;
                img.range[i] = *r;
            }
        }
        let g = norm.normalize(&img);
        for (x, c) in g.data.iter().zip(&cells) {
            match c {
                Some(_) => prop_assert!(*x > 0.0 && *x <= 1.0),
                None => prop_assert_eq!(*x, -1.0),
            }
        }
        let back = norm.denormalize(&g);
        prop_assert_eq!(back.valid.clone(), img.valid.clone());
        for i in 0..cells.len() {
            if img.valid[i] {
                prop_assert!((back.range[i] - img.range[i]).abs() <= 1e-12 * img.range[i]);
            } else {
                prop_assert_eq!(back.range[i], img.range[i]);
            }
        }
    }

    #[test]
    fn range_loss_ignores_invalid_pixels(
        cells in prop::collection::vec((-1.0..2.0f64, 0.0..1.0f64, any::<bool>(), -1e6..1e6f64), 1..64)
    ) {
        prop_assume!(cells.iter().any(|c| c.2));
        let pred: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let target: Vec<f64> = cells.iter().map(|c| c.1).collect();
        let valid: Vec<bool> = cells.iter().map(|c| c.2).collect();
        let base = range_loss(&pred, &target, &valid).unwrap();
        prop_assert!(base >= 0.0);
        let junk_pred: Vec<f64> = cells.iter().map(|c| if c.2 { c.0 } else { c.3 }).collect();
        let junk_target: Vec<f64> = cells.iter().map(|c| if c.2 { c.1 } else { -c.3 }).collect();
        let other = range_loss(&junk_pred, &junk_target, &valid).unwrap();
        prop_assert_eq!(base.to_bits(), other.to_bits());
    }

    #[test]
    fn mask_loss_is_nonnegative_and_minimized_by_the_target(
        cells in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..64)
    ) {
        let prob: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let target: Vec<bool> = cells.iter().map(|c| c.1).collect();
        let loss = mask_loss(&prob, &target).unwrap();
        prop_assert!(loss >= 0.0);
        let ideal: Vec<f64> = target
            .iter()
            .map(|&m| (if m { 1.0f64 } else { 0.0 }).clamp(MASK_EPS, 1.0 - MASK_EPS))
            .collect();
        let best = mask_loss(&ideal, &target).unwrap();
        prop_assert!(best <= loss);
        prop_assert!(best < 1e-6);
    }
}
