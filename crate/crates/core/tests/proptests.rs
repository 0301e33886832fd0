use proptest::prelude::*;

use ddreg::evaluation::{metric_dsc, metric_hd};
use ddreg::losses::{distance_transform, reg_smoothness};
use ddreg::volume::{normalize_intensity, resize, DisplacementField, Grid, LabelMap, Volume};
use ddreg::warp::{warp_nearest, warp_trilinear};
use ddreg::weighting::softmax;

fn grid() -> impl Strategy<Value = Grid> {
    (
        [2usize..7, 2usize..7, 2usize..7],
        [0.5f64..2.0, 0.5f64..2.0, 0.5f64..2.0],
        [-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0],
    )
        .prop_map(|(s, h, o)| Grid::new(s, h, o).unwrap())
}

fn volume() -> impl Strategy<Value = Volume> {
    grid().prop_flat_map(|g| {
        prop::collection::vec(-100.0f64..100.0, g.len()).prop_map(move |d| Volume::new(g, d).unwrap())
    })
}

fn labels() -> impl Strategy<Value = LabelMap> {
    grid().prop_flat_map(|g| prop::collection::vec(0u8..3, g.len()).prop_map(move |d| LabelMap::new(g, d).unwrap()))
}

fn label_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    grid().prop_flat_map(|g| {
        (
            prop::collection::vec(0u8..2, g.len()),
            prop::collection::vec(0u8..2, g.len()),
        )
            .prop_map(move |(a, b)| (LabelMap::new(g, a).unwrap(), LabelMap::new(g, b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_lands_in_unit_range_and_is_idempotent(v in volume()) {
        let n = normalize_intensity(&v);
        prop_assert!(n.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let again = normalize_intensity(&n);
        for (a, b) in n.data.iter().zip(&again.data) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn resize_to_own_shape_is_identity(v in volume(), m in labels()) {
        let r = resize(&v, v.grid.shape).unwrap();
        prop_assert_eq!(&r.grid, &v.grid);
        for (a, b) in r.data.iter().zip(&v.data) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        prop_assert_eq!(resize(&m, m.grid.shape).unwrap(), m);
    }

    #[test]
    fn zero_field_warps_are_identity(v in volume(), m in labels()) {
        let w = warp_trilinear(&v, &DisplacementField::zeros(v.grid)).unwrap();
        prop_assert!(w.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(warp_nearest(&m, &DisplacementField::zeros(m.grid)).unwrap(), m);
    }

    #[test]
    fn constant_field_has_zero_smoothness(g in grid(), d in [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0]) {
        let (lv, grad) = reg_smoothness(&DisplacementField::constant(g, d));
        prop_assert!(lv.value.abs() <= 1e-20);
        prop_assert!(grad.iter().flatten().all(|x| x.abs() <= 1e-12));
    }

    #[test]
    fn softmax_lies_on_the_simplex(logits in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let w = softmax(&logits);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.5).collect();
        for (a, b) in w.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dice_and_hausdorff_are_symmetric((a, b) in label_pair()) {
        prop_assert_eq!(metric_dsc(&a, &b, 1).unwrap(), metric_dsc(&b, &a, 1).unwrap());
        prop_assert_eq!(metric_hd(&a, &b, 1).unwrap(), metric_hd(&b, &a, 1).unwrap());
        if let Some(d) = metric_dsc(&a, &a, 1).unwrap() {
            prop_assert_eq!(d, 1.0);
            prop_assert_eq!(metric_hd(&a, &a, 1).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn distance_transform_matches_brute_force(m in labels()) {
        prop_assume!(m.contains(1));
        let dt = distance_transform(&m, 1).unwrap();
        let g = m.grid;
        let sites: Vec<[f64; 3]> = (0..g.len()).filter(|&i| m.data()[i] == 1).map(|i| g.world_of(i)).collect();
        for i in 0..g.len() {
            let p = g.world_of(i);
            let best = sites
                .iter()
                .map(|s| ((p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            prop_assert!((dt.data[i] - best).abs() <= 1e-9, "voxel {}: {} vs {}", i, dt.data[i], best);
        }
    }
}
