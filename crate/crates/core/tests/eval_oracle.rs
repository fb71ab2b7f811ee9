mod common;

use common::{brute_ap, brute_map, brute_unmatched, micro_instance};
use gasvsf::eval::{coco_ap, tide_classify, EvalConfig, EvalImage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn or_zero(v: Option<f64>) -> f64 {
    v.unwrap_or(0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn report_matches_brute_force(seed in any::<u64>()) {
        let images = micro_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let r = coco_ap(&images, &EvalConfig::default()).unwrap();
        let inf = f64::INFINITY;
        prop_assert_eq!(r.ap50, or_zero(brute_ap(&images, 0.5, 0.0, inf)));
        prop_assert_eq!(r.ap75, or_zero(brute_ap(&images, 0.75, 0.0, inf)));
        prop_assert_eq!(r.ap, or_zero(brute_map(&images, 0.0, inf)));
        prop_assert_eq!(r.ap_s, or_zero(brute_map(&images, 0.0, 1024.0)));
        prop_assert_eq!(r.ap_m, or_zero(brute_map(&images, 1024.0, 9216.0)));
        prop_assert_eq!(r.ap_l, or_zero(brute_map(&images, 9216.0, inf)));
        let clear: Vec<EvalImage> = images.iter().filter(|i| i.clear).cloned().collect();
        let vague: Vec<EvalImage> = images.iter().filter(|i| !i.clear).cloned().collect();
        if clear.is_empty() || vague.is_empty() {
            prop_assert_eq!(r.ap_clear, None);
            prop_assert_eq!(r.ap_vague, None);
        } else {
            prop_assert_eq!(r.ap_clear, Some(or_zero(brute_ap(&clear, 0.5, 0.0, inf))));
            prop_assert_eq!(r.ap_vague, Some(or_zero(brute_ap(&vague, 0.5, 0.0, inf))));
        }
    }

    #[test]
    fn error_categories_partition_false_positives(seed in any::<u64>()) {
        let images = micro_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        for img in &images {
            let (c, unmatched) = tide_classify(img, 0.5, 0.1).unwrap();
            prop_assert_eq!(unmatched, brute_unmatched(img, 0.5));
            prop_assert_eq!(c.false_positives(), unmatched);
            prop_assert!(c.miss <= img.gts.len());
        }
    }
}

#[test]
fn density_sums_to_one() {
    let images = micro_instance(&mut ChaCha8Rng::seed_from_u64(4));
    let mut images = images;
    images[0].gts.push(gasvsf::bbox::BBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
    let r = coco_ap(&images, &EvalConfig::default()).unwrap();
    assert!((r.iou_density.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
