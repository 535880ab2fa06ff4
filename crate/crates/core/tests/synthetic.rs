mod common;

use std::collections::HashSet;

use refseg::data::{
    connected_components, count_in_text, generate_synthetic, Shape, ShapeKind, Split, SyntheticSpec,
};
use refseg::metrics::BinaryMask;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn spec(n: usize, confound: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_train: n,
        n_val: n,
        n_test: n,
        image_size: 32,
        confound_strength: confound,
        seed,
        ..SyntheticSpec::default()
    }
}

/// Pearson chi-square p-value of the quadrant-level texture × lesion 2×2 table.
fn independence_p_value(cells: [[f64; 2]; 2]) -> f64 {
    let n: f64 = cells.iter().flatten().sum();
    let rows = [cells[0][0] + cells[0][1], cells[1][0] + cells[1][1]];
    let cols = [cells[0][0] + cells[1][0], cells[0][1] + cells[1][1]];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            stat += (cells[i][j] - e).powi(2) / e;
        }
    }
    1.0 - ChiSquared::new(1.0).unwrap().cdf(stat)
}

fn table(records: &[refseg::data::SyntheticRecord], split: Split) -> [[f64; 2]; 2] {
    let mut t = [[0.0; 2]; 2];
    for r in records.iter().filter(|r| r.split == split) {
        for q in 0..4 {
            t[r.textured_quadrants[q] as usize][r.lesion_quadrants[q] as usize] += 1.0;
        }
    }
    t
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic(&spec(20, 0.5, 3)).unwrap();
    let b = generate_synthetic(&spec(20, 0.5, 3)).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&spec(20, 0.5, 4)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn no_confound_means_texture_independent_of_lesions_in_every_split() {
    let records = generate_synthetic(&spec(1000, 0.0, 11)).unwrap();
    for split in Split::ALL {
        let p = independence_p_value(table(&records, split));
        assert!(p > 0.01, "{split}: p = {p}");
    }
}

#[test]
fn confound_couples_train_only() {
    let records = generate_synthetic(&spec(400, 0.9, 12)).unwrap();
    let train = table(&records, Split::Train);
    assert!(independence_p_value(train) < 1e-6);
    let agree = train[0][0] + train[1][1];
    let total: f64 = train.iter().flatten().sum();
    assert!(agree / total > 0.9, "agreement {}", agree / total);
    for split in [Split::Val, Split::Test] {
        assert!(independence_p_value(table(&records, split)) > 0.001, "{split}");
    }
}

#[test]
fn full_confound_textures_exactly_the_lesion_quadrants() {
    let records = generate_synthetic(&spec(50, 1.0, 13)).unwrap();
    for r in records.iter().filter(|r| r.split == Split::Train) {
        assert_eq!(r.textured_quadrants, r.lesion_quadrants);
    }
}

#[test]
fn masks_are_exactly_the_shape_supports() {
    let records = generate_synthetic(&spec(30, 0.3, 14)).unwrap();
    for r in &records {
        let n = r.mask.width() as usize;
        for y in 0..n {
            for x in 0..n {
                let inside = r.shapes.iter().any(|s| s.contains(x as f64, y as f64));
                assert_eq!(r.mask.get_pixel(x as u32, y as u32).0[0] == 255, inside);
            }
        }
        assert!(r.mask.as_raw().iter().all(|&v| v == 0 || v == 255));
    }
}

#[test]
fn discs_follow_the_distance_rule() {
    let s = SyntheticSpec {
        shapes: vec![ShapeKind::Disc],
        ..spec(20, 0.0, 15)
    };
    for r in generate_synthetic(&s).unwrap() {
        for shape in &r.shapes {
            let Shape::Disc { cx, cy, r: rad } = *shape else {
                panic!("expected a disc");
            };
            for y in 0..32u32 {
                for x in 0..32u32 {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    if d <= rad {
                        assert_eq!(r.mask.get_pixel(x, y).0[0], 255);
                    }
                }
            }
        }
    }
}

#[test]
fn expression_count_matches_connected_components() {
    let s = SyntheticSpec {
        image_size: 64,
        ..spec(100, 0.0, 16)
    };
    for r in generate_synthetic(&s).unwrap() {
        let m = BinaryMask::new(64, 64, r.mask_bools()).unwrap();
        assert_eq!(count_in_text(&r.text), Some(connected_components(&m)), "{}", r.text);
        assert_eq!(r.shapes.len(), r.lesion_quadrants.iter().filter(|&&b| b).count());
    }
}

#[test]
fn no_image_appears_in_two_splits() {
    let records = generate_synthetic(&spec(50, 0.5, 17)).unwrap();
    let names: HashSet<_> = records.iter().map(|r| r.name.clone()).collect();
    assert_eq!(names.len(), records.len());
    for r in &records {
        assert!(r.name.contains(r.split.as_str()));
    }
}

#[test]
fn invalid_specs_rejected() {
    assert!(generate_synthetic(&spec(1, 1.5, 0)).is_err());
    let s = SyntheticSpec {
        shapes: vec![],
        ..spec(1, 0.0, 0)
    };
    assert!(generate_synthetic(&s).is_err());
}
