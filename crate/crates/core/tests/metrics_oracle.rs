mod common;

use common::{dice_oracle, random_labels, surface_oracle, surface_oracle_metrics};
use priorwarp::metrics::{dsc, evaluate, hd95, nearest_rank, nsd, surface_voxels};
use priorwarp::{Dims, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dice_matches_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..50 {
        let dims = Dims { h: rng.gen_range(2..8), w: rng.gen_range(2..8), d: rng.gen_range(2..8) };
        let a = random_labels(&mut rng, dims, 3, 0.4);
        let b = random_labels(&mut rng, dims, 3, 0.4);
        for c in 0..3 {
            assert_eq!(dsc(&a, &b, c).unwrap(), dice_oracle(&a, &b, c));
        }
    }
}

#[test]
fn surfaces_match_face_neighbour_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let m = random_labels(&mut rng, Dims::cube(6), 2, 0.6);
        for c in 0..2 {
            let mut got = surface_voxels(&m, c);
            got.sort();
            assert_eq!(got, surface_oracle(&m, c));
        }
    }
}

#[test]
fn surface_distances_match_brute_force_with_anisotropic_spacing() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let dims = Dims::cube(7);
        let a = random_labels(&mut rng, dims, 2, 0.3);
        let b = random_labels(&mut rng, dims, 2, 0.3);
        let s = [0.5, 1.5, 2.0];
        for c in 0..2 {
            let oracle = surface_oracle_metrics(&a, &b, c, 1.5, s);
            let got = hd95(&a, &b, c, s).unwrap().zip(nsd(&a, &b, c, 1.5, s).unwrap());
            assert_eq!(got, oracle);
        }
    }
}

#[test]
fn nearest_rank_picks_ceiling_rank() {
    let v: Vec<f64> = (1..=20).map(f64::from).collect();
    assert_eq!(nearest_rank(&v, 0.95), 19.0);
    assert_eq!(nearest_rank(&[3.0], 0.95), 3.0);
    let w: Vec<f64> = (1..=21).rev().map(f64::from).collect();
    assert_eq!(nearest_rank(&w, 0.95), 20.0);
}

#[test]
fn empty_classes_are_reported_not_averaged() {
    let dims = Dims::cube(4);
    let mut a = LabelMap::background(dims).unwrap();
    let b = a.clone();
    a.set(1, 1, 1, 1);
    let r = evaluate(&a, &b, 2, 1.0, [1.0; 3]).unwrap();
    assert!(r.classes[0].empty_b && !r.classes[0].empty_a);
    assert_eq!(r.classes[0].dsc, 0.0);
    assert_eq!(r.classes[0].hd95, None);
    assert!(r.classes[1].empty_a && r.classes[1].empty_b);
    assert_eq!(r.mean_dsc, 0.0);
    assert_eq!(r.mean_hd95, None);
}

#[test]
fn a_one_voxel_shift_has_unit_distance() {
    let dims = Dims::cube(8);
    let mut a = LabelMap::background(dims).unwrap();
    let mut b = a.clone();
    for h in 2..5 {
        for w in 2..5 {
            for d in 2..5 {
                a.set(h, w, d, 1);
                b.set(h, w, d + 1, 1);
            }
        }
    }
    let s = [1.0, 1.0, 0.5];
    assert_eq!(hd95(&a, &b, 0, s).unwrap(), Some(0.5));
    assert_eq!(nsd(&a, &b, 0, 0.5, s).unwrap(), Some(1.0));
    assert!(nsd(&a, &b, 0, 0.25, s).unwrap().unwrap() < 1.0);
}
