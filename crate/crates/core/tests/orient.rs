mod common;

use cmrorient::orient::*;
use cmrorient::volume::Volume;
use common::{brute_force, code, geometry_check, group_algebra_mismatches, random_affine};
use nalgebra::Vector4;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn group_matches_brute_force() {
    let t = std::time::Instant::now();
    assert_eq!(group_algebra_mismatches(), 0);
    assert!(t.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn composition_examples_on_a_2x2_grid() {
    let grid = vec![vec![1, 2], vec![3, 4]];
    for (a, b, want) in [("101", "101", "011"), ("100", "001", "101")] {
        assert_eq!(compose(code(a), code(b)), code(want));
        assert_eq!(brute_force(code(want), &grid), brute_force(code(a), &brute_force(code(b), &grid)));
    }
    assert_eq!(invert(code("101")), code("110"));
    assert_eq!(invert(code("011")), code("011"));
}

#[test]
fn world_positions_survive_every_code() {
    let r = geometry_check(30, 99);
    assert_eq!(r.cases, 240);
    assert!(r.max_world_error < 1e-9, "{}", r.max_world_error);
    assert_eq!(r.round_trip_mismatches, 0);
}

#[test]
fn origin_voxel_keeps_world_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let affine = random_affine(&mut rng);
        let (sx, sy) = (5, 7);
        for c in all_codes() {
            let new = update_affine(c, &affine, sx, sy).unwrap();
            // where did source voxel (0,0) go? search the target lattice
            let map = index_map(c, sx, sy).unwrap();
            let [tx, ty] = map.target_dims;
            let (x, y) = (0..tx).flat_map(|x| (0..ty).map(move |y| (x, y))).find(|&(x, y)| map.source_of(x, y) == [0, 0]).unwrap();
            let after = new * Vector4::new(x as f64, y as f64, 0.0, 1.0);
            let before = affine * Vector4::new(0.0, 0.0, 0.0, 1.0);
            assert!((after - before).abs().max() < 1e-9);
            let (nx, ny) = if c.transposes() { (sy, sx) } else { (sx, sy) };
            let back = update_affine(invert(c), &new, nx, ny).unwrap();
            assert!((back - affine).abs().max() < 1e-9);
        }
    }
}

#[test]
fn transposing_code_swaps_volume_dims() {
    let vol = Volume::new(Array3::zeros((4, 6, 2)), [1.0, 2.0, 3.0], nalgebra::Matrix4::identity()).unwrap();
    let out = apply_to_volume(code("101"), &vol).unwrap();
    assert_eq!(out.dims(), (6, 4, 2));
    assert_eq!(out.spacing(), [2.0, 1.0, 3.0]);
}

fn arb_plane() -> impl Strategy<Value = Array2<i32>> {
    (1usize..7, 1usize..7).prop_flat_map(|(sx, sy)| {
        proptest::collection::vec(any::<i32>(), sx * sy).prop_map(move |v| Array2::from_shape_vec((sx, sy), v).unwrap())
    })
}

fn arb_code() -> impl Strategy<Value = OrientCode> {
    (0u8..8).prop_map(|b| OrientCode::from_bits(b).unwrap())
}

proptest! {
    #[test]
    fn compose_is_associative(a in arb_code(), b in arb_code(), c in arb_code()) {
        prop_assert_eq!(compose(a, compose(b, c)), compose(compose(a, b), c));
    }

    #[test]
    fn inverse_undoes_apply(p in arb_plane(), c in arb_code()) {
        let moved = apply_to_plane(c, p.view());
        prop_assert_eq!(apply_to_plane(invert(c), moved.view()), p);
    }

    #[test]
    fn apply_respects_composition(p in arb_plane(), a in arb_code(), b in arb_code()) {
        let step = apply_to_plane(a, apply_to_plane(b, p.view()).view());
        prop_assert_eq!(apply_to_plane(compose(a, b), p.view()), step);
    }

    #[test]
    fn grid_and_plane_agree_up_to_display_order(p in arb_plane(), c in arb_code()) {
        // display order: rows are y from top (largest) to bottom, columns are x
        let display = |a: &Array2<i32>| {
            let (sx, sy) = a.dim();
            Array2::from_shape_fn((sy, sx), |(r, col)| a[[col, sy - 1 - r]])
        };
        let via_grid = apply_to_grid(c, &display(&p)).unwrap();
        prop_assert_eq!(via_grid, display(&apply_to_plane(c, p.view())));
    }

    #[test]
    fn order_divides_four(c in arb_code()) {
        prop_assert!(4 % order(c) == 0);
    }
}
