mod common;

use common::*;
use ddr_core::field::{
    compose, downsample, sample_linear, upsample, warp_image, warp_labels, Deformation, GridShape,
    ScalarField, VectorField,
};
use ddr_core::pyramid::{make_chunk_layout, merge_chunks, split_chunks};
use proptest::prelude::*;

#[test]
fn unit_shift_matches_index_shift() {
    let s = s2(8, 8);
    let img = uniform_field(s, 0.0, 1.0, &mut rng(1));
    let phi = Deformation::from_displacement(VectorField::constant(s, &[1.0, 0.0]));
    let out = warp_image(&img, &phi).unwrap();
    for y in 0..8 {
        for x in 0..7 {
            assert_eq!(out.get([x, y, 0]), img.get([x + 1, y, 0]));
        }
    }
}

#[test]
fn label_shift_two_regions() {
    let s = s2(8, 6);
    let labels = ScalarField::from_fn(s, |[x, _, _]| if x < 4 { 1.0 } else { 2.0 });
    let phi = Deformation::from_displacement(VectorField::constant(s, &[1.0, 0.0]));
    let out = warp_labels(&labels, &phi).unwrap();
    for c in s.voxels() {
        let expect = labels.get([(c[0] + 1).min(7), c[1], 0]);
        assert_eq!(out.get(c), expect);
    }
}

#[test]
fn compose_matches_two_step_evaluation() {
    let s = s2(16, 16);
    let mut r = rng(7);
    let a = Deformation::from_displacement(smooth_vector(s, 3.0, 2.0, &mut r));
    let b = Deformation::from_displacement(smooth_vector(s, 3.0, 2.0, &mut r));
    let ab = compose(&a, &b).unwrap();
    for c in s.voxels() {
        let ub = b.displacement().get(c);
        let q = [c[0] as f64 + ub[0], c[1] as f64 + ub[1]];
        for k in 0..2 {
            let ua = sample_linear(&a.displacement().component(k), &q).unwrap();
            let expect = ub[k] + ua;
            assert!((ab.displacement().get(c)[k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn compose_is_associative() {
    let s = s2(16, 16);
    let cst = |v: [f64; 2]| Deformation::from_displacement(VectorField::constant(s, &v));
    let (a, b, c) = (cst([1.0, 0.5]), cst([-0.25, 2.0]), cst([0.5, -1.0]));
    let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
    let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
    assert_eq!(left, right);

    let mut r = rng(9);
    let mut smooth = || Deformation::from_displacement(smooth_vector(s, 4.0, 0.3, &mut r));
    let (a, b, c) = (smooth(), smooth(), smooth());
    let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
    let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
    let diff = left
        .displacement()
        .add(&right.displacement().scaled(-1.0))
        .unwrap();
    assert!(diff.mean_norm_where(|_| true) < 1e-3);
}

#[test]
fn compose_constant_example() {
    let s = s2(6, 6);
    let a = Deformation::from_displacement(VectorField::constant(s, &[0.0, 2.0]));
    let b = Deformation::from_displacement(VectorField::constant(s, &[1.0, 0.0]));
    let ab = compose(&a, &b).unwrap();
    assert_eq!(ab.displacement(), &VectorField::constant(s, &[1.0, 2.0]));
}

fn grid_shape() -> impl Strategy<Value = GridShape> {
    prop_oneof![
        (2usize..12, 2usize..12).prop_map(|(x, y)| GridShape::new2(x, y).unwrap()),
        (2usize..6, 2usize..6, 2usize..6).prop_map(|(x, y, z)| GridShape::new3(x, y, z).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_is_exact_on_grid(shape in grid_shape(), seed in any::<u64>()) {
        let f = uniform_field(shape, -5.0, 5.0, &mut rng(seed));
        for c in shape.voxels() {
            let p: Vec<f64> = (0..shape.ndim()).map(|a| c[a] as f64).collect();
            prop_assert_eq!(sample_linear(&f, &p).unwrap(), f.get(c));
        }
    }

    #[test]
    fn identity_warp_is_identity(shape in grid_shape(), seed in any::<u64>()) {
        let f = uniform_field(shape, 0.0, 1.0, &mut rng(seed));
        prop_assert_eq!(warp_image(&f, &Deformation::identity(shape)).unwrap(), f);
    }

    #[test]
    fn constant_images_survive_any_warp(shape in grid_shape(), seed in any::<u64>(), c in -3.0f64..3.0) {
        let u = uniform_vector(shape, -4.0, 4.0, &mut rng(seed));
        let out = warp_image(&ScalarField::constant(shape, c), &Deformation::from_displacement(u)).unwrap();
        prop_assert!(out.values().iter().all(|&v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn warped_labels_stay_in_label_set(shape in grid_shape(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let labels = ScalarField::from_fn(shape, |_| [0.0, 3.0, 7.0][rand::Rng::random_range(&mut r, 0..3)]);
        let u = uniform_vector(shape, -3.0, 3.0, &mut r);
        let out = warp_labels(&labels, &Deformation::from_displacement(u)).unwrap();
        let input: Vec<f64> = labels.values().to_vec();
        prop_assert!(out.values().iter().all(|v| input.contains(v)));
    }

    #[test]
    fn compose_identity_laws(shape in grid_shape(), seed in any::<u64>()) {
        let phi = Deformation::from_displacement(uniform_vector(shape, -2.0, 2.0, &mut rng(seed)));
        let id = Deformation::identity(shape);
        prop_assert_eq!(&compose(&id, &phi).unwrap(), &phi);
        prop_assert_eq!(&compose(&phi, &id).unwrap(), &phi);
    }

    #[test]
    fn down_up_preserve_constants(shape in grid_shape(), c in -2.0f64..2.0) {
        prop_assume!(shape.dims().iter().all(|&d| d >= 4));
        let f = ScalarField::constant(shape, c);
        let back = upsample(&downsample(&f));
        prop_assert!(back.values().iter().all(|&v| (v - c).abs() < 1e-12));
        let v: Vec<f64> = (0..shape.ndim()).map(|k| c + k as f64).collect();
        let vf = VectorField::constant(shape, &v);
        let back = upsample(&downsample(&vf));
        let padded: Vec<usize> = shape.dims().iter().map(|d| d + d % 2).collect();
        prop_assert_eq!(back.shape().dims().to_vec(), padded);
        for i in 0..back.shape().len() {
            let got = back.vector(i);
            for k in 0..shape.ndim() {
                prop_assert!((got[k] - v[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunk_weights_partition_unity(nx in 8usize..40, ny in 8usize..40, overlap in 0usize..6) {
        let shape = GridShape::new2(nx, ny).unwrap();
        if let Ok(layout) = make_chunk_layout(shape, overlap) {
            let total = merge_chunks(
                &split_chunks(&ScalarField::constant(shape, 1.0), &layout).unwrap(),
                &layout,
            ).unwrap();
            prop_assert!(total.values().iter().all(|&w| (w - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn merge_inverts_split(nx in 8usize..30, ny in 8usize..30, nz in 8usize..12, overlap in 0usize..3, seed in any::<u64>()) {
        let shape = GridShape::new3(nx, ny, nz).unwrap();
        let layout = make_chunk_layout(shape, overlap).unwrap();
        let f = uniform_vector(shape, -1.0, 1.0, &mut rng(seed));
        let back = merge_chunks(&split_chunks(&f, &layout).unwrap(), &layout).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
