use nalgebra::{DMatrix, Vector3};

use tig_core::distill::{bev_distill_loss, BevFeatureMap, DistillOptions};
use tig_core::geometry::{BevGrid, Box3D};
use tig_core::numerics::{finite_difference_gradient, max_relative_error};
use tig_core::scenegen::rng::CounterRng;
use tig_core::Tensor;

const C: usize = 4;
const SIDE: usize = 16;

fn grid() -> BevGrid {
    BevGrid::new(-8.0, 8.0, -8.0, 8.0, SIDE, SIDE).unwrap()
}

fn boxes() -> Vec<Box3D> {
    vec![
        Box3D::new(Vector3::new(-3.0, -2.0, 0.8), Vector3::new(3.0, 1.6, 1.5), 0.3).unwrap(),
        Box3D::new(Vector3::new(3.0, 3.0, 0.8), Vector3::new(4.0, 1.8, 1.5), -0.7).unwrap(),
    ]
}

fn random_map(seed: u64) -> BevFeatureMap {
    let mut rng = CounterRng::new(seed, 0);
    let data = (0..C * SIDE * SIDE).map(|_| rng.normal()).collect();
    BevFeatureMap::new(Tensor::new(vec![C, SIDE, SIDE], data).unwrap(), grid()).unwrap()
}

#[test]
fn identical_maps_give_zero_loss_and_gradient() {
    let map = random_map(1);
    let loss = bev_distill_loss(&map, &map, &boxes(), &DistillOptions::default()).unwrap();
    let total = loss.total();
    assert_eq!(total.value, 0.0);
    assert_eq!(total.grad.max_abs(), 0.0);
    assert!(!total.empty_supervision);
}

#[test]
fn no_boxes_is_empty_supervision() {
    let map = random_map(1);
    let loss = bev_distill_loss(&map, &random_map(2), &[], &DistillOptions::default()).unwrap();
    assert!(loss.inter_channel.empty_supervision && loss.inter_keypoint.empty_supervision);
    assert_eq!(loss.total().value, 0.0);
    assert_eq!(loss.total().grad.max_abs(), 0.0);
}

#[test]
fn channel_mixing_only_moves_the_channel_term() {
    let student = random_map(3);
    let mut rng = CounterRng::new(4, 0);
    let q = DMatrix::from_fn(C, C, |_, _| rng.normal()).qr().q();
    let plane = SIDE * SIDE;
    let s = student.data.data();
    let mut mixed = vec![0.0; C * plane];
    for cell in 0..plane {
        for a in 0..C {
            mixed[a * plane + cell] = (0..C).map(|b| q[(a, b)] * s[b * plane + cell]).sum();
        }
    }
    let teacher = BevFeatureMap::new(Tensor::new(vec![C, SIDE, SIDE], mixed).unwrap(), grid()).unwrap();
    let loss = bev_distill_loss(&student, &teacher, &boxes(), &DistillOptions::default()).unwrap();
    assert!(
        loss.inter_keypoint.value < 1e-20,
        "keypoint term {}",
        loss.inter_keypoint.value
    );
    assert!(
        loss.inter_channel.value > 1e-3,
        "channel term {}",
        loss.inter_channel.value
    );
}

#[test]
fn gradient_matches_finite_differences() {
    let student = random_map(5);
    let teacher = random_map(6);
    let opts = DistillOptions::default();
    let analytic = bev_distill_loss(&student, &teacher, &boxes(), &opts)
        .unwrap()
        .total()
        .grad;
    let numeric = finite_difference_gradient(
        |x| {
            let s = BevFeatureMap::new(x.clone(), grid()).unwrap();
            bev_distill_loss(&s, &teacher, &boxes(), &opts).unwrap().total().value
        },
        &student.data,
        1e-6,
    )
    .unwrap();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn box_order_does_not_matter() {
    let (student, teacher) = (random_map(7), random_map(8));
    let opts = DistillOptions::default();
    let forward = bev_distill_loss(&student, &teacher, &boxes(), &opts).unwrap().total();
    let mut reversed = boxes();
    reversed.reverse();
    let backward = bev_distill_loss(&student, &teacher, &reversed, &opts).unwrap().total();
    assert!((forward.value - backward.value).abs() <= 1e-12 * forward.value);
    assert!(max_relative_error(&forward.grad, &backward.grad) <= 1e-12);
}
