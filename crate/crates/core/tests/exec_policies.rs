//! Parallel and sequential execution must agree bit for bit.

use cariface_core::cluster::{kmeans, KMeansConfig};
use cariface_core::dataset::{load_photo_dataset_with, NativeLandmarks};
use cariface_core::landmarks::rasterize_batch;
use cariface_core::toy::{generate_toy_faces_with, render_toy_face, Domain, ToyOptions};
use cariface_core::warp::sample_bilinear_with;
use cariface_core::{ConfusionMatrix, DenseFlow, Exec, LabelMap, LandmarkGrouping, Planar, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn warp_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Planar::from_fn(3, 40, 33, |_, _, _| rng.random::<f64>());
    let flow = DenseFlow::new(Planar::from_fn(2, 40, 33, |_, _, _| rng.random_range(-0.2..0.2))).unwrap();
    assert_eq!(
        sample_bilinear_with(Exec::Parallel, &img, &flow).unwrap(),
        sample_bilinear_with(Exec::Sequential, &img, &flow).unwrap()
    );
}

#[test]
fn confusion_and_kmeans_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut map = || LabelMap::new(12, 12, 10, (0..144).map(|_| rng.random_range(0..10u8)).collect()).unwrap();
    let pairs: Vec<_> = (0..30).map(|_| (map(), map())).collect();
    assert_eq!(
        ConfusionMatrix::from_pairs(Exec::Parallel, 10, &pairs).unwrap(),
        ConfusionMatrix::from_pairs(Exec::Sequential, 10, &pairs).unwrap()
    );

    let data: Vec<Vec<f64>> = (0..120)
        .map(|_| (0..6).map(|_| rng.random::<f64>()).collect())
        .collect();
    let cfg = KMeansConfig::new(4, 9);
    let a = kmeans(Exec::Parallel, &data, &cfg).unwrap();
    let b = kmeans(Exec::Sequential, &data, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rasterization_agrees() {
    let sets: Vec<_> = (0..8)
        .map(|i| render_toy_face(i, Domain::Caricature, 3, 64).unwrap().landmarks)
        .collect();
    let g = LandmarkGrouping::default();
    assert_eq!(
        rasterize_batch(Exec::Parallel, &sets, &g, 48, 40).unwrap(),
        rasterize_batch(Exec::Sequential, &sets, &g, 48, 40).unwrap()
    );
}

#[test]
fn toy_dataset_roundtrips_under_both_policies() {
    let dir = tempfile::tempdir().unwrap();
    let opts = ToyOptions::new(5, Domain::Photo, 11);
    for (sub, exec) in [("par", Exec::Parallel), ("seq", Exec::Sequential)] {
        generate_toy_faces_with(exec, &dir.path().join(sub), &opts).unwrap();
    }
    let par = load_photo_dataset_with(Exec::Parallel, &dir.path().join("par"), NUM_CLASSES, &NativeLandmarks).unwrap();
    let seq =
        load_photo_dataset_with(Exec::Sequential, &dir.path().join("seq"), NUM_CLASSES, &NativeLandmarks).unwrap();
    assert_eq!(par, seq);
    assert_eq!(par.len(), 5);
    for (i, s) in par.iter().enumerate() {
        let face = render_toy_face(i, Domain::Photo, 11, 64).unwrap();
        assert_eq!(s.labels, face.labels);
        assert!(s
            .image
            .pixels()
            .data()
            .iter()
            .zip(face.image.pixels().data())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    }
}
