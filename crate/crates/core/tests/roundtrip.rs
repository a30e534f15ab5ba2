use ipf::cli::dataset_from_csv;
use ipf::feature_io::{self, FeatureMatrix};
use ipf::net::{SnMlp, TrainConfig};
use ipf::synth;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn wide_matrix_is_bitwise_lossless() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // values already representable in f32, as written by the exporter
    let data = Array2::from_shape_fn((100, 640), |_| f64::from(rng.random_range(-20.0f32..20.0)));
    let labels: Vec<i32> = (0..100).map(|i| i % 10).collect();
    let m = FeatureMatrix::new(data, Some(labels), "wide").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.ipff");
    feature_io::write_features(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), feature_io::HEADER_LEN + 100 * 640 * 4 + 100 * 4 + feature_io::CHECKSUM_LEN);
    let back = feature_io::read_features(&path).unwrap();
    assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(back.labels, m.labels);
    let again = dir.path().join("again.ipff");
    feature_io::write_features(&back, &again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn spirals_csv_to_binary() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("spirals.csv");
    let spirals = synth::make_three_spirals(50, 0.08, 4).unwrap();
    spirals.write_csv(&csv).unwrap();

    let from_csv = feature_io::read_any(&csv).unwrap();
    assert_eq!(from_csv.data, spirals.points);
    let labels: Vec<i32> = spirals.labels.iter().map(|&l| l as i32).collect();
    assert_eq!(from_csv.labels.as_deref(), Some(&labels[..]));

    let bin = dir.path().join("spirals.ipff");
    feature_io::write_features(&from_csv, &bin).unwrap();
    let back = feature_io::read_any(&bin).unwrap();
    assert_eq!(back.labels, from_csv.labels);
    for (b, c) in back.data.iter().zip(from_csv.data.iter()) {
        assert_eq!(*b, f64::from(*c as f32));
    }

    let ds = dataset_from_csv(&csv).unwrap();
    assert_eq!(ds.num_classes, 3);
    assert_eq!(ds.points, spirals.points);
}

#[test]
fn checkpoint_preserves_features() {
    let cfg = TrainConfig { hidden_dim: 12, num_blocks: 2, seed: 3, ..TrainConfig::default() };
    let mut model = SnMlp::new(2, 3, &cfg).unwrap();
    model.apply_spectral_norm();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.snml");
    model.save(&path).unwrap();
    let loaded = SnMlp::load(&path).unwrap();
    let x = synth::make_three_spirals(20, 0.0, 0).unwrap().points;
    assert_eq!(model.forward(x.view()).unwrap(), loaded.forward(x.view()).unwrap());
    assert_eq!(model.sn_vectors(), loaded.sn_vectors());
}
