use aggssl::data::dataset::{Image, Split, CHANNELS, IMAGE_SIZE, NUM_COLORS, NUM_SHAPES};
use aggssl::data::tasks::*;
use aggssl::data::{generate_dataset, SyntheticDataset};
use aggssl::trainer::proxy_batch;
use proptest::prelude::*;

fn image() -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..1.0f64, IMAGE_SIZE * IMAGE_SIZE * CHANNELS)
        .prop_map(|px| Image::new(IMAGE_SIZE, IMAGE_SIZE, CHANNELS, px).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_is_a_pixel_bijection(img in image(), k in 0usize..4) {
        let turned = rotate90(&img, k).unwrap();
        let back = rotate90(&turned, (4 - k) % 4).unwrap();
        prop_assert_eq!(&back, &img);
        let mut a = img.pixels().to_vec();
        let mut b = turned.pixels().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn jigsaw_is_a_pixel_bijection(img in image(), p in 0usize..24) {
        let perm = jigsaw_permutations()[p];
        let shuffled = apply_jigsaw(&img, &perm).unwrap();
        prop_assert_eq!(apply_jigsaw(&shuffled, &inverse_permutation(&perm)).unwrap(), img);
    }

    #[test]
    fn batches_are_deterministic(seed in any::<u64>(), kind in 0usize..5, n in 4usize..12) {
        let data = small();
        let imgs: Vec<&Image> = data.indices(Split::Pretrain)[..n].iter().map(|&i| data.image(i)).collect();
        let task = &ProxyTaskSpec::all()[kind];
        let a = task.make_batch(&imgs, seed).unwrap();
        let b = task.make_batch(&imgs, seed).unwrap();
        prop_assert_eq!(a.inputs, b.inputs);
        prop_assert_eq!(a.labels, b.labels);
    }
}

fn small() -> SyntheticDataset {
    generate_dataset(256, 42).unwrap()
}

#[test]
fn probe_images_never_reach_training_batches() {
    let data = small();
    let probe = data.indices(Split::Probe);
    let train = data.indices(Split::Pretrain);
    for task in ProxyTaskSpec::all() {
        let mut mixed = train[..7].to_vec();
        mixed.push(probe[0]);
        assert!(proxy_batch(&data, &task, &mixed, 0).is_err(), "{}", task.task_id);
        assert!(proxy_batch(&data, &task, &train[..8], 0).is_ok());
    }
    assert!(labeled_batches(&data, &probe, 8, 0).is_err());
}

#[test]
fn rotation_labels_independent_of_color() {
    let data = generate_dataset(2896, 5).unwrap();
    let idx = data.indices(Split::Pretrain);
    let imgs: Vec<&Image> = idx.iter().map(|&i| data.image(i)).collect();
    let batch = rotation_batch(&imgs, 17).unwrap();
    let PseudoLabels::Classes(labels) = batch.labels else { panic!() };
    let mut table = [[0f64; 4]; NUM_COLORS];
    for (&i, &l) in idx.iter().zip(&labels) {
        table[data.color_id(i)][l] += 1.0;
    }
    // Pearson chi-square against the product of the marginals, 9 degrees of
    // freedom; 27.88 is the 0.999 quantile.
    let total: f64 = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..4).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    for c in 0..NUM_COLORS {
        for j in 0..4 {
            let e = rows[c] * cols[j] / total;
            chi2 += (table[c][j] - e).powi(2) / e;
        }
    }
    assert!(chi2 < 27.88, "chi-square {chi2}");
}

#[test]
fn color_labels_independent_of_shape() {
    let data = generate_dataset(2896, 6).unwrap();
    let idx = data.indices(Split::Pretrain);
    let imgs: Vec<&Image> = idx.iter().map(|&i| data.image(i)).collect();
    let batch = color_batch(&imgs, 3).unwrap();
    let PseudoLabels::Classes(labels) = batch.labels else { panic!() };
    let mut table = [[0usize; NUM_COLORS]; NUM_SHAPES];
    for (&i, &l) in idx.iter().zip(&labels) {
        assert_eq!(l, data.color_id(i));
        table[data.shape_id(i)][l] += 1;
    }
    // Classes are balanced, so every shape sees every color equally often.
    let first = table[0][0];
    assert!(table.iter().flatten().all(|&c| c == first));
}

#[test]
fn default_profile_sizes() {
    let data = generate_dataset(2896, 0).unwrap();
    let sizes: Vec<usize> = Split::ALL.iter().map(|&s| data.indices(s).len()).collect();
    assert_eq!(sizes, [2000, 320, 320, 256]);
}
