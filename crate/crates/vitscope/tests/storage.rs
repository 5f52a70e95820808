//! Activation caches, dataset sources and weight containers on disk.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitscope::cache::{
    cache_dir, extract_activations, stream_activations, write_cache, ActivationSource, CacheHeader, CacheReader,
    CacheWriter, ExtractOptions,
};
use vitscope::datasets::{load_class_dirs, load_raw, save_raw, DatasetSpec};
use vitscope::container::TensorFile;
use vitscope_core::data::{Dataset, SyntheticSpec};
use vitscope_core::vit::{HookPoint, HookedViT, TokenSelector, ViTConfig};
use vitscope_core::Tensor;

fn toy_model(n_layers: usize) -> HookedViT {
    let cfg = ViTConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_mlp: 32,
        patch_size: 32,
        image_size: 224,
        n_classes: 10,
        attention_only: false,
        layer_norm_eps: 1e-5,
    };
    HookedViT::random(cfg, 7).unwrap()
}

fn images(n: usize, size: usize) -> Dataset {
    Dataset::synthetic(&SyntheticSpec::new(n, size, 10, 3)).unwrap()
}

fn opts(tokens: TokenSelector) -> ExtractOptions {
    ExtractOptions {
        tokens,
        image_batch: 3,
        shard_rows: 64,
        model_id: "toy".into(),
        seed: 3,
    }
}

/// Order-sensitive FNV-1a over the bit patterns.
fn checksum(values: &[f32]) -> u64 {
    values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[test]
fn ten_thousand_rows_in_uneven_batches_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 8;
    let header = CacheHeader {
        model_id: "m".into(),
        hook: HookPoint::ResidPost(0),
        token_selector: TokenSelector::All,
        d_model: d,
        tokens_per_example: 1,
        seed: 0,
    };
    let mut w = CacheWriter::create(dir.path(), header, 999).unwrap();
    let mut oracle = Vec::new();
    let mut written = 0;
    while written < 10_000 {
        let n = rng.random_range(1..700).min(10_000 - written);
        let vals: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        oracle.extend_from_slice(&vals);
        w.append(&Tensor::new(vec![n, d], vals).unwrap()).unwrap();
        written += n;
    }
    let m = w.finish().unwrap();
    assert_eq!(m.n_tokens, 10_000);
    assert_eq!(m.shards.iter().map(|s| s.rows).sum::<usize>(), 10_000);
    assert_eq!(m.shards.len(), 11);
    let r = CacheReader::open(dir.path()).unwrap();
    let back = r.read_all().unwrap();
    assert_eq!(checksum(back.data()), checksum(&oracle));
    assert!(back.data().iter().zip(&oracle).all(|(a, b)| a.to_bits() == b.to_bits()));
    let streamed: Vec<f32> = stream_activations(ActivationSource::Cache(&r), 4096, TokenSelector::All)
        .unwrap()
        .flat_map(|b| b.unwrap().into_data())
        .collect();
    assert_eq!(checksum(&streamed), checksum(&oracle));
}

#[test]
fn extraction_writes_one_cache_per_hook() {
    let model = toy_model(2);
    let data = images(8, 224);
    let root = tempfile::tempdir().unwrap();
    let hooks = [HookPoint::ResidPost(0), HookPoint::ResidPost(1)];
    let ms = extract_activations(&model, &data, &hooks, root.path(), &opts(TokenSelector::All)).unwrap();
    assert_eq!(ms.len(), 2);
    for m in &ms {
        assert_eq!(m.tokens_per_example, 50);
        assert_eq!(m.n_tokens, 8 * 50);
        assert_eq!(m.n_examples, 8);
    }
    let cls_root = tempfile::tempdir().unwrap();
    let ms = extract_activations(&model, &data, &hooks, cls_root.path(), &opts(TokenSelector::ClsOnly)).unwrap();
    assert!(ms.iter().all(|m| m.n_tokens == 8));

    let all = CacheReader::open(&cache_dir(root.path(), hooks[1])).unwrap();
    let cls = CacheReader::open(&cache_dir(cls_root.path(), hooks[1])).unwrap();
    assert!(all.read_selected(TokenSelector::ClsOnly).unwrap().bit_eq(&cls.read_all().unwrap()));
    assert!(cls.read_selected(TokenSelector::SpatialOnly).is_err());
}

#[test]
fn on_the_fly_stream_equals_cached_stream() {
    let model = toy_model(2);
    let data = images(7, 224);
    let root = tempfile::tempdir().unwrap();
    let hook = HookPoint::MlpOut(1);
    extract_activations(&model, &data, &[hook], root.path(), &opts(TokenSelector::All)).unwrap();
    let reader = CacheReader::open(&cache_dir(root.path(), hook)).unwrap();
    for tokens in [TokenSelector::All, TokenSelector::ClsOnly, TokenSelector::SpatialOnly] {
        let cached: Vec<Tensor> = stream_activations(ActivationSource::Cache(&reader), 33, tokens)
            .unwrap()
            .map(Result::unwrap)
            .collect();
        let live = ActivationSource::Model {
            model: &model,
            dataset: &data,
            hook,
            image_batch: 2,
        };
        let fly: Vec<Tensor> = stream_activations(live, 33, tokens).unwrap().map(Result::unwrap).collect();
        assert_eq!(cached.len(), fly.len());
        for (a, b) in cached.iter().zip(&fly) {
            assert!(a.bit_eq(b), "{tokens:?}");
            assert_eq!(a.max_abs_diff(b), 0.0);
        }
    }
}

#[test]
fn invalid_hooks_fail_before_anything_is_written() {
    let model = toy_model(1);
    let data = images(2, 224);
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("caches");
    let hooks = [HookPoint::ResidPost(0), HookPoint::ResidPost(3)];
    assert!(extract_activations(&model, &data, &hooks, &out, &opts(TokenSelector::All)).is_err());
    assert!(!out.exists());
    let logits = [HookPoint::Logits];
    assert!(extract_activations(&model, &data, &logits, &out, &opts(TokenSelector::ClsOnly)).is_err());
}

#[test]
fn synthetic_datasets_are_deterministic_and_class_conditional() {
    let spec = SyntheticSpec::new(4, 16, 2, 5);
    let a = Dataset::synthetic(&spec).unwrap();
    let b = Dataset::synthetic(&spec).unwrap();
    assert!(a.images().bit_eq(b.images()));
    let mut labels = a.labels().to_vec();
    labels.sort();
    assert_eq!(labels, vec![0, 0, 1, 1]);

    let big = Dataset::synthetic(&SyntheticSpec::new(40, 16, 2, 5)).unwrap();
    let per = 16 * 16 * 3;
    let mut means = [vec![0.0f64; per], vec![0.0f64; per]];
    for (i, &l) in big.labels().iter().enumerate() {
        for (m, &v) in means[l].iter_mut().zip(&big.images().data()[i * per..(i + 1) * per]) {
            *m += v as f64 / 20.0;
        }
    }
    let dist: f64 = means[0].iter().zip(&means[1]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    assert!(dist > 1.0, "{dist}");
}

#[test]
fn raw_tensor_datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = images(5, 16);
    let path = dir.path().join("data.safetensors");
    save_raw(&path, &data).unwrap();
    let back = load_raw(&path).unwrap();
    assert!(back.images().bit_eq(data.images()));
    assert_eq!(back.labels(), data.labels());
    let names: BTreeSet<String> = TensorFile::read(&path).unwrap().tensors.into_keys().collect();
    assert!(names.contains("img.4") && names.contains("label.0"));

    let mut spec = DatasetSpec::from_path(&path);
    spec.expected_image_size = Some(32);
    assert!(spec.load().is_err());
}

#[test]
fn class_directories_are_labeled_in_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    let px = |v: u8| {
        let mut b = b"P6\n2 2\n255\n".to_vec();
        b.extend(std::iter::repeat_n(v, 12));
        b
    };
    for (class, files) in [("zebra", 1), ("ant", 2)] {
        std::fs::create_dir(dir.path().join(class)).unwrap();
        for f in 0..files {
            std::fs::write(dir.path().join(class).join(format!("{f}.ppm")), px(51 * (f as u8 + 1))).unwrap();
        }
    }
    std::fs::write(dir.path().join("ant").join("notes.txt"), "x").unwrap();
    let data = load_class_dirs(dir.path()).unwrap();
    assert_eq!(data.labels(), &[0, 0, 1]);
    assert_eq!(data.images().data()[0], 0.2);
    assert!(matches!(
        DatasetSpec::from_path(dir.path()).source,
        vitscope::datasets::DatasetSource::Directory { .. }
    ));
}

#[test]
fn rewriting_a_cache_replaces_old_shards() {
    let dir = tempfile::tempdir().unwrap();
    let header = |d| CacheHeader {
        model_id: "m".into(),
        hook: HookPoint::Embed,
        token_selector: TokenSelector::All,
        d_model: d,
        tokens_per_example: 1,
        seed: 0,
    };
    write_cache(dir.path(), header(2), 1, [Tensor::zeros(&[5, 2])]).unwrap();
    write_cache(dir.path(), header(2), 4, [Tensor::full(&[2, 2], 1.0)]).unwrap();
    let shards = std::fs::read_dir(dir.path()).unwrap().count() - 1;
    assert_eq!(shards, 1);
    assert_eq!(CacheReader::open(dir.path()).unwrap().read_all().unwrap().data(), &[1.0; 4]);
}
