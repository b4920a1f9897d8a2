use std::path::Path;

use proptest::prelude::*;
use seqens::checkpoint::Checkpoint;
use seqens::config::RunConfig;
use seqens::pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use seqens_core::{LabelMap, Tensor};

fn tensor() -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(1usize..=4, 0..=4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trips(
        tensors in prop::collection::vec(("[a-z_.]{1,12}", tensor()), 0..6),
        cut in any::<prop::sample::Index>(),
    ) {
        let ckpt = Checkpoint { tensors, metadata: Default::default() };
        let bytes = ckpt.encode();
        prop_assert_eq!(&Checkpoint::decode(&bytes).unwrap(), &ckpt);
        // any strict prefix is rejected
        let n = cut.index(bytes.len());
        prop_assert!(Checkpoint::decode(&bytes[..n]).is_err());
    }

    #[test]
    fn metadata_round_trips(m in prop::collection::btree_map("[a-z_.]{1,10}", "[a-zA-Z0-9_.,x ]{0,12}", 0..8)) {
        let ckpt = Checkpoint { tensors: Vec::new(), metadata: m.clone() };
        prop_assert_eq!(Checkpoint::parse_metadata(&ckpt.metadata_text()).unwrap(), m);
    }

    #[test]
    fn ppm_round_trips_quantized_images(h in 1usize..8, w in 1usize..8, seed in prop::collection::vec(0u8..=255, 3 * 64)) {
        let img = Tensor::from_fn(&[3, h, w], |i| seed[i] as f32 / 255.0);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn pgm_round_trips_labels(h in 1usize..10, w in 1usize..10, v in prop::collection::vec(any::<u8>(), 100)) {
        let l = LabelMap::new(h, w, v[..h * w].to_vec()).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&l)).unwrap(), l);
    }

    #[test]
    fn resolved_config_round_trips(
        count in 2usize..50,
        seed in any::<u64>(),
        epochs in 1usize..20,
        lr0 in 1e-4f64..1.0,
        grid in prop::collection::vec(0.1f64..16.0, 1..5),
        seeds in prop::collection::vec(any::<u64>(), 1..6),
    ) {
        let text = format!(
            "data.count = {}\ndata.train_count = 1\ndata.seed = {}\ntrain.epochs = {}\ntrain.lr0 = {}\ncalibration.grid = 1,{}\nrecipe.seeds = {}\n",
            count,
            seed,
            epochs,
            lr0,
            grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        let origin = Path::new("prop.cfg");
        let cfg = RunConfig::parse(&text, origin).unwrap();
        prop_assert_eq!(&RunConfig::parse(&cfg.to_text(), origin).unwrap(), &cfg);
    }
}
