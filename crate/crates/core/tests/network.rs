//! Network-level invariants over the shipped presets.

use candle_core::{Device, Tensor};

use soda_core::model::{expected_heads, HeadKind, ModelConfig, Site, SodaNet};

fn presets() -> [ModelConfig; 3] {
    [ModelConfig::full(), ModelConfig::medium(), ModelConfig::small()]
}

#[test]
fn shape_algebra_at_full_resolution() {
    for cfg in presets() {
        let net = SodaNet::new(cfg.clone(), 0).unwrap();
        let x = Tensor::rand(0f32, 1., (1, 3, 384, 384), &Device::Cpu).unwrap();
        let out = net.forward(&x, false).unwrap();
        for id in expected_heads(&cfg) {
            let side = match (id.site, id.stage) {
                (Site::Aglrfe | Site::Alpm | Site::Cfm, s) => 384 >> s,
                (Site::Mrffam, s) => 384 >> (cfg.decoder_stages + 1 - s),
                (Site::Cfmd, s) => 384 >> (cfg.decoder_stages - s),
            };
            assert_eq!(out.get(id).unwrap().dims(), &[1, 1, side, side], "{:?} {id}", cfg.variant);
            assert_eq!(out.upsampled(id).unwrap().dims(), &[1, 1, 384, 384]);
        }
        assert_eq!(out.final_logits().unwrap().dims(), &[1, 1, 384, 384]);
    }
}

#[test]
fn parameter_counts_ignore_input_size() {
    for cfg in presets() {
        let base = SodaNet::new(cfg.clone(), 0).unwrap().param_count();
        let resized = ModelConfig { input_size: (96, 160), ..cfg };
        assert_eq!(SodaNet::new(resized, 1).unwrap().param_count(), base);
    }
}

#[test]
fn heads_stay_finite_across_seeds() {
    let cfg = ModelConfig { input_size: (32, 32), ..ModelConfig::small() };
    let contours = expected_heads(&cfg).iter().filter(|h| h.kind == HeadKind::Contour).count();
    assert_eq!(contours, 4);
    for seed in 0..100u64 {
        let net = SodaNet::new(cfg.clone(), seed).unwrap();
        let x = Tensor::rand(0f32, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let out = net.forward(&x, false).unwrap();
        for (id, t) in &out.heads {
            let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()), "seed {seed} head {id}");
        }
    }
}
