#![allow(dead_code)]

use sotsep::codec::{train_codec, CodecConfig, CodecTrainConfig, RvqCodec};
use sotsep::model::ModelConfig;
use sotsep::synth::{gen_split, MixtureSample, Split, SynthConfig};
use sotsep::trainer::{prepare_pairs, TrainPair};

pub fn short_synth() -> SynthConfig {
    SynthConfig {
        duration: 0.25,
        max_onset: 0.125,
        ..Default::default()
    }
}

/// Three orders of eight entries, trained in well under a second.
pub fn tiny_codec() -> RvqCodec {
    let cfg = CodecConfig {
        latent_dim: 8,
        num_orders: 3,
        codebook_size: 8,
        ..Default::default()
    };
    let sig: Vec<Vec<f64>> = gen_split(&short_synth(), 99, Split::Train, 50)
        .unwrap()
        .into_iter()
        .flat_map(|s| s.refs)
        .collect();
    let tc = CodecTrainConfig {
        epochs: 2,
        kmeans_iters: 3,
        ..Default::default()
    };
    train_codec(&cfg, &tc, &sig).unwrap().0
}

pub fn tiny_model(codec: &RvqCodec) -> ModelConfig {
    ModelConfig {
        codebook_size: codec.codebook_size(),
        num_orders: codec.num_orders(),
        input_dim: codec.config.latent_dim,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ff_mult: 2,
        max_len: 80,
        dropout: 0.1,
        ..Default::default()
    }
}

pub fn samples(n: usize, split: Split) -> Vec<MixtureSample> {
    gen_split(&short_synth(), 5, split, n).unwrap()
}

pub fn pairs(codec: &RvqCodec, n: usize, split: Split) -> Vec<TrainPair> {
    prepare_pairs(codec, &samples(n, split), codec.num_orders()).unwrap()
}

/// Default-shaped codec (m=8, |C|=64, D=32) trained on the references of 100 half-second mixtures.
pub fn desk_codec() -> RvqCodec {
    let synth = SynthConfig {
        duration: 0.5,
        max_onset: 0.25,
        ..Default::default()
    };
    let sig: Vec<Vec<f64>> = gen_split(&synth, 3, Split::Train, 100)
        .unwrap()
        .into_iter()
        .flat_map(|s| s.refs)
        .collect();
    let tc = CodecTrainConfig {
        epochs: 4,
        kmeans_iters: 5,
        ..Default::default()
    };
    train_codec(&CodecConfig::default(), &tc, &sig).unwrap().0
}
