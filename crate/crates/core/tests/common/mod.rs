#![allow(dead_code)]

use grumo::model::{Model, ModelConfig};
use grumo::synth::{SceneParams, SceneSet, Split};
use grumo::train::{train_fixture, TrainOptions};

/// Image size of the trained fixture.
pub const FIXTURE_SIZE: usize = 32;
pub const FIXTURE_SCENES: usize = 64;
pub const FIXTURE_SEED: u64 = 1;

pub fn fixture_options() -> TrainOptions {
    TrainOptions {
        epochs: 30,
        learning_rate: 0.01,
        ..TrainOptions::default()
    }
}

pub fn scene_set(split: Split, count: usize, size: usize) -> SceneSet {
    SceneSet::generate(0, count, split, SceneParams::sized(size, size)).expect("scene generation")
}

pub fn fixture_train_set() -> SceneSet {
    scene_set(Split::Train, FIXTURE_SCENES, FIXTURE_SIZE)
}

pub fn fixture_test_set() -> SceneSet {
    scene_set(Split::Test, FIXTURE_SCENES, FIXTURE_SIZE)
}

/// The regular fixture model: trained on the fixture training split.
pub fn train_regular(train: &SceneSet) -> Model<f32> {
    train_fixture(ModelConfig::default(), &train.scenes, FIXTURE_SEED, &fixture_options()).expect("training")
}

/// A briefly trained model with a variance head.
pub fn train_predictive(train: &SceneSet, epochs: usize) -> Model<f32> {
    let opts = TrainOptions {
        epochs,
        ..fixture_options()
    };
    train_fixture(ModelConfig::predictive(), &train.scenes, FIXTURE_SEED, &opts).expect("training")
}
