//! Small synthetic windows matching `ModelConfig::toy()`.

#![allow(dead_code)]

use rangecast::data::{synth_sequence, window, NormalizationSpec, SceneSpec, SequenceSample};
use rangecast::geometry::SensorModel;
use rangecast::network::ModelConfig;

pub fn toy_sensor() -> SensorModel {
    let m = ModelConfig::toy();
    SensorModel {
        fov_up: 10.0,
        fov_down: -15.0,
        height: m.height,
        width: m.width,
        max_range: 40.0,
    }
}

/// Windows of `past + future` frames from one seeded sequence.
pub fn toy_samples(seed: u64, frames: usize, past: usize, future: usize) -> Vec<SequenceSample> {
    let sensor = toy_sensor();
    let seq = synth_sequence(seed, frames, &sensor, &SceneSpec::default()).expect("scene");
    window(&seq, past, future, 1, NormalizationSpec::new(sensor.max_range).unwrap())
        .expect("stride")
        .collect()
}
