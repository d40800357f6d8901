//! Named track layouts used for training and held-out evaluation.

use crate::geometry::{DamageSpec, TrackShape, TrackSpec};

fn spec(shape: TrackShape) -> TrackSpec {
    TrackSpec::new(shape)
}

/// Look up a layout by name.
pub fn track_spec(name: &str) -> Option<TrackSpec> {
    let s = match name {
        "circle_small" => spec(TrackShape::Circle { radius: 1.5 }),
        "circle_large" => spec(TrackShape::Circle { radius: 2.2 }),
        "rectangle" => spec(TrackShape::RectangleRounded {
            width: 4.0,
            height: 3.0,
            corner_radius: 0.4,
        }),
        "rectangle_sharp" => spec(TrackShape::Rectangle { width: 4.0, height: 3.0 }),
        "bean" => spec(TrackShape::ComplexSpline {
            control: vec![
                [3.0, 0.0],
                [2.2, 2.2],
                [0.0, 1.9],
                [-2.2, 2.2],
                [-3.0, 0.0],
                [-2.2, -2.2],
                [0.0, -2.6],
                [2.2, -2.2],
            ],
        }),
        "triangle" => spec(TrackShape::ComplexSpline {
            control: vec![
                [3.5, -2.0],
                [2.0, 1.0],
                [0.0, 3.2],
                [-2.0, 1.0],
                [-3.5, -2.0],
                [0.0, -2.4],
            ],
        }),
        "figure8" => spec(TrackShape::Figure8 {
            half_length: 2.5,
            lobe_height: 2.6,
        }),
        "rounded_rectangle" => spec(TrackShape::RectangleRounded {
            width: 5.0,
            height: 3.5,
            corner_radius: 1.0,
        }),
        "oval" => spec(TrackShape::Oval {
            semi_major: 2.8,
            semi_minor: 1.7,
        }),
        "wavy" => spec(TrackShape::ComplexSpline {
            control: vec![
                [3.5, 0.0],
                [2.5, 2.0],
                [0.8, 1.5],
                [-0.8, 2.5],
                [-2.8, 1.8],
                [-3.5, 0.0],
                [-2.5, -2.0],
                [-0.8, -1.5],
                [0.8, -2.5],
                [2.8, -1.8],
            ],
        }),
        _ => return None,
    };
    Some(s)
}

pub const TRAIN_TRACKS: [&str; 6] = ["circle_small", "rectangle", "circle_large", "bean", "triangle", "figure8"];
pub const TEST_TRACKS: [&str; 3] = ["rounded_rectangle", "oval", "wavy"];

pub fn all_names() -> impl Iterator<Item = &'static str> {
    TRAIN_TRACKS.iter().chain(TEST_TRACKS.iter()).copied()
}

/// Marker damage used for robustness checks.
pub fn default_damage(seed: u64) -> DamageSpec {
    DamageSpec {
        deletion_fraction: 0.3,
        distractor_density: 0.5,
        rng_seed: seed,
    }
}
