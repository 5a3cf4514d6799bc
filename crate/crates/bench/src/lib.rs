//! Fixtures shared by the benchmarks.

use hlspower::synth::SynthDesign;
use hlspower::{gen_design, DesignSpec};

/// A mid-sized design: `lanes` parallel lanes of depth 4 with two arrays
/// and some casts.
pub fn design(lanes: usize) -> SynthDesign {
    gen_design(&DesignSpec {
        depth: 4,
        width: lanes,
        unroll: 2,
        buffers: vec![64, 128],
        bitwidth: 32,
        cast_prob: 0.3,
        seed: 11,
        ..Default::default()
    })
    .expect("valid spec")
}
