//! Bundled benchmark: a two-type power-law graph of 10 000 vertices run with
//! the default model shape and hardware at K = 50.

use ade_core::execflow::Flow;
use ade_core::hetgraph::SyntheticSpec;

use crate::config::{GraphSource, KSetting, RunConfig};

pub const BENCHMARK_COUNTS: [usize; 2] = [2_000, 8_000];
pub const BENCHMARK_FEATURE_DIM: usize = 64;
pub const BENCHMARK_EXPONENT: f64 = 2.2;
pub const BENCHMARK_SEED: u64 = 42;
pub const BENCHMARK_K: u32 = 50;

pub fn benchmark_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_types: BENCHMARK_COUNTS.len(),
        counts: BENCHMARK_COUNTS.to_vec(),
        feature_dim: BENCHMARK_FEATURE_DIM,
        degree_exponent: BENCHMARK_EXPONENT,
        seed: BENCHMARK_SEED,
    }
}

pub fn benchmark_config() -> RunConfig {
    let mut cfg = RunConfig::new(GraphSource::Synthetic(benchmark_spec()));
    cfg.flow = Flow::Fused;
    cfg.k = KSetting::Bounded(BENCHMARK_K);
    cfg.model.seed = BENCHMARK_SEED;
    cfg
}
