//! Fixtures shared by the benchmarks.

use ega_core::gradcheck::{random_instance, InstanceShape};
use ega_core::{EgaParams, Matrix};

/// A query map of `positions` rows attending to `neighbors` stacked maps of
/// the same size, optionally projected to `projection` rows.
pub fn block_inputs(
    positions: usize,
    neighbors: usize,
    channels: usize,
    heads: usize,
    projection: Option<usize>,
    seed: u64,
) -> (Matrix, Matrix, EgaParams) {
    random_instance(
        InstanceShape {
            queries: positions,
            reference_len: neighbors * positions,
            channels,
            heads,
            projection_dim: projection,
        },
        seed,
    )
}
