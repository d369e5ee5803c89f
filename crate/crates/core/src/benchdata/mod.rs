//! Benchmark lookup tables, dataset files, synthetic worlds and k-means
//! dataset augmentation.

mod dataset_io;
mod kmeans;
mod synth;
mod table;

pub use dataset_io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use kmeans::{clusters_to_subsets, kmeans_split, KMeansInit, KMeansResult, DEFAULT_MAX_ITER, MIN_SUBSET_SIZE};
pub use synth::{
    augment_dataset, feature_view, gen_synthetic_world, subset_dataset, AugmentSpec, SyntheticWorld,
    SyntheticWorldSpec, BASE_ID, FEATURE_VIEWS,
};
pub use table::{quantize, BenchmarkEntry, BenchmarkTable, BENCHMARK_HEADER};
