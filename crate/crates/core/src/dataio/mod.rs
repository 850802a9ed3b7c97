//! Datasets, slicing into subsequences and windows, synthetic generation and
//! prompt sampling.

mod io;
mod prompts;
mod slicing;
mod synth;
mod types;

pub use io::{load_dataset, save_dataset, FORMAT_VERSION};
pub use prompts::{choose_windows, prompt_budget, sample_prompts, sample_prompts_in, SamplerConfig};
pub use slicing::{coarsen, slice_subsequences, split_points, windows};
pub use synth::{generate_synthetic, SynthConfig};
pub use types::{
    total_states, Dataset, Granularity, LabeledSeries, Prompt, PromptKind, StateSequence, Subsequence,
    TimeSeries, Window, WindowSpec,
};
