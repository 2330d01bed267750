//! Waveform records, resampling, band-pass filtering and the 101-symbol
//! tokenizer, plus dataset builders for pre-training and fine-tuning.

mod dataset;
mod filter;
mod record;
mod resample;
mod tokenize;

pub use dataset::{
    build_finetune_dataset, build_pretrain_dataset, loso_folds, sample_batch, tokenize_stream, DatasetSpec, FinetuneDataset,
    Fold, PretrainData,
};
pub use filter::{bandpass, butterworth_bandpass, Biquad, Sos, BUTTERWORTH_ORDER};
pub use record::{
    read_record, sidecar_path, write_record, DatasetManifest, Label, ManifestEntry, Modality, SampleFormat, Sidecar,
    SignalRecord,
};
pub(crate) use record::write_file;
pub use resample::{choose_method, resample, ResampleMethod};
pub use tokenize::{
    detokenize, detokenize_tokens, quantize, tokenize_window, window_count, TokenWindow, FLAT_TOKEN, MAX_WINDOW, TOKEN_MAX,
    VOCAB_SIZE,
};
