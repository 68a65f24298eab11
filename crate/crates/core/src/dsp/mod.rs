//! Audio I/O, log-mel extraction, SNR-calibrated mixing and the synthetic corpus.

pub mod corpus;
pub mod mel;
pub mod mix;
pub mod wav;

pub use corpus::{
    generate_corpus, generate_noise_pool, synthesize, Corpus, SyntheticUtteranceSpec, Utterance, VOCAB,
};
pub use mel::{frame_count, stft_mel, MelSpectrogram, HOP, N_FFT, N_MELS, WIN};
pub use mix::{mix_at_snr, snr_db, Mixture};
pub use wav::{load_wav, write_wav, Waveform, SAMPLE_RATE};
