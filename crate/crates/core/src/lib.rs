pub mod checkpoint;
pub mod contrastive;
pub mod evalsuite;
pub mod masking;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod seqio;
pub mod tokenizer;
pub mod vqvae;
