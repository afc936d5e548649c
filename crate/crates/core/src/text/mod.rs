//! Caption tokenization, embedding into continuous latents, and rounding back.

mod codec;
mod tokens;
mod vocab;

pub use codec::{CodecConfig, Rounded, TextCodec};
pub use tokens::{detokenize, tokenize, TokenSeq, MAX_LEN};
pub use vocab::{normalize, Vocab, BOS, EOS, PAD, RESERVED, UNK};
