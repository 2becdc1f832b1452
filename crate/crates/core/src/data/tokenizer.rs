//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

pub type Token = u32;

pub const BOS: Token = 256;
pub const EOS: Token = 257;
pub const PAD: Token = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn tokenize(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|&b| Token::from(b)).collect()
}

/// Inverse of [`tokenize`]; special tokens are dropped.
pub fn detokenize(tokens: &[Token]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

pub fn is_special(token: Token) -> bool {
    token >= BOS
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes);
        }
    }

    #[test]
    fn specials_are_dropped() {
        assert_eq!(detokenize(&[BOS, 104, 105, EOS, PAD]), b"hi");
        assert!(is_special(PAD) && !is_special(255));
    }
}
