//! Byte-level vocabulary with four reserved ids.

use alloc::vec::Vec;

pub type Token = usize;

pub const MASK: Token = 256;
pub const PAD: Token = 257;
pub const BOS: Token = 258;
pub const EOS: Token = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(t: Token) -> bool {
    t >= 256
}

pub fn encode(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|&b| b as Token).collect()
}

/// Bytes of `tokens` with every special id dropped.
pub fn decode(tokens: &[Token]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// Prefix of `tokens` up to and including the first EOS.
pub fn truncate_after_eos(tokens: &[Token]) -> &[Token] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..=i],
        None => tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_are_stripped() {
        let toks = [104, 105, EOS, PAD, MASK, BOS];
        assert_eq!(decode(&toks), b"hi");
        assert_eq!(truncate_after_eos(&toks), &[104, 105, EOS]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let toks = encode(&bytes);
            prop_assert!(toks.iter().all(|&t| t != MASK));
            prop_assert_eq!(decode(&toks), bytes);
        }
    }
}
