//! Byte-level tokenizer: ids 0..=255 are raw bytes, 256..=259 are specials.
//! Encoding never produces specials, so decode(encode(s)) == s exactly.

pub type Token = usize;

pub const PAD: Token = 256;
pub const BOS: Token = 257;
pub const EOS: Token = 258;
pub const SEP: Token = 259;
pub const VOCAB_SIZE: usize = 260;

#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Vec<Token> {
        text.bytes().map(|b| b as Token).collect()
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<Token> {
        bytes.iter().map(|&b| b as Token).collect()
    }

    /// Byte tokens back to bytes; special ids are skipped.
    pub fn decode(&self, tokens: &[Token]) -> Vec<u8> {
        tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect()
    }

    /// Decode to a string, replacing invalid UTF-8 sequences.
    pub fn decode_lossy(&self, tokens: &[Token]) -> String {
        String::from_utf8_lossy(&self.decode(tokens)).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_is_byte_identity() {
        let tok = Tokenizer;
        assert_eq!(tok.encode("AB"), vec![65, 66]);
        assert_eq!(tok.encode(""), Vec::<Token>::new());
    }

    #[test]
    fn decode_skips_specials() {
        let tok = Tokenizer;
        assert_eq!(tok.decode(&[BOS, 104, 105, EOS, PAD, SEP]), b"hi");
    }

    #[test]
    fn roundtrip_is_exact_for_arbitrary_bytes() {
        let tok = Tokenizer;
        let bytes: Vec<u8> = (0..=255).collect();
        assert_eq!(tok.decode(&tok.encode_bytes(&bytes)), bytes);
    }
}
