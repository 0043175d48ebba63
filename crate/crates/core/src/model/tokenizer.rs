//! Byte-level tokenizer. Every byte is its own token; ids above 255 are
//! reserved for control tokens emitted by models whose vocabulary has room
//! for them.

use super::Token;

pub const MEM_RETRIEVAL: Token = Token(256);
pub const MEM_RETRIEVAL_END: Token = Token(257);
pub const NO_MEM: Token = Token(258);
pub const THINK: Token = Token(259);
pub const THINK_END: Token = Token(260);
pub const VOCAB_WITH_CONTROLS: usize = 264;

pub const NEWLINE: Token = Token(b'\n' as u32);

pub const TAG_MEM_RETRIEVAL: &str = "<MEM_RETRIEVAL>";
pub const TAG_MEM_RETRIEVAL_END: &str = "</MEM_RETRIEVAL>";
pub const TAG_NO_MEM: &str = "<NO_MEM>";
pub const TAG_THINK: &str = "<think>";
pub const TAG_THINK_END: &str = "</think>";

pub fn encode(text: &str) -> Vec<Token> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|&b| Token(u32::from(b))).collect()
}

/// Raw bytes of the byte tokens; control tokens are rendered as their tags.
pub fn decode_bytes(tokens: &[Token]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match control_tag(t) {
            Some(tag) => out.extend_from_slice(tag.as_bytes()),
            None if t.0 < 256 => out.push(t.0 as u8),
            None => out.extend_from_slice(format!("<ctl:{}>", t.0).as_bytes()),
        }
    }
    out
}

pub fn decode(tokens: &[Token]) -> String {
    String::from_utf8_lossy(&decode_bytes(tokens)).into_owned()
}

pub fn control_tag(token: Token) -> Option<&'static str> {
    match token {
        MEM_RETRIEVAL => Some(TAG_MEM_RETRIEVAL),
        MEM_RETRIEVAL_END => Some(TAG_MEM_RETRIEVAL_END),
        NO_MEM => Some(TAG_NO_MEM),
        THINK => Some(TAG_THINK),
        THINK_END => Some(TAG_THINK_END),
        _ => None,
    }
}

pub fn is_control(token: Token) -> bool {
    token.0 >= 256
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            prop_assert_eq!(decode_bytes(&encode_bytes(&bytes)), bytes);
        }
    }

    #[test]
    fn controls_render_as_tags() {
        let mut toks = encode("a");
        toks.push(MEM_RETRIEVAL);
        toks.extend(encode("q"));
        toks.push(MEM_RETRIEVAL_END);
        assert_eq!(decode(&toks), "a<MEM_RETRIEVAL>q</MEM_RETRIEVAL>");
    }
}
