//! Byte-level vocabulary with reserved control tokens.
//!
//! Ids 0..=255 are raw bytes; the five reserved tokens follow. Reserved
//! marker strings map to single ids on encode, so normal-text tokenization
//! can never produce them, and the extraction delimiters survive as single
//! trainable positions.

/// Padding token id.
pub const PAD: u32 = 256;
/// Beginning-of-sequence token id.
pub const BOS: u32 = 257;
/// End-of-sequence token id.
pub const EOS: u32 = 258;
/// Marks the start of an inline knowledge-graph extraction.
pub const START_EXTRACTION: u32 = 259;
/// Marks the end of an inline knowledge-graph extraction.
pub const END_EXTRACTION: u32 = 260;

pub const PAD_STR: &str = "<|pad|>";
pub const BOS_STR: &str = "<|bos|>";
pub const EOS_STR: &str = "<|eos|>";
pub const START_EXTRACTION_STR: &str = "<|startextraction|>";
pub const END_EXTRACTION_STR: &str = "<|endextraction|>";

const RESERVED: [(&str, u32); 5] = [
    (PAD_STR, PAD),
    (BOS_STR, BOS),
    (EOS_STR, EOS),
    (START_EXTRACTION_STR, START_EXTRACTION),
    (END_EXTRACTION_STR, END_EXTRACTION),
];

/// Token/id bijection: 256 byte tokens plus the reserved ids above.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    reserved: Vec<(String, u32)>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            reserved: RESERVED
                .iter()
                .map(|(s, id)| (s.to_string(), *id))
                .collect(),
        }
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn size(&self) -> usize {
        256 + self.reserved.len()
    }

    pub fn reserved(&self) -> &[(String, u32)] {
        &self.reserved
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        id >= 256 && (id as usize) < self.size()
    }

    /// Byte-fallback encoding: reserved marker strings become single ids,
    /// everything else is emitted byte by byte. Never fails.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        'outer: while i < bytes.len() {
            if bytes[i] == b'<' {
                for (marker, id) in &self.reserved {
                    let m = marker.as_bytes();
                    if bytes[i..].starts_with(m) {
                        out.push(*id);
                        i += m.len();
                        continue 'outer;
                    }
                }
            }
            out.push(bytes[i] as u32);
            i += 1;
        }
        out
    }

    /// Total decoding: byte ids become bytes, reserved ids their marker
    /// strings, anything else is dropped; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if let Some((marker, _)) = self.reserved.iter().find(|(_, r)| *r == id) {
                bytes.extend_from_slice(marker.as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
