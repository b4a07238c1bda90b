/// Character-level tokenizer over printable ASCII, plus an unknown-character
/// token and an end-of-sequence token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CharTokenizer;

const FIRST: u32 = b' ' as u32;
const LAST: u32 = b'~' as u32;

impl CharTokenizer {
    pub const ID: &'static str = "char-ascii-v1";
    pub const UNK: u32 = LAST - FIRST + 1;
    pub const EOS: u32 = LAST - FIRST + 2;

    pub fn id(&self) -> &'static str {
        Self::ID
    }

    pub fn vocab_size(&self) -> usize {
        Self::EOS as usize + 1
    }

    /// Token ids for `text`, without the end marker.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars()
            .map(|c| match c as u32 {
                code @ FIRST..=LAST => code - FIRST,
                _ => Self::UNK,
            })
            .collect()
    }

    /// Inverse of [`encode`](Self::encode). Unknown tokens render as `?`;
    /// decoding stops at the end marker.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != Self::EOS)
            .map(|&id| match id {
                id if id < Self::UNK => char::from_u32(id + FIRST).expect("printable ascii"),
                _ => '?',
            })
            .collect()
    }
}
