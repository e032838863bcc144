//! Fixed instruction vocabulary.
//!
//! The table is versioned so generated corpora stay reproducible: changing
//! any entry requires bumping [`VOCAB_VERSION`]. Motion words are content
//! tokens; connectives, fillers, and verbs of manner are stop words that the
//! instruction encoder filters out before embedding.

pub const VOCAB_VERSION: u32 = 1;

pub const UNK: u16 = 0;

/// (token, is_stop_word)
const TOKENS: &[(&str, bool)] = &[
    ("<unk>", false),
    // content: one token per atomic motion
    ("left", false),
    ("right", false),
    ("up", false),
    ("down", false),
    ("forward", false),
    ("stop", false),
    // stop words: articles, connectives, ordinals, verbs of manner
    ("the", true),
    ("a", true),
    ("an", true),
    ("to", true),
    ("and", true),
    ("then", true),
    ("now", true),
    ("next", true),
    ("first", true),
    ("second", true),
    ("third", true),
    ("fourth", true),
    ("fifth", true),
    ("sixth", true),
    ("finally", true),
    ("go", true),
    ("turn", true),
    ("tilt", true),
    ("step", true),
    ("walk", true),
    ("move", true),
    ("head", true),
    ("you", true),
    ("should", true),
    ("please", true),
    ("of", true),
    ("at", true),
    ("reach", true),
    ("goal", true),
    ("room", true),
    ("door", true),
    ("wall", true),
    ("keep", true),
    ("straight", true),
    ("until", true),
    ("your", true),
    ("it", true),
    ("is", true),
];

pub fn size() -> usize {
    TOKENS.len()
}

pub fn token(id: u16) -> &'static str {
    TOKENS[id as usize].0
}

pub fn id(token: &str) -> Option<u16> {
    TOKENS.iter().position(|(t, _)| *t == token).map(|i| i as u16)
}

pub fn is_stop_word(id: u16) -> bool {
    TOKENS
        .get(id as usize)
        .map(|(_, stop)| *stop)
        .unwrap_or(false)
}

/// Lowercases, strips punctuation, splits on whitespace; unknown words map
/// to `<unk>`.
pub fn tokenize(text: &str) -> Vec<u16> {
    text.split_whitespace()
        .map(|w| {
            let clean: String = w
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '<' || *c == '>')
                .collect::<String>()
                .to_lowercase();
            id(&clean).unwrap_or(UNK)
        })
        .collect()
}

pub fn decode(ids: &[u16]) -> String {
    ids.iter()
        .map(|&i| token(i))
        .collect::<Vec<_>>()
        .join(" ")
}
