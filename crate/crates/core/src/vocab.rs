//! Closed token vocabulary: 64 text symbols plus stream/dialogue markers.
//!
//! The synthetic tasks never need real language; queries, answers, alert
//! phrases and reference captions are short fixed sequences over the text
//! symbols, so language-model loss and decoding can be exercised without
//! external data.

/// Token id within the embedding table.
pub type TokenId = usize;

/// Number of plain text symbols.
pub const TEXT_VOCAB: usize = 64;

/// Boundary and dialogue markers, placed after the text symbols.
pub const VISION_BOS: TokenId = TEXT_VOCAB;
pub const AUDIO_BOS: TokenId = TEXT_VOCAB + 1;
pub const AUDIO_EOS: TokenId = TEXT_VOCAB + 2;
pub const VISION_EOS: TokenId = TEXT_VOCAB + 3;
pub const QUERY_BOS: TokenId = TEXT_VOCAB + 4;
pub const QUERY_EOS: TokenId = TEXT_VOCAB + 5;
/// Marks the start of a response segment (engine-injected, never sampled).
pub const RESPONSE_BOS: TokenId = TEXT_VOCAB + 6;
/// Continuation marker: a response ran past its per-unit budget and resumes
/// at the next unit.
pub const CONTINUE_MARK: TokenId = TEXT_VOCAB + 7;
/// Terminal marker: the response is finished.
pub const END_MARK: TokenId = TEXT_VOCAB + 8;

/// Total embedding-table size (text symbols + markers).
pub const VOCAB_TOTAL: usize = TEXT_VOCAB + 9;

/// Number of distinct signature directions the simulator draws from.
pub const N_SIGNATURE_DIRS: usize = 8;

// Text-symbol conventions used by the synthetic tasks.
const ALERT_PHRASE: [TokenId; 3] = [32, 33, 34];
const ORDINAL_BASE: TokenId = 40; // ordinal answers: 40 + j
const DIR_NAME_BASE: TokenId = 48; // signature names: 48 + k
const QUERY_WHICH_SIG: TokenId = 56;
const QUERY_ORDINAL: TokenId = 57;

pub fn is_text(tok: TokenId) -> bool {
    tok < TEXT_VOCAB
}

pub fn marker_name(tok: TokenId) -> Option<&'static str> {
    match tok {
        VISION_BOS => Some("vision_bos"),
        AUDIO_BOS => Some("audio_bos"),
        AUDIO_EOS => Some("audio_eos"),
        VISION_EOS => Some("vision_eos"),
        QUERY_BOS => Some("query_bos"),
        QUERY_EOS => Some("query_eos"),
        RESPONSE_BOS => Some("response_bos"),
        CONTINUE_MARK => Some("continue"),
        END_MARK => Some("end"),
        _ => None,
    }
}

/// Fixed alert message emitted after positive units in alert streams.
pub fn alert_phrase() -> Vec<TokenId> {
    ALERT_PHRASE.to_vec()
}

/// Reference caption for a narration segment carrying signature `dir`.
/// Short fixed sequences (<= 8 tokens) keyed by the signature index.
pub fn caption_for_dir(dir: usize) -> Vec<TokenId> {
    let k = dir % N_SIGNATURE_DIRS;
    vec![16 + k, 24 + k, 8 + (k * 3) % 8]
}

/// Token naming signature direction `k` (closed-vocabulary "answer word").
pub fn dir_token(k: usize) -> TokenId {
    DIR_NAME_BASE + (k % N_SIGNATURE_DIRS)
}

/// Token naming ordinal position `j` (first, second, ...).
pub fn ordinal_token(j: usize) -> TokenId {
    ORDINAL_BASE + (j % 8)
}

/// Query asking which signature appeared in the stream.
pub fn query_which_signature() -> Vec<TokenId> {
    vec![QUERY_WHICH_SIG]
}

/// Query asking for the ordinal slot of the event with signature `k`.
pub fn query_ordinal_of(k: usize) -> Vec<TokenId> {
    vec![QUERY_ORDINAL, dir_token(k)]
}
