//! Deterministic rule-based tokenization for token audits, compression, and
//! locally computed usage accounting.
//!
//! The default tokenizer segments text into maximal alphanumeric runs, single
//! CJK-family characters, and single punctuation characters. Whitespace
//! separates tokens and is never counted. Counting is additive within one
//! token per concatenation boundary: the only boundary effect concatenation
//! can have is merging the trailing alphanumeric run of the left string with
//! the leading run of the right string.

/// Character- and byte-offset interval of one token within its source string.
///
/// `start_char`/`end_char` are offsets in Unicode scalar values (the same
/// coordinate system error spans use); `start_byte`/`end_byte` index into the
/// UTF-8 source for slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start_char: usize,
    pub end_char: usize,
    pub start_byte: usize,
    pub end_byte: usize,
}

impl TokenSpan {
    /// The token's text within the string it was produced from.
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start_byte..self.end_byte]
    }

    /// True when this token's character interval intersects `[start, end)`.
    pub fn overlaps_chars(&self, start: usize, end: usize) -> bool {
        self.start_char < end && start < self.end_char
    }
}

/// Token segmentation and counting over UTF-8 text.
pub trait Tokenizer: Send + Sync {
    /// Tokens in source order, with character and byte offsets.
    fn spans(&self, text: &str) -> Vec<TokenSpan>;

    /// Number of tokens in `text`.
    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }
}

/// Counts tokens in `text` under the given tokenizer.
pub fn count_tokens(text: &str, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(text)
}

/// The default deterministic tokenizer.
///
/// Rules, applied per character in one left-to-right pass:
/// - whitespace ends any pending token and is skipped;
/// - CJK-family characters (Han, Hiragana, Katakana, Hangul) each form a
///   single-character token;
/// - other alphanumeric characters extend a pending word token;
/// - anything else (punctuation, symbols) forms a single-character token.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleTokenizer;

#[derive(PartialEq)]
enum CharClass {
    Space,
    Cjk,
    Word,
    Punct,
}

fn classify(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if is_cjk_like(c) {
        CharClass::Cjk
    } else if c.is_alphanumeric() {
        CharClass::Word
    } else {
        CharClass::Punct
    }
}

fn is_cjk_like(c: char) -> bool {
    matches!(c,
        '\u{3400}'..='\u{4DBF}'    // CJK extension A
        | '\u{4E00}'..='\u{9FFF}'  // CJK unified ideographs
        | '\u{F900}'..='\u{FAFF}'  // CJK compatibility ideographs
        | '\u{3040}'..='\u{309F}'  // hiragana
        | '\u{30A0}'..='\u{30FF}'  // katakana
        | '\u{AC00}'..='\u{D7AF}'  // hangul syllables
    )
}

impl Tokenizer for RuleTokenizer {
    fn spans(&self, text: &str) -> Vec<TokenSpan> {
        let mut tokens = Vec::new();
        let mut pending: Option<TokenSpan> = None;

        for (char_idx, (byte_idx, c)) in text.char_indices().enumerate() {
            let class = classify(c);
            match class {
                CharClass::Word => {
                    match pending.as_mut() {
                        Some(tok) => {
                            tok.end_char = char_idx + 1;
                            tok.end_byte = byte_idx + c.len_utf8();
                        }
                        None => {
                            pending = Some(TokenSpan {
                                start_char: char_idx,
                                end_char: char_idx + 1,
                                start_byte: byte_idx,
                                end_byte: byte_idx + c.len_utf8(),
                            });
                        }
                    }
                }
                CharClass::Space => {
                    if let Some(tok) = pending.take() {
                        tokens.push(tok);
                    }
                }
                CharClass::Cjk | CharClass::Punct => {
                    if let Some(tok) = pending.take() {
                        tokens.push(tok);
                    }
                    tokens.push(TokenSpan {
                        start_char: char_idx,
                        end_char: char_idx + 1,
                        start_byte: byte_idx,
                        end_byte: byte_idx + c.len_utf8(),
                    });
                }
            }
        }
        if let Some(tok) = pending.take() {
            tokens.push(tok);
        }
        tokens
    }
}
