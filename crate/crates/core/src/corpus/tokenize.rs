// SPDX-License-Identifier: Apache-2.0

/// Token emitted for empty or whitespace-only text.
pub const EMPTY_TOKEN: &str = "<empty>";

/// Lowercased maximal alphanumeric runs, plus every other non-space
/// character as its own token.
///
/// ```
/// use protoseq::corpus::tokenize;
/// assert_eq!(tokenize("Ok, wait 30min"), ["ok", ",", "wait", "30min"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut run = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            run.push(lower(ch));
            continue;
        }
        if !run.is_empty() {
            tokens.push(std::mem::take(&mut run));
        }
        if !ch.is_whitespace() {
            tokens.push(lower(ch).to_string());
        }
    }
    if !run.is_empty() {
        tokens.push(run);
    }
    if tokens.is_empty() {
        tokens.push(EMPTY_TOKEN.to_string());
    }
    tokens
}

// Characters whose lowercase form is several characters (e.g. 'İ') are kept unchanged.
fn lower(ch: char) -> char {
    let mut it = ch.to_lowercase();
    match (it.next(), it.next()) {
        (Some(c), None) => c,
        _ => ch,
    }
}
