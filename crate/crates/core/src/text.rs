//! Text normalization shared by answer matching, refusal detection,
//! answer-uniqueness accounting and fact identifiers.

use sha2::{Digest, Sha256};

/// Case-folds, maps punctuation to spaces and collapses whitespace.
///
/// ```
/// use factprobe::text::normalize;
/// assert_eq!(normalize("  The answer is Turin, Italy. "), "the answer is turin italy");
/// assert_eq!(normalize("I couldn't"), "i couldn t");
/// ```
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Pulls the predicted answer out of a raw model response: drops a leading
/// `Answer:` marker, keeps the first non-empty line and normalizes it.
/// Returns an empty string when nothing is left.
///
/// ```
/// use factprobe::text::extract_prediction;
/// assert_eq!(extract_prediction("Answer: London.\nIt is in England."), "london");
/// assert_eq!(extract_prediction("Alençon"), "alençon");
/// ```
pub fn extract_prediction(response: &str) -> String {
    let line = response
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let body = match line.get(..7) {
        Some(prefix) if prefix.eq_ignore_ascii_case("answer:") => &line[7..],
        _ => line,
    };
    normalize(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_collapses_and_folds() {
        assert_eq!(normalize("PARIS"), "paris");
        assert_eq!(normalize("a\t\tb\n c"), "a b c");
        assert_eq!(normalize("...!!!"), "");
        assert_eq!(
            normalize("Bo Donaldson & the Heywoods"),
            "bo donaldson the heywoods"
        );
        assert_eq!(normalize("ÉCOLE"), "école");
    }

    #[test]
    fn curly_and_straight_apostrophes_agree() {
        assert_eq!(normalize("couldn’t"), normalize("couldn't"));
    }

    #[test]
    fn extract_handles_empty_and_marker_only() {
        assert_eq!(extract_prediction(""), "");
        assert_eq!(extract_prediction("   \n  "), "");
        assert_eq!(extract_prediction("ANSWER: Turin"), "turin");
        assert_eq!(extract_prediction("Answer:"), "");
    }

    #[test]
    fn sha_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
