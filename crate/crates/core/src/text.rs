//! Text canonicalization and tokenization shared by every index.

use unicode_normalization::{is_nfkc, UnicodeNormalization};

fn superscript_ascii(c: char) -> Option<char> {
    Some(match c {
        '⁰' => '0',
        '¹' => '1',
        '²' => '2',
        '³' => '3',
        '⁴' => '4',
        '⁵' => '5',
        '⁶' => '6',
        '⁷' => '7',
        '⁸' => '8',
        '⁹' => '9',
        '⁻' => '-',
        '⁺' => '+',
        _ => return None,
    })
}

/// Rewrites each run of superscript digits/signs as caret notation,
/// e.g. `10³` becomes `10^3` and `10⁻⁶` becomes `10^-6`.
fn map_superscripts(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len() + 2);
    let mut in_run = false;
    for c in raw.chars() {
        match superscript_ascii(c) {
            Some(a) => {
                if !in_run {
                    out.push('^');
                    in_run = true;
                }
                out.push(a);
            }
            None => {
                in_run = false;
                out.push(c);
            }
        }
    }
    out
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Canonical form used for every comparison in the engine: superscripts in
/// caret notation, NFKC, lowercase, single spaces, trimmed.
///
/// Total and idempotent.
pub fn normalize_text(raw: &str) -> String {
    if raw.is_ascii() {
        // fast path: NFKC and superscripts are no-ops on ASCII
        return collapse_whitespace(&raw.to_ascii_lowercase());
    }
    let mut s = map_superscripts(raw);
    // Lowercasing can leave a string that is no longer NFKC (and vice versa),
    // so iterate to a fixed point. Two rounds suffice in practice.
    for _ in 0..4 {
        let next: String = s.nfkc().collect::<String>().to_lowercase();
        let next = collapse_whitespace(&next);
        if next == s && is_nfkc(&next) {
            break;
        }
        s = next;
    }
    s
}

/// Splits normalized text on whitespace. Tokens containing `/` are emitted
/// whole and then as their non-empty `/`-separated parts, so `mg/dl` yields
/// `mg/dl`, `mg`, `dl`.
pub fn tokenize(normalized: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in normalized.split_whitespace() {
        out.push(word.to_string());
        if word.contains('/') {
            out.extend(
                word.split('/')
                    .filter(|p| !p.is_empty() && *p != word)
                    .map(str::to_string),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trims_and_lowercases() {
        assert_eq!(normalize_text("  Hemoglobin "), "hemoglobin");
        assert_eq!(normalize_text("Blood   Urea\tNitrogen"), "blood urea nitrogen");
    }

    #[test]
    fn superscripts_become_carets() {
        assert_eq!(normalize_text("10³/L"), "10^3/l");
        assert_eq!(normalize_text("10⁻⁶ mol"), "10^-6 mol");
        assert_eq!(normalize_text("x10¹²/L"), "x10^12/l");
    }

    #[test]
    fn empty_is_fixed_point() {
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text(" \t\n "), "");
    }

    #[test]
    fn nfkc_folds_compatibility_forms() {
        // micro sign folds to greek mu, fullwidth letters fold to ascii
        assert_eq!(normalize_text("µmol/L"), "μmol/l");
        assert_eq!(normalize_text("ＭＧ/ｄＬ"), "mg/dl");
        assert_eq!(normalize_text("a\u{00A0}b"), "a b");
    }

    #[test]
    fn tokenizer_keeps_slash_units_whole_and_split() {
        assert_eq!(tokenize("mg/dl"), vec!["mg/dl", "mg", "dl"]);
        assert_eq!(tokenize("serum/plasma"), vec!["serum/plasma", "serum", "plasma"]);
        assert_eq!(tokenize("glucose serum"), vec!["glucose", "serum"]);
        assert_eq!(tokenize("/hpf"), vec!["/hpf", "hpf"]);
        assert!(tokenize("").is_empty());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in any::<String>()) {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
            prop_assert_eq!(once.trim(), once.as_str());
        }

        #[test]
        fn normalize_is_idempotent_on_lab_like_text(s in "[ A-Za-z0-9/^*()%µ³²⁻.]{0,24}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }
    }
}
