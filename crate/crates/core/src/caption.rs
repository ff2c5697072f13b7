//! Conversion of raw LaTeX caption source to unicode plaintext.
//!
//! References and citations become the literal markers `<ref>` and
//! `<cit.>`. Known macros are mapped through a versioned substitution
//! table shipped as a data file; unknown macros are dropped with their
//! required-argument text retained. The function is total and idempotent:
//! renormalizing its own output changes nothing, which is why the four
//! structurally active characters (`\`, `{`, `}`, `$`) never appear in
//! output.

use std::collections::HashMap;
use std::sync::LazyLock;

use serde::Serialize;
use sha2::{Digest, Sha256};

const MACRO_TABLE_BYTES: &[u8] = include_bytes!("../assets/caption_macros.tsv");

/// Commands replaced by the literal `<ref>`.
const REF_MACROS: [&str; 6] = ["ref", "eqref", "autoref", "cref", "Cref", "pageref"];
/// Commands replaced by the literal `<cit.>`.
const CITE_MACROS: [&str; 6] = ["cite", "citep", "citet", "citealp", "citealt", "citeauthor"];

/// Hex sha256 of the substitution table, recorded in every manifest row.
pub fn macro_table_sha256() -> &'static str {
    static HASH: LazyLock<String> =
        LazyLock::new(|| hex::encode(Sha256::digest(MACRO_TABLE_BYTES)));
    &HASH
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MacroKind {
    Sym,
    Accent,
    Unwrap,
    Second,
    Drop,
    Noop,
}

#[derive(Debug, Clone)]
struct MacroRule {
    kind: MacroKind,
    arity: usize,
    replacement: String,
}

static MACRO_TABLE: LazyLock<HashMap<String, MacroRule>> = LazyLock::new(|| {
    let text = std::str::from_utf8(MACRO_TABLE_BYTES).expect("macro table is UTF-8");
    let mut table = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        assert!(
            fields.len() >= 3,
            "macro table line {} is malformed",
            lineno + 1
        );
        let kind = match fields[1] {
            "sym" => MacroKind::Sym,
            "accent" => MacroKind::Accent,
            "unwrap" => MacroKind::Unwrap,
            "second" => MacroKind::Second,
            "drop" => MacroKind::Drop,
            "noop" => MacroKind::Noop,
            other => panic!("macro table line {}: unknown kind {other}", lineno + 1),
        };
        let arity: usize = fields[2].parse().expect("macro table arity");
        let replacement = fields
            .get(3)
            .map(|r| r.replace("\\s", " "))
            .unwrap_or_default();
        table.insert(
            fields[0].to_string(),
            MacroRule {
                kind,
                arity,
                replacement,
            },
        );
    }
    table
});

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReplacementCounts {
    #[serde(rename = "ref")]
    pub ref_count: usize,
    #[serde(rename = "cit")]
    pub cit_count: usize,
}

/// Plaintext caption plus bookkeeping for stats and auditing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NormalizedCaption {
    pub text: String,
    /// Unicode scalar count of `text`.
    pub char_length: usize,
    pub replacements: ReplacementCounts,
    /// Set when an unknown macro was dropped.
    pub lossy: bool,
}

/// Unicode scalar count of the normalized text.
pub fn caption_char_length(caption: &NormalizedCaption) -> usize {
    caption.text.chars().count()
}

/// Whitespace-separated word count, reported alongside the character
/// metric so either reading of "caption length" can be checked.
pub fn caption_word_count(caption: &NormalizedCaption) -> usize {
    caption.text.split_whitespace().count()
}

/// Convert raw LaTeX caption source to unicode plaintext. Total; never
/// fails. JATS-derived plaintext passes through unchanged apart from
/// whitespace collapsing.
pub fn normalize_caption(caption_source: &str) -> NormalizedCaption {
    let mut scanner = Scanner {
        out: String::with_capacity(caption_source.len()),
        lossy: false,
    };
    scanner.scan(caption_source);
    // Ligatures run over the assembled output so that pairs formed by
    // command deletion (e.g. `-\label{x}-`) are still caught in this pass.
    let text = collapse_whitespace(&ligate(&scanner.out));
    let replacements = ReplacementCounts {
        ref_count: text.matches("<ref>").count(),
        cit_count: text.matches("<cit.>").count(),
    };
    NormalizedCaption {
        char_length: text.chars().count(),
        replacements,
        lossy: scanner.lossy,
        text,
    }
}

/// TeX ligatures: dashes and quote pairs. Single pass; its output never
/// contains a convertible sequence, which keeps normalization idempotent.
fn ligate(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let bytes = s.as_bytes();
    let mut pos = 0usize;
    while pos < bytes.len() {
        if s[pos..].starts_with("---") {
            out.push('—');
            pos += 3;
        } else if s[pos..].starts_with("--") {
            out.push('–');
            pos += 2;
        } else if s[pos..].starts_with("``") {
            out.push('“');
            pos += 2;
        } else if s[pos..].starts_with("''") {
            out.push('”');
            pos += 2;
        } else if bytes[pos] == b'`' {
            out.push('‘');
            pos += 1;
        } else if bytes[pos] == b'\'' {
            out.push('’');
            pos += 1;
        } else {
            let c = s[pos..].chars().next().unwrap();
            out.push(c);
            pos += c.len_utf8();
        }
    }
    out
}

fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_ws = false;
    for c in s.chars() {
        if c.is_whitespace() {
            in_ws = true;
        } else {
            if in_ws && !out.is_empty() {
                out.push(' ');
            }
            in_ws = false;
            out.push(c);
        }
    }
    out
}

struct Scanner {
    out: String,
    lossy: bool,
}

impl Scanner {
    fn scan(&mut self, src: &str) {
        let bytes = src.as_bytes();
        let mut pos = 0usize;
        while pos < bytes.len() {
            match bytes[pos] {
                b'\\' => pos = self.scan_command(src, pos),
                b'{' => pos += 1,
                b'}' => pos += 1,
                // Math toggles carry no text; the conversion rules are the
                // same inside and outside math.
                b'$' => pos += 1,
                b'~' => {
                    self.out.push(' ');
                    pos += 1;
                }
                _ => {
                    let c = src[pos..].chars().next().unwrap();
                    self.out.push(c);
                    pos += c.len_utf8();
                }
            }
        }
    }

    /// Handle a command starting at the backslash; returns the position
    /// after everything the command consumed.
    fn scan_command(&mut self, src: &str, start: usize) -> usize {
        let bytes = src.as_bytes();
        let mut pos = start + 1;
        let Some(&first) = bytes.get(pos) else {
            // Trailing lone backslash.
            self.lossy = true;
            return pos;
        };

        let name: String;
        if first.is_ascii_alphabetic() {
            let name_start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_alphabetic() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'*') {
                pos += 1;
            }
            name = src[name_start..pos].to_string();
        } else {
            let c = src[pos..].chars().next().unwrap();
            pos += c.len_utf8();
            match c {
                // Control space and forced line break become plain spaces.
                ' ' | '\t' | '\n' | '\\' => {
                    self.out.push(' ');
                    return pos;
                }
                _ => name = c.to_string(),
            }
        }

        let lookup = name.strip_suffix('*').unwrap_or(&name);

        if REF_MACROS.contains(&lookup) {
            pos = skip_optional_args(src, pos);
            let (_, next) = take_braced(src, pos);
            self.out.push_str("<ref>");
            return next;
        }
        if CITE_MACROS.contains(&lookup) {
            pos = skip_optional_args(src, pos);
            let (_, next) = take_braced(src, pos);
            self.out.push_str("<cit.>");
            return next;
        }
        if lookup == "begin" || lookup == "end" {
            // Display math environments inside captions get the same
            // best-effort treatment as inline math: drop the markers,
            // convert the body.
            let (_, next) = take_braced(src, pos);
            return next;
        }

        let rule = MACRO_TABLE.get(&name).or_else(|| MACRO_TABLE.get(lookup));
        match rule.map(|r| (r.kind, r.arity, r.replacement.clone())) {
            Some((MacroKind::Sym, _, replacement)) => {
                self.out.push_str(&replacement);
                pos
            }
            Some((MacroKind::Accent, _, mark)) => {
                let mark = mark.chars().next();
                self.apply_accent(src, pos, mark)
            }
            Some((MacroKind::Unwrap, arity, _)) => {
                let mut pos = skip_optional_args(src, pos);
                for _ in 0..arity.max(1) {
                    let (arg, next) = take_braced(src, pos);
                    let Some(arg) = arg else { break };
                    self.scan(arg);
                    pos = next;
                }
                pos
            }
            Some((MacroKind::Second, arity, _)) => {
                let mut pos = skip_optional_args(src, pos);
                let mut last: Option<&str> = None;
                for _ in 0..arity.max(2) {
                    let (arg, next) = take_braced(src, pos);
                    let Some(arg) = arg else { break };
                    last = Some(arg);
                    pos = next;
                }
                if let Some(arg) = last {
                    self.scan(arg);
                }
                pos
            }
            Some((MacroKind::Drop, arity, _)) => {
                let mut pos = skip_optional_args(src, pos);
                for _ in 0..arity {
                    let (arg, next) = take_braced(src, pos);
                    if arg.is_none() {
                        break;
                    }
                    pos = next;
                }
                pos
            }
            Some((MacroKind::Noop, _, _)) => skip_optional_args(src, pos),
            None => {
                // Unknown macro: drop the command, keep its required
                // argument text.
                self.lossy = true;
                let mut pos = skip_optional_args(src, pos);
                loop {
                    let (arg, next) = take_braced(src, pos);
                    let Some(arg) = arg else { break };
                    self.scan(arg);
                    pos = next;
                }
                pos
            }
        }
    }

    /// Apply an accent mark to the next unit: a braced group, a single
    /// character, or a command (e.g. `\'\i`).
    fn apply_accent(&mut self, src: &str, pos: usize, mark: Option<char>) -> usize {
        let pos = skip_ws(src, pos);
        let (base, next) = match src.as_bytes().get(pos) {
            Some(b'{') => {
                let (arg, next) = take_braced(src, pos);
                let mut sub = Scanner {
                    out: String::new(),
                    lossy: false,
                };
                sub.scan(arg.unwrap_or(""));
                self.lossy |= sub.lossy;
                (sub.out, next)
            }
            Some(b'\\') => {
                let mut sub = Scanner {
                    out: String::new(),
                    lossy: false,
                };
                let next = sub.scan_command(src, pos);
                self.lossy |= sub.lossy;
                (sub.out, next)
            }
            Some(_) => {
                let c = src[pos..].chars().next().unwrap();
                (c.to_string(), pos + c.len_utf8())
            }
            None => (String::new(), pos),
        };
        let mut chars = base.chars();
        match (chars.next(), mark) {
            (Some(first), Some(mark)) => {
                self.out.push_str(&compose_accent(first, mark));
                self.out.extend(chars);
            }
            (Some(first), None) => {
                self.out.push(first);
                self.out.extend(chars);
            }
            (None, _) => {}
        }
        next
    }
}

/// Precomposed forms for the common (base, combining mark) pairs; falls
/// back to the decomposed sequence.
fn compose_accent(base: char, mark: char) -> String {
    let composed = match (base, mark) {
        ('a', '\u{301}') => 'á', ('e', '\u{301}') => 'é', ('i', '\u{301}') => 'í',
        ('o', '\u{301}') => 'ó', ('u', '\u{301}') => 'ú', ('y', '\u{301}') => 'ý',
        ('A', '\u{301}') => 'Á', ('E', '\u{301}') => 'É', ('I', '\u{301}') => 'Í',
        ('O', '\u{301}') => 'Ó', ('U', '\u{301}') => 'Ú', ('c', '\u{301}') => 'ć',
        ('n', '\u{301}') => 'ń', ('s', '\u{301}') => 'ś', ('z', '\u{301}') => 'ź',
        ('ı', '\u{301}') => 'í',
        ('a', '\u{300}') => 'à', ('e', '\u{300}') => 'è', ('i', '\u{300}') => 'ì',
        ('o', '\u{300}') => 'ò', ('u', '\u{300}') => 'ù', ('A', '\u{300}') => 'À',
        ('E', '\u{300}') => 'È', ('ı', '\u{300}') => 'ì',
        ('a', '\u{302}') => 'â', ('e', '\u{302}') => 'ê', ('i', '\u{302}') => 'î',
        ('o', '\u{302}') => 'ô', ('u', '\u{302}') => 'û', ('ı', '\u{302}') => 'î',
        ('a', '\u{308}') => 'ä', ('e', '\u{308}') => 'ë', ('i', '\u{308}') => 'ï',
        ('o', '\u{308}') => 'ö', ('u', '\u{308}') => 'ü', ('y', '\u{308}') => 'ÿ',
        ('A', '\u{308}') => 'Ä', ('O', '\u{308}') => 'Ö', ('U', '\u{308}') => 'Ü',
        ('ı', '\u{308}') => 'ï',
        ('a', '\u{303}') => 'ã', ('n', '\u{303}') => 'ñ', ('o', '\u{303}') => 'õ',
        ('N', '\u{303}') => 'Ñ',
        ('c', '\u{327}') => 'ç', ('C', '\u{327}') => 'Ç', ('s', '\u{327}') => 'ş',
        ('a', '\u{30A}') => 'å', ('A', '\u{30A}') => 'Å',
        ('c', '\u{30C}') => 'č', ('s', '\u{30C}') => 'š', ('z', '\u{30C}') => 'ž',
        ('e', '\u{30C}') => 'ě', ('r', '\u{30C}') => 'ř',
        ('a', '\u{306}') => 'ă', ('g', '\u{306}') => 'ğ',
        ('o', '\u{30B}') => 'ő', ('u', '\u{30B}') => 'ű',
        ('a', '\u{328}') => 'ą', ('e', '\u{328}') => 'ę',
        ('e', '\u{304}') => 'ē', ('o', '\u{304}') => 'ō', ('a', '\u{304}') => 'ā',
        ('z', '\u{307}') => 'ż',
        _ => return format!("{base}{mark}"),
    };
    composed.to_string()
}

fn skip_ws(src: &str, mut pos: usize) -> usize {
    let bytes = src.as_bytes();
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    pos
}

/// Skip whitespace plus any `[...]` groups (dropped).
fn skip_optional_args(src: &str, mut pos: usize) -> usize {
    loop {
        let after_ws = skip_ws(src, pos);
        if src.as_bytes().get(after_ws) != Some(&b'[') {
            return pos;
        }
        let bytes = src.as_bytes();
        let mut p = after_ws + 1;
        let mut depth = 0usize;
        let mut closed = false;
        while p < bytes.len() {
            match bytes[p] {
                b'\\' => p += 2,
                b'{' => {
                    depth += 1;
                    p += 1;
                }
                b'}' => {
                    depth = depth.saturating_sub(1);
                    p += 1;
                }
                b']' if depth == 0 => {
                    p += 1;
                    closed = true;
                    break;
                }
                _ => p += 1,
            }
        }
        if !closed {
            return pos;
        }
        pos = p;
    }
}

/// Take one balanced `{...}` group after optional whitespace. Returns the
/// inner slice and the position after the closing brace, or `(None, pos)`
/// when the next token is not a group.
fn take_braced(src: &str, pos: usize) -> (Option<&str>, usize) {
    let start = skip_ws(src, pos);
    let bytes = src.as_bytes();
    if bytes.get(start) != Some(&b'{') {
        return (None, pos);
    }
    let mut p = start + 1;
    let mut depth = 1usize;
    while p < bytes.len() {
        match bytes[p] {
            b'\\' => p += 2,
            b'{' => {
                depth += 1;
                p += 1;
            }
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return (Some(&src[start + 1..p]), p + 1);
                }
                p += 1;
            }
            _ => p += 1,
        }
    }
    // Unclosed group: take everything.
    (Some(&src[start + 1..]), src.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(s: &str) -> String {
        normalize_caption(s).text
    }

    #[test]
    fn plain_text_is_identity() {
        assert_eq!(norm("plain text caption"), "plain text caption");
    }

    #[test]
    fn refs_and_cites_are_replaced() {
        assert_eq!(
            norm("Results (see \\ref{fig:2}) from \\cite{smith2020}."),
            "Results (see <ref>) from <cit.>."
        );
    }

    #[test]
    fn all_ref_macros_map() {
        for m in ["ref", "eqref", "autoref", "cref", "Cref"] {
            assert_eq!(norm(&format!("\\{m}{{x}}")), "<ref>", "macro {m}");
        }
    }

    #[test]
    fn all_cite_macros_map() {
        for m in ["cite", "citep", "citet"] {
            assert_eq!(norm(&format!("\\{m}{{x}}")), "<cit.>", "macro {m}");
        }
    }

    #[test]
    fn cite_with_optional_arg() {
        assert_eq!(norm("\\cite[p.~5]{x}"), "<cit.>");
    }

    #[test]
    fn symbols_and_math() {
        assert_eq!(norm("\\textbf{Bold} $\\alpha=2$ result"), "Bold α=2 result");
        assert_eq!(norm("50\\% of $n$"), "50% of n");
        assert_eq!(norm("A--B and A---B"), "A–B and A—B");
        assert_eq!(norm("Si\\&Ge"), "Si&Ge");
    }

    #[test]
    fn unknown_macro_keeps_argument_text() {
        let c = normalize_caption("\\unknowncmd{kept}");
        assert_eq!(c.text, "kept");
        assert!(c.lossy);
    }

    #[test]
    fn unknown_macro_without_args_is_dropped() {
        let c = normalize_caption("a \\mysterycmd b");
        assert_eq!(c.text, "a b");
        assert!(c.lossy);
    }

    #[test]
    fn known_macros_are_not_lossy() {
        let c = normalize_caption("\\textbf{x} \\alpha \\ref{y}");
        assert!(!c.lossy);
    }

    #[test]
    fn accents_compose() {
        assert_eq!(norm("Poincar\\'e"), "Poincaré");
        assert_eq!(norm("Poincar\\'{e}"), "Poincaré");
        assert_eq!(norm("Schr\\\"odinger"), "Schrödinger");
        assert_eq!(norm("\\c{c}a"), "ça");
    }

    #[test]
    fn replacement_counts_match_output() {
        let c = normalize_caption("\\ref{a} \\ref{b} \\cite{c}");
        assert_eq!(c.replacements.ref_count, 2);
        assert_eq!(c.replacements.cit_count, 1);
        assert_eq!(c.text.matches("<ref>").count(), 2);
    }

    #[test]
    fn char_length_counts_scalars() {
        assert_eq!(normalize_caption("").char_length, 0);
        assert_eq!(normalize_caption("abc").char_length, 3);
        let c = normalize_caption("αβ");
        assert_eq!(c.char_length, 2);
        assert_eq!(caption_char_length(&c), 2);
    }

    #[test]
    fn whitespace_is_collapsed_and_trimmed() {
        assert_eq!(norm("  a\n\n  b\t c  "), "a b c");
        let c = normalize_caption("  x  y  ");
        assert!(!c.text.starts_with(' ') && !c.text.ends_with(' '));
        assert!(!c.text.contains("  "));
    }

    #[test]
    fn no_stray_structural_characters_in_output() {
        for src in [
            "\\$5 and \\{set\\}",
            "$a$b$c",
            "{{nested {deep}}}",
            "\\textbackslash x",
        ] {
            let out = norm(src);
            assert!(!out.contains('\\'), "{src:?} -> {out:?}");
            assert!(!out.contains('{'), "{src:?} -> {out:?}");
            assert!(!out.contains('}'), "{src:?} -> {out:?}");
            assert!(!out.contains('$'), "{src:?} -> {out:?}");
        }
    }

    #[test]
    fn display_math_environment_is_converted() {
        assert_eq!(
            norm("Energy \\begin{equation}E = m c^2\\end{equation} shown"),
            "Energy E = m c^2 shown"
        );
    }

    #[test]
    fn label_is_dropped_entirely() {
        assert_eq!(norm("Caption.\\label{fig:one}"), "Caption.");
    }

    #[test]
    fn textcolor_keeps_only_payload() {
        assert_eq!(norm("\\textcolor{red}{warning}"), "warning");
        assert_eq!(norm("\\href{http://x.org}{link text}"), "link text");
    }

    #[test]
    fn ties_and_quotes() {
        assert_eq!(norm("Fig.~1 shows ``quoted'' text"), "Fig. 1 shows “quoted” text");
    }

    #[test]
    fn idempotence_on_goldens() {
        let samples = [
            "Results (see \\ref{fig:2}) from \\cite{smith2020}.",
            "\\textbf{Bold} $\\alpha=2$ result",
            "Poincar\\'e map at 50\\%",
            "A--B ``quote'' \\unknowncmd{kept} \\$5",
            "{group} $x^2$ \\begin{align}y\\end{align}",
        ];
        for s in samples {
            let once = normalize_caption(s);
            let twice = normalize_caption(&once.text);
            assert_eq!(once.text, twice.text, "not idempotent on {s:?}");
        }
    }

    #[test]
    fn jats_plaintext_passes_through() {
        assert_eq!(
            norm("Tumor section with   marker <ref> intact."),
            "Tumor section with marker <ref> intact."
        );
    }

    #[test]
    fn table_hash_is_stable_hex() {
        let h = macro_table_sha256();
        assert_eq!(h.len(), 64);
        assert_eq!(h, macro_table_sha256());
    }
}
