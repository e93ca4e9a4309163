//! Parsing tag lists out of free-form chat replies.

/// Number of tags requested per cluster.
pub const TAGS_PER_CLUSTER: usize = 10;

/// Strips a leading list marker (`1.`, `2)`, `-`, `*`, `•`) and returns the
/// rest, or `None` if the line has no marker.
fn strip_marker(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for bullet in ['-', '*', '•', '–'] {
        if let Some(rest) = t.strip_prefix(bullet) {
            if rest.starts_with(char::is_whitespace) {
                return Some(rest);
            }
        }
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 && digits <= 3 {
        let rest = &t[digits..];
        for sep in ['.', ')', ':'] {
            if let Some(r) = rest.strip_prefix(sep) {
                if r.is_empty() || r.starts_with(char::is_whitespace) {
                    return Some(r);
                }
            }
        }
    }
    None
}

/// Trims whitespace, surrounding quotes, markdown emphasis and trailing
/// punctuation.
fn clean(tag: &str) -> String {
    let quote = |c: char| matches!(c, '"' | '\'' | '“' | '”' | '‘' | '’' | '`');
    let mut s = tag.trim().replace("**", "").replace("__", "");
    loop {
        let t = s
            .trim()
            .trim_end_matches(['.', ',', ';', '!'])
            .trim_matches(quote)
            .trim();
        if t.len() == s.len() {
            break;
        }
        s = t.to_string();
    }
    s
}

fn push_unique(out: &mut Vec<String>, tag: String) {
    if !tag.is_empty() && !out.iter().any(|t| t.to_lowercase() == tag.to_lowercase()) {
        out.push(tag);
    }
}

/// Strict parse: if any line carries a list marker only marked lines count,
/// otherwise every non-empty line does. Lines ending with a colon are treated
/// as headers. Tags are cleaned and deduplicated case-insensitively, first
/// occurrence wins.
pub fn parse_tags(response: &str) -> Vec<String> {
    let lines: Vec<&str> = response.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let marked: Vec<&str> = lines.iter().filter_map(|l| strip_marker(l)).collect();
    let candidates = if marked.is_empty() { lines } else { marked };
    let mut out = Vec::new();
    for c in candidates {
        if c.trim_end().ends_with(':') {
            continue;
        }
        push_unique(&mut out, clean(c));
    }
    out
}

/// Loose parse used to pad short lists: every line, with or without marker,
/// split further on commas and semicolons.
pub fn parse_tags_loose(response: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in response.lines() {
        let line = line.trim();
        if line.is_empty() || line.ends_with(':') {
            continue;
        }
        let body = strip_marker(line).unwrap_or(line);
        for piece in body.split([',', ';']) {
            push_unique(&mut out, clean(piece));
        }
    }
    out
}
