/// Lowercases, splits on whitespace and makes every punctuation character
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars().flat_map(char::to_lowercase) {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins tokens with single spaces, attaching sentence punctuation to the
/// preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let attach = matches!(t.as_str(), "." | "," | "!" | "?" | ";" | ":");
        if i > 0 && !attach {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_basic() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A black car."), ["a", "black", "car", "."]);
        assert_eq!(tokenize("  Hi,there!  "), ["hi", ",", "there", "!"]);
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        let toks = tokenize("ein hund , der rennt .");
        assert_eq!(detokenize(&toks), "ein hund, der rennt.");
        assert_eq!(tokenize(&detokenize(&toks)), toks);
    }
}
