//! Minimal POSIX-shell word splitter: quotes, backslash escapes and the
//! command separators `&&`, `||`, `;`, `|`, `&`. No expansion is performed.

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Word(String),
    Op(String),
}

pub fn tokenize(s: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut in_word = false;
    let mut chars = s.chars().peekable();

    fn flush(out: &mut Vec<Token>, word: &mut String, in_word: &mut bool) {
        if *in_word {
            out.push(Token::Word(std::mem::take(word)));
            *in_word = false;
        }
    }

    while let Some(c) = chars.next() {
        match c {
            '\'' => {
                in_word = true;
                for q in chars.by_ref() {
                    if q == '\'' {
                        break;
                    }
                    word.push(q);
                }
            }
            '"' => {
                in_word = true;
                while let Some(q) = chars.next() {
                    match q {
                        '"' => break,
                        '\\' => match chars.peek() {
                            Some(&n @ ('"' | '\\' | '$' | '`')) => {
                                word.push(n);
                                chars.next();
                            }
                            _ => word.push('\\'),
                        },
                        q => word.push(q),
                    }
                }
            }
            '\\' => {
                in_word = true;
                if let Some(n) = chars.next() {
                    if n != '\n' {
                        word.push(n);
                    }
                }
            }
            '&' if word.ends_with('>') || word.ends_with('<') => word.push(c),
            '&' | '|' => {
                flush(&mut out, &mut word, &mut in_word);
                if chars.peek() == Some(&c) {
                    chars.next();
                    out.push(Token::Op(format!("{c}{c}")));
                } else {
                    out.push(Token::Op(c.to_string()));
                }
            }
            ';' | '\n' | '(' | ')' => {
                flush(&mut out, &mut word, &mut in_word);
                out.push(Token::Op(c.to_string()));
            }
            c if c.is_whitespace() => flush(&mut out, &mut word, &mut in_word),
            c => {
                in_word = true;
                word.push(c);
            }
        }
    }
    flush(&mut out, &mut word, &mut in_word);
    out
}

/// Splits a command line into simple commands (word lists).
pub fn commands(s: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokenize(s) {
        match t {
            Token::Word(w) => cur.push(w),
            Token::Op(_) => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Splits on unquoted whitespace, removing quotes; `escape` escapes the next
/// character. Used for `KEY=value` instruction arguments.
pub fn split_words(s: &str, escape: char) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut in_word = false;
    let mut quote: Option<char> = None;
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        match quote {
            Some(q) if c == q => quote = None,
            Some('"') if c == escape => {
                if let Some(n) = chars.next() {
                    if n != '"' && n != escape {
                        word.push(c);
                    }
                    word.push(n);
                }
            }
            Some(_) => word.push(c),
            None if c == '"' || c == '\'' => {
                in_word = true;
                quote = Some(c);
            }
            None if c == escape => {
                in_word = true;
                if let Some(n) = chars.next() {
                    word.push(n);
                }
            }
            None if c.is_whitespace() => {
                if in_word {
                    out.push(std::mem::take(&mut word));
                    in_word = false;
                }
            }
            None => {
                in_word = true;
                word.push(c);
            }
        }
    }
    if in_word {
        out.push(word);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_sequences() {
        let cmds = commands("apt-get update && apt-get install -y 'a b' c=1 || true; echo \"x && y\" | wc");
        assert_eq!(
            cmds,
            vec![
                vec!["apt-get", "update"],
                vec!["apt-get", "install", "-y", "a b", "c=1"],
                vec!["true"],
                vec!["echo", "x && y"],
                vec!["wc"],
            ]
        );
    }

    #[test]
    fn redirection_ampersand_stays_in_word() {
        assert_eq!(commands("make 2>&1 && ls"), vec![vec!["make", "2>&1"], vec!["ls"]]);
    }

    #[test]
    fn words_with_quotes() {
        assert_eq!(
            split_words(r#"A=1 B="two words" C=a\ b D='x'"#, '\\'),
            ["A=1", "B=two words", "C=a b", "D=x"]
        );
    }
}
